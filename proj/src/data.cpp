#include "maskflow/data.hpp"

#include "maskflow/errors.hpp"
#include "maskflow/model.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::data {

Tensor reference_tokens(const world::SceneSpec& scene, std::size_t spatial) {
    return codec::encode_reference(world::render_reference(scene), spatial).tokens();
}

world::Mask union_mask(const world::MaskSet& masks) {
    if (masks.size() < 2) throw ArgumentError("union_mask: no entity masks");
    world::Mask m = masks.masks[1];
    for (std::size_t i = 2; i < masks.size(); ++i)
        for (std::size_t k = 0; k < m.size(); ++k) m[k] = std::max(m[k], masks.masks[i][k]);
    return m;
}

Sample make_sample(std::uint64_t seed, const DataConfig& cfg) {
    if (cfg.min_entities == 0 || cfg.max_entities < cfg.min_entities) throw ConfigError("bad entity count range");
    Rng rng(seed, "sample");
    Sample s;
    s.seed = seed;
    const auto n = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_entities), static_cast<std::int64_t>(cfg.max_entities)));
    s.scene = world::random_scene(substream_seed(seed, "scene_spec"), n, cfg.world);
    s.style = rng.uniform() < 0.5 ? world::AudioStyle::speech : world::AudioStyle::song;
    s.audio = world::synth_audio(substream_seed(seed, "audio"), cfg.frames, s.style);
    auto [clip, masks] = world::render_scene(s.scene, std::vector<world::AudioTrack>(n, s.audio), cfg.frames);
    s.clip = std::move(clip);
    s.masks = std::move(masks);
    s.talking_mask = union_mask(s.masks);
    const codec::LatentSeq lat = codec::encode(s.clip, cfg.spatial);
    s.latent_frames = lat.frames();
    s.latent = lat.tokens();
    s.reference = reference_tokens(s.scene, cfg.spatial);
    s.audio_tokens = dit::aggregate_audio(s.audio, cfg.audio_tokens);
    return s;
}

}  // namespace maskflow::data
