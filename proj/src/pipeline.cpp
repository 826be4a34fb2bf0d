#include "maskflow/pipeline.hpp"

#include <exception>
#include <thread>

#include "maskflow/codec.hpp"
#include "maskflow/data.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::pipeline {

namespace {

// Calls fn(i) for i in [0, n) on up to `threads` workers; results keep index order.
template <class T, class Fn>
std::vector<T> parallel_map(std::size_t n, std::size_t threads, Fn fn) {
    std::vector<T> out(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t tid, std::size_t nt) {
        for (std::size_t i = tid; i < n; i += nt) {
            try {
                out[i] = fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t nt = std::max<std::size_t>(1, std::min(threads, n));
    if (nt == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t tid = 0; tid < nt; ++tid) pool.emplace_back(work, tid, nt);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

data::DataConfig eval_data(const config::RunConfig& rc, std::size_t frames, std::size_t entities) {
    data::DataConfig dc;
    dc.world = rc.world;
    dc.world.sync_defect = 0.0;
    dc.frames = frames;
    dc.min_entities = entities;
    dc.max_entities = entities;
    dc.audio_tokens = rc.model.audio_tokens;
    return dc;
}

sample::SamplerConfig eval_sampler(const config::RunConfig& rc, std::uint64_t seed) {
    sample::SamplerConfig sc = rc.sampler;
    sc.seed = seed;
    sc.threads = 1;
    return sc;
}

}  // namespace

ParamStore fresh_params(const config::RunConfig& rc) {
    ParamStore p = dit::init_params(rc.model, rc.init_seed());
    train::fit_preconditioner_from_data(p, rc.model, rc.stage_config(0, 1), rc.train.precond_clips);
    return p;
}

void check_compatible(const ParamStore& p, const dit::ModelConfig& mc) {
    const ParamStore expect = dit::init_params(mc, 0);
    if (expect.size() != p.size())
        throw StageContractError("checkpoint holds " + std::to_string(p.size()) + " tensors, model expects " +
                                 std::to_string(expect.size()));
    for (const auto& [name, prm] : expect.entries()) {
        if (!p.contains(name)) throw StageContractError("checkpoint lacks '" + name + "'");
        if (p.get(name).shape() != prm.value.shape())
            throw StageContractError("'" + name + "' has shape " + shape_str(p.get(name).shape()) + ", model expects " +
                                     shape_str(prm.value.shape()));
        if (p.group(name) != prm.group) throw StageContractError("'" + name + "' has the wrong group tag");
    }
}

TrainOutcome train_stage(const config::RunConfig& rc, int stage, const std::optional<ckpt::Checkpoint>& in,
                         std::size_t threads, bool timing) {
    if (stage < 0 || stage > 3) throw ConfigError("stage must be 0, 1, 2 or 3");
    ParamStore start;
    if (stage == 0) {
        if (in) throw StageContractError("stage 0 starts from fresh weights and takes no input checkpoint");
        start = fresh_params(rc);
    } else if (!in) {
        if (stage > 1)
            throw StageContractError("stage " + std::to_string(stage) + " needs a stage-" + std::to_string(stage - 1) +
                                     " checkpoint");
        start = fresh_params(rc);
    } else {
        if (in->stage != stage - 1)
            throw StageContractError("stage " + std::to_string(stage) + " needs a stage-" + std::to_string(stage - 1) +
                                     " checkpoint, got stage " + std::to_string(in->stage));
        check_compatible(in->params, rc.model);
        start = in->params;
    }
    train::TrainConfig tc = rc.stage_config(stage, threads);
    tc.timing = timing;
    train::StageResult r = train::run_stage(start, rc.model, tc);
    TrainOutcome out;
    out.checkpoint.params = std::move(r.params);
    out.checkpoint.params.set_trainable({});
    out.checkpoint.config_hash = rc.hash();
    out.checkpoint.stage = stage;
    out.log = std::move(r.log);
    out.skipped_pairs = r.skipped_pairs;
    return out;
}

std::vector<ckpt::Checkpoint> train_all(const config::RunConfig& rc, int last, std::size_t threads) {
    std::vector<ckpt::Checkpoint> out;
    std::optional<ckpt::Checkpoint> prev;
    for (int s = 0; s <= last; ++s) {
        TrainOutcome o = train_stage(rc, s, prev, threads);
        prev = o.checkpoint;
        out.push_back(std::move(o.checkpoint));
    }
    return out;
}

ad::GradCheckResult model_grad_check(const config::RunConfig& rc, std::uint64_t seed, std::size_t n_coords) {
    const dit::ModelConfig& mc = rc.model;
    ParamStore p = dit::init_params(mc, substream_seed(seed, "gradcheck:init"));
    Rng rng(seed, "gradcheck:perturb");
    for (const std::string& name : p.names()) {
        const bool zero_init = name.ends_with("lora_up") || name.ends_with("audio_attn.o.weight");
        if (!zero_init) continue;
        for (double& v : p.mutable_value(name).storage()) v = 0.05 * rng.normal();
    }
    p.set_trainable({Group::base_self_attn, Group::base_cross_attn, Group::lora, Group::audio_cross_attn, Group::other});
    const data::DataConfig dc = eval_data(rc, mc.latent_frames * codec::kChunk, 2);
    const data::Sample s = data::make_sample(substream_seed(seed, "gradcheck:sample"), dc);
    const Tensor z0 = Rng(seed, "gradcheck:noise").normal_tensor(s.latent.shape());
    const double t = 0.37;
    dit::ConditionBundle c;
    c.reference = s.reference;
    c.audio = s.audio_tokens;
    auto loss = [&](ad::Graph& g, const ParamStore& ps) {
        return train::flow_matching_loss(g, ps, mc, z0, s.latent, c, t, {true, true});
    };
    ad::GradCheckOptions opts;
    opts.n_coords = n_coords;
    opts.seed = seed;
    return ad::grad_check(loss, p, opts);
}

world::VideoClip decode_tokens(const Tensor& tokens, std::size_t latent_frames, const dit::ModelConfig& mc) {
    return codec::decode(codec::LatentSeq::from_tokens(tokens, latent_frames, mc.grid_h, mc.grid_w, 4),
                         codec::DecodeMode::render);
}

sample::GuidanceSpec entity_guidance(const world::SceneSpec& scene, const std::vector<world::AudioTrack>& audios,
                                     const dit::ModelConfig& mc, double lambda) {
    if (audios.size() != scene.n_entities())
        throw ArgumentError("entity_guidance: " + std::to_string(audios.size()) + " audios for " +
                            std::to_string(scene.n_entities()) + " entities");
    if (audios.empty()) throw ArgumentError("entity_guidance: no entities");
    const world::MaskSet lm = codec::downsample_masks(world::scene_masks(scene), 4);
    const std::size_t frames = audios[0].frames() / codec::kChunk;
    sample::GuidanceSpec spec;
    spec.entries.push_back({dit::silent_tokens(frames, mc), lm.masks[0], lambda});
    for (std::size_t k = 0; k < audios.size(); ++k)
        spec.entries.push_back({dit::aggregate_audio(audios[k], mc.audio_tokens), lm.masks[k + 1], lambda});
    return spec;
}

std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = base + i;
    return s;
}

SyncRun sync_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                      std::size_t threads) {
    const dit::ModelConfig& mc = rc.model;
    const data::DataConfig dc = eval_data(rc, rc.eval.frames, 1);
    const std::size_t F = rc.eval.frames / codec::kChunk;
    using Pair = std::pair<double, double>;
    auto res = parallel_map<Pair>(seeds.size(), threads, [&](std::size_t i) {
        const std::uint64_t seed = seeds[i];
        const data::Sample s = data::make_sample(substream_seed(seed, "eval:sample"), dc);
        const world::AudioTrack control =
            world::synth_audio(substream_seed(seed, "eval:control"), rc.eval.frames, world::AudioStyle::speech);
        const sample::ModelRef m{&p, &mc, {true, true}, nullptr};
        const Tensor lat =
            sample::sample_clip(m, s.reference, s.audio_tokens, F, eval_sampler(rc, substream_seed(seed, "eval:noise")));
        const world::VideoClip clip = decode_tokens(lat, F, mc);
        return Pair{world::sync_oracle(clip, s.talking_mask, s.audio), world::sync_oracle(clip, s.talking_mask, control)};
    });
    SyncRun out;
    for (const auto& [a, b] : res) {
        out.matched.push_back(a);
        out.control.push_back(b);
    }
    return out;
}

MultiRun multi_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                        std::size_t threads) {
    const dit::ModelConfig& mc = rc.model;
    const std::size_t n = rc.eval.n_entities, frames = rc.eval.frames, F = frames / codec::kChunk;
    if (n < 2) throw ArgumentError("multi_protocol needs at least 2 entities");
    struct Row {
        double margin = 0, leak = 0, diag = 0;
    };
    auto rows = parallel_map<Row>(seeds.size(), threads, [&](std::size_t i) {
        const std::uint64_t seed = seeds[i];
        const world::SceneSpec scene = world::random_scene(substream_seed(seed, "eval:scene"), n, rc.world);
        std::vector<world::AudioTrack> audios;
        for (std::size_t k = 0; k < n; ++k)
            audios.push_back(world::synth_audio(substream_seed(seed, "eval:audio", k), frames, world::AudioStyle::speech));
        const Tensor ref = data::reference_tokens(scene, 4);
        const Tensor x0 = sample::initial_noise({F * mc.cells(), mc.channels}, substream_seed(seed, "eval:noise"));
        const sample::ModelRef m{&p, &mc, {true, true}, nullptr};
        auto generate = [&](const std::vector<world::AudioTrack>& a) {
            const sample::GuidanceSpec spec = entity_guidance(scene, a, mc, rc.sampler.cfg_scale);
            const Tensor lat = sample::euler_sample(
                x0, [&](const Tensor& x, double t) { return sample::mask_cfg_velocity(m, x, t, ref, spec); },
                rc.sampler.n_steps);
            return decode_tokens(lat, F, mc);
        };
        const world::MaskSet masks = world::scene_masks(scene);
        const std::vector<world::Mask> entity_masks(masks.masks.begin() + 1, masks.masks.end());
        const world::VideoClip clip = generate(audios);
        const eval::SyncMatrix S = eval::sync_eval(clip, entity_masks, audios);
        const std::size_t target = seed % n;
        std::vector<world::AudioTrack> swapped = audios;
        swapped[target] = world::synth_audio(substream_seed(seed, "eval:swap"), frames, world::AudioStyle::speech);
        const world::VideoClip clip2 = generate(swapped);
        Row r;
        r.margin = S.row_margin();
        r.leak = eval::leakage(clip, clip2, entity_masks[target]);
        r.diag = eval::summarize(S.diagonal()).mean;
        return r;
    });
    MultiRun out;
    for (const auto& r : rows) {
        out.margin.push_back(r.margin);
        out.leakage.push_back(r.leak);
        out.diagonal.push_back(r.diag);
    }
    return out;
}

std::vector<std::size_t> long_boundaries(const config::RunConfig& rc) {
    const std::size_t total = rc.eval.frames / codec::kChunk * rc.eval.long_factor;
    std::vector<std::size_t> b;
    for (std::size_t c : sample::extension_segment_starts(total, rc.sampler.seg_chunks, rc.sampler.context_chunks))
        b.push_back(c * codec::kChunk);
    return b;
}

LongRun long_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                      std::size_t threads) {
    const dit::ModelConfig& mc = rc.model;
    const std::size_t total = rc.eval.frames / codec::kChunk * rc.eval.long_factor;
    if (total <= rc.sampler.seg_chunks) throw ArgumentError("long_protocol: generation is not longer than one segment");
    const std::vector<std::size_t> bounds = long_boundaries(rc);
    const data::DataConfig dc = eval_data(rc, total * codec::kChunk, 1);
    struct Row {
        double b[2]{}, d[2]{}, s[2]{};
    };
    auto rows = parallel_map<Row>(seeds.size(), threads, [&](std::size_t i) {
        const std::uint64_t seed = seeds[i];
        const data::Sample s = data::make_sample(substream_seed(seed, "eval:long_sample"), dc);
        const sample::ModelRef m{&p, &mc, {true, true}, nullptr};
        Row r;
        for (int k = 0; k < 2; ++k) {
            sample::SamplerConfig sc = eval_sampler(rc, substream_seed(seed, "eval:long_noise"));
            sc.mode = k == 0 ? sample::LongMode::position_shift : sample::LongMode::final_latent_extension;
            const Tensor lat = sample::generate_long(m, s.reference, s.audio_tokens, total, sc);
            const world::VideoClip clip = decode_tokens(lat, total, mc);
            r.b[k] = eval::boundary_discontinuity(clip, bounds);
            r.d[k] = eval::drift_stats(clip, rc.eval.frames).max_drift;
            r.s[k] = world::sync_oracle(clip, s.talking_mask, s.audio);
        }
        return r;
    });
    LongRun out;
    for (const auto& r : rows) {
        out.boundary_shift.push_back(r.b[0]);
        out.boundary_ext.push_back(r.b[1]);
        out.drift_shift.push_back(r.d[0]);
        out.drift_ext.push_back(r.d[1]);
        out.sync_shift.push_back(r.s[0]);
        out.sync_ext.push_back(r.s[1]);
    }
    return out;
}

}  // namespace maskflow::pipeline
