#pragma once

#include <cstdint>
#include <vector>

#include "maskflow/codec.hpp"
#include "maskflow/synthworld.hpp"
#include "maskflow/tensor.hpp"

// Seeded training/evaluation examples drawn from the synthetic world.
namespace maskflow::data {

struct DataConfig {
    world::WorldConfig world;
    std::size_t frames = 16;
    std::size_t min_entities = 1;
    std::size_t max_entities = 3;
    std::size_t spatial = 4;
    std::size_t audio_tokens = 4;
};

struct Sample {
    std::uint64_t seed = 0;
    world::SceneSpec scene;
    world::AudioTrack audio;  // drives every entity of the scene
    world::AudioStyle style = world::AudioStyle::speech;
    world::VideoClip clip;
    world::MaskSet masks;
    world::Mask talking_mask;  // union of entity masks
    Tensor latent;             // (F * h * w) x C tokens
    Tensor reference;          // (h * w) x C tokens of the neutral reference frame
    Tensor audio_tokens;       // (F * l) x d_a
    std::size_t latent_frames = 0;
};

Sample make_sample(std::uint64_t seed, const DataConfig& cfg);

// Reference tokens of a scene: the closed-mouth first frame, held for one chunk.
Tensor reference_tokens(const world::SceneSpec& scene, std::size_t spatial);

world::Mask union_mask(const world::MaskSet& masks);

}  // namespace maskflow::data
