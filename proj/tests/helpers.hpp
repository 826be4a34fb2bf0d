#pragma once

#include <cmath>
#include <limits>

#include "maskflow/model.hpp"
#include "maskflow/rng.hpp"

namespace testing {

// Narrow model on the standard 8x8x192 latent grid; fast enough for
// gradient checks and many forward passes.
inline maskflow::dit::ModelConfig small_model() {
    maskflow::dit::ModelConfig mc;
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.lora_rank = 2;
    mc.lora_alpha = 4.0;
    mc.time_dim = 16;
    mc.mlp_ratio = 2;
    return mc;
}

inline maskflow::Tensor random_tensor(maskflow::Shape shape, std::uint64_t seed, double scale = 1.0) {
    return maskflow::Rng(seed, "test").normal_tensor(std::move(shape), scale);
}

// Perturbs zero-initialized adapter and output weights so every path carries signal.
inline void wake_zero_inits(maskflow::ParamStore& p, std::uint64_t seed, double scale = 0.05) {
    maskflow::Rng rng(seed, "test:wake");
    for (const auto& name : p.names()) {
        if (!(name.ends_with("lora_up") || name.ends_with("audio_attn.o.weight"))) continue;
        for (double& v : p.mutable_value(name).storage()) v = scale * rng.normal();
    }
}

}  // namespace testing
