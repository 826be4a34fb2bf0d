#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "maskflow/model.hpp"
#include "maskflow/params.hpp"
#include "maskflow/tensor.hpp"

namespace maskflow::sample {

enum class LongMode { position_shift, final_latent_extension };

LongMode long_mode_from_name(const std::string& name);
std::string long_mode_name(LongMode m);

struct SamplerConfig {
    std::size_t n_steps = 20;
    double cfg_scale = 5.0;
    LongMode mode = LongMode::position_shift;
    std::size_t seg_chunks = 4;      // F_seg
    std::size_t context_chunks = 1;  // k, extension mode only
    std::size_t shift = 1;           // delta, chunks per denoising step
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const;
};

// A loaded model plus the forward flags used at inference. Counts forward
// passes when `passes` is set.
struct ModelRef {
    const ParamStore* params = nullptr;
    const dit::ModelConfig* cfg = nullptr;
    dit::ForwardFlags flags;
    std::size_t* passes = nullptr;

    Tensor operator()(const Tensor& x_t, double t, const Tensor& reference, const Tensor* audio) const;
};

using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;

// x at t = 0 is `x0`; x <- x + dt * v(x, t) on t = 0, 1/n, ..., (n-1)/n.
Tensor euler_sample(const Tensor& x0, const VelocityFn& v, std::size_t n_steps);
Tensor initial_noise(const Shape& shape, std::uint64_t seed, std::uint64_t index = 0);

bool is_silent(const Tensor& audio_tokens);

// v_u + lambda * (v_c - v_u); v_u is the silence-conditioned branch.
Tensor cfg_velocity(const ModelRef& m, const Tensor& x_t, double t, const Tensor& reference, const Tensor& audio,
                    double lambda);

struct GuidanceEntry {
    Tensor audio;  // (F * l) x d_a tokens
    Tensor mask;   // h x w latent mask, 0/1
    double lambda = 5.0;
};

// Entry 0 is the silent background. The latent masks must partition the grid.
// A single entry covering the whole grid may carry audio; it reduces to
// standard guidance.
struct GuidanceSpec {
    std::vector<GuidanceEntry> entries;

    void validate(std::size_t grid_h, std::size_t grid_w) const;
};

// v_u + sum_i lambda_i m_i (v_ci - v_u), with one silence pass plus one pass
// per distinct non-silent audio. Masks broadcast over frames and channels.
Tensor mask_cfg_velocity(const ModelRef& m, const Tensor& x_t, double t, const Tensor& reference,
                         const GuidanceSpec& spec, std::size_t threads = 1);

// Brute-force check that p(a | x) equals p(a | x restricted to the region a
// acts on) for a random discrete model. With `coupled`, a second region also
// depends on a, which breaks the identity.
double verify_mask_factorization(std::size_t n_regions, std::size_t n_states, std::size_t n_audios,
                                 std::uint64_t seed, bool coupled = false);

// Single-window sampling with standard guidance.
Tensor sample_clip(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t frames,
                   const SamplerConfig& sc);

// Latent chunk index where each extension-mode segment after the first starts.
std::vector<std::size_t> extension_segment_starts(std::size_t total_chunks, std::size_t seg_chunks,
                                                  std::size_t context_chunks);

// `audio` covers all F_total chunks ((F_total * l) x d_a). Returns
// (F_total * h * w) x C latent tokens.
Tensor generate_long(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t total_chunks,
                         const SamplerConfig& sc);

}  // namespace maskflow::sample
