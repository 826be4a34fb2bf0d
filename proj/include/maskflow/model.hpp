#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "maskflow/autodiff.hpp"
#include "maskflow/params.hpp"
#include "maskflow/synthworld.hpp"
#include "maskflow/tensor.hpp"

// Tiny diffusion transformer predicting the flow-matching velocity of a
// latent sequence, conditioned on a reference latent frame (prepended as
// context tokens), the timestep, and per-frame audio tokens.
//
// Parameter names are stable identifiers (checkpoints and group audits rely
// on them). Weights are stored input-major, d_in x d_out, so a layer computes
// x * W + b. A LoRA adapter on weight `P.weight` is the pair
// `P.lora_down` (d_in x r) and `P.lora_up` (r x d_out); its effective weight
// is W + (alpha / r) * lora_down * lora_up.
//
//   patch_embed.{weight,bias}, ref_embed, time_mlp.fc{1,2}.{weight,bias}   other
//   blocks.<i>.norm{1,2}.{gain,bias}, blocks.<i>.mlp.fc{1,2}.{weight,bias} other
//   blocks.<i>.self_attn.{q,k,v,o}.{weight,bias}                           base_self_attn
//   blocks.<i>.self_attn.{q,k,v,o}.{lora_down,lora_up}                     lora
//   audio_embed.weight                                                     audio_cross_attn
//   blocks.<i>.audio_attn.norm.{gain,bias}, .q.{weight,bias},
//   .k.{weight,slot_bias}, .v.weight, .o.weight                            audio_cross_attn
//   final_norm.{gain,bias}, unembed.{weight,bias}                          other
namespace maskflow::dit {

struct ModelConfig {
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    std::size_t latent_frames = 4;  // nominal window length F
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::size_t channels = 192;
    std::size_t audio_dim = world::kAudioChannels;
    std::size_t audio_tokens = 4;  // l, audio tokens per latent frame
    std::size_t time_dim = 64;
    std::size_t mlp_ratio = 4;
    // Initial data scale of the output preconditioning; 0 disables it.
    double sigma_data = 0.5;
    // Center the preconditioner prior on the reference token of each cell.
    bool anchor_reference = true;

    std::size_t cells() const { return grid_h * grid_w; }
    void validate() const;
};

struct ForwardFlags {
    bool use_audio_layers = true;
    bool use_lora = true;
};

struct ConditionBundle {
    std::optional<Tensor> audio;  // (F * l) x audio_dim, frame-major
    Tensor reference;             // (h * w) x C
    double t = 0.0;
    bool drop_audio = false;
    bool drop_ref = false;
};

// Groups of four consecutive per-frame feature rows become the l tokens of
// one latent frame (resampled linearly when l != 4). Result: (F * l) x d_a.
Tensor aggregate_audio(const world::AudioTrack& track, std::size_t tokens_per_frame = 4);
Tensor silent_tokens(std::size_t frames, const ModelConfig& cfg);

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Fixed sinusoidal embeddings.
Tensor timestep_features(double t, std::size_t dim);
Tensor position_table(const ModelConfig& cfg, std::size_t frames);
Tensor reference_position_table(const ModelConfig& cfg);

// x * W + b, plus the scaled low-rank update when `use_lora` and the adapter
// exists in the store.
ad::Var lora_linear(ad::Graph& g, const ParamStore& p, const std::string& prefix, ad::Var x, const ModelConfig& cfg,
                    bool use_lora);

// Per-latent-frame cross-attention from video tokens to audio tokens, with a
// residual add: z_v + Attn(Q_v, K_a, V_a) W_o. z_v: (F * h * w) x d,
// z_a: (F * l) x d (already embedded).
ad::Var audio_cross_attention(ad::Graph& g, const ParamStore& p, const std::string& prefix, ad::Var z_v, ad::Var z_a,
                              std::size_t frames, const ModelConfig& cfg);

// Output preconditioning. In the eigenbasis U of the per-token data
// covariance (eigenvalues lambda_k, mean mu) the velocity is
//   v = mu + [c_skip(t) * ((x_t - t mu) U) + c_out(t) * net(x_t)] U^T
// (mu is the fitted mean plus, when anchoring, the reference token of the
// same cell) with c_skip_k = (t lambda_k - (1 - t)) / s_k, c_out_k = sqrt(lambda_k / s_k),
// s_k = (1 - t)^2 + t^2 lambda_k: the best linear velocity predictor plus a
// learned residual scaled to unit variance. Without it a narrow model would
// have to carry the C-dimensional noise through its d_model-wide stream.
// The statistics live in frozen buffers (buffer.precond_*); init_params sets
// them to mu = 0, U = I, lambda = sigma_data^2 until fit_preconditioner runs.
struct Preconditioning {
    Tensor skip;  // 1 x C
    Tensor out;   // 1 x C
};
Preconditioning preconditioning(double t, const Tensor& eigvals);

// Fits mean and covariance eigenbasis from an N x C token sample (latent
// minus anchor when anchoring).
void fit_preconditioner(ParamStore& p, const Tensor& tokens, double min_eigval = 1e-6);

// Velocity prediction for x_t given as an (F * h * w) x C token matrix.
ad::Var forward_velocity(ad::Graph& g, const ParamStore& p, const ModelConfig& cfg, const Tensor& x_t,
                         const ConditionBundle& cond, ForwardFlags flags);

// Non-recording convenience wrapper.
Tensor velocity(const ParamStore& p, const ModelConfig& cfg, const Tensor& x_t, const ConditionBundle& cond,
                ForwardFlags flags);

// Folds every adapter into its base weight and drops the adapter tensors.
ParamStore apply_lora_merge(const ParamStore& p, const ModelConfig& cfg);

// Prefixes of the layers wrapped by LoRA adapters (`<prefix>.weight`).
std::vector<std::string> lora_wrapped_weights(const ModelConfig& cfg);

}  // namespace maskflow::dit
