#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "maskflow/autodiff.hpp"
#include "maskflow/data.hpp"
#include "maskflow/model.hpp"
#include "maskflow/params.hpp"

namespace maskflow::train {

// Stage 0 pretrains the base transformer (self-attention and the rest, no
// audio, no adapters) so the later stages adapt a model that already
// generates scenes. Stages 1-3 follow the adaptation recipe.
struct PreferencePair;

// Stage-3 pair source. The default mines segments of the ground-truth clip;
// a rollout-based miner can be plugged in here.
using PairMiner = std::function<PreferencePair(const data::Sample& s, std::uint64_t mine_seed)>;

struct TrainConfig {
    int stage = 1;
    double lr = 1e-3;
    std::size_t steps = 2000;
    std::size_t batch = 1;
    std::size_t clip_frames = 16;
    double lambda_dpo = 0.1;
    double beta = 500.0;
    std::size_t ref_update_interval = 500;
    double p_drop = 0.1;
    std::uint64_t seed = 0;
    std::size_t seg_len = 16;
    std::size_t k_segments = 5;
    double sync_defect = 0.0;
    std::size_t threads = 1;
    std::size_t min_entities = 1;
    std::size_t max_entities = 3;
    world::WorldConfig world;  // size and sync_defect are overridden per stage
    bool timing = false;  // record wall_ms; off keeps logs byte-reproducible
    PairMiner miner;

    void validate() const;
};

std::set<Group> trainable_groups(int stage);
dit::ForwardFlags stage_flags(int stage);
data::DataConfig stage_data(const TrainConfig& tc, const dit::ModelConfig& mc, std::size_t frames);

// ---- losses ---------------------------------------------------------------

// mean((v_hat - (z1 - z0))^2) at z_t = (1 - t) z0 + t z1.
ad::Var flow_matching_loss(ad::Graph& g, const ParamStore& p, const dit::ModelConfig& cfg, const Tensor& z0,
                           const Tensor& z1, const dit::ConditionBundle& cond, double t, dit::ForwardFlags flags);
double flow_matching_loss_value(const ParamStore& p, const dit::ModelConfig& cfg, const Tensor& z0, const Tensor& z1,
                                const dit::ConditionBundle& cond, double t, dit::ForwardFlags flags);

Tensor interpolate(const Tensor& z0, const Tensor& z1, double t);

struct PreferencePair {
    Tensor y_w, y_l;          // (F * h * w) x C latent segments
    Tensor audio_w, audio_l;  // (F * l) x d_a
    Tensor reference;
    double s_w = 0.0, s_l = 0.0;
    std::size_t start_w = 0, start_l = 0;
    bool degenerate = false;
};

// Scores k seeded segments of the clip with the sync oracle and keeps the best
// and worst. Ties go to the earlier start frame.
PreferencePair mine_preference_pairs(const world::VideoClip& clip, const world::AudioTrack& audio,
                                     const world::Mask& mask, std::size_t k, std::size_t seg_len, std::uint64_t seed,
                                     std::size_t spatial = 4, std::size_t audio_tokens = 4);

struct DpoTerms {
    ad::Var loss;      // -log sigmoid(-(beta_t / 2) * bracket)
    ad::Var policy_w;  // policy error on y_w, reusable as the diffusion term
    double bracket = 0.0;
    double beta_t = 0.0;
};

// Errors are mean squared over the segment. z0_w and z0_l are shared between
// the policy and the reference evaluation of the same sample.
DpoTerms flow_dpo_loss(ad::Graph& g, const PreferencePair& pair, double t, const Tensor& z0_w, const Tensor& z0_l,
                       const ParamStore& policy, const ParamStore& ref, const dit::ModelConfig& cfg, double beta,
                       dit::ForwardFlags flags);
double flow_dpo_loss_value(const PreferencePair& pair, double t, const Tensor& z0_w, const Tensor& z0_l,
                           const ParamStore& policy, const ParamStore& ref, const dit::ModelConfig& cfg, double beta,
                           dit::ForwardFlags flags);

// ---- optimizer ------------------------------------------------------------

class AdamW {
public:
    explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

    // Applies one update. Every gradient must belong to a trainable
    // parameter; a nonzero gradient for a frozen one is a stage-isolation fault.
    void step(ParamStore& p, const GradMap& grads);
    std::size_t steps() const { return t_; }
    double lr() const { return lr_; }

private:
    double lr_, b1_, b2_, eps_, wd_;
    std::size_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// ---- stages ---------------------------------------------------------------

struct LogRow {
    std::size_t step = 0;
    int stage = 0;
    double loss_total = 0.0;
    double loss_diff = 0.0;
    double loss_dpo = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

std::string log_csv(const std::vector<LogRow>& rows);

struct StageResult {
    ParamStore params;
    std::vector<LogRow> log;
    std::size_t skipped_pairs = 0;
};

// Runs one stage from `init`. Only the stage's groups are trainable; the
// result is checked byte-for-byte against `init` outside those groups.
StageResult run_stage(const ParamStore& init, const dit::ModelConfig& mc, const TrainConfig& tc);

// Fits the model's output preconditioner on latent tokens of `n_clips`
// seeded training clips (run once, before stage 0).
void fit_preconditioner_from_data(ParamStore& p, const dit::ModelConfig& mc, const TrainConfig& tc, std::size_t n_clips);

// Fixed held-out flow-matching loss (same noise and times on every call).
double validation_loss(const ParamStore& p, const dit::ModelConfig& mc, const TrainConfig& tc, std::size_t n,
                       std::uint64_t seed);

// Throws StageIsolationFault when a tensor outside `groups` differs.
void check_isolation(const ParamStore& before, const ParamStore& after, const std::set<Group>& groups);

}  // namespace maskflow::train
