#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "maskflow/checkpoint.hpp"
#include "maskflow/config.hpp"
#include "maskflow/metrics.hpp"
#include "maskflow/sampling.hpp"

// Orchestration shared by the command-line tool, the acceptance suite and
// the Python bindings: staged training with checkpoint tag contracts, and
// the seeded evaluation protocols.
namespace maskflow::pipeline {

// Fresh weights with the output preconditioner fitted on training clips.
ParamStore fresh_params(const config::RunConfig& rc);

// Throws StageContractError when the store does not match the model config.
void check_compatible(const ParamStore& p, const dit::ModelConfig& mc);

struct TrainOutcome {
    ckpt::Checkpoint checkpoint;
    std::vector<train::LogRow> log;
    std::size_t skipped_pairs = 0;
};

// Stage k > 1 needs a checkpoint tagged k - 1; stage 1 accepts a stage-0
// checkpoint or starts from fresh weights; stage 0 always starts fresh.
TrainOutcome train_stage(const config::RunConfig& rc, int stage, const std::optional<ckpt::Checkpoint>& in,
                         std::size_t threads = 1, bool timing = false);

// Runs stages 0..last in sequence (no intermediate files).
std::vector<ckpt::Checkpoint> train_all(const config::RunConfig& rc, int last, std::size_t threads = 1);

// Finite-difference check of the full model (all groups trainable, adapters
// and audio output projections perturbed off zero) under the flow-matching
// loss on one training clip.
ad::GradCheckResult model_grad_check(const config::RunConfig& rc, std::uint64_t seed, std::size_t n_coords = 100);

world::VideoClip decode_tokens(const Tensor& tokens, std::size_t latent_frames, const dit::ModelConfig& mc);

// Background entry plus one entry per entity; latent masks come from the
// scene's pixel masks.
sample::GuidanceSpec entity_guidance(const world::SceneSpec& scene, const std::vector<world::AudioTrack>& audios,
                                     const dit::ModelConfig& mc, double lambda);

// ---- evaluation protocols (one value per seed, seeds run in parallel) ----

std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t n);

// Single entity, standard guidance. Matched = sync of the generated mouth
// against its driving audio; control = the same clip against an independent
// audio track.
struct SyncRun {
    std::vector<double> matched;
    std::vector<double> control;
};
SyncRun sync_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                      std::size_t threads = 1);

// n-entity Mask-CFG generation. Margin = row margin of the entity x audio
// sync matrix; leakage compares against a rerun (same noise) where one
// entity's audio is replaced.
struct MultiRun {
    std::vector<double> margin;
    std::vector<double> leakage;
    std::vector<double> diagonal;  // mean of S_ii per seed
};
MultiRun multi_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                        std::size_t threads = 1);

// long_factor x training-length generation in both long-video modes.
// Boundaries are the extension-mode segment starts (in frames), used for
// both modes so the comparison is matched.
struct LongRun {
    std::vector<double> boundary_shift, boundary_ext;
    std::vector<double> drift_shift, drift_ext;
    std::vector<double> sync_shift, sync_ext;
};
LongRun long_protocol(const ParamStore& p, const config::RunConfig& rc, const std::vector<std::uint64_t>& seeds,
                      std::size_t threads = 1);

std::vector<std::size_t> long_boundaries(const config::RunConfig& rc);

}  // namespace maskflow::pipeline
