#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "maskflow/model.hpp"
#include "maskflow/sampling.hpp"
#include "maskflow/synthworld.hpp"
#include "maskflow/training.hpp"

// Merged run configuration. Defaults are the toy configuration used by the
// acceptance suite; every key is optional in a config file, unknown keys are
// rejected.
namespace maskflow::config {

struct StageSettings {
    std::size_t steps = 0;
    double lr = 1e-3;
    std::size_t clip_frames = 16;
};

struct TrainSection {
    // Index = stage. Stage 0 is the base pretraining that stands in for a
    // pretrained video model.
    std::array<StageSettings, 4> stages{{{1500, 2e-3, 16}, {300, 2e-3, 32}, {1500, 2e-3, 16}, {300, 5e-4, 32}}};
    std::size_t batch = 1;
    double lambda_dpo = 0.1;
    // DPO errors are per-element means, so the bracket is ~1e-5 and beta has
    // to be large for beta_t * bracket to reach O(1).
    double beta = 5e4;
    std::size_t ref_update_interval = 500;
    double p_drop = 0.1;
    std::size_t seg_len = 16;
    std::size_t k_segments = 5;
    double dpo_sync_defect = 0.5;  // stage-3 training clips only
    std::size_t min_entities = 1;
    std::size_t max_entities = 3;
    std::size_t precond_clips = 100;
};

struct DataSection {
    std::size_t n_samples = 300;
    std::size_t frames = 16;
    std::size_t min_entities = 1;
    std::size_t max_entities = 3;
    double sync_defect = 0.0;
};

struct EvalSection {
    std::uint64_t seed_base = 1000;
    std::size_t n_seeds = 20;
    std::size_t dpo_seeds = 40;
    std::size_t frames = 16;
    std::size_t long_factor = 4;  // long-video length in training windows
    std::size_t n_entities = 3;
};

struct RunConfig {
    std::uint64_t seed = 11;
    world::WorldConfig world;
    dit::ModelConfig model = toy_model();
    TrainSection train;
    DataSection data;
    sample::SamplerConfig sampler = toy_sampler();
    EvalSection eval;

    static dit::ModelConfig toy_model();
    static sample::SamplerConfig toy_sampler();

    // Throws ConfigError on inconsistent sections.
    void validate() const;
    nlohmann::ordered_json to_json() const;
    // Strict: unknown keys and wrong types throw ConfigError.
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig parse(const std::string& text);

    // FNV-1a over the key-sorted compact dump of the full merged tree.
    std::uint64_t hash() const;
    std::string hash_hex() const;

    train::TrainConfig stage_config(int stage, std::size_t threads) const;
    // Per-stage seeds are substreams of the run seed.
    std::uint64_t stage_seed(int stage) const;
    std::uint64_t init_seed() const;
};

std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(const std::string& s);

}  // namespace maskflow::config
