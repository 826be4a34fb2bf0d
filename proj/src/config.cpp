#include "maskflow/config.hpp"

#include <cstdio>
#include <set>

#include "maskflow/codec.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::config {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads known keys of one JSON object and rejects the rest.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(where(key) + " must be a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
                if (std::is_unsigned_v<T> && it->is_number_integer() && !it->is_number_unsigned())
                    throw ConfigError(where(key) + " must be non-negative");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError(where(key) + " must be a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError(where(key) + " must be a string");
            }
            out = it->get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    const json* child(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key " + where(it.key().c_str()));
    }

    std::string where(const char* key = nullptr) const {
        std::string p = path_.empty() ? "<root>" : path_;
        return key ? (path_.empty() ? std::string(key) : path_ + "." + key) : p;
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

ordered_json stage_json(const StageSettings& s) {
    ordered_json j;
    j["steps"] = s.steps;
    j["lr"] = s.lr;
    j["clip_frames"] = s.clip_frames;
    return j;
}

}  // namespace

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    if (s.size() != 16) throw FormatError("bad hash '" + s + "'");
    std::uint64_t v = 0;
    for (char c : s) {
        int d;
        if (c >= '0' && c <= '9') d = c - '0';
        else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
        else throw FormatError("bad hash '" + s + "'");
        v = (v << 4) | static_cast<std::uint64_t>(d);
    }
    return v;
}

dit::ModelConfig RunConfig::toy_model() {
    dit::ModelConfig m;
    m.d_model = 64;
    m.n_layers = 2;
    m.n_heads = 4;
    return m;
}

sample::SamplerConfig RunConfig::toy_sampler() {
    sample::SamplerConfig s;
    s.n_steps = 10;
    s.cfg_scale = 5.0;
    return s;
}

void RunConfig::validate() const {
    try {
        model.validate();
        sampler.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    const std::size_t s = 4;
    if (static_cast<std::size_t>(world.height) != model.grid_h * s ||
        static_cast<std::size_t>(world.width) != model.grid_w * s)
        throw ConfigError("world size must be 4x the model latent grid");
    if (model.channels != codec::latent_channels(s)) throw ConfigError("model.channels must be 192 for 4x4 cells");
    if (world.align <= 0 || world.align % static_cast<int>(s) != 0)
        throw ConfigError("world.align must be a positive multiple of 4");
    if (!(world.drift_min <= world.drift_max)) throw ConfigError("world.drift_min exceeds drift_max");
    for (int k = 0; k < 4; ++k) {
        const auto& st = train.stages[k];
        if (!(st.lr > 0.0)) throw ConfigError("train.stages[" + std::to_string(k) + "].lr must be positive");
        if (st.clip_frames == 0 || st.clip_frames % codec::kChunk != 0)
            throw ConfigError("train.stages[" + std::to_string(k) + "].clip_frames must be a multiple of 4");
    }
    if (train.min_entities == 0 || train.min_entities > train.max_entities || train.max_entities > world.max_entities)
        throw ConfigError("train entity range is invalid");
    if (data.min_entities == 0 || data.min_entities > data.max_entities || data.max_entities > world.max_entities)
        throw ConfigError("data entity range is invalid");
    if (data.frames == 0 || data.frames % codec::kChunk != 0) throw ConfigError("data.frames must be a multiple of 4");
    if (!(data.sync_defect >= 0.0 && data.sync_defect <= 1.0)) throw ConfigError("data.sync_defect must lie in [0, 1]");
    if (eval.frames == 0 || eval.frames % codec::kChunk != 0) throw ConfigError("eval.frames must be a multiple of 4");
    if (eval.long_factor == 0) throw ConfigError("eval.long_factor must be >= 1");
    if (eval.n_entities == 0 || eval.n_entities > world.max_entities) throw ConfigError("eval.n_entities is invalid");
    for (int k = 0; k < 4; ++k) stage_config(k, 1).validate();
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    ordered_json& w = j["world"];
    w["height"] = world.height;
    w["width"] = world.width;
    w["max_entities"] = world.max_entities;
    w["align"] = world.align;
    w["drift_min"] = world.drift_min;
    w["drift_max"] = world.drift_max;
    ordered_json& m = j["model"];
    m["d_model"] = model.d_model;
    m["n_layers"] = model.n_layers;
    m["n_heads"] = model.n_heads;
    m["lora_rank"] = model.lora_rank;
    m["lora_alpha"] = model.lora_alpha;
    m["latent_frames"] = model.latent_frames;
    m["grid_h"] = model.grid_h;
    m["grid_w"] = model.grid_w;
    m["channels"] = model.channels;
    m["audio_tokens"] = model.audio_tokens;
    m["time_dim"] = model.time_dim;
    m["mlp_ratio"] = model.mlp_ratio;
    m["sigma_data"] = model.sigma_data;
    m["anchor_reference"] = model.anchor_reference;
    ordered_json& t = j["train"];
    t["stages"] = ordered_json::array();
    for (const auto& st : train.stages) t["stages"].push_back(stage_json(st));
    t["batch"] = train.batch;
    t["lambda_dpo"] = train.lambda_dpo;
    t["beta"] = train.beta;
    t["ref_update_interval"] = train.ref_update_interval;
    t["p_drop"] = train.p_drop;
    t["seg_len"] = train.seg_len;
    t["k_segments"] = train.k_segments;
    t["dpo_sync_defect"] = train.dpo_sync_defect;
    t["min_entities"] = train.min_entities;
    t["max_entities"] = train.max_entities;
    t["precond_clips"] = train.precond_clips;
    ordered_json& d = j["data"];
    d["n_samples"] = data.n_samples;
    d["frames"] = data.frames;
    d["min_entities"] = data.min_entities;
    d["max_entities"] = data.max_entities;
    d["sync_defect"] = data.sync_defect;
    ordered_json& s = j["sampler"];
    s["n_steps"] = sampler.n_steps;
    s["cfg_scale"] = sampler.cfg_scale;
    s["mode"] = sample::long_mode_name(sampler.mode);
    s["seg_chunks"] = sampler.seg_chunks;
    s["context_chunks"] = sampler.context_chunks;
    s["shift"] = sampler.shift;
    ordered_json& e = j["eval"];
    e["seed_base"] = eval.seed_base;
    e["n_seeds"] = eval.n_seeds;
    e["dpo_seeds"] = eval.dpo_seeds;
    e["frames"] = eval.frames;
    e["long_factor"] = eval.long_factor;
    e["n_entities"] = eval.n_entities;
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("seed", c.seed);
    if (const json* w = root.child("world")) {
        Section s(*w, "world");
        s.get("height", c.world.height);
        s.get("width", c.world.width);
        s.get("max_entities", c.world.max_entities);
        s.get("align", c.world.align);
        s.get("drift_min", c.world.drift_min);
        s.get("drift_max", c.world.drift_max);
        s.finish();
    }
    if (const json* m = root.child("model")) {
        Section s(*m, "model");
        s.get("d_model", c.model.d_model);
        s.get("n_layers", c.model.n_layers);
        s.get("n_heads", c.model.n_heads);
        s.get("lora_rank", c.model.lora_rank);
        s.get("lora_alpha", c.model.lora_alpha);
        s.get("latent_frames", c.model.latent_frames);
        s.get("grid_h", c.model.grid_h);
        s.get("grid_w", c.model.grid_w);
        s.get("channels", c.model.channels);
        s.get("audio_tokens", c.model.audio_tokens);
        s.get("time_dim", c.model.time_dim);
        s.get("mlp_ratio", c.model.mlp_ratio);
        s.get("sigma_data", c.model.sigma_data);
        s.get("anchor_reference", c.model.anchor_reference);
        s.finish();
    }
    if (const json* t = root.child("train")) {
        Section s(*t, "train");
        if (const json* st = s.child("stages")) {
            if (!st->is_array() || st->size() != 4) throw ConfigError("train.stages must be an array of 4 objects");
            for (std::size_t k = 0; k < 4; ++k) {
                Section ss((*st)[k], "train.stages[" + std::to_string(k) + "]");
                ss.get("steps", c.train.stages[k].steps);
                ss.get("lr", c.train.stages[k].lr);
                ss.get("clip_frames", c.train.stages[k].clip_frames);
                ss.finish();
            }
        }
        s.get("batch", c.train.batch);
        s.get("lambda_dpo", c.train.lambda_dpo);
        s.get("beta", c.train.beta);
        s.get("ref_update_interval", c.train.ref_update_interval);
        s.get("p_drop", c.train.p_drop);
        s.get("seg_len", c.train.seg_len);
        s.get("k_segments", c.train.k_segments);
        s.get("dpo_sync_defect", c.train.dpo_sync_defect);
        s.get("min_entities", c.train.min_entities);
        s.get("max_entities", c.train.max_entities);
        s.get("precond_clips", c.train.precond_clips);
        s.finish();
    }
    if (const json* d = root.child("data")) {
        Section s(*d, "data");
        s.get("n_samples", c.data.n_samples);
        s.get("frames", c.data.frames);
        s.get("min_entities", c.data.min_entities);
        s.get("max_entities", c.data.max_entities);
        s.get("sync_defect", c.data.sync_defect);
        s.finish();
    }
    if (const json* sm = root.child("sampler")) {
        Section s(*sm, "sampler");
        s.get("n_steps", c.sampler.n_steps);
        s.get("cfg_scale", c.sampler.cfg_scale);
        std::string mode = sample::long_mode_name(c.sampler.mode);
        s.get("mode", mode);
        try {
            c.sampler.mode = sample::long_mode_from_name(mode);
        } catch (const Error& e) {
            throw ConfigError(std::string("sampler.mode: ") + e.what());
        }
        s.get("seg_chunks", c.sampler.seg_chunks);
        s.get("context_chunks", c.sampler.context_chunks);
        s.get("shift", c.sampler.shift);
        s.finish();
    }
    if (const json* e = root.child("eval")) {
        Section s(*e, "eval");
        s.get("seed_base", c.eval.seed_base);
        s.get("n_seeds", c.eval.n_seeds);
        s.get("dpo_seeds", c.eval.dpo_seeds);
        s.get("frames", c.eval.frames);
        s.get("long_factor", c.eval.long_factor);
        s.get("n_entities", c.eval.n_entities);
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig RunConfig::parse(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_json(j);
}

std::uint64_t RunConfig::hash() const {
    // json (unordered) keeps object keys sorted, which canonicalizes the dump.
    const json canonical = json::parse(to_json().dump());
    return fnv1a64(canonical.dump());
}

std::string RunConfig::hash_hex() const { return hex64(hash()); }

std::uint64_t RunConfig::stage_seed(int stage) const {
    return substream_seed(seed, "stage", static_cast<std::uint64_t>(stage));
}

std::uint64_t RunConfig::init_seed() const { return substream_seed(seed, "init"); }

train::TrainConfig RunConfig::stage_config(int stage, std::size_t threads) const {
    if (stage < 0 || stage > 3) throw ConfigError("stage must be 0, 1, 2 or 3");
    const auto& st = train.stages[stage];
    train::TrainConfig tc;
    tc.stage = stage;
    tc.lr = st.lr;
    tc.steps = st.steps;
    tc.clip_frames = st.clip_frames;
    tc.batch = train.batch;
    tc.lambda_dpo = train.lambda_dpo;
    tc.beta = train.beta;
    tc.ref_update_interval = train.ref_update_interval;
    tc.p_drop = stage >= 2 ? train.p_drop : 0.0;
    tc.seed = stage_seed(stage);
    tc.seg_len = train.seg_len;
    tc.k_segments = train.k_segments;
    tc.sync_defect = stage == 3 ? train.dpo_sync_defect : 0.0;
    tc.threads = threads;
    tc.min_entities = train.min_entities;
    tc.max_entities = train.max_entities;
    tc.world = world;
    return tc;
}

}  // namespace maskflow::config
