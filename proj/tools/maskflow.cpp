// maskflow: data generation, staged training, sampling, evaluation,
// gradient checks and reporting over the synthetic talking-blob world.
//
// Exit codes: 0 ok, 2 I/O, 3 stage contract, 4 numerical fault,
// 5 invalid request.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskflow/checkpoint.hpp"
#include "maskflow/codec.hpp"
#include "maskflow/config.hpp"
#include "maskflow/data.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/metrics.hpp"
#include "maskflow/pipeline.hpp"
#include "maskflow/rng.hpp"

namespace fs = std::filesystem;
using namespace maskflow;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kInternal = 1, kIo = 2, kStage = 3, kNumeric = 4, kInvalid = 5 };

// ---- logging ----------------------------------------------------------------

int log_level() {
    static const int level = [] {
        const char* v = std::getenv("MASKFLOW_LOG");
        const std::string s = v ? v : "info";
        if (s == "quiet" || s == "off") return 0;
        if (s == "error") return 1;
        if (s == "warn") return 2;
        if (s == "debug") return 4;
        return 3;
    }();
    return level;
}

void log(int level, const std::string& msg) {
    static const char* names[] = {"", "error", "warn", "info", "debug"};
    if (level <= log_level()) std::cerr << "[" << names[level] << "] " << msg << "\n";
}
void info(const std::string& m) { log(3, m); }
void warn(const std::string& m) { log(2, m); }
void debug(const std::string& m) { log(4, m); }

// ---- common options ---------------------------------------------------------

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::string out = ".";
    bool timing = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "run configuration (JSON); defaults when omitted");
    cmd->add_option("--seed", c.seed, "overrides the configuration seed");
    cmd->add_option("--threads", c.threads, "worker threads (1 = bitwise reproducible)")->check(CLI::PositiveNumber);
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_flag("--timing", c.timing, "record wall-clock timings (outputs stop being byte-reproducible)");
}

config::RunConfig load_config(const Common& c) {
    config::RunConfig rc;
    if (!c.config_path.empty()) rc = config::RunConfig::parse(ckpt::read_text(c.config_path));
    if (c.seed) rc.seed = *c.seed;
    rc.validate();
    debug("config hash " + rc.hash_hex());
    return rc;
}

fs::path out_dir(const Common& c) {
    std::error_code ec;
    fs::create_directories(c.out, ec);
    if (ec || !fs::is_directory(c.out)) throw IoError("cannot create output directory '" + c.out + "'");
    return fs::path(c.out);
}

void write_json(const fs::path& path, const ordered_json& j) { ckpt::write_text(path.string(), j.dump(2) + "\n"); }

std::string file_digest(const std::string& path) {
    const auto bytes = ckpt::read_file(path);
    return config::hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

std::string tensor_digest(const Tensor& t) {
    return config::hex64(
        fnv1a64(std::string_view(reinterpret_cast<const char*>(t.storage().data()), t.size() * sizeof(double))));
}

ckpt::Checkpoint load_checkpoint(const std::string& path) {
    try {
        return ckpt::load(path);
    } catch (const FormatError& e) {
        throw IoError("'" + path + "': " + e.what());
    }
}

// ---- gen-data -----------------------------------------------------------------

ordered_json scene_json(const world::SceneSpec& s) {
    ordered_json j;
    j["height"] = s.height;
    j["width"] = s.width;
    j["background"] = {s.background.r, s.background.g, s.background.b};
    j["drift_speed"] = s.drift_speed;
    j["stripe_angle"] = s.stripe_angle;
    j["stripe_period"] = s.stripe_period;
    j["stripe_amplitude"] = s.stripe_amplitude;
    j["stripe_phase"] = s.stripe_phase;
    j["sync_defect"] = s.sync_defect;
    j["entities"] = ordered_json::array();
    for (const auto& e : s.entities) {
        ordered_json ej;
        ej["cx"] = e.cx;
        ej["cy"] = e.cy;
        ej["radius"] = e.radius;
        ej["mouth"] = {e.mouth.x, e.mouth.y, e.mouth.w, e.mouth.h};
        ej["color"] = {e.color.r, e.color.g, e.color.b};
        j["entities"].push_back(ej);
    }
    return j;
}

data::DataConfig manifest_data(const config::RunConfig& rc) {
    data::DataConfig dc;
    dc.world = rc.world;
    dc.world.sync_defect = rc.data.sync_defect;
    dc.frames = rc.data.frames;
    dc.min_entities = rc.data.min_entities;
    dc.max_entities = rc.data.max_entities;
    dc.audio_tokens = rc.model.audio_tokens;
    return dc;
}

int cmd_gen_data(const Common& c) {
    const config::RunConfig rc = load_config(c);
    const fs::path dir = out_dir(c);
    const data::DataConfig dc = manifest_data(rc);
    std::string text;
    for (std::size_t i = 0; i < rc.data.n_samples; ++i) {
        const std::uint64_t seed = substream_seed(rc.seed, "data", i);
        const data::Sample s = data::make_sample(seed, dc);
        ordered_json j;
        j["index"] = i;
        j["seed"] = seed;
        j["frames"] = rc.data.frames;
        j["n_entities"] = s.scene.n_entities();
        j["style"] = world::audio_style_name(s.style);
        j["clip_digest"] = tensor_digest(s.clip.frames);
        j["latent_digest"] = tensor_digest(s.latent);
        j["scene"] = scene_json(s.scene);
        text += j.dump() + "\n";
    }
    ckpt::write_text((dir / "manifest.jsonl").string(), text);
    ordered_json meta;
    meta["config_hash"] = rc.hash_hex();
    meta["n_samples"] = rc.data.n_samples;
    meta["config"] = rc.to_json();
    write_json(dir / "manifest_meta.json", meta);
    info("wrote " + std::to_string(rc.data.n_samples) + " samples to " + (dir / "manifest.jsonl").string());
    return kOk;
}

// Regenerates every manifest entry from its seed and compares digests.
int cmd_verify_data(const Common& c, const std::string& manifest) {
    const config::RunConfig rc = load_config(c);
    const data::DataConfig dc = manifest_data(rc);
    std::istringstream in(ckpt::read_text(manifest));
    std::string line;
    std::size_t n = 0, bad = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("manifest line " + std::to_string(n + 1) + ": " + e.what());
        }
        data::DataConfig d = dc;
        d.frames = j.at("frames").get<std::size_t>();
        const data::Sample s = data::make_sample(j.at("seed").get<std::uint64_t>(), d);
        if (tensor_digest(s.clip.frames) != j.at("clip_digest").get<std::string>()) ++bad;
        ++n;
    }
    std::cout << "verified " << n << " samples, " << bad << " mismatches\n";
    return bad == 0 ? kOk : kNumeric;
}

// ---- train --------------------------------------------------------------------

int cmd_train(const Common& c, int stage, const std::string& in_path) {
    const config::RunConfig rc = load_config(c);
    const fs::path dir = out_dir(c);
    std::optional<ckpt::Checkpoint> in;
    if (!in_path.empty()) {
        in = load_checkpoint(in_path);
        if (in->config_hash != rc.hash())
            warn("input checkpoint was written under config " + config::hex64(in->config_hash) + ", running " +
                 rc.hash_hex());
    } else if (stage == 1) {
        warn("stage 1 without --in starts from fresh (untrained) base weights");
    }
    info("stage " + std::to_string(stage) + ": " + std::to_string(rc.train.stages[stage].steps) + " steps");
    const auto t0 = std::chrono::steady_clock::now();
    pipeline::TrainOutcome o = pipeline::train_stage(rc, stage, in, c.threads, c.timing);
    const std::string name = "stage" + std::to_string(stage);
    ckpt::save((dir / (name + ".plm2")).string(), o.checkpoint);
    ckpt::write_text((dir / (name + "_log.csv")).string(), train::log_csv(o.log));
    if (o.skipped_pairs) warn(std::to_string(o.skipped_pairs) + " degenerate preference pairs skipped");
    double last = 0.0;
    const std::size_t tail = std::min<std::size_t>(o.log.size(), 50);
    for (std::size_t i = o.log.size() - tail; i < o.log.size(); ++i) last += o.log[i].loss_total;
    if (tail) last /= static_cast<double>(tail);
    std::ostringstream msg;
    msg << name << " done in " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
        << " s, mean loss over last " << tail << " steps " << last;
    info(msg.str());
    return kOk;
}

// ---- sample -------------------------------------------------------------------

world::AudioTrack audio_from_json(const json& a, std::size_t frames, std::uint64_t fallback_seed) {
    if (a.is_string() && a.get<std::string>() == "silent") return world::silent_audio(frames);
    if (!a.is_object()) throw ConfigError("audio entries must be \"silent\" or an object");
    for (auto it = a.begin(); it != a.end(); ++it)
        if (it.key() != "seed" && it.key() != "style") throw ConfigError("unknown audio key '" + it.key() + "'");
    const std::uint64_t seed = a.value("seed", fallback_seed);
    const world::AudioStyle style = world::audio_style_from_name(a.value("style", std::string("speech")));
    return world::synth_audio(seed, frames, style);
}

// Mask names: "full", "background", "entity:<k>" (1-based).
Tensor latent_mask(const std::string& name, const world::MaskSet& lm, const dit::ModelConfig& mc) {
    if (name == "full") return Tensor(Shape{mc.grid_h, mc.grid_w}, 1.0);
    if (name == "background") return lm.masks[0];
    if (name.rfind("entity:", 0) == 0) {
        std::size_t k = 0;
        try {
            k = std::stoul(name.substr(7));
        } catch (...) {
            throw GuidanceSpecError("bad mask name '" + name + "'");
        }
        if (k == 0 || k >= lm.size()) throw GuidanceSpecError("no entity " + std::to_string(k) + " in the scene");
        return lm.masks[k];
    }
    throw GuidanceSpecError("bad mask name '" + name + "'");
}

void write_ppm(const fs::path& path, const world::VideoClip& clip, std::size_t t) {
    const std::size_t H = clip.height(), W = clip.width();
    std::string buf = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = std::clamp(clip.px(t, y, x, ch), 0.0, 1.0);
                buf.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
    ckpt::write_text(path.string(), buf);
}

int cmd_sample(const Common& c, const std::string& ckpt_path, const std::string& request_path) {
    const config::RunConfig rc = load_config(c);
    const dit::ModelConfig& mc = rc.model;
    const ckpt::Checkpoint ck = load_checkpoint(ckpt_path);
    pipeline::check_compatible(ck.params, mc);
    if (ck.stage < 2) warn("checkpoint stage " + std::to_string(ck.stage) + " has no trained audio path");

    json req = json::object();
    if (!request_path.empty()) {
        try {
            req = json::parse(ckpt::read_text(request_path));
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("request is not valid JSON: ") + e.what());
        }
    }
    static const std::set<std::string> known = {"seed",     "scene_seed", "n_entities", "frames", "steps",
                                                "cfg_scale", "guidance",   "audios",     "entries", "long_mode"};
    for (auto it = req.begin(); it != req.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("unknown request key '" + it.key() + "'");

    const std::uint64_t seed = req.value("seed", rc.seed);
    const std::uint64_t scene_seed = req.value("scene_seed", substream_seed(seed, "request:scene"));
    const std::size_t n_entities = req.value("n_entities", std::size_t{1});
    const std::size_t frames = req.value("frames", rc.eval.frames);
    const std::string guidance = req.value("guidance", std::string("mask"));
    sample::SamplerConfig sc = rc.sampler;
    sc.seed = seed;
    sc.threads = c.threads;
    sc.n_steps = req.value("steps", sc.n_steps);
    sc.cfg_scale = req.value("cfg_scale", sc.cfg_scale);
    if (req.contains("long_mode")) sc.mode = sample::long_mode_from_name(req["long_mode"].get<std::string>());
    try {
        sc.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (frames == 0 || frames % codec::kChunk != 0) throw ConfigError("frames must be a positive multiple of 4");
    if (n_entities == 0 || n_entities > rc.world.max_entities) throw ConfigError("n_entities out of range");
    if (guidance != "mask" && guidance != "standard") throw ConfigError("guidance must be \"mask\" or \"standard\"");
    const std::size_t F = frames / codec::kChunk;

    const world::SceneSpec scene = world::random_scene(scene_seed, n_entities, rc.world);
    const world::MaskSet masks = world::scene_masks(scene);
    const world::MaskSet lm = codec::downsample_masks(masks, 4);
    std::vector<world::AudioTrack> audios;
    if (req.contains("audios")) {
        if (!req["audios"].is_array()) throw ConfigError("audios must be an array");
        for (std::size_t k = 0; k < req["audios"].size(); ++k)
            audios.push_back(audio_from_json(req["audios"][k], frames, substream_seed(seed, "request:audio", k)));
    } else {
        for (std::size_t k = 0; k < n_entities; ++k)
            audios.push_back(world::synth_audio(substream_seed(seed, "request:audio", k), frames, world::AudioStyle::speech));
    }
    if (audios.empty()) throw ConfigError("request needs at least one audio");

    const Tensor ref = data::reference_tokens(scene, 4);
    std::size_t passes = 0;
    const sample::ModelRef m{&ck.params, &mc, {true, true}, &passes};
    ordered_json side;
    side["seed"] = seed;
    side["scene_seed"] = scene_seed;
    side["config_hash"] = rc.hash_hex();
    side["checkpoint"] = {{"stage", ck.stage}, {"config_hash", config::hex64(ck.config_hash)},
                          {"digest", file_digest(ckpt_path)}};
    side["request"] = req;
    side["n_steps"] = sc.n_steps;
    side["frames"] = frames;

    Tensor lat;
    std::vector<std::size_t> per_step;
    std::vector<double> step_ms;
    std::size_t expected = 0;
    auto counted = [&](const sample::VelocityFn& v) {
        return [&, v](const Tensor& x, double t) {
            const std::size_t before = passes;
            const auto t0 = std::chrono::steady_clock::now();
            Tensor out = v(x, t);
            per_step.push_back(passes - before);
            if (c.timing)
                step_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            return out;
        };
    };

    if (guidance == "standard") {
        if (req.contains("entries")) throw ConfigError("entries apply to mask guidance only");
        const Tensor a = dit::aggregate_audio(audios[0], mc.audio_tokens);
        side["guidance"] = {{"type", "standard"}, {"lambda", sc.cfg_scale}};
        expected = sample::is_silent(a) ? 1 : 2;
        if (F > sc.seg_chunks) {
            lat = sample::generate_long(m, ref, a, F, sc);
            side["long_mode"] = sample::long_mode_name(sc.mode);
        } else {
            const Tensor x0 = sample::initial_noise({F * mc.cells(), mc.channels}, sc.seed, 0);
            lat = sample::euler_sample(
                x0, counted([&](const Tensor& x, double t) { return sample::cfg_velocity(m, x, t, ref, a, sc.cfg_scale); }),
                sc.n_steps);
        }
    } else {
        if (F > sc.seg_chunks) throw ConfigError("mask guidance supports single-window lengths only");
        sample::GuidanceSpec spec;
        ordered_json echo = ordered_json::array();
        if (req.contains("entries")) {
            for (const auto& e : req["entries"]) {
                for (auto it = e.begin(); it != e.end(); ++it)
                    if (it.key() != "mask" && it.key() != "audio" && it.key() != "lambda")
                        throw ConfigError("unknown entry key '" + it.key() + "'");
                const std::string mname = e.value("mask", std::string("full"));
                Tensor audio_tok = dit::silent_tokens(F, mc);
                int ai = -1;
                if (e.contains("audio") && !e["audio"].is_null()) {
                    ai = e["audio"].get<int>();
                    if (ai < 0 || static_cast<std::size_t>(ai) >= audios.size())
                        throw GuidanceSpecError("entry audio index " + std::to_string(ai) + " out of range");
                    audio_tok = dit::aggregate_audio(audios[ai], mc.audio_tokens);
                }
                const double lambda = e.value("lambda", sc.cfg_scale);
                spec.entries.push_back({audio_tok, latent_mask(mname, lm, mc), lambda});
                echo.push_back({{"mask", mname}, {"audio", ai}, {"lambda", lambda}});
            }
        } else {
            if (audios.size() != n_entities) throw ConfigError("one audio per entity is needed for default entries");
            spec = pipeline::entity_guidance(scene, audios, mc, sc.cfg_scale);
            echo.push_back({{"mask", "background"}, {"audio", -1}, {"lambda", sc.cfg_scale}});
            for (std::size_t k = 0; k < n_entities; ++k)
                echo.push_back({{"mask", "entity:" + std::to_string(k + 1)}, {"audio", k}, {"lambda", sc.cfg_scale}});
        }
        spec.validate(mc.grid_h, mc.grid_w);
        side["guidance"] = {{"type", "mask"}, {"entries", echo}};
        // One silence pass plus one per distinct non-silent audio.
        std::vector<const Tensor*> distinct;
        for (const auto& e : spec.entries) {
            if (sample::is_silent(e.audio)) continue;
            bool seen = false;
            for (const Tensor* d : distinct) seen = seen || d->bit_equal(e.audio);
            if (!seen) distinct.push_back(&e.audio);
        }
        expected = distinct.size() + 1;
        const Tensor x0 = sample::initial_noise({F * mc.cells(), mc.channels}, sc.seed, 0);
        lat = sample::euler_sample(
            x0,
            counted([&](const Tensor& x, double t) { return sample::mask_cfg_velocity(m, x, t, ref, spec, c.threads); }),
            sc.n_steps);
    }

    const world::VideoClip clip = pipeline::decode_tokens(lat, F, mc);
    const fs::path dir = out_dir(c);
    for (std::size_t t = 0; t < clip.length(); ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.ppm", t);
        write_ppm(dir / name, clip, t);
    }
    ckpt::Checkpoint clip_ck;
    clip_ck.stage = -1;
    clip_ck.config_hash = rc.hash();
    clip_ck.params.add("clip.frames", clip.frames, Group::other);
    for (std::size_t k = 0; k < masks.size(); ++k) clip_ck.params.add("mask." + std::to_string(k), masks.masks[k], Group::other);
    for (std::size_t k = 0; k < audios.size(); ++k)
        clip_ck.params.add("audio." + std::to_string(k), audios[k].features, Group::other);
    ckpt::save((dir / "clip.plm2").string(), clip_ck);

    ordered_json sync = ordered_json::array();
    for (std::size_t k = 0; k < n_entities; ++k) {
        const world::AudioTrack& a = audios[std::min(k, audios.size() - 1)];
        sync.push_back(world::sync_oracle(clip, masks.masks[k + 1], a));
    }
    side["sync"] = sync;
    side["forward_passes_total"] = passes;
    if (!per_step.empty()) {
        side["forward_passes_per_step"] = per_step;
        side["expected_passes_per_step"] = expected;
        for (std::size_t p : per_step)
            if (p != expected) throw ContractError("forward pass count " + std::to_string(p) + " != " + std::to_string(expected));
    }
    if (c.timing) side["wall_ms_per_step"] = step_ms;
    write_json(dir / "sidecar.json", side);
    info("wrote " + std::to_string(clip.length()) + " frames to " + dir.string());
    return kOk;
}

// ---- eval ---------------------------------------------------------------------

int cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& baseline_path, std::string only) {
    const config::RunConfig rc = load_config(c);
    if (rc.eval.n_seeds == 0) throw IoError("empty seed list (eval.n_seeds = 0)");
    const ckpt::Checkpoint ck = load_checkpoint(ckpt_path);
    pipeline::check_compatible(ck.params, rc.model);
    std::optional<ckpt::Checkpoint> base;
    if (!baseline_path.empty()) {
        base = load_checkpoint(baseline_path);
        pipeline::check_compatible(base->params, rc.model);
    }
    if (only.empty()) only = "sync,multi,long,dpo";
    auto wants = [&](const std::string& k) { return ("," + only + ",").find("," + k + ",") != std::string::npos; };
    const fs::path dir = out_dir(c);

    const std::vector<std::uint64_t> seeds = pipeline::seed_list(rc.eval.seed_base, rc.eval.n_seeds);
    eval::EvalReport rep;
    rep.checkpoint_id = file_digest(ckpt_path);
    rep.config_hash = rc.hash_hex();
    rep.seeds = seeds;
    rep.note = "desk-scale battery: analytic sync oracle, leakage, boundary discontinuity and drift; "
               "no perceptual-network metrics";
    std::vector<eval::Series> plots;

    if (wants("sync")) {
        info("sync protocol over " + std::to_string(seeds.size()) + " seeds");
        const auto r = pipeline::sync_protocol(ck.params, rc, seeds, c.threads);
        std::vector<double> margin;
        for (std::size_t i = 0; i < seeds.size(); ++i) margin.push_back(r.matched[i] - r.control[i]);
        rep.add("sync.matched", r.matched);
        rep.add("sync.control", r.control);
        rep.add("sync.margin", margin);
        plots.push_back({"matched", r.matched});
        plots.push_back({"control", r.control});
    }
    if (wants("multi")) {
        info("multi-entity protocol");
        const auto r = pipeline::multi_protocol(ck.params, rc, seeds, c.threads);
        rep.add("multi.row_margin", r.margin);
        rep.add("multi.leakage", r.leakage);
        rep.add("multi.diagonal", r.diagonal);
    }
    std::optional<pipeline::LongRun> long_cand, long_base;
    if (wants("long")) {
        info("long-video protocol");
        long_cand = pipeline::long_protocol(ck.params, rc, seeds, c.threads);
        rep.add("long.boundary.position_shift", long_cand->boundary_shift);
        rep.add("long.boundary.final_latent_extension", long_cand->boundary_ext);
        rep.add("long.max_drift.position_shift", long_cand->drift_shift);
        rep.add("long.max_drift.final_latent_extension", long_cand->drift_ext);
        rep.add("long.sync.position_shift", long_cand->sync_shift);
        rep.add("long.sync.final_latent_extension", long_cand->sync_ext);
        if (base) long_base = pipeline::long_protocol(base->params, rc, seeds, c.threads);
    }
    eval::EvalReport dpo;
    if (wants("dpo") && base) {
        info("paired comparison against the baseline checkpoint");
        const auto dseeds = pipeline::seed_list(rc.eval.seed_base + 100000, rc.eval.dpo_seeds);
        const auto a = pipeline::sync_protocol(base->params, rc, dseeds, c.threads);
        const auto b = pipeline::sync_protocol(ck.params, rc, dseeds, c.threads);
        std::vector<double> delta;
        for (std::size_t i = 0; i < dseeds.size(); ++i) delta.push_back(b.matched[i] - a.matched[i]);
        dpo.checkpoint_id = rep.checkpoint_id;
        dpo.config_hash = rep.config_hash;
        dpo.seeds = dseeds;
        dpo.note = "paired sync comparison, candidate vs baseline " + file_digest(baseline_path);
        dpo.add("sync.baseline", a.matched);
        dpo.add("sync.candidate", b.matched);
        dpo.add("sync.delta", delta);
        dpo.add_scalar("sign_test_p", eval::sign_test_p(delta));
        dpo.validate();
        ckpt::write_text((dir / "dpo_report.json").string(), dpo.to_json());
        ckpt::write_text((dir / "dpo_report.csv").string(), dpo.to_csv());
    }
    rep.validate();
    ckpt::write_text((dir / "report.json").string(), rep.to_json());
    ckpt::write_text((dir / "report.csv").string(), rep.to_csv());
    if (!plots.empty())
        ckpt::write_text((dir / "sync.svg").string(), eval::svg_line_plot("sync per seed", plots, "seed", "sync"));

    // DPO on/off x long-video mode table.
    if (long_cand && long_base) {
        std::ostringstream t;
        t << "checkpoint,mode,boundary_ratio,max_drift,sync\n";
        auto row = [&](const char* who, const char* mode, const std::vector<double>& b, const std::vector<double>& d,
                       const std::vector<double>& s) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g\n", who, mode, eval::summarize(b).mean,
                          eval::summarize(d).mean, eval::summarize(s).mean);
            t << buf;
        };
        row("baseline", "position_shift", long_base->boundary_shift, long_base->drift_shift, long_base->sync_shift);
        row("baseline", "final_latent_extension", long_base->boundary_ext, long_base->drift_ext, long_base->sync_ext);
        row("candidate", "position_shift", long_cand->boundary_shift, long_cand->drift_shift, long_cand->sync_shift);
        row("candidate", "final_latent_extension", long_cand->boundary_ext, long_cand->drift_ext, long_cand->sync_ext);
        ckpt::write_text((dir / "comparison_2x2.csv").string(), t.str());
    }
    for (const auto& r : rep.records) {
        std::ostringstream line;
        line << r.name << " mean " << r.mean << " std " << r.stddev;
        info(line.str());
    }
    return kOk;
}

// ---- gradcheck ----------------------------------------------------------------

int cmd_gradcheck(const Common& c, std::size_t coords) {
    const config::RunConfig rc = load_config(c);
    const fs::path dir = out_dir(c);
    const auto t0 = std::chrono::steady_clock::now();
    const ad::GradCheckResult r = pipeline::model_grad_check(rc, rc.seed, coords);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ordered_json j;
    j["config_hash"] = rc.hash_hex();
    j["n_checked"] = r.n_checked;
    j["max_rel_error"] = r.max_rel_error;
    j["worst_param"] = r.worst_param;
    j["tolerance"] = 1e-4;
    j["pass"] = r.max_rel_error < 1e-4;
    if (c.timing) j["seconds"] = secs;
    write_json(dir / "gradcheck.json", j);
    std::cout << "gradcheck: " << r.n_checked << " coords, max rel error " << r.max_rel_error << " ("
              << r.worst_param << ")\n";
    return r.max_rel_error < 1e-4 ? kOk : kNumeric;
}

// ---- report -------------------------------------------------------------------

std::vector<double> csv_column(const std::string& text, const std::string& column) {
    std::istringstream in(text);
    std::string header, line;
    std::getline(in, header);
    std::vector<std::string> cols;
    {
        std::istringstream hs(header);
        std::string f;
        while (std::getline(hs, f, ',')) cols.push_back(f);
    }
    const auto it = std::find(cols.begin(), cols.end(), column);
    if (it == cols.end()) throw IoError("log has no column '" + column + "'");
    const auto idx = static_cast<std::size_t>(it - cols.begin());
    std::vector<double> out;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string f;
        for (std::size_t k = 0; std::getline(ls, f, ','); ++k)
            if (k == idx) out.push_back(std::stod(f));
    }
    return out;
}

std::vector<double> smooth(const std::vector<double>& y, std::size_t w) {
    std::vector<double> out;
    for (std::size_t i = 0; i + w <= y.size(); i += w) {
        double s = 0.0;
        for (std::size_t k = 0; k < w; ++k) s += y[i + k];
        out.push_back(s / static_cast<double>(w));
    }
    return out;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
    if (inputs.empty()) throw IoError("report needs at least one --in directory");
    const fs::path dir = out_dir(c);
    std::ostringstream md;
    md << "# maskflow report\n\n";
    std::vector<eval::Series> curves;
    std::size_t found = 0;
    for (const std::string& in : inputs) {
        if (!fs::is_directory(in)) throw IoError("'" + in + "' is not a directory");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(in)) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files) {
            const std::string name = f.filename().string();
            // Headings name the input by its last path component so summaries do not depend on where runs live.
            const std::string label = (f.parent_path().filename() / f.filename()).string();
            if (name.ends_with("_log.csv")) {
                const auto y = csv_column(ckpt::read_text(f.string()), "loss_total");
                curves.push_back({name.substr(0, name.size() - 8), smooth(y, std::max<std::size_t>(1, y.size() / 50))});
                ++found;
            } else if (name.ends_with("report.json")) {
                const eval::EvalReport r = eval::EvalReport::from_json(ckpt::read_text(f.string()));
                md << "## " << label << "\n\ncheckpoint `" << r.checkpoint_id << "`, config `" << r.config_hash
                   << "`, " << r.seeds.size() << " seeds\n\n| metric | mean | std | n |\n|---|---|---|---|\n";
                for (const auto& m : r.records) md << "| " << m.name << " | " << m.mean << " | " << m.stddev << " | " << m.n_seeds << " |\n";
                md << "\n";
                ++found;
            } else if (name == "comparison_2x2.csv") {
                md << "## " << label << "\n\n```\n" << ckpt::read_text(f.string()) << "```\n\n";
                ++found;
            }
        }
    }
    if (found == 0) throw IoError("no reports or training logs found in the inputs");
    if (!curves.empty())
        ckpt::write_text((dir / "training_curves.svg").string(),
                         eval::svg_line_plot("training loss", curves, "step (binned)", "loss"));
    ckpt::write_text((dir / "summary.md").string(), md.str());
    info("report written to " + dir.string());
    return kOk;
}

int exit_for(const std::exception& e) {
    if (dynamic_cast<const IoError*>(&e)) return kIo;
    if (dynamic_cast<const StageContractError*>(&e) || dynamic_cast<const StageIsolationFault*>(&e)) return kStage;
    if (dynamic_cast<const NumericalFault*>(&e)) return kNumeric;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GuidanceSpecError*>(&e) ||
        dynamic_cast<const ArgumentError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
        dynamic_cast<const InvalidSceneError*>(&e) || dynamic_cast<const json::exception*>(&e))
        return kInvalid;
    if (dynamic_cast<const FormatError*>(&e)) return kIo;
    return kInternal;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maskflow: audio-driven multi-entity video generation on a synthetic world"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "write a seeded sample manifest (JSONL)");
    add_common(gen, common);
    std::string verify;
    gen->add_option("--verify", verify, "regenerate the samples of an existing manifest and compare digests");

    auto* tr = app.add_subcommand("train", "run one training stage");
    add_common(tr, common);
    int stage = 1;
    std::string in_ckpt;
    tr->add_option("--stage", stage, "0 base, 1 adapters, 2 audio, 3 preference")->required()->check(CLI::Range(0, 3));
    tr->add_option("--in", in_ckpt, "checkpoint of the previous stage");

    auto* sm = app.add_subcommand("sample", "generate a clip from a checkpoint");
    add_common(sm, common);
    std::string sample_ckpt, request;
    sm->add_option("--ckpt", sample_ckpt, "checkpoint")->required();
    sm->add_option("--request", request, "sampling request (JSON)");

    auto* ev = app.add_subcommand("eval", "run the metric battery on a checkpoint");
    add_common(ev, common);
    std::string eval_ckpt, baseline, only;
    ev->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--baseline", baseline, "earlier checkpoint for the paired comparison");
    ev->add_option("--only", only, "comma-separated subset of sync,multi,long,dpo");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full model");
    add_common(gc, common);
    std::size_t coords = 100;
    gc->add_option("--coords", coords, "coordinates to check");

    auto* rp = app.add_subcommand("report", "summarize reports and training logs");
    add_common(rp, common);
    std::vector<std::string> inputs;
    rp->add_option("--in", inputs, "directories holding reports and logs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (*gen) return verify.empty() ? cmd_gen_data(common) : cmd_verify_data(common, verify);
        if (*tr) return cmd_train(common, stage, in_ckpt);
        if (*sm) return cmd_sample(common, sample_ckpt, request);
        if (*ev) return cmd_eval(common, eval_ckpt, baseline, only);
        if (*gc) return cmd_gradcheck(common, coords);
        if (*rp) return cmd_report(common, inputs);
    } catch (const std::exception& e) {
        const int code = exit_for(e);
        log(1, e.what());
        return code;
    }
    return kInternal;
}
