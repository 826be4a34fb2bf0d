// Acceptance battery: one PASS/FAIL line per criterion, exit 0 only when all pass.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "maskflow/checkpoint.hpp"
#include "maskflow/codec.hpp"
#include "maskflow/config.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/metrics.hpp"
#include "maskflow/model.hpp"
#include "maskflow/pipeline.hpp"
#include "maskflow/rng.hpp"
#include "maskflow/sampling.hpp"
#include "maskflow/training.hpp"

using namespace maskflow;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double mean(const std::vector<double>& v) { return eval::summarize(v).mean; }

// ---- 1: gradients ----------------------------------------------------------

Outcome gradients(const config::RunConfig& rc) {
    const auto t0 = Clock::now();
    const auto r = pipeline::model_grad_check(rc, rc.seed, 100);
    const double secs = seconds_since(t0);
    return {r.n_checked == 100 && r.max_rel_error < 1e-4 && secs < 60.0,
            fmt("max rel err %.3g over %zu coords (worst %s), %.1f s; need < 1e-4 and < 60 s", r.max_rel_error,
                r.n_checked, r.worst_param.c_str(), secs)};
}

// ---- 2: codec --------------------------------------------------------------

Outcome codec_exactness(const config::RunConfig& rc) {
    std::size_t exact = 0, partitions = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        Rng rng(s, "accept:clip");
        world::VideoClip c{Tensor({4 * (1 + s % 4), static_cast<std::size_t>(rc.world.height), static_cast<std::size_t>(rc.world.width), 3})};
        for (double& v : c.frames.storage()) v = rng.uniform();
        world::quantize_pixels(c);
        exact += codec::decode(codec::encode(c, 4)).frames.bit_equal(c.frames);
        const auto scene = world::random_scene(substream_seed(s, "accept:scene"), 3, rc.world);
        partitions += codec::downsample_masks(world::scene_masks(scene), 4).is_partition();
    }
    return {exact == 100 && partitions == 100,
            fmt("%zu/100 clips bitwise after round trip, %zu/100 downsampled 3-entity mask sets are partitions", exact,
                partitions)};
}

// ---- 3: adapter identity ---------------------------------------------------

dit::ConditionBundle random_condition(const dit::ModelConfig& mc, std::size_t F, std::uint64_t seed) {
    Rng rng(seed, "accept:cond");
    dit::ConditionBundle c;
    c.reference = rng.normal_tensor({mc.cells(), mc.channels}, 0.5);
    c.audio = dit::aggregate_audio(world::synth_audio(seed, 4 * F, world::AudioStyle::speech), mc.audio_tokens);
    c.t = rng.uniform();
    return c;
}

Outcome adapter_identity(const config::RunConfig& rc, const ckpt::Checkpoint& before, const ckpt::Checkpoint& after) {
    const dit::ModelConfig& mc = rc.model;
    const ParamStore p = dit::init_params(mc, rc.seed);
    std::size_t same = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const std::size_t F = 1 + s % mc.latent_frames;
        const Tensor x = Rng(s, "accept:x").normal_tensor({F * mc.cells(), mc.channels});
        const auto c = random_condition(mc, F, s);
        same += dit::velocity(p, mc, x, c, {true, true}).bit_equal(dit::velocity(p, mc, x, c, {true, false}));
    }
    std::size_t changed_frozen = 0, changed_lora = 0;
    for (const auto& n : after.params.names()) {
        const bool differs = !after.params.get(n).bit_equal(before.params.get(n));
        if (after.params.group(n) == Group::lora)
            changed_lora += differs;
        else
            changed_frozen += differs;
    }
    return {same == 10 && changed_frozen == 0 && changed_lora > 0,
            fmt("B=0 forward identical on %zu/10 inputs; after stage 1: %zu non-adapter tensors changed, %zu adapter "
                "tensors trained",
                same, changed_frozen, changed_lora)};
}

// ---- 4: guidance reduction -------------------------------------------------

Outcome guidance_reduction(const config::RunConfig& rc, const ParamStore& p) {
    const dit::ModelConfig& mc = rc.model;
    const sample::ModelRef m{&p, &mc, {true, true}, nullptr};
    const Tensor full({mc.grid_h, mc.grid_w}, 1.0);
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng(s, "accept:triple");
        const double t = rng.uniform(), lambda = rng.uniform(0.0, 8.0);
        const Tensor x = rng.normal_tensor({mc.cells(), mc.channels});
        const auto c = random_condition(mc, 1, 100 + s);
        const Tensor& audio = *c.audio;
        sample::GuidanceSpec spec;
        spec.entries.push_back({audio, full, lambda});
        worst = std::max(worst, max_abs_diff(sample::mask_cfg_velocity(m, x, t, c.reference, spec),
                                             sample::cfg_velocity(m, x, t, c.reference, audio, lambda)));
    }
    std::size_t exact = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        Rng rng(s, "accept:silent");
        const Tensor x = rng.normal_tensor({2 * mc.cells(), mc.channels});
        const auto c = random_condition(mc, 2, 200 + s);
        const Tensor silent = dit::silent_tokens(2, mc);
        sample::GuidanceSpec spec;
        const auto scene = world::random_scene(substream_seed(s, "accept:scene"), 2, rc.world);
        const auto lm = codec::downsample_masks(world::scene_masks(scene), 4);
        for (const auto& mask : lm.masks) spec.entries.push_back({silent, mask, rng.uniform(0.0, 8.0)});
        exact += sample::mask_cfg_velocity(m, x, c.t, c.reference, spec).bit_equal(m(x, c.t, c.reference, &silent));
    }
    return {worst <= 1e-12 && exact == 10,
            fmt("n=1 full mask vs standard: max |dv| %.3g over 50 triples (need <= 1e-12); all-silent spec exact on "
                "%zu/10",
                worst, exact)};
}

// ---- 5: factorization oracle -----------------------------------------------

Outcome factorization() {
    const auto t0 = Clock::now();
    double worst = 0.0, coupled = 1e300;
    for (std::uint64_t s = 0; s < 5; ++s) {
        worst = std::max(worst, sample::verify_mask_factorization(3, 4, 3, s, false));
        coupled = std::min(coupled, sample::verify_mask_factorization(3, 4, 3, s, true));
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-12 && coupled > 0.01 && secs < 10.0,
            fmt("factorized discrepancy %.3g (need < 1e-12), coupled %.3g (need > 0.01), %.2f s over 5 models", worst,
                coupled, secs)};
}

// ---- 6: preference-loss fixed points ---------------------------------------

Outcome dpo_fixed_points(const config::RunConfig& rc, const ParamStore& stage2) {
    const dit::ModelConfig& mc = rc.model;
    const train::TrainConfig tc = rc.stage_config(3, 1);
    const dit::ForwardFlags flags = train::stage_flags(3);
    const data::DataConfig dc = train::stage_data(tc, mc, tc.clip_frames);
    ParamStore ref = stage2;
    ref.set_trainable(train::trainable_groups(3));
    const double ln2 = std::log(2.0);

    // A mined pair from the stage-3 data distribution.
    train::PreferencePair pair;
    for (std::uint64_t s = 0; s < 32; ++s) {
        const data::Sample smp = data::make_sample(substream_seed(rc.seed, "accept:dpo", s), dc);
        pair = train::mine_preference_pairs(smp.clip, smp.audio, smp.talking_mask, tc.k_segments, tc.seg_len,
                                            substream_seed(rc.seed, "accept:mine", s), 4, mc.audio_tokens);
        pair.reference = smp.reference;
        if (!pair.degenerate) break;
    }
    if (pair.degenerate) return {false, "no non-degenerate preference pair found"};

    auto cond = [&](const Tensor& audio, double t) {
        dit::ConditionBundle c;
        c.reference = pair.reference;
        c.audio = audio;
        c.t = t;
        return c;
    };
    auto fm = [&](const ParamStore& p, const Tensor& z0, const Tensor& y, const Tensor& audio, double t) {
        return train::flow_matching_loss_value(p, mc, z0, y, cond(audio, t), t, flags);
    };
    auto grad = [&](const Tensor& z0, const Tensor& y, const Tensor& audio, double t) {
        ad::Graph g;
        return g.backward(train::flow_matching_loss(g, ref, mc, z0, y, cond(audio, t), t, flags));
    };

    double fixed_err = 0.0;
    Rng rng(rc.seed, "accept:dpo:fixed");
    ParamStore other = ref;
    for (const auto& n : other.names_in(Group::audio_cross_attn))
        for (double& v : other.mutable_value(n).storage()) v += 0.05 * rng.normal();
    for (int k = 0; k < 10; ++k) {
        const Tensor zw = rng.normal_tensor(pair.y_w.shape()), zl = rng.normal_tensor(pair.y_l.shape());
        const double t = rng.uniform();
        fixed_err = std::max(fixed_err, std::abs(train::flow_dpo_loss_value(pair, t, zw, zl, ref, ref, mc, tc.beta,
                                                                            flags) - ln2));
        fixed_err = std::max(fixed_err, std::abs(train::flow_dpo_loss_value(pair, 1.0, zw, zl, other, ref, mc,
                                                                            tc.beta, flags) - ln2));
    }

    // Perturbations along -grad(y_w) + grad(y_l) plus a random component
    // improve the winner and worsen the loser; the premise is checked on the
    // measured errors, not assumed.
    std::size_t premise = 0, below = 0, attempts = 0;
    while (premise < 100 && attempts < 400) {
        Rng r(attempts++, "accept:dpo:perturb");
        const double t = r.uniform(0.0, 0.95);
        const Tensor zw = r.normal_tensor(pair.y_w.shape()), zl = r.normal_tensor(pair.y_l.shape());
        const GradMap gw = grad(zw, pair.y_w, pair.audio_w, t), gl = grad(zl, pair.y_l, pair.audio_l, t);
        double nw = 0.0, nl = 0.0;
        for (const auto& [n, g] : gw)
            for (double v : g.storage()) nw += v * v;
        for (const auto& [n, g] : gl)
            for (double v : g.storage()) nl += v * v;
        if (nw == 0.0 || nl == 0.0) continue;
        nw = std::sqrt(nw);
        nl = std::sqrt(nl);
        const double eps = std::pow(10.0, r.uniform(-5.0, -3.0));
        ParamStore pol = ref;
        for (const auto& [n, g] : gw) {
            auto& w = pol.mutable_value(n).storage();
            const auto& a = g.storage();
            const auto& b = gl.at(n).storage();
            for (std::size_t i = 0; i < w.size(); ++i)
                w[i] += eps * (-a[i] / nw + b[i] / nl + 0.3 * r.normal() / std::sqrt(static_cast<double>(w.size())));
        }
        const double dw = fm(pol, zw, pair.y_w, pair.audio_w, t) - fm(ref, zw, pair.y_w, pair.audio_w, t);
        const double dl = fm(pol, zl, pair.y_l, pair.audio_l, t) - fm(ref, zl, pair.y_l, pair.audio_l, t);
        if (!(dw < 0.0 && dl > 0.0)) continue;
        ++premise;
        below += train::flow_dpo_loss_value(pair, t, zw, zl, pol, ref, mc, tc.beta, flags) < ln2;
    }
    return {fixed_err <= 1e-9 && premise == 100 && below == 100,
            fmt("|loss - ln2| <= %.3g at policy == reference and t = 1 (need <= 1e-9); loss < ln2 on %zu/%zu "
                "improve-winner/worsen-loser perturbations (%zu drawn)",
                fixed_err, below, premise, attempts)};
}

// ---- 7-10: trained-model criteria --------------------------------------------

Outcome end_to_end_sync(const config::RunConfig& rc, const ParamStore& stage2, double train_secs, std::size_t threads) {
    const auto seeds = pipeline::seed_list(rc.eval.seed_base, rc.eval.n_seeds);
    const auto r = pipeline::sync_protocol(stage2, rc, seeds, threads);
    const double m = mean(r.matched), c = mean(r.control);
    const bool in_budget = train_secs < 0.0 || train_secs <= 1800.0;
    return {seeds.size() >= 20 && m - c >= 0.3 && in_budget,
            fmt("matched %.3f vs control %.3f, margin %.3f over %zu seeds (need >= 0.3); stages 1-2 training %s", m, c,
                m - c, seeds.size(), train_secs < 0.0 ? "cached" : fmt("%.0f s (budget 1800 s)", train_secs).c_str())};
}

Outcome dpo_improvement(const config::RunConfig& rc, const ParamStore& stage2, const ParamStore& stage3,
                        std::size_t threads) {
    const auto seeds = pipeline::seed_list(rc.eval.seed_base + 100000, rc.eval.dpo_seeds);
    const auto a = pipeline::sync_protocol(stage2, rc, seeds, threads);
    const auto b = pipeline::sync_protocol(stage3, rc, seeds, threads);
    std::vector<double> delta;
    std::size_t wins = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        delta.push_back(b.matched[i] - a.matched[i]);
        wins += delta.back() > 0.0;
    }
    const double p = eval::sign_test_p(delta);
    const double d = mean(delta);
    return {seeds.size() >= 20 && d > 0.0 && p < 0.05,
            fmt("sync %.4f -> %.4f (mean paired delta %+.4f, %zu/%zu seeds improved, sign test p = %.3g; need > 0 "
                "and p < 0.05)",
                mean(a.matched), mean(b.matched), d, wins, seeds.size(), p)};
}

Outcome multi_routing(const config::RunConfig& rc, const ParamStore& p, std::size_t threads) {
    const auto seeds = pipeline::seed_list(rc.eval.seed_base, rc.eval.n_seeds);
    const auto r = pipeline::multi_protocol(p, rc, seeds, threads);
    const double m = mean(r.margin), l = mean(r.leakage);
    return {seeds.size() >= 20 && rc.eval.n_entities == 3 && m >= 0.3 && l < 0.2,
            fmt("%zu-entity row margin %.3f (need >= 0.3), leakage %.4f (need < 0.2) over %zu seeds",
                rc.eval.n_entities, m, l, seeds.size())};
}

Outcome long_video(const config::RunConfig& rc, const ParamStore& p, std::size_t threads) {
    const auto t0 = Clock::now();
    const auto seeds = pipeline::seed_list(rc.eval.seed_base, rc.eval.n_seeds);
    const auto r = pipeline::long_protocol(p, rc, seeds, threads);
    const double secs = seconds_since(t0);
    const double bs = mean(r.boundary_shift), be = mean(r.boundary_ext);
    const double ds = mean(r.drift_shift), de = mean(r.drift_ext);
    return {seeds.size() >= 20 && bs < be && ds < de && secs < 1200.0,
            fmt("%zux length: boundary ratio shift %.4f vs extension %.4f, max drift shift %.4f vs extension %.4f "
                "over %zu seeds, %.0f s",
                rc.eval.long_factor, bs, be, ds, de, seeds.size(), secs)};
}

// ---- 11: CLI determinism -----------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Outcome cli_determinism(const std::string& cli, const std::string& tiny, const fs::path& work) {
    fs::remove_all(work);
    auto run_all = [&](const fs::path& d) {
        const std::string cfg = " --config " + tiny + " --threads 1 --seed 5";
        const std::string o = d.string();
        const std::vector<std::pair<std::string, std::string>> cmds = {
            {"gen-data", "gen-data" + cfg + " --out " + o + "/gen-data"},
            {"train", "train --stage 0" + cfg + " --out " + o + "/train0"},
            {"train", "train --stage 1 --in " + o + "/train0/stage0.plm2" + cfg + " --out " + o + "/train1"},
            {"train", "train --stage 2 --in " + o + "/train1/stage1.plm2" + cfg + " --out " + o + "/train2"},
            {"train", "train --stage 3 --in " + o + "/train2/stage2.plm2" + cfg + " --out " + o + "/train3"},
            {"sample", "sample --ckpt " + o + "/train3/stage3.plm2" + cfg + " --out " + o + "/sample"},
            {"eval", "eval --ckpt " + o + "/train3/stage3.plm2 --baseline " + o + "/train2/stage2.plm2" + cfg +
                         " --out " + o + "/eval"},
            {"gradcheck", "gradcheck --coords 20" + cfg + " --out " + o + "/gradcheck"},
            {"report", "report --in " + o + "/train3 " + o + "/eval" + cfg + " --out " + o + "/report"},
        };
        for (const auto& [name, args] : cmds) {
            const std::string cmd = cli + " " + args + " >>" + (work / "cli.log").string() + " 2>&1";
            const int st = std::system(cmd.c_str());
            if (!WIFEXITED(st) || WEXITSTATUS(st) != 0) return name;
        }
        return std::string();
    };
    fs::create_directories(work);
    for (const char* run : {"a", "b"})
        if (const std::string failed = run_all(work / run); !failed.empty())
            return {false, "command '" + failed + "' failed in run " + run + " (see " + (work / "cli.log").string() + ")"};
    std::size_t files = 0;
    std::vector<std::string> differing;
    for (const auto& e : fs::recursive_directory_iterator(work / "a")) {
        if (!e.is_regular_file()) continue;
        ++files;
        const fs::path rel = fs::relative(e.path(), work / "a");
        if (!fs::exists(work / "b" / rel) || slurp(e.path()) != slurp(work / "b" / rel)) differing.push_back(rel.string());
    }
    std::size_t files_b = 0;
    for (const auto& e : fs::recursive_directory_iterator(work / "b")) files_b += e.is_regular_file();
    std::string detail = fmt("%zu output files from gen-data, train (stages 0-3), sample, eval, gradcheck, report; "
                             "%zu differ between two runs",
                             files, differing.size() + (files_b != files));
    if (!differing.empty()) detail += " (first: " + differing.front() + ")";
    return {files > 0 && files == files_b && differing.empty(), detail};
}

// ---- trained checkpoints, cached by configuration hash -------------------------

struct Trained {
    std::vector<ckpt::Checkpoint> stages;
    double stage12_secs = -1.0;  // < 0 when loaded from the cache
};

Trained trained_stages(const config::RunConfig& rc, const fs::path& cache, std::size_t threads) {
    const fs::path dir = cache / rc.hash_hex();
    Trained t;
    bool cached = true;
    for (int s = 0; s <= 3; ++s) cached = cached && fs::exists(dir / fmt("stage%d.plm2", s));
    if (cached) {
        for (int s = 0; s <= 3; ++s) t.stages.push_back(ckpt::load((dir / fmt("stage%d.plm2", s)).string()));
        std::fprintf(stderr, "using cached checkpoints in %s\n", dir.c_str());
        return t;
    }
    fs::create_directories(dir);
    std::optional<ckpt::Checkpoint> prev;
    double secs12 = 0.0;
    for (int s = 0; s <= 3; ++s) {
        std::fprintf(stderr, "training stage %d (%zu steps)\n", s, rc.train.stages[s].steps);
        const auto t0 = Clock::now();
        auto o = pipeline::train_stage(rc, s, prev, threads);
        const double secs = seconds_since(t0);
        if (s == 1 || s == 2) secs12 += secs;
        std::fprintf(stderr, "  stage %d done in %.0f s\n", s, secs);
        ckpt::save((dir / fmt("stage%d.plm2", s)).string(), o.checkpoint);
        prev = o.checkpoint;
        t.stages.push_back(std::move(o.checkpoint));
    }
    t.stage12_secs = secs12;
    return t;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maskflow acceptance battery"};
    std::string config_path = MASKFLOW_SOURCE_DIR "/configs/toy.json";
    std::string tiny_path = MASKFLOW_SOURCE_DIR "/configs/tiny.json";
    std::string cli = MASKFLOW_CLI_PATH;
    std::string cache = MASKFLOW_CACHE_DIR;
    std::string report = MASKFLOW_REPORT_PATH;
    std::size_t threads = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 4);
    app.add_option("--config", config_path, "configuration for the trained-model criteria");
    app.add_option("--tiny", tiny_path, "configuration for the CLI determinism run");
    app.add_option("--cli", cli, "maskflow executable");
    app.add_option("--cache", cache, "checkpoint cache directory");
    app.add_option("--report", report, "also write the result lines here (empty to skip)");
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);

    std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;
    config::RunConfig rc;
    try {
        rc = config::RunConfig::parse(ckpt::read_text(config_path));
    } catch (const Error& e) {
        std::fprintf(stderr, "cannot load %s: %s\n", config_path.c_str(), e.what());
        return 2;
    }
    Trained tr;
    auto trained = [&]() -> const Trained& {
        if (tr.stages.empty()) tr = trained_stages(rc, cache, threads);
        return tr;
    };
    criteria.emplace_back("gradient correctness", [&] { return gradients(rc); });
    criteria.emplace_back("codec exactness", [&] { return codec_exactness(rc); });
    criteria.emplace_back("adapter zero-init identity",
                          [&] { return adapter_identity(rc, trained().stages[0], trained().stages[1]); });
    criteria.emplace_back("mask guidance reduction", [&] { return guidance_reduction(rc, trained().stages[2].params); });
    criteria.emplace_back("factorization oracle", [&] { return factorization(); });
    criteria.emplace_back("preference loss fixed points", [&] { return dpo_fixed_points(rc, trained().stages[2].params); });
    criteria.emplace_back("end-to-end sync", [&] {
        return end_to_end_sync(rc, trained().stages[2].params, trained().stage12_secs, threads);
    });
    criteria.emplace_back("preference improvement",
                          [&] { return dpo_improvement(rc, trained().stages[2].params, trained().stages[3].params, threads); });
    criteria.emplace_back("multi-entity routing", [&] { return multi_routing(rc, trained().stages[3].params, threads); });
    criteria.emplace_back("long-video ablation", [&] { return long_video(rc, trained().stages[3].params, threads); });
    criteria.emplace_back("CLI determinism",
                          [&] { return cli_determinism(cli, tiny_path, fs::path(cache) / "cli_determinism"); });

    std::string lines;
    auto emit = [&](const std::string& line) {
        std::fputs(line.c_str(), stdout);
        std::fflush(stdout);
        lines += line;
    };
    std::size_t passed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        passed += o.pass;
        emit(fmt("[%s] %2zu %s: ", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str()) + o.detail +
             fmt(" [%.1f s]\n", seconds_since(t0)));
    }
    emit(fmt("%zu/%zu criteria passed\n", passed, criteria.size()));
    if (!report.empty()) {
        std::ofstream f(report);
        f << lines;
        if (!f) std::fprintf(stderr, "could not write %s\n", report.c_str());
    }
    return passed == criteria.size() ? 0 : 1;
}
