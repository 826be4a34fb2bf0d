#include "maskflow/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "maskflow/codec.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::train {

void TrainConfig::validate() const {
    if (stage < 0 || stage > 3) throw ConfigError("stage must be 0, 1, 2 or 3");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch == 0) throw ConfigError("batch must be >= 1");
    if (!(lambda_dpo >= 0.0)) throw ConfigError("lambda_dpo must be >= 0");
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("p_drop must lie in [0, 1)");
    if (clip_frames == 0 || clip_frames % codec::kChunk != 0) throw ConfigError("clip_frames must be a multiple of 4");
    if (stage == 3) {
        if (k_segments < 2) throw ConfigError("k_segments must be >= 2");
        if (seg_len == 0 || seg_len % codec::kChunk != 0 || seg_len > clip_frames)
            throw ConfigError("seg_len must be a multiple of 4 no longer than clip_frames");
    }
    if (ref_update_interval == 0) throw ConfigError("ref_update_interval must be >= 1");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    if (!(sync_defect >= 0.0 && sync_defect <= 1.0)) throw ConfigError("sync_defect must lie in [0, 1]");
}

std::set<Group> trainable_groups(int stage) {
    switch (stage) {
        case 0: return {Group::base_self_attn, Group::base_cross_attn, Group::other};
        case 1: return {Group::lora};
        case 2:
        case 3: return {Group::audio_cross_attn};
        default: throw ConfigError("unknown stage " + std::to_string(stage));
    }
}

dit::ForwardFlags stage_flags(int stage) {
    switch (stage) {
        case 0: return {false, false};
        case 1: return {false, true};
        default: return {true, true};
    }
}

data::DataConfig stage_data(const TrainConfig& tc, const dit::ModelConfig& mc, std::size_t frames) {
    data::DataConfig dc;
    dc.world = tc.world;
    dc.world.height = static_cast<int>(mc.grid_h * 4);
    dc.world.width = static_cast<int>(mc.grid_w * 4);
    dc.world.sync_defect = tc.sync_defect;
    dc.frames = frames;
    dc.min_entities = tc.min_entities;
    dc.max_entities = tc.max_entities;
    dc.audio_tokens = mc.audio_tokens;
    return dc;
}

Tensor interpolate(const Tensor& z0, const Tensor& z1, double t) {
    if (z0.shape() != z1.shape()) throw DimensionError("interpolate: " + shape_str(z0.shape()) + " vs " + shape_str(z1.shape()));
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * z0[i] + t * z1[i];
    return out;
}

namespace {

Tensor difference(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

void check_t(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ArgumentError("t must lie in [0, 1], got " + std::to_string(t));
}

}  // namespace

ad::Var flow_matching_loss(ad::Graph& g, const ParamStore& p, const dit::ModelConfig& cfg, const Tensor& z0,
                           const Tensor& z1, const dit::ConditionBundle& cond, double t, dit::ForwardFlags flags) {
    check_t(t);
    if (z0.shape() != z1.shape()) throw DimensionError("flow_matching_loss: z0 and z1 shapes differ");
    dit::ConditionBundle c = cond;
    c.t = t;
    ad::Var v = dit::forward_velocity(g, p, cfg, interpolate(z0, z1, t), c, flags);
    return ad::mse(v, g.constant(difference(z1, z0)));
}

double flow_matching_loss_value(const ParamStore& p, const dit::ModelConfig& cfg, const Tensor& z0, const Tensor& z1,
                                const dit::ConditionBundle& cond, double t, dit::ForwardFlags flags) {
    ad::Graph g(false);
    return flow_matching_loss(g, p, cfg, z0, z1, cond, t, flags).value().item();
}

PreferencePair mine_preference_pairs(const world::VideoClip& clip, const world::AudioTrack& audio,
                                     const world::Mask& mask, std::size_t k, std::size_t seg_len, std::uint64_t seed,
                                     std::size_t spatial, std::size_t audio_tokens) {
    const std::size_t T = clip.length();
    if (k < 2) throw ArgumentError("mine_preference_pairs: k must be >= 2");
    if (seg_len == 0 || seg_len % codec::kChunk != 0) throw ArgumentError("seg_len must be a positive multiple of 4");
    if (seg_len > T) throw ArgumentError("clip of " + std::to_string(T) + " frames is shorter than seg_len");
    if (audio.frames() != T) throw ArgumentError("mine_preference_pairs: audio length differs from clip");

    Rng rng(seed, "mine");
    std::vector<std::size_t> starts(k);
    std::vector<double> scores(k);
    for (std::size_t i = 0; i < k; ++i) {
        starts[i] = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(T - seg_len)));
        scores[i] = world::sync_oracle(clip.slice(starts[i], starts[i] + seg_len), mask,
                                       audio.slice(starts[i], starts[i] + seg_len));
    }
    std::size_t best = 0, worst = 0;
    for (std::size_t i = 1; i < k; ++i) {
        if (scores[i] > scores[best] || (scores[i] == scores[best] && starts[i] < starts[best])) best = i;
        if (scores[i] < scores[worst] || (scores[i] == scores[worst] && starts[i] < starts[worst])) worst = i;
    }
    PreferencePair pair;
    pair.s_w = scores[best];
    pair.s_l = scores[worst];
    pair.start_w = starts[best];
    pair.start_l = starts[worst];
    pair.degenerate = pair.s_w == pair.s_l;
    auto seg = [&](std::size_t s, Tensor& lat, Tensor& aud) {
        lat = codec::encode(clip.slice(s, s + seg_len), spatial).tokens();
        aud = dit::aggregate_audio(audio.slice(s, s + seg_len), audio_tokens);
    };
    seg(pair.start_w, pair.y_w, pair.audio_w);
    seg(pair.start_l, pair.y_l, pair.audio_l);
    return pair;
}

DpoTerms flow_dpo_loss(ad::Graph& g, const PreferencePair& pair, double t, const Tensor& z0_w, const Tensor& z0_l,
                       const ParamStore& policy, const ParamStore& ref, const dit::ModelConfig& cfg, double beta,
                       dit::ForwardFlags flags) {
    check_t(t);
    if (pair.y_w.shape() != pair.y_l.shape() || z0_w.shape() != pair.y_w.shape() || z0_l.shape() != pair.y_l.shape())
        throw DimensionError("flow_dpo_loss: segment and noise shapes differ");
    auto cond = [&](const Tensor& audio) {
        dit::ConditionBundle c;
        c.audio = audio;
        c.reference = pair.reference;
        c.t = t;
        return c;
    };
    const dit::ConditionBundle cw = cond(pair.audio_w), cl = cond(pair.audio_l);
    ad::Var pol_w = flow_matching_loss(g, policy, cfg, z0_w, pair.y_w, cw, t, flags);
    ad::Var pol_l = flow_matching_loss(g, policy, cfg, z0_l, pair.y_l, cl, t, flags);
    const double ref_w = flow_matching_loss_value(ref, cfg, z0_w, pair.y_w, cw, t, flags);
    const double ref_l = flow_matching_loss_value(ref, cfg, z0_l, pair.y_l, cl, t, flags);

    ad::Var bracket = ad::sub(ad::sub(pol_w, g.constant(Tensor::scalar(ref_w))),
                              ad::sub(pol_l, g.constant(Tensor::scalar(ref_l))));
    const double beta_t = beta * (1.0 - t) * (1.0 - t);
    DpoTerms out;
    out.loss = ad::neg_log_sigmoid(ad::affine(bracket, -0.5 * beta_t, 0.0));
    out.policy_w = pol_w;
    out.bracket = bracket.value().item();
    out.beta_t = beta_t;
    return out;
}

double flow_dpo_loss_value(const PreferencePair& pair, double t, const Tensor& z0_w, const Tensor& z0_l,
                           const ParamStore& policy, const ParamStore& ref, const dit::ModelConfig& cfg, double beta,
                           dit::ForwardFlags flags) {
    ad::Graph g(false);
    return flow_dpo_loss(g, pair, t, z0_w, z0_l, policy, ref, cfg, beta, flags).loss.value().item();
}

void AdamW::step(ParamStore& p, const GradMap& grads) {
    for (const auto& [name, g] : grads) {
        if (p.is_trainable(name)) continue;
        for (double v : g.storage())
            if (v != 0.0) throw StageIsolationFault("nonzero gradient for frozen parameter " + name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        if (!p.is_trainable(name)) continue;
        Tensor& w = p.mutable_value(name);
        if (g.shape() != w.shape()) throw DimensionError("gradient shape mismatch for " + name);
        auto [mi, new_m] = m_.try_emplace(name, Tensor(w.shape()));
        auto [vi, new_v] = v_.try_emplace(name, Tensor(w.shape()));
        Tensor& m = mi->second;
        Tensor& v = vi->second;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            w[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * w[i]);
        }
    }
}

std::string log_csv(const std::vector<LogRow>& rows) {
    std::ostringstream os;
    os << "step,stage,loss_total,loss_diff,loss_dpo,lr,wall_ms\n";
    char buf[256];
    for (const LogRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.stage, r.loss_total,
                      r.loss_diff, r.loss_dpo, r.lr, r.wall_ms);
        os << buf;
    }
    return os.str();
}

void check_isolation(const ParamStore& before, const ParamStore& after, const std::set<Group>& groups) {
    if (before.frozen_equal(after, groups)) return;
    std::string changed;
    for (const auto& [name, prm] : before.entries()) {
        if (groups.count(prm.group)) continue;
        if (!after.contains(name) || !after.get(name).bit_equal(prm.value)) changed += " " + name;
    }
    throw StageIsolationFault("frozen parameters changed:" + changed);
}

namespace {

struct ElementResult {
    GradMap grads;
    double total = 0.0, diff = 0.0, dpo = 0.0;
    bool skipped = false;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers; results land in
// index order so the reduction does not depend on scheduling.
template <typename Fn>
std::vector<ElementResult> run_batch(std::size_t n, std::size_t threads, Fn fn) {
    std::vector<ElementResult> out(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t tid, std::size_t nt) {
        for (std::size_t i = tid; i < n; i += nt) {
            try {
                out[i] = fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t nt = std::min(threads, n);
    if (nt <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t tid = 0; tid < nt; ++tid) pool.emplace_back(work, tid, nt);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

GradMap reduce(const std::vector<ElementResult>& parts, std::size_t& used) {
    GradMap sum;
    used = 0;
    for (const auto& r : parts) {
        if (r.skipped) continue;
        ++used;
        for (const auto& [name, g] : r.grads) {
            auto [it, fresh] = sum.try_emplace(name, g);
            if (fresh) continue;
            for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
    }
    if (used > 1)
        for (auto& [name, g] : sum)
            for (auto& v : g.storage()) v /= static_cast<double>(used);
    return sum;
}

std::string stage_key(int stage, const char* what) { return "stage" + std::to_string(stage) + ":" + what; }

}  // namespace

StageResult run_stage(const ParamStore& init, const dit::ModelConfig& mc, const TrainConfig& tc) {
    tc.validate();
    mc.validate();
    const std::set<Group> groups = trainable_groups(tc.stage);
    const dit::ForwardFlags flags = stage_flags(tc.stage);
    StageResult res;
    res.params = init;
    res.params.set_trainable(groups);
    ParamStore ref = res.params;
    AdamW opt(tc.lr);
    const data::DataConfig dc = stage_data(tc, mc, tc.clip_frames);

    for (std::size_t step = 0; step < tc.steps; ++step) {
        const auto t_start = std::chrono::steady_clock::now();
        auto element = [&](std::size_t b) -> ElementResult {
            const std::uint64_t idx = step * tc.batch + b;
            Rng rng(tc.seed, stage_key(tc.stage, "noise"), idx);
            ElementResult r;
            ad::Graph g;
            if (tc.stage < 3) {
                const data::Sample s = data::make_sample(substream_seed(tc.seed, stage_key(tc.stage, "sample"), idx), dc);
                const double t = rng.uniform();
                const Tensor z0 = rng.normal_tensor(s.latent.shape());
                dit::ConditionBundle c;
                c.reference = s.reference;
                c.audio = s.audio_tokens;
                c.drop_audio = tc.stage == 2 && rng.uniform() < tc.p_drop;
                ad::Var loss = flow_matching_loss(g, res.params, mc, z0, s.latent, c, t, flags);
                r.total = r.diff = loss.value().item();
                r.grads = g.backward(loss);
                return r;
            }
            // Re-draw a few times when the mined pair carries no preference.
            PreferencePair pair;
            bool found = false;
            for (std::uint64_t attempt = 0; attempt < 8 && !found; ++attempt) {
                const std::uint64_t sseed = substream_seed(tc.seed, stage_key(3, "sample"), idx * 8 + attempt);
                const data::Sample s = data::make_sample(sseed, dc);
                const std::uint64_t mseed = substream_seed(sseed, "mine");
                pair = tc.miner ? tc.miner(s, mseed)
                                : mine_preference_pairs(s.clip, s.audio, s.talking_mask, tc.k_segments, tc.seg_len,
                                                        mseed, 4, mc.audio_tokens);
                pair.reference = s.reference;
                found = !pair.degenerate;
            }
            if (!found) {
                r.skipped = true;
                return r;
            }
            const double t = rng.uniform();
            const Tensor z0_w = rng.normal_tensor(pair.y_w.shape());
            const Tensor z0_l = rng.normal_tensor(pair.y_l.shape());
            DpoTerms d = flow_dpo_loss(g, pair, t, z0_w, z0_l, res.params, ref, mc, tc.beta, flags);
            ad::Var total = ad::add(d.policy_w, ad::affine(d.loss, tc.lambda_dpo, 0.0));
            r.diff = d.policy_w.value().item();
            r.dpo = d.loss.value().item();
            r.total = total.value().item();
            r.grads = g.backward(total);
            return r;
        };
        const std::vector<ElementResult> parts = run_batch(tc.batch, tc.threads, element);
        std::size_t used = 0;
        const GradMap grads = reduce(parts, used);
        LogRow row;
        row.step = step;
        row.stage = tc.stage;
        row.lr = tc.lr;
        for (const auto& r : parts) {
            if (r.skipped) {
                ++res.skipped_pairs;
                continue;
            }
            row.loss_total += r.total;
            row.loss_diff += r.diff;
            row.loss_dpo += r.dpo;
        }
        if (used > 0) {
            row.loss_total /= static_cast<double>(used);
            row.loss_diff /= static_cast<double>(used);
            row.loss_dpo /= static_cast<double>(used);
            if (!std::isfinite(row.loss_total)) throw NumericalFault("non-finite training loss", step);
            opt.step(res.params, grads);
        }
        if (tc.timing)
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
        res.log.push_back(row);
        if (tc.stage == 3 && (step + 1) % tc.ref_update_interval == 0) ref = res.params;
    }
    check_isolation(init, res.params, groups);
    return res;
}

void fit_preconditioner_from_data(ParamStore& p, const dit::ModelConfig& mc, const TrainConfig& tc, std::size_t n_clips) {
    if (n_clips == 0) throw ArgumentError("fit_preconditioner_from_data: n_clips must be >= 1");
    const data::DataConfig dc = stage_data(tc, mc, tc.clip_frames);
    std::vector<double> all;
    for (std::size_t i = 0; i < n_clips; ++i) {
        const data::Sample s = data::make_sample(substream_seed(tc.seed, "precond:sample", i), dc);
        const std::size_t C = mc.channels, hw = mc.cells();
        for (std::size_t r = 0; r < s.latent.rows(); ++r)
            for (std::size_t c = 0; c < C; ++c)
                all.push_back(s.latent.at(r, c) - (mc.anchor_reference ? s.reference.at(r % hw, c) : 0.0));
    }
    const std::size_t C = mc.channels, n = all.size() / C;
    dit::fit_preconditioner(p, Tensor(Shape{n, C}, std::move(all)));
}

double validation_loss(const ParamStore& p, const dit::ModelConfig& mc, const TrainConfig& tc, std::size_t n,
                       std::uint64_t seed) {
    if (n == 0) throw ArgumentError("validation_loss: n must be >= 1");
    const dit::ForwardFlags flags = stage_flags(tc.stage);
    const data::DataConfig dc = stage_data(tc, mc, tc.clip_frames);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const data::Sample s = data::make_sample(substream_seed(seed, "val:sample", i), dc);
        Rng rng(seed, "val:noise", i);
        const Tensor z0 = rng.normal_tensor(s.latent.shape());
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        dit::ConditionBundle c;
        c.reference = s.reference;
        c.audio = s.audio_tokens;
        sum += flow_matching_loss_value(p, mc, z0, s.latent, c, t, flags);
    }
    return sum / static_cast<double>(n);
}

}  // namespace maskflow::train
