#include "maskflow/sampling.hpp"

#include <cmath>
#include <thread>

#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::sample {

LongMode long_mode_from_name(const std::string& name) {
    if (name == "position_shift") return LongMode::position_shift;
    if (name == "final_latent_extension") return LongMode::final_latent_extension;
    throw ConfigError("unknown long-video mode '" + name + "'");
}

std::string long_mode_name(LongMode m) {
    return m == LongMode::position_shift ? "position_shift" : "final_latent_extension";
}

void SamplerConfig::validate() const {
    if (n_steps == 0) throw ConfigError("n_steps must be >= 1");
    if (seg_chunks == 0) throw ConfigError("segment length must be >= 1 chunk");
    if (context_chunks >= seg_chunks) throw ConfigError("context chunks must be fewer than segment chunks");
    if (!std::isfinite(cfg_scale)) throw ConfigError("cfg scale must be finite");
    if (threads == 0) throw ConfigError("threads must be >= 1");
}

Tensor ModelRef::operator()(const Tensor& x_t, double t, const Tensor& reference, const Tensor* audio) const {
    dit::ConditionBundle c;
    c.reference = reference;
    c.t = t;
    if (audio) c.audio = *audio;
    if (passes) ++*passes;
    return dit::velocity(*params, *cfg, x_t, c, flags);
}

Tensor initial_noise(const Shape& shape, std::uint64_t seed, std::uint64_t index) {
    Rng rng(seed, "sample_noise", index);
    return rng.normal_tensor(shape);
}

Tensor euler_sample(const Tensor& x0, const VelocityFn& v, std::size_t n_steps) {
    if (n_steps == 0) throw ArgumentError("euler_sample: n_steps must be >= 1");
    Tensor x = x0;
    const double dt = 1.0 / static_cast<double>(n_steps);
    for (std::size_t s = 0; s < n_steps; ++s) {
        const Tensor vel = v(x, static_cast<double>(s) * dt);
        if (vel.shape() != x.shape()) throw DimensionError("velocity shape differs from state");
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (!std::isfinite(vel[i])) throw NumericalFault("non-finite velocity", s);
            x[i] += dt * vel[i];
        }
    }
    return x;
}

bool is_silent(const Tensor& audio_tokens) {
    for (double v : audio_tokens.storage())
        if (v != 0.0) return false;
    return true;
}

namespace {

Tensor silence_like(const Tensor& audio) { return Tensor(audio.shape()); }

// v_u + lambda (v_c - v_u), exact at lambda = 0 and lambda = 1.
double blend(double vu, double vc, double lambda) { return lambda == 1.0 ? vc : vu + lambda * (vc - vu); }

}  // namespace

Tensor cfg_velocity(const ModelRef& m, const Tensor& x_t, double t, const Tensor& reference, const Tensor& audio,
                    double lambda) {
    const Tensor silent = silence_like(audio);
    Tensor vu = m(x_t, t, reference, &silent);
    if (is_silent(audio)) return vu;
    const Tensor vc = m(x_t, t, reference, &audio);
    Tensor out(vu.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = blend(vu[i], vc[i], lambda);
    return out;
}

void GuidanceSpec::validate(std::size_t grid_h, std::size_t grid_w) const {
    if (entries.empty()) throw GuidanceSpecError("guidance spec has no entries");
    const std::size_t cells = grid_h * grid_w;
    const Shape audio_shape = entries.front().audio.shape();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const GuidanceEntry& e = entries[i];
        if (e.mask.size() != cells) throw GuidanceSpecError("mask " + std::to_string(i) + " does not cover the latent grid");
        if (e.audio.shape() != audio_shape) throw GuidanceSpecError("audio " + std::to_string(i) + " has a different shape");
        if (!std::isfinite(e.lambda)) throw GuidanceSpecError("lambda " + std::to_string(i) + " is not finite");
        for (double v : e.mask.storage())
            if (v != 0.0 && v != 1.0) throw GuidanceSpecError("mask " + std::to_string(i) + " is not binary");
    }
    for (std::size_t c = 0; c < cells; ++c) {
        double cover = 0.0;
        for (const auto& e : entries) cover += e.mask[c];
        if (cover != 1.0) throw GuidanceSpecError("masks do not partition the latent grid at cell " + std::to_string(c));
    }
    if (entries.size() > 1 && !is_silent(entries.front().audio))
        throw GuidanceSpecError("entry 0 must carry silent audio");
}

Tensor mask_cfg_velocity(const ModelRef& m, const Tensor& x_t, double t, const Tensor& reference,
                         const GuidanceSpec& spec, std::size_t threads) {
    const std::size_t hw = m.cfg->cells();
    spec.validate(m.cfg->grid_h, m.cfg->grid_w);
    if (x_t.rows() % hw != 0) throw DimensionError("x_t rows are not a whole number of latent frames");

    // Distinct non-silent audios, in entry order. Silent entries fold into
    // the background: their terms vanish.
    std::vector<const Tensor*> distinct;
    std::vector<std::ptrdiff_t> branch(spec.entries.size(), -1);
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
        const Tensor& a = spec.entries[i].audio;
        if (is_silent(a)) continue;
        for (std::size_t d = 0; d < distinct.size() && branch[i] < 0; ++d)
            if (distinct[d]->bit_equal(a)) branch[i] = static_cast<std::ptrdiff_t>(d);
        if (branch[i] < 0) {
            branch[i] = static_cast<std::ptrdiff_t>(distinct.size());
            distinct.push_back(&a);
        }
    }
    const Tensor silent = silence_like(spec.entries.front().audio);
    std::vector<const Tensor*> inputs{&silent};
    inputs.insert(inputs.end(), distinct.begin(), distinct.end());
    std::vector<Tensor> v(inputs.size());
    if (threads <= 1 || inputs.size() == 1) {
        for (std::size_t i = 0; i < inputs.size(); ++i) v[i] = m(x_t, t, reference, inputs[i]);
    } else {
        std::vector<std::thread> pool;
        const std::size_t nt = std::min(threads, inputs.size());
        std::vector<std::exception_ptr> err(nt);
        for (std::size_t tid = 0; tid < nt; ++tid)
            pool.emplace_back([&, tid] {
                try {
                    for (std::size_t i = tid; i < inputs.size(); i += nt) v[i] = m(x_t, t, reference, inputs[i]);
                } catch (...) {
                    err[tid] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : err)
            if (e) std::rethrow_exception(e);
    }
    const Tensor& vu = v[0];
    Tensor out = vu;
    const std::size_t C = x_t.cols(), rows = x_t.rows();
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
        if (branch[i] < 0) continue;
        const Tensor& vc = v[static_cast<std::size_t>(branch[i]) + 1];
        const Tensor& mask = spec.entries[i].mask;
        const double lambda = spec.entries[i].lambda;
        for (std::size_t r = 0; r < rows; ++r) {
            if (mask[r % hw] == 0.0) continue;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t k = r * C + c;
                out[k] = blend(vu[k], vc[k], lambda);
            }
        }
    }
    return out;
}

double verify_mask_factorization(std::size_t n_regions, std::size_t n_states, std::size_t n_audios,
                                 std::uint64_t seed, bool coupled) {
    if (n_regions == 0 || n_states == 0 || n_audios == 0) throw ArgumentError("factorization check needs nonempty sizes");
    double space = 1.0;
    for (std::size_t r = 0; r < n_regions; ++r) space *= static_cast<double>(n_states);
    if (space > 1e6) throw ArgumentError("enumeration budget exceeded");
    if (coupled && n_regions < 2) throw ArgumentError("coupling needs at least two regions");
    const auto n_x = static_cast<std::size_t>(space);

    Rng rng(seed, "factorization");
    auto distribution = [&](std::size_t n) {
        std::vector<double> p(n);
        double s = 0.0;
        for (auto& v : p) s += (v = std::exp(2.0 * rng.normal()));
        for (auto& v : p) v /= s;
        return p;
    };
    double worst = 0.0;
    // Each region takes a turn as the one the condition acts on.
    for (std::size_t target = 0; target < n_regions; ++target) {
        const std::vector<double> prior = distribution(n_audios);
        // table[r][a][state]; regions that ignore a share one row.
        const std::size_t partner = (target + 1) % n_regions;
        std::vector<std::vector<std::vector<double>>> table(n_regions);
        for (std::size_t r = 0; r < n_regions; ++r) {
            const bool depends = r == target || (coupled && r == partner);
            if (depends) {
                for (std::size_t a = 0; a < n_audios; ++a) table[r].push_back(distribution(n_states));
            } else {
                table[r].assign(n_audios, distribution(n_states));
            }
        }
        std::vector<std::size_t> digits(n_regions);
        // Marginal p(x_target | a) by enumeration of the full joint.
        std::vector<std::vector<double>> marg(n_audios, std::vector<double>(n_states, 0.0));
        std::vector<std::vector<double>> joint(n_audios, std::vector<double>(n_x));
        for (std::size_t x = 0; x < n_x; ++x) {
            std::size_t rem = x;
            for (std::size_t r = 0; r < n_regions; ++r) {
                digits[r] = rem % n_states;
                rem /= n_states;
            }
            for (std::size_t a = 0; a < n_audios; ++a) {
                double p = 1.0;
                for (std::size_t r = 0; r < n_regions; ++r) p *= table[r][a][digits[r]];
                joint[a][x] = p;
                marg[a][digits[target]] += p;
            }
        }
        for (std::size_t x = 0; x < n_x; ++x) {
            const std::size_t xt = (x / static_cast<std::size_t>(std::pow(n_states, target) + 0.5)) % n_states;
            double z_full = 0.0, z_masked = 0.0;
            for (std::size_t a = 0; a < n_audios; ++a) {
                z_full += prior[a] * joint[a][x];
                z_masked += prior[a] * marg[a][xt];
            }
            for (std::size_t a = 0; a < n_audios; ++a) {
                const double full = prior[a] * joint[a][x] / z_full;
                const double masked = prior[a] * marg[a][xt] / z_masked;
                worst = std::max(worst, std::abs(full - masked));
            }
        }
    }
    return worst;
}

Tensor sample_clip(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t frames,
                   const SamplerConfig& sc) {
    sc.validate();
    const Tensor x0 = initial_noise({frames * m.cfg->cells(), m.cfg->channels}, sc.seed, 0);
    return euler_sample(
        x0, [&](const Tensor& x, double t) { return cfg_velocity(m, x, t, reference, audio, sc.cfg_scale); },
        sc.n_steps);
}

std::vector<std::size_t> extension_segment_starts(std::size_t total_chunks, std::size_t seg_chunks,
                                                  std::size_t context_chunks) {
    std::vector<std::size_t> starts;
    for (std::size_t s = seg_chunks; s < total_chunks; s += seg_chunks - context_chunks) starts.push_back(s);
    return starts;
}

namespace {

Tensor gather_chunks(const Tensor& x, const std::vector<std::size_t>& chunks, std::size_t rows_per_chunk) {
    const std::size_t C = x.cols();
    Tensor out(Shape{chunks.size() * rows_per_chunk, C});
    for (std::size_t j = 0; j < chunks.size(); ++j)
        std::copy_n(x.storage().begin() + static_cast<std::ptrdiff_t>(chunks[j] * rows_per_chunk * C),
                    rows_per_chunk * C, out.storage().begin() + static_cast<std::ptrdiff_t>(j * rows_per_chunk * C));
    return out;
}

Tensor rows_range(const Tensor& x, std::size_t begin, std::size_t end) { return x.rows_slice(begin, end); }

Tensor long_extension(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t total,
                      const SamplerConfig& sc) {
    const std::size_t hw = m.cfg->cells(), C = m.cfg->channels, l = m.cfg->audio_tokens;
    const std::size_t F = sc.seg_chunks, k = sc.context_chunks;
    const double dt = 1.0 / static_cast<double>(sc.n_steps);
    Tensor out(Shape{total * hw, C});
    std::size_t done = 0;
    for (std::size_t seg = 0; done < total; ++seg) {
        const std::size_t ctx = seg == 0 ? 0 : k;
        const std::size_t ws = done - ctx;
        const std::size_t we = std::min(ws + F, total);
        const std::size_t n_new = we - done;
        const Tensor a = rows_range(audio, ws * l, we * l);
        Tensor noise = initial_noise({F * hw, C}, sc.seed, seg);
        Tensor x = rows_range(noise, ctx * hw, (ctx + n_new) * hw);
        const Tensor clean_ctx = rows_range(out, ws * hw, done * hw);
        const Tensor z0_ctx = Rng(sc.seed, "context_noise", seg).normal_tensor(clean_ctx.shape());
        for (std::size_t s = 0; s < sc.n_steps; ++s) {
            const double t = static_cast<double>(s) * dt;
            Tensor window(Shape{(ctx + n_new) * hw, C});
            for (std::size_t i = 0; i < clean_ctx.size(); ++i) window[i] = (1.0 - t) * z0_ctx[i] + t * clean_ctx[i];
            std::copy(x.storage().begin(), x.storage().end(),
                      window.storage().begin() + static_cast<std::ptrdiff_t>(clean_ctx.size()));
            const Tensor v = cfg_velocity(m, window, t, reference, a, sc.cfg_scale);
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double vi = v[clean_ctx.size() + i];
                if (!std::isfinite(vi)) throw NumericalFault("non-finite velocity", s);
                x[i] += dt * vi;
            }
        }
        std::copy(x.storage().begin(), x.storage().end(),
                  out.storage().begin() + static_cast<std::ptrdiff_t>(done * hw * C));
        done = we;
    }
    return out;
}

Tensor long_position_shift(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t total,
                           const SamplerConfig& sc) {
    const std::size_t hw = m.cfg->cells(), C = m.cfg->channels, l = m.cfg->audio_tokens;
    const std::size_t F = sc.seg_chunks;
    const double dt = 1.0 / static_cast<double>(sc.n_steps);
    // The buffer is built from the same per-segment draws as the other mode.
    Tensor x(Shape{total * hw, C});
    for (std::size_t seg = 0, c0 = 0; c0 < total; ++seg, c0 += F) {
        const Tensor noise = initial_noise({F * hw, C}, sc.seed, seg);
        const std::size_t n = std::min(F, total - c0) * hw * C;
        std::copy_n(noise.storage().begin(), n, x.storage().begin() + static_cast<std::ptrdiff_t>(c0 * hw * C));
    }
    for (std::size_t s = 0; s < sc.n_steps; ++s) {
        const double t = static_cast<double>(s) * dt;
        const std::size_t offset = total <= F ? 0 : (s * sc.shift) % F;
        Tensor next = x;
        for (std::size_t w0 = 0; w0 < total; w0 += F) {
            std::vector<std::size_t> chunks;
            for (std::size_t j = w0; j < std::min(w0 + F, total); ++j) chunks.push_back((offset + j) % total);
            const Tensor xw = gather_chunks(x, chunks, hw);
            const Tensor aw = gather_chunks(audio, chunks, l);
            const Tensor v = cfg_velocity(m, xw, t, reference, aw, sc.cfg_scale);
            for (std::size_t j = 0; j < chunks.size(); ++j)
                for (std::size_t i = 0; i < hw * C; ++i) {
                    const double vi = v[j * hw * C + i];
                    if (!std::isfinite(vi)) throw NumericalFault("non-finite velocity", s);
                    next[chunks[j] * hw * C + i] = xw[j * hw * C + i] + dt * vi;
                }
        }
        x = std::move(next);
    }
    return x;
}

}  // namespace

Tensor generate_long(const ModelRef& m, const Tensor& reference, const Tensor& audio, std::size_t total_chunks,
                     const SamplerConfig& sc) {
    sc.validate();
    if (total_chunks == 0) throw ArgumentError("generate_long: no chunks requested");
    if (audio.rows() != total_chunks * m.cfg->audio_tokens)
        throw DimensionError("generate_long: audio covers " + std::to_string(audio.rows()) + " tokens, expected " +
                             std::to_string(total_chunks * m.cfg->audio_tokens));
    if (sc.mode == LongMode::final_latent_extension) return long_extension(m, reference, audio, total_chunks, sc);
    return long_position_shift(m, reference, audio, total_chunks, sc);
}

}  // namespace maskflow::sample
