#include "maskflow/model.hpp"

#include <cmath>
#include <map>

#include <Eigen/Dense>

#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::dit {

namespace {

const char* const kProj[] = {"q", "k", "v", "o"};

std::string block(std::size_t i) { return "blocks." + std::to_string(i); }

// Binds each stored parameter at most once per graph.
class Binder {
public:
    Binder(ad::Graph& g, const ParamStore& p) : g_(g), p_(p) {}
    ad::Var operator()(const std::string& name) {
        auto it = vars_.find(name);
        if (it != vars_.end()) return it->second;
        ad::Var v = g_.parameter(p_, name);
        vars_.emplace(name, v);
        return v;
    }
    bool has(const std::string& name) const { return p_.contains(name); }

private:
    ad::Graph& g_;
    const ParamStore& p_;
    std::map<std::string, ad::Var> vars_;
};

ad::Var lora_linear_impl(Binder& P, const std::string& prefix, ad::Var x, const ModelConfig& cfg, bool use_lora) {
    ad::Var y = ad::linear(x, P(prefix + ".weight"), P(prefix + ".bias"));
    if (!use_lora || !P.has(prefix + ".lora_down")) return y;
    ad::Var delta = ad::matmul(ad::matmul(x, P(prefix + ".lora_down")), P(prefix + ".lora_up"));
    return ad::add(y, ad::affine(delta, cfg.lora_alpha / static_cast<double>(cfg.lora_rank), 0.0));
}

ad::Var cross_attention_impl(Binder& P, const std::string& prefix, ad::Var z_v, ad::Var z_a, std::size_t frames,
                             const ModelConfig& cfg) {
    const std::size_t hw = cfg.cells(), l = cfg.audio_tokens;
    if (z_v.value().rows() != frames * hw || z_a.value().rows() != frames * l) {
        throw DimensionError("audio cross-attention: video has " + std::to_string(z_v.value().rows()) +
                             " tokens and audio " + std::to_string(z_a.value().rows()) + " for " +
                             std::to_string(frames) + " frames");
    }
    ad::Var n = ad::layer_norm(z_v, P(prefix + ".norm.gain"), P(prefix + ".norm.bias"));
    ad::Var q = ad::linear(n, P(prefix + ".q.weight"), P(prefix + ".q.bias"));
    // Key bias is per token slot within a frame, tiled over frames.
    ad::Var slot = P(prefix + ".k.slot_bias");
    ad::Var tiled = frames == 1 ? slot : ad::concat_rows(std::vector<ad::Var>(frames, slot));
    ad::Var k = ad::add(ad::matmul(z_a, P(prefix + ".k.weight")), tiled);
    ad::Var v = ad::matmul(z_a, P(prefix + ".v.weight"));
    ad::Var a = ad::attention(q, k, v, cfg.n_heads, ad::AttentionLayout::uniform_blocks(frames, hw, l));
    return ad::add(z_v, ad::matmul(a, P(prefix + ".o.weight")));
}

void sincos_into(Tensor& out, std::size_t row, std::size_t col0, std::size_t n, double pos, double base) {
    for (std::size_t i = 0; i < n; ++i) {
        const double freq = std::pow(base, -static_cast<double>(2 * (i / 2)) / static_cast<double>(n));
        out.at(row, col0 + i) = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
    }
}

Tensor transpose(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    Tensor out(Shape{c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

struct PosSplit {
    std::size_t frame, y, x;
};

PosSplit pos_split(std::size_t d) {
    const std::size_t q = d / 4;
    return {d - 2 * q, q, q};
}

}  // namespace

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model must be a positive multiple of n_heads");
    if (n_layers == 0) throw ConfigError("n_layers must be >= 1");
    if (lora_rank == 0) throw ConfigError("lora_rank must be >= 1");
    if (audio_tokens == 0) throw ConfigError("audio tokens per frame must be >= 1");
    if (grid_h == 0 || grid_w == 0 || channels == 0 || latent_frames == 0)
        throw ConfigError("latent dimensions must be positive");
    if (!(sigma_data >= 0.0)) throw ConfigError("sigma_data must be >= 0");
    if (audio_dim == 0 || time_dim == 0 || mlp_ratio == 0) throw ConfigError("audio_dim, time_dim, mlp_ratio must be >= 1");
}

Tensor aggregate_audio(const world::AudioTrack& track, std::size_t tokens_per_frame) {
    const std::size_t T = track.frames();
    if (T == 0 || T % 4 != 0) throw DimensionError("audio length " + std::to_string(T) + " is not a multiple of 4");
    if (tokens_per_frame == 0) throw ArgumentError("tokens per frame must be >= 1");
    const std::size_t F = T / 4, da = track.features.cols(), l = tokens_per_frame;
    Tensor out(Shape{F * l, da});
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t j = 0; j < l; ++j) {
            if (l == 4) {
                for (std::size_t c = 0; c < da; ++c) out.at(f * l + j, c) = track.features.at(4 * f + j, c);
                continue;
            }
            const double pos = l == 1 ? 1.5 : 3.0 * static_cast<double>(j) / static_cast<double>(l - 1);
            const std::size_t lo = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
            const std::size_t hi = std::min<std::size_t>(lo + 1, 3);
            const double w = pos - static_cast<double>(lo);
            for (std::size_t c = 0; c < da; ++c)
                out.at(f * l + j, c) =
                    (1.0 - w) * track.features.at(4 * f + lo, c) + w * track.features.at(4 * f + hi, c);
        }
    return out;
}

Tensor silent_tokens(std::size_t frames, const ModelConfig& cfg) {
    return Tensor(Shape{frames * cfg.audio_tokens, cfg.audio_dim});
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore p;
    const std::size_t d = cfg.d_model, C = cfg.channels;
    auto normal = [&](const std::string& name, Shape shape, double std, Group g) {
        Rng rng(seed, "init:" + name);
        p.add(name, rng.normal_tensor(std::move(shape), std), g);
    };
    auto zeros = [&](const std::string& name, Shape shape, Group g) { p.add(name, Tensor(std::move(shape)), g); };
    auto ln = [&](const std::string& prefix, Group g) {
        p.add(prefix + ".gain", Tensor::ones({1, d}), g);
        zeros(prefix + ".bias", {1, d}, g);
    };
    auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    normal("patch_embed.weight", {C, d}, inv_sqrt(C), Group::other);
    zeros("patch_embed.bias", {1, d}, Group::other);
    normal("ref_embed", {1, d}, 0.02, Group::other);
    normal("time_mlp.fc1.weight", {cfg.time_dim, d}, inv_sqrt(cfg.time_dim), Group::other);
    zeros("time_mlp.fc1.bias", {1, d}, Group::other);
    normal("time_mlp.fc2.weight", {d, d}, inv_sqrt(d), Group::other);
    zeros("time_mlp.fc2.bias", {1, d}, Group::other);
    normal("audio_embed.weight", {cfg.audio_dim, d}, inv_sqrt(cfg.audio_dim), Group::audio_cross_attn);

    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string b = block(i);
        ln(b + ".norm1", Group::other);
        for (const char* proj : kProj) {
            const std::string s = b + ".self_attn." + proj;
            normal(s + ".weight", {d, d}, inv_sqrt(d), Group::base_self_attn);
            zeros(s + ".bias", {1, d}, Group::base_self_attn);
            normal(s + ".lora_down", {d, cfg.lora_rank}, inv_sqrt(d), Group::lora);
            zeros(s + ".lora_up", {cfg.lora_rank, d}, Group::lora);
        }
        const std::string a = b + ".audio_attn";
        ln(a + ".norm", Group::audio_cross_attn);
        normal(a + ".q.weight", {d, d}, inv_sqrt(d), Group::audio_cross_attn);
        zeros(a + ".q.bias", {1, d}, Group::audio_cross_attn);
        normal(a + ".k.weight", {d, d}, inv_sqrt(d), Group::audio_cross_attn);
        normal(a + ".k.slot_bias", {cfg.audio_tokens, d}, 0.02, Group::audio_cross_attn);
        normal(a + ".v.weight", {d, d}, inv_sqrt(d), Group::audio_cross_attn);
        zeros(a + ".o.weight", {d, d}, Group::audio_cross_attn);
        ln(b + ".norm2", Group::other);
        const std::size_t hid = cfg.mlp_ratio * d;
        normal(b + ".mlp.fc1.weight", {d, hid}, inv_sqrt(d), Group::other);
        zeros(b + ".mlp.fc1.bias", {1, hid}, Group::other);
        normal(b + ".mlp.fc2.weight", {hid, d}, inv_sqrt(hid), Group::other);
        zeros(b + ".mlp.fc2.bias", {1, d}, Group::other);
    }
    ln("final_norm", Group::other);
    normal("unembed.weight", {d, C}, inv_sqrt(d), Group::other);
    zeros("unembed.bias", {1, C}, Group::other);
    zeros("buffer.precond_mean", {1, C}, Group::other);
    Tensor eye(Shape{C, C});
    for (std::size_t i = 0; i < C; ++i) eye.at(i, i) = 1.0;
    p.add("buffer.precond_basis", std::move(eye), Group::other);
    p.add("buffer.precond_eigvals", Tensor(Shape{1, C}, cfg.sigma_data * cfg.sigma_data), Group::other);
    return p;
}

Tensor timestep_features(double t, std::size_t dim) {
    Tensor out(Shape{1, dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out.at(0, i) = std::sin(1000.0 * t * freq);
        out.at(0, half + i) = std::cos(1000.0 * t * freq);
    }
    return out;
}

Tensor position_table(const ModelConfig& cfg, std::size_t frames) {
    const std::size_t d = cfg.d_model, hw = cfg.cells();
    const PosSplit sp = pos_split(d);
    Tensor out(Shape{frames * hw, d});
    for (std::size_t f = 0; f < frames; ++f)
        for (std::size_t y = 0; y < cfg.grid_h; ++y)
            for (std::size_t x = 0; x < cfg.grid_w; ++x) {
                const std::size_t r = f * hw + y * cfg.grid_w + x;
                sincos_into(out, r, 0, sp.frame, static_cast<double>(f), 100.0);
                sincos_into(out, r, sp.frame, sp.y, static_cast<double>(y), 100.0);
                sincos_into(out, r, sp.frame + sp.y, sp.x, static_cast<double>(x), 100.0);
            }
    return out;
}

Tensor reference_position_table(const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const PosSplit sp = pos_split(d);
    Tensor out(Shape{cfg.cells(), d});
    for (std::size_t y = 0; y < cfg.grid_h; ++y)
        for (std::size_t x = 0; x < cfg.grid_w; ++x) {
            const std::size_t r = y * cfg.grid_w + x;
            sincos_into(out, r, sp.frame, sp.y, static_cast<double>(y), 100.0);
            sincos_into(out, r, sp.frame + sp.y, sp.x, static_cast<double>(x), 100.0);
        }
    return out;
}

ad::Var lora_linear(ad::Graph& g, const ParamStore& p, const std::string& prefix, ad::Var x, const ModelConfig& cfg,
                    bool use_lora) {
    Binder P(g, p);
    return lora_linear_impl(P, prefix, x, cfg, use_lora);
}

ad::Var audio_cross_attention(ad::Graph& g, const ParamStore& p, const std::string& prefix, ad::Var z_v, ad::Var z_a,
                              std::size_t frames, const ModelConfig& cfg) {
    Binder P(g, p);
    return cross_attention_impl(P, prefix, z_v, z_a, frames, cfg);
}

ad::Var forward_velocity(ad::Graph& g, const ParamStore& p, const ModelConfig& cfg, const Tensor& x_t,
                         const ConditionBundle& cond, ForwardFlags flags) {
    const std::size_t hw = cfg.cells(), C = cfg.channels;
    if (x_t.rank() != 2 || x_t.cols() != C || x_t.rows() == 0 || x_t.rows() % hw != 0) {
        throw DimensionError("x_t " + shape_str(x_t.shape()) + " is not a (F*" + std::to_string(hw) + ") x " +
                             std::to_string(C) + " token matrix");
    }
    const std::size_t F = x_t.rows() / hw;
    Tensor ref;
    if (cond.drop_ref) {
        ref = Tensor(Shape{hw, C});
    } else {
        if (cond.reference.rank() != 2 || cond.reference.rows() != hw || cond.reference.cols() != C)
            throw DimensionError("reference " + shape_str(cond.reference.shape()) + " does not match the latent grid");
        ref = cond.reference;
    }
    const bool audio_on = flags.use_audio_layers && cond.audio.has_value();
    Tensor audio;
    if (audio_on) {
        const Tensor& a = *cond.audio;
        if (a.rank() != 2 || a.rows() != F * cfg.audio_tokens || a.cols() != cfg.audio_dim) {
            throw DimensionError("audio tokens " + shape_str(a.shape()) + " do not match " + std::to_string(F) +
                                 " latent frames");
        }
        audio = cond.drop_audio ? silent_tokens(F, cfg) : a;
    }

    Binder P(g, p);
    ad::Var W_in = P("patch_embed.weight"), b_in = P("patch_embed.bias");
    ad::Var hv = ad::add(ad::linear(g.constant(x_t), W_in, b_in), g.constant(position_table(cfg, F)));
    ad::Var hr = ad::add_row(ad::add(ad::linear(g.constant(ref), W_in, b_in),
                                     g.constant(reference_position_table(cfg))),
                             P("ref_embed"));
    ad::Var h = ad::concat_rows({hr, hv});

    ad::Var temb = ad::linear(g.constant(timestep_features(cond.t, cfg.time_dim)), P("time_mlp.fc1.weight"),
                              P("time_mlp.fc1.bias"));
    temb = ad::linear(ad::gelu(temb), P("time_mlp.fc2.weight"), P("time_mlp.fc2.bias"));

    ad::Var za{};
    if (audio_on) za = ad::matmul(g.constant(std::move(audio)), P("audio_embed.weight"));

    const std::size_t n_tok = h.value().rows();
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        const std::string b = block(i);
        h = ad::add_row(h, temb);
        ad::Var n1 = ad::layer_norm(h, P(b + ".norm1.gain"), P(b + ".norm1.bias"));
        const std::string s = b + ".self_attn.";
        ad::Var q = lora_linear_impl(P, s + "q", n1, cfg, flags.use_lora);
        ad::Var k = lora_linear_impl(P, s + "k", n1, cfg, flags.use_lora);
        ad::Var v = lora_linear_impl(P, s + "v", n1, cfg, flags.use_lora);
        ad::Var att = ad::attention(q, k, v, cfg.n_heads);
        h = ad::add(h, lora_linear_impl(P, s + "o", att, cfg, flags.use_lora));
        if (audio_on) {
            ad::Var r = ad::slice_rows(h, 0, hw);
            ad::Var vid = cross_attention_impl(P, b + ".audio_attn", ad::slice_rows(h, hw, n_tok), za, F, cfg);
            h = ad::concat_rows({r, vid});
        }
        ad::Var n2 = ad::layer_norm(h, P(b + ".norm2.gain"), P(b + ".norm2.bias"));
        ad::Var m = ad::linear(ad::gelu(ad::linear(n2, P(b + ".mlp.fc1.weight"), P(b + ".mlp.fc1.bias"))),
                               P(b + ".mlp.fc2.weight"), P(b + ".mlp.fc2.bias"));
        h = ad::add(h, m);
    }
    ad::Var out = ad::layer_norm(ad::slice_rows(h, hw, n_tok), P("final_norm.gain"), P("final_norm.bias"));
    ad::Var net = ad::linear(out, P("unembed.weight"), P("unembed.bias"));
    if (cfg.sigma_data <= 0.0) return net;

    const Tensor& mu = p.get("buffer.precond_mean");
    const Tensor& U = p.get("buffer.precond_basis");
    const Preconditioning pc = preconditioning(cond.t, p.get("buffer.precond_eigvals"));
    // Per-token prior mean: fitted residual mean, plus the reference token at
    // the same cell when anchoring.
    Tensor mean(Shape{x_t.rows(), C});
    for (std::size_t r = 0; r < mean.rows(); ++r)
        for (std::size_t c = 0; c < C; ++c)
            mean.at(r, c) = mu[c] + (cfg.anchor_reference ? ref.at(r % hw, c) : 0.0);
    Tensor centered = x_t;
    for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= cond.t * mean[i];
    Tensor lin = ad::matmul(centered, U);
    for (std::size_t r = 0; r < lin.rows(); ++r)
        for (std::size_t c = 0; c < C; ++c) lin.at(r, c) *= pc.skip[c];
    // Back-rotation with the output scale folded in: diag(c_out) U^T.
    Tensor back(Shape{C, C});
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) back.at(i, j) = pc.out[i] * U.at(j, i);
    Tensor base = ad::matmul(lin, transpose(U));
    for (std::size_t i = 0; i < base.size(); ++i) base[i] += mean[i];
    return ad::add(g.constant(std::move(base)), ad::matmul(net, g.constant(std::move(back))));
}

Preconditioning preconditioning(double t, const Tensor& eigvals) {
    const std::size_t C = eigvals.size();
    Preconditioning pc{Tensor(Shape{1, C}), Tensor(Shape{1, C})};
    for (std::size_t k = 0; k < C; ++k) {
        const double lam = eigvals[k];
        const double s = (1.0 - t) * (1.0 - t) + t * t * lam;
        pc.skip[k] = (t * lam - (1.0 - t)) / s;
        pc.out[k] = std::sqrt(lam / s);
    }
    return pc;
}

void fit_preconditioner(ParamStore& p, const Tensor& tokens, double min_eigval) {
    const std::size_t N = tokens.rows(), C = tokens.cols();
    if (N < 2) throw ArgumentError("fit_preconditioner: need at least two tokens");
    if (p.get("buffer.precond_basis").rows() != C) throw DimensionError("fit_preconditioner: channel count mismatch");
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(tokens.storage().data(),
                                                                                               static_cast<Eigen::Index>(N),
                                                                                               static_cast<Eigen::Index>(C));
    const Eigen::RowVectorXd mean = X.colwise().mean();
    const Eigen::MatrixXd centered = X.rowwise() - mean;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(N);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericalFault("covariance eigendecomposition failed", 0);
    Tensor mu(Shape{1, C}), U(Shape{C, C}), lam(Shape{1, C});
    for (std::size_t j = 0; j < C; ++j) {
        mu[j] = mean(static_cast<Eigen::Index>(j));
        // Largest eigenvalue first; fix each vector's sign so the basis is reproducible.
        const auto src = static_cast<Eigen::Index>(C - 1 - j);
        lam[j] = std::max(es.eigenvalues()(src), min_eigval);
        Eigen::VectorXd v = es.eigenvectors().col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        for (std::size_t i = 0; i < C; ++i) U.at(i, j) = v(static_cast<Eigen::Index>(i));
    }
    p.set("buffer.precond_mean", std::move(mu));
    p.set("buffer.precond_basis", std::move(U));
    p.set("buffer.precond_eigvals", std::move(lam));
}

Tensor velocity(const ParamStore& p, const ModelConfig& cfg, const Tensor& x_t, const ConditionBundle& cond,
                ForwardFlags flags) {
    ad::Graph g(false);
    return forward_velocity(g, p, cfg, x_t, cond, flags).value();
}

std::vector<std::string> lora_wrapped_weights(const ModelConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < cfg.n_layers; ++i)
        for (const char* proj : kProj) out.push_back(block(i) + ".self_attn." + proj);
    return out;
}

ParamStore apply_lora_merge(const ParamStore& p, const ModelConfig& cfg) {
    ParamStore out = p;
    const double scale = cfg.lora_alpha / static_cast<double>(cfg.lora_rank);
    for (const std::string& prefix : lora_wrapped_weights(cfg)) {
        const std::string dn = prefix + ".lora_down", up = prefix + ".lora_up", wn = prefix + ".weight";
        if (!p.contains(dn) || !p.contains(up)) throw ArgumentError("apply_lora_merge: no adapter on " + prefix);
        const Tensor& W = p.get(wn);
        const Tensor& A = p.get(dn);
        const Tensor& B = p.get(up);
        if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != cfg.lora_rank || B.shape()[0] != cfg.lora_rank ||
            A.shape()[0] != W.shape()[0] || B.shape()[1] != W.shape()[1]) {
            throw DimensionError("apply_lora_merge: adapter on " + prefix + " has shapes " + shape_str(A.shape()) +
                                 " / " + shape_str(B.shape()) + ", expected rank " + std::to_string(cfg.lora_rank));
        }
        const Tensor delta = ad::matmul(A, B);
        Tensor merged = W;
        for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += scale * delta[i];
        out.set(wn, std::move(merged));
        out.erase(dn);
        out.erase(up);
    }
    return out;
}

}  // namespace maskflow::dit
