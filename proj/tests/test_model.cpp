#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/model.hpp"
#include "maskflow/training.hpp"

using namespace maskflow;
using namespace maskflow::dit;
using testing::random_tensor;
using testing::small_model;

namespace {

ConditionBundle cond_for(const ModelConfig& mc, std::size_t F, std::uint64_t seed, double t = 0.4) {
    ConditionBundle c;
    c.reference = random_tensor({mc.cells(), mc.channels}, seed, 0.5);
    c.audio = aggregate_audio(world::synth_audio(seed, 4 * F, world::AudioStyle::speech), mc.audio_tokens);
    c.t = t;
    return c;
}

Tensor x_for(const ModelConfig& mc, std::size_t F, std::uint64_t seed) {
    return random_tensor({F * mc.cells(), mc.channels}, seed + 1000);
}

}  // namespace

TEST_SUITE("model config") {
    TEST_CASE("validation") {
        ModelConfig mc = small_model();
        CHECK_NOTHROW(mc.validate());
        mc.n_heads = 3;
        CHECK_THROWS_AS(mc.validate(), ConfigError);
        mc = small_model();
        mc.lora_rank = 0;
        CHECK_THROWS_AS(mc.validate(), ConfigError);
        mc = small_model();
        mc.audio_tokens = 0;
        CHECK_THROWS_AS(mc.validate(), ConfigError);
    }

    TEST_CASE("parameter groups follow the naming table") {
        ModelConfig mc = small_model();
        mc.n_layers = 2;
        ParamStore p = init_params(mc, 1);
        for (const auto& name : p.names()) {
            CAPTURE(name);
            Group g = p.group(name);
            if (name.ends_with("lora_down") || name.ends_with("lora_up")) {
                CHECK(g == Group::lora);
                CHECK(name.find(".self_attn.") != std::string::npos);
            } else if (name.find(".self_attn.") != std::string::npos) {
                CHECK(g == Group::base_self_attn);
            } else if (name.find("audio") != std::string::npos) {
                CHECK(g == Group::audio_cross_attn);
            } else {
                CHECK(g == Group::other);
            }
        }
        CHECK(p.names_in(Group::lora).size() == 2 * 4 * 2);
        CHECK(init_params(mc, 1).frozen_equal(p, {}));
    }
}

TEST_SUITE("audio tokens") {
    TEST_CASE("four features per latent frame") {
        auto a = world::synth_audio(3, 16, world::AudioStyle::speech);
        Tensor tok = aggregate_audio(a, 4);
        CHECK(tok.shape() == Shape{16, world::kAudioChannels});
        for (std::size_t f = 0; f < 4; ++f)
            for (std::size_t g = 0; g < 4; ++g)
                for (std::size_t c = 0; c < world::kAudioChannels; ++c) CHECK(tok.at(4 * f + g, c) == a.features.at(4 * f + g, c));
        CHECK(aggregate_audio(a, 2).shape() == Shape{8, world::kAudioChannels});
        CHECK_THROWS_AS(aggregate_audio(world::synth_audio(3, 10, world::AudioStyle::speech)), DimensionError);
    }

    TEST_CASE("silence aggregates to zeros") {
        Tensor tok = aggregate_audio(world::silent_audio(16));
        for (double v : tok.storage()) CHECK(v == 0.0);
        CHECK(tok.bit_equal(silent_tokens(4, small_model())));
    }
}

TEST_SUITE("audio cross-attention") {
    ModelConfig mc = small_model();

    TEST_CASE("zero value projection is a residual identity") {
        ParamStore p = init_params(mc, 2);
        testing::wake_zero_inits(p, 2);
        p.set("blocks.0.audio_attn.v.weight", Tensor({mc.d_model, mc.d_model}));
        ad::Graph g;
        Tensor zv = random_tensor({4 * mc.cells(), mc.d_model}, 3), za = random_tensor({16, mc.d_model}, 4);
        auto out = audio_cross_attention(g, p, "blocks.0.audio_attn", g.constant(zv), g.constant(za), 4, mc);
        CHECK(out.value().bit_equal(zv));
    }

    TEST_CASE("one audio token per frame adds the same vector to the whole frame") {
        ModelConfig m1 = mc;
        m1.audio_tokens = 1;
        ParamStore p = init_params(m1, 5);
        testing::wake_zero_inits(p, 5);
        ad::Graph g;
        Tensor zv = random_tensor({2 * m1.cells(), m1.d_model}, 6), za = random_tensor({2, m1.d_model}, 7);
        Tensor out = audio_cross_attention(g, p, "blocks.0.audio_attn", g.constant(zv), g.constant(za), 2, m1).value();
        for (std::size_t f = 0; f < 2; ++f)
            for (std::size_t r = 1; r < m1.cells(); ++r)
                for (std::size_t c = 0; c < m1.d_model; ++c) {
                    const std::size_t i = f * m1.cells() + r, i0 = f * m1.cells();
                    REQUIRE(std::abs((out.at(i, c) - zv.at(i, c)) - (out.at(i0, c) - zv.at(i0, c))) < 1e-12);
                }
    }

    TEST_CASE("spatial permutation equivariance") {
        ParamStore p = init_params(mc, 8);
        testing::wake_zero_inits(p, 8);
        const std::size_t hw = mc.cells();
        Tensor zv = random_tensor({2 * hw, mc.d_model}, 9), za = random_tensor({8, mc.d_model}, 10);
        std::vector<std::size_t> perm(hw);
        for (std::size_t i = 0; i < hw; ++i) perm[i] = (7 * i + 3) % hw;
        Tensor zp = zv;
        for (std::size_t f = 0; f < 2; ++f)
            for (std::size_t i = 0; i < hw; ++i)
                for (std::size_t c = 0; c < mc.d_model; ++c) zp.at(f * hw + i, c) = zv.at(f * hw + perm[i], c);
        ad::Graph g;
        Tensor a = audio_cross_attention(g, p, "blocks.0.audio_attn", g.constant(zv), g.constant(za), 2, mc).value();
        Tensor b = audio_cross_attention(g, p, "blocks.0.audio_attn", g.constant(zp), g.constant(za), 2, mc).value();
        for (std::size_t f = 0; f < 2; ++f)
            for (std::size_t i = 0; i < hw; ++i)
                for (std::size_t c = 0; c < mc.d_model; ++c)
                    REQUIRE(std::abs(b.at(f * hw + i, c) - a.at(f * hw + perm[i], c)) < 1e-12);
    }

    TEST_CASE("frame count mismatch") {
        ParamStore p = init_params(mc, 1);
        ad::Graph g;
        CHECK_THROWS_AS(audio_cross_attention(g, p, "blocks.0.audio_attn", g.constant(Tensor({2 * mc.cells(), mc.d_model})),
                                              g.constant(Tensor({12, mc.d_model})), 2, mc),
                        DimensionError);
    }
}

TEST_SUITE("forward") {
    ModelConfig mc = small_model();

    TEST_CASE("zero-initialized adapters leave the output bitwise unchanged") {
        ParamStore p = init_params(mc, 11);
        auto c = cond_for(mc, 4, 11);
        Tensor x = x_for(mc, 4, 11);
        CHECK(velocity(p, mc, x, c, {true, true}).bit_equal(velocity(p, mc, x, c, {true, false})));
        testing::wake_zero_inits(p, 11);
        CHECK_FALSE(velocity(p, mc, x, c, {true, true}).bit_equal(velocity(p, mc, x, c, {true, false})));
    }

    TEST_CASE("dropped audio equals explicit silence and is deterministic") {
        ParamStore p = init_params(mc, 12);
        testing::wake_zero_inits(p, 12);
        auto c = cond_for(mc, 4, 12);
        Tensor x = x_for(mc, 4, 12);
        auto dropped = c;
        dropped.drop_audio = true;
        auto silent = c;
        silent.audio = aggregate_audio(world::silent_audio(16), mc.audio_tokens);
        Tensor v1 = velocity(p, mc, x, dropped, {});
        CHECK(v1.bit_equal(velocity(p, mc, x, dropped, {})));
        CHECK(v1.bit_equal(velocity(p, mc, x, silent, {})));
        CHECK_FALSE(v1.bit_equal(velocity(p, mc, x, c, {})));
    }

    TEST_CASE("audio is ignored when the audio layers are off") {
        ParamStore p = init_params(mc, 13);
        testing::wake_zero_inits(p, 13);
        auto c = cond_for(mc, 4, 13);
        auto none = c;
        none.audio.reset();
        Tensor x = x_for(mc, 4, 13);
        CHECK(velocity(p, mc, x, c, {false, true}).bit_equal(velocity(p, mc, x, none, {false, true})));
        CHECK(velocity(p, mc, x, none, {true, true}).bit_equal(velocity(p, mc, x, none, {false, true})));
    }

    TEST_CASE("zeroing one frame's audio only changes that frame") {
        ParamStore p = init_params(mc, 14);
        testing::wake_zero_inits(p, 14);
        auto c = cond_for(mc, 4, 14);
        Tensor x = x_for(mc, 4, 14);
        Tensor base = velocity(p, mc, x, c, {});
        for (std::size_t f = 0; f < 4; ++f) {
            auto cz = c;
            for (std::size_t j = 0; j < mc.audio_tokens; ++j)
                for (std::size_t k = 0; k < mc.audio_dim; ++k) cz.audio->at(f * mc.audio_tokens + j, k) = 0.0;
            Tensor v = velocity(p, mc, x, cz, {});
            for (std::size_t g = 0; g < 4; ++g) {
                const bool same = v.rows_slice(g * mc.cells(), (g + 1) * mc.cells()).bit_equal(
                    base.rows_slice(g * mc.cells(), (g + 1) * mc.cells()));
                CHECK(same == (g != f));
            }
        }
    }

    TEST_CASE("shape contracts") {
        ParamStore p = init_params(mc, 15);
        auto c = cond_for(mc, 4, 15);
        CHECK_THROWS_AS(velocity(p, mc, Tensor({10, mc.channels}), c, {}), DimensionError);
        CHECK_THROWS_AS(velocity(p, mc, x_for(mc, 2, 15), c, {}), DimensionError);
        auto bad = c;
        bad.reference = Tensor({3, mc.channels});
        CHECK_THROWS_AS(velocity(p, mc, x_for(mc, 4, 15), bad, {}), DimensionError);
    }

    TEST_CASE("variable window length") {
        ParamStore p = init_params(mc, 16);
        for (std::size_t F : {1u, 3u, 6u}) {
            auto c = cond_for(mc, F, 16);
            CHECK(velocity(p, mc, x_for(mc, F, 16), c, {}).shape() == Shape{F * mc.cells(), mc.channels});
        }
    }
}

TEST_SUITE("preconditioning") {
    ModelConfig mc = small_model();

    TEST_CASE("coefficients at the endpoints") {
        Tensor lam({1, 3}, std::vector<double>{0.25, 1.0, 4.0});
        auto p0 = preconditioning(0.0, lam);
        auto p1 = preconditioning(1.0, lam);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(p0.skip[k] == -1.0);
            CHECK(std::abs(p0.out[k] - std::sqrt(lam[k])) < 1e-15);
            CHECK(std::abs(p1.skip[k] - 1.0) < 1e-15);
            CHECK(std::abs(p1.out[k] - 1.0) < 1e-15);
        }
    }

    TEST_CASE("fit recovers mean and an orthonormal eigenbasis") {
        const std::size_t C = mc.channels, N = 4000;
        Rng rng(17);
        Tensor mu({1, C});
        for (std::size_t c = 0; c < C; ++c) mu[c] = 0.01 * static_cast<double>(c % 7);
        Tensor tok({N, C});
        for (std::size_t r = 0; r < N; ++r) {
            const double shared = rng.normal();
            for (std::size_t c = 0; c < C; ++c) tok.at(r, c) = mu[c] + 0.1 * rng.normal() + (c < 2 ? shared : 0.0);
        }
        ParamStore p = init_params(mc, 18);
        fit_preconditioner(p, tok);
        const Tensor& m = p.get("buffer.precond_mean");
        for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(m[c] - mu[c]) < 0.05);
        const Tensor& U = p.get("buffer.precond_basis");
        Tensor I = ad::matmul(U, Tensor(U.shape()));
        for (std::size_t i = 0; i < C; ++i)
            for (std::size_t j = 0; j < C; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < C; ++k) s += U.at(k, i) * U.at(k, j);
                REQUIRE(std::abs(s - (i == j ? 1.0 : 0.0)) < 1e-10);
            }
        const Tensor& lam = p.get("buffer.precond_eigvals");
        CHECK(*std::max_element(lam.storage().begin(), lam.storage().end()) > 1.5);
        for (double l : lam.storage()) CHECK(l > 0.0);
        CHECK_THROWS_AS(fit_preconditioner(p, Tensor({1, C})), ArgumentError);
    }

    TEST_CASE("with a silent network the velocity is the optimal linear predictor at the endpoints") {
        ParamStore p = init_params(mc, 19);
        p.set("unembed.weight", Tensor({mc.d_model, mc.channels}));
        auto c = cond_for(mc, 2, 19);
        Tensor x = x_for(mc, 2, 19);
        c.t = 0.0;
        Tensor v0 = velocity(p, mc, x, c, {});
        c.t = 1.0;
        Tensor v1 = velocity(p, mc, x, c, {});
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t k = 0; k < mc.channels; ++k) {
                REQUIRE(std::abs(v0.at(r, k) - (c.reference.at(r % mc.cells(), k) - x.at(r, k))) < 1e-12);
                REQUIRE(std::abs(v1.at(r, k) - x.at(r, k)) < 1e-12);
            }
    }
}

TEST_SUITE("lora merge") {
    ModelConfig mc = small_model();

    TEST_CASE("zero adapters merge to the base weights") {
        ParamStore p = init_params(mc, 20);
        ParamStore m = apply_lora_merge(p, mc);
        CHECK(m.names_in(Group::lora).empty());
        for (const auto& pre : lora_wrapped_weights(mc)) CHECK(m.get(pre + ".weight").bit_equal(p.get(pre + ".weight")));
    }

    TEST_CASE("full-rank adapter equals the scaled product") {
        ModelConfig full = mc;
        full.lora_rank = full.d_model;
        ParamStore p = init_params(full, 21);
        testing::wake_zero_inits(p, 21, 0.3);
        ParamStore m = apply_lora_merge(p, full);
        const double scale = full.lora_alpha / static_cast<double>(full.lora_rank);
        for (const auto& prefix : lora_wrapped_weights(full)) {
            const std::string w = prefix + ".weight";
            Tensor ba = ad::matmul(p.get(prefix + ".lora_down"), p.get(prefix + ".lora_up"));
            for (std::size_t i = 0; i < ba.size(); ++i)
                REQUIRE(std::abs((m.get(w)[i] - p.get(w)[i]) - scale * ba[i]) < 1e-12);
        }
    }

    TEST_CASE("merged and adapter forward agree") {
        ParamStore p = init_params(mc, 22);
        testing::wake_zero_inits(p, 22, 0.2);
        ParamStore m = apply_lora_merge(p, mc);
        double worst = 0.0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            auto c = cond_for(mc, 1, 100 + s, 0.05 * static_cast<double>(s));
            Tensor x = x_for(mc, 1, 100 + s);
            worst = std::max(worst, max_abs_diff(velocity(p, mc, x, c, {}), velocity(m, mc, x, c, {})));
        }
        CHECK(worst < 1e-10);
    }

    TEST_CASE("rank mismatch is rejected") {
        ParamStore p = init_params(mc, 23);
        const std::string up = "blocks.0.self_attn.q.lora_up";
        p.erase(up);
        p.add(up, Tensor({mc.lora_rank + 1, mc.d_model}), Group::lora);
        CHECK_THROWS_AS(apply_lora_merge(p, mc), DimensionError);
    }
}

TEST_SUITE("model gradients") {
    TEST_CASE("each trainable group passes the finite-difference oracle") {
        ModelConfig mc = small_model();
        ParamStore p = init_params(mc, 24);
        testing::wake_zero_inits(p, 24);
        auto c = cond_for(mc, 2, 24, 0.37);
        Tensor z0 = x_for(mc, 2, 24), z1 = random_tensor({2 * mc.cells(), mc.channels}, 25, 0.5);
        for (Group g : {Group::base_self_attn, Group::lora, Group::audio_cross_attn, Group::other}) {
            CAPTURE(group_name(g));
            p.set_trainable({g});
            auto f = [&](ad::Graph& gr, const ParamStore& ps) {
                return train::flow_matching_loss(gr, ps, mc, z0, z1, c, 0.37, {true, true});
            };
            ad::GradCheckOptions o;
            o.n_coords = 30;
            o.seed = 3;
            CHECK(ad::grad_check(f, p, o).max_rel_error < 1e-4);
        }
    }
}
