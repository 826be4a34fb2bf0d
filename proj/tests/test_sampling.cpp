#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/sampling.hpp"
#include "maskflow/training.hpp"

using namespace maskflow;
using namespace maskflow::sample;
using testing::random_tensor;

namespace {

struct Fixture {
    dit::ModelConfig mc = testing::small_model();
    ParamStore p;
    std::size_t passes = 0;
    Tensor reference;

    Fixture() {
        p = dit::init_params(mc, 5);
        testing::wake_zero_inits(p, 5, 0.2);
        reference = random_tensor({mc.cells(), mc.channels}, 6, 0.5);
    }
    ModelRef model() { return ModelRef{&p, &mc, {true, true}, &passes}; }
    Tensor audio(std::uint64_t seed, std::size_t F) const {
        return dit::aggregate_audio(world::synth_audio(seed, 4 * F, world::AudioStyle::speech), mc.audio_tokens);
    }
    Tensor x(std::size_t F, std::uint64_t seed) const { return random_tensor({F * mc.cells(), mc.channels}, seed); }
    Tensor full_mask() const { return Tensor({mc.grid_h, mc.grid_w}, 1.0); }
};

// Left half of the grid for entity 1, right half for entity 2, nothing left for the background.
std::vector<Tensor> halves(const dit::ModelConfig& mc) {
    Tensor l({mc.grid_h, mc.grid_w}), r({mc.grid_h, mc.grid_w});
    for (std::size_t y = 0; y < mc.grid_h; ++y)
        for (std::size_t x = 0; x < mc.grid_w; ++x) (x < mc.grid_w / 2 ? l : r).at(y, x) = 1.0;
    return {l, r};
}

// Background = top row, entity 1 = left half of the rest, entity 2 = right half.
std::vector<Tensor> three_regions(const dit::ModelConfig& mc) {
    std::vector<Tensor> m(3, Tensor({mc.grid_h, mc.grid_w}));
    for (std::size_t y = 0; y < mc.grid_h; ++y)
        for (std::size_t x = 0; x < mc.grid_w; ++x) m[y == 0 ? 0 : (x < mc.grid_w / 2 ? 1 : 2)].at(y, x) = 1.0;
    return m;
}

}  // namespace

TEST_SUITE("euler") {
    TEST_CASE("zero and constant fields") {
        Tensor x0 = random_tensor({5, 3}, 1);
        CHECK(euler_sample(x0, [](const Tensor& x, double) { return Tensor(x.shape()); }, 7).bit_equal(x0));
        Tensor out = euler_sample(x0, [](const Tensor& x, double) { return Tensor(x.shape(), 0.75); }, 8);
        for (std::size_t i = 0; i < x0.size(); ++i) CHECK(out[i] == x0[i] + 0.75);
    }

    TEST_CASE("first-order convergence on a linear field") {
        Tensor x0 = random_tensor({4, 2}, 2), a = random_tensor({4, 2}, 3);
        auto field = [&](const Tensor& x, double) {
            Tensor v(x.shape());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - x[i];
            return v;
        };
        auto err = [&](std::size_t n) {
            Tensor x = euler_sample(x0, field, n);
            double e = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i)
                e = std::max(e, std::abs(x[i] - (a[i] + (x0[i] - a[i]) * std::exp(-1.0))));
            return e;
        };
        for (std::size_t n : {4u, 8u, 16u, 32u, 64u}) {
            CAPTURE(n);
            CHECK(err(n) / err(2 * n) >= 2.0);
        }
    }

    TEST_CASE("non-finite velocity reports the step") {
        Tensor x0 = random_tensor({2, 2}, 4);
        set_checked_mode(false);
        auto bad = [](const Tensor& x, double t) { return Tensor(x.shape(), t >= 0.5 ? std::nan("") : 0.0); };
        try {
            euler_sample(x0, bad, 4);
            FAIL("expected a numerical fault");
        } catch (const NumericalFault& e) {
            CHECK(e.step == 2);
        }
        set_checked_mode(true);
        CHECK_THROWS_AS(euler_sample(x0, bad, 0), ArgumentError);
    }
}

TEST_SUITE("guidance") {
    TEST_CASE("standard guidance endpoints") {
        Fixture f;
        auto m = f.model();
        Tensor x = f.x(2, 10), a = f.audio(11, 2), silent(a.shape());
        Tensor vu = m(x, 0.3, f.reference, &silent), vc = m(x, 0.3, f.reference, &a);
        CHECK(cfg_velocity(m, x, 0.3, f.reference, a, 0.0).bit_equal(vu));
        CHECK(cfg_velocity(m, x, 0.3, f.reference, a, 1.0).bit_equal(vc));
        for (double lam : {0.0, 2.5, 7.0}) CHECK(cfg_velocity(m, x, 0.3, f.reference, silent, lam).bit_equal(vu));
        f.passes = 0;
        cfg_velocity(m, x, 0.3, f.reference, silent, 3.0);
        CHECK(f.passes == 1);
    }

    TEST_CASE("one full-grid entry reduces to standard guidance") {
        Fixture f;
        auto m = f.model();
        double worst = 0.0;
        for (std::uint64_t s = 0; s < 50; ++s) {
            Rng rng(s, "triple");
            const double t = rng.uniform(), lam = rng.uniform(0.0, 8.0);
            Tensor x = f.x(1, 100 + s), a = f.audio(200 + s, 1);
            GuidanceSpec spec{{{a, f.full_mask(), lam}}};
            worst = std::max(worst, max_abs_diff(mask_cfg_velocity(m, x, t, f.reference, spec),
                                                 cfg_velocity(m, x, t, f.reference, a, lam)));
        }
        CHECK(worst <= 1e-12);
    }

    TEST_CASE("zero scales or silent audio return the unconditional branch") {
        Fixture f;
        auto m = f.model();
        auto r = three_regions(f.mc);
        Tensor x = f.x(2, 12), silent(f.audio(1, 2).shape());
        Tensor vu = m(x, 0.6, f.reference, &silent);
        GuidanceSpec zero{{{silent, r[0], 5.0}, {f.audio(13, 2), r[1], 0.0}, {f.audio(14, 2), r[2], 0.0}}};
        CHECK(mask_cfg_velocity(m, x, 0.6, f.reference, zero).bit_equal(vu));
        GuidanceSpec mute{{{silent, r[0], 5.0}, {silent, r[1], 3.0}, {silent, r[2], 9.0}}};
        f.passes = 0;
        CHECK(mask_cfg_velocity(m, x, 0.6, f.reference, mute).bit_equal(vu));
        CHECK(f.passes == 1);
    }

    TEST_CASE("one pass per distinct non-silent audio plus one") {
        Fixture f;
        auto m = f.model();
        auto r = three_regions(f.mc);
        Tensor x = f.x(1, 15), silent(f.audio(1, 1).shape()), a = f.audio(16, 1), b = f.audio(17, 1);
        auto count = [&](const GuidanceSpec& s) {
            f.passes = 0;
            mask_cfg_velocity(m, x, 0.2, f.reference, s);
            return f.passes;
        };
        CHECK(count({{{silent, r[0], 5.0}, {a, r[1], 5.0}, {b, r[2], 5.0}}}) == 3);
        CHECK(count({{{silent, r[0], 5.0}, {a, r[1], 5.0}, {a, r[2], 5.0}}}) == 2);
        CHECK(count({{{silent, r[0], 5.0}, {a, r[1], 5.0}, {silent, r[2], 5.0}}}) == 2);
    }

    TEST_CASE("each region depends only on its own audio") {
        Fixture f;
        auto m = f.model();
        auto r = three_regions(f.mc);
        const std::size_t hw = f.mc.cells(), C = f.mc.channels;
        Tensor x = f.x(2, 18), silent(f.audio(1, 2).shape());
        Tensor a1 = f.audio(19, 2), a2 = f.audio(20, 2), a3 = f.audio(21, 2);
        Tensor base = mask_cfg_velocity(m, x, 0.4, f.reference, {{{silent, r[0], 5}, {a1, r[1], 4}, {a2, r[2], 6}}});
        Tensor swapped = mask_cfg_velocity(m, x, 0.4, f.reference, {{{silent, r[0], 5}, {a2, r[1], 4}, {a1, r[2], 6}}});
        Tensor replaced = mask_cfg_velocity(m, x, 0.4, f.reference, {{{silent, r[0], 5}, {a1, r[1], 4}, {a3, r[2], 6}}});
        Tensor vu = m(x, 0.4, f.reference, &silent), v1 = m(x, 0.4, f.reference, &a1), v2 = m(x, 0.4, f.reference, &a2);
        for (std::size_t row = 0; row < x.rows(); ++row) {
            const std::size_t cell = row % hw;
            for (std::size_t c = 0; c < C; ++c) {
                const std::size_t k = row * C + c;
                if (r[0][cell] == 1.0) {
                    REQUIRE(swapped[k] == base[k]);
                    REQUIRE(base[k] == vu[k]);
                } else if (r[1][cell] == 1.0) {
                    REQUIRE(replaced[k] == base[k]);
                    REQUIRE(swapped[k] == vu[k] + 4.0 * (v2[k] - vu[k]));
                } else {
                    REQUIRE(swapped[k] == vu[k] + 6.0 * (v1[k] - vu[k]));
                }
            }
        }
    }

    TEST_CASE("threads do not change the result") {
        Fixture f;
        auto m = f.model();
        auto r = three_regions(f.mc);
        Tensor x = f.x(1, 22), silent(f.audio(1, 1).shape());
        GuidanceSpec s{{{silent, r[0], 5}, {f.audio(23, 1), r[1], 5}, {f.audio(24, 1), r[2], 5}}};
        CHECK(mask_cfg_velocity(m, x, 0.5, f.reference, s, 1).bit_equal(mask_cfg_velocity(m, x, 0.5, f.reference, s, 3)));
    }

    TEST_CASE("spec validation") {
        Fixture f;
        auto h = halves(f.mc);
        auto r = three_regions(f.mc);
        Tensor silent(f.audio(1, 1).shape()), a = f.audio(25, 1);
        const std::size_t gh = f.mc.grid_h, gw = f.mc.grid_w;
        CHECK_NOTHROW(GuidanceSpec{{{a, f.full_mask(), 5}}}.validate(gh, gw));
        CHECK_NOTHROW(GuidanceSpec{{{silent, h[0], 5}, {a, h[1], 5}}}.validate(gh, gw));
        CHECK_THROWS_AS(GuidanceSpec{}.validate(gh, gw), GuidanceSpecError);
        CHECK_THROWS_AS((GuidanceSpec{{{silent, h[0], 5}, {a, f.full_mask(), 5}}}.validate(gh, gw)), GuidanceSpecError);
        CHECK_THROWS_AS((GuidanceSpec{{{silent, r[0], 5}, {a, r[1], 5}}}.validate(gh, gw)), GuidanceSpecError);
        CHECK_THROWS_AS((GuidanceSpec{{{a, h[0], 5}, {a, h[1], 5}}}.validate(gh, gw)), GuidanceSpecError);
        Tensor half = h[1];
        half[0] = 0.5;
        CHECK_THROWS_AS((GuidanceSpec{{{silent, h[0], 5}, {a, half, 5}}}.validate(gh, gw)), GuidanceSpecError);
        CHECK_THROWS_AS((GuidanceSpec{{{silent, h[0], 5}, {f.audio(2, 2), h[1], 5}}}.validate(gh, gw)), GuidanceSpecError);
        CHECK_THROWS_AS((GuidanceSpec{{{silent, h[0], 5}, {a, h[1], INFINITY}}}.validate(gh, gw)), GuidanceSpecError);
    }
}

TEST_SUITE("factorization oracle") {
    TEST_CASE("factorized regions satisfy the identity") {
        for (std::uint64_t s = 0; s < 5; ++s) CHECK(verify_mask_factorization(3, 4, 3, s) < 1e-12);
        CHECK(verify_mask_factorization(4, 3, 5, 9) < 1e-12);
    }

    TEST_CASE("coupled regions break it") {
        for (std::uint64_t s = 0; s < 5; ++s) CHECK(verify_mask_factorization(3, 4, 3, s, true) > 0.01);
    }

    TEST_CASE("a single audio is trivially certain") {
        CHECK(verify_mask_factorization(3, 4, 1, 1) == 0.0);
        CHECK(verify_mask_factorization(3, 4, 1, 1, true) == 0.0);
    }

    TEST_CASE("budget and arguments") {
        CHECK_THROWS_AS(verify_mask_factorization(12, 4, 3, 1), ArgumentError);
        CHECK_THROWS_AS(verify_mask_factorization(0, 4, 3, 1), ArgumentError);
        CHECK_THROWS_AS(verify_mask_factorization(1, 4, 3, 1, true), ArgumentError);
    }
}

TEST_SUITE("long video") {
    TEST_CASE("sampler config validation") {
        SamplerConfig sc;
        CHECK_NOTHROW(sc.validate());
        sc.context_chunks = sc.seg_chunks;
        CHECK_THROWS_AS(sc.validate(), ConfigError);
        sc = SamplerConfig{};
        sc.n_steps = 0;
        CHECK_THROWS_AS(sc.validate(), ConfigError);
        CHECK(long_mode_from_name(long_mode_name(LongMode::final_latent_extension)) == LongMode::final_latent_extension);
        CHECK_THROWS_AS(long_mode_from_name("sliding"), ConfigError);
    }

    TEST_CASE("segment starts") {
        CHECK(extension_segment_starts(16, 4, 1) == std::vector<std::size_t>{4, 7, 10, 13});
        CHECK(extension_segment_starts(4, 4, 1).empty());
        CHECK(extension_segment_starts(12, 4, 0) == std::vector<std::size_t>{4, 8});
    }

    TEST_CASE("one segment equals single-window sampling in both modes") {
        Fixture f;
        auto m = f.model();
        SamplerConfig sc;
        sc.n_steps = 3;
        sc.seed = 31;
        Tensor a = f.audio(32, 4);
        Tensor single = sample_clip(m, f.reference, a, 4, sc);
        for (auto mode : {LongMode::position_shift, LongMode::final_latent_extension}) {
            sc.mode = mode;
            CHECK(generate_long(m, f.reference, a, 4, sc).bit_equal(single));
        }
    }

    TEST_CASE("zero shift is independent window tiling") {
        Fixture f;
        auto m = f.model();
        SamplerConfig sc;
        sc.n_steps = 3;
        sc.seed = 33;
        sc.shift = 0;
        sc.seg_chunks = 2;
        const std::size_t hw = f.mc.cells(), C = f.mc.channels, l = f.mc.audio_tokens;
        Tensor a = f.audio(34, 6);
        Tensor out = generate_long(m, f.reference, a, 6, sc);
        for (std::size_t w = 0; w < 3; ++w) {
            Tensor aw = a.rows_slice(2 * w * l, 2 * (w + 1) * l);
            Tensor tile = euler_sample(
                initial_noise({2 * hw, C}, sc.seed, w),
                [&](const Tensor& x, double t) { return cfg_velocity(m, x, t, f.reference, aw, sc.cfg_scale); }, sc.n_steps);
            CHECK(out.rows_slice(2 * w * hw, 2 * (w + 1) * hw).bit_equal(tile));
        }
    }

    TEST_CASE("long generation is deterministic and shape-checked") {
        Fixture f;
        auto m = f.model();
        SamplerConfig sc;
        sc.n_steps = 2;
        sc.seg_chunks = 2;
        sc.seed = 35;
        Tensor a = f.audio(36, 5);
        for (auto mode : {LongMode::position_shift, LongMode::final_latent_extension}) {
            sc.mode = mode;
            Tensor x = generate_long(m, f.reference, a, 5, sc);
            CHECK(x.shape() == Shape{5 * f.mc.cells(), f.mc.channels});
            CHECK(x.bit_equal(generate_long(m, f.reference, a, 5, sc)));
            CHECK_THROWS_AS(generate_long(m, f.reference, a, 4, sc), DimensionError);
            CHECK_THROWS_AS(generate_long(m, f.reference, a, 0, sc), ArgumentError);
        }
    }

    TEST_CASE("shifted windows move the seams every step") {
        Fixture f;
        auto m = f.model();
        SamplerConfig sc;
        sc.n_steps = 2;
        sc.seg_chunks = 2;
        sc.seed = 37;
        Tensor a = f.audio(38, 4);
        Tensor shifted = generate_long(m, f.reference, a, 4, sc);
        sc.shift = 0;
        CHECK_FALSE(shifted.bit_equal(generate_long(m, f.reference, a, 4, sc)));
    }
}
