#include <doctest.h>

#include <cmath>

#include "maskflow/errors.hpp"
#include "maskflow/metrics.hpp"
#include "maskflow/rng.hpp"
#include "maskflow/synthworld.hpp"

using namespace maskflow;
using namespace maskflow::world;

namespace {

std::vector<AudioTrack> tracks(std::uint64_t seed, std::size_t n, std::size_t T) {
    std::vector<AudioTrack> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(synth_audio(substream_seed(seed, "audio", i), T, AudioStyle::speech));
    return out;
}

bool exact_partition(const MaskSet& m) {
    const std::size_t n = m.masks.front().size();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (const auto& mk : m.masks) s += mk[i];
        if (s != 1.0) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("audio") {
    TEST_CASE("silence is exact zeros") {
        AudioTrack a = synth_audio(1, 16, AudioStyle::silence);
        CHECK(a.is_silent);
        CHECK(a.features.shape() == Shape{16, kAudioChannels});
        for (double v : a.features.storage()) CHECK(v == 0.0);
        CHECK(silent_audio(8).is_silent);
    }

    TEST_CASE("generation is deterministic and validates length") {
        for (auto style : {AudioStyle::speech, AudioStyle::song}) {
            CHECK(synth_audio(5, 32, style).features.bit_equal(synth_audio(5, 32, style).features));
            CHECK_FALSE(synth_audio(5, 32, style).features.bit_equal(synth_audio(6, 32, style).features));
        }
        CHECK_THROWS_AS(synth_audio(1, 0, AudioStyle::speech), ArgumentError);
        CHECK_THROWS_AS(audio_style_from_name("whisper"), ArgumentError);
        CHECK(audio_style_from_name(audio_style_name(AudioStyle::song)) == AudioStyle::song);
    }

    TEST_CASE("speech envelope is smooth") {
        double acc = 0.0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            auto env = synth_audio(s, 64, AudioStyle::speech).envelope_series();
            std::vector<double> a(env.begin(), env.end() - 1), b(env.begin() + 1, env.end());
            acc += pearson(a, b);
        }
        CHECK(acc / 100.0 > 0.8);
    }

    TEST_CASE("lag channels hold the delayed envelope") {
        AudioTrack a = synth_audio(3, 24, AudioStyle::speech);
        for (std::size_t k = 1; k < kAudioChannels; ++k)
            for (std::size_t t = k; t < 24; ++t) CHECK(a.features.at(t, k) == a.features.at(t - k, 0));
        AudioTrack s = a.slice(4, 12);
        CHECK(s.frames() == 8);
        CHECK(s.envelope(0) == a.envelope(4));
    }
}

TEST_SUITE("scene") {
    TEST_CASE("random scenes are valid and masks partition the frame") {
        WorldConfig wc;
        for (std::uint64_t s = 0; s < 60; ++s) {
            const std::size_t n = 1 + s % 3;
            SceneSpec sc = random_scene(s, n, wc);
            CHECK(sc.n_entities() == n);
            CHECK_NOTHROW(validate_scene(sc));
            auto [clip, masks] = render_scene(sc, tracks(s, n, 16), 16);
            CHECK(masks.size() == n + 1);
            CHECK(masks.is_partition());
            CHECK(exact_partition(masks));
            for (double v : clip.frames.storage()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }

    TEST_CASE("overlapping or out-of-frame entities are rejected") {
        SceneSpec sc = random_scene(1, 2, WorldConfig{});
        sc.entities[1].cx = sc.entities[0].cx;
        sc.entities[1].cy = sc.entities[0].cy;
        sc.entities[1].mouth = sc.entities[0].mouth;
        CHECK_THROWS_AS(validate_scene(sc), InvalidSceneError);
        SceneSpec out = random_scene(2, 1, WorldConfig{});
        out.entities[0].cx = 1;
        CHECK_THROWS_AS(validate_scene(out), InvalidSceneError);
        CHECK_THROWS_AS(random_scene(1, 0, WorldConfig{}), ArgumentError);
    }

    TEST_CASE("silent audio keeps mouths constant") {
        SceneSpec sc = random_scene(4, 3, WorldConfig{});
        std::vector<AudioTrack> silent(3, silent_audio(16));
        auto [clip, masks] = render_scene(sc, silent, 16);
        for (std::size_t e = 1; e < masks.size(); ++e) {
            auto ap = measure_aperture(clip, masks.masks[e]);
            for (double v : ap) CHECK(v == ap.front());
        }
    }

    TEST_CASE("changing one audio only changes that entity's pixels") {
        for (std::uint64_t s = 0; s < 10; ++s) {
            SceneSpec sc = random_scene(s, 3, WorldConfig{});
            auto a = tracks(s, 3, 16);
            auto [c1, masks] = render_scene(sc, a, 16);
            for (std::size_t i = 0; i < 3; ++i) {
                auto b = a;
                b[i] = synth_audio(substream_seed(s, "other", i), 16, AudioStyle::song);
                auto c2 = render_scene(sc, b, 16).first;
                const Mask& m = masks.masks[i + 1];
                bool inside_changed = false;
                for (std::size_t t = 0; t < 16; ++t)
                    for (std::size_t y = 0; y < 32; ++y)
                        for (std::size_t x = 0; x < 32; ++x)
                            for (std::size_t ch = 0; ch < 3; ++ch) {
                                const bool same = c1.px(t, y, x, ch) == c2.px(t, y, x, ch);
                                if (m.at(y, x) == 0.0) REQUIRE(same);
                                else inside_changed |= !same;
                            }
                CHECK(inside_changed);
            }
        }
    }

    TEST_CASE("swapping two entities' audio changes only their regions") {
        SceneSpec sc = random_scene(7, 2, WorldConfig{});
        auto a = tracks(7, 2, 16);
        auto [c1, masks] = render_scene(sc, a, 16);
        auto c2 = render_scene(sc, {a[1], a[0]}, 16).first;
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    if (masks.masks[0].at(y, x) == 1.0)
                        for (std::size_t ch = 0; ch < 3; ++ch) REQUIRE(c1.px(t, y, x, ch) == c2.px(t, y, x, ch));
    }

    TEST_CASE("rendering is deterministic") {
        SceneSpec sc = random_scene(9, 2, WorldConfig{});
        auto a = tracks(9, 2, 16);
        CHECK(render_scene(sc, a, 16).first.frames.bit_equal(render_scene(sc, a, 16).first.frames));
        CHECK_THROWS_AS(render_scene(sc, {a[0]}, 16), ArgumentError);
    }
}

TEST_SUITE("sync oracle") {
    TEST_CASE("aperture tracks the envelope") {
        for (std::uint64_t s = 0; s < 20; ++s) {
            SceneSpec sc = random_scene(s, 2, WorldConfig{});
            auto a = tracks(s, 2, 32);
            auto [clip, masks] = render_scene(sc, a, 32);
            for (std::size_t e = 0; e < 2; ++e) {
                CHECK(pearson(measure_aperture(clip, masks.masks[e + 1]), a[e].envelope_series()) >= 0.99);
                CHECK(sync_oracle(clip, masks.masks[e + 1], a[e]) >= 0.99);
            }
        }
    }

    TEST_CASE("aperture edge cases") {
        VideoClip c;
        c.frames = Tensor({8, 32, 32, 3}, 0.4);
        Mask m({32, 32}, 1.0);
        for (double v : measure_aperture(c, m)) CHECK(v == 0.0);
        c.frames = Tensor({8, 32, 32, 3}, 0.0);
        for (double v : measure_aperture(c, m)) CHECK(v == 0.0);
        CHECK_THROWS_AS(measure_aperture(c, Mask({32, 32}, 0.0)), ArgumentError);
        CHECK(sync_oracle(c, m, synth_audio(1, 8, AudioStyle::speech)) == 0.0);
    }

    TEST_CASE("silent audio scores zero") {
        SceneSpec sc = random_scene(3, 1, WorldConfig{});
        auto [clip, masks] = render_scene(sc, tracks(3, 1, 16), 16);
        CHECK(sync_oracle(clip, masks.masks[1], silent_audio(16)) == 0.0);
    }

    TEST_CASE("matched audio beats other entities' audio") {
        double margin = 0.0;
        std::size_t n = 0;
        for (std::uint64_t s = 0; s < 50; ++s) {
            SceneSpec sc = random_scene(s, 3, WorldConfig{});
            auto a = tracks(s, 3, 32);
            auto [clip, masks] = render_scene(sc, a, 32);
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    if (i != j) {
                        margin += sync_oracle(clip, masks.masks[i + 1], a[i]) - sync_oracle(clip, masks.masks[i + 1], a[j]);
                        ++n;
                    }
        }
        CHECK(margin / static_cast<double>(n) >= 0.3);
    }

    // Reversal of a short sum of sinusoids is strongly (anti)correlated with
    // itself, so calibration uses clips long enough to average that out.
    TEST_CASE("time-reversed audio is uncorrelated on average") {
        double acc = 0.0;
        for (std::uint64_t s = 0; s < 50; ++s) {
            SceneSpec sc = random_scene(s, 1, WorldConfig{});
            auto a = tracks(s, 1, 128);
            auto [clip, masks] = render_scene(sc, a, 128);
            acc += std::abs(sync_oracle(clip, masks.masks[1], reversed(a[0])));
        }
        CHECK(acc / 50.0 < 0.3);
    }

    TEST_CASE("sync defects lower the score") {
        WorldConfig wc;
        double clean = 0.0, defect = 0.0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            SceneSpec sc = random_scene(s, 1, wc);
            auto a = tracks(s, 1, 32);
            auto [clip, masks] = render_scene(sc, a, 32);
            clean += sync_oracle(clip, masks.masks[1], a[0]);
            sc.sync_defect = 1.0;
            defect += sync_oracle(render_scene(sc, a, 32).first, masks.masks[1], a[0]);
        }
        CHECK(defect < clean);
    }

    TEST_CASE("pixels live on the quantization lattice") {
        SceneSpec sc = random_scene(11, 2, WorldConfig{});
        auto clip = render_scene(sc, tracks(11, 2, 8), 8).first;
        const double q = std::ldexp(1.0, 24);
        for (double v : clip.frames.storage()) CHECK(v * q == std::round(v * q));
    }
}
