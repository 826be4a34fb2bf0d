#include <doctest.h>

#include "maskflow/codec.hpp"
#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

using namespace maskflow;
using namespace maskflow::codec;
using world::VideoClip;

namespace {

VideoClip random_clip(std::uint64_t seed, std::size_t T, std::size_t H = 32, std::size_t W = 32) {
    Rng rng(seed, "clip");
    VideoClip c{Tensor({T, H, W, 3})};
    for (double& v : c.frames.storage()) v = rng.uniform();
    world::quantize_pixels(c);
    return c;
}

}  // namespace

TEST_SUITE("codec") {
    TEST_CASE("latent dimensions") {
        LatentSeq l = encode(random_clip(1, 16), 4);
        CHECK(l.frames() == 4);
        CHECK(l.grid_h() == 8);
        CHECK(l.grid_w() == 8);
        CHECK(l.channels() == 192);
        CHECK(l.tokens().shape() == Shape{256, 192});
        CHECK(latent_channels(2) == 48);
    }

    TEST_CASE("mid-grey clip encodes to zeros and back") {
        VideoClip c{Tensor({8, 32, 32, 3}, 0.5)};
        const LatentSeq l = encode(c, 4);
        for (double v : l.data.storage()) CHECK(v == 0.0);
        LatentSeq zero{Tensor({2, 8, 8, 192}), Layout::chunked_uniform, 4};
        const VideoClip back = decode(zero);
        for (double v : back.frames.storage()) CHECK(v == 0.5);
    }

    TEST_CASE("round trip is bitwise on random clips") {
        for (std::uint64_t s = 0; s < 100; ++s) {
            VideoClip c = random_clip(s, 4 * (1 + s % 4));
            REQUIRE(decode(encode(c, 4)).frames.bit_equal(c.frames));
        }
        VideoClip c = random_clip(7, 8);
        CHECK(decode(encode(c, 2)).frames.bit_equal(c.frames));
        CHECK(decode(encode(c, 8), DecodeMode::render).frames.bit_equal(c.frames));
    }

    TEST_CASE("token view round trip") {
        LatentSeq l = encode(random_clip(2, 8), 4);
        LatentSeq back = LatentSeq::from_tokens(l.tokens(), 2, 8, 8, 4);
        CHECK(back.data.bit_equal(l.data));
        CHECK_THROWS_AS(LatentSeq::from_tokens(l.tokens(), 3, 8, 8, 4), DimensionError);
    }

    TEST_CASE("encoding is affine") {
        VideoClip a = random_clip(3, 8), b = random_clip(4, 8), mix{Tensor({8, 32, 32, 3})};
        const double alpha = 0.3;
        for (std::size_t i = 0; i < mix.frames.size(); ++i)
            mix.frames[i] = alpha * a.frames[i] + (1.0 - alpha) * b.frames[i];
        LatentSeq la = encode(a, 4), lb = encode(b, 4), lm = encode(mix, 4);
        for (std::size_t i = 0; i < lm.data.size(); ++i)
            REQUIRE(std::abs(lm.data[i] - (alpha * la.data[i] + (1.0 - alpha) * lb.data[i])) < 1e-14);
    }

    TEST_CASE("render decoding clips out-of-range latents") {
        Rng rng(5);
        LatentSeq l{rng.normal_tensor({1, 8, 8, 192}, 3.0), Layout::chunked_uniform, 4};
        const VideoClip d = decode(l, DecodeMode::render);
        for (double v : d.frames.storage()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }

    TEST_CASE("shape contracts") {
        CHECK_THROWS_AS(encode(random_clip(1, 6), 4), DimensionError);
        CHECK_THROWS_AS(encode(random_clip(1, 4, 30, 32), 4), DimensionError);
        CHECK_THROWS_AS(encode_1plusT(random_clip(1, 16), 4), DimensionError);
        LatentSeq bad{Tensor({1, 8, 8, 100}), Layout::chunked_uniform, 4};
        CHECK_THROWS_AS(decode(bad), FormatError);
        LatentSeq odd{Tensor({1, 8, 8, 192}), static_cast<Layout>(7), 4};
        CHECK_THROWS_AS(decode(odd), FormatError);
    }

    TEST_CASE("1+T layout") {
        VideoClip c = random_clip(6, 17);
        LatentSeq l = encode_1plusT(c, 4);
        CHECK(l.frames() == 5);
        CHECK(l.layout == Layout::chunked_1plusT);
        CHECK(decode(l).frames.bit_equal(c.frames));
        // The first latent holds one frame; the three other frame slots are zero padding.
        std::size_t zeros_first = 0, zeros_later = 0;
        for (std::size_t cell = 0; cell < 64; ++cell)
            for (std::size_t ch = 48; ch < 192; ++ch) {
                zeros_first += l.data[cell * 192 + ch] == 0.0;
                zeros_later += l.data[(64 + cell) * 192 + ch] == 0.0;
            }
        CHECK(zeros_first == 64 * 144);
        CHECK(zeros_later < 64 * 144 / 10);
    }

    TEST_CASE("reference latent holds one frame for a chunk") {
        VideoClip f = random_clip(8, 1);
        LatentSeq r = encode_reference(f, 4);
        CHECK(r.frames() == 1);
        VideoClip d = decode(r);
        for (std::size_t k = 0; k < 4; ++k) CHECK(d.slice(k, k + 1).frames.bit_equal(f.frames));
    }

    TEST_CASE("concat and frame range") {
        LatentSeq a = encode(random_clip(9, 8), 4), b = encode(random_clip(10, 4), 4);
        LatentSeq c = concat_frames(a, b);
        CHECK(c.frames() == 3);
        CHECK(c.frame_range(2, 3).data.bit_equal(b.data));
        CHECK(c.frame_range(0, 2).data.bit_equal(a.data));
    }
}

TEST_SUITE("mask downsampling") {
    TEST_CASE("all-ones and block-aligned masks") {
        const Tensor ones = downsample_mask(Tensor({32, 32}, 1.0), 4);
        for (double v : ones.storage()) CHECK(v == 1.0);
        Tensor m({32, 32});
        for (std::size_t y = 8; y < 16; ++y)
            for (std::size_t x = 4; x < 12; ++x) m.at(y, x) = 1.0;
        Tensor d = downsample_mask(m, 4);
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t j = 0; j < 8; ++j) CHECK(d.at(i, j) == ((i == 2 || i == 3) && (j == 1 || j == 2) ? 1.0 : 0.0));
    }

    TEST_CASE("random partitions stay partitions with argmax assignment") {
        for (std::uint64_t s = 0; s < 30; ++s) {
            Rng rng(s, "labels");
            world::MaskSet ms;
            ms.masks.assign(3, Tensor({32, 32}));
            std::vector<int> label(32 * 32);
            for (std::size_t i = 0; i < label.size(); ++i) {
                label[i] = static_cast<int>(rng.uniform_int(0, 2));
                ms.masks[label[i]][i] = 1.0;
            }
            world::MaskSet d = downsample_masks(ms, 4);
            REQUIRE(d.is_partition());
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 8; ++j) {
                    int count[3] = {0, 0, 0};
                    for (std::size_t dy = 0; dy < 4; ++dy)
                        for (std::size_t dx = 0; dx < 4; ++dx) ++count[label[(4 * i + dy) * 32 + 4 * j + dx]];
                    int best = 0;
                    for (int m = 1; m < 3; ++m)
                        if (count[m] > count[best]) best = m;
                    REQUIRE(d.masks[best].at(i, j) == 1.0);
                }
        }
    }

    TEST_CASE("rendered scene masks survive downsampling") {
        for (std::uint64_t s = 0; s < 100; ++s) {
            auto scene = world::random_scene(s, 3, world::WorldConfig{});
            REQUIRE(downsample_masks(world::scene_masks(scene), 4).is_partition());
        }
        CHECK_THROWS_AS(downsample_masks(world::MaskSet{}, 4), ArgumentError);
    }
}
