#include "maskflow/codec.hpp"

#include <algorithm>
#include <string>

#include "maskflow/errors.hpp"

namespace maskflow::codec {

namespace {

void check_spatial(std::size_t H, std::size_t W, std::size_t s) {
    if (s == 0 || H % s != 0 || W % s != 0) {
        throw DimensionError("frame " + std::to_string(H) + "x" + std::to_string(W) +
                             " is not divisible by spatial factor " + std::to_string(s));
    }
}

// Folds `count` frames starting at `t0` into latent frame `f`; slots past
// `count` stay zero.
void fold_chunk(const world::VideoClip& clip, std::size_t t0, std::size_t count, std::size_t s, Tensor& out,
                std::size_t f) {
    const std::size_t H = clip.height(), W = clip.width(), h = H / s, w = W / s;
    const std::size_t C = latent_channels(s);
    for (std::size_t k = 0; k < count; ++k)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx)
                        for (std::size_t c = 0; c < 3; ++c) {
                            const std::size_t ch = ((k * s + dy) * s + dx) * 3 + c;
                            const double v = clip.px(t0 + k, i * s + dy, j * s + dx, c);
                            out[((f * h + i) * w + j) * C + ch] = 2.0 * v - 1.0;
                        }
}

void unfold_chunk(const LatentSeq& lat, std::size_t f, std::size_t t0, std::size_t count, world::VideoClip& clip) {
    const std::size_t s = lat.spatial, h = lat.grid_h(), w = lat.grid_w(), C = lat.channels();
    for (std::size_t k = 0; k < count; ++k)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx)
                        for (std::size_t c = 0; c < 3; ++c) {
                            const std::size_t ch = ((k * s + dy) * s + dx) * 3 + c;
                            clip.px(t0 + k, i * s + dy, j * s + dx, c) =
                                (lat.data[((f * h + i) * w + j) * C + ch] + 1.0) / 2.0;
                        }
}

}  // namespace

std::size_t latent_channels(std::size_t spatial) { return 3 * kChunk * spatial * spatial; }

LatentSeq LatentSeq::from_tokens(const Tensor& tokens, std::size_t frames, std::size_t h, std::size_t w,
                                 std::size_t spatial, Layout layout) {
    const std::size_t C = latent_channels(spatial);
    if (tokens.rows() != frames * h * w || tokens.cols() != C) {
        throw DimensionError("token matrix " + shape_str(tokens.shape()) + " does not match latent " +
                             std::to_string(frames) + "x" + std::to_string(h) + "x" + std::to_string(w) + "x" +
                             std::to_string(C));
    }
    return LatentSeq{tokens.reshaped({frames, h, w, C}), layout, spatial};
}

LatentSeq LatentSeq::frame_range(std::size_t begin, std::size_t end) const {
    return LatentSeq{data.rows_slice(begin, end), layout, spatial};
}

LatentSeq encode(const world::VideoClip& clip, std::size_t spatial) {
    const std::size_t T = clip.length(), H = clip.height(), W = clip.width();
    if (T == 0 || T % kChunk != 0) throw DimensionError("clip length " + std::to_string(T) + " is not a multiple of 4");
    check_spatial(H, W, spatial);
    const std::size_t F = T / kChunk;
    Tensor out(Shape{F, H / spatial, W / spatial, latent_channels(spatial)});
    for (std::size_t f = 0; f < F; ++f) fold_chunk(clip, f * kChunk, kChunk, spatial, out, f);
    return LatentSeq{std::move(out), Layout::chunked_uniform, spatial};
}

LatentSeq encode_1plusT(const world::VideoClip& clip, std::size_t spatial) {
    const std::size_t T = clip.length(), H = clip.height(), W = clip.width();
    if (T == 0 || (T - 1) % kChunk != 0) {
        throw DimensionError("1+T layout needs 1 + 4k frames, got " + std::to_string(T));
    }
    check_spatial(H, W, spatial);
    const std::size_t F = 1 + (T - 1) / kChunk;
    Tensor out(Shape{F, H / spatial, W / spatial, latent_channels(spatial)});
    fold_chunk(clip, 0, 1, spatial, out, 0);
    for (std::size_t f = 1; f < F; ++f) fold_chunk(clip, 1 + (f - 1) * kChunk, kChunk, spatial, out, f);
    return LatentSeq{std::move(out), Layout::chunked_1plusT, spatial};
}

world::VideoClip decode(const LatentSeq& lat, DecodeMode mode) {
    const std::size_t F = lat.frames(), s = lat.spatial;
    if (lat.channels() != latent_channels(s)) throw FormatError("latent channel count does not match spatial factor");
    const std::size_t H = lat.grid_h() * s, W = lat.grid_w() * s;
    std::size_t T = 0;
    switch (lat.layout) {
        case Layout::chunked_uniform: T = F * kChunk; break;
        case Layout::chunked_1plusT: T = F == 0 ? 0 : 1 + (F - 1) * kChunk; break;
        default: throw FormatError("unknown latent layout");
    }
    world::VideoClip clip{Tensor(Shape{T, H, W, 3})};
    if (lat.layout == Layout::chunked_uniform) {
        for (std::size_t f = 0; f < F; ++f) unfold_chunk(lat, f, f * kChunk, kChunk, clip);
    } else if (F > 0) {
        unfold_chunk(lat, 0, 0, 1, clip);
        for (std::size_t f = 1; f < F; ++f) unfold_chunk(lat, f, 1 + (f - 1) * kChunk, kChunk, clip);
    }
    if (mode == DecodeMode::render)
        for (auto& v : clip.frames.storage()) v = std::clamp(v, 0.0, 1.0);
    return clip;
}

LatentSeq encode_reference(const world::VideoClip& frame, std::size_t spatial) {
    if (frame.length() < 1) throw DimensionError("reference clip has no frames");
    const std::size_t H = frame.height(), W = frame.width();
    world::VideoClip held{Tensor(Shape{kChunk, H, W, 3})};
    const std::size_t n = H * W * 3;
    for (std::size_t k = 0; k < kChunk; ++k)
        std::copy_n(frame.frames.storage().begin(), n, held.frames.storage().begin() + static_cast<std::ptrdiff_t>(k * n));
    return encode(held, spatial);
}

LatentSeq concat_frames(const LatentSeq& a, const LatentSeq& b) {
    if (a.data.cols() != b.data.cols() || a.spatial != b.spatial) throw DimensionError("concat_frames: latent grids differ");
    std::vector<double> d = a.data.storage();
    d.insert(d.end(), b.data.storage().begin(), b.data.storage().end());
    Shape s = a.data.shape();
    s[0] += b.frames();
    return LatentSeq{Tensor(s, std::move(d)), a.layout, a.spatial};
}

Tensor downsample_mask(const world::Mask& mask, std::size_t spatial) {
    const std::size_t H = mask.rows(), W = mask.cols();
    check_spatial(H, W, spatial);
    const std::size_t h = H / spatial, w = W / spatial;
    Tensor out(Shape{h, w});
    const double area = static_cast<double>(spatial * spatial);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            double s = 0.0;
            for (std::size_t dy = 0; dy < spatial; ++dy)
                for (std::size_t dx = 0; dx < spatial; ++dx) s += mask.at(i * spatial + dy, j * spatial + dx);
            out.at(i, j) = s / area >= 0.5 ? 1.0 : 0.0;
        }
    return out;
}

world::MaskSet downsample_masks(const world::MaskSet& masks, std::size_t spatial) {
    if (masks.masks.empty()) throw ArgumentError("downsample_masks: empty mask set");
    const std::size_t H = masks.masks.front().rows(), W = masks.masks.front().cols();
    check_spatial(H, W, spatial);
    const std::size_t h = H / spatial, w = W / spatial;
    world::MaskSet out;
    out.masks.assign(masks.size(), Tensor(Shape{h, w}));
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            std::size_t best = 0;
            double best_cov = -1.0;
            for (std::size_t m = 0; m < masks.size(); ++m) {
                double s = 0.0;
                for (std::size_t dy = 0; dy < spatial; ++dy)
                    for (std::size_t dx = 0; dx < spatial; ++dx) s += masks.masks[m].at(i * spatial + dy, j * spatial + dx);
                if (s > best_cov) {
                    best_cov = s;
                    best = m;
                }
            }
            out.masks[best].at(i, j) = 1.0;
        }
    return out;
}

}  // namespace maskflow::codec
