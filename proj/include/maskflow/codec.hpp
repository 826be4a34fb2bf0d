#pragma once

#include <cstddef>

#include "maskflow/synthworld.hpp"
#include "maskflow/tensor.hpp"

// Exactly invertible pixel-shuffle stand-in for a causal video VAE. Four
// consecutive frames fold into one latent frame; an s x s pixel cell folds
// into the channel axis of one latent cell.
namespace maskflow::codec {

inline constexpr std::size_t kChunk = 4;

enum class Layout { chunked_uniform, chunked_1plusT };

enum class DecodeMode { analysis, render };

struct LatentSeq {
    Tensor data;  // F x h x w x C, C = 3 * kChunk * s^2
    Layout layout = Layout::chunked_uniform;
    std::size_t spatial = 4;

    std::size_t frames() const { return data.shape().at(0); }
    std::size_t grid_h() const { return data.shape().at(1); }
    std::size_t grid_w() const { return data.shape().at(2); }
    std::size_t channels() const { return data.shape().at(3); }
    std::size_t cells() const { return grid_h() * grid_w(); }

    // (F * h * w) x C token matrix view (copy).
    Tensor tokens() const { return data.reshaped({frames() * cells(), channels()}); }
    static LatentSeq from_tokens(const Tensor& tokens, std::size_t frames, std::size_t h, std::size_t w,
                                 std::size_t spatial, Layout layout = Layout::chunked_uniform);

    LatentSeq frame_range(std::size_t begin, std::size_t end) const;
};

std::size_t latent_channels(std::size_t spatial);

LatentSeq encode(const world::VideoClip& clip, std::size_t spatial);
// 1 + 4k frames; the first frame becomes its own zero-padded latent.
LatentSeq encode_1plusT(const world::VideoClip& clip, std::size_t spatial);
world::VideoClip decode(const LatentSeq& lat, DecodeMode mode = DecodeMode::analysis);
// Reference conditioning latent: a single frame held for one chunk.
LatentSeq encode_reference(const world::VideoClip& frame, std::size_t spatial);

LatentSeq concat_frames(const LatentSeq& a, const LatentSeq& b);

// Area-average over s x s cells, thresholded at 0.5 (ties go to 1).
Tensor downsample_mask(const world::Mask& mask, std::size_t spatial);
// Downsample a partition, assigning each latent cell to the mask with the
// largest coverage (lower index wins ties) so the result stays a partition.
world::MaskSet downsample_masks(const world::MaskSet& masks, std::size_t spatial);

}  // namespace maskflow::codec
