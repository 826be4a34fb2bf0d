#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "maskflow/tensor.hpp"

// Synthetic "talking blobs" world: square entities whose mouth opening
// follows an audio envelope over a drifting striped background, plus the
// analytic lip-sync measurement used for preference mining and evaluation.
namespace maskflow::world {

inline constexpr std::size_t kAudioChannels = 4;

struct Color {
    double r = 0.0, g = 0.0, b = 0.0;
};

// Pixel-space rectangle [x, x + w) x [y, y + h).
struct Box {
    int x = 0, y = 0, w = 0, h = 0;
};

struct Entity {
    int cx = 0, cy = 0;  // center in pixels
    int radius = 6;      // half side of the square body
    Box mouth;
    Color color;

    Box region() const { return {cx - radius, cy - radius, 2 * radius, 2 * radius}; }
};

struct SceneSpec {
    int height = 32;
    int width = 32;
    std::vector<Entity> entities;
    Color background;
    double drift_speed = 0.5;  // pixels / frame along the stripe normal
    double stripe_angle = 0.0;
    double stripe_period = 12.0;
    double stripe_amplitude = 0.08;
    double stripe_phase = 0.0;
    // Probability that an 8-frame block of an entity's mouth lags its audio.
    // Zero renders perfectly synchronized mouths.
    double sync_defect = 0.0;
    std::uint64_t seed = 0;

    std::size_t n_entities() const { return entities.size(); }
};

enum class AudioStyle { speech, song, silence };

AudioStyle audio_style_from_name(const std::string& name);
std::string audio_style_name(AudioStyle s);

struct AudioTrack {
    Tensor features;  // T x kAudioChannels, channel 0 = envelope, k = envelope lagged by k
    bool is_silent = false;

    std::size_t frames() const { return features.rows(); }
    double envelope(std::size_t t) const { return features.at(t, 0); }
    std::vector<double> envelope_series() const;
    AudioTrack slice(std::size_t begin, std::size_t end) const;
};

struct VideoClip {
    Tensor frames;  // T x H x W x 3
    double fps = 25.0;

    std::size_t length() const { return frames.shape().at(0); }
    std::size_t height() const { return frames.shape().at(1); }
    std::size_t width() const { return frames.shape().at(2); }
    double& px(std::size_t t, std::size_t y, std::size_t x, std::size_t c);
    double px(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const;
    VideoClip slice(std::size_t begin, std::size_t end) const;
};

// H x W binary map stored as 0.0 / 1.0.
using Mask = Tensor;

struct MaskSet {
    std::vector<Mask> masks;  // index 0 = background

    std::size_t size() const { return masks.size(); }
    bool is_partition() const;
};

struct WorldConfig {
    int height = 32;
    int width = 32;
    std::size_t frames = 16;
    std::size_t max_entities = 3;
    int align = 4;  // entity squares snap to this grid so masks survive latent downsampling
    double drift_min = 0.3;
    double drift_max = 0.7;
    double sync_defect = 0.0;
};

AudioTrack synth_audio(std::uint64_t seed, std::size_t frames, AudioStyle style);
AudioTrack silent_audio(std::size_t frames);
AudioTrack audio_from_envelope(const std::vector<double>& envelope);
AudioTrack reversed(const AudioTrack& track);

SceneSpec random_scene(std::uint64_t seed, std::size_t n_entities, const WorldConfig& cfg);
// Throws InvalidSceneError on overlapping or out-of-frame regions.
void validate_scene(const SceneSpec& spec);

std::pair<VideoClip, MaskSet> render_scene(const SceneSpec& spec, const std::vector<AudioTrack>& audios,
                                           std::size_t frames);
// Neutral reference frame (closed mouths) at t = 0, as a one-frame clip.
VideoClip render_reference(const SceneSpec& spec);
MaskSet scene_masks(const SceneSpec& spec);

// Per-frame mouth-open coverage inside the mask, min-max normalized over the
// clip (all zeros when constant).
std::vector<double> measure_aperture(const VideoClip& clip, const Mask& mask);
// Pearson correlation of the aperture series with the audio envelope; 0 when
// either series has zero variance.
double sync_oracle(const VideoClip& clip, const Mask& mask, const AudioTrack& audio);

// Clamp to [0, 1] and snap to the 2^-24 lattice every rendered clip lives on.
void quantize_pixels(VideoClip& clip);

double pearson(const std::vector<double>& a, const std::vector<double>& b);
// Soft "mouth-open" indicator of a pixel in [0, 1].
double openness(double r, double g, double b);

}  // namespace maskflow::world
