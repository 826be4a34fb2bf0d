#include "maskflow/synthworld.hpp"

#include <algorithm>
#include <cmath>

#include "maskflow/errors.hpp"
#include "maskflow/rng.hpp"

namespace maskflow::world {

namespace {

constexpr Color kOpen{0.05, 0.03, 0.03};
constexpr Color kLip{0.85, 0.35, 0.35};
constexpr double kLipDistance = (0.85 - 0.05) + (0.35 - 0.03) + (0.35 - 0.03);
constexpr int kDefectBlock = 8;

struct StyleParams {
    double w_lo, w_hi, a_lo, a_hi, smoothing, phase_jitter;
};

StyleParams style_params(AudioStyle s) {
    if (s == AudioStyle::song) return {0.10, 0.40, 0.14, 0.20, 0.5, 0.10};
    return {0.20, 0.80, 0.12, 0.16, 0.7, 0.25};
}

bool overlaps(const Box& a, const Box& b) {
    return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

bool inside(const Box& b, int w, int h) { return b.x >= 0 && b.y >= 0 && b.x + b.w <= w && b.y + b.h <= h; }

}  // namespace

AudioStyle audio_style_from_name(const std::string& name) {
    if (name == "speech") return AudioStyle::speech;
    if (name == "song") return AudioStyle::song;
    if (name == "silence") return AudioStyle::silence;
    throw ArgumentError("unknown audio style '" + name + "'");
}

std::string audio_style_name(AudioStyle s) {
    switch (s) {
        case AudioStyle::speech: return "speech";
        case AudioStyle::song: return "song";
        case AudioStyle::silence: return "silence";
    }
    return "speech";
}

std::vector<double> AudioTrack::envelope_series() const {
    std::vector<double> e(frames());
    for (std::size_t t = 0; t < e.size(); ++t) e[t] = envelope(t);
    return e;
}

AudioTrack AudioTrack::slice(std::size_t begin, std::size_t end) const {
    return AudioTrack{features.rows_slice(begin, end), is_silent};
}

double& VideoClip::px(std::size_t t, std::size_t y, std::size_t x, std::size_t c) {
    return frames[((t * height() + y) * width() + x) * 3 + c];
}

double VideoClip::px(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return frames[((t * height() + y) * width() + x) * 3 + c];
}

VideoClip VideoClip::slice(std::size_t begin, std::size_t end) const { return VideoClip{frames.rows_slice(begin, end), fps}; }

bool MaskSet::is_partition() const {
    if (masks.empty()) return false;
    const std::size_t n = masks.front().size();
    for (const auto& m : masks)
        if (m.size() != n) return false;
    for (std::size_t p = 0; p < n; ++p) {
        double s = 0.0;
        for (const auto& m : masks) {
            if (m[p] != 0.0 && m[p] != 1.0) return false;
            s += m[p];
        }
        if (s != 1.0) return false;
    }
    return true;
}

AudioTrack audio_from_envelope(const std::vector<double>& env) {
    const std::size_t T = env.size();
    Tensor f(Shape{T, kAudioChannels});
    bool silent = true;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < kAudioChannels; ++k) f.at(t, k) = env[t >= k ? t - k : 0];
        silent = silent && env[t] == 0.0;
    }
    return AudioTrack{std::move(f), silent};
}

AudioTrack silent_audio(std::size_t frames) {
    if (frames == 0) throw ArgumentError("audio length must be positive");
    return AudioTrack{Tensor(Shape{frames, kAudioChannels}), true};
}

AudioTrack synth_audio(std::uint64_t seed, std::size_t frames, AudioStyle style) {
    if (frames == 0) throw ArgumentError("audio length must be positive");
    if (style == AudioStyle::silence) return silent_audio(frames);
    const StyleParams p = style_params(style);
    Rng rng(seed, "audio." + audio_style_name(style));
    const auto n = static_cast<std::size_t>(rng.uniform_int(3, 6));
    std::vector<double> w(n), a(n), phase(n);
    for (std::size_t k = 0; k < n; ++k) {
        w[k] = rng.uniform(p.w_lo, p.w_hi);
        a[k] = rng.uniform(p.a_lo, p.a_hi);
        phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    }
    std::vector<double> env(frames);
    double y = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
        double raw = 0.5;
        for (std::size_t k = 0; k < n; ++k) {
            raw += a[k] * std::sin(w[k] * static_cast<double>(t) + phase[k]);
            phase[k] += p.phase_jitter * rng.normal();
        }
        y = t == 0 ? raw : y + p.smoothing * (raw - y);
        env[t] = std::clamp(y, 0.0, 1.0);
    }
    return audio_from_envelope(env);
}

AudioTrack reversed(const AudioTrack& track) {
    auto env = track.envelope_series();
    std::reverse(env.begin(), env.end());
    return audio_from_envelope(env);
}

void validate_scene(const SceneSpec& spec) {
    if (spec.entities.empty()) throw InvalidSceneError("scene needs at least one entity");
    for (std::size_t i = 0; i < spec.entities.size(); ++i) {
        const Entity& e = spec.entities[i];
        const Box r = e.region();
        if (e.radius <= 0 || !inside(r, spec.width, spec.height)) {
            throw InvalidSceneError("entity " + std::to_string(i) + " region leaves the frame");
        }
        const Box& m = e.mouth;
        if (m.w <= 0 || m.h <= 0 || m.x < r.x || m.y < r.y || m.x + m.w > r.x + r.w || m.y + m.h > r.y + r.h) {
            throw InvalidSceneError("entity " + std::to_string(i) + " mouth box outside its body");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (overlaps(r, spec.entities[j].region())) {
                throw InvalidSceneError("entities " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
            }
        }
    }
}

SceneSpec random_scene(std::uint64_t seed, std::size_t n_entities, const WorldConfig& cfg) {
    if (n_entities == 0) throw ArgumentError("scene needs at least one entity");
    Rng rng(seed, "scene");
    SceneSpec s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.seed = seed;
    s.sync_defect = cfg.sync_defect;
    s.background = {rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.55)};
    s.drift_speed = rng.uniform(cfg.drift_min, cfg.drift_max);
    s.stripe_angle = rng.uniform(0.0, M_PI);
    s.stripe_period = rng.uniform(9.0, 14.0);
    s.stripe_phase = rng.uniform(0.0, 2.0 * M_PI);
    const int a = std::max(1, cfg.align);
    // Placement can paint itself into a corner; start over a few times.
    for (int attempt = 0; attempt < 4000 && s.entities.size() < n_entities; ++attempt) {
        if (attempt % 200 == 199) s.entities.clear();
        // Larger bodies only while few entities remain to place.
        const bool big = n_entities <= 2 && rng.uniform() < 0.5;
        int radius = big ? 8 : 6;
        radius = std::max(a / 2, (radius * 2 / a) * a / 2);
        const int side = 2 * radius;
        const int slots_x = (cfg.width - side) / a, slots_y = (cfg.height - side) / a;
        if (slots_x < 0 || slots_y < 0) break;
        Entity e;
        e.radius = radius;
        e.cx = static_cast<int>(rng.uniform_int(0, slots_x)) * a + radius;
        e.cy = static_cast<int>(rng.uniform_int(0, slots_y)) * a + radius;
        bool ok = true;
        for (const auto& other : s.entities) ok = ok && !overlaps(e.region(), other.region());
        if (!ok) continue;
        const int mw = radius, mh = radius / 2 + 1;
        e.mouth = {e.cx - mw / 2, e.cy + 1, mw, mh};
        e.color = {rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)};
        s.entities.push_back(e);
    }
    if (s.entities.size() != n_entities) {
        throw InvalidSceneError("could not place " + std::to_string(n_entities) + " entities");
    }
    validate_scene(s);
    return s;
}

MaskSet scene_masks(const SceneSpec& spec) {
    const auto H = static_cast<std::size_t>(spec.height), W = static_cast<std::size_t>(spec.width);
    MaskSet ms;
    ms.masks.assign(spec.entities.size() + 1, Tensor(Shape{H, W}));
    Tensor& bg = ms.masks[0];
    for (auto& v : bg.storage()) v = 1.0;
    for (std::size_t i = 0; i < spec.entities.size(); ++i) {
        const Box r = spec.entities[i].region();
        for (int y = r.y; y < r.y + r.h; ++y)
            for (int x = r.x; x < r.x + r.w; ++x) {
                ms.masks[i + 1].at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.0;
                bg.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 0.0;
            }
    }
    return ms;
}

namespace {

void render_frame(const SceneSpec& spec, const std::vector<double>& apertures, std::size_t t, VideoClip& clip,
                  std::size_t out_t) {
    const std::size_t H = clip.height(), W = clip.width();
    const double cs = std::cos(spec.stripe_angle), sn = std::sin(spec.stripe_angle);
    const double tt = static_cast<double>(t);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) * cs + static_cast<double>(y) * sn - spec.drift_speed * tt;
            const double s = spec.stripe_amplitude * std::sin(2.0 * M_PI * u / spec.stripe_period + spec.stripe_phase);
            clip.px(out_t, y, x, 0) = spec.background.r + s;
            clip.px(out_t, y, x, 1) = spec.background.g + s;
            clip.px(out_t, y, x, 2) = spec.background.b + s;
        }
    for (std::size_t i = 0; i < spec.entities.size(); ++i) {
        const Entity& e = spec.entities[i];
        const Box r = e.region();
        for (int y = r.y; y < r.y + r.h; ++y)
            for (int x = r.x; x < r.x + r.w; ++x) {
                const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
                clip.px(out_t, uy, ux, 0) = e.color.r;
                clip.px(out_t, uy, ux, 1) = e.color.g;
                clip.px(out_t, uy, ux, 2) = e.color.b;
            }
        // Mouth opens from the top row down; the boundary row is blended.
        const Box& m = e.mouth;
        const double open_rows = std::clamp(apertures[i], 0.0, 1.0) * m.h;
        for (int row = 0; row < m.h; ++row) {
            const double f = std::clamp(open_rows - row, 0.0, 1.0);
            for (int x = m.x; x < m.x + m.w; ++x) {
                const auto uy = static_cast<std::size_t>(m.y + row), ux = static_cast<std::size_t>(x);
                clip.px(out_t, uy, ux, 0) = f * kOpen.r + (1.0 - f) * kLip.r;
                clip.px(out_t, uy, ux, 1) = f * kOpen.g + (1.0 - f) * kLip.g;
                clip.px(out_t, uy, ux, 2) = f * kOpen.b + (1.0 - f) * kLip.b;
            }
        }
    }
}

}  // namespace

std::pair<VideoClip, MaskSet> render_scene(const SceneSpec& spec, const std::vector<AudioTrack>& audios,
                                           std::size_t frames) {
    validate_scene(spec);
    if (audios.size() != spec.entities.size()) {
        throw ArgumentError("render_scene: " + std::to_string(audios.size()) + " audio tracks for " +
                            std::to_string(spec.entities.size()) + " entities");
    }
    for (const auto& a : audios)
        if (a.frames() != frames) throw ArgumentError("render_scene: audio length differs from clip length");
    const auto H = static_cast<std::size_t>(spec.height), W = static_cast<std::size_t>(spec.width);
    VideoClip clip{Tensor(Shape{frames, H, W, 3})};

    // Per-entity lag schedule for imperfectly synchronized footage.
    std::vector<std::vector<std::size_t>> lags(spec.entities.size(), std::vector<std::size_t>(frames, 0));
    if (spec.sync_defect > 0.0) {
        for (std::size_t i = 0; i < spec.entities.size(); ++i) {
            Rng rng(spec.seed, "sync_defect", i);
            std::size_t lag = 0;
            for (std::size_t t = 0; t < frames; ++t) {
                if (t % kDefectBlock == 0) {
                    lag = rng.uniform() < spec.sync_defect ? static_cast<std::size_t>(rng.uniform_int(2, 4)) : 0;
                }
                lags[i][t] = lag;
            }
        }
    }
    std::vector<double> ap(spec.entities.size());
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t i = 0; i < spec.entities.size(); ++i) {
            const std::size_t src = t >= lags[i][t] ? t - lags[i][t] : 0;
            ap[i] = audios[i].envelope(src);
        }
        render_frame(spec, ap, t, clip, t);
    }
    quantize_pixels(clip);
    return {std::move(clip), scene_masks(spec)};
}

VideoClip render_reference(const SceneSpec& spec) {
    validate_scene(spec);
    VideoClip clip{Tensor(Shape{1, static_cast<std::size_t>(spec.height), static_cast<std::size_t>(spec.width), 3})};
    render_frame(spec, std::vector<double>(spec.entities.size(), 0.0), 0, clip, 0);
    quantize_pixels(clip);
    return clip;
}

void quantize_pixels(VideoClip& clip) {
    constexpr double q = 16777216.0;  // 2^24
    for (auto& v : clip.frames.storage()) v = std::round(std::clamp(v, 0.0, 1.0) * q) / q;
}

double openness(double r, double g, double b) {
    const double d = std::abs(r - kOpen.r) + std::abs(g - kOpen.g) + std::abs(b - kOpen.b);
    return std::clamp(1.0 - d / kLipDistance, 0.0, 1.0);
}

std::vector<double> measure_aperture(const VideoClip& clip, const Mask& mask) {
    const std::size_t T = clip.length(), H = clip.height(), W = clip.width();
    if (mask.size() != H * W) throw ArgumentError("measure_aperture: mask size does not match frame");
    double area = 0.0;
    for (double v : mask.storage()) area += v;
    if (area <= 0.0) throw ArgumentError("measure_aperture: empty mask");
    std::vector<double> series(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        double s = 0.0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                if (mask.at(y, x) == 0.0) continue;
                s += openness(clip.px(t, y, x, 0), clip.px(t, y, x, 1), clip.px(t, y, x, 2));
            }
        series[t] = s / area;
    }
    const auto [lo, hi] = std::minmax_element(series.begin(), series.end());
    const double lo_v = *lo, range = *hi - *lo;
    for (auto& v : series) v = range > 1e-12 ? (v - lo_v) / range : 0.0;
    return series;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ArgumentError("pearson: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) return 0.0;
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 1e-24 || sbb <= 1e-24) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double sync_oracle(const VideoClip& clip, const Mask& mask, const AudioTrack& audio) {
    if (audio.frames() != clip.length()) throw ArgumentError("sync_oracle: audio and clip lengths differ");
    if (audio.is_silent) return 0.0;
    return pearson(measure_aperture(clip, mask), audio.envelope_series());
}

}  // namespace maskflow::world
