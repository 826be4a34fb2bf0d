#include "maskflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "maskflow/errors.hpp"

namespace maskflow::eval {

std::vector<double> SyncMatrix::diagonal() const {
    std::vector<double> d;
    for (std::size_t i = 0; i < scores.size() && i < scores[i].size(); ++i) d.push_back(scores[i][i]);
    return d;
}

double SyncMatrix::row_margin() const {
    if (scores.empty() || scores.front().size() < 2) throw ArgumentError("row margin needs at least two audios");
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double best_other = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < scores[i].size(); ++j)
            if (j != i) best_other = std::max(best_other, scores[i][j]);
        sum += scores[i][i] - best_other;
    }
    return sum / static_cast<double>(scores.size());
}

SyncMatrix sync_eval(const world::VideoClip& clip, const std::vector<world::Mask>& entity_masks,
                     const std::vector<world::AudioTrack>& audios) {
    SyncMatrix m;
    m.scores.assign(entity_masks.size(), std::vector<double>(audios.size(), 0.0));
    for (std::size_t i = 0; i < entity_masks.size(); ++i)
        for (std::size_t j = 0; j < audios.size(); ++j) m.scores[i][j] = world::sync_oracle(clip, entity_masks[i], audios[j]);
    return m;
}

double leakage(const world::VideoClip& a, const world::VideoClip& b, const world::Mask& mask) {
    if (a.frames.shape() != b.frames.shape()) throw DimensionError("leakage: clip shapes differ");
    const std::size_t T = a.length(), H = a.height(), W = a.width();
    if (mask.rows() != H || mask.cols() != W) throw DimensionError("leakage: mask does not match the frame");
    double in = 0.0, out = 0.0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const bool inside = mask.at(y, x) != 0.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double d = std::abs(a.px(t, y, x, c) - b.px(t, y, x, c));
                    (inside ? in : out) += d;
                }
                (inside ? n_in : n_out) += 3;
            }
    const double mean_in = n_in ? in / static_cast<double>(n_in) : 0.0;
    const double mean_out = n_out ? out / static_cast<double>(n_out) : 0.0;
    if (mean_out == 0.0) return 0.0;
    if (mean_in == 0.0) return std::numeric_limits<double>::infinity();
    return mean_out / mean_in;
}

std::vector<double> frame_differences(const world::VideoClip& clip) {
    const std::size_t T = clip.length();
    const std::size_t n = clip.height() * clip.width() * 3;
    std::vector<double> d;
    const auto& s = clip.frames.storage();
    for (std::size_t t = 1; t < T; ++t) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += std::abs(s[t * n + i] - s[(t - 1) * n + i]);
        d.push_back(sum / static_cast<double>(n));
    }
    return d;
}

double boundary_discontinuity(const world::VideoClip& clip, const std::vector<std::size_t>& boundaries) {
    if (boundaries.empty()) throw ArgumentError("boundary_discontinuity: empty boundary list");
    const std::size_t T = clip.length();
    std::vector<bool> is_b(T, false);
    for (std::size_t b : boundaries) {
        if (b == 0 || b >= T) throw ArgumentError("boundary " + std::to_string(b) + " outside (0, T)");
        is_b[b] = true;
    }
    const std::vector<double> d = frame_differences(clip);
    double num = 0.0, den = 0.0;
    std::size_t n_num = 0, n_den = 0;
    for (std::size_t t = 1; t < T; ++t) {
        if (is_b[t]) {
            num += d[t - 1];
            ++n_num;
        } else {
            den += d[t - 1];
            ++n_den;
        }
    }
    const double mn = n_num ? num / static_cast<double>(n_num) : 0.0;
    const double md = n_den ? den / static_cast<double>(n_den) : 0.0;
    if (mn == 0.0) return 0.0;
    if (md == 0.0) return std::numeric_limits<double>::infinity();
    return mn / md;
}

DriftStats drift_stats(const world::VideoClip& clip, std::size_t segment_len) {
    const std::size_t T = clip.length();
    if (segment_len == 0 || T % segment_len != 0) throw ArgumentError("segment length must divide the clip length");
    const std::size_t n = segment_len * clip.height() * clip.width() * 3;
    DriftStats st;
    const auto& s = clip.frames.storage();
    for (std::size_t seg = 0; seg < T / segment_len; ++seg) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += s[seg * n + i];
        const double mean = sum / static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (s[seg * n + i] - mean) * (s[seg * n + i] - mean);
        st.mean.push_back(mean);
        st.stddev.push_back(std::sqrt(var / static_cast<double>(n)));
    }
    for (double m : st.mean) st.max_drift = std::max(st.max_drift, std::abs(m - st.mean.front()));
    return st;
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

double sign_test_p(const std::vector<double>& differences) {
    std::size_t n = 0, wins = 0;
    for (double d : differences) {
        if (d == 0.0) continue;
        ++n;
        if (d > 0.0) ++wins;
    }
    if (n == 0) return 1.0;
    // Sum of binomial(n, k) / 2^n for k >= wins, via log-gamma.
    double p = 0.0;
    for (std::size_t k = wins; k <= n; ++k) {
        const double lg = std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                          std::lgamma(static_cast<double>(n - k) + 1.0) - static_cast<double>(n) * std::log(2.0);
        p += std::exp(lg);
    }
    return std::min(1.0, p);
}

void EvalReport::add(const std::string& name, const std::vector<double>& per_seed) {
    MetricRecord r;
    r.name = name;
    r.per_seed = per_seed;
    r.n_seeds = per_seed.size();
    const Summary s = summarize(per_seed);
    r.mean = r.value = s.mean;
    r.stddev = s.stddev;
    records.push_back(std::move(r));
}

void EvalReport::add_scalar(const std::string& name, double value) {
    MetricRecord r;
    r.name = name;
    r.value = r.mean = value;
    r.n_seeds = seeds.size();
    records.push_back(std::move(r));
}

const MetricRecord& EvalReport::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return r;
    throw ArgumentError("no metric named " + name);
}

void EvalReport::validate() const {
    for (const auto& r : records) {
        if (r.n_seeds != seeds.size())
            throw ContractError("metric " + r.name + " covers " + std::to_string(r.n_seeds) + " seeds, report lists " +
                                std::to_string(seeds.size()));
        if (!r.per_seed.empty() && r.per_seed.size() != r.n_seeds)
            throw ContractError("metric " + r.name + " per-seed values disagree with n_seeds");
    }
}

namespace {

nlohmann::ordered_json number(double v) {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}

double parse_number(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["provenance"] = {{"checkpoint_id", checkpoint_id}, {"config_hash", config_hash}, {"seeds", seeds}};
    if (!note.empty()) j["note"] = note;
    j["records"] = nlohmann::ordered_json::array();
    for (const auto& r : records) {
        nlohmann::ordered_json o;
        o["name"] = r.name;
        o["value"] = number(r.value);
        o["n_seeds"] = r.n_seeds;
        o["mean"] = number(r.mean);
        o["std"] = number(r.stddev);
        auto arr = nlohmann::ordered_json::array();
        for (double v : r.per_seed) arr.push_back(number(v));
        o["per_seed"] = arr;
        j["records"].push_back(o);
    }
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
    EvalReport r;
    try {
        const auto& p = j.at("provenance");
        r.checkpoint_id = p.at("checkpoint_id").get<std::string>();
        r.config_hash = p.at("config_hash").get<std::string>();
        r.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("note")) r.note = j["note"].get<std::string>();
        for (const auto& o : j.at("records")) {
            MetricRecord m;
            m.name = o.at("name").get<std::string>();
            m.value = parse_number(o.at("value"));
            m.n_seeds = o.at("n_seeds").get<std::size_t>();
            m.mean = parse_number(o.at("mean"));
            m.stddev = parse_number(o.at("std"));
            for (const auto& v : o.at("per_seed")) m.per_seed.push_back(parse_number(v));
            r.records.push_back(std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
    return r;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "metric,value,n_seeds,mean,std,checkpoint_id,config_hash\n";
    for (const auto& r : records)
        os << r.name << ',' << fmt(r.value) << ',' << r.n_seeds << ',' << fmt(r.mean) << ',' << fmt(r.stddev) << ','
           << checkpoint_id << ',' << config_hash << '\n';
    return os.str();
}

std::string svg_line_plot(const std::string& title, const std::vector<Series>& series, const std::string& x_label,
                          const std::string& y_label) {
    const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t n_max = 1;
    for (const auto& s : series) {
        n_max = std::max(n_max, s.y.size());
        for (double v : s.y)
            if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) hi = lo + 1.0;
    auto px = [&](std::size_t i) { return L + (W - L - R) * (n_max > 1 ? static_cast<double>(i) / static_cast<double>(n_max - 1) : 0.5); };
    auto py = [&](double v) { return H - B - (H - T - B) * (v - lo) / (hi - lo); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    std::ostringstream os;
    char buf[160];
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
    os << buf;
    std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
    os << buf;
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.4g</text>\n", L - 6, py(v) + 4, v);
        os << buf;
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
       << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const char* col = colors[k % 6];
        os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[k].y.size(); ++i) {
            if (!std::isfinite(series[k].y[i])) continue;
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(i), py(series[k].y[i]));
            os << buf;
        }
        os << "\"/>\n";
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" fill=\"%s\">%s</text>\n", W - R - 150, T + 16.0 * (k + 1), col,
                      series[k].label.c_str());
        os << buf;
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace maskflow::eval
