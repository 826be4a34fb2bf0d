#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "maskflow/synthworld.hpp"

namespace maskflow::eval {

struct SyncMatrix {
    // scores[i][j] = sync of entity i's mouth against audio j.
    std::vector<std::vector<double>> scores;

    std::vector<double> diagonal() const;
    // Mean over rows of S_ii - max_{j != i} S_ij (needs >= 2 audios).
    double row_margin() const;
};

SyncMatrix sync_eval(const world::VideoClip& clip, const std::vector<world::Mask>& entity_masks,
                     const std::vector<world::AudioTrack>& audios);

// mean |a - b| outside the mask / mean |a - b| inside it. 0 when nothing
// changes outside; +inf when only the outside changes.
double leakage(const world::VideoClip& a, const world::VideoClip& b, const world::Mask& mask);

// Mean inter-frame L1 change entering each boundary frame over the mean at
// all other frames. 0/0 is 0; a positive numerator over 0 is +inf.
double boundary_discontinuity(const world::VideoClip& clip, const std::vector<std::size_t>& boundaries);

// Mean absolute per-pixel change between consecutive frames; entry t - 1
// holds the change from frame t - 1 to t.
std::vector<double> frame_differences(const world::VideoClip& clip);

struct DriftStats {
    std::vector<double> mean;
    std::vector<double> stddev;
    double max_drift = 0.0;
};

DriftStats drift_stats(const world::VideoClip& clip, std::size_t segment_len);

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;
};
// Fixed-order mean and population standard deviation.
Summary summarize(const std::vector<double>& values);

// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2), zero
// differences dropped.
double sign_test_p(const std::vector<double>& differences);

struct MetricRecord {
    std::string name;
    double value = 0.0;
    std::size_t n_seeds = 0;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_seed;
};

struct EvalReport {
    std::string checkpoint_id;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::vector<MetricRecord> records;
    std::string note;

    void add(const std::string& name, const std::vector<double>& per_seed);
    void add_scalar(const std::string& name, double value);
    const MetricRecord& find(const std::string& name) const;
    // Throws ContractError if a per-seed record disagrees with the seed list.
    void validate() const;

    std::string to_json() const;
    std::string to_csv() const;
    static EvalReport from_json(const std::string& text);
};

struct Series {
    std::string label;
    std::vector<double> y;
};

std::string svg_line_plot(const std::string& title, const std::vector<Series>& series, const std::string& x_label,
                          const std::string& y_label);

}  // namespace maskflow::eval
