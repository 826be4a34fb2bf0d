#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "maskflow/tensor.hpp"

namespace maskflow {

// Seed of the named substream (seed, purpose). Adding a new consumer with a
// new purpose string never perturbs existing streams.
std::uint64_t substream_seed(std::uint64_t seed, std::string_view purpose);
std::uint64_t substream_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view purpose) : engine_(substream_seed(seed, purpose)) {}
    Rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index)
        : engine_(substream_seed(seed, purpose, index)) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    // Inclusive range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }
    std::uint64_t next() { return engine_(); }

    Tensor normal_tensor(Shape shape, double stddev = 1.0);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

// 64-bit FNV-1a over bytes; used for config digests and substream seeding.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace maskflow
