#include "maskflow/rng.hpp"

namespace maskflow {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace

std::uint64_t substream_seed(std::uint64_t seed, std::string_view purpose) {
    return splitmix64(fnv1a64(purpose) ^ splitmix64(seed));
}

std::uint64_t substream_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
    return splitmix64(substream_seed(seed, purpose) ^ splitmix64(index + 0x51ed27ULL));
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = stddev * normal();
    return t;
}

}  // namespace maskflow
