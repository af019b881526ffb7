#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qdrift {

// Seeds for independent random streams.
//
// Every stream is identified by (master seed, purpose label, index). The
// label is hashed with FNV-1a, combined with the index and the master seed,
// and finalized with the SplitMix64 mixer. Two streams with different labels
// or indices are statistically independent, and the mapping does not depend
// on thread count or scheduling order.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t stream_seed(std::uint64_t master, std::string_view label, std::uint64_t index);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t master, std::string_view label, std::uint64_t index)
        : engine_(stream_seed(master, label, index)) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    // Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound) {
        return std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(engine_);
    }
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace qdrift
