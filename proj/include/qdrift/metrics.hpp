#pragma once

#include "qdrift/sample_batch.hpp"
#include "qdrift/toymodel.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace qdrift {

struct TargetMoments {
    std::vector<double> mean;      // per channel
    std::vector<double> variance;  // per channel
};

// Per-channel moments pooled over samples and slots (n = N * L values).
struct ChannelMomentRow {
    std::size_t channel = 0;
    std::size_t n = 0;
    double mean = 0.0;
    double mean_se = 0.0;  // sqrt(var / n)
    double variance = 0.0;
    double variance_se = 0.0;  // var * sqrt(2 / (n - 1))
    std::optional<double> target_mean;
    std::optional<double> target_variance;
    // estimate - target, when a target is given
    std::optional<double> mean_delta;
    std::optional<double> variance_delta;
};

struct MomentReport {
    std::vector<ChannelMomentRow> channels;
};

// Per-channel mean and variance of the data distribution, pooled over slots.
TargetMoments data_target_moments(const DataDistribution& dist);

// Requires N >= 2 samples; throws std::invalid_argument otherwise.
MomentReport moment_report(const SampleBatch& samples, const std::optional<TargetMoments>& target = std::nullopt);

struct EnergyOptions {
    std::size_t permutations = 199;
    std::uint64_t seed = 0;
    std::size_t cap = 4000;  // per-set subsample cap
};

struct EnergyDistanceResult {
    double distance = 0.0;
    double p_value = 1.0;  // (1 + #{perm >= observed}) / (1 + permutations)
    std::size_t n_a = 0;
    std::size_t n_b = 0;
};

// E-statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'| with unbiased within-set means,
// Euclidean over the flattened C*L latent, and a label-permutation p-value.
// Identical sets return exactly 0 with p = 1. The result is symmetric in
// (a, b) bit for bit.
EnergyDistanceResult energy_distance(const SampleBatch& a, const SampleBatch& b, const EnergyOptions& options = {});

struct EnergyDifferenceResult {
    double difference = 0.0;  // ED(a, ref) - ED(b, ref)
    double p_lower = 1.0;     // permutation P(D_perm <= D_obs)
    double p_upper = 1.0;     // permutation P(D_perm >= D_obs)
};

// Compares how close a and b each are to a reference set. The permutation
// null exchanges labels between a and b only.
EnergyDifferenceResult energy_distance_difference(const SampleBatch& a, const SampleBatch& b,
                                                  const SampleBatch& reference,
                                                  const EnergyOptions& options = {});

}  // namespace qdrift
