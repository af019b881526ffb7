#pragma once

#include "qdrift/sample_batch.hpp"
#include "qdrift/stats.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace qdrift {

// Which second-order block of the (output, delta) pair a diagnostic reads.
enum class DiagnosticBlock { QuantOutput, Error, Cross };
const char* to_string(DiagnosticBlock block);

// Row-major samples x coordinates view of retained values.
struct SampleMatrix {
    std::span<const double> values;
    std::size_t rows = 0;  // samples
    std::size_t cols = 0;  // coordinates

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct SummaryStats {
    double mean = 0.0;
    double median = 0.0;
    double p95 = 0.0;
};
// Mean, median and 95th percentile (linear interpolation between order statistics).
SummaryStats summarize(std::span<const double> values);

// Pearson correlation magnitude, clamped to [0, 1]; 0 when either side is constant.
double abs_pearson(std::span<const double> x, std::span<const double> y);

// Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|.
double ks_two_sample(std::span<const double> a, std::span<const double> b);
// Asymptotic critical value of ks_two_sample at level alpha.
double ks_two_sample_critical(std::size_t n, std::size_t m, double alpha = 0.05);

struct CorrelationReport {
    DiagnosticBlock block = DiagnosticBlock::QuantOutput;
    std::uint64_t seed = 0;
    std::size_t samples = 0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<double> actual;    // |r| per pair
    std::vector<double> shuffled;  // |r| with one variable of each pair permuted
    SummaryStats actual_summary;
    SummaryStats shuffled_summary;
    double ks_statistic = 0.0;
    double ks_critical = 0.0;
    bool indistinguishable() const { return ks_statistic < ks_critical; }
};

// |r| over n_pairs random off-diagonal coordinate pairs, drawn without
// replacement, each estimated over the first n_samples retained samples.
// QuantOutput and Error pair coordinates within one matrix; Cross pairs
// output coordinate i with delta coordinate j, i != j.
CorrelationReport offdiag_correlations(SampleMatrix output, SampleMatrix delta, DiagnosticBlock block,
                                       std::size_t n_pairs, std::size_t n_samples, std::uint64_t seed);

struct MarginalGaussianity {
    std::size_t n = 0;
    double mean = 0.0;
    double variance = 0.0;
    double skewness = 0.0;         // NaN when degenerate
    double excess_kurtosis = 0.0;  // NaN when degenerate
    double cdf_distance = 0.0;     // sup-norm vs moment-fitted normal; NaN when degenerate
    double critical_value = 0.0;   // 5% null quantile of cdf_distance at this n
    bool degenerate = false;       // zero variance
    bool non_gaussian() const { return !degenerate && cdf_distance > critical_value; }
};

struct JointGaussianFit {
    double mean_output = 0.0;
    double mean_delta = 0.0;
    double var_output = 0.0;
    double var_delta = 0.0;
    double covariance = 0.0;
    double correlation = 0.0;
};

struct GaussianityReport {
    std::size_t timestep = 0;
    std::size_t coordinate = 0;
    MarginalGaussianity output;
    MarginalGaussianity delta;
    JointGaussianFit joint;
};

constexpr std::size_t kMinGaussianitySamples = 100;

MarginalGaussianity marginal_gaussianity(std::span<const double> x);

// 5% critical value of the fitted-normal sup-norm distance, from 10^4
// Monte-Carlo replicates under the null. Results are cached per sample size.
double normal_fit_critical_value(std::size_t n);

GaussianityReport gaussianity_summary(std::span<const double> output, std::span<const double> delta,
                                      std::size_t timestep, std::size_t coordinate);

struct IsotropyRow {
    std::size_t channel = 0;
    double mean = 0.0;            // channel mean of the diagonal entries
    double stddev = 0.0;          // within-channel standard deviation
    double standard_error = 0.0;  // stddev / sqrt(L)
};

// Per-channel summary of the per-element diagonal entries (Var(output),
// Var(delta) or Cov(output, delta)) at one timestep.
std::vector<IsotropyRow> channel_isotropy_summary(std::span<const PairMoments> element_moments,
                                                  Layout layout, DiagnosticBlock block);

}  // namespace qdrift
