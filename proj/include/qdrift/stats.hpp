#pragma once

#include <cstdint>

namespace qdrift {

// One-pass second-order moments of a pair (output, delta), where output is
// the quantized model output and delta the quantization error.
//
// Updates use Welford's recurrence; merge() uses the pairwise formulas of
// Chan, Golub and LeVeque, so sharded accumulation agrees with a single pass
// up to round-off.
class PairMoments {
public:
    PairMoments() = default;
    PairMoments(std::uint64_t count, double mean_output, double mean_delta, double m2_output,
                double m2_delta, double co_moment)
        : count_(count),
          mean_output_(mean_output),
          mean_delta_(mean_delta),
          m2_output_(m2_output),
          m2_delta_(m2_delta),
          co_moment_(co_moment) {}

    void add(double output, double delta) {
        ++count_;
        const double n = static_cast<double>(count_);
        const double dx = output - mean_output_;
        const double dy = delta - mean_delta_;
        mean_output_ += dx / n;
        mean_delta_ += dy / n;
        m2_output_ += dx * (output - mean_output_);
        m2_delta_ += dy * (delta - mean_delta_);
        co_moment_ += dx * (delta - mean_delta_);
    }

    void merge(const PairMoments& other);

    std::uint64_t count() const { return count_; }
    double mean_output() const { return mean_output_; }
    double mean_delta() const { return mean_delta_; }
    double m2_output() const { return m2_output_; }
    double m2_delta() const { return m2_delta_; }
    double co_moment() const { return co_moment_; }

    // Unbiased (n - 1) estimators; 0 when fewer than two observations.
    double var_output() const;
    double var_delta() const;
    double covariance() const;

    // Var(delta | output) under the scalar joint-Gaussian model, clamped to
    // [0, var_delta]. Falls back to var_delta when var_output is zero.
    double conditional_variance() const;
    // Regression slope Cov(delta, output) / Var(output); 0 when var_output is zero.
    double slope() const;

    bool operator==(const PairMoments&) const = default;

private:
    std::uint64_t count_ = 0;
    double mean_output_ = 0.0;
    double mean_delta_ = 0.0;
    double m2_output_ = 0.0;
    double m2_delta_ = 0.0;
    double co_moment_ = 0.0;
};

// V = var_delta - cov^2 / var_output with the same fallback and clamping as
// PairMoments::conditional_variance.
double conditional_variance(double var_output, double var_delta, double covariance);

}  // namespace qdrift
