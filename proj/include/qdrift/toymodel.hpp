#pragma once

#include "qdrift/random.hpp"
#include "qdrift/sample_batch.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace qdrift {

// Data with per-channel isotropic std s_c; slots within a channel are i.i.d.
struct IsotropicGaussian {
    std::vector<double> scale;  // one per channel
    bool operator==(const IsotropicGaussian&) const = default;
};

// sum_k w_k N(m_k, s_k^2 I) over the full C*L latent.
struct GaussianMixture {
    std::vector<double> weights;
    std::vector<std::vector<double>> means;  // one C*L vector per component
    std::vector<double> stds;
    bool operator==(const GaussianMixture&) const = default;
};

class DataDistribution {
public:
    using Kind = std::variant<IsotropicGaussian, GaussianMixture>;

    // Validates weights (positive, summing to 1 within 1e-12), scales and
    // dimensions; throws std::invalid_argument.
    DataDistribution(Layout layout, Kind kind);

    const Layout& layout() const { return layout_; }
    const Kind& kind() const { return kind_; }
    bool is_isotropic() const { return std::holds_alternative<IsotropicGaussian>(kind_); }

    // Clean data sample written into `out` (length C*L).
    void sample(Rng& rng, std::span<double> out) const;
    SampleBatch sample_batch(std::size_t count, Rng& rng) const;

    bool operator==(const DataDistribution&) const = default;

private:
    Layout layout_;
    Kind kind_;
};

// eps(x; sigma) = -sigma * grad log p(x; sigma) for a single latent.
void analytic_epsilon(const DataDistribution& dist, std::span<const double> x, double sigma,
                      std::span<double> eps);
SampleBatch analytic_epsilon(const DataDistribution& dist, const SampleBatch& x, double sigma);

// Rectified-flow velocity v = z - x_0 predicted at flow time t in (0, 1) for
// x_t = (1 - t) x_0 + t z, obtained from the analytic noise prediction.
void analytic_velocity(const DataDistribution& dist, std::span<const double> x, double t,
                       std::span<double> velocity);

// Per-channel moments of a clean model output.
struct ChannelMoments {
    std::vector<double> mean;
    std::vector<double> stddev;
};

// Moments of eps(x; sigma) for x drawn from the exact marginal at sigma.
// Closed form for IsotropicGaussian, 10^4-sample Monte-Carlo otherwise.
ChannelMoments epsilon_moments(const DataDistribution& dist, double sigma);
// Same for the rectified-flow velocity at flow time t.
ChannelMoments velocity_moments(const DataDistribution& dist, double t);

// Per-step, per-channel parameters of the correlated Gaussian perturbation.
struct JointGaussianRow {
    std::vector<double> mean;    // mu_Delta
    std::vector<double> stddev;  // s_Delta
    std::vector<double> rho;     // correlation with the clean output
    // Clean-output moments; when absent the caller supplies them.
    std::optional<std::vector<double>> clean_mean;
    std::optional<std::vector<double>> clean_stddev;
    bool operator==(const JointGaussianRow&) const = default;
};

struct NoInjector {
    bool operator==(const NoInjector&) const = default;
};

struct JointGaussianInjector {
    std::vector<JointGaussianRow> steps;
    bool operator==(const JointGaussianInjector&) const = default;
};

// Deterministic round-to-grid quantizer with clamp range [-R, R].
struct BitGridInjector {
    int bits = 8;
    double range = 1.0;
    bool operator==(const BitGridInjector&) const = default;
};

struct NoiseInjectorSpec {
    std::variant<NoInjector, JointGaussianInjector, BitGridInjector> kind;

    // Throws std::invalid_argument unless |rho| < 1, s >= 0, b in [2, 16], R > 0
    // and every row has `channels` entries.
    void validate(std::size_t channels) const;
    bool needs_clean_moments(std::size_t step) const;

    bool operator==(const NoiseInjectorSpec&) const = default;
};

// Same (mu, s, rho) on every channel and every one of `steps` steps.
NoiseInjectorSpec constant_joint_gaussian(std::size_t steps, std::size_t channels, double mean,
                                          double stddev, double rho);

// Quantizes one clean output latent. Writes the quantized output and the
// error delta = quantized - clean (computed as that difference, so the
// identity holds exactly). `moments` is only read by JointGaussian rows that
// carry no clean moments of their own.
void inject_quantization(const NoiseInjectorSpec& spec, std::size_t step, Layout layout,
                         std::span<const double> clean, const ChannelMoments* moments, Rng& rng,
                         std::span<double> quantized, std::span<double> delta);

struct QuantizedOutput {
    SampleBatch output;
    SampleBatch delta;
};

// eps_hat = eps + delta_eps for a batch evaluated at noise level sigma.
// JointGaussian clean moments default to epsilon_moments(dist, sigma).
QuantizedOutput quantized_epsilon(const DataDistribution& dist, const NoiseInjectorSpec& spec,
                                  const SampleBatch& x, double sigma, std::size_t step, Rng& rng,
                                  const ChannelMoments* moments = nullptr);

}  // namespace qdrift
