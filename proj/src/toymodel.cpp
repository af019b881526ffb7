#include "qdrift/toymodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

namespace qdrift {
namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void check_positive_finite(double v, const char* what) {
    if (!std::isfinite(v) || !(v > 0.0)) {
        throw std::invalid_argument(std::string(what) + " must be positive and finite");
    }
}

}  // namespace

DataDistribution::DataDistribution(Layout layout, Kind kind) : layout_(layout), kind_(std::move(kind)) {
    if (layout_.channels == 0 || layout_.slots == 0) {
        throw std::invalid_argument("distribution: channels and slots must be >= 1");
    }
    std::visit(overloaded{
                   [&](const IsotropicGaussian& g) {
                       if (g.scale.size() != layout_.channels) {
                           throw std::invalid_argument("isotropic gaussian: one scale per channel");
                       }
                       for (double s : g.scale) check_positive_finite(s, "isotropic gaussian scale");
                   },
                   [&](const GaussianMixture& m) {
                       const std::size_t k = m.weights.size();
                       if (k == 0 || m.means.size() != k || m.stds.size() != k) {
                           throw std::invalid_argument("mixture: weights, means and stds must align");
                       }
                       double total = 0.0;
                       for (double w : m.weights) {
                           check_positive_finite(w, "mixture weight");
                           total += w;
                       }
                       if (std::abs(total - 1.0) > 1e-12) {
                           throw std::invalid_argument("mixture: weights must sum to 1");
                       }
                       for (double s : m.stds) check_positive_finite(s, "mixture std");
                       for (const auto& mean : m.means) {
                           if (mean.size() != layout_.dim()) {
                               throw std::invalid_argument("mixture: mean length must equal C*L");
                           }
                           for (double v : mean) {
                               if (!std::isfinite(v)) throw std::invalid_argument("mixture: non-finite mean");
                           }
                       }
                   },
               },
               kind_);
}

void DataDistribution::sample(Rng& rng, std::span<double> out) const {
    std::visit(overloaded{
                   [&](const IsotropicGaussian& g) {
                       for (std::size_t c = 0; c < layout_.channels; ++c) {
                           for (std::size_t l = 0; l < layout_.slots; ++l) {
                               out[c * layout_.slots + l] = g.scale[c] * rng.normal();
                           }
                       }
                   },
                   [&](const GaussianMixture& m) {
                       const double u = rng.uniform();
                       std::size_t k = 0;
                       double cum = m.weights[0];
                       while (k + 1 < m.weights.size() && u >= cum) cum += m.weights[++k];
                       for (std::size_t j = 0; j < out.size(); ++j) {
                           out[j] = m.means[k][j] + m.stds[k] * rng.normal();
                       }
                   },
               },
               kind_);
}

SampleBatch DataDistribution::sample_batch(std::size_t count, Rng& rng) const {
    SampleBatch batch(count, layout_);
    for (std::size_t n = 0; n < count; ++n) sample(rng, batch.sample(n));
    return batch;
}

void analytic_epsilon(const DataDistribution& dist, std::span<const double> x, double sigma,
                      std::span<double> eps) {
    if (!std::isfinite(sigma) || !(sigma > 0.0)) {
        throw std::invalid_argument("analytic_epsilon: sigma must be positive");
    }
    const Layout& layout = dist.layout();
    const double s2 = sigma * sigma;
    std::visit(overloaded{
                   [&](const IsotropicGaussian& g) {
                       for (std::size_t c = 0; c < layout.channels; ++c) {
                           const double k = sigma / (g.scale[c] * g.scale[c] + s2);
                           for (std::size_t l = 0; l < layout.slots; ++l) {
                               const std::size_t j = c * layout.slots + l;
                               eps[j] = k * x[j];
                           }
                       }
                   },
                   [&](const GaussianMixture& m) {
                       const std::size_t comps = m.weights.size();
                       const double d = static_cast<double>(x.size());
                       // Responsibilities via log-sum-exp.
                       std::vector<double> logit(comps);
                       for (std::size_t k = 0; k < comps; ++k) {
                           const double var = m.stds[k] * m.stds[k] + s2;
                           double sq = 0.0;
                           for (std::size_t j = 0; j < x.size(); ++j) {
                               const double r = x[j] - m.means[k][j];
                               sq += r * r;
                           }
                           logit[k] = std::log(m.weights[k]) - 0.5 * d * std::log(var) - 0.5 * sq / var;
                       }
                       const double top = *std::max_element(logit.begin(), logit.end());
                       double z = 0.0;
                       for (double& v : logit) {
                           v = std::exp(v - top);
                           z += v;
                       }
                       std::fill(eps.begin(), eps.end(), 0.0);
                       for (std::size_t k = 0; k < comps; ++k) {
                           const double var = m.stds[k] * m.stds[k] + s2;
                           const double w = sigma * (logit[k] / z) / var;
                           for (std::size_t j = 0; j < x.size(); ++j) eps[j] += w * (x[j] - m.means[k][j]);
                       }
                   },
               },
               dist.kind());
}

SampleBatch analytic_epsilon(const DataDistribution& dist, const SampleBatch& x, double sigma) {
    if (x.layout() != dist.layout()) throw std::invalid_argument("analytic_epsilon: layout mismatch");
    if (!x.all_finite()) throw std::invalid_argument("analytic_epsilon: non-finite input");
    SampleBatch eps(x.count(), x.layout());
    for (std::size_t n = 0; n < x.count(); ++n) analytic_epsilon(dist, x.sample(n), sigma, eps.sample(n));
    return eps;
}

void analytic_velocity(const DataDistribution& dist, std::span<const double> x, double t,
                       std::span<double> velocity) {
    if (!std::isfinite(t) || !(t > 0.0) || !(t < 1.0)) {
        throw std::invalid_argument("analytic_velocity: flow time must lie in (0, 1)");
    }
    const double alpha = 1.0 - t;
    const double sigma_bar = t / alpha;
    std::vector<double> y(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] / alpha;
    analytic_epsilon(dist, y, sigma_bar, velocity);
    for (std::size_t j = 0; j < x.size(); ++j) velocity[j] = (1.0 + sigma_bar) * velocity[j] - y[j];
}

namespace {

// Per-channel moments of output(x_t) with x_t = alpha x_0 + sigma z, from a
// fixed-seed pre-pass so repeated calls agree.
template <typename Output>
ChannelMoments monte_carlo_moments(const DataDistribution& dist, double alpha, double sigma,
                                   std::string_view label, Output&& output) {
    constexpr std::size_t kPrepass = 10000;
    const Layout& layout = dist.layout();
    Rng rng(0, label, std::bit_cast<std::uint64_t>(sigma));
    std::vector<double> x(layout.dim());
    std::vector<double> out(layout.dim());
    std::vector<double> sum(layout.channels, 0.0);
    std::vector<double> sum_sq(layout.channels, 0.0);
    for (std::size_t n = 0; n < kPrepass; ++n) {
        dist.sample(rng, x);
        for (double& v : x) v = alpha * v + sigma * rng.normal();
        output(x, out);
        for (std::size_t c = 0; c < layout.channels; ++c) {
            for (std::size_t l = 0; l < layout.slots; ++l) {
                const double v = out[c * layout.slots + l];
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
    }
    ChannelMoments m{std::vector<double>(layout.channels), std::vector<double>(layout.channels)};
    const double count = static_cast<double>(kPrepass * layout.slots);
    for (std::size_t c = 0; c < layout.channels; ++c) {
        const double mean = sum[c] / count;
        m.mean[c] = mean;
        m.stddev[c] = std::sqrt(std::max(0.0, (sum_sq[c] - count * mean * mean) / (count - 1.0)));
    }
    return m;
}

}  // namespace

ChannelMoments epsilon_moments(const DataDistribution& dist, double sigma) {
    const Layout& layout = dist.layout();
    if (const auto* g = std::get_if<IsotropicGaussian>(&dist.kind())) {
        ChannelMoments out{std::vector<double>(layout.channels, 0.0),
                           std::vector<double>(layout.channels, 0.0)};
        for (std::size_t c = 0; c < layout.channels; ++c) {
            out.stddev[c] = sigma / std::sqrt(g->scale[c] * g->scale[c] + sigma * sigma);
        }
        return out;
    }
    return monte_carlo_moments(dist, 1.0, sigma, "epsilon-moments",
                               [&](std::span<const double> x, std::span<double> out) {
                                   analytic_epsilon(dist, x, sigma, out);
                               });
}

ChannelMoments velocity_moments(const DataDistribution& dist, double t) {
    const Layout& layout = dist.layout();
    if (const auto* g = std::get_if<IsotropicGaussian>(&dist.kind())) {
        // y = x_t / (1 - t) ~ N(0, s^2 + sb^2) and v = y ((1 + sb) sb / (s^2 + sb^2) - 1).
        ChannelMoments out{std::vector<double>(layout.channels, 0.0),
                           std::vector<double>(layout.channels, 0.0)};
        const double sb = t / (1.0 - t);
        for (std::size_t c = 0; c < layout.channels; ++c) {
            const double var = g->scale[c] * g->scale[c] + sb * sb;
            out.stddev[c] = std::abs((1.0 + sb) * sb / var - 1.0) * std::sqrt(var);
        }
        return out;
    }
    return monte_carlo_moments(dist, 1.0 - t, t, "velocity-moments",
                               [&](std::span<const double> x, std::span<double> out) {
                                   analytic_velocity(dist, x, t, out);
                               });
}

void NoiseInjectorSpec::validate(std::size_t channels) const {
    std::visit(overloaded{
                   [](const NoInjector&) {},
                   [&](const JointGaussianInjector& j) {
                       if (j.steps.empty()) throw std::invalid_argument("joint gaussian injector: no rows");
                       for (const auto& row : j.steps) {
                           if (row.mean.size() != channels || row.stddev.size() != channels ||
                               row.rho.size() != channels) {
                               throw std::invalid_argument("joint gaussian injector: one entry per channel");
                           }
                           if ((row.clean_mean && row.clean_mean->size() != channels) ||
                               (row.clean_stddev && row.clean_stddev->size() != channels)) {
                               throw std::invalid_argument("joint gaussian injector: clean moments per channel");
                           }
                           for (std::size_t c = 0; c < channels; ++c) {
                               if (!std::isfinite(row.mean[c]) || !std::isfinite(row.stddev[c]) ||
                                   !(row.stddev[c] >= 0.0)) {
                                   throw std::invalid_argument("joint gaussian injector: need finite mean, s >= 0");
                               }
                               if (!(std::abs(row.rho[c]) < 1.0)) {
                                   throw std::invalid_argument("joint gaussian injector: |rho| must be < 1");
                               }
                           }
                       }
                   },
                   [](const BitGridInjector& b) {
                       if (b.bits < 2 || b.bits > 16) throw std::invalid_argument("bit grid: bits must be in [2, 16]");
                       if (!std::isfinite(b.range) || !(b.range > 0.0)) {
                           throw std::invalid_argument("bit grid: range must be positive");
                       }
                   },
               },
               kind);
}

bool NoiseInjectorSpec::needs_clean_moments(std::size_t step) const {
    const auto* j = std::get_if<JointGaussianInjector>(&kind);
    if (!j || step >= j->steps.size()) return false;
    const auto& row = j->steps[step];
    return !(row.clean_mean && row.clean_stddev);
}

NoiseInjectorSpec constant_joint_gaussian(std::size_t steps, std::size_t channels, double mean,
                                          double stddev, double rho) {
    JointGaussianRow row{std::vector<double>(channels, mean), std::vector<double>(channels, stddev),
                         std::vector<double>(channels, rho), std::nullopt, std::nullopt};
    return NoiseInjectorSpec{JointGaussianInjector{std::vector<JointGaussianRow>(steps, row)}};
}

void inject_quantization(const NoiseInjectorSpec& spec, std::size_t step, Layout layout,
                         std::span<const double> clean, const ChannelMoments* moments, Rng& rng,
                         std::span<double> quantized, std::span<double> delta) {
    std::visit(overloaded{
                   [&](const NoInjector&) {
                       std::copy(clean.begin(), clean.end(), quantized.begin());
                   },
                   [&](const JointGaussianInjector& j) {
                       if (step >= j.steps.size()) {
                           throw std::out_of_range("joint gaussian injector: no row for step " +
                                                   std::to_string(step));
                       }
                       const JointGaussianRow& row = j.steps[step];
                       const std::vector<double>* clean_mean = row.clean_mean ? &*row.clean_mean : nullptr;
                       const std::vector<double>* clean_std = row.clean_stddev ? &*row.clean_stddev : nullptr;
                       if (!clean_mean || !clean_std) {
                           if (!moments) {
                               throw std::invalid_argument("joint gaussian injector: clean moments required");
                           }
                           if (!clean_mean) clean_mean = &moments->mean;
                           if (!clean_std) clean_std = &moments->stddev;
                       }
                       for (std::size_t c = 0; c < layout.channels; ++c) {
                           const double s_delta = row.stddev[c];
                           const double s_clean = (*clean_std)[c];
                           const double rho = row.rho[c];
                           const double slope = s_clean > 0.0 ? rho * s_delta / s_clean : 0.0;
                           const double resid = s_clean > 0.0 ? s_delta * std::sqrt(1.0 - rho * rho) : s_delta;
                           for (std::size_t l = 0; l < layout.slots; ++l) {
                               const std::size_t i = c * layout.slots + l;
                               const double z = rng.normal();
                               const double d = row.mean[c] + slope * (clean[i] - (*clean_mean)[c]) + resid * z;
                               quantized[i] = clean[i] + d;
                           }
                       }
                   },
                   [&](const BitGridInjector& b) {
                       const double grid = (std::ldexp(1.0, b.bits - 1) - 1.0) / b.range;
                       for (std::size_t i = 0; i < clean.size(); ++i) {
                           quantized[i] = std::clamp(std::round(clean[i] * grid) / grid, -b.range, b.range);
                       }
                   },
               },
               spec.kind);
    for (std::size_t i = 0; i < clean.size(); ++i) delta[i] = quantized[i] - clean[i];
}

QuantizedOutput quantized_epsilon(const DataDistribution& dist, const NoiseInjectorSpec& spec,
                                  const SampleBatch& x, double sigma, std::size_t step, Rng& rng,
                                  const ChannelMoments* moments) {
    spec.validate(dist.layout().channels);
    SampleBatch eps = analytic_epsilon(dist, x, sigma);
    std::optional<ChannelMoments> computed;
    if (!moments && spec.needs_clean_moments(step)) {
        computed = epsilon_moments(dist, sigma);
        moments = &*computed;
    }
    QuantizedOutput out{SampleBatch(x.count(), x.layout()), SampleBatch(x.count(), x.layout())};
    for (std::size_t n = 0; n < x.count(); ++n) {
        inject_quantization(spec, step, x.layout(), eps.sample(n), moments, rng, out.output.sample(n),
                            out.delta.sample(n));
    }
    return out;
}

}  // namespace qdrift
