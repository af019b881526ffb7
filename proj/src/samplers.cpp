#include "qdrift/samplers.hpp"

#include "qdrift/errors.hpp"
#include "qdrift/parallel.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qdrift {

const char* to_string(SamplerFamily family) {
    switch (family) {
        case SamplerFamily::Euler: return "euler";
        case SamplerFamily::FlowMatching: return "flow";
        case SamplerFamily::DpmPP2M: return "dpmpp2m";
    }
    return "?";
}

const char* to_string(SamplerMode mode) {
    switch (mode) {
        case SamplerMode::Baseline: return "baseline";
        case SamplerMode::QDrift: return "qdrift";
        case SamplerMode::BiasCorrect: return "bias_correct";
        case SamplerMode::BiasCorrectQDrift: return "bias_correct_qdrift";
    }
    return "?";
}

const char* to_string(InitMode mode) {
    return mode == InitMode::Marginal ? "marginal" : "pure_noise";
}

DriftFactors DriftFactors::zeros(SamplerFamily family, std::size_t steps, std::size_t channels) {
    return {family, std::vector<std::vector<double>>(steps, std::vector<double>(channels, 0.0))};
}

double DriftFactors::scalar(std::size_t step) const {
    const auto& row = rows.at(step);
    if (row.empty()) return 0.0;
    double sum = 0.0;
    for (double c : row) sum += c;
    return sum / static_cast<double>(row.size());
}

DriftFactors DriftFactors::scalar_per_step() const {
    DriftFactors out{family, rows};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double mean = scalar(i);
        for (double& c : out.rows[i]) c = mean;
    }
    return out;
}

void DriftFactors::validate() const {
    const std::size_t width = channels();
    for (const auto& row : rows) {
        if (row.size() != width) throw std::invalid_argument("drift factors: ragged rows");
        for (double c : row) {
            if (!std::isfinite(c) || c < 0.0) {
                throw std::invalid_argument("drift factors must be finite and non-negative");
            }
        }
    }
}

// ---- step kernels -------------------------------------------------------

void euler_update(std::span<double> x, std::span<const double> output, double delta_sigma,
                  std::span<const double> channel_factors, Layout layout) {
    for (std::size_t c = 0; c < layout.channels; ++c) {
        const double scale = 1.0 + (channel_factors.empty() ? 0.0 : channel_factors[c]);
        for (std::size_t l = 0; l < layout.slots; ++l) {
            const std::size_t j = c * layout.slots + l;
            x[j] = x[j] + delta_sigma * (scale * output[j]);
        }
    }
}

namespace {

void check_factors(std::span<const double> factors, std::size_t channels) {
    if (factors.empty()) return;
    if (factors.size() != channels) throw std::invalid_argument("drift factors: one per channel");
    for (double c : factors) {
        if (!std::isfinite(c) || c < 0.0) throw std::invalid_argument("drift factors must be >= 0");
    }
}

SampleBatch first_order_batch_step(const SampleBatch& x, const SampleBatch& output, double delta_sigma,
                                   std::span<const double> channel_factors, const char* name) {
    require_same_shape(x, output, name);
    check_factors(channel_factors, x.layout().channels);
    if (!std::isfinite(delta_sigma) || !x.all_finite() || !output.all_finite()) {
        throw std::invalid_argument(std::string(name) + ": non-finite input");
    }
    SampleBatch next = x;
    for (std::size_t n = 0; n < x.count(); ++n) {
        euler_update(next.sample(n), output.sample(n), delta_sigma, channel_factors, x.layout());
    }
    return next;
}

}  // namespace

SampleBatch euler_step(const SampleBatch& x, const SampleBatch& eps_hat, double delta_sigma,
                       std::span<const double> channel_factors) {
    return first_order_batch_step(x, eps_hat, delta_sigma, channel_factors, "euler_step");
}

SampleBatch flow_matching_step(const SampleBatch& x, const SampleBatch& v_hat, double delta_sigma,
                               std::span<const double> channel_factors) {
    return first_order_batch_step(x, v_hat, delta_sigma, channel_factors, "flow_matching_step");
}

bool dpm_first_order_step(const NoiseSchedule& schedule, std::size_t step) {
    return step == 0 || schedule.sigma(step + 1) == 0.0;
}

void dpmpp2m_update(std::span<double> x, std::span<const double> denoised,
                    std::span<const double> previous_denoised, const NoiseSchedule& schedule,
                    std::size_t step, std::span<const double> channel_factors, Layout layout) {
    if (step >= schedule.steps()) throw std::out_of_range("dpmpp2m: step out of range");
    const double sigma = schedule.sigma(step);
    const double sigma_next = schedule.sigma(step + 1);
    const double alpha_next = schedule.alpha(step + 1);
    const double ratio = sigma_next / sigma;

    const double lambda = std::log(schedule.alpha(step) / sigma);
    const double lambda_next = sigma_next > 0.0 ? std::log(alpha_next / sigma_next)
                                                : std::numeric_limits<double>::infinity();
    const double h = lambda_next - lambda;
    if (!(h > 0.0)) throw NumericalError("dpmpp2m: zero log-SNR step");
    const double b = std::expm1(-h);

    const bool first_order = previous_denoised.empty() || dpm_first_order_step(schedule, step);
    double w_cur = 1.0;
    double w_prev = 0.0;
    if (!first_order) {
        const double lambda_prev = std::log(schedule.alpha(step - 1) / schedule.sigma(step - 1));
        const double r = (lambda - lambda_prev) / h;
        w_cur = 1.0 + 1.0 / (2.0 * r);
        w_prev = 1.0 / (2.0 * r);
    }
    for (std::size_t c = 0; c < layout.channels; ++c) {
        const double cf = channel_factors.empty() ? 0.0 : channel_factors[c];
        for (std::size_t l = 0; l < layout.slots; ++l) {
            const std::size_t j = c * layout.slots + l;
            const double d = first_order ? denoised[j] : w_cur * denoised[j] - w_prev * previous_denoised[j];
            x[j] = ratio * x[j] - (1.0 + cf) * alpha_next * b * d;
        }
    }
}

SampleBatch dpmpp2m_step(const SampleBatch& x, const SampleBatch& denoised,
                         const SampleBatch* previous_denoised, const NoiseSchedule& schedule,
                         std::size_t step, std::span<const double> channel_factors) {
    require_same_shape(x, denoised, "dpmpp2m_step");
    if (previous_denoised) require_same_shape(x, *previous_denoised, "dpmpp2m_step");
    check_factors(channel_factors, x.layout().channels);
    if (!dpm_first_order_step(schedule, step) && !previous_denoised) {
        throw std::invalid_argument("dpmpp2m_step: multistep rule needs the previous model output");
    }
    SampleBatch next = x;
    for (std::size_t n = 0; n < x.count(); ++n) {
        std::span<const double> prev;
        if (previous_denoised) prev = previous_denoised->sample(n);
        dpmpp2m_update(next.sample(n), denoised.sample(n), prev, schedule, step, channel_factors,
                       x.layout());
    }
    return next;
}

// ---- drift factors ------------------------------------------------------

std::vector<double> euler_drift_factor(double sigma, double delta_sigma, std::span<const double> v) {
    if (!std::isfinite(sigma) || !(sigma > 0.0)) {
        throw std::invalid_argument("euler_drift_factor: sigma must be positive");
    }
    if (!std::isfinite(delta_sigma)) throw std::invalid_argument("euler_drift_factor: non-finite step");
    const double scale = std::abs(delta_sigma) / (2.0 * sigma);
    std::vector<double> out(v.size());
    for (std::size_t c = 0; c < v.size(); ++c) {
        if (!std::isfinite(v[c]) || v[c] < 0.0) throw std::invalid_argument("euler_drift_factor: V must be >= 0");
        out[c] = scale * v[c];
    }
    return out;
}

DpmQuadratureWeights dpm_quadrature_weights(const NoiseSchedule& schedule, std::size_t step) {
    if (step >= schedule.steps() || dpm_first_order_step(schedule, step)) {
        throw std::invalid_argument("dpm weights: step does not use the 2M rule");
    }
    const LogSnr prev = logsnr_quantities(schedule, step - 1);
    const LogSnr cur = logsnr_quantities(schedule, step);
    const LogSnr next = logsnr_quantities(schedule, step + 1);
    const double h = next.lambda - cur.lambda;
    if (!(h > 0.0)) throw NumericalError("dpm weights: zero log-SNR step");
    const double r = (cur.lambda - prev.lambda) / h;
    const double b = std::expm1(-h);
    return {b * (1.0 + 1.0 / (2.0 * r)) * cur.sigma_bar, -b * (1.0 / (2.0 * r)) * prev.sigma_bar};
}

std::vector<double> dpm_drift_factor(const NoiseSchedule& schedule, std::size_t step,
                                     std::span<const double> v_current,
                                     std::span<const double> v_previous) {
    if (step >= schedule.steps() || dpm_first_order_step(schedule, step)) {
        throw std::invalid_argument("dpm_drift_factor: step does not use the 2M rule");
    }
    if (v_current.size() != v_previous.size()) throw std::invalid_argument("dpm_drift_factor: channel mismatch");
    const LogSnr prev = logsnr_quantities(schedule, step - 1);
    const LogSnr cur = logsnr_quantities(schedule, step);
    const LogSnr next = logsnr_quantities(schedule, step + 1);
    const double denom = std::abs(cur.sigma_bar * cur.sigma_bar - next.sigma_bar * next.sigma_bar);
    if (!(denom > 0.0)) throw NumericalError("dpm_drift_factor: sigma_bar does not change over the step");
    const double h = next.lambda - cur.lambda;
    const double r = (cur.lambda - prev.lambda) / h;
    const double b = std::expm1(-h);
    const double w_cur = 1.0 + 1.0 / (2.0 * r);
    const double w_prev = 1.0 / (2.0 * r);
    std::vector<double> out(v_current.size());
    for (std::size_t c = 0; c < out.size(); ++c) {
        if (!(v_current[c] >= 0.0) || !(v_previous[c] >= 0.0)) {
            throw std::invalid_argument("dpm_drift_factor: V must be >= 0");
        }
        const double injected = w_cur * w_cur * cur.sigma_bar * cur.sigma_bar * v_current[c] +
                                w_prev * w_prev * prev.sigma_bar * prev.sigma_bar * v_previous[c];
        out[c] = b * b * injected / denom;
    }
    return out;
}

std::vector<double> dpm_warmup_drift_factor(const NoiseSchedule& schedule, std::size_t step,
                                            std::span<const double> v_current) {
    if (step >= schedule.steps()) throw std::out_of_range("dpm_warmup_drift_factor: step out of range");
    const double bar = schedule.sigma_bar(step);
    return euler_drift_factor(bar, schedule.sigma_bar(step + 1) - bar, v_current);
}

DriftFactors drift_factors_from_variance(SamplerFamily family, const NoiseSchedule& schedule,
                                         const std::vector<std::vector<double>>& v) {
    if (v.size() != schedule.steps()) throw std::invalid_argument("drift factors: one V row per step");
    DriftFactors out{family, {}};
    out.rows.reserve(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (family == SamplerFamily::DpmPP2M) {
            out.rows.push_back(dpm_first_order_step(schedule, k)
                                   ? dpm_warmup_drift_factor(schedule, k, v[k])
                                   : dpm_drift_factor(schedule, k, v[k], v[k - 1]));
        } else {
            out.rows.push_back(euler_drift_factor(schedule.sigma(k), delta_sigma(schedule, k), v[k]));
        }
    }
    return out;
}

// ---- bias correction ----------------------------------------------------

void bias_correct_inplace(std::span<double> output, const BiasRow& row, Layout layout) {
    for (std::size_t c = 0; c < layout.channels; ++c) {
        const double a = row.slope[c];
        for (std::size_t l = 0; l < layout.slots; ++l) {
            double& e = output[c * layout.slots + l];
            e = (1.0 - a) * e + a * row.mean_output[c] - row.mean_delta[c];
        }
    }
}

SampleBatch bias_correct(const SampleBatch& output, const BiasRow& row) {
    const std::size_t channels = output.layout().channels;
    if (row.slope.size() != channels || row.mean_output.size() != channels ||
        row.mean_delta.size() != channels) {
        throw std::invalid_argument("bias_correct: statistics row missing or wrong width");
    }
    SampleBatch out = output;
    for (std::size_t n = 0; n < out.count(); ++n) bias_correct_inplace(out.sample(n), row, out.layout());
    return out;
}

// ---- trajectories -------------------------------------------------------

void check_family_schedule(SamplerFamily family, const NoiseSchedule& schedule) {
    if (family == SamplerFamily::Euler && schedule.kind() != ScheduleKind::KarrasVE) {
        throw std::invalid_argument("euler sampler needs a variance-exploding schedule");
    }
    if (family == SamplerFamily::FlowMatching) {
        for (std::size_t i = 0; i < schedule.levels(); ++i) {
            if (std::abs(schedule.alpha(i) - (1.0 - schedule.sigma(i))) > 1e-12) {
                throw std::invalid_argument("flow-matching sampler needs a rectified-flow schedule");
            }
        }
    }
}

ToyDenoiser::ToyDenoiser(const DataDistribution& dist, const NoiseInjectorSpec& injector,
                         const NoiseSchedule& schedule, SamplerFamily family)
    : dist_(&dist), injector_(&injector), schedule_(&schedule), family_(family) {
    check_family_schedule(family, schedule);
    injector.validate(dist.layout().channels);
    if (const auto* jg = std::get_if<JointGaussianInjector>(&injector.kind)) {
        if (jg->steps.size() != schedule.steps()) {
            throw ConfigError("joint gaussian injector has " + std::to_string(jg->steps.size()) +
                              " rows for a " + std::to_string(schedule.steps()) + "-step schedule");
        }
    }
    moments_.resize(schedule.steps());
    for (std::size_t k = 0; k < schedule.steps(); ++k) {
        if (!injector.needs_clean_moments(k)) continue;
        moments_[k] = family == SamplerFamily::FlowMatching ? velocity_moments(dist, schedule.sigma(k))
                                                            : epsilon_moments(dist, schedule.sigma_bar(k));
    }
}

void ToyDenoiser::clean_output(std::span<const double> x, std::size_t step, std::span<double> out) const {
    switch (family_) {
        case SamplerFamily::Euler:
            analytic_epsilon(*dist_, x, schedule_->sigma(step), out);
            break;
        case SamplerFamily::FlowMatching:
            analytic_velocity(*dist_, x, schedule_->sigma(step), out);
            break;
        case SamplerFamily::DpmPP2M: {
            const double alpha = schedule_->alpha(step);
            std::vector<double> y(x.size());
            for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] / alpha;
            analytic_epsilon(*dist_, y, schedule_->sigma_bar(step), out);
            break;
        }
    }
}

void ToyDenoiser::evaluate(std::span<const double> x, std::size_t step, Rng& rng, std::span<double> clean,
                           std::span<double> quantized, std::span<double> delta) const {
    clean_output(x, step, clean);
    const ChannelMoments* m = moments_[step].mean.empty() ? nullptr : &moments_[step];
    inject_quantization(*injector_, step, dist_->layout(), clean, m, rng, quantized, delta);
}

void initial_latent(const DataDistribution& dist, const NoiseSchedule& schedule, InitMode init, Rng& rng,
                    std::span<double> out) {
    const double sigma = schedule.sigma(0);
    if (init == InitMode::Marginal) {
        dist.sample(rng, out);
        const double alpha = schedule.alpha(0);
        for (double& v : out) v = alpha * v + sigma * rng.normal();
    } else {
        for (double& v : out) v = sigma * rng.normal();
    }
}

void advance(SamplerFamily family, const NoiseSchedule& schedule, std::size_t step, Layout layout,
             std::span<const double> output, std::span<const double> channel_factors,
             TrajectoryState& state) {
    if (family != SamplerFamily::DpmPP2M) {
        euler_update(state.x, output, delta_sigma(schedule, step), channel_factors, layout);
        return;
    }
    const double sigma = schedule.sigma(step);
    const double alpha = schedule.alpha(step);
    std::vector<double> denoised(state.x.size());
    for (std::size_t j = 0; j < denoised.size(); ++j) denoised[j] = (state.x[j] - sigma * output[j]) / alpha;
    std::span<const double> prev;
    if (state.has_previous) prev = state.previous_denoised;
    dpmpp2m_update(state.x, denoised, prev, schedule, step, channel_factors, layout);
    state.previous_denoised = std::move(denoised);
    state.has_previous = true;
}

SamplerResult run_sampler(const SamplerRun& run, const DataDistribution& dist,
                          const NoiseInjectorSpec& injector, const SamplerCorrections& corrections) {
    const NoiseSchedule& schedule = run.schedule;
    const Layout layout = dist.layout();
    const std::size_t steps = schedule.steps();
    if (run.count == 0) throw ConfigError("sampler: batch size must be >= 1");

    DriftFactors factors;
    if (uses_drift(run.mode)) {
        if (!corrections.factors) throw ConfigError("sampler: drift mode needs drift factors");
        factors = run.channelwise ? *corrections.factors : corrections.factors->scalar_per_step();
        if (factors.family != run.family) throw ConfigError("sampler: drift factors belong to another family");
        if (factors.steps() != steps || factors.channels() != layout.channels) {
            throw ConfigError("sampler: drift factors do not match schedule and channels");
        }
        factors.validate();
    }
    if (uses_bias_correction(run.mode)) {
        if (!corrections.bias || corrections.bias->size() != steps) {
            throw ConfigError("sampler: bias correction needs one statistics row per step");
        }
        for (const auto& row : *corrections.bias) {
            if (row.slope.size() != layout.channels || row.mean_output.size() != layout.channels ||
                row.mean_delta.size() != layout.channels) {
                throw ConfigError("sampler: bias statistics have the wrong channel count");
            }
        }
    }

    const ToyDenoiser denoiser(dist, injector, schedule, run.family);
    SamplerResult result{SampleBatch(run.count, layout), {}};
    if (run.record_trajectory) result.trajectory.assign(steps + 1, SampleBatch(run.count, layout));

    parallel_for(run.count, run.threads, [&](std::size_t n) {
        Rng rng(run.seed, "sample", n);
        TrajectoryState state;
        state.x.resize(layout.dim());
        initial_latent(dist, schedule, run.init, rng, state.x);
        std::vector<double> clean(layout.dim()), output(layout.dim()), delta(layout.dim());
        if (run.record_trajectory) {
            std::copy(state.x.begin(), state.x.end(), result.trajectory[0].sample(n).begin());
        }
        for (std::size_t k = 0; k < steps; ++k) {
            denoiser.evaluate(state.x, k, rng, clean, output, delta);
            if (uses_bias_correction(run.mode)) bias_correct_inplace(output, (*corrections.bias)[k], layout);
            std::span<const double> cf;
            if (uses_drift(run.mode)) cf = factors.rows[k];
            advance(run.family, schedule, k, layout, output, cf, state);
            if (run.record_trajectory) {
                std::copy(state.x.begin(), state.x.end(), result.trajectory[k + 1].sample(n).begin());
            }
        }
        std::copy(state.x.begin(), state.x.end(), result.samples.sample(n).begin());
    });
    if (!result.samples.all_finite()) throw NumericalError("sampler produced non-finite samples");
    return result;
}

}  // namespace qdrift
