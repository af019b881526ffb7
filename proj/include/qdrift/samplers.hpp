#pragma once

#include "qdrift/random.hpp"
#include "qdrift/sample_batch.hpp"
#include "qdrift/schedule.hpp"
#include "qdrift/toymodel.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qdrift {

enum class SamplerFamily { Euler, FlowMatching, DpmPP2M };
enum class SamplerMode { Baseline, QDrift, BiasCorrect, BiasCorrectQDrift };
// Marginal: x_0 = alpha_0 * data + sigma_0 * z (exact marginal of the toy).
// PureNoise: x_0 = sigma_0 * z.
enum class InitMode { Marginal, PureNoise };

const char* to_string(SamplerFamily family);
const char* to_string(SamplerMode mode);
const char* to_string(InitMode mode);

inline bool uses_drift(SamplerMode m) {
    return m == SamplerMode::QDrift || m == SamplerMode::BiasCorrectQDrift;
}
inline bool uses_bias_correction(SamplerMode m) {
    return m == SamplerMode::BiasCorrect || m == SamplerMode::BiasCorrectQDrift;
}

// Per-step, per-channel drift factors c_i >= 0.
struct DriftFactors {
    SamplerFamily family = SamplerFamily::Euler;
    std::vector<std::vector<double>> rows;  // [step][channel]

    static DriftFactors zeros(SamplerFamily family, std::size_t steps, std::size_t channels);

    std::size_t steps() const { return rows.size(); }
    std::size_t channels() const { return rows.empty() ? 0 : rows.front().size(); }
    // Channel mean of each row, broadcast back over the channels.
    DriftFactors scalar_per_step() const;
    // Channel mean of row i.
    double scalar(std::size_t step) const;
    // Throws std::invalid_argument on negative, non-finite or ragged rows.
    void validate() const;

    bool operator==(const DriftFactors&) const = default;
};

// Per-channel bias-correction parameters of one step.
struct BiasRow {
    std::vector<double> mean_output;  // mu_eps_hat
    std::vector<double> mean_delta;   // mu_Delta
    std::vector<double> slope;        // a = Cov(Delta, eps_hat) / Var(eps_hat)
};

// ---- step kernels -------------------------------------------------------
//
// `channel_factors` holds one c per channel broadcast over that channel's
// slots; an empty span means c = 0 and runs the identical arithmetic.

// x + delta_sigma * ((1 + c) * output), in place on one latent.
void euler_update(std::span<double> x, std::span<const double> output, double delta_sigma,
                  std::span<const double> channel_factors, Layout layout);

SampleBatch euler_step(const SampleBatch& x, const SampleBatch& eps_hat, double delta_sigma,
                       std::span<const double> channel_factors = {});
// Same arithmetic with a velocity prediction in place of eps_hat.
SampleBatch flow_matching_step(const SampleBatch& x, const SampleBatch& v_hat, double delta_sigma,
                               std::span<const double> channel_factors = {});

// DPM-Solver++ step from level `step` to level step+1:
//   x' = (sigma_{k+1}/sigma_k) x - (1 + c) alpha_{k+1} (e^{-h} - 1) D
// with D = denoised for the first-order rule and
//   D = (1 + 1/(2r)) denoised - 1/(2r) previous_denoised
// for the 2M midpoint rule, h = lambda_{k+1} - lambda_k, r = h_prev / h.
// The first-order rule runs when previous_denoised is empty, at step 0, and
// on the final step into sigma = 0.
void dpmpp2m_update(std::span<double> x, std::span<const double> denoised,
                    std::span<const double> previous_denoised, const NoiseSchedule& schedule,
                    std::size_t step, std::span<const double> channel_factors, Layout layout);

SampleBatch dpmpp2m_step(const SampleBatch& x, const SampleBatch& denoised,
                         const SampleBatch* previous_denoised, const NoiseSchedule& schedule,
                         std::size_t step, std::span<const double> channel_factors = {});

// True when step `step` of the schedule runs the first-order DPM rule.
bool dpm_first_order_step(const NoiseSchedule& schedule, std::size_t step);

// ---- drift factors ------------------------------------------------------

// c = |delta_sigma| / (2 sigma) * V, elementwise.
std::vector<double> euler_drift_factor(double sigma, double delta_sigma, std::span<const double> v);

// Quadrature weights of the 2M midpoint rule on eps_hat at levels step and step-1.
struct DpmQuadratureWeights {
    double current;
    double previous;
};
DpmQuadratureWeights dpm_quadrature_weights(const NoiseSchedule& schedule, std::size_t step);

// Closed-form 2M drift factor for the step from level `step` to step+1:
//   c = (e^{-h}-1)^2 [(1+1/(2r))^2 sb_k^2 V_k + (1/(2r))^2 sb_{k-1}^2 V_{k-1}] / |sb_k^2 - sb_{k+1}^2|
// where sb = sigma_bar. Requires a 2M step (see dpm_first_order_step).
std::vector<double> dpm_drift_factor(const NoiseSchedule& schedule, std::size_t step,
                                     std::span<const double> v_current,
                                     std::span<const double> v_previous);

// First-order DPM steps use the Euler formula in sigma_bar.
std::vector<double> dpm_warmup_drift_factor(const NoiseSchedule& schedule, std::size_t step,
                                            std::span<const double> v_current);

// Factors for every step of `schedule` from per-step, per-channel V.
DriftFactors drift_factors_from_variance(SamplerFamily family, const NoiseSchedule& schedule,
                                         const std::vector<std::vector<double>>& v);

// ---- bias correction ----------------------------------------------------

// (1 - a) * output + a * mu_output - mu_delta, per channel.
void bias_correct_inplace(std::span<double> output, const BiasRow& row, Layout layout);
SampleBatch bias_correct(const SampleBatch& output, const BiasRow& row);

// ---- trajectories -------------------------------------------------------

// Throws std::invalid_argument if the schedule's path does not suit the family
// (Euler: variance exploding; flow matching: alpha = 1 - sigma).
void check_family_schedule(SamplerFamily family, const NoiseSchedule& schedule);

// The toy denoiser seen through one sampler family: clean and quantized
// outputs (eps for Euler and DPM, velocity for flow matching) at level `step`.
class ToyDenoiser {
public:
    ToyDenoiser(const DataDistribution& dist, const NoiseInjectorSpec& injector,
                const NoiseSchedule& schedule, SamplerFamily family);

    void clean_output(std::span<const double> x, std::size_t step, std::span<double> out) const;
    void evaluate(std::span<const double> x, std::size_t step, Rng& rng, std::span<double> clean,
                  std::span<double> quantized, std::span<double> delta) const;

    const DataDistribution& distribution() const { return *dist_; }
    const NoiseSchedule& schedule() const { return *schedule_; }
    SamplerFamily family() const { return family_; }

private:
    const DataDistribution* dist_;
    const NoiseInjectorSpec* injector_;
    const NoiseSchedule* schedule_;
    SamplerFamily family_;
    std::vector<ChannelMoments> moments_;  // per step, when the injector needs them
};

// Per-latent state of a running trajectory.
struct TrajectoryState {
    std::vector<double> x;
    std::vector<double> previous_denoised;  // DPM history
    bool has_previous = false;
};

void initial_latent(const DataDistribution& dist, const NoiseSchedule& schedule, InitMode init,
                    Rng& rng, std::span<double> out);

// One sampler step using model output `output` at level `step`.
void advance(SamplerFamily family, const NoiseSchedule& schedule, std::size_t step, Layout layout,
             std::span<const double> output, std::span<const double> channel_factors,
             TrajectoryState& state);

struct SamplerRun {
    NoiseSchedule schedule;
    SamplerFamily family = SamplerFamily::Euler;
    SamplerMode mode = SamplerMode::Baseline;
    std::string conditioning;  // opaque; the toy models are unconditional
    std::uint64_t seed = 0;
    std::size_t count = 1;
    InitMode init = InitMode::Marginal;
    bool channelwise = true;
    unsigned threads = 1;
    bool record_trajectory = false;
};

struct SamplerCorrections {
    const DriftFactors* factors = nullptr;
    const std::vector<BiasRow>* bias = nullptr;
};

struct SamplerResult {
    SampleBatch samples;
    std::vector<SampleBatch> trajectory;  // levels 0..M when recorded
};

// Runs `count` independent trajectories; latent n draws from the stream
// (seed, "sample", n), so output does not depend on thread count.
SamplerResult run_sampler(const SamplerRun& run, const DataDistribution& dist,
                          const NoiseInjectorSpec& injector,
                          const SamplerCorrections& corrections = {});

}  // namespace qdrift
