#pragma once

#include "qdrift/samplers.hpp"
#include "qdrift/schedule.hpp"
#include "qdrift/stats.hpp"
#include "qdrift/toymodel.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qdrift {

// Pooled (output, delta) moments indexed [step][channel].
using StepChannelStats = std::vector<std::vector<PairMoments>>;

// Moments kept separately for every calibration run, indexed [run][step][channel].
class RunMoments {
public:
    RunMoments() = default;
    RunMoments(std::size_t runs, std::size_t steps, std::size_t channels);

    std::size_t runs() const { return runs_; }
    std::size_t steps() const { return steps_; }
    std::size_t channels() const { return channels_; }

    PairMoments& at(std::size_t run, std::size_t step, std::size_t channel) {
        return data_[(run * steps_ + step) * channels_ + channel];
    }
    const PairMoments& at(std::size_t run, std::size_t step, std::size_t channel) const {
        return data_[(run * steps_ + step) * channels_ + channel];
    }

    // Merges the listed runs in ascending run order, so any selection that
    // contains every run reproduces pool_all() bit for bit.
    StepChannelStats pool(std::span<const std::size_t> runs) const;
    StepChannelStats pool_all() const;

    bool operator==(const RunMoments&) const = default;

private:
    std::size_t runs_ = 0;
    std::size_t steps_ = 0;
    std::size_t channels_ = 0;
    std::vector<PairMoments> data_;
};

// V rows [step][channel] from pooled moments.
std::vector<std::vector<double>> conditional_variance_rows(const StepChannelStats& stats);
std::vector<BiasRow> bias_rows(const StepChannelStats& stats);

struct CalibrationProvenance {
    std::uint64_t runs = 0;
    std::uint64_t seed = 0;
    SamplerFamily family = SamplerFamily::Euler;
    std::string injector;  // serialized injector spec, filled in by the caller
    bool operator==(const CalibrationProvenance&) const = default;
};

// Fitted per-step, per-channel statistics with cached derived quantities.
// Derived values are always recomputed from the stored raw moments.
class CalibrationTable {
public:
    CalibrationTable(NoiseSchedule schedule, StepChannelStats stats, CalibrationProvenance provenance);

    const NoiseSchedule& schedule() const { return schedule_; }
    std::uint64_t schedule_fingerprint() const { return schedule_.fingerprint(); }
    const StepChannelStats& stats() const { return stats_; }
    std::size_t steps() const { return stats_.size(); }
    std::size_t channels() const { return stats_.empty() ? 0 : stats_.front().size(); }
    const CalibrationProvenance& provenance() const { return provenance_; }

    const std::vector<std::vector<double>>& variance() const { return variance_; }
    const DriftFactors& factors(SamplerFamily family) const;
    const std::vector<BiasRow>& bias() const { return bias_; }

    bool operator==(const CalibrationTable& other) const {
        return schedule_ == other.schedule_ && stats_ == other.stats_ && provenance_ == other.provenance_;
    }

private:
    NoiseSchedule schedule_;
    StepChannelStats stats_;
    CalibrationProvenance provenance_;
    std::vector<std::vector<double>> variance_;
    std::vector<BiasRow> bias_;
    DriftFactors euler_;
    DriftFactors flow_;
    DriftFactors dpm_;
};

// Raw per-sample values kept at a few timesteps for assumption checks.
struct RetentionSpec {
    std::vector<std::size_t> timesteps;    // at most 3
    std::vector<std::size_t> coordinates;  // flat indices into the C*L latent
    bool enabled() const { return !timesteps.empty(); }
};

struct RetainedSamples {
    std::vector<std::size_t> timesteps;
    std::vector<std::size_t> coordinates;
    std::size_t runs = 0;
    // [timestep] -> runs x coordinates, row-major.
    std::vector<std::vector<double>> output;
    std::vector<std::vector<double>> delta;
    // [timestep][element] moments over runs, for every element of the latent.
    std::vector<std::vector<PairMoments>> element_moments;

    // Column `coord` of the retained matrix at timestep slot `t`.
    std::vector<double> output_column(std::size_t t, std::size_t coord) const;
    std::vector<double> delta_column(std::size_t t, std::size_t coord) const;
};

// Nearest step indices to 0.9 T, 0.5 T and 0.1 T (duplicates removed).
std::vector<std::size_t> default_diagnostic_timesteps(std::size_t steps);

struct CalibrationOptions {
    std::size_t runs = 1;  // K
    std::uint64_t seed = 0;
    SamplerFamily family = SamplerFamily::Euler;
    InitMode init = InitMode::Marginal;
    unsigned threads = 1;
    RetentionSpec retention;
};

struct CalibrationResult {
    CalibrationTable table;
    RunMoments per_run;
    std::optional<RetainedSamples> retained;
};

// Offline calibration: K single-latent runs along the full-precision
// trajectory. At every step both outputs are evaluated, the (quantized,
// delta) pair is accumulated per channel over slots, and the latent advances
// with the clean output.
CalibrationResult calibrate(const DataDistribution& dist, const NoiseInjectorSpec& injector,
                            const NoiseSchedule& schedule, const CalibrationOptions& options);

// ---- subsample stability ------------------------------------------------

struct EnvelopeOptions {
    std::vector<std::size_t> sizes{50, 10, 5, 1};
    std::size_t resamples = 200;
    std::uint64_t seed = 0;
    SamplerFamily family = SamplerFamily::Euler;
};

// Min / median / max over resamples of the channel-averaged c_i per step.
struct EnvelopeBand {
    std::size_t size = 0;
    std::vector<double> min;
    std::vector<double> median;
    std::vector<double> max;
};

enum class StressKind { MaxAbsDeviation, MaxSumDeviation, MinSumDeviation };
const char* to_string(StressKind kind);

// A subset chosen by its deviation sum over steps of (c_i - c_i_ref).
struct StressSubset {
    std::size_t size = 0;
    StressKind kind = StressKind::MaxAbsDeviation;
    std::size_t resample = 0;
    double score = 0.0;
    std::vector<std::size_t> runs;
    StepChannelStats stats;
};

struct EnvelopeReport {
    std::vector<double> reference;  // full-pool channel-averaged c_i
    std::vector<EnvelopeBand> bands;
    std::vector<StressSubset> stress;
};

// Nested subsampling: each resample draws one random ordering of the runs;
// the size-K subset is its first K entries, so smaller subsets nest inside
// larger ones.
EnvelopeReport subsample_envelope(const RunMoments& runs, const NoiseSchedule& schedule,
                                  const EnvelopeOptions& options);

}  // namespace qdrift
