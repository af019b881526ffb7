#include "qdrift/calibration.hpp"

#include "qdrift/errors.hpp"
#include "qdrift/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qdrift {

RunMoments::RunMoments(std::size_t runs, std::size_t steps, std::size_t channels)
    : runs_(runs), steps_(steps), channels_(channels), data_(runs * steps * channels) {}

StepChannelStats RunMoments::pool(std::span<const std::size_t> runs) const {
    std::vector<std::size_t> order(runs.begin(), runs.end());
    std::sort(order.begin(), order.end());
    StepChannelStats out(steps_, std::vector<PairMoments>(channels_));
    for (std::size_t r : order) {
        if (r >= runs_) throw std::out_of_range("run index out of range");
        for (std::size_t k = 0; k < steps_; ++k) {
            for (std::size_t c = 0; c < channels_; ++c) out[k][c].merge(at(r, k, c));
        }
    }
    return out;
}

StepChannelStats RunMoments::pool_all() const {
    std::vector<std::size_t> all(runs_);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return pool(all);
}

std::vector<std::vector<double>> conditional_variance_rows(const StepChannelStats& stats) {
    std::vector<std::vector<double>> out;
    out.reserve(stats.size());
    for (const auto& row : stats) {
        std::vector<double> v;
        v.reserve(row.size());
        for (const auto& m : row) v.push_back(m.conditional_variance());
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<BiasRow> bias_rows(const StepChannelStats& stats) {
    std::vector<BiasRow> out;
    out.reserve(stats.size());
    for (const auto& row : stats) {
        BiasRow b;
        for (const auto& m : row) {
            b.mean_output.push_back(m.mean_output());
            b.mean_delta.push_back(m.mean_delta());
            b.slope.push_back(m.slope());
        }
        out.push_back(std::move(b));
    }
    return out;
}

CalibrationTable::CalibrationTable(NoiseSchedule schedule, StepChannelStats stats,
                                   CalibrationProvenance provenance)
    : schedule_(std::move(schedule)), stats_(std::move(stats)), provenance_(std::move(provenance)) {
    if (stats_.size() != schedule_.steps()) {
        throw std::invalid_argument("calibration table: step count does not match schedule");
    }
    for (const auto& row : stats_) {
        if (row.size() != channels() || row.empty()) {
            throw std::invalid_argument("calibration table: ragged channel rows");
        }
    }
    variance_ = conditional_variance_rows(stats_);
    bias_ = bias_rows(stats_);
    euler_ = drift_factors_from_variance(SamplerFamily::Euler, schedule_, variance_);
    flow_ = drift_factors_from_variance(SamplerFamily::FlowMatching, schedule_, variance_);
    dpm_ = drift_factors_from_variance(SamplerFamily::DpmPP2M, schedule_, variance_);
}

const DriftFactors& CalibrationTable::factors(SamplerFamily family) const {
    switch (family) {
        case SamplerFamily::Euler: return euler_;
        case SamplerFamily::FlowMatching: return flow_;
        case SamplerFamily::DpmPP2M: return dpm_;
    }
    return euler_;
}

std::vector<double> RetainedSamples::output_column(std::size_t t, std::size_t coord) const {
    std::vector<double> col(runs);
    const std::size_t width = coordinates.size();
    for (std::size_t r = 0; r < runs; ++r) col[r] = output.at(t)[r * width + coord];
    return col;
}

std::vector<double> RetainedSamples::delta_column(std::size_t t, std::size_t coord) const {
    std::vector<double> col(runs);
    const std::size_t width = coordinates.size();
    for (std::size_t r = 0; r < runs; ++r) col[r] = delta.at(t)[r * width + coord];
    return col;
}

std::vector<std::size_t> default_diagnostic_timesteps(std::size_t steps) {
    std::vector<std::size_t> out;
    for (double frac : {0.9, 0.5, 0.1}) {
        const auto idx = static_cast<std::size_t>(std::llround(frac * static_cast<double>(steps)));
        const std::size_t clamped = std::min(idx, steps - 1);
        if (std::find(out.begin(), out.end(), clamped) == out.end()) out.push_back(clamped);
    }
    return out;
}

namespace {

constexpr std::size_t kRunBlock = 64;

}  // namespace

CalibrationResult calibrate(const DataDistribution& dist, const NoiseInjectorSpec& injector,
                            const NoiseSchedule& schedule, const CalibrationOptions& options) {
    if (options.runs == 0) throw ConfigError("calibrate: K must be >= 1");
    const Layout layout = dist.layout();
    const std::size_t steps = schedule.steps();
    const ToyDenoiser denoiser(dist, injector, schedule, options.family);

    const RetentionSpec& keep = options.retention;
    if (keep.timesteps.size() > 3) throw ConfigError("calibrate: at most 3 retained timesteps");
    for (std::size_t t : keep.timesteps) {
        if (t >= steps) throw ConfigError("calibrate: retained timestep out of range");
    }
    for (std::size_t c : keep.coordinates) {
        if (c >= layout.dim()) throw ConfigError("calibrate: retained coordinate out of range");
    }
    // slot of each step in the retained arrays, or -1
    std::vector<int> keep_slot(steps, -1);
    for (std::size_t i = 0; i < keep.timesteps.size(); ++i) keep_slot[keep.timesteps[i]] = static_cast<int>(i);

    RunMoments per_run(options.runs, steps, layout.channels);
    std::optional<RetainedSamples> retained;
    if (keep.enabled()) {
        retained.emplace();
        retained->timesteps = keep.timesteps;
        retained->coordinates = keep.coordinates;
        retained->runs = options.runs;
        retained->output.assign(keep.timesteps.size(), std::vector<double>(options.runs * keep.coordinates.size()));
        retained->delta = retained->output;
    }

    const std::size_t blocks = (options.runs + kRunBlock - 1) / kRunBlock;
    // Per-block element moments, merged in block order afterwards.
    std::vector<std::vector<std::vector<PairMoments>>> block_elements(
        keep.enabled() ? blocks : 0,
        std::vector<std::vector<PairMoments>>(keep.timesteps.size(), std::vector<PairMoments>(layout.dim())));

    parallel_for(blocks, options.threads, [&](std::size_t b) {
        std::vector<double> clean(layout.dim()), quantized(layout.dim()), delta(layout.dim());
        const std::size_t end = std::min(options.runs, (b + 1) * kRunBlock);
        for (std::size_t r = b * kRunBlock; r < end; ++r) {
            Rng rng(options.seed, "calibrate", r);
            TrajectoryState state;
            state.x.resize(layout.dim());
            initial_latent(dist, schedule, options.init, rng, state.x);
            for (std::size_t k = 0; k < steps; ++k) {
                denoiser.evaluate(state.x, k, rng, clean, quantized, delta);
                for (std::size_t c = 0; c < layout.channels; ++c) {
                    PairMoments& m = per_run.at(r, k, c);
                    for (std::size_t l = 0; l < layout.slots; ++l) {
                        const std::size_t j = c * layout.slots + l;
                        m.add(quantized[j], delta[j]);
                    }
                }
                if (keep_slot[k] >= 0) {
                    const auto t = static_cast<std::size_t>(keep_slot[k]);
                    const std::size_t width = keep.coordinates.size();
                    for (std::size_t i = 0; i < width; ++i) {
                        retained->output[t][r * width + i] = quantized[keep.coordinates[i]];
                        retained->delta[t][r * width + i] = delta[keep.coordinates[i]];
                    }
                    auto& elems = block_elements[b][t];
                    for (std::size_t j = 0; j < layout.dim(); ++j) elems[j].add(quantized[j], delta[j]);
                }
                advance(options.family, schedule, k, layout, clean, {}, state);
            }
            for (double v : state.x) {
                if (!std::isfinite(v)) throw NumericalError("calibrate: trajectory diverged");
            }
        }
    });

    if (retained) {
        retained->element_moments.assign(keep.timesteps.size(), std::vector<PairMoments>(layout.dim()));
        for (const auto& block : block_elements) {
            for (std::size_t t = 0; t < block.size(); ++t) {
                for (std::size_t j = 0; j < layout.dim(); ++j) retained->element_moments[t][j].merge(block[t][j]);
            }
        }
    }

    CalibrationProvenance provenance{options.runs, options.seed, options.family, {}};
    CalibrationTable table(schedule, per_run.pool_all(), provenance);
    return {std::move(table), std::move(per_run), std::move(retained)};
}

const char* to_string(StressKind kind) {
    switch (kind) {
        case StressKind::MaxAbsDeviation: return "max_abs_sum";
        case StressKind::MaxSumDeviation: return "max_sum";
        case StressKind::MinSumDeviation: return "min_sum";
    }
    return "?";
}

namespace {

std::vector<double> scalar_factors(SamplerFamily family, const NoiseSchedule& schedule,
                                   const StepChannelStats& stats) {
    const DriftFactors f = drift_factors_from_variance(family, schedule, conditional_variance_rows(stats));
    std::vector<double> out(f.steps());
    for (std::size_t k = 0; k < f.steps(); ++k) out[k] = f.scalar(k);
    return out;
}

double median_of(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

}  // namespace

EnvelopeReport subsample_envelope(const RunMoments& runs, const NoiseSchedule& schedule,
                                  const EnvelopeOptions& options) {
    if (options.resamples == 0) throw ConfigError("envelope: need at least one resample");
    if (options.sizes.empty()) throw ConfigError("envelope: no subsample sizes");
    if (runs.steps() != schedule.steps()) throw ConfigError("envelope: run moments do not match schedule");
    for (std::size_t k : options.sizes) {
        if (k == 0 || k > runs.runs()) {
            throw ConfigError("envelope: subsample size " + std::to_string(k) + " exceeds the " +
                              std::to_string(runs.runs()) + " available runs");
        }
    }
    const std::size_t steps = schedule.steps();
    const std::size_t largest = *std::max_element(options.sizes.begin(), options.sizes.end());

    EnvelopeReport report;
    report.reference = scalar_factors(options.family, schedule, runs.pool_all());

    // values[size index][resample][step]
    std::vector<std::vector<std::vector<double>>> values(
        options.sizes.size(), std::vector<std::vector<double>>(options.resamples));
    std::vector<std::vector<std::vector<std::size_t>>> subsets(
        options.sizes.size(), std::vector<std::vector<std::size_t>>(options.resamples));

    std::vector<std::size_t> order(runs.runs());
    for (std::size_t r = 0; r < options.resamples; ++r) {
        Rng rng(options.seed, "envelope", r);
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Partial Fisher-Yates: the first `largest` entries are a uniform ordered draw.
        for (std::size_t i = 0; i < largest; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(order.size() - i));
            std::swap(order[i], order[j]);
        }
        for (std::size_t s = 0; s < options.sizes.size(); ++s) {
            const std::size_t k = options.sizes[s];
            std::vector<std::size_t> subset(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
            values[s][r] = scalar_factors(options.family, schedule, runs.pool(subset));
            subsets[s][r] = std::move(subset);
        }
    }

    for (std::size_t s = 0; s < options.sizes.size(); ++s) {
        EnvelopeBand band{options.sizes[s], std::vector<double>(steps), std::vector<double>(steps),
                          std::vector<double>(steps)};
        std::vector<double> column(options.resamples);
        for (std::size_t k = 0; k < steps; ++k) {
            for (std::size_t r = 0; r < options.resamples; ++r) column[r] = values[s][r][k];
            band.min[k] = *std::min_element(column.begin(), column.end());
            band.max[k] = *std::max_element(column.begin(), column.end());
            band.median[k] = median_of(column);
        }
        report.bands.push_back(std::move(band));

        const StressKind kinds[] = {StressKind::MaxAbsDeviation, StressKind::MaxSumDeviation,
                                    StressKind::MinSumDeviation};
        for (StressKind kind : kinds) {
            std::size_t best = 0;
            double best_score = 0.0;
            for (std::size_t r = 0; r < options.resamples; ++r) {
                double score = 0.0;
                for (std::size_t k = 0; k < steps; ++k) {
                    const double dc = values[s][r][k] - report.reference[k];
                    score += kind == StressKind::MaxAbsDeviation ? std::abs(dc) : dc;
                }
                const bool better = kind == StressKind::MinSumDeviation ? score < best_score : score > best_score;
                if (r == 0 || better) {
                    best = r;
                    best_score = score;
                }
            }
            StressSubset subset;
            subset.size = options.sizes[s];
            subset.kind = kind;
            subset.resample = best;
            subset.score = best_score;
            subset.runs = subsets[s][best];
            std::sort(subset.runs.begin(), subset.runs.end());
            subset.stats = runs.pool(subset.runs);
            report.stress.push_back(std::move(subset));
        }
    }
    return report;
}

}  // namespace qdrift
