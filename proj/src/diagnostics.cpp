#include "qdrift/diagnostics.hpp"

#include "qdrift/errors.hpp"
#include "qdrift/random.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <unordered_set>

namespace qdrift {

const char* to_string(DiagnosticBlock block) {
    switch (block) {
        case DiagnosticBlock::QuantOutput: return "quant_output";
        case DiagnosticBlock::Error: return "error";
        case DiagnosticBlock::Cross: return "cross";
    }
    return "?";
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return std::nan("");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Sup-norm distance between the empirical CDF of `sorted` and N(mean, sd^2).
double fitted_normal_distance(const std::vector<double>& sorted, double mean, double sd) {
    const double n = static_cast<double>(sorted.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double f = normal_cdf((sorted[i] - mean) / sd);
        d = std::max(d, std::max(static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n));
    }
    return d;
}

struct MeanVar {
    double mean;
    double var;  // unbiased
};

MeanVar mean_var(std::span<const double> x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return {mean, x.size() > 1 ? ss / static_cast<double>(x.size() - 1) : 0.0};
}

// Distinct indices in [0, space), sorted (Floyd's sampling).
std::vector<std::uint64_t> sample_without_replacement(std::uint64_t space, std::size_t count, Rng& rng) {
    std::unordered_set<std::uint64_t> chosen;
    chosen.reserve(count * 2);
    for (std::uint64_t j = space - count; j < space; ++j) {
        const std::uint64_t t = rng.below(j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::vector<std::uint64_t> out(chosen.begin(), chosen.end());
    std::sort(out.begin(), out.end());
    return out;
}

// Index p of the unordered pair (i < j) in row-major upper-triangle order.
std::pair<std::size_t, std::size_t> decode_upper_pair(std::uint64_t p, std::size_t m) {
    std::size_t i = 0;
    std::uint64_t row = m - 1;
    while (p >= row) {
        p -= row;
        ++i;
        --row;
    }
    return {i, i + 1 + static_cast<std::size_t>(p)};
}

}  // namespace

SummaryStats summarize(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("summarize: empty input");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    SummaryStats s;
    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
    s.median = quantile_sorted(sorted, 0.5);
    s.p95 = quantile_sorted(sorted, 0.95);
    return s;
}

double abs_pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.empty()) throw std::invalid_argument("abs_pearson: size mismatch");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;
    return std::min(1.0, std::abs(sxy) / std::sqrt(sxx * syy));
}

double ks_two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty input");
    std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double nx = static_cast<double>(x.size());
    const double ny = static_cast<double>(y.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double v = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == v) ++i;
        while (j < y.size() && y[j] == v) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny));
    }
    return d;
}

double ks_two_sample_critical(std::size_t n, std::size_t m, double alpha) {
    const double c = std::sqrt(-0.5 * std::log(alpha / 2.0));
    const double nn = static_cast<double>(n);
    const double mm = static_cast<double>(m);
    return c * std::sqrt((nn + mm) / (nn * mm));
}

CorrelationReport offdiag_correlations(SampleMatrix output, SampleMatrix delta, DiagnosticBlock block,
                                       std::size_t n_pairs, std::size_t n_samples, std::uint64_t seed) {
    if (n_pairs == 0) throw ConfigError("offdiag_correlations: n_pairs must be >= 1");
    if (n_samples < 2) throw ConfigError("offdiag_correlations: need at least 2 samples");
    const SampleMatrix& first = block == DiagnosticBlock::Error ? delta : output;
    const SampleMatrix& second = block == DiagnosticBlock::QuantOutput ? output : delta;
    if (block == DiagnosticBlock::Cross && (output.rows != delta.rows || output.cols != delta.cols)) {
        throw ConfigError("offdiag_correlations: output and delta matrices differ in shape");
    }
    if (n_samples > first.rows) {
        throw ConfigError("offdiag_correlations: insufficient retained samples (" + std::to_string(first.rows) +
                          " < " + std::to_string(n_samples) + ")");
    }
    const std::size_t m = first.cols;
    if (m < 2) throw ConfigError("offdiag_correlations: need at least 2 retained coordinates");
    const std::uint64_t space = block == DiagnosticBlock::Cross ? std::uint64_t{m} * (m - 1)
                                                                : std::uint64_t{m} * (m - 1) / 2;
    if (n_pairs > space) {
        throw ConfigError("offdiag_correlations: requested " + std::to_string(n_pairs) + " pairs but only " +
                          std::to_string(space) + " exist");
    }

    CorrelationReport report;
    report.block = block;
    report.seed = seed;
    report.samples = n_samples;

    Rng pair_rng(seed, "diagnostic-pairs", static_cast<std::uint64_t>(block));
    for (std::uint64_t p : sample_without_replacement(space, n_pairs, pair_rng)) {
        if (block == DiagnosticBlock::Cross) {
            const std::size_t i = static_cast<std::size_t>(p / (m - 1));
            std::size_t j = static_cast<std::size_t>(p % (m - 1));
            if (j >= i) ++j;
            report.pairs.emplace_back(i, j);
        } else {
            report.pairs.push_back(decode_upper_pair(p, m));
        }
    }

    std::vector<double> x(n_samples), y(n_samples);
    for (std::size_t p = 0; p < report.pairs.size(); ++p) {
        const auto [i, j] = report.pairs[p];
        for (std::size_t r = 0; r < n_samples; ++r) {
            x[r] = first.at(r, i);
            y[r] = second.at(r, j);
        }
        report.actual.push_back(abs_pearson(x, y));
        Rng shuffle_rng(seed, "diagnostic-shuffle", p);
        std::shuffle(y.begin(), y.end(), shuffle_rng.engine());
        report.shuffled.push_back(abs_pearson(x, y));
    }
    report.actual_summary = summarize(report.actual);
    report.shuffled_summary = summarize(report.shuffled);
    report.ks_statistic = ks_two_sample(report.actual, report.shuffled);
    report.ks_critical = ks_two_sample_critical(report.actual.size(), report.shuffled.size());
    return report;
}

double normal_fit_critical_value(std::size_t n) {
    if (n < 2) throw std::invalid_argument("normal_fit_critical_value: n < 2");
    // Simulate at a bounded size and rescale by the sqrt(n) law of the statistic.
    constexpr std::size_t kMaxSimulated = 1000;
    constexpr std::size_t kReplicates = 10000;
    const std::size_t n_sim = std::min(n, kMaxSimulated);

    static std::mutex mutex;
    static std::map<std::size_t, double> cache;
    double base = 0.0;
    {
        std::lock_guard lock(mutex);
        auto it = cache.find(n_sim);
        if (it != cache.end()) base = it->second;
    }
    if (base == 0.0) {
        Rng rng(0, "normal-fit-null", n_sim);
        std::vector<double> stats(kReplicates), draw(n_sim);
        for (std::size_t r = 0; r < kReplicates; ++r) {
            for (double& v : draw) v = rng.normal();
            const MeanVar mv = mean_var(draw);
            std::sort(draw.begin(), draw.end());
            stats[r] = fitted_normal_distance(draw, mv.mean, std::sqrt(mv.var));
        }
        std::sort(stats.begin(), stats.end());
        base = quantile_sorted(stats, 0.95);
        std::lock_guard lock(mutex);
        cache.emplace(n_sim, base);
    }
    return base * std::sqrt(static_cast<double>(n_sim) / static_cast<double>(n));
}

MarginalGaussianity marginal_gaussianity(std::span<const double> x) {
    if (x.size() < kMinGaussianitySamples) {
        throw ConfigError("gaussianity: need at least " + std::to_string(kMinGaussianitySamples) +
                          " samples, got " + std::to_string(x.size()));
    }
    MarginalGaussianity g;
    g.n = x.size();
    const MeanVar mv = mean_var(x);
    g.mean = mv.mean;
    g.variance = mv.var;
    g.critical_value = normal_fit_critical_value(g.n);
    if (!(mv.var > 0.0)) {
        g.degenerate = true;
        g.skewness = g.excess_kurtosis = g.cdf_distance = std::nan("");
        return g;
    }
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d = v - mv.mean;
        const double d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    const double n = static_cast<double>(g.n);
    m2 /= n;
    m3 /= n;
    m4 /= n;
    g.skewness = m3 / std::pow(m2, 1.5);
    g.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    std::vector<double> sorted(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());
    g.cdf_distance = fitted_normal_distance(sorted, mv.mean, std::sqrt(mv.var));
    return g;
}

GaussianityReport gaussianity_summary(std::span<const double> output, std::span<const double> delta,
                                      std::size_t timestep, std::size_t coordinate) {
    if (output.size() != delta.size()) throw ConfigError("gaussianity: output and delta lengths differ");
    GaussianityReport report;
    report.timestep = timestep;
    report.coordinate = coordinate;
    report.output = marginal_gaussianity(output);
    report.delta = marginal_gaussianity(delta);
    PairMoments pm;
    for (std::size_t i = 0; i < output.size(); ++i) pm.add(output[i], delta[i]);
    JointGaussianFit& j = report.joint;
    j.mean_output = pm.mean_output();
    j.mean_delta = pm.mean_delta();
    j.var_output = pm.var_output();
    j.var_delta = pm.var_delta();
    // Cauchy-Schwarz clamp keeps the fitted covariance PSD under round-off.
    const double bound = std::sqrt(j.var_output * j.var_delta);
    j.covariance = std::clamp(pm.covariance(), -bound, bound);
    j.correlation = bound > 0.0 ? j.covariance / bound : 0.0;
    return report;
}

std::vector<IsotropyRow> channel_isotropy_summary(std::span<const PairMoments> element_moments, Layout layout,
                                                  DiagnosticBlock block) {
    if (element_moments.size() != layout.dim()) {
        throw ConfigError("channel_isotropy_summary: element count does not match layout");
    }
    std::vector<IsotropyRow> rows;
    for (std::size_t c = 0; c < layout.channels; ++c) {
        std::vector<double> entries(layout.slots);
        for (std::size_t l = 0; l < layout.slots; ++l) {
            const PairMoments& m = element_moments[c * layout.slots + l];
            switch (block) {
                case DiagnosticBlock::QuantOutput: entries[l] = m.var_output(); break;
                case DiagnosticBlock::Error: entries[l] = m.var_delta(); break;
                case DiagnosticBlock::Cross: entries[l] = m.covariance(); break;
            }
        }
        const MeanVar mv = mean_var(entries);
        const double sd = std::sqrt(mv.var);
        rows.push_back({c, mv.mean, sd, sd / std::sqrt(static_cast<double>(layout.slots))});
    }
    return rows;
}

}  // namespace qdrift
