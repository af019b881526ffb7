#include "qdrift/metrics.hpp"

#include "qdrift/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qdrift {

TargetMoments data_target_moments(const DataDistribution& dist) {
    const Layout layout = dist.layout();
    TargetMoments t{std::vector<double>(layout.channels), std::vector<double>(layout.channels)};
    if (const auto* iso = std::get_if<IsotropicGaussian>(&dist.kind())) {
        for (std::size_t c = 0; c < layout.channels; ++c) t.variance[c] = iso->scale[c] * iso->scale[c];
        return t;
    }
    const auto& mix = std::get<GaussianMixture>(dist.kind());
    const double slots = static_cast<double>(layout.slots);
    for (std::size_t c = 0; c < layout.channels; ++c) {
        double first = 0.0, second = 0.0;
        for (std::size_t k = 0; k < mix.weights.size(); ++k) {
            for (std::size_t l = 0; l < layout.slots; ++l) {
                const double m = mix.means[k][c * layout.slots + l];
                first += mix.weights[k] * m / slots;
                second += mix.weights[k] * (m * m + mix.stds[k] * mix.stds[k]) / slots;
            }
        }
        t.mean[c] = first;
        t.variance[c] = second - first * first;
    }
    return t;
}

MomentReport moment_report(const SampleBatch& samples, const std::optional<TargetMoments>& target) {
    if (samples.count() < 2) throw std::invalid_argument("moment_report: need at least 2 samples");
    const Layout layout = samples.layout();
    if (target && (target->mean.size() != layout.channels || target->variance.size() != layout.channels)) {
        throw std::invalid_argument("moment_report: target moments do not match channel count");
    }
    MomentReport report;
    for (std::size_t c = 0; c < layout.channels; ++c) {
        double mean = 0.0, m2 = 0.0;
        std::size_t n = 0;
        for (std::size_t s = 0; s < samples.count(); ++s) {
            for (std::size_t l = 0; l < layout.slots; ++l) {
                const double v = samples.at(s, c, l);
                ++n;
                const double d = v - mean;
                mean += d / static_cast<double>(n);
                m2 += d * (v - mean);
            }
        }
        ChannelMomentRow row;
        row.channel = c;
        row.n = n;
        row.mean = mean;
        row.variance = m2 / static_cast<double>(n - 1);
        row.mean_se = std::sqrt(row.variance / static_cast<double>(n));
        row.variance_se = row.variance * std::sqrt(2.0 / static_cast<double>(n - 1));
        if (target) {
            row.target_mean = target->mean[c];
            row.target_variance = target->variance[c];
            row.mean_delta = row.mean - target->mean[c];
            row.variance_delta = row.variance - target->variance[c];
        }
        report.channels.push_back(row);
    }
    return report;
}

namespace {

using Points = std::vector<std::span<const double>>;

Points capped_points(const SampleBatch& batch, std::size_t cap, std::uint64_t seed, std::uint64_t which) {
    Points pts;
    std::vector<std::size_t> idx(batch.count());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (cap > 0 && idx.size() > cap) {
        Rng rng(seed, "energy-cap", which);
        for (std::size_t i = 0; i < cap; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) pts.push_back(batch.sample(i));
    return pts;
}

double euclid(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double d = x[k] - y[k];
        s += d * d;
    }
    return std::sqrt(s);
}

// Pairwise distances over a pooled point set, answering within-group sums
// for any two-group labelling. One-dimensional data uses a sorted sweep;
// otherwise the upper triangle is stored in single precision.
class PooledDistances {
public:
    explicit PooledDistances(const Points& pts) : n_(pts.size()), one_dim_(!pts.empty() && pts[0].size() == 1) {
        if (one_dim_) {
            order_.resize(n_);
            std::iota(order_.begin(), order_.end(), std::size_t{0});
            std::stable_sort(order_.begin(), order_.end(),
                             [&](std::size_t a, std::size_t b) { return pts[a][0] < pts[b][0]; });
            sorted_.resize(n_);
            for (std::size_t k = 0; k < n_; ++k) sorted_[k] = pts[order_[k]][0];
        } else {
            tri_.reserve(n_ * (n_ - 1) / 2);
            for (std::size_t i = 0; i < n_; ++i) {
                for (std::size_t j = i + 1; j < n_; ++j) tri_.push_back(static_cast<float>(euclid(pts[i], pts[j])));
            }
        }
    }

    // Sum of d_ij over i < j with both labels equal to `group`, for both groups.
    std::pair<double, double> within_sums(const std::vector<unsigned char>& label) const {
        double s0 = 0.0, s1 = 0.0;
        if (one_dim_) {
            double prefix[2] = {0.0, 0.0};
            double count[2] = {0.0, 0.0};
            double sums[2] = {0.0, 0.0};
            for (std::size_t k = 0; k < n_; ++k) {
                const int g = label[order_[k]];
                const double z = sorted_[k];
                sums[g] += z * count[g] - prefix[g];
                prefix[g] += z;
                count[g] += 1.0;
            }
            return {sums[0], sums[1]};
        }
        std::size_t t = 0;
        for (std::size_t i = 0; i < n_; ++i) {
            const unsigned char li = label[i];
            double row0 = 0.0, row1 = 0.0;
            for (std::size_t j = i + 1; j < n_; ++j, ++t) {
                if (label[j] != li) continue;
                (li ? row1 : row0) += tri_[t];
            }
            s0 += row0;
            s1 += row1;
        }
        return {s0, s1};
    }

    double total() const {
        std::vector<unsigned char> all(n_, 0);
        return within_sums(all).first;
    }

private:
    std::size_t n_;
    bool one_dim_;
    std::vector<std::size_t> order_;
    std::vector<double> sorted_;
    std::vector<float> tri_;
};

double pair_mean(double sum, std::size_t n) {
    return n > 1 ? 2.0 * sum / (static_cast<double>(n) * static_cast<double>(n - 1)) : 0.0;
}

std::vector<unsigned char> initial_labels(std::size_t na, std::size_t nb) {
    std::vector<unsigned char> label(na + nb, 0);
    std::fill(label.begin() + static_cast<std::ptrdiff_t>(na), label.end(), 1);
    return label;
}

void require_compatible(const SampleBatch& a, const SampleBatch& b, const char* what) {
    if (a.count() == 0 || b.count() == 0) throw std::invalid_argument(std::string(what) + ": empty sample set");
    if (a.dim() != b.dim()) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

}  // namespace

EnergyDistanceResult energy_distance(const SampleBatch& a_in, const SampleBatch& b_in, const EnergyOptions& options) {
    require_compatible(a_in, b_in, "energy_distance");
    // Canonical argument order makes the computation symmetric bit for bit.
    const auto a_values = a_in.values();
    const auto b_values = b_in.values();
    int order = a_in.count() < b_in.count() ? -1 : (a_in.count() > b_in.count() ? 1 : 0);
    if (order == 0) {
        const auto cmp = std::lexicographical_compare_three_way(a_values.begin(), a_values.end(),
                                                                b_values.begin(), b_values.end());
        order = cmp < 0 ? -1 : (cmp > 0 ? 1 : 0);
    }
    if (order == 0) return {0.0, 1.0, a_in.count(), b_in.count()};
    const SampleBatch& a = order < 0 ? a_in : b_in;
    const SampleBatch& b = order < 0 ? b_in : a_in;

    Points pts = capped_points(a, options.cap, options.seed, 0);
    const std::size_t na = pts.size();
    Points pb = capped_points(b, options.cap, options.seed, 1);
    const std::size_t nb = pb.size();
    pts.insert(pts.end(), pb.begin(), pb.end());

    const PooledDistances dist(pts);
    const double total = dist.total();
    auto statistic = [&](const std::vector<unsigned char>& label) {
        const auto [saa, sbb] = dist.within_sums(label);
        const double sab = total - saa - sbb;
        return 2.0 * sab / (static_cast<double>(na) * static_cast<double>(nb)) - pair_mean(saa, na) -
               pair_mean(sbb, nb);
    };

    std::vector<unsigned char> label = initial_labels(na, nb);
    EnergyDistanceResult result;
    result.n_a = na;
    result.n_b = nb;
    result.distance = statistic(label);
    std::size_t ge = 0;
    for (std::size_t p = 0; p < options.permutations; ++p) {
        Rng rng(options.seed, "energy-perm", p);
        std::shuffle(label.begin(), label.end(), rng.engine());
        if (statistic(label) >= result.distance) ++ge;
    }
    result.p_value = static_cast<double>(1 + ge) / static_cast<double>(1 + options.permutations);
    return result;
}

EnergyDifferenceResult energy_distance_difference(const SampleBatch& a, const SampleBatch& b,
                                                  const SampleBatch& reference, const EnergyOptions& options) {
    require_compatible(a, b, "energy_distance_difference");
    require_compatible(a, reference, "energy_distance_difference");
    Points pts = capped_points(a, options.cap, options.seed, 0);
    const std::size_t na = pts.size();
    Points pb = capped_points(b, options.cap, options.seed, 1);
    const std::size_t nb = pb.size();
    pts.insert(pts.end(), pb.begin(), pb.end());
    const Points ref = capped_points(reference, options.cap, options.seed, 2);
    const double nr = static_cast<double>(ref.size());

    // Mean distance from each pooled point to the reference set.
    std::vector<double> to_ref(pts.size(), 0.0);
    if (pts[0].size() == 1) {
        std::vector<double> r(ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k) r[k] = ref[k][0];
        std::sort(r.begin(), r.end());
        std::vector<double> prefix(r.size() + 1, 0.0);
        for (std::size_t k = 0; k < r.size(); ++k) prefix[k + 1] = prefix[k] + r[k];
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double z = pts[i][0];
            const auto below = static_cast<std::size_t>(std::lower_bound(r.begin(), r.end(), z) - r.begin());
            const double lo = z * static_cast<double>(below) - prefix[below];
            const double hi = (prefix[r.size()] - prefix[below]) - z * static_cast<double>(r.size() - below);
            to_ref[i] = (lo + hi) / nr;
        }
    } else {
        for (std::size_t i = 0; i < pts.size(); ++i) {
            double s = 0.0;
            for (const auto& q : ref) s += euclid(pts[i], q);
            to_ref[i] = s / nr;
        }
    }

    const PooledDistances dist(pts);
    auto statistic = [&](const std::vector<unsigned char>& label) {
        const auto [saa, sbb] = dist.within_sums(label);
        double ta = 0.0, tb = 0.0;
        for (std::size_t i = 0; i < label.size(); ++i) (label[i] ? tb : ta) += to_ref[i];
        const double ed_a = 2.0 * ta / static_cast<double>(na) - pair_mean(saa, na);
        const double ed_b = 2.0 * tb / static_cast<double>(nb) - pair_mean(sbb, nb);
        return ed_a - ed_b;
    };

    std::vector<unsigned char> label = initial_labels(na, nb);
    EnergyDifferenceResult result;
    result.difference = statistic(label);
    std::size_t le = 0, ge = 0;
    for (std::size_t p = 0; p < options.permutations; ++p) {
        Rng rng(options.seed, "energy-diff-perm", p);
        std::shuffle(label.begin(), label.end(), rng.engine());
        const double d = statistic(label);
        if (d <= result.difference) ++le;
        if (d >= result.difference) ++ge;
    }
    const double denom = static_cast<double>(1 + options.permutations);
    result.p_lower = static_cast<double>(1 + le) / denom;
    result.p_upper = static_cast<double>(1 + ge) / denom;
    return result;
}

}  // namespace qdrift
