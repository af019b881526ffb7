#include "qdrift/schedule.hpp"

#include "qdrift/random.hpp"

#include <bit>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qdrift {

NoiseSchedule::NoiseSchedule(std::vector<double> sigmas, std::vector<double> alphas,
                             ScheduleKind kind)
    : sigmas_(std::move(sigmas)), alphas_(std::move(alphas)), kind_(kind) {
    if (sigmas_.size() < 2) throw std::invalid_argument("schedule needs at least one step");
    if (alphas_.size() != sigmas_.size()) {
        throw std::invalid_argument("schedule: sigmas and alphas differ in length");
    }
    const std::size_t last = sigmas_.size() - 1;
    for (std::size_t i = 0; i < sigmas_.size(); ++i) {
        const double s = sigmas_[i];
        const double a = alphas_[i];
        if (!std::isfinite(s) || !std::isfinite(a)) {
            throw std::invalid_argument("schedule: non-finite level at index " + std::to_string(i));
        }
        if (i < last ? !(s > 0.0) : !(s >= 0.0)) {
            throw std::invalid_argument("schedule: sigma must be positive before the terminal level");
        }
        if (!(a > 0.0)) throw std::invalid_argument("schedule: alphas must be strictly positive");
        if (kind_ == ScheduleKind::KarrasVE && a != 1.0) {
            throw std::invalid_argument("schedule: KarrasVE requires alpha = 1");
        }
        if (i > 0 && !(s < sigmas_[i - 1])) {
            throw std::invalid_argument("schedule: sigmas must be strictly decreasing");
        }
    }
}

NoiseSchedule NoiseSchedule::variance_exploding(std::vector<double> sigmas) {
    std::vector<double> alphas(sigmas.size(), 1.0);
    return NoiseSchedule(std::move(sigmas), std::move(alphas), ScheduleKind::KarrasVE);
}

std::uint64_t NoiseSchedule::fingerprint() const {
    std::uint64_t h = fnv1a64(kind_ == ScheduleKind::KarrasVE ? "karras_ve" : "log_snr");
    auto mix = [&h](double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    };
    for (double s : sigmas_) mix(s);
    for (double a : alphas_) mix(a);
    return h;
}

NoiseSchedule build_karras_schedule(double sigma_min, double sigma_max, std::size_t steps,
                                    double rho) {
    if (!std::isfinite(sigma_min) || !std::isfinite(sigma_max) || !std::isfinite(rho)) {
        throw std::invalid_argument("karras schedule: non-finite parameter");
    }
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) {
        throw std::invalid_argument("karras schedule: need 0 < sigma_min < sigma_max");
    }
    if (steps == 0) throw std::invalid_argument("karras schedule: steps must be >= 1");
    if (!(rho > 0.0)) throw std::invalid_argument("karras schedule: rho must be positive");

    std::vector<double> sigmas;
    sigmas.reserve(steps + 1);
    if (steps == 1) {
        sigmas.push_back(sigma_max);
    } else {
        const double hi = std::pow(sigma_max, 1.0 / rho);
        const double lo = std::pow(sigma_min, 1.0 / rho);
        const double denom = static_cast<double>(steps - 1);
        for (std::size_t i = 0; i < steps; ++i) {
            const double frac = static_cast<double>(i) / denom;
            sigmas.push_back(std::pow(hi + frac * (lo - hi), rho));
        }
        // Pin the endpoints against pow round-off.
        sigmas.front() = sigma_max;
        sigmas.back() = sigma_min;
    }
    sigmas.push_back(0.0);
    return NoiseSchedule::variance_exploding(std::move(sigmas));
}

NoiseSchedule to_variance_preserving(const NoiseSchedule& ve) {
    std::vector<double> sigmas;
    std::vector<double> alphas;
    for (std::size_t i = 0; i < ve.levels(); ++i) {
        const double bar = ve.sigma_bar(i);
        const double alpha = 1.0 / std::sqrt(1.0 + bar * bar);
        alphas.push_back(alpha);
        sigmas.push_back(alpha * bar);
    }
    return NoiseSchedule(std::move(sigmas), std::move(alphas), ScheduleKind::LogSNR);
}

NoiseSchedule to_rectified_flow(const NoiseSchedule& grid) {
    if (grid.kind() != ScheduleKind::KarrasVE) {
        throw std::invalid_argument("rectified flow: expects a plain sigma grid");
    }
    if (!(grid.sigma(0) < 1.0)) {
        throw std::invalid_argument("rectified flow: flow times must lie below 1");
    }
    std::vector<double> times(grid.sigmas().begin(), grid.sigmas().end());
    std::vector<double> alphas;
    for (double t : times) alphas.push_back(1.0 - t);
    return NoiseSchedule(std::move(times), std::move(alphas), ScheduleKind::LogSNR);
}

double delta_sigma(const NoiseSchedule& schedule, std::size_t i) {
    if (i >= schedule.steps()) throw std::out_of_range("delta_sigma: step index out of range");
    return schedule.sigma(i + 1) - schedule.sigma(i);
}

LogSnr logsnr_quantities(const NoiseSchedule& schedule, std::size_t i) {
    if (i >= schedule.levels()) throw std::out_of_range("logsnr: level index out of range");
    const double sigma = schedule.sigma(i);
    if (!(sigma > 0.0)) throw std::domain_error("logsnr: undefined at sigma = 0");
    const double bar = sigma / schedule.alpha(i);
    // Among lambda and its two neighbours keep the one whose exp(-lambda)
    // lands closest to sigma_bar, so the pair stays consistent to a few ulps.
    double lambda = -std::log(bar);
    double best = std::abs(std::exp(-lambda) - bar);
    for (double cand : {std::nextafter(lambda, -HUGE_VAL), std::nextafter(lambda, HUGE_VAL)}) {
        const double gap = std::abs(std::exp(-cand) - bar);
        if (gap < best) {
            best = gap;
            lambda = cand;
        }
    }
    return {lambda, bar};
}

}  // namespace qdrift
