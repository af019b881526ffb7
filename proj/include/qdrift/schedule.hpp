#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace qdrift {

enum class ScheduleKind { KarrasVE, LogSNR };

// Discrete noise levels sigma_0 > ... > sigma_M >= 0 with signal scales alpha_i.
//
// Step i moves from level i to level i+1, so a schedule with M+1 levels has
// M steps. Immutable after construction.
class NoiseSchedule {
public:
    // Validates the level invariants; throws std::invalid_argument on violation.
    NoiseSchedule(std::vector<double> sigmas, std::vector<double> alphas, ScheduleKind kind);
    // Variance-exploding schedule (all alphas are 1).
    static NoiseSchedule variance_exploding(std::vector<double> sigmas);

    std::size_t steps() const { return sigmas_.size() - 1; }
    std::size_t levels() const { return sigmas_.size(); }
    ScheduleKind kind() const { return kind_; }

    double sigma(std::size_t i) const { return sigmas_.at(i); }
    double alpha(std::size_t i) const { return alphas_.at(i); }
    // sigma_i / alpha_i; defined at the terminal level too (0 when sigma_M = 0).
    double sigma_bar(std::size_t i) const { return sigmas_.at(i) / alphas_.at(i); }

    std::span<const double> sigmas() const { return sigmas_; }
    std::span<const double> alphas() const { return alphas_; }

    // Hash of the kind and the exact bit patterns of every level.
    std::uint64_t fingerprint() const;

    bool operator==(const NoiseSchedule&) const = default;

private:
    std::vector<double> sigmas_;
    std::vector<double> alphas_;
    ScheduleKind kind_;
};

// rho-power interpolation between sigma_max and sigma_min over `steps` levels,
// followed by an explicit terminal level of 0.
NoiseSchedule build_karras_schedule(double sigma_min, double sigma_max, std::size_t steps,
                                    double rho = 7.0);

// Maps a variance-exploding grid (levels read as sigma_bar) onto the
// variance-preserving path alpha = 1/sqrt(1 + sigma_bar^2), sigma = alpha * sigma_bar.
NoiseSchedule to_variance_preserving(const NoiseSchedule& ve);

// Reads the levels of `grid` as flow times t in [0, 1) and builds the
// rectified-flow path x_t = (1 - t) x_0 + t z, i.e. alpha = 1 - t.
NoiseSchedule to_rectified_flow(const NoiseSchedule& grid);

// sigma_{i+1} - sigma_i (negative for decreasing schedules).
double delta_sigma(const NoiseSchedule& schedule, std::size_t i);

struct LogSnr {
    double lambda;
    double sigma_bar;
};

// lambda_i = log(alpha_i / sigma_i), sigma_bar_i = sigma_i / alpha_i.
// Throws std::domain_error at a level with sigma_i = 0.
LogSnr logsnr_quantities(const NoiseSchedule& schedule, std::size_t i);

}  // namespace qdrift
