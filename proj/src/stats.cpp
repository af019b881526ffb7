#include "qdrift/stats.hpp"

#include <algorithm>

namespace qdrift {

void PairMoments::merge(const PairMoments& other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
        *this = other;
        return;
    }
    const double na = static_cast<double>(count_);
    const double nb = static_cast<double>(other.count_);
    const double n = na + nb;
    const double dx = other.mean_output_ - mean_output_;
    const double dy = other.mean_delta_ - mean_delta_;
    const double w = na * nb / n;
    m2_output_ += other.m2_output_ + dx * dx * w;
    m2_delta_ += other.m2_delta_ + dy * dy * w;
    co_moment_ += other.co_moment_ + dx * dy * w;
    mean_output_ += dx * (nb / n);
    mean_delta_ += dy * (nb / n);
    count_ += other.count_;
}

double PairMoments::var_output() const {
    return count_ < 2 ? 0.0 : std::max(0.0, m2_output_ / static_cast<double>(count_ - 1));
}

double PairMoments::var_delta() const {
    return count_ < 2 ? 0.0 : std::max(0.0, m2_delta_ / static_cast<double>(count_ - 1));
}

double PairMoments::covariance() const {
    return count_ < 2 ? 0.0 : co_moment_ / static_cast<double>(count_ - 1);
}

double PairMoments::conditional_variance() const {
    return qdrift::conditional_variance(var_output(), var_delta(), covariance());
}

double PairMoments::slope() const {
    const double v = var_output();
    return v > 0.0 ? covariance() / v : 0.0;
}

double conditional_variance(double var_output, double var_delta, double covariance) {
    if (!(var_output > 0.0)) return std::max(0.0, var_delta);
    const double v = var_delta - covariance * covariance / var_output;
    return std::clamp(v, 0.0, std::max(0.0, var_delta));
}

}  // namespace qdrift
