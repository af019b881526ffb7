#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace qdrift {

// Latent layout: C channels, each holding L spatial slots.
struct Layout {
    std::size_t channels = 1;
    std::size_t slots = 1;

    std::size_t dim() const { return channels * slots; }
    bool operator==(const Layout&) const = default;
};

// N samples of a C x L latent, stored sample-major, channel-major, slot-minor.
class SampleBatch {
public:
    SampleBatch() = default;
    SampleBatch(std::size_t count, Layout layout, double fill = 0.0);
    SampleBatch(std::size_t count, Layout layout, std::vector<double> values);

    std::size_t count() const { return count_; }
    const Layout& layout() const { return layout_; }
    std::size_t dim() const { return layout_.dim(); }

    std::span<double> sample(std::size_t n) { return {values_.data() + n * dim(), dim()}; }
    std::span<const double> sample(std::size_t n) const {
        return {values_.data() + n * dim(), dim()};
    }

    double& at(std::size_t n, std::size_t c, std::size_t l) {
        return values_[(n * layout_.channels + c) * layout_.slots + l];
    }
    double at(std::size_t n, std::size_t c, std::size_t l) const {
        return values_[(n * layout_.channels + c) * layout_.slots + l];
    }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool all_finite() const;

    bool operator==(const SampleBatch&) const = default;

private:
    std::size_t count_ = 0;
    Layout layout_{};
    std::vector<double> values_;
};

// Throws std::invalid_argument unless both batches have the same count and layout.
void require_same_shape(const SampleBatch& a, const SampleBatch& b, const char* what);

}  // namespace qdrift
