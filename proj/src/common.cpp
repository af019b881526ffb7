#include "qdrift/parallel.hpp"
#include "qdrift/random.hpp"
#include "qdrift/sample_batch.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace qdrift {

SampleBatch::SampleBatch(std::size_t count, Layout layout, double fill)
    : count_(count), layout_(layout), values_(count * layout.dim(), fill) {}

SampleBatch::SampleBatch(std::size_t count, Layout layout, std::vector<double> values)
    : count_(count), layout_(layout), values_(std::move(values)) {
    if (values_.size() != count * layout.dim()) {
        throw std::invalid_argument("SampleBatch: value count does not match N*C*L");
    }
}

bool SampleBatch::all_finite() const {
    for (double v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void require_same_shape(const SampleBatch& a, const SampleBatch& b, const char* what) {
    if (a.count() != b.count() || a.layout() != b.layout()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t master, std::string_view label, std::uint64_t index) {
    const std::uint64_t tag = fnv1a64(label);
    return splitmix64(splitmix64(master ^ tag) + splitmix64(index + 0x632be59bd9b4e019ULL));
}

unsigned default_thread_count() {
    if (const char* env = std::getenv("QDRIFT_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<unsigned>(v);
        } catch (const std::exception&) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

}  // namespace qdrift
