#pragma once

#include "qdrift/samplers.hpp"
#include "qdrift/schedule.hpp"
#include "qdrift/toymodel.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace qdrift {

inline constexpr int kSchemaVersion = 1;

// Sampling path built on top of a sigma grid.
enum class SchedulePath { VarianceExploding, VariancePreserving, RectifiedFlow };

// Either an explicit sigma list or a Karras (sigma_min, sigma_max, steps, rho) tuple.
struct ScheduleSpec {
    SchedulePath path = SchedulePath::VarianceExploding;
    std::optional<std::vector<double>> sigmas;
    double sigma_min = 0.02;
    double sigma_max = 10.0;
    std::size_t steps = 30;
    double rho = 7.0;

    NoiseSchedule build() const;
    bool operator==(const ScheduleSpec&) const = default;
};

struct EvaluationSpec {
    std::size_t permutations = 199;
    std::size_t cap = 4000;
    bool operator==(const EvaluationSpec&) const = default;
};

struct StabilitySpec {
    std::vector<std::size_t> sizes{50, 10, 5, 1};
    std::size_t resamples = 200;
    bool operator==(const StabilitySpec&) const = default;
};

struct DiagnosticsSpec {
    std::vector<std::size_t> timesteps;    // empty: nearest to 0.9T, 0.5T, 0.1T
    std::vector<std::size_t> coordinates;  // empty: evenly spaced, up to max_coordinates
    std::size_t max_coordinates = 64;
    std::size_t pairs = 1000;
    std::size_t samples = 0;  // 0: every calibration run
    bool operator==(const DiagnosticsSpec&) const = default;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    DataDistribution distribution{Layout{1, 1}, IsotropicGaussian{{1.0}}};
    NoiseInjectorSpec injector{NoInjector{}};
    ScheduleSpec schedule;
    SamplerFamily family = SamplerFamily::Euler;
    SamplerMode mode = SamplerMode::Baseline;
    InitMode init = InitMode::Marginal;
    bool channelwise = true;
    std::size_t calibration_runs = 100;  // K
    std::size_t samples = 1000;          // N
    std::uint64_t seed = 0;
    std::optional<std::string> table;  // calibration table for correction modes
    EvaluationSpec evaluation;
    StabilitySpec stability;
    DiagnosticsSpec diagnostics;
    std::string output_dir = "out";

    // Cross-field checks (dimensions, step counts, family vs path); throws ConfigError.
    void validate() const;
    bool operator==(const ExperimentConfig&) const = default;
};

const char* to_string(SchedulePath path);
SamplerFamily parse_family(const std::string& name);
SamplerMode parse_mode(const std::string& name);
InitMode parse_init(const std::string& name);
SchedulePath parse_path(const std::string& name);

// JSON forms. Parsing throws ConfigError with the offending field named.
nlohmann::json to_json(const DataDistribution& dist);
DataDistribution distribution_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NoiseInjectorSpec& spec);
// `steps` and `channels` expand the compact {"constant": ...} form.
NoiseInjectorSpec injector_from_json(const nlohmann::json& j, std::size_t steps, std::size_t channels);
nlohmann::json to_json(const ScheduleSpec& spec);
ScheduleSpec schedule_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NoiseSchedule& schedule);

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);

// FNV-1a of the canonical (sorted-key) serialization.
std::uint64_t config_hash(const ExperimentConfig& config);
std::string hex64(std::uint64_t value);

}  // namespace qdrift
