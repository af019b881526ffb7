#include "qdrift/config.hpp"

#include "qdrift/errors.hpp"
#include "qdrift/random.hpp"

#include <cstdio>

namespace qdrift {

using nlohmann::json;

namespace {

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        const json& v = j.at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
            throw ConfigError(where + "." + key + ": expected a non-negative integer");
        }
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback, const std::string& where) {
    return j.contains(key) ? field<T>(j, key, where) : fallback;
}

// A number broadcast over `n` channels, or an explicit list of n values.
std::vector<double> per_channel(const json& j, const char* key, std::size_t n, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
    const json& v = j.at(key);
    if (v.is_number()) return std::vector<double>(n, v.get<double>());
    auto out = field<std::vector<double>>(j, key, where);
    if (out.size() != n) {
        throw ConfigError(where + "." + key + ": expected " + std::to_string(n) + " values, got " +
                          std::to_string(out.size()));
    }
    return out;
}

void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

}  // namespace

const char* to_string(SchedulePath path) {
    switch (path) {
        case SchedulePath::VarianceExploding: return "ve";
        case SchedulePath::VariancePreserving: return "vp";
        case SchedulePath::RectifiedFlow: return "flow";
    }
    return "?";
}

SamplerFamily parse_family(const std::string& name) {
    if (name == "euler") return SamplerFamily::Euler;
    if (name == "flow") return SamplerFamily::FlowMatching;
    if (name == "dpmpp2m") return SamplerFamily::DpmPP2M;
    throw ConfigError("unknown sampler family '" + name + "' (euler | flow | dpmpp2m)");
}

SamplerMode parse_mode(const std::string& name) {
    if (name == "baseline") return SamplerMode::Baseline;
    if (name == "qdrift") return SamplerMode::QDrift;
    if (name == "bias_correct") return SamplerMode::BiasCorrect;
    if (name == "bias_correct_qdrift") return SamplerMode::BiasCorrectQDrift;
    throw ConfigError("unknown sampler mode '" + name + "'");
}

InitMode parse_init(const std::string& name) {
    if (name == "marginal") return InitMode::Marginal;
    if (name == "pure_noise") return InitMode::PureNoise;
    throw ConfigError("unknown init mode '" + name + "' (marginal | pure_noise)");
}

SchedulePath parse_path(const std::string& name) {
    if (name == "ve") return SchedulePath::VarianceExploding;
    if (name == "vp") return SchedulePath::VariancePreserving;
    if (name == "flow") return SchedulePath::RectifiedFlow;
    throw ConfigError("unknown schedule path '" + name + "' (ve | vp | flow)");
}

NoiseSchedule ScheduleSpec::build() const {
    try {
        NoiseSchedule grid = sigmas ? NoiseSchedule::variance_exploding(*sigmas)
                                    : build_karras_schedule(sigma_min, sigma_max, steps, rho);
        switch (path) {
            case SchedulePath::VarianceExploding: return grid;
            case SchedulePath::VariancePreserving: return to_variance_preserving(grid);
            case SchedulePath::RectifiedFlow: return to_rectified_flow(grid);
        }
        return grid;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
}

json to_json(const DataDistribution& dist) {
    json j;
    j["channels"] = dist.layout().channels;
    j["slots"] = dist.layout().slots;
    if (const auto* iso = std::get_if<IsotropicGaussian>(&dist.kind())) {
        j["kind"] = "isotropic_gaussian";
        j["scale"] = iso->scale;
    } else {
        const auto& mix = std::get<GaussianMixture>(dist.kind());
        j["kind"] = "gaussian_mixture";
        j["weights"] = mix.weights;
        j["means"] = mix.means;
        j["stds"] = mix.stds;
    }
    return j;
}

DataDistribution distribution_from_json(const json& j) {
    const std::string where = "distribution";
    require_object(j, where);
    const Layout layout{field<std::size_t>(j, "channels", where), field_or<std::size_t>(j, "slots", 1, where)};
    const auto kind = field<std::string>(j, "kind", where);
    try {
        if (kind == "isotropic_gaussian") {
            return DataDistribution(layout, IsotropicGaussian{per_channel(j, "scale", layout.channels, where)});
        }
        if (kind == "gaussian_mixture") {
            GaussianMixture mix{field<std::vector<double>>(j, "weights", where),
                                field<std::vector<std::vector<double>>>(j, "means", where),
                                field<std::vector<double>>(j, "stds", where)};
            return DataDistribution(layout, std::move(mix));
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    throw ConfigError(where + ".kind: unknown '" + kind + "' (isotropic_gaussian | gaussian_mixture)");
}

json to_json(const NoiseInjectorSpec& spec) {
    json j;
    if (std::holds_alternative<NoInjector>(spec.kind)) {
        j["kind"] = "none";
    } else if (const auto* bg = std::get_if<BitGridInjector>(&spec.kind)) {
        j["kind"] = "bit_grid";
        j["bits"] = bg->bits;
        j["range"] = bg->range;
    } else {
        const auto& jg = std::get<JointGaussianInjector>(spec.kind);
        j["kind"] = "joint_gaussian";
        json rows = json::array();
        for (const auto& row : jg.steps) {
            json r;
            r["mean"] = row.mean;
            r["stddev"] = row.stddev;
            r["rho"] = row.rho;
            if (row.clean_mean) r["clean_mean"] = *row.clean_mean;
            if (row.clean_stddev) r["clean_stddev"] = *row.clean_stddev;
            rows.push_back(std::move(r));
        }
        j["steps"] = std::move(rows);
    }
    return j;
}

NoiseInjectorSpec injector_from_json(const json& j, std::size_t steps, std::size_t channels) {
    const std::string where = "injector";
    require_object(j, where);
    const auto kind = field<std::string>(j, "kind", where);
    NoiseInjectorSpec spec{NoInjector{}};
    if (kind == "none") {
        return spec;
    } else if (kind == "bit_grid") {
        spec.kind = BitGridInjector{field_or<int>(j, "bits", 8, where), field_or<double>(j, "range", 1.0, where)};
    } else if (kind == "joint_gaussian") {
        JointGaussianInjector jg;
        if (j.contains("constant")) {
            const json& c = j.at("constant");
            const std::string w = where + ".constant";
            JointGaussianRow row{per_channel(c, "mean", channels, w), per_channel(c, "stddev", channels, w),
                                 per_channel(c, "rho", channels, w), std::nullopt, std::nullopt};
            jg.steps.assign(steps, row);
        } else {
            if (!j.contains("steps") || !j.at("steps").is_array()) {
                throw ConfigError(where + ": joint_gaussian needs 'constant' or a 'steps' array");
            }
            const json& rows = j.at("steps");
            for (std::size_t k = 0; k < rows.size(); ++k) {
                const json& r = rows[k];
                const std::string w = where + ".steps[" + std::to_string(k) + "]";
                require_object(r, w);
                JointGaussianRow row{per_channel(r, "mean", channels, w), per_channel(r, "stddev", channels, w),
                                     per_channel(r, "rho", channels, w), std::nullopt, std::nullopt};
                if (r.contains("clean_mean")) row.clean_mean = per_channel(r, "clean_mean", channels, w);
                if (r.contains("clean_stddev")) row.clean_stddev = per_channel(r, "clean_stddev", channels, w);
                jg.steps.push_back(std::move(row));
            }
        }
        spec.kind = std::move(jg);
    } else {
        throw ConfigError(where + ".kind: unknown '" + kind + "' (none | joint_gaussian | bit_grid)");
    }
    try {
        spec.validate(channels);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return spec;
}

json to_json(const ScheduleSpec& spec) {
    json j;
    j["path"] = to_string(spec.path);
    if (spec.sigmas) {
        j["sigmas"] = *spec.sigmas;
    } else {
        j["sigma_min"] = spec.sigma_min;
        j["sigma_max"] = spec.sigma_max;
        j["steps"] = spec.steps;
        j["rho"] = spec.rho;
    }
    return j;
}

ScheduleSpec schedule_spec_from_json(const json& j) {
    const std::string where = "schedule";
    require_object(j, where);
    ScheduleSpec spec;
    spec.path = parse_path(field_or<std::string>(j, "path", "ve", where));
    if (j.contains("sigmas")) {
        spec.sigmas = field<std::vector<double>>(j, "sigmas", where);
    } else {
        spec.sigma_min = field<double>(j, "sigma_min", where);
        spec.sigma_max = field<double>(j, "sigma_max", where);
        spec.steps = field<std::size_t>(j, "steps", where);
        spec.rho = field_or<double>(j, "rho", 7.0, where);
    }
    return spec;
}

json to_json(const NoiseSchedule& schedule) {
    json j;
    j["kind"] = schedule.kind() == ScheduleKind::KarrasVE ? "karras_ve" : "log_snr";
    j["sigmas"] = std::vector<double>(schedule.sigmas().begin(), schedule.sigmas().end());
    j["alphas"] = std::vector<double>(schedule.alphas().begin(), schedule.alphas().end());
    j["fingerprint"] = hex64(schedule.fingerprint());
    return j;
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["distribution"] = to_json(c.distribution);
    j["injector"] = to_json(c.injector);
    j["schedule"] = to_json(c.schedule);
    j["sampler"] = {{"family", to_string(c.family)},
                    {"mode", to_string(c.mode)},
                    {"init", to_string(c.init)},
                    {"channelwise", c.channelwise}};
    j["calibration_runs"] = c.calibration_runs;
    j["samples"] = c.samples;
    j["seed"] = c.seed;
    if (c.table) j["table"] = *c.table;
    j["evaluation"] = {{"permutations", c.evaluation.permutations}, {"cap", c.evaluation.cap}};
    j["stability"] = {{"sizes", c.stability.sizes}, {"resamples", c.stability.resamples}};
    j["diagnostics"] = {{"timesteps", c.diagnostics.timesteps},
                        {"coordinates", c.diagnostics.coordinates},
                        {"max_coordinates", c.diagnostics.max_coordinates},
                        {"pairs", c.diagnostics.pairs},
                        {"samples", c.diagnostics.samples}};
    j["output_dir"] = c.output_dir;
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    const std::string where = "config";
    require_object(j, where);
    ExperimentConfig c;
    c.schema_version = field_or<int>(j, "schema_version", kSchemaVersion, where);
    if (c.schema_version != kSchemaVersion) {
        throw ConfigError("config.schema_version: unsupported version " + std::to_string(c.schema_version));
    }
    if (!j.contains("distribution")) throw ConfigError("config: missing field 'distribution'");
    c.distribution = distribution_from_json(j.at("distribution"));
    if (!j.contains("schedule")) throw ConfigError("config: missing field 'schedule'");
    c.schedule = schedule_spec_from_json(j.at("schedule"));
    const NoiseSchedule schedule = c.schedule.build();
    if (j.contains("injector")) {
        c.injector = injector_from_json(j.at("injector"), schedule.steps(), c.distribution.layout().channels);
    }
    if (j.contains("sampler")) {
        const json& s = j.at("sampler");
        require_object(s, "sampler");
        c.family = parse_family(field_or<std::string>(s, "family", "euler", "sampler"));
        c.mode = parse_mode(field_or<std::string>(s, "mode", "baseline", "sampler"));
        c.init = parse_init(field_or<std::string>(s, "init", "marginal", "sampler"));
        c.channelwise = field_or<bool>(s, "channelwise", true, "sampler");
    }
    c.calibration_runs = field_or<std::size_t>(j, "calibration_runs", c.calibration_runs, where);
    c.samples = field_or<std::size_t>(j, "samples", c.samples, where);
    c.seed = field_or<std::uint64_t>(j, "seed", c.seed, where);
    if (j.contains("table")) c.table = field<std::string>(j, "table", where);
    if (j.contains("evaluation")) {
        const json& e = j.at("evaluation");
        c.evaluation.permutations = field_or<std::size_t>(e, "permutations", c.evaluation.permutations, "evaluation");
        c.evaluation.cap = field_or<std::size_t>(e, "cap", c.evaluation.cap, "evaluation");
    }
    if (j.contains("stability")) {
        const json& s = j.at("stability");
        c.stability.sizes = field_or<std::vector<std::size_t>>(s, "sizes", c.stability.sizes, "stability");
        c.stability.resamples = field_or<std::size_t>(s, "resamples", c.stability.resamples, "stability");
    }
    if (j.contains("diagnostics")) {
        const json& d = j.at("diagnostics");
        DiagnosticsSpec& ds = c.diagnostics;
        ds.timesteps = field_or<std::vector<std::size_t>>(d, "timesteps", ds.timesteps, "diagnostics");
        ds.coordinates = field_or<std::vector<std::size_t>>(d, "coordinates", ds.coordinates, "diagnostics");
        ds.max_coordinates = field_or<std::size_t>(d, "max_coordinates", ds.max_coordinates, "diagnostics");
        ds.pairs = field_or<std::size_t>(d, "pairs", ds.pairs, "diagnostics");
        ds.samples = field_or<std::size_t>(d, "samples", ds.samples, "diagnostics");
    }
    c.output_dir = field_or<std::string>(j, "output_dir", c.output_dir, where);
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    const NoiseSchedule sched = schedule.build();
    try {
        check_family_schedule(family, sched);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("sampler/schedule mismatch: ") + e.what());
    }
    try {
        injector.validate(distribution.layout().channels);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("injector: ") + e.what());
    }
    if (const auto* jg = std::get_if<JointGaussianInjector>(&injector.kind)) {
        if (jg->steps.size() != sched.steps()) {
            throw ConfigError("injector: " + std::to_string(jg->steps.size()) + " rows for a " +
                              std::to_string(sched.steps()) + "-step schedule");
        }
    }
    if (calibration_runs == 0) throw ConfigError("calibration_runs must be >= 1");
    if (samples == 0) throw ConfigError("samples must be >= 1");
    if (diagnostics.timesteps.size() > 3) throw ConfigError("diagnostics.timesteps: at most 3 entries");
    for (std::size_t t : diagnostics.timesteps) {
        if (t >= sched.steps()) throw ConfigError("diagnostics.timesteps: index out of range");
    }
    for (std::size_t coord : diagnostics.coordinates) {
        if (coord >= distribution.layout().dim()) throw ConfigError("diagnostics.coordinates: index out of range");
    }
    if (stability.resamples == 0) throw ConfigError("stability.resamples must be >= 1");
}

std::uint64_t config_hash(const ExperimentConfig& config) {
    // Where artifacts land does not change the experiment.
    json j = to_json(config);
    j.erase("output_dir");
    return fnv1a64(j.dump());
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace qdrift
