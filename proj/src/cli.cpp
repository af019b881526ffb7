#include "qdrift/cli.hpp"

#include "qdrift/calibration.hpp"
#include "qdrift/config.hpp"
#include "qdrift/diagnostics.hpp"
#include "qdrift/errors.hpp"
#include "qdrift/io.hpp"
#include "qdrift/metrics.hpp"
#include "qdrift/parallel.hpp"
#include "qdrift/samplers.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>

namespace qdrift {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
    std::string config_path;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
};

struct Context {
    ExperimentConfig config;
    fs::path out;
    unsigned threads = 1;
    std::uint64_t hash = 0;
};

Context load_context(const CommonOptions& opts) {
    Context ctx;
    const std::string text = read_file(opts.config_path);
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    ctx.config = config_from_json(doc);
    if (opts.seed) ctx.config.seed = *opts.seed;
    if (opts.out_dir) ctx.config.output_dir = *opts.out_dir;
    ctx.out = ctx.config.output_dir;
    ctx.threads = opts.threads ? std::max(1u, *opts.threads) : default_thread_count();
    ctx.hash = config_hash(ctx.config);
    return ctx;
}

json artifact_header(const Context& ctx) {
    return {{"schema_version", kSchemaVersion}, {"config_hash", hex64(ctx.hash)}, {"seed", ctx.config.seed}};
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---- calibrate ------------------------------------------------------------

int cmd_calibrate(const Context& ctx, std::ostream& out) {
    const ExperimentConfig& cfg = ctx.config;
    const NoiseSchedule schedule = cfg.schedule.build();
    CalibrationOptions opts;
    opts.runs = cfg.calibration_runs;
    opts.seed = cfg.seed;
    opts.family = cfg.family;
    opts.init = cfg.init;
    opts.threads = ctx.threads;
    CalibrationResult result = calibrate(cfg.distribution, cfg.injector, schedule, opts);

    CalibrationProvenance prov = result.table.provenance();
    prov.injector = to_json(cfg.injector).dump();
    const CalibrationTable table(result.table.schedule(), result.table.stats(), prov);

    write_json(ctx.out / "calibration.json", table_to_json(table, ctx.hash));
    write_file_atomic(ctx.out / "calibration_runs.qdrm",
                      encode_run_moments({std::move(result.per_run), ctx.hash, cfg.seed}));

    const DriftFactors& f = table.factors(cfg.family);
    out << "calibrated " << table.steps() << " steps x " << table.channels() << " channels, K=" << cfg.calibration_runs
        << "\nc_i (" << to_string(cfg.family) << "):";
    for (std::size_t k = 0; k < f.steps(); ++k) out << ' ' << fmt(f.scalar(k));
    out << '\n';
    return 0;
}

// ---- sample ---------------------------------------------------------------

int cmd_sample(const Context& ctx, const std::optional<std::string>& table_flag, std::ostream& out) {
    const ExperimentConfig& cfg = ctx.config;
    const NoiseSchedule schedule = cfg.schedule.build();
    std::optional<CalibrationTable> table;
    const bool needs_table = cfg.mode != SamplerMode::Baseline;
    const std::optional<std::string> table_path = table_flag ? table_flag : cfg.table;
    if (needs_table) {
        if (!table_path) {
            throw ConfigError(std::string("mode '") + to_string(cfg.mode) +
                              "' needs a calibration table (--table or config field 'table')");
        }
        table = table_from_json(read_json(*table_path));
        if (table->schedule_fingerprint() != schedule.fingerprint()) {
            throw ConfigError("calibration table was fitted on a different schedule");
        }
        if (table->channels() != cfg.distribution.layout().channels) {
            throw ConfigError("calibration table channel count does not match the distribution");
        }
    }

    SamplerRun run{schedule, cfg.family, cfg.mode, {}, cfg.seed, cfg.samples, cfg.init, cfg.channelwise, ctx.threads,
                   false};
    SamplerCorrections corrections;
    DriftFactors factors;
    if (table) {
        factors = cfg.channelwise ? table->factors(cfg.family) : table->factors(cfg.family).scalar_per_step();
        corrections.factors = &factors;
        corrections.bias = &table->bias();
    }
    const SamplerResult result = run_sampler(run, cfg.distribution, cfg.injector, corrections);

    write_samples(ctx.out / "samples.qdlb", result.samples);
    json meta = artifact_header(ctx);
    meta["family"] = to_string(cfg.family);
    meta["mode"] = to_string(cfg.mode);
    meta["init"] = to_string(cfg.init);
    meta["count"] = result.samples.count();
    meta["channels"] = result.samples.layout().channels;
    meta["slots"] = result.samples.layout().slots;
    meta["schedule"] = to_json(schedule);
    if (table_path && needs_table) meta["table"] = *table_path;
    json channels = json::array();
    for (const auto& row : moment_report(result.samples).channels) {
        channels.push_back({{"channel", row.channel}, {"mean", row.mean}, {"variance", row.variance}});
    }
    meta["moments"] = std::move(channels);
    write_json(ctx.out / "samples.json", meta);
    out << "sampled " << result.samples.count() << " latents (" << to_string(cfg.family) << ", "
        << to_string(cfg.mode) << ")\n";
    return 0;
}

// ---- evaluate -------------------------------------------------------------

int cmd_evaluate(const Context& ctx, const std::string& samples_path, const std::optional<std::string>& ref_path,
                 std::ostream& out) {
    const ExperimentConfig& cfg = ctx.config;
    const SampleBatch samples = read_samples(samples_path);
    if (samples.layout() != cfg.distribution.layout()) {
        throw ConfigError("sample file layout does not match the configured distribution");
    }
    if (!samples.all_finite()) throw NumericalError("sample file contains non-finite values");
    const bool analytic = !ref_path.has_value();
    SampleBatch reference;
    if (ref_path) {
        reference = read_samples(*ref_path);
        if (!reference.all_finite()) throw NumericalError("reference file contains non-finite values");
    } else {
        Rng rng(cfg.seed, "reference", 0);
        reference = cfg.distribution.sample_batch(samples.count(), rng);
    }
    const std::optional<TargetMoments> target =
        analytic ? std::optional<TargetMoments>(data_target_moments(cfg.distribution)) : std::nullopt;
    const MomentReport moments = moment_report(samples, target);
    const EnergyDistanceResult ed =
        energy_distance(samples, reference, {cfg.evaluation.permutations, cfg.seed, cfg.evaluation.cap});

    json doc = artifact_header(ctx);
    doc["samples"] = samples_path;
    doc["reference"] = ref_path ? json(*ref_path) : json("analytic");
    std::ostringstream csv;
    csv << "channel,n,mean,mean_se,variance,variance_se,target_mean,target_variance\n";
    json rows = json::array();
    for (const auto& r : moments.channels) {
        json row = {{"channel", r.channel}, {"n", r.n}, {"mean", r.mean}, {"mean_se", r.mean_se},
                    {"variance", r.variance}, {"variance_se", r.variance_se}};
        if (r.target_mean) {
            row["target_mean"] = *r.target_mean;
            row["target_variance"] = *r.target_variance;
            row["mean_delta"] = *r.mean_delta;
            row["variance_delta"] = *r.variance_delta;
        }
        rows.push_back(std::move(row));
        csv << r.channel << ',' << r.n << ',' << fmt(r.mean) << ',' << fmt(r.mean_se) << ',' << fmt(r.variance) << ','
            << fmt(r.variance_se) << ',' << (r.target_mean ? fmt(*r.target_mean) : "") << ','
            << (r.target_variance ? fmt(*r.target_variance) : "") << '\n';
    }
    doc["moments"] = std::move(rows);
    doc["energy_distance"] = {{"distance", ed.distance}, {"p_value", ed.p_value}, {"n_a", ed.n_a}, {"n_b", ed.n_b},
                              {"permutations", cfg.evaluation.permutations}};
    write_json(ctx.out / "evaluation.json", doc);
    write_file_atomic(ctx.out / "evaluation.csv", csv.str());
    out << "energy distance " << fmt(ed.distance) << " (p = " << fmt(ed.p_value) << ")\n";
    return 0;
}

// ---- stability ------------------------------------------------------------

int cmd_stability(const Context& ctx, const std::optional<std::string>& sidecar_flag, std::ostream& out) {
    const ExperimentConfig& cfg = ctx.config;
    const NoiseSchedule schedule = cfg.schedule.build();
    const fs::path sidecar = sidecar_flag ? fs::path(*sidecar_flag) : ctx.out / "calibration_runs.qdrm";
    if (!fs::exists(sidecar)) throw IoError("per-run moment sidecar not found: " + sidecar.string());
    const RunMomentsFile runs = decode_run_moments(read_file(sidecar));
    if (runs.moments.steps() != schedule.steps() || runs.moments.channels() != cfg.distribution.layout().channels) {
        throw ConfigError("moment sidecar shape does not match the configured schedule and distribution");
    }
    EnvelopeOptions opts{cfg.stability.sizes, cfg.stability.resamples, cfg.seed, cfg.family};
    const EnvelopeReport report = subsample_envelope(runs.moments, schedule, opts);

    std::ostringstream csv;
    csv << "K,step,sigma,min,median,max,reference\n";
    for (const auto& band : report.bands) {
        for (std::size_t k = 0; k < schedule.steps(); ++k) {
            csv << band.size << ',' << k << ',' << fmt(schedule.sigma(k)) << ',' << fmt(band.min[k]) << ','
                << fmt(band.median[k]) << ',' << fmt(band.max[k]) << ',' << fmt(report.reference[k]) << '\n';
        }
    }
    write_file_atomic(ctx.out / "envelope.csv", csv.str());

    json doc = artifact_header(ctx);
    doc["sidecar"] = sidecar.string();
    doc["sidecar_config_hash"] = hex64(runs.config_hash);
    doc["family"] = to_string(cfg.family);
    doc["reference"] = report.reference;
    json stress = json::array();
    for (const auto& s : report.stress) {
        const std::string name = "stress_K" + std::to_string(s.size) + "_" + to_string(s.kind) + ".json";
        CalibrationProvenance prov{s.runs.size(), runs.seed, cfg.family, to_json(cfg.injector).dump()};
        const CalibrationTable table(schedule, s.stats, prov);
        json tdoc = table_to_json(table, ctx.hash);
        tdoc["subset_runs"] = s.runs;
        write_json(ctx.out / name, tdoc);
        json c_row = json::array();
        for (std::size_t k = 0; k < table.steps(); ++k) c_row.push_back(table.factors(cfg.family).scalar(k));
        stress.push_back({{"K", s.size}, {"kind", to_string(s.kind)}, {"resample", s.resample}, {"score", s.score},
                          {"runs", s.runs}, {"c", std::move(c_row)}, {"table", name}});
    }
    doc["stress"] = std::move(stress);
    write_json(ctx.out / "stability.json", doc);
    out << "envelope over " << report.bands.size() << " subsample sizes x " << cfg.stability.resamples
        << " resamples written\n";
    return 0;
}

// ---- validate-assumptions -------------------------------------------------

int cmd_validate(const Context& ctx, std::ostream& out) {
    const ExperimentConfig& cfg = ctx.config;
    const NoiseSchedule schedule = cfg.schedule.build();
    const Layout layout = cfg.distribution.layout();
    const DiagnosticsSpec& ds = cfg.diagnostics;

    RetentionSpec keep;
    keep.timesteps = ds.timesteps.empty() ? default_diagnostic_timesteps(schedule.steps()) : ds.timesteps;
    keep.coordinates = ds.coordinates;
    if (keep.coordinates.empty()) {
        const std::size_t count = std::min(layout.dim(), std::max<std::size_t>(ds.max_coordinates, 2));
        for (std::size_t i = 0; i < count; ++i) keep.coordinates.push_back(i * layout.dim() / count);
    }
    CalibrationOptions opts;
    opts.runs = cfg.calibration_runs;
    opts.seed = cfg.seed;
    opts.family = cfg.family;
    opts.init = cfg.init;
    opts.threads = ctx.threads;
    opts.retention = keep;
    const CalibrationResult cal = calibrate(cfg.distribution, cfg.injector, schedule, opts);
    const RetainedSamples& kept = *cal.retained;
    const std::size_t n_samples = ds.samples == 0 ? kept.runs : std::min(ds.samples, kept.runs);
    const std::size_t m = kept.coordinates.size();

    std::ostringstream corr_csv, gauss_csv, iso_csv;
    corr_csv << "timestep,block,i,j,actual,shuffled\n";
    gauss_csv << "timestep,coordinate,variable,n,mean,variance,skewness,excess_kurtosis,cdf_distance,critical_value,"
                 "degenerate\n";
    iso_csv << "timestep,block,channel,mean,stddev,standard_error\n";
    json timesteps = json::array();
    for (std::size_t t = 0; t < kept.timesteps.size(); ++t) {
        const std::size_t step = kept.timesteps[t];
        json entry = {{"step", step}, {"sigma", schedule.sigma(step)}};
        const SampleMatrix output{kept.output[t], kept.runs, m};
        const SampleMatrix delta{kept.delta[t], kept.runs, m};
        json corr = json::object();
        for (DiagnosticBlock block : {DiagnosticBlock::QuantOutput, DiagnosticBlock::Error, DiagnosticBlock::Cross}) {
            const std::size_t space = block == DiagnosticBlock::Cross ? m * (m - 1) : m * (m - 1) / 2;
            const std::size_t pairs = std::min(ds.pairs, space);
            const CorrelationReport rep = offdiag_correlations(output, delta, block, pairs, n_samples, cfg.seed + step);
            for (std::size_t p = 0; p < rep.pairs.size(); ++p) {
                corr_csv << step << ',' << to_string(block) << ',' << kept.coordinates[rep.pairs[p].first] << ','
                         << kept.coordinates[rep.pairs[p].second] << ',' << fmt(rep.actual[p]) << ','
                         << fmt(rep.shuffled[p]) << '\n';
            }
            auto summary = [](const SummaryStats& s) {
                return json{{"mean", s.mean}, {"median", s.median}, {"p95", s.p95}};
            };
            corr[to_string(block)] = {{"pairs", rep.pairs.size()},
                                      {"actual", summary(rep.actual_summary)},
                                      {"shuffled", summary(rep.shuffled_summary)},
                                      {"ks_statistic", rep.ks_statistic},
                                      {"ks_critical", rep.ks_critical},
                                      {"indistinguishable", rep.indistinguishable()}};
        }
        entry["correlations"] = std::move(corr);

        std::size_t flagged_output = 0, flagged_delta = 0;
        for (std::size_t i = 0; i < m; ++i) {
            const auto o = kept.output_column(t, i);
            const auto d = kept.delta_column(t, i);
            const GaussianityReport g = gaussianity_summary(o, d, step, kept.coordinates[i]);
            for (const auto& [name, mg] : {std::pair{"eps_hat", &g.output}, std::pair{"delta", &g.delta}}) {
                gauss_csv << step << ',' << kept.coordinates[i] << ',' << name << ',' << mg->n << ',' << fmt(mg->mean)
                          << ',' << fmt(mg->variance) << ',' << fmt(mg->skewness) << ','
                          << fmt(mg->excess_kurtosis) << ',' << fmt(mg->cdf_distance) << ','
                          << fmt(mg->critical_value) << ',' << (mg->degenerate ? 1 : 0) << '\n';
            }
            flagged_output += g.output.non_gaussian() ? 1 : 0;
            flagged_delta += g.delta.non_gaussian() ? 1 : 0;
        }
        entry["gaussianity"] = {{"coordinates", m},
                                {"non_gaussian_eps_hat", flagged_output},
                                {"non_gaussian_delta", flagged_delta}};

        json iso = json::object();
        for (DiagnosticBlock block : {DiagnosticBlock::QuantOutput, DiagnosticBlock::Error, DiagnosticBlock::Cross}) {
            json rows = json::array();
            for (const auto& r : channel_isotropy_summary(kept.element_moments[t], layout, block)) {
                iso_csv << step << ',' << to_string(block) << ',' << r.channel << ',' << fmt(r.mean) << ','
                        << fmt(r.stddev) << ',' << fmt(r.standard_error) << '\n';
                rows.push_back({{"channel", r.channel}, {"mean", r.mean}, {"stddev", r.stddev},
                                {"standard_error", r.standard_error}});
            }
            iso[to_string(block)] = std::move(rows);
        }
        entry["isotropy"] = std::move(iso);
        timesteps.push_back(std::move(entry));
    }

    json doc = artifact_header(ctx);
    doc["runs"] = kept.runs;
    doc["samples_per_correlation"] = n_samples;
    doc["coordinates"] = kept.coordinates;
    doc["timesteps"] = std::move(timesteps);
    write_json(ctx.out / "assumptions.json", doc);
    write_file_atomic(ctx.out / "correlations.csv", corr_csv.str());
    write_file_atomic(ctx.out / "gaussianity.csv", gauss_csv.str());
    write_file_atomic(ctx.out / "isotropy.csv", iso_csv.str());
    out << "assumption reports written for " << kept.timesteps.size() << " timesteps\n";
    return 0;
}

void report_error(std::ostream& err, ExitCode code, const char* kind, const std::string& message) {
    err << json{{"error", {{"code", static_cast<int>(code)}, {"kind", kind}, {"message", message}}}}.dump() << '\n';
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quantization-aware drift correction for toy diffusion samplers", "qdrift"};
    app.require_subcommand(1);
    CommonOptions common;
    std::optional<std::string> table, sidecar, reference;
    std::string samples_path;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "experiment config (JSON)")->required();
        sub->add_option("--out", common.out_dir, "output directory (overrides config)");
        sub->add_option("--seed", common.seed, "master seed (overrides config)");
        sub->add_option("--threads", common.threads, "worker threads (overrides QDRIFT_THREADS)");
    };
    CLI::App* calibrate_cmd = app.add_subcommand("calibrate", "fit per-step statistics and drift factors");
    add_common(calibrate_cmd);
    CLI::App* sample_cmd = app.add_subcommand("sample", "draw samples with the configured sampler");
    add_common(sample_cmd);
    sample_cmd->add_option("--table", table, "calibration table JSON");
    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "moment and energy-distance report");
    add_common(evaluate_cmd);
    evaluate_cmd->add_option("--samples", samples_path, "sample file (QDLB)")->required();
    evaluate_cmd->add_option("--reference", reference, "reference sample file; default: the data distribution");
    CLI::App* stability_cmd = app.add_subcommand("stability", "nested-subsample envelope of the drift factors");
    add_common(stability_cmd);
    stability_cmd->add_option("--sidecar", sidecar, "per-run moment file; default: <out>/calibration_runs.qdrm");
    CLI::App* validate_cmd = app.add_subcommand("validate-assumptions", "Gaussianity, correlation and isotropy checks");
    add_common(validate_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        report_error(err, ExitCode::ConfigError, "usage", e.what());
        return static_cast<int>(ExitCode::ConfigError);
    }

    try {
        const Context ctx = load_context(common);
        if (calibrate_cmd->parsed()) return cmd_calibrate(ctx, out);
        if (sample_cmd->parsed()) return cmd_sample(ctx, table, out);
        if (evaluate_cmd->parsed()) return cmd_evaluate(ctx, samples_path, reference, out);
        if (stability_cmd->parsed()) return cmd_stability(ctx, sidecar, out);
        if (validate_cmd->parsed()) return cmd_validate(ctx, out);
    } catch (const ConfigError& e) {
        report_error(err, ExitCode::ConfigError, "config", e.what());
        return static_cast<int>(ExitCode::ConfigError);
    } catch (const IoError& e) {
        report_error(err, ExitCode::IoError, "io", e.what());
        return static_cast<int>(ExitCode::IoError);
    } catch (const NumericalError& e) {
        report_error(err, ExitCode::NumericalError, "numerical", e.what());
        return static_cast<int>(ExitCode::NumericalError);
    } catch (const std::invalid_argument& e) {
        report_error(err, ExitCode::ConfigError, "config", e.what());
        return static_cast<int>(ExitCode::ConfigError);
    } catch (const std::exception& e) {
        report_error(err, ExitCode::NumericalError, "numerical", e.what());
        return static_cast<int>(ExitCode::NumericalError);
    }
    return static_cast<int>(ExitCode::ConfigError);
}

}  // namespace qdrift
