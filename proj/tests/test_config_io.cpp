#include <doctest.h>

#include <stdexcept>

#include "qdrift/config.hpp"
#include "qdrift/errors.hpp"
#include "qdrift/io.hpp"

#include <filesystem>
#include <fstream>

using namespace qdrift;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "qdrift_test_config_io";
    fs::create_directories(dir);
    return dir / name;
}

ExperimentConfig sample_config() {
    ExperimentConfig c;
    c.distribution = DataDistribution(
        Layout{2, 3}, GaussianMixture{{0.25, 0.75}, {std::vector<double>(6, -1.0), std::vector<double>(6, 2.0)}, {0.5, 1.0}});
    c.schedule.steps = 12;
    c.injector = constant_joint_gaussian(12, 2, 0.01, 0.1, 0.3);
    c.family = SamplerFamily::DpmPP2M;
    c.schedule.path = SchedulePath::VariancePreserving;
    c.mode = SamplerMode::QDrift;
    c.calibration_runs = 40;
    c.samples = 77;
    c.seed = 123456789012345ULL;
    c.table = "out/calibration.json";
    c.stability.sizes = {10, 3};
    c.diagnostics.coordinates = {0, 5};
    c.output_dir = "somewhere";
    return c;
}

}  // namespace

TEST_CASE("config survives a JSON round trip") {
    const auto c = sample_config();
    const auto j = to_json(c);
    const auto back = config_from_json(nlohmann::json::parse(j.dump()));
    CHECK(back == c);
    CHECK(config_hash(back) == config_hash(c));
    auto other = c;
    other.seed += 1;
    CHECK(config_hash(other) != config_hash(c));
    auto moved = c;
    moved.output_dir = "elsewhere";
    CHECK(config_hash(moved) == config_hash(c));
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

TEST_CASE("bit-grid and explicit sigma lists round trip") {
    ExperimentConfig c;
    c.injector = NoiseInjectorSpec{BitGridInjector{6, 2.5}};
    c.schedule.sigmas = std::vector<double>{5.0, 1.0, 0.1, 0.0};
    const auto back = config_from_json(to_json(c));
    CHECK(back == c);
    CHECK(back.schedule.build().steps() == 3);
}

TEST_CASE("config defaults fill optional fields") {
    const auto c = config_from_json(nlohmann::json::parse(
        R"({"schema_version": 1, "distribution": {"kind": "isotropic_gaussian", "channels": 1, "slots": 1, "scale": 1.0},
            "schedule": {"sigma_min": 0.02, "sigma_max": 10, "steps": 30}})"));
    CHECK(c == ExperimentConfig{});
    CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"schema_version": 1, "schedule": {}})")), ConfigError);
}

TEST_CASE("compact injector form broadcasts per channel and step") {
    const auto j = nlohmann::json::parse(R"({"kind":"joint_gaussian","constant":{"mean":0.1,"stddev":0.2,"rho":[0.0,0.5]}})");
    const auto spec = injector_from_json(j, 4, 2);
    const auto& jg = std::get<JointGaussianInjector>(spec.kind);
    REQUIRE(jg.steps.size() == 4);
    CHECK(jg.steps[3].mean == std::vector<double>{0.1, 0.1});
    CHECK(jg.steps[2].rho == std::vector<double>{0.0, 0.5});
}

TEST_CASE("invalid configurations are config errors") {
    // Each case patches one field of an otherwise valid document.
    const auto base = nlohmann::json::parse(
        R"({"distribution": {"kind": "isotropic_gaussian", "channels": 2, "slots": 1, "scale": 1.0},
            "schedule": {"sigma_min": 0.02, "sigma_max": 10, "steps": 5}})");
    CHECK_NOTHROW(config_from_json(base));
    auto bad = [&](const char* text) {
        auto doc = base;
        const auto patch = nlohmann::json::parse(text);
        if (!patch.is_object()) return config_from_json(patch);
        doc.merge_patch(patch);
        return config_from_json(doc);
    };
    CHECK_THROWS_AS(bad(R"({"schema_version": 2})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"sampler": {"family": "heun"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"sampler": {"mode": "fast"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"samples": -3})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"samples": 2.5})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"schedule": {"steps": null}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"schedule": {"sigma_min": 20, "sigma_max": 10}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"({"distribution": {"kind": "isotropic_gaussian", "channels": 2, "slots": 1, "scale": [1, 2, 3]}})"),
                    ConfigError);
    CHECK_THROWS_AS(bad(R"({"injector": {"kind": "bit_grid", "bits": 40, "range": 1}})"), ConfigError);
    // Euler runs on the variance-exploding path only
    CHECK_THROWS_AS(bad(R"({"sampler": {"family": "euler"}, "schedule": {"path": "vp"}})"), ConfigError);
    CHECK_THROWS_AS(bad(R"([1, 2])"), ConfigError);
}

TEST_CASE("atomic write replaces content and creates directories") {
    const fs::path p = scratch("nested/deeper/file.txt");
    fs::remove_all(p.parent_path());
    write_file_atomic(p, "first");
    write_file_atomic(p, "second");
    CHECK(read_file(p) == "second");
    for (const auto& e : fs::directory_iterator(p.parent_path())) CHECK(e.path().filename() == "file.txt");
    CHECK_THROWS_AS(read_file(scratch("missing.bin")), IoError);
}

TEST_CASE("json files: malformed input is an IO error") {
    const fs::path p = scratch("broken.json");
    write_file_atomic(p, "{ not json");
    CHECK_THROWS_AS(read_json(p), IoError);
    write_json(p, nlohmann::json{{"a", 1.5}});
    CHECK(read_json(p)["a"] == 1.5);
    CHECK(read_file(p).back() == '\n');
}

TEST_CASE("sample batches round trip through QDLB") {
    Rng rng(3);
    SampleBatch b(7, Layout{2, 5});
    for (double& v : b.values()) v = rng.normal() * 1e3;
    b.values()[0] = -0.0;
    b.values()[1] = 5e-324;
    const std::string bytes = encode_samples(b);
    CHECK(bytes.size() == 20 + 7 * 10 * 8);
    CHECK(bytes.substr(0, 4) == "QDLB");
    const auto back = decode_samples(bytes);
    CHECK(back == b);
    CHECK(std::signbit(back.values()[0]));

    const fs::path p = scratch("samples.qdlb");
    write_samples(p, b);
    CHECK(read_samples(p) == b);

    CHECK_THROWS_AS(decode_samples(bytes.substr(0, bytes.size() - 1)), IoError);
    std::string wrong = bytes;
    wrong[0] = 'X';
    CHECK_THROWS_AS(decode_samples(wrong), IoError);
}

TEST_CASE("run moment sidecar round trips") {
    RunMomentsFile f{RunMoments(3, 2, 2), 0x1122334455667788ULL, 99};
    Rng rng(5);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t c = 0; c < 2; ++c)
                for (int i = 0; i < 5; ++i) f.moments.at(r, k, c).add(rng.normal(), rng.normal());
    const std::string bytes = encode_run_moments(f);
    CHECK(bytes.size() == 40 + 12 * 48);
    const auto back = decode_run_moments(bytes);
    CHECK(back.moments == f.moments);
    CHECK(back.config_hash == f.config_hash);
    CHECK(back.seed == f.seed);
    CHECK_THROWS_AS(decode_run_moments(bytes.substr(0, 50)), IoError);
}

TEST_CASE("calibration table JSON round trip recomputes derived values") {
    const auto sched = to_variance_preserving(build_karras_schedule(0.02, 10.0, 4));
    StepChannelStats stats(4, std::vector<PairMoments>(2));
    Rng rng(8);
    for (auto& row : stats)
        for (auto& m : row)
            for (int i = 0; i < 20; ++i) {
                const double e = rng.normal();
                m.add(e, 0.3 * e + 0.1 * rng.normal());
            }
    const CalibrationTable table(sched, stats, {20, 7, SamplerFamily::DpmPP2M, R"({"kind":"none"})"});
    const auto doc = table_to_json(table, 0xfeedULL);
    CHECK(doc["config_hash"] == hex64(0xfeedULL));
    const auto back = table_from_json(nlohmann::json::parse(doc.dump()));
    CHECK(back == table);
    CHECK(back.factors(SamplerFamily::DpmPP2M) == table.factors(SamplerFamily::DpmPP2M));
    CHECK(back.variance() == table.variance());

    auto tampered = doc;
    tampered["schedule"]["fingerprint"] = hex64(1);
    CHECK_THROWS_AS(table_from_json(tampered), IoError);
    auto broken = doc;
    broken.erase("steps");
    CHECK_THROWS_AS(table_from_json(broken), IoError);
}
