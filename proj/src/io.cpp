#include "qdrift/io.hpp"

#include "qdrift/config.hpp"
#include "qdrift/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>
#include <unistd.h>

namespace qdrift {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void write_file_atomic(const fs::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            fs::remove(tmp, ec);
            throw IoError("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignored;
        fs::remove(tmp, ignored);
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for " + path.string());
    return ss.str();
}

void write_json(const fs::path& path, const json& doc) { write_file_atomic(path, doc.dump(2) + "\n"); }

json read_json(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

namespace {

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(std::string_view bytes, const char* what) : bytes_(bytes), what_(what) {}

    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > bytes_.size()) throw IoError(std::string(what_) + ": truncated file");
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    void expect_magic(const char (&magic)[5]) {
        if (bytes_.size() < 4 || bytes_.substr(0, 4) != std::string_view(magic, 4)) {
            throw IoError(std::string(what_) + ": bad magic, expected " + magic);
        }
        pos_ = 4;
    }

    void expect_end() const {
        if (pos_ != bytes_.size()) throw IoError(std::string(what_) + ": trailing bytes");
    }

private:
    std::string_view bytes_;
    const char* what_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_samples(const SampleBatch& batch) {
    const Layout layout = batch.layout();
    std::string out = "QDLB";
    put<std::uint32_t>(out, kSampleFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(batch.count()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(layout.channels));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(layout.slots));
    out.reserve(out.size() + batch.values().size() * sizeof(double));
    for (double v : batch.values()) put<double>(out, v);
    return out;
}

SampleBatch decode_samples(std::string_view bytes) {
    Reader r(bytes, "sample file");
    r.expect_magic("QDLB");
    const auto version = r.get<std::uint32_t>();
    if (version != kSampleFormatVersion) throw IoError("sample file: unsupported version " + std::to_string(version));
    const auto n = r.get<std::uint32_t>();
    const auto c = r.get<std::uint32_t>();
    const auto l = r.get<std::uint32_t>();
    if (c == 0 || l == 0) throw IoError("sample file: zero channels or slots");
    const std::uint64_t total = std::uint64_t{n} * c * l;
    if (bytes.size() != 20 + total * sizeof(double)) throw IoError("sample file: size does not match header");
    std::vector<double> values(total);
    for (double& v : values) v = r.get<double>();
    r.expect_end();
    return SampleBatch(n, Layout{c, l}, std::move(values));
}

void write_samples(const fs::path& path, const SampleBatch& batch) { write_file_atomic(path, encode_samples(batch)); }

SampleBatch read_samples(const fs::path& path) { return decode_samples(read_file(path)); }

std::string encode_run_moments(const RunMomentsFile& file) {
    const RunMoments& m = file.moments;
    std::string out = "QDRM";
    put<std::uint32_t>(out, kSidecarVersion);
    put<std::uint64_t>(out, m.runs());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.steps()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.channels()));
    put<std::uint64_t>(out, file.config_hash);
    put<std::uint64_t>(out, file.seed);
    for (std::size_t r = 0; r < m.runs(); ++r) {
        for (std::size_t k = 0; k < m.steps(); ++k) {
            for (std::size_t c = 0; c < m.channels(); ++c) {
                const PairMoments& p = m.at(r, k, c);
                put<std::uint64_t>(out, p.count());
                put<double>(out, p.mean_output());
                put<double>(out, p.mean_delta());
                put<double>(out, p.m2_output());
                put<double>(out, p.m2_delta());
                put<double>(out, p.co_moment());
            }
        }
    }
    return out;
}

RunMomentsFile decode_run_moments(std::string_view bytes) {
    Reader r(bytes, "moment sidecar");
    r.expect_magic("QDRM");
    const auto version = r.get<std::uint32_t>();
    if (version != kSidecarVersion) throw IoError("moment sidecar: unsupported version " + std::to_string(version));
    const auto runs = r.get<std::uint64_t>();
    const auto steps = r.get<std::uint32_t>();
    const auto channels = r.get<std::uint32_t>();
    RunMomentsFile file;
    file.config_hash = r.get<std::uint64_t>();
    file.seed = r.get<std::uint64_t>();
    constexpr std::size_t kRecord = 8 + 5 * 8;
    if (bytes.size() != 40 + runs * steps * channels * kRecord) {
        throw IoError("moment sidecar: size does not match header");
    }
    file.moments = RunMoments(runs, steps, channels);
    for (std::size_t i = 0; i < runs; ++i) {
        for (std::size_t k = 0; k < steps; ++k) {
            for (std::size_t c = 0; c < channels; ++c) {
                const auto n = r.get<std::uint64_t>();
                const double mo = r.get<double>();
                const double md = r.get<double>();
                const double m2o = r.get<double>();
                const double m2d = r.get<double>();
                const double co = r.get<double>();
                file.moments.at(i, k, c) = PairMoments(n, mo, md, m2o, m2d, co);
            }
        }
    }
    r.expect_end();
    return file;
}

json table_to_json(const CalibrationTable& table, std::uint64_t config_hash) {
    json doc;
    doc["schema_version"] = kSchemaVersion;
    doc["config_hash"] = hex64(config_hash);
    doc["seed"] = table.provenance().seed;
    doc["schedule"] = to_json(table.schedule());
    json steps = json::array();
    for (std::size_t k = 0; k < table.steps(); ++k) {
        json channels = json::array();
        for (std::size_t c = 0; c < table.channels(); ++c) {
            const PairMoments& m = table.stats()[k][c];
            channels.push_back({{"n", m.count()},
                                {"mu_eps_hat", m.mean_output()},
                                {"mu_delta", m.mean_delta()},
                                {"m2_eps_hat", m.m2_output()},
                                {"m2_delta", m.m2_delta()},
                                {"co_moment", m.co_moment()},
                                {"var_eps_hat", m.var_output()},
                                {"var_delta", m.var_delta()},
                                {"cov", m.covariance()},
                                {"V", table.variance()[k][c]},
                                {"a", m.slope()}});
        }
        steps.push_back({{"index", k}, {"sigma", table.schedule().sigma(k)}, {"channels", std::move(channels)}});
    }
    doc["steps"] = std::move(steps);
    doc["factors"] = {{"euler", table.factors(SamplerFamily::Euler).rows},
                      {"flow", table.factors(SamplerFamily::FlowMatching).rows},
                      {"dpmpp2m", table.factors(SamplerFamily::DpmPP2M).rows}};
    const auto& prov = table.provenance();
    json injector = prov.injector.empty() ? json(nullptr) : json::parse(prov.injector);
    doc["provenance"] = {{"K", prov.runs}, {"seed", prov.seed}, {"family", to_string(prov.family)},
                         {"injector", std::move(injector)}};
    return doc;
}

CalibrationTable table_from_json(const json& doc) {
    try {
        if (doc.at("schema_version").get<int>() != kSchemaVersion) {
            throw IoError("calibration table: unsupported schema_version");
        }
        const json& s = doc.at("schedule");
        const auto kind = s.at("kind").get<std::string>() == "karras_ve" ? ScheduleKind::KarrasVE : ScheduleKind::LogSNR;
        NoiseSchedule schedule(s.at("sigmas").get<std::vector<double>>(), s.at("alphas").get<std::vector<double>>(),
                               kind);
        if (hex64(schedule.fingerprint()) != s.at("fingerprint").get<std::string>()) {
            throw IoError("calibration table: schedule fingerprint mismatch");
        }
        StepChannelStats stats;
        for (const json& step : doc.at("steps")) {
            std::vector<PairMoments> row;
            for (const json& c : step.at("channels")) {
                row.emplace_back(c.at("n").get<std::uint64_t>(), c.at("mu_eps_hat").get<double>(),
                                 c.at("mu_delta").get<double>(), c.at("m2_eps_hat").get<double>(),
                                 c.at("m2_delta").get<double>(), c.at("co_moment").get<double>());
            }
            stats.push_back(std::move(row));
        }
        const json& p = doc.at("provenance");
        CalibrationProvenance prov;
        prov.runs = p.at("K").get<std::uint64_t>();
        prov.seed = p.at("seed").get<std::uint64_t>();
        prov.family = parse_family(p.at("family").get<std::string>());
        prov.injector = p.at("injector").is_null() ? std::string{} : p.at("injector").dump();
        return CalibrationTable(std::move(schedule), std::move(stats), std::move(prov));
    } catch (const json::exception& e) {
        throw IoError(std::string("calibration table: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw IoError(std::string("calibration table: ") + e.what());
    }
}

}  // namespace qdrift
