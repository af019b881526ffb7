#pragma once

#include "qdrift/calibration.hpp"
#include "qdrift/sample_batch.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace qdrift {

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partial file. Creates parent directories. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Pretty-printed JSON with a trailing newline, written atomically.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

// Sample batches: "QDLB", u32 version, u32 N, u32 C, u32 L, then N*C*L
// little-endian binary64 values (sample-major, channel-major, slot-minor).
inline constexpr std::uint32_t kSampleFormatVersion = 1;
std::string encode_samples(const SampleBatch& batch);
SampleBatch decode_samples(std::string_view bytes);
void write_samples(const std::filesystem::path& path, const SampleBatch& batch);
SampleBatch read_samples(const std::filesystem::path& path);

// Per-run moment sidecar: "QDRM", u32 version, u64 K, u32 M, u32 C,
// u64 config hash, u64 seed, then K*M*C records of
// (u64 n, f64 mean_output, f64 mean_delta, f64 m2_output, f64 m2_delta, f64 co_moment).
inline constexpr std::uint32_t kSidecarVersion = 1;
struct RunMomentsFile {
    RunMoments moments;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
};
std::string encode_run_moments(const RunMomentsFile& file);
RunMomentsFile decode_run_moments(std::string_view bytes);

// Calibration table document. `header` fields (config hash, seed) are
// embedded verbatim; reading recomputes every derived value from the raw
// moments and checks the stored schedule fingerprint.
nlohmann::json table_to_json(const CalibrationTable& table, std::uint64_t config_hash);
CalibrationTable table_from_json(const nlohmann::json& doc);

}  // namespace qdrift
