#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "roidiff/model.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

// One manifest line. Diagnosis stays a string here; it is resolved to an id
// against a label set when a model consumes it.
struct ManifestEntry {
  std::string session_id;
  std::string path;  // relative to the manifest's directory unless absolute
  std::string state;
  std::optional<float> age;
  std::optional<int> sex;
  std::optional<std::string> diagnosis;
};

// RTS1 session file: magic "RTS1", little-endian u32 N, u32 T_total, then
// N*T_total little-endian float32, ROI-major.
void write_rts1(const std::filesystem::path& path, const Tensor& x /* {N,T} */);
Tensor read_rts1(const std::filesystem::path& path);

// JSON-lines manifest with fields session_id, path, state, age, sex, diagnosis.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& rows);

// Resolves the string diagnosis against a label set (throws on unknown labels).
MetadataRecord to_record(const ManifestEntry& e, const std::vector<std::string>& labels);

// Loads the session tensor for a manifest entry, resolving relative paths
// against the manifest's directory.
Tensor load_session(const ManifestEntry& e, const std::filesystem::path& manifest_path);

// Contiguous windows of length win at the given stride; the final partial
// window is dropped. stride <= 0 means stride = win.
std::vector<Tensor> window_stream(const Tensor& session /* {N,T_total} */, int win, int stride);

}  // namespace roidiff
