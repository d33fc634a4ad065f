#include "roidiff/session_io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"
#include "roidiff/errors.hpp"

namespace roidiff {

void write_rts1(const std::filesystem::path& path, const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("write_rts1: expected {N,T}");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("rts1: cannot open for writing: " + path.string());
  uint32_t n = static_cast<uint32_t>(x.dim(0));
  uint32_t t = static_cast<uint32_t>(x.dim(1));
  f.write("RTS1", 4);
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(&t), 4);
  f.write(reinterpret_cast<const char*>(x.data()),
          static_cast<std::streamsize>(x.numel() * sizeof(float)));
  if (!f) throw CheckpointError("rts1: write failed: " + path.string());
}

Tensor read_rts1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("rts1: cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RTS1", 4) != 0)
    throw CheckpointError("rts1: bad magic in " + path.string());
  uint32_t n = 0, t = 0;
  f.read(reinterpret_cast<char*>(&n), 4);
  f.read(reinterpret_cast<char*>(&t), 4);
  if (!f || n == 0 || t == 0) throw CheckpointError("rts1: bad dimensions in " + path.string());
  Tensor x({static_cast<long>(n), static_cast<long>(t)});
  f.read(reinterpret_cast<char*>(x.data()),
         static_cast<std::streamsize>(x.numel() * sizeof(float)));
  if (!f) throw CheckpointError("rts1: truncated data in " + path.string());
  return x;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("manifest: cannot open: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("manifest: parse error at line " + std::to_string(lineno) + ": " +
                        e.what());
    }
    ManifestEntry e;
    e.session_id = j.at("session_id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    e.state = j.at("state").get<std::string>();
    if (j.contains("age") && !j["age"].is_null()) e.age = j["age"].get<float>();
    if (j.contains("sex") && !j["sex"].is_null()) e.sex = j["sex"].get<int>();
    if (j.contains("diagnosis") && !j["diagnosis"].is_null())
      e.diagnosis = j["diagnosis"].get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("manifest: cannot open for writing: " + path.string());
  for (const auto& e : rows) {
    nlohmann::json j;
    j["session_id"] = e.session_id;
    j["path"] = e.path;
    j["state"] = e.state;
    j["age"] = e.age ? nlohmann::json(*e.age) : nlohmann::json(nullptr);
    j["sex"] = e.sex ? nlohmann::json(*e.sex) : nlohmann::json(nullptr);
    j["diagnosis"] = e.diagnosis ? nlohmann::json(*e.diagnosis) : nlohmann::json(nullptr);
    f << j.dump() << "\n";
  }
}

MetadataRecord to_record(const ManifestEntry& e, const std::vector<std::string>& labels) {
  MetadataRecord rec;
  rec.age = e.age;
  rec.sex = e.sex;
  if (e.diagnosis) {
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == *e.diagnosis) {
        rec.diagnosis = static_cast<int>(i);
        break;
      }
    }
    if (!rec.diagnosis)
      throw ConfigError("manifest: diagnosis label '" + *e.diagnosis + "' not in label set");
  }
  return rec;
}

Tensor load_session(const ManifestEntry& e, const std::filesystem::path& manifest_path) {
  std::filesystem::path p(e.path);
  if (p.is_relative()) p = manifest_path.parent_path() / p;
  return read_rts1(p);
}

std::vector<Tensor> window_stream(const Tensor& session, int win, int stride) {
  if (session.rank() != 2) throw std::invalid_argument("window_stream: expected {N,T}");
  const long n = session.dim(0), total = session.dim(1);
  if (win <= 0 || win > total)
    throw std::invalid_argument("window_stream: window must be in [1, T_total]");
  if (stride <= 0) stride = win;
  std::vector<Tensor> out;
  for (long start = 0; start + win <= total; start += stride) {
    Tensor w({n, win});
    for (long r = 0; r < n; ++r)
      std::memcpy(w.data() + r * win, session.data() + r * total + start,
                  sizeof(float) * static_cast<size_t>(win));
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace roidiff
