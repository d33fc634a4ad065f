#include "roidiff/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "roidiff/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "archive formats assume a little-endian host");

namespace roidiff {

void TensorArchive::put(const std::string& name, Tensor t) {
  for (size_t i = 0; i < order_.size(); ++i) {
    if (order_[i] == name) {
      tensors_[i] = std::move(t);
      return;
    }
  }
  order_.push_back(name);
  tensors_.push_back(std::move(t));
}

const Tensor& TensorArchive::get(const std::string& name) const {
  for (size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == name) return tensors_[i];
  throw CheckpointError("archive: missing tensor '" + name + "'");
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& n : order_)
    if (n == name) return true;
  return false;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format_version"] = kVersion;
  header["config"] = config.is_null() ? nlohmann::json::object() : config;
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < order_.size(); ++i) {
    nlohmann::json rec;
    rec["name"] = order_[i];
    rec["shape"] = tensors_[i].shape();
    rec["dtype"] = "f32";
    rec["offset"] = offset;
    tensors.push_back(std::move(rec));
    offset += tensors_[i].numel() * sizeof(float);
  }
  header["tensors"] = std::move(tensors);
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("archive: cannot open for writing: " + path.string());
  f.write("RTA1", 4);
  uint32_t ver = kVersion;
  uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&ver), 4);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : tensors_)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!f) throw CheckpointError("archive: write failed: " + path.string());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("archive: cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "RTA1", 4) != 0)
    throw CheckpointError("archive: bad magic in " + path.string());
  uint32_t ver = 0;
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&ver), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f) throw CheckpointError("archive: truncated header in " + path.string());
  if (ver != kVersion)
    throw CheckpointError("archive: unsupported format version " + std::to_string(ver));
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw CheckpointError("archive: truncated header json in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("archive: header parse error: ") + e.what());
  }
  if (header.value("format_version", 0u) != kVersion)
    throw CheckpointError("archive: header/container version mismatch");

  TensorArchive out;
  out.config = header.value("config", nlohmann::json::object());
  uint64_t expect_offset = 0;
  for (const auto& rec : header.at("tensors")) {
    std::string name = rec.at("name").get<std::string>();
    std::vector<long> shape = rec.at("shape").get<std::vector<long>>();
    if (rec.at("dtype").get<std::string>() != "f32")
      throw CheckpointError("archive: unsupported dtype for " + name);
    if (rec.at("offset").get<uint64_t>() != expect_offset)
      throw CheckpointError("archive: overlapping or out-of-order offsets at " + name);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw CheckpointError("archive: truncated blob at " + name);
    expect_offset += t.numel() * sizeof(float);
    out.put(name, std::move(t));
  }
  // blob length must match the index exactly
  f.peek();
  if (!f.eof()) throw CheckpointError("archive: trailing bytes after blob");
  return out;
}

}  // namespace roidiff
