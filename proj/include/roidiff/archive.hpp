#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "roidiff/tensor.hpp"

namespace roidiff {

// Tensor archive: magic "RTA1", u32 format version, u64 header length, a
// JSON header ({format_version, config, tensors:[{name, shape, dtype,
// offset}]}), then one contiguous little-endian float32 blob. Offsets are
// byte positions into the blob. save/load round-trips are bitwise identical.
class TensorArchive {
 public:
  static constexpr uint32_t kVersion = 1;

  void put(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  nlohmann::json config;  // free-form payload stored in the header

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
};

}  // namespace roidiff
