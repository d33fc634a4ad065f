#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace roidiff {

// Dense row-major float32 array. Shapes are small (rank <= 4), storage is
// contiguous, and everything heavier than indexing lives in free functions
// that work on raw pointers.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), 0.0f);
  }
  Tensor(std::vector<long> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel_of(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

  const std::vector<long>& shape() const { return shape_; }
  long dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return data_.size(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& at(std::initializer_list<long> idx) { return data_[offset(idx)]; }
  float at(std::initializer_list<long> idx) const { return data_[offset(idx)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static size_t numel_of(const std::vector<long>& shape) {
    size_t n = 1;
    for (long d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return n;
  }

 private:
  size_t offset(std::initializer_list<long> idx) const {
    if (idx.size() != shape_.size())
      throw std::invalid_argument("Tensor: index rank mismatch");
    size_t off = 0;
    auto it = idx.begin();
    for (size_t i = 0; i < shape_.size(); ++i, ++it) {
      if (*it < 0 || *it >= shape_[i]) throw std::out_of_range("Tensor: index out of range");
      off = off * static_cast<size_t>(shape_[i]) + static_cast<size_t>(*it);
    }
    return off;
  }

  std::vector<long> shape_;
  std::vector<float> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const std::string& where) {
  if (!a.same_shape(b)) throw std::invalid_argument(where + ": shape mismatch");
}

}  // namespace roidiff
