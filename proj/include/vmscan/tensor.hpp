#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vmscan {

/// Dense row-major tensor of doubles with shape metadata. The universal
/// value type for activations, parameters and gradients.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<long> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<long> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<long>(data_.size()) != checked_size(shape_))
      throw std::invalid_argument("Tensor: data length does not match shape");
  }

  static Tensor full(std::vector<long> shape, double value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  long size() const { return static_cast<long>(data_.size()); }
  const std::vector<long>& shape() const { return shape_; }
  long rank() const { return static_cast<long>(shape_.size()); }
  long dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) {
    for (auto& x : data_) x = v;
  }

 private:
  static long checked_size(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  std::vector<long> shape_;
  std::vector<double> data_;
};

inline std::string shape_string(const std::vector<long>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace vmscan
