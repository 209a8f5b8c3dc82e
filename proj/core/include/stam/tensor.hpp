#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "stam/errors.hpp"

namespace stam {

/// Dense row-major tensor of real values. Rank is arbitrary but the model
/// only ever builds rank-1/rank-2 tensors. Element type is float for the
/// training/inference builds and double for gradient-check paths.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape, S fill = S(0))
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(std::vector<int64_t> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != static_cast<int64_t>(data_.size())) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str());
    }
  }

  /// 2-D convenience: rows given as nested initializer lists.
  static Tensor matrix(std::initializer_list<std::initializer_list<S>> rows) {
    int64_t r = static_cast<int64_t>(rows.size());
    int64_t c = r > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
    Tensor t({r, c});
    int64_t i = 0;
    for (const auto& row : rows) {
      if (static_cast<int64_t>(row.size()) != c) {
        throw ShapeError("ragged matrix initializer");
      }
      for (S v : row) t.data_[i++] = v;
    }
    return t;
  }

  static Tensor row(std::initializer_list<S> vals) {
    Tensor t({1, static_cast<int64_t>(vals.size())});
    int64_t i = 0;
    for (S v : vals) t.data_[i++] = v;
    return t;
  }

  static Tensor scalar(S v) {
    Tensor t({1, 1});
    t.data_[0] = v;
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  int64_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : dim_error()); }
  int64_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : dim_error()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
  S operator()(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw ShapeError("negative dimension in tensor shape");
      n *= d;
    }
    return n;
  }
  [[noreturn]] int64_t dim_error() const {
    throw ShapeError("tensor " + shape_str() + " used where a matrix was expected");
  }

  std::vector<int64_t> shape_;
  std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace stam
