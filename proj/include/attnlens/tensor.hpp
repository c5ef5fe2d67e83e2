#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "attnlens/common.hpp"

namespace attnlens {

// Dense row-major tensor of 64-bit floats, rank 1 or 2.
// Rank-1 tensors behave as a single row where a matrix is expected.
class Tensor {
 public:
  bool requires_grad = false;

  Tensor() = default;

  // Zero-initialized matrix.
  Tensor(std::size_t rows, std::size_t cols)
      : rank_(2), rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  static Tensor vec(std::size_t n) {
    Tensor t;
    t.rank_ = 1;
    t.rows_ = 1;
    t.cols_ = n;
    t.data_.assign(n, 0.0);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t = vec(1);
    t.data_[0] = v;
    return t;
  }

  // Checked construction: rejects non-finite values and shape/data mismatch.
  static Tensor from(const std::vector<std::size_t>& shape, std::vector<double> data) {
    Tensor t;
    if (shape.size() == 1) {
      t.rank_ = 1;
      t.rows_ = 1;
      t.cols_ = shape[0];
    } else if (shape.size() == 2) {
      t.rank_ = 2;
      t.rows_ = shape[0];
      t.cols_ = shape[1];
    } else {
      throw ShapeError("Tensor::from: rank must be 1 or 2");
    }
    if (t.rows_ * t.cols_ != data.size())
      throw ShapeError("Tensor::from: shape does not match data length");
    for (double v : data)
      if (!std::isfinite(v)) throw NumericError("Tensor::from: non-finite value");
    t.data_ = std::move(data);
    return t;
  }

  static Tensor row(std::vector<double> data) {
    const std::size_t n = data.size();
    return from({n}, std::move(data));
  }

  std::size_t rank() const { return rank_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::vector<std::size_t> shape() const {
    if (rank_ == 1) return {cols_};
    return {rows_, cols_};
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Tensor& o) const {
    return rank_ == o.rank_ && rows_ == o.rows_ && cols_ == o.cols_;
  }

  bool finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor& fill(double v) {
    for (double& x : data_) x = v;
    return *this;
  }

  std::string shape_str() const {
    if (rank_ == 1) return "[" + std::to_string(cols_) + "]";
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

 private:
  std::size_t rank_ = 2;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double l2_norm(const double* p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += p[i] * p[i];
  return std::sqrt(s);
}

inline double l2_norm(const Tensor& t) { return l2_norm(t.raw(), t.size()); }

// Euclidean norm of each row of a matrix.
inline Tensor row_norms(const Tensor& m) {
  Tensor out = Tensor::vec(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = l2_norm(m.raw() + r * m.cols(), m.cols());
  return out;
}

inline bool approx_equal(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > tol) return false;
  return true;
}

}  // namespace attnlens
