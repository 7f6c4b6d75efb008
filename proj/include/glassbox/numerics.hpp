#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace glassbox {

// Dense row-major matrix. 64-bit instances carry the verification paths,
// 32-bit instances the training paths.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                  " does not match shape " + std::to_string(rows_) + "x" +
                                  std::to_string(cols_));
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void set_zero() { fill(T{0}); }

  bool same_shape(const BasicMatrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

// Max-subtracted softmax. Throws "empty logits" on empty input.
template <typename T>
std::vector<T> softmax(std::span<const T> logits);
template <typename T>
void softmax_inplace(std::span<T> values);
template <typename T>
std::vector<T> log_softmax(std::span<const T> logits);

inline std::vector<double> softmax(const std::vector<double>& logits) {
  return softmax<double>(std::span<const double>(logits));
}

// gain * (x - mean) / sqrt(var + eps) + bias with population variance.
template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                          T eps = T(1e-5));

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<double>& gain,
                                      const std::vector<double>& bias, double eps = 1e-5) {
  return layer_norm<double>(x, gain, bias, eps);
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

// Raw kernels used by the model; shapes are the caller's responsibility.
// out(m×n) = a(m×k) · b(k×n)   (overwrite)
template <typename T>
void gemm(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n);
// out(k×n) += a(m×k)ᵀ · b(m×n)
template <typename T>
void gemm_at_b_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n);
// out(m×k) = a(m×n) · b(k×n)ᵀ   (overwrite)
template <typename T>
void gemm_a_bt(const T* a, const T* b, T* out, std::size_t m, std::size_t n, std::size_t k);

// tanh-approximated GELU and its derivative.
template <typename T>
inline T gelu(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T inner = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}
template <typename T>
inline T gelu_grad(T x) {
  constexpr T c = T(0.7978845608028654);
  const T x2 = x * x;
  const T inner = c * (x + T(0.044715) * x2 * x);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x2);
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

struct FiniteDiffOptions {
  double h = 1e-3;
  // Tensors larger than this are checked on a random coordinate subsample.
  std::size_t max_coords_per_tensor = 64;
  std::uint64_t seed = 0x5eed;
};

struct FiniteDiffResult {
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_numeric = 0.0;
  double worst_analytic = 0.0;
};

// Central-difference gradient check. `loss` is re-evaluated after each
// in-place perturbation of a parameter coordinate; the parameter is restored
// afterwards. Relative error is |fd - an| / max(|fd|, |an|, 1e-8).
FiniteDiffResult finite_diff_check(const std::function<double()>& loss,
                                   std::span<Matrix* const> params,
                                   std::span<const Matrix* const> analytic_grads,
                                   const FiniteDiffOptions& options = {});

}  // namespace glassbox
