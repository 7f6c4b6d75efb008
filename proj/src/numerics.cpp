#include "glassbox/numerics.hpp"

#include <numeric>

#include "glassbox/rng.hpp"

namespace glassbox {

template <typename T>
void softmax_inplace(std::span<T> values) {
  if (values.empty()) throw std::invalid_argument("empty logits");
  const T max_v = *std::max_element(values.begin(), values.end());
  T sum = T{0};
  for (T& v : values) {
    v = std::exp(v - max_v);
    sum += v;
  }
  const T inv = T{1} / sum;
  for (T& v : values) v *= inv;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  softmax_inplace<T>(out);
  return out;
}

template <typename T>
std::vector<T> log_softmax(std::span<const T> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  const T max_v = *std::max_element(logits.begin(), logits.end());
  T sum = T{0};
  for (T v : logits) sum += std::exp(v - max_v);
  const T log_z = max_v + std::log(sum);
  std::vector<T> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                          T eps) {
  if (x.size() != gain.size() || x.size() != bias.size()) {
    throw std::invalid_argument("layer_norm length mismatch: x=" + std::to_string(x.size()) +
                                " gain=" + std::to_string(gain.size()) +
                                " bias=" + std::to_string(bias.size()));
  }
  if (x.empty()) throw std::invalid_argument("layer_norm of empty vector");
  if (!(eps > T{0})) throw std::invalid_argument("layer_norm eps must be positive");
  const T n = static_cast<T>(x.size());
  T mean = T{0};
  for (T v : x) mean += v;
  mean /= n;
  T var = T{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T rstd = T{1} / std::sqrt(var + eps);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * ((x[i] - mean) * rstd) + bias[i];
  return out;
}

template <typename T>
void gemm(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* out_row = out + i * n;
    std::fill(out_row, out_row + n, T{0});
    const T* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_row[p];
      const T* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

template <typename T>
void gemm_at_b_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a_row = a + i * k;
    const T* b_row = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_row[p];
      if (av == T{0}) continue;
      T* out_row = out + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

template <typename T>
void gemm_a_bt(const T* a, const T* b, T* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a_row = a + i * n;
    for (std::size_t j = 0; j < k; ++j) {
      const T* b_row = b + j * n;
      T acc = T{0};
      for (std::size_t p = 0; p < n; ++p) acc += a_row[p] * b_row[p];
      out[i * k + j] = acc;
    }
  }
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul shape mismatch: " + a.shape_string() + " * " +
                                b.shape_string());
  }
  BasicMatrix<T> out(a.rows(), b.cols());
  gemm(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

FiniteDiffResult finite_diff_check(const std::function<double()>& loss,
                                   std::span<Matrix* const> params,
                                   std::span<const Matrix* const> analytic_grads,
                                   const FiniteDiffOptions& options) {
  if (params.size() != analytic_grads.size()) {
    throw std::invalid_argument("finite_diff_check: " + std::to_string(params.size()) +
                                " parameter tensors but " + std::to_string(analytic_grads.size()) +
                                " gradient tensors");
  }
  if (!(options.h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be positive");

  auto eval = [&loss]() {
    const double v = loss();
    if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: non-finite loss");
    return v;
  };

  FiniteDiffResult result;
  Rng rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    Matrix& param = *params[t];
    const Matrix& grad = *analytic_grads[t];
    if (!param.same_shape(grad)) {
      throw std::invalid_argument("finite_diff_check: tensor " + std::to_string(t) + " shape " +
                                  param.shape_string() + " vs gradient " + grad.shape_string());
    }
    std::vector<std::size_t> coords(param.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_tensor) {
      // Partial Fisher-Yates: the first max_coords entries become the sample.
      for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i) {
        const std::size_t j = i + rng.uniform_int(coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      double& slot = param.data()[idx];
      const double saved = slot;
      slot = saved + options.h;
      const double up = eval();
      slot = saved - options.h;
      const double down = eval();
      slot = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double analytic = grad.data()[idx];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      const double rel = std::abs(numeric - analytic) / denom;
      ++result.coords_checked;
      if (rel > result.max_relative_error || result.coords_checked == 1) {
        result.max_relative_error = rel;
        result.worst_tensor = t;
        result.worst_index = idx;
        result.worst_numeric = numeric;
        result.worst_analytic = analytic;
      }
    }
  }
  return result;
}

#define GLASSBOX_INSTANTIATE(T)                                                                  \
  template void softmax_inplace<T>(std::span<T>);                                               \
  template std::vector<T> softmax<T>(std::span<const T>);                                       \
  template std::vector<T> log_softmax<T>(std::span<const T>);                                   \
  template std::vector<T> layer_norm<T>(std::span<const T>, std::span<const T>,                 \
                                        std::span<const T>, T);                                 \
  template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);         \
  template void gemm_at_b_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
  template void gemm_a_bt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);    \
  template BasicMatrix<T> matmul<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

}  // namespace glassbox
