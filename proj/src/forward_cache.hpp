#pragma once

// Activations retained by the forward pass for reverse-mode differentiation.
// Internal to the library.

#include <vector>

#include "glassbox/model.hpp"

namespace glassbox::detail {

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct LayerCache {
  BasicMatrix<T> ln1_xhat;   // seq x d
  std::vector<T> ln1_rstd;   // seq
  BasicMatrix<T> ln1_out;
  BasicMatrix<T> q, k, v;    // seq x d
  std::vector<BasicMatrix<T>> attn;  // per head, seq x seq
  BasicMatrix<T> attn_mix;   // heads concatenated, before w_o
  BasicMatrix<T> ln2_xhat;
  std::vector<T> ln2_rstd;
  BasicMatrix<T> ln2_out;
  BasicMatrix<T> up_pre;     // seq x ffn
  BasicMatrix<T> up_act;
};

template <typename T>
struct ForwardCache {
  std::vector<BasicMatrix<T>> hidden;  // n_layers + 1 entries
  std::vector<LayerCache<T>> layers;
  BasicMatrix<T> final_xhat;
  std::vector<T> final_rstd;
  BasicMatrix<T> final_out;
  BasicMatrix<T> logits;
};

template <typename T>
ForwardCache<T> forward_cached(const ModelState<T>& model, const InputSequence& input);

// Row-wise layer norm over an m x n block; writes normalized values, the
// affine output and the per-row reciprocal standard deviation.
template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, std::size_t m, std::size_t n,
                     T* xhat, T* out, T* rstd);

}  // namespace glassbox::detail
