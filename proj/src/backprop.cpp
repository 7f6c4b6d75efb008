// Label-smoothing objective and reverse-mode gradients through the model.

#include <cmath>
#include <stdexcept>

#include "forward_cache.hpp"
#include "glassbox/parallel.hpp"
#include "glassbox/training.hpp"

namespace glassbox {

void LossConfig::validate() const {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("label smoothing epsilon must lie in [0, 1), got " +
                                std::to_string(epsilon));
  }
}

double label_smoothing_nll(std::span<const double> probabilities, std::size_t target,
                           double epsilon) {
  if (probabilities.empty()) throw std::invalid_argument("empty distribution");
  if (target >= probabilities.size()) {
    throw std::invalid_argument("target class " + std::to_string(target) + " outside " +
                                std::to_string(probabilities.size()) + " classes");
  }
  const double C = static_cast<double>(probabilities.size());
  double uniform_term = 0.0;
  for (double p : probabilities) uniform_term += -std::log(p);
  return (1.0 - epsilon) * -std::log(probabilities[target]) + epsilon / C * uniform_term;
}

double label_smoothing_nll_from_logits(std::span<const double> logits, std::size_t target,
                                       double epsilon) {
  if (target >= logits.size()) {
    throw std::invalid_argument("target class " + std::to_string(target) + " outside " +
                                std::to_string(logits.size()) + " classes");
  }
  const auto logp = log_softmax<double>(logits);
  const double C = static_cast<double>(logits.size());
  double uniform_term = 0.0;
  for (double lp : logp) uniform_term += -lp;
  return (1.0 - epsilon) * -logp[target] + epsilon / C * uniform_term;
}

InputSequence training_sequence(const RenderedExample& example) {
  if (example.target.empty()) throw std::invalid_argument("example without target tokens");
  InputSequence seq = example.input;
  seq.quality_position.reset();
  for (std::size_t t = 0; t + 1 < example.target.size(); ++t) {
    seq.push_token(example.target[t], Segment::target);
  }
  return seq;
}

namespace {

template <typename T>
void layer_norm_backward(const T* dout, const T* xhat, const T* rstd, const T* gain,
                         std::size_t m, std::size_t n, T* dx_acc, T* dgain, T* dbias) {
  std::vector<T> dxhat(n);
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* dr = dout + i * n;
    const T* xr = xhat + i * n;
    T mean_d = T{0};
    T mean_dx = T{0};
    for (std::size_t j = 0; j < n; ++j) {
      dgain[j] += dr[j] * xr[j];
      dbias[j] += dr[j];
      dxhat[j] = dr[j] * gain[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xr[j];
    }
    mean_d *= inv_n;
    mean_dx *= inv_n;
    T* out = dx_acc + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
  }
}

template <typename T>
void add_colsum(const T* x, std::size_t m, std::size_t n, T* acc) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) acc[j] += x[i * n + j];
  }
}

// Loss of one sequence plus, when `grads` is non-null, its gradient scaled by
// `weight` accumulated into `grads`.
template <typename T>
std::optional<double> sequence_pass(const ModelState<T>& model, const RenderedExample& ex,
                                    const LossConfig& loss_cfg, double weight,
                                    ModelParams<T>* grads) {
  if (ex.loss_mask.size() != ex.target.size()) {
    throw std::invalid_argument("loss mask length differs from target length");
  }
  const std::size_t active = ex.supervised_count();
  if (active == 0) return std::nullopt;

  const InputSequence seq = training_sequence(ex);
  const auto& c = model.config;
  const auto& P = model.params;
  auto cache = detail::forward_cached(model, seq);

  const std::size_t S = seq.size();
  const std::size_t D = c.d_model;
  const std::size_t V = c.vocab_size;
  const std::size_t H = c.n_heads;
  const std::size_t hd = c.head_dim();
  const std::size_t F = c.d_ffn();
  const double eps = loss_cfg.epsilon;
  const double C = static_cast<double>(V);

  BasicMatrix<T> dlogits(S, V);
  double total = 0.0;
  std::vector<double> row(V);
  for (std::size_t t = 0; t < ex.target.size(); ++t) {
    if (!ex.loss_mask[t]) continue;
    const std::size_t pos = ex.input.size() - 1 + t;
    const auto y = ex.target[t];
    if (y < 0 || static_cast<std::size_t>(y) >= V) {
      throw std::invalid_argument("target token " + std::to_string(y) + " outside vocabulary");
    }
    const auto lrow = cache.logits.row(pos);
    std::copy(lrow.begin(), lrow.end(), row.begin());
    total += label_smoothing_nll_from_logits(row, static_cast<std::size_t>(y), eps);
    if (grads) {
      // d/dz of the smoothed NLL is softmax(z) minus the smoothed target.
      const auto p = softmax<double>(row);
      const double scale = weight / static_cast<double>(active);
      for (std::size_t v = 0; v < V; ++v) {
        double target_mass = eps / C;
        if (v == static_cast<std::size_t>(y)) target_mass += 1.0 - eps;
        dlogits(pos, v) = static_cast<T>(scale * (p[v] - target_mass));
      }
    }
  }
  const double loss = total / static_cast<double>(active);
  if (!std::isfinite(loss)) {
    throw std::runtime_error("non-finite loss for instance " + std::to_string(ex.instance_id) +
                             " (" + std::string(stage_name(ex.stage)) + ")");
  }
  if (!grads) return loss;
  ModelParams<T>& G = *grads;

  // Head and final norm.
  gemm_at_b_acc(cache.final_out.data(), dlogits.data(), G.head.data(), S, D, V);
  BasicMatrix<T> dnorm(S, D);
  gemm_a_bt(dlogits.data(), P.head.data(), dnorm.data(), S, V, D);
  BasicMatrix<T> dx(S, D);
  layer_norm_backward(dnorm.data(), cache.final_xhat.data(), cache.final_rstd.data(),
                      P.final_gain.data(), S, D, dx.data(), G.final_gain.data(),
                      G.final_bias.data());

  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  BasicMatrix<T> d_act(S, F), dn(S, D), dmix(S, D), dq(S, D), dk(S, D), dv(S, D), tmp(S, D);
  std::vector<T> dA(S);
  for (std::size_t l = c.n_layers; l-- > 0;) {
    const auto& W = P.layers[l];
    auto& GW = G.layers[l];
    const auto& lc = cache.layers[l];

    // Feed-forward branch: x_out = r + W_down gelu(W_up ln2(r) + b_up) + b_down.
    add_colsum(dx.data(), S, D, GW.b_down.data());
    gemm_at_b_acc(lc.up_act.data(), dx.data(), GW.w_down.data(), S, F, D);
    gemm_a_bt(dx.data(), W.w_down.data(), d_act.data(), S, D, F);
    for (std::size_t i = 0; i < S * F; ++i) d_act.data()[i] *= gelu_grad(lc.up_pre.data()[i]);
    add_colsum(d_act.data(), S, F, GW.b_up.data());
    gemm_at_b_acc(lc.ln2_out.data(), d_act.data(), GW.w_up.data(), S, D, F);
    gemm_a_bt(d_act.data(), W.w_up.data(), dn.data(), S, F, D);
    layer_norm_backward(dn.data(), lc.ln2_xhat.data(), lc.ln2_rstd.data(), W.ln2_gain.data(), S,
                        D, dx.data(), GW.ln2_gain.data(), GW.ln2_bias.data());

    // Attention branch: r = x + mix W_o.
    gemm_at_b_acc(lc.attn_mix.data(), dx.data(), GW.w_o.data(), S, D, D);
    gemm_a_bt(dx.data(), W.w_o.data(), dmix.data(), S, D, D);
    dq.set_zero();
    dk.set_zero();
    dv.set_zero();
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      const auto& A = lc.attn[h];
      for (std::size_t i = 0; i < S; ++i) {
        const T* gi = dmix.data() + i * D + off;
        T dot = T{0};
        for (std::size_t j = 0; j <= i; ++j) {
          const T* vj = lc.v.data() + j * D + off;
          T* dvj = dv.data() + j * D + off;
          const T a = A(i, j);
          T s = T{0};
          for (std::size_t e = 0; e < hd; ++e) {
            s += gi[e] * vj[e];
            dvj[e] += a * gi[e];
          }
          dA[j] = s;
          dot += a * s;
        }
        const T* qi = lc.q.data() + i * D + off;
        T* dqi = dq.data() + i * D + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = A(i, j) * (dA[j] - dot) * scale;
          if (ds == T{0}) continue;
          const T* kj = lc.k.data() + j * D + off;
          T* dkj = dk.data() + j * D + off;
          for (std::size_t e = 0; e < hd; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    gemm_at_b_acc(lc.ln1_out.data(), dq.data(), GW.w_q.data(), S, D, D);
    gemm_at_b_acc(lc.ln1_out.data(), dk.data(), GW.w_k.data(), S, D, D);
    gemm_at_b_acc(lc.ln1_out.data(), dv.data(), GW.w_v.data(), S, D, D);
    gemm_a_bt(dq.data(), W.w_q.data(), dn.data(), S, D, D);
    gemm_a_bt(dk.data(), W.w_k.data(), tmp.data(), S, D, D);
    for (std::size_t i = 0; i < S * D; ++i) dn.data()[i] += tmp.data()[i];
    gemm_a_bt(dv.data(), W.w_v.data(), tmp.data(), S, D, D);
    for (std::size_t i = 0; i < S * D; ++i) dn.data()[i] += tmp.data()[i];
    layer_norm_backward(dn.data(), lc.ln1_xhat.data(), lc.ln1_rstd.data(), W.ln1_gain.data(), S,
                        D, dx.data(), GW.ln1_gain.data(), GW.ln1_bias.data());
  }

  // Embeddings. Visual features reach parameters only through the projector.
  std::size_t slot = 0;
  for (std::size_t i = 0; i < S; ++i) {
    const auto g = dx.row(i);
    auto dpos = G.positional_embedding.row(i);
    for (std::size_t d = 0; d < D; ++d) dpos[d] += g[d];
    if (seq.is_visual(i)) {
      const auto& feature = seq.visual[slot++];
      for (std::size_t f = 0; f < c.d_visual; ++f) {
        const T x = static_cast<T>(feature[f]);
        auto w = G.visual_projector.row(f);
        for (std::size_t d = 0; d < D; ++d) w[d] += x * g[d];
      }
      for (std::size_t d = 0; d < D; ++d) G.visual_bias.data()[d] += g[d];
    } else {
      auto e = G.token_embedding.row(static_cast<std::size_t>(seq.tokens[i]));
      for (std::size_t d = 0; d < D; ++d) e[d] += g[d];
    }
  }
  return loss;
}

template <typename T>
void add_into(ModelParams<T>& acc, const ModelParams<T>& g) {
  std::vector<const BasicMatrix<T>*> src;
  g.visit([&src](const std::string&, const BasicMatrix<T>& m) { src.push_back(&m); });
  std::size_t k = 0;
  acc.visit([&](const std::string&, BasicMatrix<T>& m) {
    const auto& s = *src[k++];
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] += s.data()[i];
  });
}

template <typename T>
void zero_params(ModelParams<T>& p) {
  p.visit([](const std::string&, BasicMatrix<T>& m) { m.set_zero(); });
}

}  // namespace

template <typename T>
std::optional<double> sequence_loss(const ModelState<T>& model, const RenderedExample& example,
                                    const LossConfig& loss) {
  return sequence_pass<T>(model, example, loss, 0.0, nullptr);
}

template <typename T>
double batch_loss(const ModelState<T>& model, std::span<const RenderedExample> batch,
                  const LossConfig& loss) {
  loss.validate();
  if (batch.empty()) throw std::invalid_argument("empty batch");
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& ex : batch) {
    if (auto l = sequence_loss(model, ex, loss)) {
      total += *l;
      ++counted;
    }
  }
  if (counted == 0) throw std::invalid_argument("no supervised positions");
  return total / static_cast<double>(counted);
}

template <typename T>
LossAndGradients<T> loss_and_gradients(const ModelState<T>& model,
                                       std::span<const RenderedExample> batch,
                                       const LossConfig& loss) {
  loss.validate();
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::size_t counted = 0;
  for (const auto& ex : batch) counted += ex.supervised_count() > 0 ? 1 : 0;
  if (counted == 0) throw std::invalid_argument("no supervised positions");
  const double weight = 1.0 / static_cast<double>(counted);

  LossAndGradients<T> out{0.0, ModelParams<T>::zeros(model.config)};
  const std::size_t workers = std::min(worker_threads(), batch.size());
  // Fixed-size chunks of per-sample buffers keep memory bounded while the
  // reduction order stays the sample order.
  const std::size_t chunk = std::max<std::size_t>(workers, 1);
  std::vector<ModelParams<T>> buffers(chunk, ModelParams<T>::zeros(model.config));
  std::vector<std::optional<double>> losses(batch.size());
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t n = std::min(chunk, batch.size() - start);
    parallel_for(n, [&](std::size_t k) {
      zero_params(buffers[k]);
      losses[start + k] = sequence_pass<T>(model, batch[start + k], loss, weight, &buffers[k]);
    });
    for (std::size_t k = 0; k < n; ++k) {
      if (losses[start + k]) add_into(out.gradients, buffers[k]);
    }
  }
  for (const auto& l : losses) {
    if (l) out.loss += *l;
  }
  out.loss /= static_cast<double>(counted);
  return out;
}

#define GLASSBOX_INSTANTIATE(T)                                                               \
  template std::optional<double> sequence_loss<T>(const ModelState<T>&,                      \
                                                  const RenderedExample&, const LossConfig&); \
  template double batch_loss<T>(const ModelState<T>&, std::span<const RenderedExample>,      \
                                const LossConfig&);                                          \
  template LossAndGradients<T> loss_and_gradients<T>(                                        \
      const ModelState<T>&, std::span<const RenderedExample>, const LossConfig&);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

}  // namespace glassbox
