#include "glassbox/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "forward_cache.hpp"

namespace glassbox {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid model config: " + what);
  };
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_visual >= 1, "d_visual must be >= 1");
  require(max_seq_len >= 1, "max_seq_len must be >= 1");
  require(ffn_mult >= 1, "ffn_mult must be >= 1");
  require(d_model % n_heads == 0, "d_model (" + std::to_string(d_model) +
                                      ") not divisible by n_heads (" + std::to_string(n_heads) +
                                      ")");
}

std::string_view segment_name(Segment s) noexcept {
  switch (s) {
    case Segment::special: return "special";
    case Segment::image: return "image";
    case Segment::prompt: return "prompt";
    case Segment::description: return "description";
    case Segment::target: return "target";
  }
  return "unknown";
}

void InputSequence::push_token(TokenId id, Segment segment) {
  tokens.push_back(id);
  segments.push_back(segment);
}

void InputSequence::push_visual(std::vector<double> feature) {
  tokens.push_back(kVisualSlot);
  segments.push_back(Segment::image);
  visual.push_back(std::move(feature));
}

void InputSequence::validate(const ModelConfig& config) const {
  if (tokens.empty()) throw std::invalid_argument("empty input sequence");
  if (tokens.size() > config.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  if (segments.size() != tokens.size()) {
    throw std::invalid_argument("segment markers do not cover the sequence");
  }
  std::size_t slots = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t == kVisualSlot) {
      if (slots >= visual.size()) throw std::invalid_argument("visual slot without a feature");
      if (visual[slots].size() != config.d_visual) {
        throw std::invalid_argument("visual feature length " +
                                    std::to_string(visual[slots].size()) + " != d_visual " +
                                    std::to_string(config.d_visual));
      }
      ++slots;
    } else if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(config.vocab_size));
    }
  }
  if (slots != visual.size()) throw std::invalid_argument("unused visual features");
  if (quality_position && *quality_position >= tokens.size()) {
    throw std::invalid_argument("quality position outside sequence");
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn();
  ModelParams<T> p;
  p.token_embedding = BasicMatrix<T>(c.vocab_size, d);
  p.positional_embedding = BasicMatrix<T>(c.max_seq_len, d);
  p.visual_projector = BasicMatrix<T>(c.d_visual, d);
  p.visual_bias = BasicMatrix<T>(1, d);
  p.layers.resize(c.n_layers);
  for (auto& L : p.layers) {
    L.ln1_gain = BasicMatrix<T>(1, d);
    L.ln1_bias = BasicMatrix<T>(1, d);
    L.w_q = BasicMatrix<T>(d, d);
    L.w_k = BasicMatrix<T>(d, d);
    L.w_v = BasicMatrix<T>(d, d);
    L.w_o = BasicMatrix<T>(d, d);
    L.ln2_gain = BasicMatrix<T>(1, d);
    L.ln2_bias = BasicMatrix<T>(1, d);
    L.w_up = BasicMatrix<T>(d, f);
    L.b_up = BasicMatrix<T>(1, f);
    L.w_down = BasicMatrix<T>(f, d);
    L.b_down = BasicMatrix<T>(1, d);
  }
  p.final_gain = BasicMatrix<T>(1, d);
  p.final_bias = BasicMatrix<T>(1, d);
  p.head = BasicMatrix<T>(d, c.vocab_size);
  return p;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  visit([&n](const std::string&, const BasicMatrix<T>& m) { n += m.size(); });
  return n;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.token_embedding = token_embedding.template cast<U>();
  out.positional_embedding = positional_embedding.template cast<U>();
  out.visual_projector = visual_projector.template cast<U>();
  out.visual_bias = visual_bias.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& a = layers[l];
    auto& b = out.layers[l];
    b.ln1_gain = a.ln1_gain.template cast<U>();
    b.ln1_bias = a.ln1_bias.template cast<U>();
    b.w_q = a.w_q.template cast<U>();
    b.w_k = a.w_k.template cast<U>();
    b.w_v = a.w_v.template cast<U>();
    b.w_o = a.w_o.template cast<U>();
    b.ln2_gain = a.ln2_gain.template cast<U>();
    b.ln2_bias = a.ln2_bias.template cast<U>();
    b.w_up = a.w_up.template cast<U>();
    b.b_up = a.b_up.template cast<U>();
    b.w_down = a.w_down.template cast<U>();
    b.b_down = a.b_down.template cast<U>();
  }
  out.final_gain = final_gain.template cast<U>();
  out.final_bias = final_bias.template cast<U>();
  out.head = head.template cast<U>();
  return out;
}

namespace {

bool is_norm_gain(const std::string& name) {
  return name.ends_with("ln1_gain") || name.ends_with("ln2_gain") || name == "final_gain";
}

bool is_bias(const std::string& name) {
  return name.ends_with("_bias") || name.ends_with("b_up") || name.ends_with("b_down");
}

}  // namespace

template <typename T>
ModelState<T> init_model(const ModelConfig& config, Rng rng) {
  config.validate();
  ModelState<T> model{config, ModelParams<T>::zeros(config)};
  // Weights ~ N(0, 0.02^2); norm gains 1; biases 0. Each tensor draws from
  // its own sub-stream keyed by name.
  model.params.visit([&rng](const std::string& name, BasicMatrix<T>& m) {
    if (is_norm_gain(name)) {
      m.fill(T{1});
    } else if (is_bias(name)) {
      m.set_zero();
    } else {
      Rng local = rng.split(name);
      for (T& v : m.values()) v = static_cast<T>(local.normal(0.0, 0.02));
    }
  });
  return model;
}

template <typename T>
std::vector<T> project_visual(const ModelState<T>& model, std::span<const double> feature) {
  const auto& c = model.config;
  if (feature.size() != c.d_visual) {
    throw std::invalid_argument("visual feature length " + std::to_string(feature.size()) +
                                " != d_visual " + std::to_string(c.d_visual));
  }
  const auto& W = model.params.visual_projector;
  std::vector<T> out(model.params.visual_bias.values().begin(),
                     model.params.visual_bias.values().end());
  for (std::size_t f = 0; f < c.d_visual; ++f) {
    const T x = static_cast<T>(feature[f]);
    const auto w_row = W.row(f);
    for (std::size_t d = 0; d < c.d_model; ++d) out[d] += x * w_row[d];
  }
  return out;
}

namespace detail {

template <typename T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, std::size_t m, std::size_t n,
                     T* xhat, T* out, T* rstd) {
  const T eps = static_cast<T>(kNormEps);
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = x + i * n;
    T mean = T{0};
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean *= inv_n;
    T var = T{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var *= inv_n;
    const T r = T{1} / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mean) * r;
      xhat[i * n + j] = h;
      out[i * n + j] = gain[j] * h + bias[j];
    }
  }
}

template <typename T>
ForwardCache<T> forward_cached(const ModelState<T>& model, const InputSequence& input) {
  const auto& c = model.config;
  const auto& P = model.params;
  input.validate(c);
  const std::size_t S = input.size();
  const std::size_t D = c.d_model;
  const std::size_t H = c.n_heads;
  const std::size_t hd = c.head_dim();
  const std::size_t F = c.d_ffn();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  ForwardCache<T> cache;
  cache.hidden.reserve(c.n_layers + 1);

  BasicMatrix<T> x(S, D);
  std::size_t slot = 0;
  for (std::size_t i = 0; i < S; ++i) {
    auto row = x.row(i);
    if (input.is_visual(i)) {
      const auto proj = project_visual(model, input.visual[slot++]);
      std::copy(proj.begin(), proj.end(), row.begin());
    } else {
      const auto emb = P.token_embedding.row(static_cast<std::size_t>(input.tokens[i]));
      std::copy(emb.begin(), emb.end(), row.begin());
    }
    const auto pos = P.positional_embedding.row(i);
    for (std::size_t d = 0; d < D; ++d) row[d] += pos[d];
  }
  cache.hidden.push_back(x);

  cache.layers.resize(c.n_layers);
  std::vector<T> scores(S);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& W = P.layers[l];
    auto& lc = cache.layers[l];

    lc.ln1_xhat = BasicMatrix<T>(S, D);
    lc.ln1_out = BasicMatrix<T>(S, D);
    lc.ln1_rstd.assign(S, T{0});
    layer_norm_rows(x.data(), W.ln1_gain.data(), W.ln1_bias.data(), S, D, lc.ln1_xhat.data(),
                    lc.ln1_out.data(), lc.ln1_rstd.data());

    lc.q = BasicMatrix<T>(S, D);
    lc.k = BasicMatrix<T>(S, D);
    lc.v = BasicMatrix<T>(S, D);
    gemm(lc.ln1_out.data(), W.w_q.data(), lc.q.data(), S, D, D);
    gemm(lc.ln1_out.data(), W.w_k.data(), lc.k.data(), S, D, D);
    gemm(lc.ln1_out.data(), W.w_v.data(), lc.v.data(), S, D, D);

    lc.attn.assign(H, BasicMatrix<T>(S, S));
    lc.attn_mix = BasicMatrix<T>(S, D);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      auto& A = lc.attn[h];
      for (std::size_t i = 0; i < S; ++i) {
        const T* qi = lc.q.data() + i * D + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = lc.k.data() + j * D + off;
          T dot = T{0};
          for (std::size_t e = 0; e < hd; ++e) dot += qi[e] * kj[e];
          scores[j] = dot * scale;
        }
        softmax_inplace(std::span<T>(scores.data(), i + 1));
        T* out = lc.attn_mix.data() + i * D + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const T a = scores[j];
          A(i, j) = a;
          const T* vj = lc.v.data() + j * D + off;
          for (std::size_t e = 0; e < hd; ++e) out[e] += a * vj[e];
        }
      }
    }

    BasicMatrix<T> attn_out(S, D);
    gemm(lc.attn_mix.data(), W.w_o.data(), attn_out.data(), S, D, D);
    for (std::size_t n = 0; n < S * D; ++n) x.data()[n] += attn_out.data()[n];

    lc.ln2_xhat = BasicMatrix<T>(S, D);
    lc.ln2_out = BasicMatrix<T>(S, D);
    lc.ln2_rstd.assign(S, T{0});
    layer_norm_rows(x.data(), W.ln2_gain.data(), W.ln2_bias.data(), S, D, lc.ln2_xhat.data(),
                    lc.ln2_out.data(), lc.ln2_rstd.data());

    lc.up_pre = BasicMatrix<T>(S, F);
    lc.up_act = BasicMatrix<T>(S, F);
    gemm(lc.ln2_out.data(), W.w_up.data(), lc.up_pre.data(), S, D, F);
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < F; ++j) {
        T& u = lc.up_pre(i, j);
        u += W.b_up.data()[j];
        lc.up_act(i, j) = gelu(u);
      }
    }
    BasicMatrix<T> down(S, D);
    gemm(lc.up_act.data(), W.w_down.data(), down.data(), S, F, D);
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t d = 0; d < D; ++d) x(i, d) += down(i, d) + W.b_down.data()[d];
    }

    if (!all_finite<T>(x.values())) {
      throw std::runtime_error("non-finite activation in layer " + std::to_string(l));
    }
    cache.hidden.push_back(x);
  }

  cache.final_xhat = BasicMatrix<T>(S, D);
  cache.final_out = BasicMatrix<T>(S, D);
  cache.final_rstd.assign(S, T{0});
  layer_norm_rows(x.data(), P.final_gain.data(), P.final_bias.data(), S, D,
                  cache.final_xhat.data(), cache.final_out.data(), cache.final_rstd.data());
  cache.logits = BasicMatrix<T>(S, c.vocab_size);
  gemm(cache.final_out.data(), P.head.data(), cache.logits.data(), S, D, c.vocab_size);
  if (!all_finite<T>(cache.logits.values())) {
    throw std::runtime_error("non-finite activation in output head");
  }
  return cache;
}

}  // namespace detail

template <typename T>
std::vector<T> decode_hidden(const ModelState<T>& model, std::span<const T> hidden) {
  const auto& c = model.config;
  if (hidden.size() != c.d_model) {
    throw std::invalid_argument("hidden state width " + std::to_string(hidden.size()) +
                                " != d_model " + std::to_string(c.d_model));
  }
  std::vector<T> xhat(c.d_model), normed(c.d_model);
  T rstd{};
  detail::layer_norm_rows(hidden.data(), model.params.final_gain.data(),
                          model.params.final_bias.data(), 1, c.d_model, xhat.data(),
                          normed.data(), &rstd);
  std::vector<T> logits(c.vocab_size);
  gemm(normed.data(), model.params.head.data(), logits.data(), 1, c.d_model, c.vocab_size);
  return logits;
}

template <typename T>
ForwardTrace<T> forward(const ModelState<T>& model, const InputSequence& input) {
  auto cache = detail::forward_cached(model, input);
  ForwardTrace<T> trace;
  trace.hidden_states = std::move(cache.hidden);
  trace.attention.reserve(cache.layers.size());
  for (auto& lc : cache.layers) trace.attention.push_back(std::move(lc.attn));
  trace.logits = std::move(cache.logits);
  return trace;
}

void DecodePolicy::validate() const {
  if (kind == Kind::temperature && !(temperature > 0.0)) {
    throw std::invalid_argument("temperature must be > 0, got " + std::to_string(temperature));
  }
}

std::string DecodePolicy::describe() const {
  if (kind == Kind::greedy) return "greedy";
  std::string s = "temperature(" + std::to_string(temperature) + ")";
  if (top_k > 0) s += ",top_k(" + std::to_string(top_k) + ")";
  return s;
}

TokenId select_token(std::span<const double> logits, const DecodePolicy& policy, Rng& rng) {
  policy.validate();
  if (logits.empty()) throw std::invalid_argument("empty logits");
  if (policy.kind == DecodePolicy::Kind::greedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (policy.top_k > 0 && policy.top_k < logits.size()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    order.resize(policy.top_k);
    std::sort(order.begin(), order.end());
  }
  std::vector<double> scaled(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) scaled[i] = logits[order[i]] / policy.temperature;
  softmax_inplace<double>(scaled);
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    cumulative += scaled[i];
    if (u < cumulative) return static_cast<TokenId>(order[i]);
  }
  // u landed in the rounding gap above the final cumulative sum.
  for (std::size_t i = order.size(); i-- > 0;) {
    if (scaled[i] > 0.0) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order.back());
}

template <typename T>
Generation<T> generate(const ModelState<T>& model, const InputSequence& prompt,
                       const DecodePolicy& policy, Rng& rng, const GenerateOptions& options) {
  policy.validate();
  InputSequence seq = prompt;
  seq.quality_position.reset();
  Generation<T> out;
  for (std::size_t step = 0; step < options.max_new_tokens; ++step) {
    if (seq.size() > model.config.max_seq_len) break;
    auto trace = forward(model, seq);
    const auto last = trace.logits.row(trace.seq_len() - 1);
    std::vector<double> logits(last.begin(), last.end());
    const TokenId tok = select_token(logits, policy, rng);
    out.step_distributions.push_back(softmax<double>(logits));
    out.tokens.push_back(tok);
    if (options.keep_traces) out.traces.push_back(std::move(trace));
    if (options.eos_token && tok == *options.eos_token) {
      out.stopped_at_eos = true;
      break;
    }
    seq.push_token(tok, Segment::target);
  }
  return out;
}

#define GLASSBOX_INSTANTIATE(T)                                                                 \
  template struct ModelParams<T>;                                                              \
  template ModelState<T> init_model<T>(const ModelConfig&, Rng);                               \
  template std::vector<T> project_visual<T>(const ModelState<T>&, std::span<const double>);    \
  template std::vector<T> decode_hidden<T>(const ModelState<T>&, std::span<const T>);          \
  template ForwardTrace<T> forward<T>(const ModelState<T>&, const InputSequence&);             \
  template Generation<T> generate<T>(const ModelState<T>&, const InputSequence&,               \
                                     const DecodePolicy&, Rng&, const GenerateOptions&);       \
  template detail::ForwardCache<T> detail::forward_cached<T>(const ModelState<T>&,             \
                                                             const InputSequence&);            \
  template void detail::layer_norm_rows<T>(const T*, const T*, const T*, std::size_t,          \
                                           std::size_t, T*, T*, T*);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace glassbox
