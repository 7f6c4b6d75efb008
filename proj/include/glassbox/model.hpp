#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "glassbox/numerics.hpp"
#include "glassbox/rng.hpp"

namespace glassbox {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t vocab_size = 25;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_visual = 16;
  std::size_t max_seq_len = 64;
  std::size_t ffn_mult = 4;

  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  std::size_t d_ffn() const noexcept { return d_model * ffn_mult; }

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerWeights {
  BasicMatrix<T> ln1_gain, ln1_bias;          // 1 x d_model
  BasicMatrix<T> w_q, w_k, w_v, w_o;          // d_model x d_model
  BasicMatrix<T> ln2_gain, ln2_bias;          // 1 x d_model
  BasicMatrix<T> w_up, b_up;                  // d_model x d_ffn, 1 x d_ffn
  BasicMatrix<T> w_down, b_down;              // d_ffn x d_model, 1 x d_model

  bool operator==(const LayerWeights&) const = default;
};

// Every trainable tensor. The visit order below is the canonical order used
// by checkpoints, the optimizer and gradient checks.
template <typename T>
struct ModelParams {
  BasicMatrix<T> token_embedding;       // vocab x d_model
  BasicMatrix<T> positional_embedding;  // max_seq_len x d_model
  BasicMatrix<T> visual_projector;      // d_visual x d_model
  BasicMatrix<T> visual_bias;           // 1 x d_model
  std::vector<LayerWeights<T>> layers;
  BasicMatrix<T> final_gain, final_bias;  // 1 x d_model
  BasicMatrix<T> head;                    // d_model x vocab

  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("positional_embedding"), self.positional_embedding);
    f(std::string("visual_projector"), self.visual_projector);
    f(std::string("visual_bias"), self.visual_bias);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_gain", L.ln1_gain);
      f(p + "ln1_bias", L.ln1_bias);
      f(p + "w_q", L.w_q);
      f(p + "w_k", L.w_k);
      f(p + "w_v", L.w_v);
      f(p + "w_o", L.w_o);
      f(p + "ln2_gain", L.ln2_gain);
      f(p + "ln2_bias", L.ln2_bias);
      f(p + "w_up", L.w_up);
      f(p + "b_up", L.b_up);
      f(p + "w_down", L.w_down);
      f(p + "b_down", L.b_down);
    }
    f(std::string("final_gain"), self.final_gain);
    f(std::string("final_bias"), self.final_bias);
    f(std::string("head"), self.head);
  }
  template <typename F>
  void visit(F&& f) { visit_impl(*this, std::forward<F>(f)); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, std::forward<F>(f)); }

  // Zero-filled tensors shaped for `config` (gradient buffers, moments).
  static ModelParams zeros(const ModelConfig& config);

  std::size_t parameter_count() const;

  template <typename U>
  ModelParams<U> cast() const;

  bool operator==(const ModelParams&) const = default;
};

template <typename T>
struct ModelState {
  ModelConfig config;
  ModelParams<T> params;

  template <typename U>
  ModelState<U> cast() const {
    return ModelState<U>{config, params.template cast<U>()};
  }
  bool operator==(const ModelState&) const = default;
};

using ModelF = ModelState<float>;
using ModelD = ModelState<double>;

enum class Segment : std::uint8_t { special, image, prompt, description, target };

std::string_view segment_name(Segment s) noexcept;

inline constexpr TokenId kVisualSlot = -1;

// Mixed token/visual input. tokens[i] == kVisualSlot marks an image position
// whose feature vector is visual[k] for the k-th such slot.
struct InputSequence {
  std::vector<TokenId> tokens;
  std::vector<std::vector<double>> visual;
  std::vector<Segment> segments;
  // Position whose output distribution is read as the quality prediction.
  std::optional<std::size_t> quality_position;

  std::size_t size() const noexcept { return tokens.size(); }
  bool is_visual(std::size_t i) const noexcept { return tokens[i] == kVisualSlot; }
  std::size_t visual_count() const noexcept { return visual.size(); }

  void push_token(TokenId id, Segment segment);
  void push_visual(std::vector<double> feature);

  // Throws std::invalid_argument when the sequence does not fit `config`.
  void validate(const ModelConfig& config) const;
  bool operator==(const InputSequence&) const = default;
};

template <typename T>
struct ForwardTrace {
  // hidden_states[0] is post-embedding; hidden_states[l] the output of block l.
  std::vector<BasicMatrix<T>> hidden_states;
  // attention[layer][head], seq x seq, exactly zero above the diagonal.
  std::vector<std::vector<BasicMatrix<T>>> attention;
  BasicMatrix<T> logits;  // seq x vocab

  std::size_t seq_len() const noexcept { return logits.rows(); }
};

template <typename T>
ModelState<T> init_model(const ModelConfig& config, Rng rng);

template <typename T>
std::vector<T> project_visual(const ModelState<T>& model, std::span<const double> feature);

template <typename T>
ForwardTrace<T> forward(const ModelState<T>& model, const InputSequence& input);

// final_norm followed by the unembedding head; the forward pass produces its
// logits through exactly this routine.
template <typename T>
std::vector<T> decode_hidden(const ModelState<T>& model, std::span<const T> hidden);

struct DecodePolicy {
  enum class Kind { greedy, temperature };
  Kind kind = Kind::greedy;
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0 = no truncation

  static DecodePolicy greedy() { return {}; }
  static DecodePolicy sampled(double temperature, std::size_t top_k = 0) {
    return {Kind::temperature, temperature, top_k};
  }
  void validate() const;
  std::string describe() const;
};

// Picks a token from one logits row. Greedy ties go to the lowest id.
TokenId select_token(std::span<const double> logits, const DecodePolicy& policy, Rng& rng);

struct GenerateOptions {
  std::size_t max_new_tokens = 16;
  std::optional<TokenId> eos_token;
  bool keep_traces = false;
};

template <typename T>
struct Generation {
  std::vector<TokenId> tokens;
  // Output distribution (softmax of the final logits row) for each step.
  std::vector<std::vector<double>> step_distributions;
  std::vector<ForwardTrace<T>> traces;  // filled only with keep_traces
  bool stopped_at_eos = false;
};

template <typename T>
Generation<T> generate(const ModelState<T>& model, const InputSequence& prompt,
                       const DecodePolicy& policy, Rng& rng, const GenerateOptions& options = {});

}  // namespace glassbox
