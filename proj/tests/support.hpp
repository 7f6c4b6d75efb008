#pragma once

#include <vector>

#include "glassbox/datagen.hpp"
#include "glassbox/training.hpp"
#include "glassbox/model.hpp"
#include "glassbox/rng.hpp"

namespace glassbox::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_mult = 2;
  return c;
}

// Adds N(0, sd) to every parameter so gains, biases and small weights all
// carry non-trivial gradients.
template <typename T>
void jitter(ModelState<T>& model, Rng rng, double sd) {
  model.params.visit([&](const std::string&, BasicMatrix<T>& m) {
    for (T& x : m.values()) x = static_cast<T>(x + rng.normal(0.0, sd));
  });
}

inline std::vector<SyntheticInstance> instances(std::size_t n, std::uint64_t seed) {
  DatagenConfig cfg;
  const Vocabulary vocab(cfg.attribute_names);
  std::vector<SyntheticInstance> out;
  const Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto inst = sample_instance(root.split(i), cfg, vocab);
    inst.id = i;
    out.push_back(std::move(inst));
  }
  return out;
}

// Mixed batch: one-stage, stage-one and stage-two renderings.
inline std::vector<RenderedExample> mixed_batch(std::size_t n, std::uint64_t seed) {
  const Vocabulary vocab(DatagenConfig{}.attribute_names);
  std::vector<RenderedExample> out;
  for (const auto& inst : instances(n, seed)) {
    switch (out.size() % 3) {
      case 0: out.push_back(render_one_stage(inst, vocab)); break;
      case 1: out.push_back(render_two_stage(inst, vocab).first); break;
      default: out.push_back(render_two_stage(inst, vocab).second); break;
    }
  }
  return out;
}

// Analytic gradients of the mean batch loss against central differences.
inline FiniteDiffResult gradient_check(ModelD& model, std::span<const RenderedExample> batch,
                                       const LossConfig& loss, const FiniteDiffOptions& opts = {}) {
  const auto analytic = loss_and_gradients<double>(model, batch, loss);
  std::vector<Matrix*> params;
  std::vector<const Matrix*> grads;
  model.params.visit([&](const std::string&, Matrix& m) { params.push_back(&m); });
  analytic.gradients.visit([&](const std::string&, const Matrix& m) { grads.push_back(&m); });
  return finite_diff_check([&] { return batch_loss<double>(model, batch, loss); }, params, grads,
                           opts);
}

}  // namespace glassbox::testing
