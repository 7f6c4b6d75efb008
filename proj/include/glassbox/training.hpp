#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "glassbox/datagen.hpp"
#include "glassbox/model.hpp"

namespace glassbox {

struct LossConfig {
  // Smoothing weight. The class count C is the model's vocabulary size.
  double epsilon = 0.1;
  void validate() const;
};

// (1 - eps) * (-log p(y)) + eps / C * sum_c (-log p(c)), evaluated from a
// probability vector. Zero probabilities make the loss infinite; the
// training path uses the logits overload instead.
double label_smoothing_nll(std::span<const double> probabilities, std::size_t target,
                           double epsilon);
// Same objective computed through log-softmax of raw logits.
double label_smoothing_nll_from_logits(std::span<const double> logits, std::size_t target,
                                       double epsilon);

// Full model input for teacher forcing: the example input followed by every
// target token except the last. Target token t is predicted at position
// input.size() - 1 + t.
InputSequence training_sequence(const RenderedExample& example);

// Per-sequence loss: mean over loss-mask-active target positions. Returns
// nullopt for examples without supervised positions.
template <typename T>
std::optional<double> sequence_loss(const ModelState<T>& model, const RenderedExample& example,
                                    const LossConfig& loss);

template <typename T>
struct LossAndGradients {
  double loss = 0.0;
  ModelParams<T> gradients;
};

// Mean of per-sequence losses over the examples that carry supervision, and
// its gradient for every parameter. Examples are processed independently and
// reduced in index order, so the result does not depend on the thread count.
template <typename T>
LossAndGradients<T> loss_and_gradients(const ModelState<T>& model,
                                       std::span<const RenderedExample> batch,
                                       const LossConfig& loss);

template <typename T>
double batch_loss(const ModelState<T>& model, std::span<const RenderedExample> batch,
                  const LossConfig& loss);

struct OptimizerConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 0.0;  // global-norm cap, 0 = off
  void validate() const;
};

template <typename T>
struct OptimizerState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::uint64_t step = 0;

  static OptimizerState fresh(const ModelConfig& config) {
    return {ModelParams<T>::zeros(config), ModelParams<T>::zeros(config), 0};
  }
};

// Decoupled weight decay applies to every tensor except norm gains/biases and
// the token/positional embeddings.
bool decays(const std::string& parameter_name);

// One AdamW update of a single tensor, with `step` the 1-based step index.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, double lr, const OptimizerConfig& config, bool decay);

// Advances opt.step and updates every tensor. `lr_scale` multiplies config.lr.
template <typename T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& opt,
                const OptimizerConfig& config, double lr_scale = 1.0);

enum class Regimen { one_stage, two_stage };
std::string_view regimen_name(Regimen r) noexcept;
Regimen parse_regimen(std::string_view name);

struct Schedule {
  Regimen regimen = Regimen::one_stage;
  std::size_t one_stage_iters = 3000;
  std::size_t stage1_iters = 2000;
  std::size_t stage2_iters = 1000;
  std::size_t batch_size = 16;
  // Linear warmup length per stage, as a fraction of that stage's iterations.
  double warmup_fraction = 0.03;
  // Stage-2 knobs against forgetting the stage-1 task: the share of each
  // stage-2 batch redrawn from stage-1 examples, and a learning-rate multiplier.
  double stage2_replay = 0.125;
  double stage2_lr_scale = 1.0;
  std::size_t log_every = 10;
  std::uint64_t seed = 1;

  std::size_t total_iters() const noexcept {
    return regimen == Regimen::one_stage ? one_stage_iters : stage1_iters + stage2_iters;
  }
  std::size_t warmup_steps(std::size_t stage_iters) const;
  // Stage-1 examples per stage-2 batch; always leaves at least one stage-2 slot.
  std::size_t stage2_replay_count() const;
  void validate() const;
};

struct TrainingData {
  std::vector<RenderedExample> one_stage;
  std::vector<RenderedExample> stage1;
  std::vector<RenderedExample> stage2;
};

struct LossPoint {
  std::size_t iter = 0;  // 1-based global iteration at the end of the window
  double loss = 0.0;     // mean batch loss over the window
};

struct TrainResult {
  ModelF model;
  std::vector<LossPoint> curve;
  std::size_t iterations_run = 0;
  std::vector<std::size_t> stage_iters;  // per stage actually run
};

// Deterministic given schedule.seed. The model is initialized from
// Rng(seed).split("init"); batch order comes from per-stage sub-streams. The
// optimizer state is reset between the two stages.
TrainResult train(const TrainingData& data, const Schedule& schedule, const LossConfig& loss,
                  const OptimizerConfig& optimizer, const ModelConfig& model_config);

std::string loss_curve_csv(const std::vector<LossPoint>& curve);

}  // namespace glassbox
