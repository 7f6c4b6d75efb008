#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "glassbox/io.hpp"
#include "glassbox/training.hpp"

namespace glassbox {

void OptimizerConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid optimizer config: " + what);
  };
  require(lr > 0.0, "lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(eps > 0.0, "eps must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
}

bool decays(const std::string& name) {
  if (name == "token_embedding" || name == "positional_embedding") return false;
  if (name == "final_gain" || name == "final_bias") return false;
  if (name.ends_with("ln1_gain") || name.ends_with("ln1_bias") || name.ends_with("ln2_gain") ||
      name.ends_with("ln2_bias")) {
    return false;
  }
  return true;
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, double lr, const OptimizerConfig& cfg, bool decay) {
  if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
    throw std::invalid_argument("adamw shape mismatch: param " + std::to_string(param.size()) +
                                ", grad " + std::to_string(grad.size()) + ", moments " +
                                std::to_string(m.size()) + "/" + std::to_string(v.size()));
  }
  if (step == 0) throw std::invalid_argument("adamw step index is 1-based");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double decay_rate = decay ? lr * cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / bc1;
    const double v_hat = vi / bc2;
    const double theta = param[i];
    param[i] = static_cast<T>(theta - lr * m_hat / (std::sqrt(v_hat) + cfg.eps) -
                              decay_rate * theta);
  }
}

template <typename T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& opt,
                const OptimizerConfig& config, double lr_scale) {
  std::vector<const BasicMatrix<T>*> g;
  grads.visit([&g](const std::string&, const BasicMatrix<T>& m) { g.push_back(&m); });
  std::vector<BasicMatrix<T>*> ms, vs;
  opt.m.visit([&ms](const std::string&, BasicMatrix<T>& m) { ms.push_back(&m); });
  opt.v.visit([&vs](const std::string&, BasicMatrix<T>& m) { vs.push_back(&m); });

  double clip_scale = 1.0;
  if (config.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto* m : g) {
      for (T x : m->values()) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    if (norm > config.grad_clip) clip_scale = config.grad_clip / norm;
  }

  ++opt.step;
  const double lr = config.lr * lr_scale;
  std::size_t k = 0;
  std::vector<T> scaled;
  params.visit([&](const std::string& name, BasicMatrix<T>& p) {
    const BasicMatrix<T>& gm = *g[k];
    if (!p.same_shape(gm) || !p.same_shape(*ms[k]) || !p.same_shape(*vs[k])) {
      throw std::invalid_argument("adamw shape mismatch for '" + name + "': param " +
                                  p.shape_string() + ", grad " + gm.shape_string());
    }
    std::span<const T> gs = gm.values();
    if (clip_scale != 1.0) {
      scaled.assign(gs.begin(), gs.end());
      for (T& x : scaled) x = static_cast<T>(x * clip_scale);
      gs = scaled;
    }
    adamw_update<T>(p.values(), gs, ms[k]->values(), vs[k]->values(), opt.step, lr, config,
                    decays(name));
    ++k;
  });
}

std::string_view regimen_name(Regimen r) noexcept {
  return r == Regimen::one_stage ? "one_stage" : "two_stage";
}

Regimen parse_regimen(std::string_view name) {
  if (name == "one_stage") return Regimen::one_stage;
  if (name == "two_stage") return Regimen::two_stage;
  throw std::invalid_argument("unknown regimen '" + std::string(name) +
                              "' (expected one_stage or two_stage)");
}

std::size_t Schedule::warmup_steps(std::size_t stage_iters) const {
  return static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(stage_iters)));
}

std::size_t Schedule::stage2_replay_count() const {
  return static_cast<std::size_t>(std::llround(stage2_replay * static_cast<double>(batch_size)));
}

void Schedule::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(stage2_replay >= 0.0 && stage2_replay < 1.0)) {
    throw std::invalid_argument("stage2_replay must lie in [0, 1)");
  }
  if (stage2_replay_count() >= batch_size) {
    throw std::invalid_argument("stage2_replay leaves no stage-2 examples in the batch");
  }
  if (!(stage2_lr_scale > 0.0)) throw std::invalid_argument("stage2_lr_scale must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw std::invalid_argument("warmup_fraction must lie in [0, 1]");
  }
  if (log_every == 0) throw std::invalid_argument("log_every must be >= 1");
}

namespace {

void require_stage(const std::vector<RenderedExample>& examples, StageTag tag,
                   const std::string& what) {
  if (examples.empty()) throw std::invalid_argument("regimen needs " + what + " examples; none given");
  for (const auto& ex : examples) {
    if (ex.stage != tag) {
      throw std::invalid_argument(what + " data contains a " + std::string(stage_name(ex.stage)) +
                                  " example");
    }
  }
}

// Samples batches by walking seeded permutations of the example indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng rng) : order_(n), rng_(rng) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng_.uniform_int(i)]);
    }
    cursor_ = 0;
  }
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

}  // namespace

TrainResult train(const TrainingData& data, const Schedule& schedule, const LossConfig& loss,
                  const OptimizerConfig& optimizer, const ModelConfig& model_config) {
  schedule.validate();
  loss.validate();
  optimizer.validate();
  model_config.validate();

  struct Stage {
    const std::vector<RenderedExample>* examples;
    std::size_t iters;
    const char* label;
    double lr_scale;
    std::size_t replay;
  };
  std::vector<Stage> stages;
  if (schedule.regimen == Regimen::one_stage) {
    require_stage(data.one_stage, StageTag::one_stage, "one_stage");
    stages.push_back({&data.one_stage, schedule.one_stage_iters, "one_stage", 1.0, 0});
  } else {
    require_stage(data.stage1, StageTag::stage1, "stage1");
    require_stage(data.stage2, StageTag::stage2, "stage2");
    stages.push_back({&data.stage1, schedule.stage1_iters, "stage1", 1.0, 0});
    stages.push_back({&data.stage2, schedule.stage2_iters, "stage2", schedule.stage2_lr_scale,
                      schedule.stage2_replay_count()});
  }

  const Rng root(schedule.seed);
  TrainResult result;
  result.model = init_model<float>(model_config, root.split("init"));
  for (const auto& st : stages) {
    for (const auto& ex : *st.examples) ex.input.validate(model_config);
  }

  std::size_t global_iter = 0;
  double window_sum = 0.0;
  std::size_t window_count = 0;
  std::vector<RenderedExample> batch;
  for (const auto& st : stages) {
    auto opt = OptimizerState<float>::fresh(model_config);
    BatchSampler sampler(st.examples->size(), root.split(st.label));
    BatchSampler replay(data.stage1.empty() ? 1 : data.stage1.size(), root.split("replay"));
    const std::size_t warmup = schedule.warmup_steps(st.iters);
    for (std::size_t it = 1; it <= st.iters; ++it) {
      batch.clear();
      for (std::size_t idx : sampler.next(schedule.batch_size - st.replay)) batch.push_back((*st.examples)[idx]);
      if (st.replay > 0) {
        for (std::size_t idx : replay.next(st.replay)) batch.push_back(data.stage1[idx]);
      }
      auto lg = loss_and_gradients<float>(result.model, batch, loss);
      const double lr_scale =
          st.lr_scale *
          (warmup > 0 && it <= warmup ? static_cast<double>(it) / static_cast<double>(warmup) : 1.0);
      adamw_step<float>(result.model.params, lg.gradients, opt, optimizer, lr_scale);
      ++global_iter;
      window_sum += lg.loss;
      ++window_count;
      if (global_iter % schedule.log_every == 0) {
        result.curve.push_back({global_iter, window_sum / static_cast<double>(window_count)});
        window_sum = 0.0;
        window_count = 0;
      }
    }
    result.stage_iters.push_back(st.iters);
  }
  result.iterations_run = global_iter;
  return result;
}

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out << "iter,loss\n";
  for (const auto& p : curve) out << p.iter << ',' << io::format_real(p.loss) << '\n';
  return out.str();
}

#define GLASSBOX_INSTANTIATE(T)                                                               \
  template void adamw_update<T>(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, \
                                std::uint64_t, double, const OptimizerConfig&, bool);         \
  template void adamw_step<T>(ModelParams<T>&, const ModelParams<T>&, OptimizerState<T>&,     \
                              const OptimizerConfig&, double);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

}  // namespace glassbox
