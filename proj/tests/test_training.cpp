#include <doctest.h>

#include <cmath>
#include <sstream>

#include "glassbox/training.hpp"
#include "support.hpp"

using namespace glassbox;

namespace {

// Direct evaluation of the smoothed objective: (1-e)(-log p_y) + e/C sum_c (-log p_c).
double smoothed_nll_reference(const std::vector<double>& p, std::size_t y, double e) {
  double uniform = 0.0;
  for (double pc : p) uniform += -std::log(pc);
  return (1.0 - e) * -std::log(p[y]) + e / static_cast<double>(p.size()) * uniform;
}

std::vector<double> random_probs(Rng& rng, std::size_t n) {
  std::vector<double> logits(n);
  for (double& l : logits) l = rng.normal(0.0, 2.0);
  return softmax(logits);
}

}  // namespace

TEST_CASE("label smoothing matches the direct formula and its limits") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t c = 2 + rng.uniform_int(30);
    const auto p = random_probs(rng, c);
    const std::size_t y = rng.uniform_int(c);
    const double e = rng.uniform();
    CHECK(std::abs(label_smoothing_nll(p, y, e) - smoothed_nll_reference(p, y, e)) < 1e-9);
  }
  const std::vector<double> p{0.1, 0.2, 0.7};
  CHECK(label_smoothing_nll(p, 2, 0.0) == doctest::Approx(-std::log(0.7)));
  const std::vector<double> u(7, 1.0 / 7.0);
  CHECK(label_smoothing_nll(u, 3, 1.0) == doctest::Approx(std::log(7.0)));
  CHECK_THROWS_AS(label_smoothing_nll(p, 3, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(LossConfig{1.5}.validate(), std::invalid_argument);
}

TEST_CASE("from-logits variant agrees with the probability form") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> logits(10);
    for (double& l : logits) l = rng.normal(0.0, 5.0);
    const auto p = softmax(logits);
    CHECK(label_smoothing_nll_from_logits(logits, 4, 0.1) ==
          doctest::Approx(label_smoothing_nll(p, 4, 0.1)).epsilon(1e-12));
  }
}

TEST_CASE("training sequence drops the final target token") {
  const auto ex = testing::mixed_batch(1, 3).front();
  const auto seq = training_sequence(ex);
  CHECK(seq.size() == ex.input.size() + ex.target.size() - 1);
  CHECK(seq.tokens.back() == ex.target[ex.target.size() - 2]);
}

TEST_CASE("analytic gradients match central differences") {
  auto model = init_model<double>(testing::tiny_config(), Rng(3));
  testing::jitter(model, Rng(4), 0.1);
  const auto batch = testing::mixed_batch(4, 5);
  const auto r = testing::gradient_check(model, batch, LossConfig{});
  CHECK(r.max_relative_error < 1e-3);
  CHECK(r.coords_checked >= 64);
}

TEST_CASE("gradients with a partial loss mask") {
  auto model = init_model<double>(testing::tiny_config(), Rng(6));
  testing::jitter(model, Rng(7), 0.1);
  auto batch = testing::mixed_batch(3, 8);
  batch[0].loss_mask.assign(batch[0].target.size(), 0);
  batch[0].loss_mask[1] = 1;
  FiniteDiffOptions opts;
  opts.max_coords_per_tensor = 16;
  CHECK(testing::gradient_check(model, batch, LossConfig{0.2}, opts).max_relative_error < 1e-3);
}

TEST_CASE("batches without supervision are rejected") {
  const auto model = init_model<double>(testing::tiny_config(), Rng(1));
  auto batch = testing::mixed_batch(2, 1);
  for (auto& ex : batch) ex.loss_mask.assign(ex.target.size(), 0);
  CHECK_THROWS_WITH(loss_and_gradients<double>(model, batch, LossConfig{}),
                    doctest::Contains("no supervised positions"));
}

TEST_CASE("float and double losses agree") {
  const auto md = init_model<double>(testing::tiny_config(), Rng(9));
  const auto mf = md.cast<float>();
  const auto batch = testing::mixed_batch(6, 10);
  CHECK(batch_loss<float>(mf, batch, LossConfig{}) ==
        doctest::Approx(batch_loss<double>(md, batch, LossConfig{})).epsilon(1e-5));
  // A fresh model is near uniform: loss close to ln(vocab).
  CHECK(batch_loss<double>(md, batch, LossConfig{}) == doctest::Approx(std::log(25.0)).epsilon(0.05));
}

TEST_CASE("adamw single step matches hand computation") {
  OptimizerConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  std::vector<double> p{1.0, -2.0}, g{0.5, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
  adamw_update<double>(p, g, m, v, 1, cfg.lr, cfg, true);
  // Step 1: m_hat = g, v_hat = g^2, update = g / (|g| + eps).
  CHECK(p[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-6) - 0.1 * 0.5 * 1.0).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(-2.0 - 0.1 * 0.5 * -2.0).epsilon(1e-14));
  CHECK(m[0] == doctest::Approx(0.05));
  CHECK(v[0] == doctest::Approx(0.02 * 0.25));

  // Step 2 with bias correction.
  const double m2 = 0.9 * 0.05 + 0.1 * 0.5, v2 = 0.98 * 0.005 + 0.02 * 0.25;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.98 * 0.98);
  const double before = p[0];
  adamw_update<double>(p, g, m, v, 2, cfg.lr, cfg, false);
  CHECK(p[0] == doctest::Approx(before - 0.1 * mh / (std::sqrt(vh) + 1e-6)).epsilon(1e-14));
  CHECK_THROWS_AS(adamw_update<double>(p, g, m, v, 0, 0.1, cfg, false), std::invalid_argument);
}

TEST_CASE("weight decay skips norms and embeddings") {
  CHECK_FALSE(decays("token_embedding"));
  CHECK_FALSE(decays("positional_embedding"));
  CHECK_FALSE(decays("layers.0.ln1_gain"));
  CHECK_FALSE(decays("layers.3.ln2_bias"));
  CHECK_FALSE(decays("final_gain"));
  CHECK(decays("layers.1.w_q"));
  CHECK(decays("head"));
  CHECK(decays("visual_projector"));
}

TEST_CASE("global norm clipping bounds the effective gradient") {
  auto model = init_model<double>(testing::tiny_config(), Rng(1));
  auto clipped = model;
  auto grads = ModelParams<double>::zeros(model.config);
  grads.head.fill(100.0);
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  auto opt_a = OptimizerState<double>::fresh(model.config);
  auto opt_b = OptimizerState<double>::fresh(model.config);
  adamw_step<double>(model.params, grads, opt_a, cfg, 1.0);
  cfg.grad_clip = 1.0;
  adamw_step<double>(clipped.params, grads, opt_b, cfg, 1.0);
  // Adam is scale invariant on step one, so the parameters agree, while the
  // stored first moment reflects the clipped gradient.
  CHECK(std::abs(model.params.head(0, 0) - clipped.params.head(0, 0)) < 1e-6);
  CHECK(opt_b.m.head(0, 0) < opt_a.m.head(0, 0));
  CHECK(opt_a.step == 1);
}

TEST_CASE("short training run lowers the loss and is deterministic") {
  const auto batch_src = testing::instances(64, 11);
  const Vocabulary vocab(DatagenConfig{}.attribute_names);
  TrainingData data;
  for (const auto& inst : batch_src) data.one_stage.push_back(render_one_stage(inst, vocab));
  Schedule s;
  s.one_stage_iters = 40;
  s.batch_size = 8;
  s.log_every = 10;
  OptimizerConfig opt;
  opt.lr = 3e-3;
  const auto cfg = testing::tiny_config();
  const auto a = train(data, s, LossConfig{}, opt, cfg);
  const auto b = train(data, s, LossConfig{}, opt, cfg);
  CHECK(a.model == b.model);
  REQUIRE(a.curve.size() == 4);
  CHECK(a.curve.back().loss < a.curve.front().loss);
  CHECK(a.curve[2].iter == 30);
  const auto csv = loss_curve_csv(a.curve);
  CHECK(csv.rfind("iter,loss\n10,", 0) == 0);
}

TEST_CASE("two-stage training runs both stages in order") {
  const Vocabulary vocab(DatagenConfig{}.attribute_names);
  TrainingData data;
  for (const auto& inst : testing::instances(16, 12)) {
    auto [s1, s2] = render_two_stage(inst, vocab);
    data.stage1.push_back(s1);
    data.stage2.push_back(s2);
  }
  Schedule s;
  s.regimen = Regimen::two_stage;
  s.stage1_iters = 20;
  s.stage2_iters = 10;
  s.batch_size = 4;
  const auto r = train(data, s, LossConfig{}, OptimizerConfig{}, testing::tiny_config());
  CHECK(r.stage_iters == std::vector<std::size_t>{20, 10});
  CHECK(r.iterations_run == 30);
  CHECK(r.curve.size() == 3);

  TrainingData wrong;
  wrong.stage1 = data.stage2;
  wrong.stage2 = data.stage2;
  CHECK_THROWS_AS(train(wrong, s, LossConfig{}, OptimizerConfig{}, testing::tiny_config()),
                  std::invalid_argument);
  s.regimen = Regimen::one_stage;
  CHECK_THROWS_WITH(train(data, s, LossConfig{}, OptimizerConfig{}, testing::tiny_config()),
                    doctest::Contains("one_stage"));
}

TEST_CASE("stage-2 replay mixes stage-1 examples into stage-2 batches only") {
  const Vocabulary vocab(DatagenConfig{}.attribute_names);
  TrainingData data;
  for (const auto& inst : testing::instances(16, 13)) {
    auto [s1, s2] = render_two_stage(inst, vocab);
    data.stage1.push_back(s1);
    data.stage2.push_back(s2);
  }
  Schedule s;
  s.regimen = Regimen::two_stage;
  s.stage1_iters = 20;
  s.stage2_iters = 10;
  s.batch_size = 8;
  CHECK(s.stage2_replay_count() == 1);
  const auto with = train(data, s, LossConfig{}, OptimizerConfig{}, testing::tiny_config());
  s.stage2_replay = 0.0;
  const auto without = train(data, s, LossConfig{}, OptimizerConfig{}, testing::tiny_config());
  CHECK(with.curve[0].loss == without.curve[0].loss);
  CHECK(with.curve[1].loss == without.curve[1].loss);
  CHECK(with.curve[2].loss != without.curve[2].loss);

  s.stage2_replay = 0.95;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s.stage2_replay = 0.0;
  s.stage2_lr_scale = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
