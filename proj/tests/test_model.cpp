#include <doctest.h>

#include <cmath>

#include "glassbox/datagen.hpp"
#include "glassbox/model.hpp"
#include "support.hpp"

using namespace glassbox;

namespace {

InputSequence sample_input(std::uint64_t seed) {
  const Vocabulary vocab(DatagenConfig{}.attribute_names);
  const auto inst = testing::instances(1, seed).front();
  return one_stage_with_description(inst, inst.description);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("initialisation is seeded and norms start at identity") {
  const auto cfg = testing::tiny_config();
  const auto a = init_model<float>(cfg, Rng(1));
  const auto b = init_model<float>(cfg, Rng(1));
  const auto c = init_model<float>(cfg, Rng(2));
  CHECK(a == b);
  CHECK_FALSE(a == c);
  for (float g : a.params.layers[0].ln1_gain.values()) CHECK(g == 1.0f);
  for (float x : a.params.final_bias.values()) CHECK(x == 0.0f);
  double s2 = 0.0;
  for (float x : a.params.head.values()) s2 += double(x) * x;
  CHECK(std::sqrt(s2 / a.params.head.size()) == doctest::Approx(0.02).epsilon(0.15));
}

TEST_CASE("parameter count matches the architecture") {
  const auto cfg = testing::tiny_config();
  const auto m = init_model<double>(cfg, Rng(1));
  const std::size_t d = cfg.d_model, f = cfg.d_ffn(), v = cfg.vocab_size;
  const std::size_t per_layer = 4 * d + 4 * d * d + d * f + f + f * d + d;
  const std::size_t expect = v * d + cfg.max_seq_len * d + cfg.d_visual * d + d +
                             cfg.n_layers * per_layer + 2 * d + d * v;
  CHECK(m.params.parameter_count() == expect);
}

TEST_CASE("attention is causal and row-stochastic") {
  const auto model = init_model<double>(testing::tiny_config(), Rng(3));
  const auto input = sample_input(4);
  const auto trace = forward(model, input);
  REQUIRE(trace.attention.size() == 2);
  for (const auto& layer : trace.attention) {
    REQUIRE(layer.size() == 2);
    for (const auto& a : layer) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (j > i) CHECK(a(i, j) == 0.0);
          CHECK(a(i, j) >= 0.0);
          sum += a(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  CHECK(trace.hidden_states.size() == 3);
  CHECK(trace.logits.rows() == input.size());
}

TEST_CASE("later tokens do not change earlier outputs") {
  auto model = init_model<double>(testing::tiny_config(), Rng(5));
  testing::jitter(model, Rng(6), 0.1);
  auto input = sample_input(7);
  const auto base = forward(model, input);
  input.tokens.back() = Vocabulary::eos;
  const auto changed = forward(model, input);
  const std::size_t last = input.size() - 1;
  for (std::size_t i = 0; i < last; ++i) {
    for (std::size_t v = 0; v < base.logits.cols(); ++v) CHECK(base.logits(i, v) == changed.logits(i, v));
  }
  bool differs = false;
  for (std::size_t v = 0; v < base.logits.cols(); ++v) differs |= base.logits(last, v) != changed.logits(last, v);
  CHECK(differs);
}

TEST_CASE("decode_hidden reproduces the forward logits") {
  auto model = init_model<double>(testing::tiny_config(), Rng(8));
  testing::jitter(model, Rng(9), 0.2);
  const auto input = sample_input(10);
  const auto trace = forward(model, input);
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto l = decode_hidden(model, trace.hidden_states.back().row(i));
    for (std::size_t v = 0; v < l.size(); ++v) CHECK(l[v] == trace.logits(i, v));
  }
}

TEST_CASE("visual slots embed through the projector") {
  auto model = init_model<double>(testing::tiny_config(), Rng(11));
  const auto input = sample_input(12);
  const auto trace = forward(model, input);
  REQUIRE(input.is_visual(1));
  const auto proj = project_visual(model, input.visual[0]);
  for (std::size_t c = 0; c < proj.size(); ++c) {
    CHECK(trace.hidden_states[0](1, c) ==
          doctest::Approx(proj[c] + model.params.positional_embedding(1, c)).epsilon(1e-14));
  }
}

TEST_CASE("float and double forward passes agree") {
  const auto md = init_model<double>(testing::tiny_config(), Rng(13));
  const auto mf = md.cast<float>();
  const auto input = sample_input(14);
  const auto td = forward(md, input);
  const auto tf = forward(mf, input);
  for (std::size_t i = 0; i < td.logits.size(); ++i) {
    CHECK(std::abs(td.logits.values()[i] - tf.logits.values()[i]) < 1e-4);
  }
}

TEST_CASE("input validation") {
  const auto cfg = testing::tiny_config();
  auto input = sample_input(15);
  CHECK_NOTHROW(input.validate(cfg));
  auto bad = input;
  bad.visual.pop_back();
  CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);
  bad = input;
  bad.tokens[0] = 99;
  CHECK_THROWS_WITH(bad.validate(cfg), "token id 99 outside vocabulary of 25");
  bad = input;
  while (bad.size() <= cfg.max_seq_len) bad.push_token(Vocabulary::pad, Segment::special);
  CHECK_THROWS_AS(bad.validate(cfg), std::invalid_argument);
  CHECK_THROWS_WITH(InputSequence{}.validate(cfg), "empty input sequence");
}

TEST_CASE("greedy selection breaks ties toward the lowest id") {
  Rng rng(1);
  const std::vector<double> logits{0.5, 2.0, 2.0, 1.0};
  CHECK(select_token(logits, DecodePolicy::greedy(), rng) == 1);
}

TEST_CASE("temperature sampling follows softmax(logits / T)") {
  const std::vector<double> logits{1.0, 0.0, -1.0, 0.5};
  for (double t : {0.5, 1.0, 2.0}) {
    std::vector<double> scaled;
    for (double l : logits) scaled.push_back(l / t);
    const auto p = softmax(scaled);
    Rng rng(static_cast<std::uint64_t>(t * 100));
    std::vector<double> counts(4, 0.0);
    const int n = 40000;
    for (int i = 0; i < n; ++i) counts[select_token(logits, DecodePolicy::sampled(t), rng)] += 1.0;
    for (std::size_t k = 0; k < 4; ++k) {
      const double sd = std::sqrt(p[k] * (1 - p[k]) / n);
      CHECK(std::abs(counts[k] / n - p[k]) < 5 * sd);
    }
  }
}

TEST_CASE("top-k sampling never leaves the k best tokens") {
  const std::vector<double> logits{0.1, 3.0, 0.2, 2.9, -5.0};
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const auto t = select_token(logits, DecodePolicy::sampled(5.0, 2), rng);
    CHECK((t == 1 || t == 3));
  }
  CHECK_THROWS_AS(select_token(logits, DecodePolicy::sampled(0.0), rng), std::invalid_argument);
}

TEST_CASE("generation is reproducible and honours eos and budget") {
  auto model = init_model<double>(testing::tiny_config(), Rng(16));
  testing::jitter(model, Rng(17), 0.3);
  const auto inst = testing::instances(1, 18).front();
  GenerateOptions opts;
  opts.max_new_tokens = 6;
  Rng r1(5), r2(5);
  const auto a = generate(model, one_stage_prompt(inst), DecodePolicy::sampled(1.0), r1, opts);
  const auto b = generate(model, one_stage_prompt(inst), DecodePolicy::sampled(1.0), r2, opts);
  CHECK(a.tokens == b.tokens);
  CHECK(a.tokens.size() == 6);
  CHECK(a.step_distributions.size() == 6);

  // Force eos to be the argmax everywhere.
  auto eos_model = model;
  for (std::size_t r = 0; r < eos_model.params.head.rows(); ++r) {
    eos_model.params.head(r, Vocabulary::eos) = 0.0;
  }
  eos_model.params.final_gain.fill(0.0);
  eos_model.params.final_bias.fill(0.0);
  eos_model.params.final_bias(0, 0) = 1.0;
  eos_model.params.head.fill(0.0);
  eos_model.params.head(0, Vocabulary::eos) = 5.0;
  opts.eos_token = Vocabulary::eos;
  Rng r3(1);
  const auto c = generate(eos_model, one_stage_prompt(inst), DecodePolicy::greedy(), r3, opts);
  CHECK(c.stopped_at_eos);
  CHECK(c.tokens == std::vector<TokenId>{Vocabulary::eos});
}
