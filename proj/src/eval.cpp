#include "glassbox/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "glassbox/config.hpp"
#include "glassbox/io.hpp"
#include "glassbox/parallel.hpp"

namespace glassbox {

std::string_view mode_name(PredictMode m) noexcept {
  return m == PredictMode::one_stage ? "one_stage" : "two_stage_pipeline";
}

double quality_score(std::span<const double> distribution, const Vocabulary& vocab) {
  double mass = 0.0;
  double weighted = 0.0;
  for (int level = 0; level < kQualityLevels; ++level) {
    const auto id = static_cast<std::size_t>(vocab.quality_token(level));
    if (id >= distribution.size()) {
      throw std::invalid_argument("distribution does not cover the quality tokens");
    }
    mass += distribution[id];
    weighted += level * distribution[id];
  }
  if (!(mass > 0.0)) return 2.0;
  return weighted / mass;
}

namespace {

QualityPrediction make_prediction(TokenId token, std::span<const double> dist,
                                  const Vocabulary& vocab) {
  QualityPrediction p;
  p.token = token;
  p.level = vocab.quality_level_of(token);
  p.score = quality_score(dist, vocab);
  return p;
}

}  // namespace

template <typename T>
QualityPrediction predict_quality(const ModelState<T>& model, const SyntheticInstance& instance,
                                  PredictMode mode, const DecodePolicy& policy, Rng& rng,
                                  const Vocabulary& vocab) {
  const std::size_t K = vocab.attribute_count();
  GenerateOptions opts;
  opts.eos_token = Vocabulary::eos;

  if (mode == PredictMode::one_stage) {
    opts.max_new_tokens = K + 1;
    const auto gen = generate(model, one_stage_prompt(instance), policy, rng, opts);
    QualityPrediction p;
    if (gen.tokens.size() > K) {
      p = make_prediction(gen.tokens[K], gen.step_distributions[K], vocab);
    } else {
      // Stopped before the quality step: uncommon by definition.
      p = make_prediction(gen.tokens.back(), gen.step_distributions.back(), vocab);
      p.level.reset();
    }
    for (std::size_t i = 0; i < std::min(K, gen.tokens.size()); ++i) {
      if (gen.tokens[i] != Vocabulary::eos) p.description.push_back(gen.tokens[i]);
    }
    return p;
  }

  opts.max_new_tokens = K;
  const auto described = generate(model, describe_prompt(instance), policy, rng, opts);
  std::vector<TokenId> description;
  for (TokenId t : described.tokens) {
    if (t != Vocabulary::eos) description.push_back(t);
  }
  GenerateOptions rate_opts;
  rate_opts.max_new_tokens = 1;
  const auto rated = generate(model, stage_two_input(description), policy, rng, rate_opts);
  QualityPrediction p = make_prediction(rated.tokens[0], rated.step_distributions[0], vocab);
  p.description = std::move(description);
  return p;
}

void DecodeRepeatPlan::validate() const {
  if (repeats < 2) throw std::invalid_argument("instability needs repeats >= 2");
  if (sessions < 1) throw std::invalid_argument("plan needs sessions >= 1");
  policy.validate();
}

Rng DecodeRepeatPlan::stream(std::size_t session, std::size_t sample, std::size_t repeat) const {
  return Rng(seed).split("session").split(session).split(sample).split(repeat);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

std::string format_percent(const MeanStd& ratio) {
  return io::format_fixed(100.0 * ratio.mean) + " (±" + io::format_fixed(100.0 * ratio.std) + ")";
}

PredictionGrid run_predictions(const Predictor& predictor, std::size_t n_samples,
                               const DecodeRepeatPlan& plan) {
  plan.validate();
  if (n_samples == 0) throw std::invalid_argument("empty sample set");
  PredictionGrid grid(plan.sessions,
                      std::vector<std::vector<QualityPrediction>>(
                          n_samples, std::vector<QualityPrediction>(plan.repeats)));
  parallel_for(plan.sessions * n_samples, [&](std::size_t flat) {
    const std::size_t s = flat / n_samples;
    const std::size_t i = flat % n_samples;
    for (std::size_t r = 0; r < plan.repeats; ++r) {
      Rng rng = plan.stream(s, i, r);
      grid[s][i][r] = predictor(i, rng);
    }
  });
  return grid;
}

std::vector<double> session_instability(const PredictionGrid& grid) {
  std::vector<double> out;
  for (const auto& session : grid) {
    if (session.empty()) throw std::invalid_argument("empty sample set");
    std::size_t unstable = 0;
    for (const auto& repeats : session) {
      bool bad = false;
      for (const auto& p : repeats) {
        if (p.uncommon() || p.token != repeats.front().token) bad = true;
      }
      unstable += bad ? 1 : 0;
    }
    out.push_back(static_cast<double>(unstable) / static_cast<double>(session.size()));
  }
  return out;
}

InstabilityResult instability_ratio(const Predictor& predictor, std::size_t n_samples,
                                    const DecodeRepeatPlan& plan) {
  const auto grid = run_predictions(predictor, n_samples, plan);
  InstabilityResult r;
  r.per_session = session_instability(grid);
  r.ratio = mean_std(r.per_session);
  return r;
}

namespace {

template <typename T>
Predictor model_predictor(const ModelState<T>& model, std::span<const SyntheticInstance> samples,
                          PredictMode mode, const DecodePolicy& policy, const Vocabulary& vocab) {
  if (model.config.vocab_size != vocab.size()) {
    throw std::invalid_argument("model vocabulary (" + std::to_string(model.config.vocab_size) +
                                ") does not match corpus vocabulary (" +
                                std::to_string(vocab.size()) + ")");
  }
  return [&model, samples, mode, policy, &vocab](std::size_t i, Rng& rng) {
    return predict_quality(model, samples[i], mode, policy, rng, vocab);
  };
}

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("correlation inputs differ in length: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw std::invalid_argument("correlation needs at least 2 points");
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw std::invalid_argument("undefined correlation");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace

template <typename T>
InstabilityResult instability_ratio(const ModelState<T>& model,
                                    std::span<const SyntheticInstance> samples,
                                    const DecodeRepeatPlan& plan, PredictMode mode,
                                    const Vocabulary& vocab) {
  return instability_ratio(model_predictor(model, samples, mode, plan.policy, vocab),
                           samples.size(), plan);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double srcc(std::span<const double> predictions, std::span<const double> targets) {
  check_pair(predictions, targets);
  const auto rp = average_ranks(predictions);
  const auto rt = average_ranks(targets);
  return pearson(rp, rt);
}

double plcc(std::span<const double> predictions, std::span<const double> targets) {
  check_pair(predictions, targets);
  return pearson(predictions, targets);
}

double accuracy(std::span<const std::optional<int>> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("accuracy length mismatch");
  if (predicted.empty()) throw std::invalid_argument("accuracy of empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] && *predicted[i] == truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

EvalReport build_report(const PredictionGrid& grid, std::span<const SyntheticInstance> samples,
                        const DecodeRepeatPlan& plan, PredictMode mode, std::string label) {
  EvalReport report;
  report.label = std::move(label);
  report.mode = mode;
  report.plan = plan;
  const auto instab = session_instability(grid);
  const std::size_t n = samples.size();

  std::vector<double> mos(n);
  for (std::size_t i = 0; i < n; ++i) mos[i] = samples[i].mos;
  std::vector<double> v_inst, v_acc, v_srcc, v_plcc;
  for (std::size_t s = 0; s < grid.size(); ++s) {
    SessionMetrics m;
    m.instability = instab[s];
    std::vector<std::optional<int>> predicted;
    std::vector<int> truth;
    std::vector<double> scores(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& p : grid[s][i]) {
        predicted.push_back(p.level);
        truth.push_back(samples[i].quality_level);
        scores[i] += p.score;
      }
      scores[i] /= static_cast<double>(grid[s][i].size());
    }
    m.accuracy = accuracy(predicted, truth);
    try {
      m.srcc = srcc(scores, mos);
      m.plcc = plcc(scores, mos);
    } catch (const std::invalid_argument&) {
      m.srcc = std::numeric_limits<double>::quiet_NaN();
      m.plcc = std::numeric_limits<double>::quiet_NaN();
    }
    report.sessions.push_back(m);
    v_inst.push_back(m.instability);
    v_acc.push_back(m.accuracy);
    v_srcc.push_back(m.srcc);
    v_plcc.push_back(m.plcc);
  }
  report.instability = mean_std(v_inst);
  report.accuracy = mean_std(v_acc);
  report.srcc = mean_std(v_srcc);
  report.plcc = mean_std(v_plcc);

  report.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& rec = report.samples[i];
    rec.instance_id = samples[i].id;
    rec.true_level = samples[i].quality_level;
    rec.mos = samples[i].mos;
    for (std::size_t s = 0; s < grid.size(); ++s) {
      std::vector<TokenId> toks;
      std::vector<double> sc;
      for (const auto& p : grid[s][i]) {
        toks.push_back(p.token);
        sc.push_back(p.score);
      }
      rec.tokens.push_back(std::move(toks));
      rec.scores.push_back(std::move(sc));
    }
  }
  return report;
}

template <typename T>
EvalReport evaluate(const ModelState<T>& model, std::span<const SyntheticInstance> samples,
                    const DecodeRepeatPlan& plan, PredictMode mode, const Vocabulary& vocab,
                    std::string label) {
  const auto predictor = model_predictor(model, samples, mode, plan.policy, vocab);
  const auto grid = run_predictions(predictor, samples.size(), plan);
  return build_report(grid, samples, plan, mode, std::move(label));
}

nlohmann::json report_to_json(const EvalReport& report, const Vocabulary& vocab) {
  auto stat = [](const MeanStd& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  nlohmann::json j;
  j["label"] = report.label;
  j["mode"] = std::string(mode_name(report.mode));
  j["plan"] = plan_to_json(report.plan);
  j["samples"] = report.samples.size();
  j["vocabulary_size"] = vocab.size();
  j["instability"] = stat(report.instability);
  j["instability_percent"] = format_percent(report.instability);
  j["accuracy"] = stat(report.accuracy);
  j["accuracy_percent"] = format_percent(report.accuracy);
  j["srcc"] = stat(report.srcc);
  j["plcc"] = stat(report.plcc);
  nlohmann::json sessions = nlohmann::json::array();
  for (std::size_t s = 0; s < report.sessions.size(); ++s) {
    const auto& m = report.sessions[s];
    sessions.push_back({{"session", s},
                        {"seed_stream", "session/" + std::to_string(s)},
                        {"instability", m.instability},
                        {"accuracy", m.accuracy},
                        {"srcc", m.srcc},
                        {"plcc", m.plcc}});
  }
  j["sessions"] = sessions;
  return j;
}

std::string report_samples_csv(const EvalReport& report, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "instance_id,session,repeat,true_level,mos,token,score\n";
  for (const auto& rec : report.samples) {
    for (std::size_t s = 0; s < rec.tokens.size(); ++s) {
      for (std::size_t r = 0; r < rec.tokens[s].size(); ++r) {
        out << rec.instance_id << ',' << s << ',' << r << ',' << rec.true_level << ','
            << io::format_real(rec.mos) << ',' << vocab.name(rec.tokens[s][r]) << ','
            << io::format_real(rec.scores[s][r]) << '\n';
      }
    }
  }
  return out.str();
}

std::string comparison_csv(const EvalReport& one, const EvalReport& two) {
  std::ostringstream out;
  out << "metric,one_stage,two_stage,delta\n";
  auto row = [&out](const char* name, double a, double b, int decimals) {
    out << name << ',' << io::format_fixed(a, decimals) << ',' << io::format_fixed(b, decimals)
        << ',' << io::format_fixed(b - a, decimals) << '\n';
  };
  row("instability_pct", 100.0 * one.instability.mean, 100.0 * two.instability.mean, 2);
  row("instability_std_pct", 100.0 * one.instability.std, 100.0 * two.instability.std, 2);
  row("accuracy_pct", 100.0 * one.accuracy.mean, 100.0 * two.accuracy.mean, 2);
  row("accuracy_std_pct", 100.0 * one.accuracy.std, 100.0 * two.accuracy.std, 2);
  row("srcc", one.srcc.mean, two.srcc.mean, 4);
  row("plcc", one.plcc.mean, two.plcc.mean, 4);
  return out.str();
}

BenchmarkResult run_benchmark(const ModelF& one_stage_model, const ModelF& two_stage_model,
                              std::span<const SyntheticInstance> samples,
                              const DecodeRepeatPlan& plan, const Vocabulary& vocab) {
  BenchmarkResult out;
  out.one_stage = evaluate(one_stage_model, samples, plan, PredictMode::one_stage, vocab, "one_stage");
  out.two_stage =
      evaluate(two_stage_model, samples, plan, PredictMode::two_stage_pipeline, vocab, "two_stage");
  out.comparison_csv = comparison_csv(out.one_stage, out.two_stage);
  return out;
}

#define GLASSBOX_INSTANTIATE(T)                                                               \
  template QualityPrediction predict_quality<T>(const ModelState<T>&, const SyntheticInstance&, \
                                                PredictMode, const DecodePolicy&, Rng&,        \
                                                const Vocabulary&);                           \
  template InstabilityResult instability_ratio<T>(const ModelState<T>&,                       \
                                                  std::span<const SyntheticInstance>,          \
                                                  const DecodeRepeatPlan&, PredictMode,        \
                                                  const Vocabulary&);                          \
  template EvalReport evaluate<T>(const ModelState<T>&, std::span<const SyntheticInstance>,   \
                                  const DecodeRepeatPlan&, PredictMode, const Vocabulary&,    \
                                  std::string);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

}  // namespace glassbox
