#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glassbox/datagen.hpp"
#include "glassbox/model.hpp"
#include "glassbox/rng.hpp"

namespace glassbox {

enum class PredictMode { one_stage, two_stage_pipeline };
std::string_view mode_name(PredictMode m) noexcept;

struct QualityPrediction {
  TokenId token = Vocabulary::pad;
  std::optional<int> level;  // nullopt = "other" (not a quality token)
  double score = 2.0;        // probability-weighted level in [0, 4]
  std::vector<TokenId> description;

  bool uncommon() const noexcept { return !level.has_value(); }
};

// sum_l l * p(token_l) / sum_l p(token_l) over the five quality tokens.
// Falls back to the midpoint 2.0 when the quality tokens carry no mass.
double quality_score(std::span<const double> distribution, const Vocabulary& vocab);

// one_stage: a single generation from [bos][visual][rate_quality]; the token at
// step len(description) is the prediction. two_stage_pipeline: generate the
// description from [bos][visual][describe], then feed the generated
// description into the stage-two template and decode one token. Both steps
// use `policy`.
template <typename T>
QualityPrediction predict_quality(const ModelState<T>& model, const SyntheticInstance& instance,
                                  PredictMode mode, const DecodePolicy& policy, Rng& rng,
                                  const Vocabulary& vocab);

struct DecodeRepeatPlan {
  std::size_t repeats = 5;
  std::size_t sessions = 3;
  DecodePolicy policy = DecodePolicy::sampled(1.0);
  std::uint64_t seed = 1;

  void validate() const;
  // Stream for (session, sample, repeat); sessions use disjoint sub-streams.
  Rng stream(std::size_t session, std::size_t sample, std::size_t repeat) const;
};

using Predictor = std::function<QualityPrediction(std::size_t sample, Rng& rng)>;

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation across sessions
};
MeanStd mean_std(std::span<const double> values);

// Table-style percent formatting, e.g. "22.00 (±0.08)".
std::string format_percent(const MeanStd& ratio);

// predictions[session][sample][repeat]
using PredictionGrid = std::vector<std::vector<std::vector<QualityPrediction>>>;

PredictionGrid run_predictions(const Predictor& predictor, std::size_t n_samples,
                               const DecodeRepeatPlan& plan);

// A sample is unstable in a session when its repeats disagree or any repeat
// is uncommon. Returns the per-session unstable fraction.
std::vector<double> session_instability(const PredictionGrid& grid);

struct InstabilityResult {
  std::vector<double> per_session;
  MeanStd ratio;
};
InstabilityResult instability_ratio(const Predictor& predictor, std::size_t n_samples,
                                    const DecodeRepeatPlan& plan);

template <typename T>
InstabilityResult instability_ratio(const ModelState<T>& model,
                                    std::span<const SyntheticInstance> samples,
                                    const DecodeRepeatPlan& plan, PredictMode mode,
                                    const Vocabulary& vocab);

// Spearman rank correlation with average ranks for ties.
double srcc(std::span<const double> predictions, std::span<const double> targets);
// Pearson linear correlation.
double plcc(std::span<const double> predictions, std::span<const double> targets);
// Exact-match rate; nullopt predictions never match.
double accuracy(std::span<const std::optional<int>> predicted, std::span<const int> truth);
// Average (fractional) ranks, 1-based.
std::vector<double> average_ranks(std::span<const double> values);

struct SessionMetrics {
  double instability = 0.0;
  double accuracy = 0.0;
  double srcc = 0.0;
  double plcc = 0.0;
};

struct SampleRecord {
  std::size_t instance_id = 0;
  int true_level = 0;
  double mos = 0.0;
  // tokens[session][repeat], scores[session][repeat]
  std::vector<std::vector<TokenId>> tokens;
  std::vector<std::vector<double>> scores;
};

struct EvalReport {
  std::string label;
  PredictMode mode = PredictMode::one_stage;
  DecodeRepeatPlan plan;
  std::vector<SessionMetrics> sessions;
  MeanStd instability;
  MeanStd accuracy;
  MeanStd srcc;
  MeanStd plcc;
  std::vector<SampleRecord> samples;
};

// Per session: instability over all samples; accuracy over every
// (sample, repeat); SRCC/PLCC between per-sample mean score and MOS.
EvalReport build_report(const PredictionGrid& grid, std::span<const SyntheticInstance> samples,
                        const DecodeRepeatPlan& plan, PredictMode mode, std::string label);

template <typename T>
EvalReport evaluate(const ModelState<T>& model, std::span<const SyntheticInstance> samples,
                    const DecodeRepeatPlan& plan, PredictMode mode, const Vocabulary& vocab,
                    std::string label = "");

nlohmann::json report_to_json(const EvalReport& report, const Vocabulary& vocab);
// Header: instance_id,session,repeat,true_level,mos,token,score
std::string report_samples_csv(const EvalReport& report, const Vocabulary& vocab);

struct BenchmarkResult {
  EvalReport one_stage;
  EvalReport two_stage;
  std::string comparison_csv;  // metric,one_stage,two_stage,delta
};

// Evaluates the one-stage model in one-stage mode and the two-stage model in
// pipeline mode on identical samples and seeds.
BenchmarkResult run_benchmark(const ModelF& one_stage_model, const ModelF& two_stage_model,
                              std::span<const SyntheticInstance> samples,
                              const DecodeRepeatPlan& plan, const Vocabulary& vocab);

std::string comparison_csv(const EvalReport& one_stage, const EvalReport& two_stage);

}  // namespace glassbox
