#pragma once

// JSON run configuration. Every section is optional; missing keys take the
// documented defaults and unknown keys are rejected.
//
// {
//   "seed": 7,
//   "model":     {"vocab_size", "d_model", "n_layers", "n_heads", "d_visual",
//                 "max_seq_len", "ffn_mult"},
//   "datagen":   {"n_instances", "train_fraction", "attribute_names", "n_visual",
//                 "d_visual", "visual_noise", "mos_noise", "formats", "seed"},
//   "loss":      {"epsilon"},
//   "optimizer": {"lr", "beta1", "beta2", "eps", "weight_decay", "grad_clip"},
//   "schedule":  {"one_stage_iters", "stage1_iters", "stage2_iters", "batch_size",
//                 "warmup_fraction", "log_every", "seed"},
//   "plan":      {"repeats", "sessions", "policy", "temperature", "top_k", "seed"},
//   "probe":     {"n_samples", "target_class", "topk"}
// }

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "glassbox/datagen.hpp"
#include "glassbox/eval.hpp"
#include "glassbox/model.hpp"
#include "glassbox/training.hpp"

namespace glassbox {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProbeConfig {
  std::size_t n_samples = 720;
  std::string target_class = "poor";
  std::size_t topk = 4;
};

struct RunConfig {
  ModelConfig model;
  DatagenConfig datagen;
  LossConfig loss;
  OptimizerConfig optimizer;
  Schedule schedule;
  DecodeRepeatPlan plan;
  ProbeConfig probe;

  void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json datagen_config_to_json(const DatagenConfig& c);
DatagenConfig datagen_config_from_json(const nlohmann::json& j);
nlohmann::json plan_to_json(const DecodeRepeatPlan& p);
DecodeRepeatPlan plan_from_json(const nlohmann::json& j);

// Effective configuration with every default resolved.
nlohmann::json run_config_to_json(const RunConfig& c);
// A top-level "seed" overrides the datagen, schedule and plan seeds.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace glassbox
