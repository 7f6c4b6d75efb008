#include "glassbox/config.hpp"

#include <set>

#include "glassbox/io.hpp"

namespace glassbox {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& section,
                    std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  const std::set<std::string> known(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) +
                        "'");
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_visual", c.d_visual},     {"max_seq_len", c.max_seq_len},
          {"ffn_mult", c.ffn_mult}};
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, "model",
                 {"vocab_size", "d_model", "n_layers", "n_heads", "d_visual", "max_seq_len",
                  "ffn_mult"});
  ModelConfig c;
  read(j, "vocab_size", c.vocab_size, "model");
  read(j, "d_model", c.d_model, "model");
  read(j, "n_layers", c.n_layers, "model");
  read(j, "n_heads", c.n_heads, "model");
  read(j, "d_visual", c.d_visual, "model");
  read(j, "max_seq_len", c.max_seq_len, "model");
  read(j, "ffn_mult", c.ffn_mult, "model");
  return c;
}

json datagen_config_to_json(const DatagenConfig& c) {
  return {{"n_instances", c.n_instances},   {"train_fraction", c.train_fraction},
          {"attribute_names", c.attribute_names}, {"n_visual", c.n_visual},
          {"d_visual", c.d_visual},         {"visual_noise", c.visual_noise},
          {"mos_noise", c.mos_noise},       {"formats", c.formats},
          {"seed", c.seed}};
}

DatagenConfig datagen_config_from_json(const json& j) {
  reject_unknown(j, "datagen",
                 {"n_instances", "train_fraction", "attribute_names", "n_visual", "d_visual",
                  "visual_noise", "mos_noise", "formats", "seed"});
  DatagenConfig c;
  read(j, "n_instances", c.n_instances, "datagen");
  read(j, "train_fraction", c.train_fraction, "datagen");
  read(j, "attribute_names", c.attribute_names, "datagen");
  read(j, "n_visual", c.n_visual, "datagen");
  read(j, "d_visual", c.d_visual, "datagen");
  read(j, "visual_noise", c.visual_noise, "datagen");
  read(j, "mos_noise", c.mos_noise, "datagen");
  read(j, "formats", c.formats, "datagen");
  read(j, "seed", c.seed, "datagen");
  return c;
}

json plan_to_json(const DecodeRepeatPlan& p) {
  json j{{"repeats", p.repeats},
         {"sessions", p.sessions},
         {"policy", p.policy.kind == DecodePolicy::Kind::greedy ? "greedy" : "temperature"},
         {"temperature", p.policy.temperature},
         {"top_k", p.policy.top_k},
         {"seed", p.seed}};
  return j;
}

DecodeRepeatPlan plan_from_json(const json& j) {
  reject_unknown(j, "plan", {"repeats", "sessions", "policy", "temperature", "top_k", "seed"});
  DecodeRepeatPlan p;
  read(j, "repeats", p.repeats, "plan");
  read(j, "sessions", p.sessions, "plan");
  std::string policy = "temperature";
  read(j, "policy", policy, "plan");
  if (policy == "greedy") {
    p.policy.kind = DecodePolicy::Kind::greedy;
  } else if (policy == "temperature") {
    p.policy.kind = DecodePolicy::Kind::temperature;
  } else {
    throw ConfigError("plan.policy must be greedy or temperature, got '" + policy + "'");
  }
  read(j, "temperature", p.policy.temperature, "plan");
  read(j, "top_k", p.policy.top_k, "plan");
  read(j, "seed", p.seed, "plan");
  return p;
}

void RunConfig::validate() const {
  try {
    model.validate();
    datagen.validate();
    loss.validate();
    optimizer.validate();
    schedule.validate();
    plan.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.d_visual != datagen.d_visual) {
    throw ConfigError("model.d_visual (" + std::to_string(model.d_visual) +
                      ") must equal datagen.d_visual (" + std::to_string(datagen.d_visual) + ")");
  }
  const Vocabulary vocab(datagen.attribute_names);
  if (model.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size (" + std::to_string(model.vocab_size) +
                      ") must equal the corpus vocabulary size (" + std::to_string(vocab.size()) +
                      ")");
  }
  if (probe.topk == 0) throw ConfigError("probe.topk must be >= 1");
  if (!Vocabulary::quality_names().empty() &&
      std::find(Vocabulary::quality_names().begin(), Vocabulary::quality_names().end(),
                probe.target_class) == Vocabulary::quality_names().end()) {
    throw ConfigError("probe.target_class must be a quality token, got '" + probe.target_class +
                      "'");
  }
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["model"] = model_config_to_json(c.model);
  j["datagen"] = datagen_config_to_json(c.datagen);
  j["loss"] = {{"epsilon", c.loss.epsilon}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"grad_clip", c.optimizer.grad_clip}};
  j["schedule"] = {{"one_stage_iters", c.schedule.one_stage_iters},
                   {"stage1_iters", c.schedule.stage1_iters},
                   {"stage2_iters", c.schedule.stage2_iters},
                   {"batch_size", c.schedule.batch_size},
                   {"warmup_fraction", c.schedule.warmup_fraction},
                   {"stage2_replay", c.schedule.stage2_replay},
                   {"stage2_lr_scale", c.schedule.stage2_lr_scale},
                   {"log_every", c.schedule.log_every},
                   {"seed", c.schedule.seed}};
  j["plan"] = plan_to_json(c.plan);
  j["probe"] = {{"n_samples", c.probe.n_samples},
                {"target_class", c.probe.target_class},
                {"topk", c.probe.topk}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, "",
                 {"seed", "model", "datagen", "loss", "optimizer", "schedule", "plan", "probe"});
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("datagen")) c.datagen = datagen_config_from_json(j["datagen"]);
  if (j.contains("loss")) {
    reject_unknown(j["loss"], "loss", {"epsilon"});
    read(j["loss"], "epsilon", c.loss.epsilon, "loss");
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    reject_unknown(o, "optimizer", {"lr", "beta1", "beta2", "eps", "weight_decay", "grad_clip"});
    read(o, "lr", c.optimizer.lr, "optimizer");
    read(o, "beta1", c.optimizer.beta1, "optimizer");
    read(o, "beta2", c.optimizer.beta2, "optimizer");
    read(o, "eps", c.optimizer.eps, "optimizer");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer");
    read(o, "grad_clip", c.optimizer.grad_clip, "optimizer");
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    reject_unknown(s, "schedule",
                   {"one_stage_iters", "stage1_iters", "stage2_iters", "batch_size",
                    "warmup_fraction", "stage2_replay", "stage2_lr_scale", "log_every", "seed"});
    read(s, "one_stage_iters", c.schedule.one_stage_iters, "schedule");
    read(s, "stage1_iters", c.schedule.stage1_iters, "schedule");
    read(s, "stage2_iters", c.schedule.stage2_iters, "schedule");
    read(s, "batch_size", c.schedule.batch_size, "schedule");
    read(s, "warmup_fraction", c.schedule.warmup_fraction, "schedule");
    read(s, "stage2_replay", c.schedule.stage2_replay, "schedule");
    read(s, "stage2_lr_scale", c.schedule.stage2_lr_scale, "schedule");
    read(s, "log_every", c.schedule.log_every, "schedule");
    read(s, "seed", c.schedule.seed, "schedule");
  }
  if (j.contains("plan")) c.plan = plan_from_json(j["plan"]);
  if (j.contains("probe")) {
    const auto& p = j["probe"];
    reject_unknown(p, "probe", {"n_samples", "target_class", "topk"});
    read(p, "n_samples", c.probe.n_samples, "probe");
    read(p, "target_class", c.probe.target_class, "probe");
    read(p, "topk", c.probe.topk, "probe");
  }
  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    read(j, "seed", seed, "");
    c.datagen.seed = seed;
    c.schedule.seed = seed;
    c.plan.seed = seed;
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace glassbox
