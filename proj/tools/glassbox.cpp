// glassbox: datagen / train / eval / lens / probe.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "glassbox/checkpoint.hpp"
#include "glassbox/config.hpp"
#include "glassbox/introspect.hpp"
#include "glassbox/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace glassbox;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

void write_json(const fs::path& path, const json& j) { io::write_file_atomic(path, j.dump(2) + "\n"); }

void prepare_out(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  }
}

// Instances of a split, rebuilt from whichever visual-bearing records exist.
std::vector<SyntheticInstance> load_instances(const fs::path& corpus, std::string_view split,
                                              const Vocabulary& vocab) {
  for (StageTag tag : {StageTag::one_stage, StageTag::stage1}) {
    const auto file = corpus_file(corpus, split, tag);
    if (fs::exists(file)) return instances_from_examples(read_examples(file, vocab), vocab);
  }
  throw std::runtime_error("corpus " + corpus.string() + " has no " + std::string(split) +
                           "_one_stage.jsonl or " + std::string(split) + "_stage1.jsonl");
}

Regimen regimen_of(const Checkpoint& ckpt, const fs::path& path) {
  try {
    return parse_regimen(ckpt.tag);
  } catch (const std::invalid_argument&) {
    throw std::runtime_error("checkpoint " + path.string() + " carries tag '" + ckpt.tag +
                             "', expected one_stage or two_stage");
  }
}

void check_vocab(const ModelConfig& model, const Vocabulary& vocab, const fs::path& corpus) {
  if (model.vocab_size != vocab.size()) {
    throw std::runtime_error("model vocab_size " + std::to_string(model.vocab_size) +
                             " does not match corpus " + corpus.string() + " vocabulary of " +
                             std::to_string(vocab.size()) + " tokens");
  }
}

// ---------------------------------------------------------------- datagen

struct DatagenArgs {
  std::string config, out;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
};

void run_datagen(const DatagenArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.n) cfg.datagen.n_instances = *a.n;
  if (a.seed) cfg.datagen.seed = *a.seed;
  try {
    cfg.datagen.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  prepare_out(a.out);
  const auto manifest = build_corpus(cfg.datagen, a.out);
  write_json(fs::path(a.out) / "config.json", run_config_to_json(cfg));
  std::cout << "corpus " << a.out << ": " << manifest.total << " instances, " << manifest.train
            << " train, " << manifest.test << " test, " << manifest.files.size() << " files\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, regimen, corpus, out;
  std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  cfg.schedule.regimen = parse_regimen(a.regimen);
  if (a.seed) cfg.schedule.seed = *a.seed;

  const fs::path corpus(a.corpus);
  const auto manifest = read_manifest(corpus);
  const Vocabulary vocab = vocabulary_from_manifest(manifest);
  check_vocab(cfg.model, vocab, corpus);
  if (cfg.model.d_visual != manifest.config.d_visual) {
    throw std::runtime_error("model d_visual " + std::to_string(cfg.model.d_visual) +
                             " does not match corpus d_visual " +
                             std::to_string(manifest.config.d_visual));
  }

  std::vector<StageTag> needed;
  if (cfg.schedule.regimen == Regimen::one_stage) {
    needed = {StageTag::one_stage};
  } else {
    needed = {StageTag::stage1, StageTag::stage2};
  }
  std::string missing;
  for (StageTag t : needed) {
    const auto f = corpus_file(corpus, "train", t);
    if (!fs::exists(f)) missing += (missing.empty() ? "" : ", ") + f.filename().string();
  }
  if (!missing.empty()) {
    throw std::runtime_error("regimen " + a.regimen + " needs stage files missing from corpus " +
                             corpus.string() + ": " + missing);
  }

  TrainingData data;
  for (StageTag t : needed) {
    auto examples = read_examples(corpus_file(corpus, "train", t), vocab);
    (t == StageTag::one_stage ? data.one_stage : t == StageTag::stage1 ? data.stage1 : data.stage2) =
        std::move(examples);
  }

  prepare_out(a.out);
  const fs::path out(a.out);
  write_json(out / "config.json", run_config_to_json(cfg));
  const auto result = train(data, cfg.schedule, cfg.loss, cfg.optimizer, cfg.model);
  write_checkpoint_file(out / "model.gbx", result.model, std::string(regimen_name(cfg.schedule.regimen)));
  io::write_file_atomic(out / "loss.csv", loss_curve_csv(result.curve));

  json m;
  m["command"] = "train";
  m["regimen"] = regimen_name(cfg.schedule.regimen);
  m["corpus"] = corpus.string();
  m["corpus_seed"] = manifest.config.seed;
  m["seed"] = cfg.schedule.seed;
  m["stage_iters"] = result.stage_iters;
  m["iterations_run"] = result.iterations_run;
  if (result.stage_iters.size() == 2 && result.stage_iters[1] > 0) {
    m["stage_ratio"] = static_cast<double>(result.stage_iters[0]) /
                       static_cast<double>(result.stage_iters[1]);
  }
  m["final_loss"] = result.curve.empty() ? json(nullptr) : json(result.curve.back().loss);
  m["parameters"] = result.model.params.parameter_count();
  m["config"] = run_config_to_json(cfg);
  m["outputs"] = {"model.gbx", "loss.csv", "config.json", "manifest.json"};
  write_json(out / "manifest.json", m);
  std::cout << "trained " << regimen_name(cfg.schedule.regimen) << " for " << result.iterations_run
            << " iterations, final loss "
            << (result.curve.empty() ? std::string("n/a") : io::format_fixed(result.curve.back().loss, 4))
            << "\n";
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string config, corpus, out, plan, split = "test";
  std::vector<std::string> checkpoints;
  std::optional<std::uint64_t> seed;
};

void run_eval(const EvalArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (!a.plan.empty()) {
    if (!fs::exists(a.plan)) throw ConfigError("plan file not found: " + a.plan);
    cfg.plan = plan_from_json(json::parse(io::read_text_file(a.plan)));
  }
  if (a.seed) cfg.plan.seed = *a.seed;
  cfg.plan.validate();
  if (a.checkpoints.empty() || a.checkpoints.size() > 2) {
    throw UsageError("eval takes one or two --checkpoint paths");
  }

  std::vector<Checkpoint> ckpts;
  for (const auto& p : a.checkpoints) ckpts.push_back(read_checkpoint_file(p));
  const fs::path corpus(a.corpus);
  const Vocabulary vocab = vocabulary_from_manifest(read_manifest(corpus));
  for (const auto& c : ckpts) check_vocab(c.model.config, vocab, corpus);
  const auto samples = load_instances(corpus, a.split, vocab);

  prepare_out(a.out);
  const fs::path out(a.out);
  json cfg_echo = run_config_to_json(cfg);
  cfg_echo["plan"] = plan_to_json(cfg.plan);
  write_json(out / "config.json", cfg_echo);

  json m;
  m["command"] = "eval";
  m["corpus"] = corpus.string();
  m["split"] = a.split;
  m["samples"] = samples.size();
  m["plan"] = plan_to_json(cfg.plan);
  m["checkpoints"] = a.checkpoints;
  std::vector<std::string> outputs{"config.json", "manifest.json"};

  auto emit = [&](const EvalReport& r) {
    write_json(out / ("report_" + r.label + ".json"), report_to_json(r, vocab));
    io::write_file_atomic(out / ("samples_" + r.label + ".csv"), report_samples_csv(r, vocab));
    outputs.push_back("report_" + r.label + ".json");
    outputs.push_back("samples_" + r.label + ".csv");
    std::cout << r.label << " (" << mode_name(r.mode) << "): instability "
              << format_percent(r.instability) << "%, accuracy "
              << format_percent({r.accuracy.mean, r.accuracy.std}) << "%, srcc "
              << io::format_fixed(r.srcc.mean, 4) << ", plcc " << io::format_fixed(r.plcc.mean, 4)
              << "\n";
  };

  if (ckpts.size() == 1) {
    const Regimen reg = regimen_of(ckpts[0], a.checkpoints[0]);
    const PredictMode mode =
        reg == Regimen::one_stage ? PredictMode::one_stage : PredictMode::two_stage_pipeline;
    emit(evaluate(ckpts[0].model, samples, cfg.plan, mode, vocab, std::string(regimen_name(reg))));
  } else {
    const Regimen r0 = regimen_of(ckpts[0], a.checkpoints[0]);
    const Regimen r1 = regimen_of(ckpts[1], a.checkpoints[1]);
    if (r0 == r1) {
      throw std::runtime_error("comparison needs one one_stage and one two_stage checkpoint; both are " +
                               std::string(regimen_name(r0)));
    }
    const ModelF& one = r0 == Regimen::one_stage ? ckpts[0].model : ckpts[1].model;
    const ModelF& two = r0 == Regimen::one_stage ? ckpts[1].model : ckpts[0].model;
    const auto bench = run_benchmark(one, two, samples, cfg.plan, vocab);
    emit(bench.one_stage);
    emit(bench.two_stage);
    io::write_file_atomic(out / "comparison.csv", bench.comparison_csv);
    outputs.push_back("comparison.csv");
  }
  m["outputs"] = outputs;
  write_json(out / "manifest.json", m);
}

// ---------------------------------------------------------------- lens

struct LensArgs {
  std::string checkpoint, corpus, sample_file, layers = "auto", out;
  std::optional<std::size_t> input_id;
  std::size_t topk = 4;
  bool svg = false;
};

void run_lens(const LensArgs& a) {
  const auto ckpt = read_checkpoint_file(a.checkpoint);
  const Regimen reg = regimen_of(ckpt, a.checkpoint);
  if (a.input_id.has_value() == !a.sample_file.empty()) {
    throw UsageError("lens needs exactly one of --input-id or --sample-file");
  }
  if (a.input_id && a.corpus.empty()) throw UsageError("--input-id requires --corpus");
  if (a.topk == 0) throw UsageError("--topk must be >= 1");

  std::optional<Vocabulary> vocab;
  SyntheticInstance instance;
  if (a.input_id) {
    vocab = vocabulary_from_manifest(read_manifest(a.corpus));
    bool found = false;
    for (std::string_view split : {"test", "train"}) {
      for (auto& inst : load_instances(a.corpus, split, *vocab)) {
        if (inst.id == *a.input_id) {
          instance = std::move(inst);
          found = true;
          break;
        }
      }
      if (found) break;
    }
    if (!found) throw std::runtime_error("instance id " + std::to_string(*a.input_id) + " not in corpus " + a.corpus);
  } else {
    vocab = a.corpus.empty() ? Vocabulary(DatagenConfig{}.attribute_names)
                             : vocabulary_from_manifest(read_manifest(a.corpus));
    if (!fs::exists(a.sample_file)) throw std::runtime_error("sample file not found: " + a.sample_file);
    const auto examples = read_examples(a.sample_file, *vocab);
    const auto instances = instances_from_examples(examples, *vocab);
    if (instances.empty()) throw std::runtime_error("sample file " + a.sample_file + " holds no records");
    instance = instances.front();
  }
  check_vocab(ckpt.model.config, *vocab, a.corpus.empty() ? fs::path(a.sample_file) : fs::path(a.corpus));

  const LayerRange range = parse_layer_range(a.layers, ckpt.model.config);
  const auto input = probe_sequence(instance, reg);
  const auto trace = forward(ckpt.model, input);
  const auto lens = logit_lens(ckpt.model, trace, *input.quality_position, range, a.topk);

  prepare_out(a.out);
  const fs::path out(a.out);
  io::write_file_atomic(out / "lens.csv", lens_csv(lens, *vocab));
  std::vector<std::string> outputs{"lens.csv", "manifest.json"};
  if (a.svg) {
    io::write_file_atomic(out / "lens.svg", lens_svg(lens, *vocab));
    outputs.push_back("lens.svg");
  }
  json m;
  m["command"] = "lens";
  m["checkpoint"] = a.checkpoint;
  m["regimen"] = regimen_name(reg);
  m["instance_id"] = instance.id;
  m["position"] = lens.position;
  m["layers"] = {range.first, range.last};
  m["topk"] = a.topk;
  m["outputs"] = outputs;
  write_json(out / "manifest.json", m);
  for (const auto& l : lens.layers) {
    std::cout << "layer " << l.layer << ":";
    for (const auto& c : l.top) std::cout << ' ' << vocab->name(c.token) << '=' << io::format_fixed(c.probability, 3);
    std::cout << '\n';
  }
}

// ---------------------------------------------------------------- probe

struct ProbeArgs {
  std::string config, checkpoint, corpus, out, split = "test", layers = "auto";
  std::optional<std::size_t> n, layer, head;
  std::optional<std::string> target_class;
  bool svg = false;
};

void run_probe(const ProbeArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto ckpt = read_checkpoint_file(a.checkpoint);
  const Regimen reg = regimen_of(ckpt, a.checkpoint);
  const Vocabulary vocab = vocabulary_from_manifest(read_manifest(a.corpus));
  check_vocab(ckpt.model.config, vocab, a.corpus);
  auto samples = load_instances(a.corpus, a.split, vocab);
  const std::size_t n = std::min(a.n.value_or(cfg.probe.n_samples), samples.size());
  if (n == 0) throw std::runtime_error("probe needs --n >= 1");
  samples.resize(n);

  AttentionAggregation agg{a.layer, a.head};
  const auto map = average_attention_map(ckpt.model, samples, reg, agg);

  const std::string target_name = a.target_class.value_or(cfg.probe.target_class);
  const auto target = vocab.find(target_name);
  if (!target || !vocab.is_quality(*target)) {
    throw ConfigError("target class must be a quality token, got '" + target_name + "'");
  }
  const LayerRange range = parse_layer_range(a.layers, ckpt.model.config);
  const auto filtered = filter_by_prediction(ckpt.model, samples, reg, *target);

  prepare_out(a.out);
  const fs::path out(a.out);
  io::write_file_atomic(out / "attention.csv", attention_csv(map.mean));
  io::write_file_atomic(out / "segments.csv", segment_summary_csv(map.quality_mass));
  std::vector<std::string> outputs{"attention.csv", "segments.csv"};
  std::optional<TokenEvolution> evolution;
  if (!filtered.empty()) {
    evolution = token_evolution(ckpt.model, filtered, reg, *target, range, vocab);
    io::write_file_atomic(out / "evolution.csv", evolution_csv(*evolution, vocab));
    outputs.push_back("evolution.csv");
  }
  if (a.svg) {
    io::write_file_atomic(out / "attention.svg", attention_svg(map));
    outputs.push_back("attention.svg");
    if (evolution) {
      io::write_file_atomic(out / "evolution.svg", evolution_svg(*evolution, vocab));
      outputs.push_back("evolution.svg");
    }
  }
  outputs.push_back("manifest.json");

  json m;
  m["command"] = "probe";
  m["checkpoint"] = a.checkpoint;
  m["regimen"] = regimen_name(reg);
  m["corpus"] = a.corpus;
  m["split"] = a.split;
  m["samples"] = n;
  m["aggregation"] = agg.describe();
  m["quality_position"] = map.quality_position;
  m["segment_mass"] = {{"visual", map.quality_mass.visual},
                       {"prompt", map.quality_mass.prompt},
                       {"description", map.quality_mass.description}};
  m["target_class"] = target_name;
  m["evolution_samples"] = filtered.size();
  m["evolution_layers"] = {range.first, range.last};
  m["outputs"] = outputs;
  write_json(out / "manifest.json", m);
  std::cout << "probe over " << n << " samples: visual " << io::format_fixed(map.quality_mass.visual, 4)
            << ", prompt " << io::format_fixed(map.quality_mass.prompt, 4) << ", description "
            << io::format_fixed(map.quality_mass.description, 4) << "; " << filtered.size()
            << " samples predicted " << target_name << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"glassbox: quality-rating transformer experiments"};
  app.require_subcommand(1);

  DatagenArgs dg;
  auto* c_dg = app.add_subcommand("datagen", "generate the synthetic corpus");
  c_dg->add_option("--config", dg.config, "run config JSON");
  c_dg->add_option("--out", dg.out, "output directory")->required();
  c_dg->add_option("--n", dg.n, "number of instances (overrides config)");
  c_dg->add_option("--seed", dg.seed, "corpus seed (overrides config)");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "train a model");
  c_tr->add_option("--config", tr.config, "run config JSON");
  c_tr->add_option("--regimen", tr.regimen, "one_stage or two_stage")
      ->required()
      ->check(CLI::IsMember({"one_stage", "two_stage"}));
  c_tr->add_option("--corpus", tr.corpus, "corpus directory")->required();
  c_tr->add_option("--out", tr.out, "run directory")->required();
  c_tr->add_option("--seed", tr.seed, "training seed (overrides config)");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "evaluate one checkpoint or compare two");
  c_ev->add_option("--config", ev.config, "run config JSON");
  c_ev->add_option("--checkpoint", ev.checkpoints, "checkpoint path (repeat for a comparison)")
      ->required();
  c_ev->add_option("--corpus", ev.corpus, "corpus directory")->required();
  c_ev->add_option("--plan", ev.plan, "decode plan JSON (overrides config plan)");
  c_ev->add_option("--split", ev.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  c_ev->add_option("--out", ev.out, "output directory")->required();
  c_ev->add_option("--seed", ev.seed, "plan seed (overrides config)");

  LensArgs ln;
  auto* c_ln = app.add_subcommand("lens", "logit lens at the quality position");
  c_ln->add_option("--checkpoint", ln.checkpoint, "checkpoint path")->required();
  c_ln->add_option("--corpus", ln.corpus, "corpus directory");
  c_ln->add_option("--input-id", ln.input_id, "instance id in the corpus");
  c_ln->add_option("--sample-file", ln.sample_file, "JSONL file with a one_stage or stage1 record");
  c_ln->add_option("--layers", ln.layers, "auto, all, N or A..B");
  c_ln->add_option("--topk", ln.topk, "candidates per layer");
  c_ln->add_flag("--svg", ln.svg, "also write lens.svg");
  c_ln->add_option("--out", ln.out, "output directory")->required();

  ProbeArgs pb;
  auto* c_pb = app.add_subcommand("probe", "averaged attention relation and token evolution");
  c_pb->add_option("--config", pb.config, "run config JSON");
  c_pb->add_option("--checkpoint", pb.checkpoint, "checkpoint path")->required();
  c_pb->add_option("--corpus", pb.corpus, "corpus directory")->required();
  c_pb->add_option("--n", pb.n, "samples to average (default: config probe.n_samples)");
  c_pb->add_option("--split", pb.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  c_pb->add_option("--layer", pb.layer, "restrict to one attention layer");
  c_pb->add_option("--head", pb.head, "restrict to one attention head");
  c_pb->add_option("--layers", pb.layers, "lens layers for token evolution");
  c_pb->add_option("--target-class", pb.target_class, "quality class for token evolution");
  c_pb->add_flag("--svg", pb.svg, "also write SVG renderings");
  c_pb->add_option("--out", pb.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*c_dg) run_datagen(dg);
    if (*c_tr) run_train(tr);
    if (*c_ev) run_eval(ev);
    if (*c_ln) run_lens(ln);
    if (*c_pb) run_probe(pb);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
