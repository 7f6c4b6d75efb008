// Acceptance run: one PASS/FAIL line per criterion. The training-backed
// criteria (5-8) share one set of models trained per seed at the default
// desk schedules; expect about an hour on a single core.
//
// GLASSBOX_ACCEPT_ONLY=1,2,9 restricts the run to the listed criteria.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "glassbox/checkpoint.hpp"
#include "glassbox/config.hpp"
#include "glassbox/eval.hpp"
#include "glassbox/introspect.hpp"
#include "glassbox/io.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace glassbox;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::set<int> selected() {
  std::set<int> out;
  const char* env = std::getenv("GLASSBOX_ACCEPT_ONLY");
  if (!env || !*env) {
    for (int i = 1; i <= 10; ++i) out.insert(i);
    return out;
  }
  std::stringstream ss(env);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(std::stoi(item));
  return out;
}

const Vocabulary& vocab() {
  static const Vocabulary v(DatagenConfig{}.attribute_names);
  return v;
}

// ---------------------------------------------------------------- 1 .. 4

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  auto model = init_model<double>(testing::tiny_config(), Rng(3));
  // Small random offsets on every parameter: at the raw init the gains are
  // exactly one and biases zero, where h = 1e-3 truncation dominates.
  testing::jitter(model, Rng(4), 0.1);
  const auto batch = testing::mixed_batch(4, 5);
  FiniteDiffOptions opts;
  opts.h = 1e-3;
  opts.max_coords_per_tensor = 64;
  const auto r = testing::gradient_check(model, batch, LossConfig{}, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {r.max_relative_error < 1e-3 && secs < 120.0,
          fmt("max relative error %.3g", r.max_relative_error) + " over " +
              std::to_string(r.coords_checked) + " coords in " + fmt("%.1fs", secs)};
}

double smoothed_reference(const std::vector<double>& p, std::size_t y, double eps) {
  double uniform = 0.0;
  for (double q : p) uniform += -std::log(q);
  return (1.0 - eps) * -std::log(p[y]) + eps / static_cast<double>(p.size()) * uniform;
}

Outcome loss_oracle() {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + rng.uniform_int(40);
    std::vector<double> p(c);
    double sum = 0.0;
    for (double& q : p) sum += (q = 0.01 + rng.uniform());
    for (double& q : p) q /= sum;
    const std::size_t y = rng.uniform_int(c);
    // A tenth of the trials sit on each limit.
    const double eps = trial % 10 == 0 ? 0.0 : trial % 10 == 1 ? 1.0 : rng.uniform();
    worst = std::max(worst, std::abs(label_smoothing_nll(p, y, eps) - smoothed_reference(p, y, eps)));
    if (eps == 0.0) worst = std::max(worst, std::abs(label_smoothing_nll(p, y, eps) + std::log(p[y])));
  }
  const std::vector<double> u(25, 1.0 / 25.0);
  const double uniform_err = std::abs(label_smoothing_nll(u, 7, 1.0) - std::log(25.0));
  worst = std::max(worst, uniform_err);
  return {worst < 1e-9, fmt("max abs diff %.3g over 1000 triples plus the uniform limit", worst)};
}

Outcome lens_identity() {
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    auto model = init_model<double>(testing::tiny_config(), Rng(k));
    testing::jitter(model, Rng(k + 500), 0.3);
    const auto inst = testing::instances(1, k).front();
    const auto input = probe_sequence(inst, k % 2 ? Regimen::one_stage : Regimen::two_stage);
    const auto trace = forward(model, input);
    const std::size_t L = model.config.n_layers;
    for (std::size_t pos = 0; pos < input.size(); ++pos) {
      const auto lens = logit_lens(model, trace, pos, {L, L}, vocab().size());
      const auto expect = softmax<double>(trace.logits.row(pos));
      for (std::size_t v = 0; v < expect.size(); ++v) {
        worst = std::max(worst, std::abs(lens.layers[0].distribution[v] - expect[v]));
      }
    }
  }
  return {worst < 1e-9, fmt("max abs diff %.3g over 100 pairs, all positions", worst)};
}

Outcome metric_oracles() {
  Rng rng(21);
  double closed = 0.0, tied = 0.0, affine = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 3 + rng.uniform_int(60);
    std::vector<double> a(n), b(n);
    std::iota(a.begin(), a.end(), 0.0);
    std::iota(b.begin(), b.end(), 0.0);
    for (std::size_t i = n; i > 1; --i) std::swap(b[i - 1], b[rng.uniform_int(i)]);
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    const double nn = static_cast<double>(n);
    closed = std::max(closed, std::abs(srcc(a, b) - (1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0)))));
  }
  auto brute_ranks = [](const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      double less = 0, equal = 0;
      for (double y : x) {
        less += y < x[i];
        equal += y == x[i];
      }
      r[i] = 1.0 + less + (equal - 1.0) / 2.0;
    }
    return r;
  };
  auto brute_pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - ma) * (b[i] - mb);
      da += (a[i] - ma) * (a[i] - ma);
      db += (b[i] - mb) * (b[i] - mb);
    }
    return num / std::sqrt(da * db);
  };
  int tied_trials = 0;
  while (tied_trials < 1000) {
    const std::size_t n = 4 + rng.uniform_int(50);
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = static_cast<double>(rng.uniform_int(5));
    for (auto& x : b) x = static_cast<double>(rng.uniform_int(7));
    auto constant = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
    };
    if (constant(a) || constant(b)) continue;
    ++tied_trials;
    tied = std::max(tied, std::abs(srcc(a, b) - brute_pearson(brute_ranks(a), brute_ranks(b))));
  }
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(50), b(50), t(50);
    for (std::size_t i = 0; i < 50; ++i) {
      a[i] = rng.normal();
      b[i] = a[i] + rng.normal(0.0, 0.7);
    }
    const double scale = 0.1 + 10.0 * rng.uniform(), shift = rng.normal(0.0, 5.0);
    for (std::size_t i = 0; i < 50; ++i) t[i] = scale * a[i] + shift;
    affine = std::max(affine, std::abs(plcc(t, b) - plcc(a, b)));
  }
  const bool ok = closed < 1e-12 && tied < 1e-12 && affine < 1e-12;
  return {ok, fmt("closed form %.3g", closed) + fmt(", tied brute force %.3g", tied) +
                  fmt(", plcc affine %.3g", affine)};
}

// ---------------------------------------------------------------- trained models

struct SeedRun {
  std::uint64_t seed = 0;
  CorpusSplit split;
  ModelF one, two;
  double one_secs = 0, two_secs = 0;
  // Greedy and temperature-1 reports, attention masses from the quality row.
  EvalReport one_greedy, two_greedy, one_t1, two_t1;
  SegmentMass one_mass, two_mass;
};

RunConfig seeded_config(std::uint64_t seed) {
  nlohmann::json j = {{"seed", seed}};
  return run_config_from_json(j);
}

SeedRun train_seed(std::uint64_t seed) {
  SeedRun run;
  run.seed = seed;
  const auto cfg = seeded_config(seed);
  run.split = generate_split(cfg.datagen, vocab());
  TrainingData data;
  for (const auto& inst : run.split.train) {
    data.one_stage.push_back(render_one_stage(inst, vocab()));
    auto [s1, s2] = render_two_stage(inst, vocab());
    data.stage1.push_back(std::move(s1));
    data.stage2.push_back(std::move(s2));
  }
  for (Regimen r : {Regimen::one_stage, Regimen::two_stage}) {
    Schedule s = cfg.schedule;
    s.regimen = r;
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train(data, s, cfg.loss, cfg.optimizer, cfg.model);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    (r == Regimen::one_stage ? run.one : run.two) = std::move(result.model);
    (r == Regimen::one_stage ? run.one_secs : run.two_secs) = secs;
  }
  DecodeRepeatPlan greedy = cfg.plan;
  greedy.policy = DecodePolicy::greedy();
  const auto& test = run.split.test;
  run.one_greedy = evaluate(run.one, test, greedy, PredictMode::one_stage, vocab(), "one_stage");
  run.two_greedy = evaluate(run.two, test, greedy, PredictMode::two_stage_pipeline, vocab(), "two_stage");
  run.one_t1 = evaluate(run.one, test, cfg.plan, PredictMode::one_stage, vocab(), "one_stage");
  run.two_t1 = evaluate(run.two, test, cfg.plan, PredictMode::two_stage_pipeline, vocab(), "two_stage");
  const std::size_t n = std::min(cfg.probe.n_samples, test.size());
  const std::span<const SyntheticInstance> probe(test.data(), n);
  run.one_mass = average_attention_map(run.one, probe, Regimen::one_stage).quality_mass;
  run.two_mass = average_attention_map(run.two, probe, Regimen::two_stage).quality_mass;
  std::printf("  seed %llu trained: one_stage %.0fs, two_stage %.0fs\n",
              static_cast<unsigned long long>(seed), run.one_secs, run.two_secs);
  std::fflush(stdout);
  return run;
}

const std::vector<SeedRun>& seed_runs() {
  static const std::vector<SeedRun> runs = [] {
    std::vector<SeedRun> out;
    for (std::uint64_t seed : {1, 2, 3}) out.push_back(train_seed(seed));
    return out;
  }();
  return runs;
}

// ---------------------------------------------------------------- 5 .. 8

Outcome instability_analytics() {
  std::ostringstream d;
  bool ok = true;
  const auto& r = seed_runs().front();
  for (const EvalReport* rep : {&r.one_greedy, &r.two_greedy}) {
    const auto pct = format_percent(rep->instability);
    ok = ok && rep->instability.mean == 0.0 && rep->sessions.size() == 3;
    d << rep->label << " greedy " << pct << "%; ";
  }
  DecodeRepeatPlan plan;
  plan.repeats = 5;
  plan.sessions = 3;
  const auto b = instability_ratio(
      [](std::size_t, Rng& rng) {
        QualityPrediction p;
        p.level = rng.uniform() < 0.9 ? 2 : 3;
        p.token = vocab().quality_token(*p.level);
        p.score = *p.level;
        return p;
      },
      2000, plan);
  const double analytic = 1.0 - std::pow(0.9, 5) - std::pow(0.1, 5);
  for (double s : b.per_session) ok = ok && std::abs(s - analytic) < 0.033;
  ok = ok && b.per_session.size() == 3 && b.ratio.std > 0.0;
  d << "bernoulli " << format_percent(b.ratio) << "% vs analytic " << fmt("%.2f%%", 100.0 * analytic);
  return {ok, d.str()};
}

Outcome convergence() {
  std::ostringstream d;
  bool ok = true;
  for (const auto& r : seed_runs()) {
    for (const EvalReport* rep : {&r.one_greedy, &r.two_greedy}) {
      ok = ok && rep->accuracy.mean >= 0.80 && rep->srcc.mean >= 0.80;
    }
    ok = ok && r.one_secs < 1800.0 && r.two_secs < 1800.0;
    d << "seed " << r.seed << ": acc " << fmt("%.3f", r.one_greedy.accuracy.mean) << "/"
      << fmt("%.3f", r.two_greedy.accuracy.mean) << " srcc " << fmt("%.3f", r.one_greedy.srcc.mean) << "/"
      << fmt("%.3f", r.two_greedy.srcc.mean) << "; ";
  }
  d << "(one_stage/two_stage, greedy, held-out)";
  return {ok, d.str()};
}

Outcome instability_trend() {
  std::ostringstream d;
  int wins = 0;
  for (const auto& r : seed_runs()) {
    wins += r.two_t1.instability.mean < r.one_t1.instability.mean;
    d << "seed " << r.seed << ": " << format_percent(r.one_t1.instability) << " vs "
      << format_percent(r.two_t1.instability) << "; ";
  }
  d << "two-stage lower in " << wins << "/3 (reference figures: 22.00 vs 12.39)";
  return {wins == 3, d.str()};
}

Outcome attention_trend() {
  std::ostringstream d;
  int wins = 0;
  for (const auto& r : seed_runs()) {
    wins += r.two_mass.description > r.one_mass.description;
    d << "seed " << r.seed << ": " << fmt("%.3f", r.one_mass.description) << " vs "
      << fmt("%.3f", r.two_mass.description) << "; ";
  }
  d << "description mass higher under two-stage in " << wins << "/3";
  return {wins == 3, d.str()};
}

// ---------------------------------------------------------------- CLI

const fs::path kTmp = GLASSBOX_ACCEPT_TMP;

int cli(const std::string& args) {
  const std::string cmd = std::string(GLASSBOX_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome lens_schema() {
  const fs::path dir = kTmp / "lens_schema";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = dir / "cfg.json";
  io::write_file_atomic(cfg, std::string(R"({"datagen": {"n_instances": 40}})"));
  if (cli("datagen --config " + cfg.string() + " --out " + (dir / "corpus").string()) != 0) {
    return {false, "datagen failed"};
  }
  std::ostringstream d;
  bool ok = true;
  // A 32-layer model probes layers 30..32 by default.
  ModelConfig deep;
  deep.d_model = 16;
  deep.n_heads = 2;
  deep.n_layers = 32;
  const auto range = default_probe_range(deep);
  ok = ok && range.first == 30 && range.last == 32;
  d << "n_layers=32 -> " << range.first << ".." << range.last << "; ";
  for (std::size_t layers : {std::size_t{4}, std::size_t{32}}) {
    ModelConfig mc = deep;
    mc.n_layers = layers;
    const auto model = init_model<float>(mc, Rng(layers));
    const auto ckpt = dir / ("m" + std::to_string(layers) + ".gbx");
    write_checkpoint_file(ckpt, model, "one_stage");
    const auto out = dir / ("lens" + std::to_string(layers));
    if (cli("lens --checkpoint " + ckpt.string() + " --corpus " + (dir / "corpus").string() +
            " --input-id 0 --out " + out.string()) != 0) {
      return {false, "lens failed for " + std::to_string(layers) + " layers"};
    }
    const auto csv = io::read_text_file(out / "lens.csv");
    std::map<std::string, int> per_layer;
    std::stringstream ss(csv);
    std::string line;
    std::getline(ss, line);
    while (std::getline(ss, line)) ++per_layer[line.substr(0, line.find(','))];
    const auto probed = default_probe_range(mc);
    ok = ok && per_layer.size() == probed.size();
    for (const auto& [layer, count] : per_layer) ok = ok && count == 4;
    d << layers << " layers: " << per_layer.size() << " probed layers x "
      << (per_layer.empty() ? 0 : per_layer.begin()->second) << " candidates; ";
  }
  return {ok, d.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_text_file(e.path());
  }
  return out;
}

bool pipeline(const fs::path& dir, const fs::path& cfg) {
  const std::string c = " --config " + cfg.string();
  const std::string corpus = (dir / "corpus").string();
  const std::string one = (dir / "one" / "model.gbx").string();
  const std::string two = (dir / "two" / "model.gbx").string();
  return cli("datagen" + c + " --out " + corpus) == 0 &&
         cli("train" + c + " --regimen one_stage --corpus " + corpus + " --out " + (dir / "one").string()) == 0 &&
         cli("train" + c + " --regimen two_stage --corpus " + corpus + " --out " + (dir / "two").string()) == 0 &&
         cli("eval" + c + " --checkpoint " + one + " --checkpoint " + two + " --corpus " + corpus +
             " --out " + (dir / "eval").string()) == 0 &&
         cli("probe" + c + " --checkpoint " + one + " --corpus " + corpus + " --svg --out " +
             (dir / "probe_one").string()) == 0 &&
         cli("probe" + c + " --checkpoint " + two + " --corpus " + corpus + " --svg --out " +
             (dir / "probe_two").string()) == 0 &&
         cli("lens --checkpoint " + one + " --corpus " + corpus + " --input-id 5 --svg --out " +
             (dir / "lens").string()) == 0;
}

Outcome determinism() {
  const fs::path root = kTmp / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  // Default corpus, model, plan and probe sizes; shortened schedules, since
  // determinism does not depend on how long training runs.
  const auto cfg = root / "cfg.json";
  io::write_file_atomic(cfg, std::string(R"({"seed": 7,
    "schedule": {"one_stage_iters": 150, "stage1_iters": 100, "stage2_iters": 50}})"));
  // Same output paths both times: manifests record them.
  const fs::path run = root / "run";
  if (!pipeline(run, cfg)) return {false, "first pipeline run failed"};
  const auto a = snapshot(run);
  fs::remove_all(run);
  if (!pipeline(run, cfg)) return {false, "second pipeline run failed"};
  const auto b = snapshot(run);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) {
    auto it = b.find(name);
    differing += it == b.end() || it->second != bytes;
  }
  const bool ok = a.size() == b.size() && differing == 0 && a.size() > 15;
  return {ok, std::to_string(a.size()) + " files compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  const auto want = selected();
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradient_oracle},      {2, loss_oracle},       {3, lens_identity},
      {4, metric_oracles},       {5, instability_analytics}, {6, convergence},
      {7, instability_trend},    {8, attention_trend},   {9, lens_schema},
      {10, determinism}};
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!want.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d: %s - %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
