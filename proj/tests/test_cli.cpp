#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <nlohmann/json.hpp>

#include "glassbox/io.hpp"

namespace fs = std::filesystem;
using glassbox::io::read_text_file;

namespace {

const fs::path kTmp = GLASSBOX_TEST_TMP;

struct Run {
  int code;
  std::string output;
};

Run run(const std::string& args) {
  fs::create_directories(kTmp);
  const auto log = kTmp / "last.log";
  const std::string cmd = std::string(GLASSBOX_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text_file(log)};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small enough that a full datagen/train/eval/probe loop takes seconds.
fs::path tiny_config() {
  fs::create_directories(kTmp);
  const auto path = kTmp / "tiny.json";
  glassbox::io::write_file_atomic(path, std::string(R"({
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "ffn_mult": 2},
    "datagen": {"n_instances": 60},
    "optimizer": {"lr": 0.003},
    "schedule": {"one_stage_iters": 30, "stage1_iters": 20, "stage2_iters": 10, "batch_size": 4},
    "plan": {"repeats": 2, "sessions": 2},
    "probe": {"n_samples": 6}
  })"));
  return path;
}

struct Fixture {
  fs::path cfg, corpus, one, two;
  Fixture() {
    fs::remove_all(kTmp);
    cfg = tiny_config();
    corpus = kTmp / "corpus";
    one = kTmp / "run_one";
    two = kTmp / "run_two";
    REQUIRE(run("datagen --config " + cfg.string() + " --out " + corpus.string()).code == 0);
    REQUIRE(run("train --config " + cfg.string() + " --regimen one_stage --corpus " + corpus.string() +
                " --out " + one.string()).code == 0);
    REQUIRE(run("train --config " + cfg.string() + " --regimen two_stage --corpus " + corpus.string() +
                " --out " + two.string()).code == 0);
  }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("train --regimen three_stage --corpus x --out y").code == 1);
  const auto r = run("datagen --out " + (kTmp / "empty").string() + " --n 0");
  CHECK(r.code == 1);
  CHECK(r.output.find("empty corpus") != std::string::npos);
  CHECK(run("--help").code == 0);
}

TEST_CASE("datagen is byte-identical across reruns") {
  fs::remove_all(kTmp);
  const auto cfg = tiny_config();
  REQUIRE(run("datagen --config " + cfg.string() + " --out " + (kTmp / "a").string()).code == 0);
  REQUIRE(run("datagen --config " + cfg.string() + " --out " + (kTmp / "b").string()).code == 0);
  for (const auto& e : fs::directory_iterator(kTmp / "a")) {
    CHECK(read_text_file(e.path()) == read_text_file(kTmp / "b" / e.path().filename()));
  }
  const auto cfg_echo = nlohmann::json::parse(read_text_file(kTmp / "a" / "config.json"));
  CHECK(cfg_echo["datagen"]["n_instances"] == 60);
  CHECK(cfg_echo["optimizer"]["beta2"] == 0.98);
}

TEST_CASE("two-stage training on a one-stage corpus names the missing files") {
  fs::remove_all(kTmp);
  const auto cfg = tiny_config();
  REQUIRE(run("datagen --config " + cfg.string() + " --out " + (kTmp / "c").string()).code == 0);
  fs::remove(kTmp / "c" / "train_stage1.jsonl");
  fs::remove(kTmp / "c" / "train_stage2.jsonl");
  const auto r = run("train --config " + cfg.string() + " --regimen two_stage --corpus " +
                     (kTmp / "c").string() + " --out " + (kTmp / "r").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("train_stage1.jsonl, train_stage2.jsonl") != std::string::npos);
  CHECK(run("train --regimen one_stage --corpus " + (kTmp / "missing").string() + " --out " +
            (kTmp / "r").string()).code == 2);
}

TEST_CASE_FIXTURE(Fixture, "train, eval, lens and probe artifacts") {
  SUBCASE("train outputs") {
    const auto loss = read_text_file(one / "loss.csv");
    CHECK(loss.rfind("iter,loss\n", 0) == 0);
    CHECK(lines(loss) == 1 + 3);
    const auto m = nlohmann::json::parse(read_text_file(two / "manifest.json"));
    CHECK(m["stage_iters"] == nlohmann::json::array({20, 10}));
    CHECK(m["stage_ratio"] == 2.0);
    CHECK(fs::exists(two / "model.gbx"));
    CHECK(fs::exists(two / "config.json"));
    for (const auto& e : fs::directory_iterator(two)) CHECK(e.path().extension() != ".tmp");
  }
  SUBCASE("greedy eval is perfectly stable") {
    const auto plan = kTmp / "greedy.json";
    glassbox::io::write_file_atomic(plan, std::string(R"({"policy": "greedy", "repeats": 3, "sessions": 2})"));
    const auto out = kTmp / "eval_greedy";
    REQUIRE(run("eval --checkpoint " + (one / "model.gbx").string() + " --corpus " + corpus.string() +
                " --plan " + plan.string() + " --out " + out.string()).code == 0);
    const auto rep = nlohmann::json::parse(read_text_file(out / "report_one_stage.json"));
    CHECK(rep["instability_percent"] == "0.00 (±0.00)");
  }
  SUBCASE("two checkpoints produce a comparison") {
    const auto out = kTmp / "eval_cmp";
    REQUIRE(run("eval --config " + cfg.string() + " --checkpoint " + (two / "model.gbx").string() +
                " --checkpoint " + (one / "model.gbx").string() + " --corpus " + corpus.string() +
                " --out " + out.string()).code == 0);
    const auto cmp = read_text_file(out / "comparison.csv");
    CHECK(cmp.rfind("metric,one_stage,two_stage,delta\n", 0) == 0);
    CHECK(fs::exists(out / "report_two_stage.json"));
  }
  SUBCASE("missing checkpoint fails") {
    const auto r = run("eval --checkpoint " + (kTmp / "nope.gbx").string() + " --corpus " +
                       corpus.string() + " --out " + (kTmp / "e").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("checkpoint not found") != std::string::npos);
  }
  SUBCASE("lens defaults: four candidates per probed layer") {
    const auto out = kTmp / "lens";
    REQUIRE(run("lens --checkpoint " + (one / "model.gbx").string() + " --corpus " + corpus.string() +
                " --input-id 3 --out " + out.string()).code == 0);
    const auto csv = read_text_file(out / "lens.csv");
    CHECK(csv.rfind("layer,rank,token,probability\n", 0) == 0);
    CHECK(lines(csv) == 1 + 2 * 4);  // auto range for 2 layers is 1..2
    CHECK_FALSE(fs::exists(out / "lens.svg"));
    REQUIRE(run("lens --checkpoint " + (two / "model.gbx").string() + " --sample-file " +
                (corpus / "test_stage1.jsonl").string() + " --layers all --topk 2 --svg --out " +
                out.string()).code == 0);
    CHECK(lines(read_text_file(out / "lens.csv")) == 1 + 3 * 2);
    CHECK(fs::exists(out / "lens.svg"));
    CHECK(run("lens --checkpoint " + (one / "model.gbx").string() + " --out " + out.string()).code == 1);
  }
  SUBCASE("probe: single sample passthrough, segment masses, svg flag") {
    const auto out = kTmp / "probe";
    REQUIRE(run("probe --checkpoint " + (one / "model.gbx").string() + " --corpus " + corpus.string() +
                " --n 1 --out " + out.string()).code == 0);
    CHECK(fs::exists(out / "attention.csv"));
    CHECK_FALSE(fs::exists(out / "attention.svg"));
    const auto m = nlohmann::json::parse(read_text_file(out / "manifest.json"));
    CHECK(m["samples"] == 1);
    const double total = m["segment_mass"]["visual"].get<double>() + m["segment_mass"]["prompt"].get<double>() +
                         m["segment_mass"]["description"].get<double>();
    CHECK(std::abs(total - 1.0) < 1e-5);
    REQUIRE(run("probe --config " + cfg.string() + " --checkpoint " + (two / "model.gbx").string() +
                " --corpus " + corpus.string() + " --svg --out " + out.string()).code == 0);
    CHECK(fs::exists(out / "attention.svg"));
    const auto seg = read_text_file(out / "segments.csv");
    CHECK(seg.rfind("segment,mass\nvisual,0\n", 0) == 0);
  }
}
