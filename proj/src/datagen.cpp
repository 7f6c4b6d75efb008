#include "glassbox/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "glassbox/config.hpp"
#include "glassbox/io.hpp"

namespace glassbox {

using nlohmann::json;

const std::vector<std::string>& Vocabulary::quality_names() {
  static const std::vector<std::string> names{"bad", "poor", "fair", "good", "excellent"};
  return names;
}

Vocabulary::Vocabulary(std::vector<std::string> attribute_names)
    : attribute_names_(std::move(attribute_names)) {
  if (attribute_names_.empty()) throw std::invalid_argument("vocabulary needs >= 1 attribute");
  names_ = {"<pad>", "<bos>", "<eos>", "<rate_quality>", "<describe>"};
  for (const auto& a : attribute_names_) {
    for (int level = 0; level < kAttributeLevels; ++level) {
      names_.push_back(a + "_" + std::to_string(level));
    }
  }
  for (const auto& q : quality_names()) names_.push_back(q);
  std::set<std::string> unique(names_.begin(), names_.end());
  if (unique.size() != names_.size()) {
    throw std::invalid_argument("attribute names produce duplicate tokens");
  }
}

const std::string& Vocabulary::name(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return names_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<TokenId>(it - names_.begin());
}

TokenId Vocabulary::attribute_token(std::size_t attribute, int level) const {
  if (attribute >= attribute_names_.size() || level < 0 || level >= kAttributeLevels) {
    throw std::out_of_range("attribute token out of range");
  }
  return static_cast<TokenId>(5 + attribute * kAttributeLevels + static_cast<std::size_t>(level));
}

TokenId Vocabulary::quality_token(int level) const {
  if (level < 0 || level >= kQualityLevels) throw std::out_of_range("quality level out of range");
  return static_cast<TokenId>(5 + attribute_names_.size() * kAttributeLevels +
                              static_cast<std::size_t>(level));
}

std::optional<std::pair<std::size_t, int>> Vocabulary::attribute_of(TokenId id) const {
  const auto first = static_cast<TokenId>(5);
  const auto end = static_cast<TokenId>(5 + attribute_names_.size() * kAttributeLevels);
  if (id < first || id >= end) return std::nullopt;
  const auto offset = static_cast<std::size_t>(id - first);
  return std::make_pair(offset / kAttributeLevels, static_cast<int>(offset % kAttributeLevels));
}

std::optional<int> Vocabulary::quality_level_of(TokenId id) const {
  const TokenId first = quality_token(0);
  if (id < first || id >= first + kQualityLevels) return std::nullopt;
  return static_cast<int>(id - first);
}

std::size_t DatagenConfig::n_train() const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n_instances) * train_fraction));
}

void DatagenConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("invalid datagen config: " + what);
  };
  require(n_instances >= 1, "empty corpus");
  require(train_fraction >= 0.0 && train_fraction <= 1.0, "train_fraction must lie in [0, 1]");
  require(!attribute_names.empty(), "need at least one attribute");
  require(n_visual >= 1, "n_visual must be >= 1");
  require(d_visual >= attribute_names.size(), "d_visual must be >= number of attributes");
  require(visual_noise >= 0.0, "visual_noise must be >= 0");
  require(mos_noise >= 0.0, "mos_noise must be >= 0");
  require(formats == "all" || formats == "one_stage" || formats == "two_stage",
          "formats must be all, one_stage or two_stage");
}

int quality_from_attributes(const std::vector<int>& attributes) {
  if (attributes.empty()) throw std::invalid_argument("no attributes");
  const long sum = std::accumulate(attributes.begin(), attributes.end(), 0L);
  const long k = static_cast<long>(attributes.size());
  // floor(sum / k + 1/2) == floor((2 sum + k) / 2k) for non-negative sums.
  return static_cast<int>((2 * sum + k) / (2 * k));
}

std::vector<TokenId> render_description(const std::vector<int>& attributes,
                                        const Vocabulary& vocab) {
  if (attributes.size() != vocab.attribute_count()) {
    throw std::invalid_argument("attribute count does not match vocabulary");
  }
  std::vector<TokenId> out;
  out.reserve(attributes.size());
  for (std::size_t k = 0; k < attributes.size(); ++k) {
    out.push_back(vocab.attribute_token(k, attributes[k]));
  }
  return out;
}

std::vector<int> parse_description(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  if (tokens.size() != vocab.attribute_count()) {
    throw std::invalid_argument("description has " + std::to_string(tokens.size()) +
                                " tokens, expected " + std::to_string(vocab.attribute_count()));
  }
  std::vector<int> attributes(tokens.size());
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto attr = vocab.attribute_of(tokens[k]);
    if (!attr || attr->first != k) {
      throw std::invalid_argument("token at description slot " + std::to_string(k) +
                                  " is not an attribute-" + std::to_string(k) + " token");
    }
    attributes[k] = attr->second;
  }
  return attributes;
}

SyntheticInstance make_instance(const std::vector<int>& attributes, Rng rng,
                                const DatagenConfig& config, const Vocabulary& vocab) {
  config.validate();
  const std::size_t K = config.n_attributes();
  if (attributes.size() != K) throw std::invalid_argument("attribute count mismatch");
  for (int a : attributes) {
    if (a < 0 || a >= kAttributeLevels) throw std::invalid_argument("attribute level outside 0..4");
  }
  SyntheticInstance inst;
  inst.attributes = attributes;
  inst.quality_level = quality_from_attributes(attributes);
  inst.description = render_description(attributes, vocab);

  // Attribute k owns coordinates [k*block, (k+1)*block); leftovers carry noise only.
  const std::size_t block = config.d_visual / K;
  const double clip = 3.0 * config.visual_noise;
  Rng visual_rng = rng.split("visual");
  inst.visual_features.assign(config.n_visual, std::vector<double>(config.d_visual, 0.0));
  for (auto& feature : inst.visual_features) {
    for (std::size_t d = 0; d < config.d_visual; ++d) {
      const std::size_t k = d / block;
      const double signal = k < K ? attributes[k] / 4.0 : 0.0;
      const double noise = std::clamp(visual_rng.normal(0.0, config.visual_noise), -clip, clip);
      feature[d] = signal + noise;
    }
  }
  const double mean = std::accumulate(attributes.begin(), attributes.end(), 0.0) /
                      static_cast<double>(K);
  Rng mos_rng = rng.split("mos");
  inst.mos = std::clamp(mean + mos_rng.normal(0.0, config.mos_noise), 0.0, 4.0);
  return inst;
}

SyntheticInstance sample_instance(Rng rng, const DatagenConfig& config, const Vocabulary& vocab) {
  Rng attr_rng = rng.split("attributes");
  std::vector<int> attributes(config.n_attributes());
  for (int& a : attributes) a = static_cast<int>(attr_rng.uniform_int(kAttributeLevels));
  return make_instance(attributes, rng, config, vocab);
}

std::string_view stage_name(StageTag tag) noexcept {
  switch (tag) {
    case StageTag::one_stage: return "one_stage";
    case StageTag::stage1: return "stage1";
    case StageTag::stage2: return "stage2";
  }
  return "unknown";
}

StageTag parse_stage(std::string_view name) {
  if (name == "one_stage") return StageTag::one_stage;
  if (name == "stage1") return StageTag::stage1;
  if (name == "stage2") return StageTag::stage2;
  throw std::invalid_argument("unknown stage tag '" + std::string(name) + "'");
}

std::size_t RenderedExample::supervised_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), 1));
}

InputSequence describe_prompt(const SyntheticInstance& inst) {
  InputSequence seq;
  seq.push_token(Vocabulary::bos, Segment::special);
  for (const auto& f : inst.visual_features) seq.push_visual(f);
  seq.push_token(Vocabulary::describe, Segment::prompt);
  return seq;
}

InputSequence one_stage_prompt(const SyntheticInstance& inst) {
  InputSequence seq;
  seq.push_token(Vocabulary::bos, Segment::special);
  for (const auto& f : inst.visual_features) seq.push_visual(f);
  seq.push_token(Vocabulary::rate_quality, Segment::prompt);
  return seq;
}

InputSequence stage_two_input(const std::vector<TokenId>& description) {
  InputSequence seq;
  seq.push_token(Vocabulary::bos, Segment::special);
  seq.push_token(Vocabulary::rate_quality, Segment::prompt);
  for (TokenId t : description) seq.push_token(t, Segment::description);
  seq.quality_position = seq.size() - 1;
  return seq;
}

InputSequence one_stage_with_description(const SyntheticInstance& inst,
                                         const std::vector<TokenId>& description) {
  InputSequence seq = one_stage_prompt(inst);
  for (TokenId t : description) seq.push_token(t, Segment::description);
  seq.quality_position = seq.size() - 1;
  return seq;
}

namespace {

void check_length(const RenderedExample& ex, std::size_t max_seq_len) {
  // The training sequence is the input plus all but the last target token.
  const std::size_t len = ex.input.size() + ex.target.size() - 1;
  if (len > max_seq_len) {
    throw std::invalid_argument("rendered sequence of " + std::to_string(len) +
                                " elements exceeds max_seq_len " + std::to_string(max_seq_len));
  }
}

RenderedExample base_example(const SyntheticInstance& inst, StageTag stage) {
  RenderedExample ex;
  ex.instance_id = inst.id;
  ex.stage = stage;
  ex.quality_level = inst.quality_level;
  ex.mos = inst.mos;
  ex.attributes = inst.attributes;
  return ex;
}

}  // namespace

RenderedExample render_one_stage(const SyntheticInstance& inst, const Vocabulary& vocab,
                                 std::size_t max_seq_len) {
  RenderedExample ex = base_example(inst, StageTag::one_stage);
  ex.input = one_stage_prompt(inst);
  ex.target = inst.description;
  ex.target.push_back(vocab.quality_token(inst.quality_level));
  ex.target.push_back(Vocabulary::eos);
  ex.loss_mask.assign(ex.target.size(), 1);
  check_length(ex, max_seq_len);
  return ex;
}

std::pair<RenderedExample, RenderedExample> render_two_stage(const SyntheticInstance& inst,
                                                             const Vocabulary& vocab,
                                                             std::size_t max_seq_len) {
  RenderedExample s1 = base_example(inst, StageTag::stage1);
  s1.input = describe_prompt(inst);
  s1.target = inst.description;
  s1.target.push_back(Vocabulary::eos);
  s1.loss_mask.assign(s1.target.size(), 1);
  check_length(s1, max_seq_len);

  RenderedExample s2 = base_example(inst, StageTag::stage2);
  s2.input = stage_two_input(inst.description);
  s2.input.quality_position.reset();
  s2.target = {vocab.quality_token(inst.quality_level), Vocabulary::eos};
  s2.loss_mask.assign(s2.target.size(), 1);
  check_length(s2, max_seq_len);
  return {std::move(s1), std::move(s2)};
}

std::vector<Segment> infer_segments(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  std::vector<Segment> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t == kVisualSlot) {
      out.push_back(Segment::image);
    } else if (t == Vocabulary::rate_quality || t == Vocabulary::describe) {
      out.push_back(Segment::prompt);
    } else if (vocab.attribute_of(t)) {
      out.push_back(Segment::description);
    } else {
      out.push_back(Segment::special);
    }
  }
  return out;
}

std::string example_to_jsonl(const RenderedExample& ex) {
  json j;
  j["id"] = ex.instance_id;
  j["stage"] = std::string(stage_name(ex.stage));
  j["input_tokens"] = ex.input.tokens;
  j["visual"] = ex.input.visual;
  j["target_tokens"] = ex.target;
  j["loss_mask"] = ex.loss_mask;
  j["quality_level"] = ex.quality_level;
  j["mos"] = ex.mos;
  j["attributes"] = ex.attributes;
  return j.dump();
}

RenderedExample example_from_json_line(const std::string& line, const Vocabulary& vocab) {
  const json j = json::parse(line);
  static const std::set<std::string> known{"id",          "stage",         "input_tokens",
                                           "visual",      "target_tokens", "loss_mask",
                                           "quality_level", "mos",         "attributes"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown record field '" + key + "'");
  }
  RenderedExample ex;
  ex.instance_id = j.at("id").get<std::size_t>();
  ex.stage = parse_stage(j.at("stage").get<std::string>());
  ex.input.tokens = j.at("input_tokens").get<std::vector<TokenId>>();
  ex.input.visual = j.at("visual").get<std::vector<std::vector<double>>>();
  ex.input.segments = infer_segments(ex.input.tokens, vocab);
  ex.target = j.at("target_tokens").get<std::vector<TokenId>>();
  ex.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
  ex.quality_level = j.at("quality_level").get<int>();
  ex.mos = j.at("mos").get<double>();
  ex.attributes = j.at("attributes").get<std::vector<int>>();
  if (ex.loss_mask.size() != ex.target.size()) {
    throw std::invalid_argument("loss_mask length differs from target length");
  }
  return ex;
}

std::filesystem::path corpus_file(const std::filesystem::path& dir, std::string_view split,
                                  StageTag stage) {
  return dir / (std::string(split) + "_" + std::string(stage_name(stage)) + ".jsonl");
}

CorpusSplit generate_split(const DatagenConfig& config, const Vocabulary& vocab) {
  config.validate();
  const Rng root(config.seed);
  const Rng instance_rng = root.split("instances");
  std::vector<SyntheticInstance> all;
  all.reserve(config.n_instances);
  for (std::size_t i = 0; i < config.n_instances; ++i) {
    auto inst = sample_instance(instance_rng.split(i), config, vocab);
    inst.id = i;
    all.push_back(std::move(inst));
  }
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle = root.split("split");
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
  }
  const std::size_t n_train = config.n_train();
  std::vector<std::size_t> train_ids(order.begin(), order.begin() + static_cast<long>(n_train));
  std::vector<std::size_t> test_ids(order.begin() + static_cast<long>(n_train), order.end());
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(test_ids.begin(), test_ids.end());
  CorpusSplit split;
  for (std::size_t id : train_ids) split.train.push_back(all[id]);
  for (std::size_t id : test_ids) split.test.push_back(all[id]);
  return split;
}

CorpusManifest build_corpus(const DatagenConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  const Vocabulary vocab(config.attribute_names);
  const CorpusSplit split = generate_split(config, vocab);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create corpus directory " + out_dir.string());

  CorpusManifest manifest;
  manifest.config = config;
  manifest.vocabulary = vocab.names();
  manifest.total = config.n_instances;
  manifest.train = split.train.size();
  manifest.test = split.test.size();

  const bool one = config.formats == "all" || config.formats == "one_stage";
  const bool two = config.formats == "all" || config.formats == "two_stage";
  auto emit = [&](std::string_view name, const std::vector<SyntheticInstance>& insts) {
    std::ostringstream one_s, s1, s2;
    for (const auto& inst : insts) {
      if (one) one_s << example_to_jsonl(render_one_stage(inst, vocab)) << '\n';
      if (two) {
        auto [a, b] = render_two_stage(inst, vocab);
        s1 << example_to_jsonl(a) << '\n';
        s2 << example_to_jsonl(b) << '\n';
      }
    }
    if (one) {
      const auto p = corpus_file(out_dir, name, StageTag::one_stage);
      io::write_file_atomic(p, one_s.str());
      manifest.files.push_back(p.filename().string());
    }
    if (two) {
      const auto p1 = corpus_file(out_dir, name, StageTag::stage1);
      const auto p2 = corpus_file(out_dir, name, StageTag::stage2);
      io::write_file_atomic(p1, s1.str());
      io::write_file_atomic(p2, s2.str());
      manifest.files.push_back(p1.filename().string());
      manifest.files.push_back(p2.filename().string());
    }
  };
  emit("train", split.train);
  emit("test", split.test);

  json j;
  j["format_version"] = 1;
  j["seed"] = config.seed;
  j["config"] = datagen_config_to_json(config);
  j["vocabulary"] = manifest.vocabulary;
  j["counts"] = {{"total", manifest.total}, {"train", manifest.train}, {"test", manifest.test}};
  j["files"] = manifest.files;
  io::write_file_atomic(out_dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

std::vector<RenderedExample> read_examples(const std::filesystem::path& path,
                                           const Vocabulary& vocab) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("missing corpus file " + path.string());
  }
  std::istringstream in(io::read_text_file(path));
  std::vector<RenderedExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json_line(line, vocab));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

CorpusManifest read_manifest(const std::filesystem::path& corpus_dir) {
  const auto path = corpus_dir / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("missing corpus manifest " + path.string());
  }
  const json j = json::parse(io::read_text_file(path));
  CorpusManifest m;
  m.config = datagen_config_from_json(j.at("config"));
  m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  m.total = j.at("counts").at("total").get<std::size_t>();
  m.train = j.at("counts").at("train").get<std::size_t>();
  m.test = j.at("counts").at("test").get<std::size_t>();
  m.files = j.at("files").get<std::vector<std::string>>();
  return m;
}

Vocabulary vocabulary_from_manifest(const CorpusManifest& manifest) {
  Vocabulary vocab(manifest.config.attribute_names);
  if (vocab.names() != manifest.vocabulary) {
    throw std::runtime_error("manifest vocabulary does not match the frozen token table");
  }
  return vocab;
}

std::vector<SyntheticInstance> instances_from_examples(const std::vector<RenderedExample>& examples,
                                                       const Vocabulary& vocab) {
  std::vector<SyntheticInstance> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    if (ex.stage == StageTag::stage2) {
      throw std::invalid_argument("stage-two records carry no visual features");
    }
    SyntheticInstance inst;
    inst.id = ex.instance_id;
    inst.attributes = ex.attributes;
    inst.visual_features = ex.input.visual;
    inst.description = render_description(ex.attributes, vocab);
    inst.quality_level = ex.quality_level;
    inst.mos = ex.mos;
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace glassbox
