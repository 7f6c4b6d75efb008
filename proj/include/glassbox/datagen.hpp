#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "glassbox/model.hpp"
#include "glassbox/rng.hpp"

namespace glassbox {

inline constexpr int kQualityLevels = 5;
inline constexpr int kAttributeLevels = 5;

// Frozen token table:
//   0 <pad>  1 <bos>  2 <eos>  3 <rate_quality>  4 <describe>
//   then K x 5 attribute-level tokens "<name>_<level>", attribute-major,
//   then the quality tokens bad, poor, fair, good, excellent (levels 0..4).
class Vocabulary {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId bos = 1;
  static constexpr TokenId eos = 2;
  static constexpr TokenId rate_quality = 3;
  static constexpr TokenId describe = 4;

  explicit Vocabulary(std::vector<std::string> attribute_names);

  std::size_t size() const noexcept { return names_.size(); }
  std::size_t attribute_count() const noexcept { return attribute_names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<std::string>& attribute_names() const noexcept { return attribute_names_; }
  const std::string& name(TokenId id) const;
  std::optional<TokenId> find(const std::string& name) const;

  TokenId attribute_token(std::size_t attribute, int level) const;
  TokenId quality_token(int level) const;
  // (attribute, level) for attribute tokens.
  std::optional<std::pair<std::size_t, int>> attribute_of(TokenId id) const;
  std::optional<int> quality_level_of(TokenId id) const;
  bool is_quality(TokenId id) const { return quality_level_of(id).has_value(); }

  static const std::vector<std::string>& quality_names();

 private:
  std::vector<std::string> attribute_names_;
  std::vector<std::string> names_;
};

struct DatagenConfig {
  std::size_t n_instances = 2240;
  double train_fraction = 6000.0 / 6720.0;
  std::vector<std::string> attribute_names{"sharpness", "noise", "brightness"};
  std::size_t n_visual = 8;
  std::size_t d_visual = 16;
  double visual_noise = 0.05;  // clipped at +-3 sigma
  double mos_noise = 0.15;
  // Which instruction formats build_corpus writes: "all", "one_stage", "two_stage".
  std::string formats = "all";
  std::uint64_t seed = 20240601;

  std::size_t n_attributes() const noexcept { return attribute_names.size(); }
  std::size_t n_train() const;
  void validate() const;
};

struct SyntheticInstance {
  std::size_t id = 0;
  std::vector<int> attributes;  // each in 0..4
  std::vector<std::vector<double>> visual_features;
  std::vector<TokenId> description;
  int quality_level = 0;
  double mos = 0.0;
};

// round(mean(attributes)), ties rounded up, in exact integer arithmetic.
int quality_from_attributes(const std::vector<int>& attributes);

SyntheticInstance sample_instance(Rng rng, const DatagenConfig& config, const Vocabulary& vocab);
// Same as sample_instance but with caller-chosen attributes.
SyntheticInstance make_instance(const std::vector<int>& attributes, Rng rng,
                                const DatagenConfig& config, const Vocabulary& vocab);

std::vector<TokenId> render_description(const std::vector<int>& attributes, const Vocabulary& vocab);
// Inverse of render_description; throws on malformed descriptions.
std::vector<int> parse_description(const std::vector<TokenId>& tokens, const Vocabulary& vocab);

enum class StageTag { one_stage, stage1, stage2 };
std::string_view stage_name(StageTag tag) noexcept;
StageTag parse_stage(std::string_view name);

struct RenderedExample {
  std::size_t instance_id = 0;
  StageTag stage = StageTag::one_stage;
  InputSequence input;
  std::vector<TokenId> target;
  std::vector<std::uint8_t> loss_mask;  // one flag per target token
  int quality_level = 0;
  double mos = 0.0;
  std::vector<int> attributes;

  std::size_t supervised_count() const;
};

RenderedExample render_one_stage(const SyntheticInstance& inst, const Vocabulary& vocab,
                                 std::size_t max_seq_len = 64);
std::pair<RenderedExample, RenderedExample> render_two_stage(const SyntheticInstance& inst,
                                                             const Vocabulary& vocab,
                                                             std::size_t max_seq_len = 64);

// Prompt used to generate a description from visuals: [bos][visual x M][describe].
InputSequence describe_prompt(const SyntheticInstance& inst);
// Prompt used for one-stage inference: [bos][visual x M][rate_quality].
InputSequence one_stage_prompt(const SyntheticInstance& inst);
// Stage-two input: [bos][rate_quality][description...]; quality position is the last token.
InputSequence stage_two_input(const std::vector<TokenId>& description);
// One-stage prompt followed by `description`; quality position is the last token.
InputSequence one_stage_with_description(const SyntheticInstance& inst,
                                         const std::vector<TokenId>& description);

// Per-element segment markers for a record read back from disk.
std::vector<Segment> infer_segments(const std::vector<TokenId>& tokens, const Vocabulary& vocab);

struct CorpusManifest {
  DatagenConfig config;
  std::vector<std::string> vocabulary;
  std::size_t total = 0;
  std::size_t train = 0;
  std::size_t test = 0;
  std::vector<std::string> files;
};

// Writes {train,test}_{one_stage,stage1,stage2}.jsonl (per `formats`) plus
// manifest.json into `out_dir`. Record fields:
//   id, stage, input_tokens (-1 = visual slot), visual, target_tokens,
//   loss_mask, quality_level, mos, attributes
CorpusManifest build_corpus(const DatagenConfig& config, const std::filesystem::path& out_dir);

// In-memory generation without touching disk; `train`/`test` hold instances.
struct CorpusSplit {
  std::vector<SyntheticInstance> train;
  std::vector<SyntheticInstance> test;
};
CorpusSplit generate_split(const DatagenConfig& config, const Vocabulary& vocab);

std::string example_to_jsonl(const RenderedExample& ex);
RenderedExample example_from_json_line(const std::string& line, const Vocabulary& vocab);

std::vector<RenderedExample> read_examples(const std::filesystem::path& path,
                                           const Vocabulary& vocab);
CorpusManifest read_manifest(const std::filesystem::path& corpus_dir);
Vocabulary vocabulary_from_manifest(const CorpusManifest& manifest);

// Rebuilds instances from one-stage or stage-one records.
std::vector<SyntheticInstance> instances_from_examples(const std::vector<RenderedExample>& examples,
                                                       const Vocabulary& vocab);

std::filesystem::path corpus_file(const std::filesystem::path& dir, std::string_view split,
                                  StageTag stage);

}  // namespace glassbox
