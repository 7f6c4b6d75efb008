#pragma once

// Logit-lens decoding of intermediate layers and attention-relation probes
// for the quality position, plus their corpus-level aggregations.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "glassbox/datagen.hpp"
#include "glassbox/model.hpp"
#include "glassbox/training.hpp"

namespace glassbox {

// Inclusive range of hidden-state taps; 0 = embeddings, n_layers = last block.
struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const noexcept { return last - first + 1; }
  bool operator==(const LayerRange&) const = default;
};

// start = max(1, floor(n_layers * 30 / 32)), end = n_layers.
LayerRange default_probe_range(const ModelConfig& config);
// "auto", "all", "N" or "A..B".
LayerRange parse_layer_range(std::string_view text, const ModelConfig& config);

struct LensCandidate {
  TokenId token = 0;
  double probability = 0.0;
};

struct LayerLens {
  std::size_t layer = 0;
  std::vector<LensCandidate> top;     // descending, ties -> lower id first
  std::vector<double> distribution;  // full vocabulary
};

struct LayerLensTrace {
  std::size_t position = 0;
  LayerRange range;
  std::vector<LayerLens> layers;
};

template <typename T>
LayerLensTrace logit_lens(const ModelState<T>& model, const ForwardTrace<T>& trace,
                          std::size_t position, LayerRange range, std::size_t k = 4);

// Header: layer,rank,token,probability
std::string lens_csv(const LayerLensTrace& lens, const Vocabulary& vocab);
std::string lens_svg(const LayerLensTrace& lens, const Vocabulary& vocab);

// Which layers/heads are averaged; nullopt means all of them.
struct AttentionAggregation {
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;

  std::string describe() const;
};

// Visual positions, prompt positions (special tokens count as prompt) and
// description positions.
struct SegmentMass {
  double visual = 0.0;
  double prompt = 0.0;
  double description = 0.0;

  double total() const noexcept { return visual + prompt + description; }
};

SegmentMass segment_mass(std::span<const double> weights, std::span<const Segment> segments);

struct AttentionRelation {
  std::size_t target = 0;
  std::vector<double> weights;  // one per context position j <= target
  AttentionAggregation aggregation;
  std::size_t maps_averaged = 0;
  SegmentMass mass;
};

template <typename T>
AttentionRelation attention_relation(const ForwardTrace<T>& trace, const InputSequence& input,
                                     std::size_t target_position,
                                     const AttentionAggregation& aggregation = {});

// seq x seq mean over the selected layers and heads.
template <typename T>
Matrix aggregate_attention(const ForwardTrace<T>& trace, const AttentionAggregation& aggregation);

// Teacher-forced probe input: the ground-truth description placed in the
// template the regimen's model answers from. One-stage:
// [bos][visual][rate_quality][description]; two-stage:
// [bos][rate_quality][description]. The quality position is the last token.
InputSequence probe_sequence(const SyntheticInstance& instance, Regimen regimen);

struct AttentionMap {
  Matrix mean;                    // aligned length x aligned length
  std::vector<Segment> segments;  // per aligned position
  std::size_t samples = 0;
  std::size_t quality_position = 0;
  SegmentMass quality_mass;  // segment split of the quality row
};

// Elementwise mean over valid cells. A cell (i, j) of map s is valid when
// both positions are valid for s; cells valid for no sample stay 0. Maps
// shorter than the aligned length count as padded at the end.
Matrix average_maps(std::span<const Matrix> maps, std::span<const std::vector<std::uint8_t>> valid);

template <typename T>
AttentionMap average_attention_map(const ModelState<T>& model,
                                   std::span<const SyntheticInstance> samples, Regimen regimen,
                                   const AttentionAggregation& aggregation = {});

// Header: row,col,weight (lower triangle incl. diagonal).
std::string attention_csv(const Matrix& map);
// Header: segment,mass
std::string segment_summary_csv(const SegmentMass& mass);
// Linear ramp from white (0) to #08306b (max weight in the map).
std::string attention_svg(const AttentionMap& map);

struct TokenEvolution {
  std::string target_class;
  std::size_t sample_count = 0;
  LayerRange range;
  // frequencies[layer - range.first] over the quality levels 0..4, then "other".
  std::vector<std::vector<double>> frequencies;
};

inline constexpr std::size_t kEvolutionBuckets = kQualityLevels + 1;

// Samples whose final-layer top-1 at the quality position is `target_class`.
template <typename T>
std::vector<SyntheticInstance> filter_by_prediction(const ModelState<T>& model,
                                                    std::span<const SyntheticInstance> samples,
                                                    Regimen regimen, TokenId target_class);

template <typename T>
TokenEvolution token_evolution(const ModelState<T>& model,
                               std::span<const SyntheticInstance> samples, Regimen regimen,
                               TokenId target_class, LayerRange range, const Vocabulary& vocab);

// Header: layer,token,frequency
std::string evolution_csv(const TokenEvolution& evolution, const Vocabulary& vocab);
std::string evolution_svg(const TokenEvolution& evolution, const Vocabulary& vocab);

}  // namespace glassbox
