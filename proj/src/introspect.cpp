#include "glassbox/introspect.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "glassbox/io.hpp"
#include "glassbox/parallel.hpp"

namespace glassbox {

LayerRange default_probe_range(const ModelConfig& config) {
  const std::size_t start = std::max<std::size_t>(1, config.n_layers * 30 / 32);
  return {std::min(start, config.n_layers), config.n_layers};
}

namespace {

std::size_t parse_index(std::string_view s, std::string_view whole) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc() || ptr != end) {
    throw std::invalid_argument("bad layer range '" + std::string(whole) +
                                "' (expected auto, all, N or A..B)");
  }
  return v;
}

void check_range(LayerRange r, const ModelConfig& config) {
  if (r.first > r.last || r.last > config.n_layers) {
    throw std::out_of_range("layer range " + std::to_string(r.first) + ".." +
                            std::to_string(r.last) + " outside 0.." +
                            std::to_string(config.n_layers));
  }
}

}  // namespace

LayerRange parse_layer_range(std::string_view text, const ModelConfig& config) {
  LayerRange r;
  if (text == "auto") {
    r = default_probe_range(config);
  } else if (text == "all") {
    r = {0, config.n_layers};
  } else if (const auto dots = text.find(".."); dots != std::string_view::npos) {
    r = {parse_index(text.substr(0, dots), text), parse_index(text.substr(dots + 2), text)};
  } else {
    const std::size_t l = parse_index(text, text);
    r = {l, l};
  }
  check_range(r, config);
  return r;
}

template <typename T>
LayerLensTrace logit_lens(const ModelState<T>& model, const ForwardTrace<T>& trace,
                          std::size_t position, LayerRange range, std::size_t k) {
  check_range(range, model.config);
  if (trace.hidden_states.size() != model.config.n_layers + 1) {
    throw std::invalid_argument("trace has " + std::to_string(trace.hidden_states.size()) +
                                " hidden states, model expects " +
                                std::to_string(model.config.n_layers + 1));
  }
  if (position >= trace.seq_len()) {
    throw std::out_of_range("lens position " + std::to_string(position) +
                            " outside sequence of length " + std::to_string(trace.seq_len()));
  }
  if (k == 0) throw std::invalid_argument("topk must be >= 1");

  LayerLensTrace out;
  out.position = position;
  out.range = range;
  for (std::size_t layer = range.first; layer <= range.last; ++layer) {
    const auto logits = decode_hidden(model, trace.hidden_states[layer].row(position));
    std::vector<double> wide(logits.begin(), logits.end());
    LayerLens lens;
    lens.layer = layer;
    lens.distribution = softmax<double>(wide);
    std::vector<TokenId> order(lens.distribution.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    const std::size_t kk = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(),
                      [&](TokenId a, TokenId b) {
                        const double pa = lens.distribution[static_cast<std::size_t>(a)];
                        const double pb = lens.distribution[static_cast<std::size_t>(b)];
                        return pa != pb ? pa > pb : a < b;
                      });
    for (std::size_t r = 0; r < kk; ++r) {
      lens.top.push_back({order[r], lens.distribution[static_cast<std::size_t>(order[r])]});
    }
    out.layers.push_back(std::move(lens));
  }
  return out;
}

std::string lens_csv(const LayerLensTrace& lens, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "layer,rank,token,probability\n";
  for (const auto& layer : lens.layers) {
    for (std::size_t r = 0; r < layer.top.size(); ++r) {
      out << layer.layer << ',' << r + 1 << ',' << vocab.name(layer.top[r].token) << ','
          << io::format_real(layer.top[r].probability) << '\n';
    }
  }
  return out.str();
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// t in [0, 1] -> white .. #08306b
std::string ramp_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto channel = [t](int hi) { return static_cast<int>(std::lround(255.0 + (hi - 255.0) * t)); };
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", channel(0x08), channel(0x30), channel(0x6b));
  return buf;
}

std::string svg_open(int width, int height) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
         "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\" font-size=\"11\">\n";
}

}  // namespace

std::string lens_svg(const LayerLensTrace& lens, const Vocabulary& vocab) {
  const int cell_w = 120, cell_h = 22, left = 60, top = 30;
  const std::size_t k = lens.layers.empty() ? 0 : lens.layers.front().top.size();
  std::ostringstream out;
  out << svg_open(left + cell_w * static_cast<int>(k) + 10,
                  top + cell_h * static_cast<int>(lens.layers.size()) + 10);
  out << "<text x=\"4\" y=\"16\">logit lens at position " << lens.position << "</text>\n";
  for (std::size_t row = 0; row < lens.layers.size(); ++row) {
    const auto& layer = lens.layers[row];
    const int y = top + cell_h * static_cast<int>(row);
    out << "<text x=\"4\" y=\"" << y + 15 << "\">L" << layer.layer << "</text>\n";
    for (std::size_t r = 0; r < layer.top.size(); ++r) {
      const int x = left + cell_w * static_cast<int>(r);
      const double p = layer.top[r].probability;
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w - 2 << "\" height=\""
          << cell_h - 2 << "\" fill=\"" << ramp_color(p) << "\"/>\n";
      out << "<text x=\"" << x + 4 << "\" y=\"" << y + 15 << "\" fill=\""
          << (p > 0.5 ? "#ffffff" : "#000000") << "\">"
          << xml_escape(vocab.name(layer.top[r].token)) << ' ' << io::format_fixed(p, 3)
          << "</text>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

std::string AttentionAggregation::describe() const {
  return std::string("layer=") + (layer ? std::to_string(*layer) : "all") +
         " head=" + (head ? std::to_string(*head) : "all");
}

SegmentMass segment_mass(std::span<const double> weights, std::span<const Segment> segments) {
  if (weights.size() > segments.size()) {
    throw std::invalid_argument("segment markers shorter than relation weights");
  }
  SegmentMass m;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    switch (segments[j]) {
      case Segment::image: m.visual += weights[j]; break;
      case Segment::description: m.description += weights[j]; break;
      default: m.prompt += weights[j]; break;
    }
  }
  return m;
}

template <typename T>
Matrix aggregate_attention(const ForwardTrace<T>& trace, const AttentionAggregation& aggregation) {
  const std::size_t n_layers = trace.attention.size();
  if (n_layers == 0) throw std::invalid_argument("trace holds no attention maps");
  const std::size_t n_heads = trace.attention.front().size();
  if (aggregation.layer && *aggregation.layer >= n_layers) {
    throw std::out_of_range("attention layer " + std::to_string(*aggregation.layer) +
                            " outside 0.." + std::to_string(n_layers - 1));
  }
  if (aggregation.head && *aggregation.head >= n_heads) {
    throw std::out_of_range("attention head " + std::to_string(*aggregation.head) +
                            " outside 0.." + std::to_string(n_heads - 1));
  }
  const std::size_t s = trace.seq_len();
  Matrix out(s, s);
  std::size_t count = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (aggregation.layer && l != *aggregation.layer) continue;
    for (std::size_t h = 0; h < n_heads; ++h) {
      if (aggregation.head && h != *aggregation.head) continue;
      const auto& a = trace.attention[l][h];
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j <= i; ++j) out(i, j) += static_cast<double>(a(i, j));
      }
      ++count;
    }
  }
  for (double& x : out.values()) x /= static_cast<double>(count);
  return out;
}

template <typename T>
AttentionRelation attention_relation(const ForwardTrace<T>& trace, const InputSequence& input,
                                     std::size_t target_position,
                                     const AttentionAggregation& aggregation) {
  if (target_position >= trace.seq_len()) {
    throw std::out_of_range("relation target " + std::to_string(target_position) +
                            " outside sequence of length " + std::to_string(trace.seq_len()));
  }
  if (input.size() != trace.seq_len()) {
    throw std::invalid_argument("input length does not match the trace");
  }
  const Matrix agg = aggregate_attention(trace, aggregation);
  AttentionRelation rel;
  rel.target = target_position;
  rel.aggregation = aggregation;
  rel.maps_averaged = (aggregation.layer ? 1 : trace.attention.size()) *
                      (aggregation.head ? 1 : trace.attention.front().size());
  rel.weights.assign(agg.row(target_position).begin(),
                     agg.row(target_position).begin() + static_cast<std::ptrdiff_t>(target_position) + 1);
  rel.mass = segment_mass(rel.weights, input.segments);
  return rel;
}

InputSequence probe_sequence(const SyntheticInstance& instance, Regimen regimen) {
  return regimen == Regimen::one_stage ? one_stage_with_description(instance, instance.description)
                                       : stage_two_input(instance.description);
}

Matrix average_maps(std::span<const Matrix> maps, std::span<const std::vector<std::uint8_t>> valid) {
  if (maps.empty()) throw std::invalid_argument("cannot average an empty set of attention maps");
  if (valid.size() != maps.size()) throw std::invalid_argument("one validity mask per map required");
  std::size_t n = 0;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (maps[s].rows() != maps[s].cols() || valid[s].size() != maps[s].rows()) {
      throw std::invalid_argument("attention map " + std::to_string(s) + " is " +
                                  maps[s].shape_string() + " with a mask of " +
                                  std::to_string(valid[s].size()));
    }
    n = std::max(n, maps[s].rows());
  }
  Matrix sum(n, n);
  Matrix count(n, n);
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const std::size_t m = maps[s].rows();
    for (std::size_t i = 0; i < m; ++i) {
      if (!valid[s][i]) continue;
      for (std::size_t j = 0; j < m; ++j) {
        if (!valid[s][j]) continue;
        sum(i, j) += maps[s](i, j);
        count(i, j) += 1.0;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (count(i, j) > 0.0) sum(i, j) /= count(i, j);
    }
  }
  return sum;
}

template <typename T>
AttentionMap average_attention_map(const ModelState<T>& model,
                                   std::span<const SyntheticInstance> samples, Regimen regimen,
                                   const AttentionAggregation& aggregation) {
  if (samples.empty()) throw std::invalid_argument("attention probe needs at least one sample");
  std::vector<InputSequence> inputs;
  inputs.reserve(samples.size());
  for (const auto& s : samples) inputs.push_back(probe_sequence(s, regimen));

  std::vector<Matrix> maps(samples.size());
  std::vector<std::vector<std::uint8_t>> valid(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    maps[i] = aggregate_attention(forward(model, inputs[i]), aggregation);
    valid[i].resize(inputs[i].size());
    for (std::size_t p = 0; p < inputs[i].size(); ++p) {
      valid[i][p] = inputs[i].tokens[p] != Vocabulary::pad;
    }
  });

  AttentionMap out;
  out.mean = average_maps(maps, valid);
  out.samples = samples.size();
  const auto longest = std::max_element(inputs.begin(), inputs.end(), [](const auto& a, const auto& b) {
    return a.size() < b.size();
  });
  out.segments = longest->segments;
  out.quality_position = longest->quality_position.value_or(longest->size() - 1);
  const auto row = out.mean.row(out.quality_position);
  out.quality_mass = segment_mass(
      std::span<const double>(row.data(), out.quality_position + 1), out.segments);
  return out;
}

std::string attention_csv(const Matrix& map) {
  std::ostringstream out;
  out << "row,col,weight\n";
  for (std::size_t i = 0; i < map.rows(); ++i) {
    for (std::size_t j = 0; j <= i && j < map.cols(); ++j) {
      out << i << ',' << j << ',' << io::format_real(map(i, j)) << '\n';
    }
  }
  return out.str();
}

std::string segment_summary_csv(const SegmentMass& mass) {
  std::ostringstream out;
  out << "segment,mass\n";
  out << "visual," << io::format_real(mass.visual) << '\n';
  out << "prompt," << io::format_real(mass.prompt) << '\n';
  out << "description," << io::format_real(mass.description) << '\n';
  return out.str();
}

std::string attention_svg(const AttentionMap& map) {
  const int cell = 24, left = 40, top = 40;
  const int n = static_cast<int>(map.mean.rows());
  double hi = 0.0;
  for (double x : map.mean.values()) hi = std::max(hi, x);
  if (hi <= 0.0) hi = 1.0;
  auto tag = [](Segment s) {
    switch (s) {
      case Segment::image: return "V";
      case Segment::description: return "D";
      case Segment::special: return "S";
      default: return "P";
    }
  };
  std::ostringstream out;
  out << svg_open(left + cell * n + 10, top + cell * n + 30);
  out << "<text x=\"4\" y=\"14\">mean attention over " << map.samples
      << " samples (max " << io::format_fixed(hi, 3) << ")</text>\n";
  for (int i = 0; i < n; ++i) {
    const char* t = i < static_cast<int>(map.segments.size()) ? tag(map.segments[i]) : "-";
    out << "<text x=\"" << left + cell * i + 8 << "\" y=\"" << top - 6 << "\">" << t << "</text>\n";
    out << "<text x=\"" << 8 << "\" y=\"" << top + cell * i + 16 << "\""
        << (i == static_cast<int>(map.quality_position) ? " font-weight=\"bold\"" : "") << ">" << t
        << i << "</text>\n";
    for (int j = 0; j <= i; ++j) {
      out << "<rect x=\"" << left + cell * j << "\" y=\"" << top + cell * i << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << ramp_color(map.mean(i, j) / hi) << "\"/>\n";
    }
  }
  out << "<text x=\"4\" y=\"" << top + cell * n + 20
      << "\">V visual, P prompt, S special, D description</text>\n";
  out << "</svg>\n";
  return out.str();
}

namespace {

template <typename T>
TokenId final_top1(const ModelState<T>& model, const InputSequence& input) {
  const auto trace = forward(model, input);
  const std::size_t pos = input.quality_position.value_or(input.size() - 1);
  const LayerRange last{model.config.n_layers, model.config.n_layers};
  return logit_lens(model, trace, pos, last, 1).layers.front().top.front().token;
}

}  // namespace

template <typename T>
std::vector<SyntheticInstance> filter_by_prediction(const ModelState<T>& model,
                                                    std::span<const SyntheticInstance> samples,
                                                    Regimen regimen, TokenId target_class) {
  std::vector<std::uint8_t> keep(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    keep[i] = final_top1(model, probe_sequence(samples[i], regimen)) == target_class;
  });
  std::vector<SyntheticInstance> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (keep[i]) out.push_back(samples[i]);
  }
  return out;
}

template <typename T>
TokenEvolution token_evolution(const ModelState<T>& model,
                               std::span<const SyntheticInstance> samples, Regimen regimen,
                               TokenId target_class, LayerRange range, const Vocabulary& vocab) {
  if (samples.empty()) throw std::invalid_argument("token evolution needs at least one sample");
  check_range(range, model.config);
  const auto level = vocab.quality_level_of(target_class);
  if (!level) throw std::invalid_argument("target class must be a quality token");

  // top1[sample][layer - first]
  std::vector<std::vector<TokenId>> top1(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto input = probe_sequence(samples[i], regimen);
    const auto trace = forward(model, input);
    const auto lens = logit_lens(model, trace, *input.quality_position, range, 1);
    for (const auto& l : lens.layers) top1[i].push_back(l.top.front().token);
  });

  TokenEvolution ev;
  ev.target_class = vocab.name(target_class);
  ev.sample_count = samples.size();
  ev.range = range;
  ev.frequencies.assign(range.size(), std::vector<double>(kEvolutionBuckets, 0.0));
  for (const auto& row : top1) {
    for (std::size_t l = 0; l < row.size(); ++l) {
      const auto q = vocab.quality_level_of(row[l]);
      ev.frequencies[l][q ? static_cast<std::size_t>(*q) : kQualityLevels] += 1.0;
    }
  }
  for (auto& row : ev.frequencies) {
    for (double& f : row) f /= static_cast<double>(samples.size());
  }
  return ev;
}

std::string evolution_csv(const TokenEvolution& evolution, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "layer,token,frequency\n";
  for (std::size_t l = 0; l < evolution.frequencies.size(); ++l) {
    for (std::size_t b = 0; b < kEvolutionBuckets; ++b) {
      const std::string name =
          b < static_cast<std::size_t>(kQualityLevels) ? vocab.name(vocab.quality_token(static_cast<int>(b))) : "other";
      out << evolution.range.first + l << ',' << name << ','
          << io::format_real(evolution.frequencies[l][b]) << '\n';
    }
  }
  return out.str();
}

std::string evolution_svg(const TokenEvolution& evolution, const Vocabulary& vocab) {
  static const char* colors[kEvolutionBuckets] = {"#d62728", "#ff7f0e", "#bcbd22",
                                                  "#2ca02c", "#1f77b4", "#7f7f7f"};
  const int width = 480, height = 280, left = 50, right = 110, top = 30, bottom = 40;
  const int pw = width - left - right, ph = height - top - bottom;
  const std::size_t n = evolution.frequencies.size();
  auto xpos = [&](std::size_t l) {
    return left + (n > 1 ? static_cast<double>(pw) * l / static_cast<double>(n - 1) : pw / 2.0);
  };
  auto ypos = [&](double f) { return top + ph * (1.0 - f); };

  std::ostringstream out;
  out << svg_open(width, height);
  out << "<text x=\"4\" y=\"16\">top-1 frequency per layer, class " << xml_escape(evolution.target_class)
      << ", n=" << evolution.sample_count << "</text>\n";
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#000000\"/>\n";
  for (std::size_t l = 0; l < n; ++l) {
    out << "<text x=\"" << xpos(l) - 4 << "\" y=\"" << top + ph + 16 << "\">"
        << evolution.range.first + l << "</text>\n";
  }
  out << "<text x=\"4\" y=\"" << top + 8 << "\">1.0</text>\n";
  out << "<text x=\"4\" y=\"" << top + ph << "\">0.0</text>\n";
  for (std::size_t b = 0; b < kEvolutionBuckets; ++b) {
    out << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << colors[b] << "\" points=\"";
    for (std::size_t l = 0; l < n; ++l) {
      out << io::format_fixed(xpos(l), 1) << ',' << io::format_fixed(ypos(evolution.frequencies[l][b]), 1)
          << (l + 1 < n ? " " : "");
    }
    out << "\"/>\n";
    const std::string name =
        b < static_cast<std::size_t>(kQualityLevels) ? vocab.name(vocab.quality_token(static_cast<int>(b))) : "other";
    out << "<text x=\"" << width - right + 10 << "\" y=\"" << top + 14 + 16 * static_cast<int>(b)
        << "\" fill=\"" << colors[b] << "\">" << xml_escape(name) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

#define GLASSBOX_INSTANTIATE(T)                                                                  \
  template LayerLensTrace logit_lens<T>(const ModelState<T>&, const ForwardTrace<T>&,            \
                                        std::size_t, LayerRange, std::size_t);                   \
  template Matrix aggregate_attention<T>(const ForwardTrace<T>&, const AttentionAggregation&);   \
  template AttentionRelation attention_relation<T>(const ForwardTrace<T>&, const InputSequence&, \
                                                   std::size_t, const AttentionAggregation&);    \
  template AttentionMap average_attention_map<T>(const ModelState<T>&,                           \
                                                 std::span<const SyntheticInstance>, Regimen,    \
                                                 const AttentionAggregation&);                   \
  template std::vector<SyntheticInstance> filter_by_prediction<T>(                               \
      const ModelState<T>&, std::span<const SyntheticInstance>, Regimen, TokenId);               \
  template TokenEvolution token_evolution<T>(const ModelState<T>&,                               \
                                             std::span<const SyntheticInstance>, Regimen,        \
                                             TokenId, LayerRange, const Vocabulary&);

GLASSBOX_INSTANTIATE(float)
GLASSBOX_INSTANTIATE(double)

#undef GLASSBOX_INSTANTIATE

}  // namespace glassbox
