#include "attnsteer/guidance.hpp"

#include <algorithm>
#include <limits>

namespace attnsteer {

const char* to_string(SelectionMethod method) noexcept {
  switch (method) {
    case SelectionMethod::Attention: return "attention";
    case SelectionMethod::EmbeddingDiff: return "embedding_diff";
    case SelectionMethod::Fixed: return "fixed";
  }
  return "unknown";
}

double attention_to_prefix(const ForwardTrace& trace, int block, int position, int prefix_begin, int prefix_end,
                           HeadAggregation head_agg, int head) {
  if (prefix_end <= prefix_begin) return 0.0;
  if (position < prefix_end) {
    fail(ErrorKind::PositionInsidePrefix,
         "query position " + std::to_string(position) + " is not after the prefix");
  }
  require(position < trace.length(), ErrorKind::MissingTrace, "query position past end of trace");
  if (head_agg == HeadAggregation::Single) {
    const MatrixF& a = trace.attention_at(block, head);
    double s = 0.0;
    for (int j = prefix_begin; j < prefix_end; ++j) s += a(position, j);
    return s;
  }
  double total = 0.0;
  for (int h = 0; h < trace.n_heads(); ++h) {
    const MatrixF& a = trace.attention_at(block, h);
    double s = 0.0;
    for (int j = prefix_begin; j < prefix_end; ++j) s += a(position, j);
    total += s;
  }
  return total / trace.n_heads();
}

const BlockTokenChoice& TokenSelection::at(int block) const {
  require(block >= 1 && block <= static_cast<int>(blocks.size()), ErrorKind::MissingTrace,
          "no token selection for block " + std::to_string(block));
  return blocks[static_cast<std::size_t>(block - 1)];
}

json TokenSelection::to_json() const {
  json out{{"method", to_string(method)}, {"blocks", json::array()}};
  for (const auto& b : blocks) {
    out["blocks"].push_back(json{{"block", b.block},
                                 {"token", kMarkerNames[static_cast<int>(b.marker)]},
                                 {"value", b.value},
                                 {"attaining_prompt", b.attaining_prompt}});
  }
  return out;
}

TokenSelection TokenSelection::from_json(const json& j) {
  TokenSelection sel;
  const auto m = j.at("method").get<std::string>();
  if (m == "attention") sel.method = SelectionMethod::Attention;
  else if (m == "embedding_diff") sel.method = SelectionMethod::EmbeddingDiff;
  else if (m == "fixed") sel.method = SelectionMethod::Fixed;
  else fail(ErrorKind::IoError, "unknown selection method " + m);
  for (const auto& b : j.at("blocks")) {
    sel.blocks.push_back(BlockTokenChoice{b.at("block").get<int>(), marker_from_name(b.at("token").get<std::string>()),
                                          b.at("attaining_prompt").get<int>(), b.at("value").get<double>()});
  }
  return sel;
}

namespace {

void check_inputs(std::span<const ForwardTrace> traces, std::span<const RenderedPrompt> prompts,
                  std::span<const Marker> candidates) {
  if (candidates.empty()) fail(ErrorKind::EmptyCandidateSet, "no candidate tokens");
  require(!prompts.empty(), ErrorKind::InvalidArgument, "no prefixed prompts");
  if (traces.size() != prompts.size()) fail(ErrorKind::MissingTrace, "one trace per prompt required");
}

// Argmax over candidates of a per-(candidate, prompt) score aggregated over
// prompts. Strict '>' keeps the earliest candidate and prompt on ties.
template <typename Score>
BlockTokenChoice argmax_of_aggregate(int block, std::span<const Marker> candidates, std::size_t n_prompts,
                                     PromptAggregation agg, Score&& score) {
  BlockTokenChoice best{block, candidates.front(), -1, -std::numeric_limits<double>::infinity()};
  for (Marker m : candidates) {
    double value = agg == PromptAggregation::Max ? -std::numeric_limits<double>::infinity() : 0.0;
    int attaining = -1;
    for (std::size_t p = 0; p < n_prompts; ++p) {
      const double s = score(m, p);
      if (agg == PromptAggregation::Max) {
        if (s > value) {
          value = s;
          attaining = static_cast<int>(p);
        }
      } else {
        value += s;
      }
    }
    if (agg == PromptAggregation::Mean) value /= static_cast<double>(n_prompts);
    if (value > best.value) best = BlockTokenChoice{block, m, attaining, value};
  }
  return best;
}

}  // namespace

TokenSelection select_token(std::span<const ForwardTrace> traces, std::span<const RenderedPrompt> prompts,
                            std::span<const Marker> candidates, PromptAggregation prompt_agg) {
  check_inputs(traces, prompts, candidates);
  TokenSelection sel;
  sel.method = SelectionMethod::Attention;
  const int n_blocks = traces.front().n_blocks();
  for (int b = 1; b <= n_blocks; ++b) {
    sel.blocks.push_back(argmax_of_aggregate(b, candidates, prompts.size(), prompt_agg, [&](Marker m, std::size_t p) {
      const auto& pr = prompts[p];
      return attention_to_prefix(traces[p], b, pr.position(m), pr.prefix_begin, pr.prefix_end);
    }));
  }
  return sel;
}

TokenSelection select_token_by_embedding_diff(std::span<const ForwardTrace> prefixed_traces,
                                              std::span<const RenderedPrompt> prefixed_prompts,
                                              std::span<const ForwardTrace> unprefixed_traces,
                                              std::span<const RenderedPrompt> unprefixed_prompts,
                                              std::span<const Marker> candidates) {
  check_inputs(prefixed_traces, prefixed_prompts, candidates);
  if (unprefixed_traces.size() != prefixed_traces.size() || unprefixed_prompts.size() != prefixed_prompts.size()) {
    fail(ErrorKind::UnpairedDataset, "prefixed and unprefixed sets differ in size");
  }
  for (std::size_t p = 0; p < prefixed_prompts.size(); ++p) {
    if (prefixed_prompts[p].statement_index != unprefixed_prompts[p].statement_index) {
      fail(ErrorKind::UnpairedDataset, "prompt " + std::to_string(p) + " is not paired by statement");
    }
  }
  TokenSelection sel;
  sel.method = SelectionMethod::EmbeddingDiff;
  const int n_blocks = prefixed_traces.front().n_blocks();
  for (int b = 1; b <= n_blocks; ++b) {
    sel.blocks.push_back(
        argmax_of_aggregate(b, candidates, prefixed_prompts.size(), PromptAggregation::Max, [&](Marker m, std::size_t p) {
          const auto& hc = prefixed_traces[p].hidden_at(b);
          const auto& h0 = unprefixed_traces[p].hidden_at(b);
          const int tc = prefixed_prompts[p].position(m);
          const int t0 = unprefixed_prompts[p].position(m);
          double sq = 0.0;
          for (Eigen::Index c = 0; c < hc.cols(); ++c) {
            const double d = static_cast<double>(hc(tc, c)) - static_cast<double>(h0(t0, c));
            sq += d * d;
          }
          return std::sqrt(sq);
        }));
  }
  return sel;
}

TokenSelection fixed_selection(Marker marker, int n_blocks) {
  TokenSelection sel;
  sel.method = SelectionMethod::Fixed;
  for (int b = 1; b <= n_blocks; ++b) sel.blocks.push_back(BlockTokenChoice{b, marker, -1, 0.0});
  return sel;
}

std::vector<double> SoftLabelSet::block_labels(int block) const {
  std::vector<double> out = prefixed.at(static_cast<std::size_t>(block - 1));
  out.resize(out.size() + n_unprefixed, 0.0);
  return out;
}

double SoftLabelSet::denormalize(int block, double value) const {
  if (!normalized) return value;
  const double lo = raw_min.at(block - 1), hi = raw_max.at(block - 1);
  return lo + value * (hi - lo);
}

SoftLabelSet soft_labels(std::span<const RenderedPrompt> prefixed_prompts,
                         std::span<const ForwardTrace> prefixed_traces, std::size_t n_unprefixed,
                         const TokenSelection& selection, bool normalize) {
  if (prefixed_traces.size() != prefixed_prompts.size()) fail(ErrorKind::MissingTrace, "one trace per prompt required");
  SoftLabelSet labels;
  labels.n_unprefixed = n_unprefixed;
  labels.normalized = normalize;
  for (const auto& choice : selection.blocks) {
    std::vector<double> ys;
    ys.reserve(prefixed_prompts.size());
    for (std::size_t p = 0; p < prefixed_prompts.size(); ++p) {
      const auto& pr = prefixed_prompts[p];
      ys.push_back(attention_to_prefix(prefixed_traces[p], choice.block, pr.position(choice.marker), pr.prefix_begin,
                                       pr.prefix_end));
    }
    const auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
    const double lo = ys.empty() ? 0.0 : *lo_it, hi = ys.empty() ? 0.0 : *hi_it;
    labels.raw_min.push_back(lo);
    labels.raw_max.push_back(hi);
    if (normalize && hi > lo) {
      for (double& y : ys) y = (y - lo) / (hi - lo);
    } else if (normalize) {
      // Constant labels carry no ranking; keep them at the top of the scale.
      std::fill(ys.begin(), ys.end(), hi > 0.0 ? 1.0 : 0.0);
    }
    labels.prefixed.push_back(std::move(ys));
  }
  return labels;
}

}  // namespace attnsteer
