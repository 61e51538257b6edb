#pragma once

#include <span>
#include <string>
#include <vector>

#include "attnsteer/corpus.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/model.hpp"

namespace attnsteer {

enum class HeadAggregation { Mean, Single };
enum class PromptAggregation { Max, Mean };
enum class SelectionMethod { Attention, EmbeddingDiff, Fixed };

const char* to_string(SelectionMethod method) noexcept;

/// Total attention from query `position` to the prefix columns of `prompt`.
/// With HeadAggregation::Mean the rows of all heads are averaged first;
/// HeadAggregation::Single reads `head` only.
double attention_to_prefix(const ForwardTrace& trace, int block, int position, int prefix_begin, int prefix_end,
                           HeadAggregation head_agg = HeadAggregation::Mean, int head = 0);

struct BlockTokenChoice {
  int block = 0;
  Marker marker = Marker::StartHeader;
  int attaining_prompt = -1;  // index into the prompt list; -1 when not applicable
  double value = 0.0;
};

struct TokenSelection {
  SelectionMethod method = SelectionMethod::Attention;
  std::vector<BlockTokenChoice> blocks;  // blocks[b-1]

  const BlockTokenChoice& at(int block) const;
  json to_json() const;
  static TokenSelection from_json(const json& j);
};

/// t_l = argmax over candidates of (max over prompts of attention-to-prefix).
/// Ties go to the candidate listed first.
TokenSelection select_token(std::span<const ForwardTrace> traces, std::span<const RenderedPrompt> prompts,
                            std::span<const Marker> candidates,
                            PromptAggregation prompt_agg = PromptAggregation::Max);

/// Same argmax-of-max structure over ||H(b)[t](prefixed) - H(b)[t](unprefixed)||.
TokenSelection select_token_by_embedding_diff(std::span<const ForwardTrace> prefixed_traces,
                                              std::span<const RenderedPrompt> prefixed_prompts,
                                              std::span<const ForwardTrace> unprefixed_traces,
                                              std::span<const RenderedPrompt> unprefixed_prompts,
                                              std::span<const Marker> candidates);

TokenSelection fixed_selection(Marker marker, int n_blocks);

struct SoftLabelSet {
  std::vector<std::vector<double>> prefixed;  // [block-1][prompt]
  std::size_t n_unprefixed = 0;               // labels are exactly 0
  bool normalized = false;
  std::vector<double> raw_min, raw_max;       // per block, for de-normalization

  double label(int block, std::size_t prompt) const { return prefixed.at(block - 1).at(prompt); }
  /// Labels for [prefixed..., unprefixed...] at one block.
  std::vector<double> block_labels(int block) const;
  double denormalize(int block, double value) const;
};

SoftLabelSet soft_labels(std::span<const RenderedPrompt> prefixed_prompts,
                         std::span<const ForwardTrace> prefixed_traces, std::size_t n_unprefixed,
                         const TokenSelection& selection, bool normalize);

}  // namespace attnsteer
