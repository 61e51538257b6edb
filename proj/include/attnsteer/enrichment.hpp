#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnsteer/corpus.hpp"
#include "attnsteer/guidance.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/model.hpp"

namespace attnsteer {

struct PermutationTestConfig {
  int n_permutations = 500;
  double alpha = 0.01;
  std::uint64_t rng_seed = 0;
  int exact_max_eligible = 6;  // enumerate all |I|! orderings at or below this size

  void validate() const;
  json to_json() const;
  static PermutationTestConfig from_json(const json& j);
  std::string hash() const;
};

struct PermutationResult {
  double p_value = 1.0;
  double observed = 0.0;  // S_obs over prefix positions inside the eligible set
  int n_eligible = 0;
  int n_prefix_eligible = 0;
  long long n_draws = 0;
  bool exact = false;
};

/// Permutation p-value for the attention row of query `position`. The eligible
/// set is positions 1..position-1 (BOS sink at 0 and the query itself are left
/// out); the statistic sums the row over the prefix positions inside it.
PermutationResult permutation_test(std::span<const float> row, int position, int prefix_begin, int prefix_end,
                                   const PermutationTestConfig& config, std::uint64_t stream_seed);

struct BlockEnrichment {
  int block = 0;
  double score = 0.0;
  int n_significant = 0;
  int n_cells = 0;
  int n_skipped = 0;                            // cells with no prefix inside the eligible set
  std::vector<std::vector<double>> p_values;    // [head][prompt]
};

struct EnrichmentReport {
  std::string concept_id;
  PermutationTestConfig config;
  std::vector<BlockEnrichment> blocks;  // blocks[b-1]

  double score(int block) const;
  std::vector<double> scores() const;
  json to_json(bool include_p_values = false) const;
  static EnrichmentReport from_json(const json& j);
};

/// Fraction of (head, prompt) cells at `block` whose p-value is <= alpha.
BlockEnrichment enrichment_score(std::span<const RenderedPrompt> prefixed_prompts,
                                 std::span<const ForwardTrace> traces, const TokenSelection& selection, int block,
                                 const PermutationTestConfig& config);

EnrichmentReport enrichment_report(const std::string& concept_id, std::span<const RenderedPrompt> prefixed_prompts,
                                   std::span<const ForwardTrace> traces, const TokenSelection& selection,
                                   const PermutationTestConfig& config);

enum class RankDirection { Top, Bottom };

/// k blocks with the highest (Top) or lowest (Bottom) scores, in rank order.
/// scores[b-1] belongs to block b. Block 1 is not eligible unless include_first.
/// Ties go to the lower block index.
std::vector<int> rank_blocks(std::span<const double> scores, int k, RankDirection direction,
                             bool include_first = false);

/// Rows are concepts, columns block_1..block_L.
void write_enrichment_csv(const fs::path& path, std::span<const EnrichmentReport> reports);
void write_enrichment_sidecar(const fs::path& path, std::span<const EnrichmentReport> reports);
std::vector<EnrichmentReport> read_enrichment_sidecar(const fs::path& path);

}  // namespace attnsteer
