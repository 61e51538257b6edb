#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attnsteer/common.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

// Chat-template tail markers, in the declared order used for tie-breaking.
enum class Marker : int { StartHeader = 0, Role = 1, EndHeader = 2, Newline = 3 };
inline constexpr int kNumMarkers = 4;
inline constexpr std::array<std::string_view, kNumMarkers> kMarkerTokens = {
    "<start_header>", "assistant", "<end_header>", "<nl>"};
inline constexpr std::array<std::string_view, kNumMarkers> kMarkerNames = {
    "start_header", "assistant", "end_header", "newline"};
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kBosToken = "<bos>";

Marker marker_from_name(std::string_view name);

/// Closed word-level vocabulary. Line number in the vocab file is the id.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId pad_id() const noexcept { return pad_id_; }
  TokenId bos_id() const noexcept { return bos_id_; }
  TokenId marker_id(Marker m) const noexcept { return marker_ids_[static_cast<int>(m)]; }
  const std::array<TokenId, kNumMarkers>& marker_ids() const noexcept { return marker_ids_; }
  bool is_special(TokenId id) const noexcept;

  // SHA-256 of the newline-joined token list; keys token caches to a vocab.
  std::string hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_id_ = -1;
  TokenId bos_id_ = -1;
  std::array<TokenId, kNumMarkers> marker_ids_{};
};

struct TokenizerOptions {
  // Out-of-vocabulary words are spelled as "c" "##c" "##c"... when enabled.
  bool char_fallback = false;
};

std::string normalize_text(std::string_view text);
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab, TokenizerOptions options = {});
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

/// One rendered prompt: [BOS][prefix?][question + statement][4 markers].
/// Positions are 0-based; BOS sits at position 0 so the prefix span starts at 1.
struct RenderedPrompt {
  std::vector<TokenId> token_ids;
  int prefix_begin = 1;  // half-open [prefix_begin, prefix_end)
  int prefix_end = 1;
  std::array<int, kNumMarkers> candidate_positions{};
  int statement_index = -1;

  int length() const noexcept { return static_cast<int>(token_ids.size()); }
  int prefix_length() const noexcept { return prefix_end - prefix_begin; }
  bool has_prefix() const noexcept { return prefix_end > prefix_begin; }
  int position(Marker m) const noexcept { return candidate_positions[static_cast<int>(m)]; }
};

RenderedPrompt render_prompt(std::span<const TokenId> prefix, std::span<const TokenId> body,
                             const Vocab& vocab);

struct ConceptDataset {
  std::string concept_id;
  std::string prefix;
  std::string question_template;
  std::vector<std::string> statements;
  std::uint64_t split_seed = 0;
  std::vector<RenderedPrompt> prefixed;    // P_c
  std::vector<RenderedPrompt> unprefixed;  // P_0
  // Same statements as `prefixed`, rendered without the prefix. Used only by
  // pairwise comparisons; never part of P_0.
  std::vector<RenderedPrompt> counterparts;
};

/// Seeded uniform split of the statements into equal prefixed/unprefixed halves.
ConceptDataset build_concept_dataset(const std::vector<std::string>& statements,
                                     std::string_view question_template, std::string_view prefix,
                                     const Vocab& vocab, std::uint64_t split_seed,
                                     std::string concept_id = {});

/// JSON {concept_id, prefix, question_template, statements[], split_seed} plus a
/// sidecar "<stem>.tokens" blob of int32 token ids keyed by the vocab hash.
/// `meta`, when non-empty, is stored under "meta" and ignored on load.
void save_dataset(const ConceptDataset& dataset, const Vocab& vocab, const std::filesystem::path& json_path,
                  const json& meta = json::object());
ConceptDataset load_dataset(const std::filesystem::path& json_path, const Vocab& vocab);

struct PlantedConceptSpec {
  std::string concept_id;
  std::string concept_class;
  std::vector<TokenId> prefix_phrase;
  std::vector<TokenId> signal_tokens;
  double strength = 0.5;
};

struct CorpusOptions {
  std::vector<std::vector<TokenId>> questions;  // question bodies
  std::vector<TokenId> statement_pool;          // filler words for statements
  std::vector<TokenId> answer_pool;             // concept-neutral continuation words
  std::size_t statement_question = 0;  // index of the question that takes a statement
  double unprefixed_fraction = 0.4;
  double statement_fraction = 0.5;
  int min_statement_words = 4;
  int max_statement_words = 8;
  int continuation_length = 12;
  bool require_disjoint_signals = true;
  // Statement words drawn from dampener_pool (at dampener_rate per word) each
  // multiply the concept strength by `dampening`, so prefixed sequences carry
  // graded rather than all-or-nothing concept activity.
  std::vector<TokenId> dampener_pool;
  double dampener_rate = 0.0;
  double dampening = 1.0;
};

struct CorpusSequence {
  std::vector<TokenId> tokens;
  int concept_index = -1;  // -1 for prefix-free sequences
  int continuation_begin = 0;
};

/// Sequences where a concept's prefix raises the frequency of its signal
/// tokens in the continuation by `strength`.
std::vector<CorpusSequence> generate_synthetic_corpus(std::span<const PlantedConceptSpec> specs,
                                                      const Vocab& vocab, std::size_t n_sequences,
                                                      std::uint64_t rng_seed,
                                                      const CorpusOptions& options);

}  // namespace attnsteer
