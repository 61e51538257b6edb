#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnsteer/corpus.hpp"

namespace attnsteer {

/// A planted concept plus everything needed to extract and judge it.
struct SuiteConcept {
  PlantedConceptSpec spec;
  std::string prefix_text;
  std::vector<std::string> signal_words;
  std::vector<std::string> probe_questions;  // exactly five
  double judge_threshold = 0.25;             // fixed before any steering run
};

/// Desk-scale benchmark: a closed vocabulary, planted concepts grouped in
/// classes, shared statements, and the options used to sample a training corpus.
struct SyntheticSuite {
  Vocab vocab;
  std::vector<SuiteConcept> concepts;
  std::string question_template;
  std::vector<std::string> statements;
  CorpusOptions corpus;

  std::vector<PlantedConceptSpec> specs() const;
  const SuiteConcept& concept_by_id(const std::string& id) const;
};

struct SuiteOptions {
  std::uint64_t seed = 7;
  std::size_t vocab_size = 4096;
  std::size_t n_statements = 400;
  double strength = 0.6;
  bool include_refusal = true;
  double dampener_rate = 0.08;
  double dampening = 0.35;
};

SyntheticSuite make_default_suite(const SuiteOptions& options = {});

}  // namespace attnsteer
