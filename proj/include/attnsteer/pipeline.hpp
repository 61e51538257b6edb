#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attnsteer/corpus.hpp"
#include "attnsteer/enrichment.hpp"
#include "attnsteer/extraction.hpp"
#include "attnsteer/guidance.hpp"
#include "attnsteer/io.hpp"
#include "attnsteer/judge.hpp"
#include "attnsteer/model.hpp"
#include "attnsteer/suite.hpp"

namespace attnsteer {

inline constexpr const char* kArtifactRootEnv = "ATTNSTEER_ARTIFACT_ROOT";
inline constexpr const char* kThreadsEnv = "ATTNSTEER_THREADS";

struct BlockPolicy {
  enum class Kind { AllExceptFirst, TopK, BottomK, Explicit };
  Kind kind = Kind::AllExceptFirst;
  int k = 0;  // 0 means ceil(L/2)
  std::vector<int> blocks;

  bool needs_enrichment() const noexcept { return kind == Kind::TopK || kind == Kind::BottomK; }
  /// `scores[b-1]` is the enrichment score of block b; only read for top/bottom k.
  std::vector<int> resolve(int n_blocks, const std::vector<double>& scores = {}) const;
  json to_json() const;
  static BlockPolicy from_json(const json& j);
};

/// One extraction + steering recipe. `name` labels its outputs.
struct MethodConfig {
  std::string name = "attn-soft";
  SelectionMethod selection = SelectionMethod::Attention;
  Marker fixed_marker = Marker::EndHeader;
  bool soft_labels = true;
  std::string extractor = "rfm";  // diff_means | pca | ridge | logistic | rfm
  PreprocessFlags preprocess;
  RfmOptions rfm;
  GridOptions ridge_grid = default_ridge_grid();
  GridOptions logistic_grid = default_logistic_grid();
  std::uint64_t pca_seed = 0;
  BlockPolicy blocks;

  void validate() const;
  /// Identifies the vectors this method produces; block policy is not part of it.
  std::string extraction_key() const;
  json extraction_json() const;
  json to_json() const;
  static MethodConfig from_json(const json& j);
  static MethodConfig from_json(const json& j, const MethodConfig& base);
};

struct Comparison {
  std::string axis;
  std::string baseline;
  std::string treatment;
};

struct JudgeSettings {
  std::string kind = "keyword";  // keyword | http
  HttpJudgeConfig http;
  std::string replay_path;  // http only: answer from a recorded transcript
  std::string record_path;  // http only: record the live transcript here
};

/// Negative-coefficient steering on a refuse-mode concept.
struct JailbreakSettings {
  bool enabled = true;
  std::string concept_id = "refusal";
  std::string method = "attn-soft";
  std::vector<double> coefficients{-0.2, -0.4, -0.6, -0.8, -1.0};
};

struct ExperimentConfig {
  SuiteOptions suite;
  std::size_t corpus_sequences = 10000;
  std::uint64_t corpus_seed = 11;
  ModelConfig model;
  TrainOptions train;
  std::string checkpoint;  // use this checkpoint instead of training

  std::optional<std::vector<std::string>> concepts;  // nullopt: every suite concept
  std::size_t dataset_statements = 400;
  std::uint64_t split_seed = 3;
  std::vector<Marker> candidates{Marker::StartHeader, Marker::Role, Marker::EndHeader, Marker::Newline};

  MethodConfig method;
  std::vector<MethodConfig> variants;
  std::vector<Comparison> comparisons;

  std::vector<double> coefficients{0.2, 0.4, 0.6, 0.8, 1.0};
  double coefficient_limit = 1.0;
  int max_new_tokens = 12;
  double success_threshold = 0.6;

  PermutationTestConfig enrichment;
  JudgeSettings judge;
  JailbreakSettings jailbreak;

  // Not part of the config hash.
  std::string output_root;  // empty: $ATTNSTEER_ARTIFACT_ROOT, else ./artifacts
  int threads = 0;

  static ExperimentConfig defaults();
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const fs::path& path);

  void validate() const;
  json to_json() const;
  /// Canonical JSON of everything that affects artifact contents.
  json hashed_json() const;
  std::string hash() const;

  const MethodConfig& method_named(const std::string& name) const;
  /// Base method followed by variants, without duplicate names.
  std::vector<MethodConfig> all_methods() const;
};

/// Sets a dotted key ("steering.max_new" style paths) in a config document.
/// The value is parsed as JSON when possible, else taken as a string.
void apply_override(json& document, const std::string& assignment);

/// 0 in `requested` means hardware concurrency; ATTNSTEER_THREADS caps the result.
int resolve_threads(int requested);

struct RunManifest {
  std::string config_hash;
  std::string code_version;
  std::map<std::string, std::vector<std::string>> stages;  // stage -> relative paths
  std::map<std::string, std::string> artifacts;             // relative path -> sha256

  json to_json() const;
  static RunManifest from_json(const json& j);
};

struct VariantSummary {
  std::string name;
  double mean_score = 0.0;
  int n_concepts = 0;
  int n_steered = 0;
  double fraction_steered() const noexcept { return n_concepts ? static_cast<double>(n_steered) / n_concepts : 0.0; }
};

struct JailbreakResult {
  std::string concept_id;
  double unsteered_rate = 0.0;
  std::vector<double> coefficients;
  std::vector<double> steered_rates;
  double best_rate = 0.0;  // lowest steered rate
};

/// Artifact layout under <root>/<hash>/:
///   config.json manifest.json timings.json
///   checkpoints/ datasets/ vectors/<key>/ enrichment/ generations/<method>/ scores/
/// timings.json holds wall-clock seconds and is the only file that differs
/// between otherwise identical runs; it is not listed in the manifest.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig config);

  const ExperimentConfig& config() const noexcept { return config_; }
  const fs::path& run_dir() const noexcept { return run_dir_; }
  const SyntheticSuite& suite() const noexcept { return suite_; }
  std::vector<std::string> concept_ids() const;

  void train();
  void extract(const MethodConfig& method);
  void enrich();
  void steer(const MethodConfig& method);
  std::vector<SteeringScore> eval(const MethodConfig& method);
  JailbreakResult jailbreak();
  /// Every method, then comparison tables and a summary.
  void sweep();
  json report() const;

  const Checkpoint& checkpoint();
  std::vector<EnrichmentReport> enrichment_reports() const;
  std::vector<SteeringScore> load_scores(const std::string& method) const;
  VectorBundle load_vectors(const MethodConfig& method, const std::string& concept_id) const;

  /// Throws ConfigMismatch / IoError when a listed artifact is missing or altered.
  void verify_manifest() const;
  const RunManifest& manifest() const noexcept { return manifest_; }

 private:
  fs::path path(const std::string& relative) const { return run_dir_ / relative; }
  void record(const std::string& stage, const std::string& relative);
  void save_manifest() const;
  void record_timing(const std::string& stage, double seconds);
  json tagged(json j) const;
  json load_tagged(const fs::path& file) const;
  bool fresh(const std::string& relative) const;

  ConceptDataset dataset_for(const SuiteConcept& sc);
  std::vector<int> steered_blocks(const MethodConfig& method, const std::string& concept_id) const;
  std::unique_ptr<HttpJudge> make_http_judge(std::shared_ptr<RecordingTransport>* recorder = nullptr) const;

  ExperimentConfig config_;
  std::string hash_;
  fs::path run_dir_;
  SyntheticSuite suite_;
  std::optional<Checkpoint> checkpoint_;
  RunManifest manifest_;
  int threads_ = 1;
};

/// Fraction of generated tokens that are signal tokens of `concept`.
double signal_rate(std::span<const TokenId> tokens, const SuiteConcept& sc);

std::vector<VariantSummary> summarize(const std::map<std::string, std::vector<SteeringScore>>& scores,
                                      double success_threshold);

/// Lists regular files under `dir` (relative, sorted) with their sha256.
std::map<std::string, std::string> hash_tree(const fs::path& dir, const std::vector<std::string>& exclude = {});

}  // namespace attnsteer
