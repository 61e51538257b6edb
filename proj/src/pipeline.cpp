#include "attnsteer/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#ifndef ATTNSTEER_VERSION
#define ATTNSTEER_VERSION "dev"
#endif

namespace attnsteer {

namespace {

constexpr const char* kManifestFormat = "attnsteer-run-manifest-v1";

SelectionMethod selection_from_string(const std::string& s) {
  if (s == "attention") return SelectionMethod::Attention;
  if (s == "embedding_diff") return SelectionMethod::EmbeddingDiff;
  if (s == "fixed") return SelectionMethod::Fixed;
  fail(ErrorKind::ConfigError, "unknown token selection '" + s + "'");
}

const char* policy_name(BlockPolicy::Kind k) {
  switch (k) {
    case BlockPolicy::Kind::AllExceptFirst: return "all_except_first";
    case BlockPolicy::Kind::TopK: return "top_k_enrichment";
    case BlockPolicy::Kind::BottomK: return "bottom_k_enrichment";
    case BlockPolicy::Kind::Explicit: return "explicit";
  }
  return "unknown";
}

json grid_json(const GridOptions& g) {
  return json{{"grid", g.grid}, {"split_seed", g.split_seed}, {"holdout_fraction", g.holdout_fraction}};
}

GridOptions grid_from_json(const json& j, GridOptions g) {
  g.grid = j.value("grid", g.grid);
  g.split_seed = j.value("split_seed", g.split_seed);
  g.holdout_fraction = j.value("holdout_fraction", g.holdout_fraction);
  return g;
}

json rfm_json(const RfmOptions& o) {
  return json{{"bandwidth", o.bandwidth},
              {"ridge", o.ridge},
              {"iterations", o.iterations},
              {"max_condition", o.max_condition},
              {"eigen_seed", o.eigen_seed}};
}

RfmOptions rfm_from_json(const json& j, RfmOptions o) {
  o.bandwidth = j.value("bandwidth", o.bandwidth);
  o.ridge = j.value("ridge", o.ridge);
  o.iterations = j.value("iterations", o.iterations);
  o.max_condition = j.value("max_condition", o.max_condition);
  o.eigen_seed = j.value("eigen_seed", o.eigen_seed);
  return o;
}

json suite_json(const SuiteOptions& s) {
  return json{{"seed", s.seed},
              {"vocab_size", s.vocab_size},
              {"n_statements", s.n_statements},
              {"strength", s.strength},
              {"include_refusal", s.include_refusal},
              {"dampener_rate", s.dampener_rate},
              {"dampening", s.dampening}};
}

SuiteOptions suite_from_json(const json& j) {
  SuiteOptions s;
  s.seed = j.value("seed", s.seed);
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.n_statements = j.value("n_statements", s.n_statements);
  s.strength = j.value("strength", s.strength);
  s.include_refusal = j.value("include_refusal", s.include_refusal);
  s.dampener_rate = j.value("dampener_rate", s.dampener_rate);
  s.dampening = j.value("dampening", s.dampening);
  return s;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first failure by
// index is rethrown once every worker has stopped.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !stop; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            stop = true;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <typename Fn>
auto with_context(const std::string& context, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), context + ": " + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

// ---- BlockPolicy / MethodConfig ------------------------------------------

std::vector<int> BlockPolicy::resolve(int n_blocks, const std::vector<double>& scores) const {
  switch (kind) {
    case Kind::AllExceptFirst: {
      std::vector<int> out;
      for (int b = 2; b <= n_blocks; ++b) out.push_back(b);
      return out;
    }
    case Kind::Explicit: {
      for (int b : blocks) {
        require(b >= 1 && b <= n_blocks, ErrorKind::ConfigError, "block " + std::to_string(b) + " out of range");
      }
      std::vector<int> out = blocks;
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      return out;
    }
    case Kind::TopK:
    case Kind::BottomK: {
      require(static_cast<int>(scores.size()) == n_blocks, ErrorKind::InvalidArgument,
              "enrichment scores do not cover every block");
      const int kk = k > 0 ? k : (n_blocks + 1) / 2;
      auto out = rank_blocks(scores, kk, kind == Kind::TopK ? RankDirection::Top : RankDirection::Bottom);
      std::sort(out.begin(), out.end());
      return out;
    }
  }
  return {};
}

json BlockPolicy::to_json() const {
  json j{{"policy", policy_name(kind)}};
  if (needs_enrichment()) j["k"] = k;
  if (kind == Kind::Explicit) j["blocks"] = blocks;
  return j;
}

BlockPolicy BlockPolicy::from_json(const json& j) {
  BlockPolicy p;
  const std::string name = j.value("policy", "all_except_first");
  if (name == "all_except_first") {
    p.kind = Kind::AllExceptFirst;
  } else if (name == "top_k_enrichment") {
    p.kind = Kind::TopK;
  } else if (name == "bottom_k_enrichment") {
    p.kind = Kind::BottomK;
  } else if (name == "explicit") {
    p.kind = Kind::Explicit;
  } else {
    fail(ErrorKind::ConfigError, "unknown block policy '" + name + "'");
  }
  p.k = j.value("k", 0);
  p.blocks = j.value("blocks", std::vector<int>{});
  require(p.k >= 0, ErrorKind::ConfigError, "block policy k must be >= 0");
  require(p.kind != Kind::Explicit || !p.blocks.empty(), ErrorKind::ConfigError, "explicit block list is empty");
  return p;
}

void MethodConfig::validate() const {
  require(!name.empty(), ErrorKind::ConfigError, "method needs a name");
  static const std::set<std::string> kExtractors{"diff_means", "pca", "ridge", "logistic", "rfm"};
  require(kExtractors.count(extractor) > 0, ErrorKind::ConfigError, "unknown extractor '" + extractor + "'");
  require(!(extractor == "logistic" && soft_labels), ErrorKind::ConfigError,
          "logistic regression takes hard labels only");
  require(rfm.iterations >= 1 && rfm.bandwidth > 0.0 && rfm.ridge >= 0.0, ErrorKind::ConfigError,
          "bad rfm hyperparameters");
  require(!ridge_grid.grid.empty() && !logistic_grid.grid.empty(), ErrorKind::ConfigError, "empty grid");
}

json MethodConfig::extraction_json() const {
  json j{{"selection", to_string(selection)},
         {"labels", soft_labels ? "soft" : "hard"},
         {"extractor", extractor},
         {"preprocess", {{"l2_rows", preprocess.l2_rows}, {"minmax_labels", preprocess.minmax_labels}}}};
  if (selection == SelectionMethod::Fixed) j["fixed_marker"] = std::string(kMarkerNames[static_cast<int>(fixed_marker)]);
  if (extractor == "rfm") j["rfm"] = rfm_json(rfm);
  if (extractor == "ridge") j["ridge_grid"] = grid_json(ridge_grid);
  if (extractor == "logistic") j["logistic_grid"] = grid_json(logistic_grid);
  if (extractor == "pca") j["pca_seed"] = pca_seed;
  return j;
}

std::string MethodConfig::extraction_key() const {
  std::string sel = selection == SelectionMethod::Fixed
                        ? "fixed_" + std::string(kMarkerNames[static_cast<int>(fixed_marker)])
                        : std::string(to_string(selection));
  return sel + "-" + (soft_labels ? "soft" : "hard") + "-" + extractor + "-" +
         sha256_hex(extraction_json().dump()).substr(0, 10);
}

json MethodConfig::to_json() const {
  json j = extraction_json();
  j["name"] = name;
  j["blocks"] = blocks.to_json();
  // Keep every tunable present so a dumped config is complete.
  j["rfm"] = rfm_json(rfm);
  j["ridge_grid"] = grid_json(ridge_grid);
  j["logistic_grid"] = grid_json(logistic_grid);
  j["pca_seed"] = pca_seed;
  j["fixed_marker"] = std::string(kMarkerNames[static_cast<int>(fixed_marker)]);
  return j;
}

MethodConfig MethodConfig::from_json(const json& j) { return from_json(j, MethodConfig{}); }

MethodConfig MethodConfig::from_json(const json& j, const MethodConfig& base) {
  MethodConfig m = base;
  try {
    m.name = j.value("name", m.name);
    if (j.contains("selection")) m.selection = selection_from_string(j.at("selection").get<std::string>());
    if (j.contains("fixed_marker")) m.fixed_marker = marker_from_name(j.at("fixed_marker").get<std::string>());
    if (j.contains("labels")) {
      const auto l = j.at("labels").get<std::string>();
      require(l == "soft" || l == "hard", ErrorKind::ConfigError, "labels must be 'soft' or 'hard'");
      m.soft_labels = l == "soft";
    }
    m.extractor = j.value("extractor", m.extractor);
    if (j.contains("preprocess")) {
      m.preprocess.l2_rows = j["preprocess"].value("l2_rows", m.preprocess.l2_rows);
      m.preprocess.minmax_labels = j["preprocess"].value("minmax_labels", m.preprocess.minmax_labels);
    }
    if (j.contains("rfm")) m.rfm = rfm_from_json(j.at("rfm"), m.rfm);
    if (j.contains("ridge_grid")) m.ridge_grid = grid_from_json(j.at("ridge_grid"), m.ridge_grid);
    if (j.contains("logistic_grid")) m.logistic_grid = grid_from_json(j.at("logistic_grid"), m.logistic_grid);
    m.pca_seed = j.value("pca_seed", m.pca_seed);
    if (j.contains("blocks")) m.blocks = BlockPolicy::from_json(j.at("blocks"));
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("bad method config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument) fail(ErrorKind::ConfigError, e.what());
    throw;
  }
  m.validate();
  return m;
}

// ---- ExperimentConfig ----------------------------------------------------

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.method.name = "attn-soft";
  c.method.selection = SelectionMethod::Attention;
  c.method.soft_labels = true;
  c.method.extractor = "rfm";
  c.method.rfm.ridge = 1.0;

  MethodConfig fixed_hard = c.method;
  fixed_hard.name = "fixed-hard";
  fixed_hard.selection = SelectionMethod::Fixed;
  fixed_hard.fixed_marker = Marker::EndHeader;
  fixed_hard.soft_labels = false;
  MethodConfig attn_hard = c.method;
  attn_hard.name = "attn-hard";
  attn_hard.soft_labels = false;
  MethodConfig top = c.method;
  top.name = "attn-soft-top";
  top.blocks.kind = BlockPolicy::Kind::TopK;
  MethodConfig bottom = c.method;
  bottom.name = "attn-soft-bottom";
  bottom.blocks.kind = BlockPolicy::Kind::BottomK;
  c.variants = {fixed_hard, attn_hard, c.method, top, bottom};
  c.comparisons = {{"token_selection", "fixed-hard", "attn-hard"},
                   {"labels", "attn-hard", "attn-soft"},
                   {"blocks", "attn-soft-bottom", "attn-soft-top"}};
  return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c = defaults();
  try {
    if (j.contains("suite")) c.suite = suite_from_json(j.at("suite"));
    if (j.contains("corpus")) {
      c.corpus_sequences = j["corpus"].value("n_sequences", c.corpus_sequences);
      c.corpus_seed = j["corpus"].value("seed", c.corpus_seed);
    }
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) c.train = TrainOptions::from_json(j.at("train"));
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    if (j.contains("concepts")) {
      const auto& cj = j.at("concepts");
      if (cj.is_string()) {
        require(cj.get<std::string>() == "all", ErrorKind::ConfigError, "concepts must be \"all\" or a list");
        c.concepts.reset();
      } else {
        c.concepts = cj.get<std::vector<std::string>>();
      }
    }
    if (j.contains("dataset")) {
      c.dataset_statements = j["dataset"].value("n_statements", c.dataset_statements);
      c.split_seed = j["dataset"].value("split_seed", c.split_seed);
      if (j["dataset"].contains("candidates")) {
        c.candidates.clear();
        for (const auto& m : j["dataset"]["candidates"]) c.candidates.push_back(marker_from_name(m.get<std::string>()));
      }
    }
    if (j.contains("method")) c.method = MethodConfig::from_json(j.at("method"), MethodConfig{});
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(MethodConfig::from_json(v, c.method));
    }
    if (j.contains("comparisons")) {
      c.comparisons.clear();
      for (const auto& cm : j.at("comparisons")) {
        c.comparisons.push_back({cm.at("axis").get<std::string>(), cm.at("baseline").get<std::string>(),
                                 cm.at("treatment").get<std::string>()});
      }
    }
    if (j.contains("steering")) {
      const auto& s = j.at("steering");
      c.coefficients = s.value("coefficients", c.coefficients);
      c.coefficient_limit = s.value("coefficient_limit", c.coefficient_limit);
      c.max_new_tokens = s.value("max_new_tokens", c.max_new_tokens);
      c.success_threshold = s.value("success_threshold", c.success_threshold);
    }
    if (j.contains("enrichment")) c.enrichment = PermutationTestConfig::from_json(j.at("enrichment"));
    if (j.contains("judge")) {
      const auto& jj = j.at("judge");
      c.judge.kind = jj.value("kind", c.judge.kind);
      if (jj.contains("http")) c.judge.http = HttpJudgeConfig::from_json(jj.at("http"));
      c.judge.replay_path = jj.value("replay_path", c.judge.replay_path);
      c.judge.record_path = jj.value("record_path", c.judge.record_path);
    }
    if (j.contains("jailbreak")) {
      const auto& jb = j.at("jailbreak");
      c.jailbreak.enabled = jb.value("enabled", c.jailbreak.enabled);
      c.jailbreak.concept_id = jb.value("concept", c.jailbreak.concept_id);
      c.jailbreak.method = jb.value("method", c.jailbreak.method);
      c.jailbreak.coefficients = jb.value("coefficients", c.jailbreak.coefficients);
    }
    c.output_root = j.value("output_root", c.output_root);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("bad experiment config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument || e.kind() == ErrorKind::UnknownToken) {
      fail(ErrorKind::ConfigError, e.what());
    }
    throw;
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, "cannot parse " + path.string() + ": " + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::ConfigError, e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    fail(ErrorKind::ConfigError, e.what());
  }
  require(corpus_sequences >= 1, ErrorKind::ConfigError, "corpus needs at least one sequence");
  require(dataset_statements >= 2 && dataset_statements % 2 == 0, ErrorKind::ConfigError,
          "dataset n_statements must be even and >= 2");
  require(dataset_statements <= suite.n_statements, ErrorKind::ConfigError,
          "dataset n_statements exceeds the suite's statements");
  require(!candidates.empty(), ErrorKind::ConfigError, "empty candidate marker set");
  require(!coefficients.empty(), ErrorKind::ConfigError, "coefficient grid is empty");
  require(coefficient_limit > 0.0, ErrorKind::ConfigError, "coefficient_limit must be positive");
  for (double e : coefficients) {
    require(std::isfinite(e) && std::abs(e) <= coefficient_limit, ErrorKind::ConfigError,
            "coefficient " + fmt_double(e) + " outside [-limit, limit]");
  }
  for (double e : jailbreak.coefficients) {
    require(std::isfinite(e) && std::abs(e) <= coefficient_limit, ErrorKind::ConfigError,
            "jailbreak coefficient " + fmt_double(e) + " outside [-limit, limit]");
  }
  require(max_new_tokens >= 1, ErrorKind::ConfigError, "max_new_tokens must be >= 1");
  require(judge.kind == "keyword" || judge.kind == "http", ErrorKind::ConfigError,
          "judge kind must be keyword or http");
  require(judge.kind != "http" || !judge.http.endpoint.empty() || !judge.replay_path.empty(),
          ErrorKind::ConfigError, "http judge needs an endpoint or a replay file");
  if (!checkpoint.empty()) {
    require(fs::exists(checkpoint), ErrorKind::ConfigError, "checkpoint not found: " + checkpoint);
  }
  if (!judge.replay_path.empty()) {
    require(fs::exists(judge.replay_path), ErrorKind::ConfigError, "judge replay file not found: " + judge.replay_path);
  }
  try {
    enrichment.validate();
  } catch (const Error& e) {
    fail(ErrorKind::ConfigError, e.what());
  }
  method.validate();
  std::set<std::string> names;
  for (const auto& m : all_methods()) {
    m.validate();
    names.insert(m.name);
  }
  for (const auto& c : comparisons) {
    require(names.count(c.baseline) && names.count(c.treatment), ErrorKind::ConfigError,
            "comparison '" + c.axis + "' names an unknown method");
  }
  require(threads >= 0, ErrorKind::ConfigError, "threads must be >= 0");
}

json ExperimentConfig::to_json() const {
  json j = hashed_json();
  j["output_root"] = output_root;
  j["threads"] = threads;
  j["judge"]["record_path"] = judge.record_path;
  return j;
}

json ExperimentConfig::hashed_json() const {
  json variants_j = json::array();
  for (const auto& v : variants) variants_j.push_back(v.to_json());
  json comps = json::array();
  for (const auto& c : comparisons) {
    comps.push_back(json{{"axis", c.axis}, {"baseline", c.baseline}, {"treatment", c.treatment}});
  }
  json cands = json::array();
  for (Marker m : candidates) cands.push_back(std::string(kMarkerNames[static_cast<int>(m)]));
  json j{{"suite", suite_json(suite)},
         {"corpus", {{"n_sequences", corpus_sequences}, {"seed", corpus_seed}}},
         {"model", model.to_json()},
         {"train", train.to_json()},
         {"checkpoint", checkpoint.empty() ? std::string() : sha256_file(checkpoint)},
         {"dataset", {{"n_statements", dataset_statements}, {"split_seed", split_seed}, {"candidates", cands}}},
         {"method", method.to_json()},
         {"variants", variants_j},
         {"comparisons", comps},
         {"steering",
          {{"coefficients", coefficients},
           {"coefficient_limit", coefficient_limit},
           {"max_new_tokens", max_new_tokens},
           {"success_threshold", success_threshold}}},
         {"enrichment", enrichment.to_json()},
         {"judge", {{"kind", judge.kind}, {"http", judge.http.to_json()}, {"replay_path", judge.replay_path}}},
         {"jailbreak",
          {{"enabled", jailbreak.enabled},
           {"concept", jailbreak.concept_id},
           {"method", jailbreak.method},
           {"coefficients", jailbreak.coefficients}}}};
  j["concepts"] = concepts ? json(*concepts) : json("all");
  return j;
}

std::string ExperimentConfig::hash() const { return sha256_hex(hashed_json().dump()).substr(0, 16); }

std::vector<MethodConfig> ExperimentConfig::all_methods() const {
  std::vector<MethodConfig> out{method};
  for (const auto& v : variants) {
    bool dup = false;
    for (const auto& m : out) {
      if (m.name == v.name) {
        require(m.to_json() == v.to_json(), ErrorKind::ConfigError, "two different methods named '" + v.name + "'");
        dup = true;
      }
    }
    if (!dup) out.push_back(v);
  }
  return out;
}

const MethodConfig& ExperimentConfig::method_named(const std::string& name) const {
  if (method.name == name) return method;
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  fail(ErrorKind::ConfigError, "no method named '" + name + "'");
}

void apply_override(json& document, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::ConfigError, "override must look like key.path=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &document;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    require(!part.empty(), ErrorKind::ConfigError, "empty key segment in '" + key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* cap = std::getenv(kThreadsEnv)) {
    try {
      const int c = std::stoi(cap);
      if (c >= 1) n = std::min(n, c);
    } catch (const std::exception&) {
      spdlog::warn("ignoring {}='{}'", kThreadsEnv, cap);
    }
  }
  return n;
}

// ---- manifest --------------------------------------------------------------

json RunManifest::to_json() const {
  return json{{"format", kManifestFormat},
              {"config_hash", config_hash},
              {"code_version", code_version},
              {"stages", stages},
              {"artifacts", artifacts}};
}

RunManifest RunManifest::from_json(const json& j) {
  require(j.value("format", "") == kManifestFormat, ErrorKind::IoError, "not a run manifest");
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.code_version = j.value("code_version", "");
  m.stages = j.at("stages").get<std::map<std::string, std::vector<std::string>>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  return m;
}

// ---- Pipeline --------------------------------------------------------------


Pipeline::Pipeline(ExperimentConfig config) : config_(std::move(config)) {
  config_.validate();
  hash_ = config_.hash();
  fs::path root = config_.output_root;
  if (root.empty()) {
    const char* env = std::getenv(kArtifactRootEnv);
    root = env && *env ? fs::path(env) : fs::path("artifacts");
  }
  run_dir_ = root / hash_;
  threads_ = resolve_threads(config_.threads);
  suite_ = with_context("suite", [&] { return make_default_suite(config_.suite); });
  require(static_cast<int>(suite_.vocab.size()) == config_.model.vocab_size, ErrorKind::ConfigError,
          "model.vocab_size " + std::to_string(config_.model.vocab_size) + " does not match the suite vocab (" +
              std::to_string(suite_.vocab.size()) + ")");
  (void)concept_ids();

  fs::create_directories(run_dir_);
  const json stored{{"config_hash", hash_}, {"config", config_.hashed_json()}};
  const fs::path cfg_path = path("config.json");
  if (fs::exists(cfg_path)) {
    const json existing = json::parse(read_text_file(cfg_path));
    if (existing != stored) fail(ErrorKind::ConfigMismatch, "run directory holds a different config: " + run_dir_.string());
  } else {
    write_file_atomic(cfg_path, stored.dump(2) + "\n");
  }
  const fs::path man_path = path("manifest.json");
  if (fs::exists(man_path)) {
    manifest_ = RunManifest::from_json(json::parse(read_text_file(man_path)));
    if (manifest_.config_hash != hash_) fail(ErrorKind::ConfigMismatch, "manifest belongs to another config");
  }
  manifest_.config_hash = hash_;
  manifest_.code_version = ATTNSTEER_VERSION;
}

std::vector<std::string> Pipeline::concept_ids() const {
  std::vector<std::string> out;
  if (!config_.concepts) {
    for (const auto& c : suite_.concepts) out.push_back(c.spec.concept_id);
    return out;
  }
  for (const auto& id : *config_.concepts) {
    try {
      (void)suite_.concept_by_id(id);
    } catch (const Error& e) {
      fail(ErrorKind::ConfigError, e.what());
    }
    out.push_back(id);
  }
  return out;
}

void Pipeline::record(const std::string& stage, const std::string& relative) {
  manifest_.artifacts[relative] = sha256_file(path(relative));
  auto& list = manifest_.stages[stage];
  if (std::find(list.begin(), list.end(), relative) == list.end()) {
    list.push_back(relative);
    std::sort(list.begin(), list.end());
  }
}

void Pipeline::save_manifest() const { write_file_atomic(path("manifest.json"), manifest_.to_json().dump(2) + "\n"); }

void Pipeline::record_timing(const std::string& stage, double seconds) {
  const fs::path p = path("timings.json");
  json t = fs::exists(p) ? json::parse(read_text_file(p)) : json::object();
  t[stage] = seconds;
  write_file_atomic(p, t.dump(2) + "\n");
}

json Pipeline::tagged(json j) const {
  j["config_hash"] = hash_;
  return j;
}

json Pipeline::load_tagged(const fs::path& file) const {
  json j = json::parse(read_text_file(file));
  if (j.value("config_hash", "") != hash_) {
    fail(ErrorKind::ConfigMismatch, file.string() + " was produced under config " + j.value("config_hash", "?"));
  }
  return j;
}

bool Pipeline::fresh(const std::string& relative) const {
  const auto it = manifest_.artifacts.find(relative);
  if (it == manifest_.artifacts.end() || !fs::exists(path(relative))) return false;
  return sha256_file(path(relative)) == it->second;
}

void Pipeline::verify_manifest() const {
  for (const auto& [rel, sha] : manifest_.artifacts) {
    require(fs::exists(path(rel)), ErrorKind::IoError, "manifest lists missing artifact " + rel);
    if (sha256_file(path(rel)) != sha) fail(ErrorKind::ConfigMismatch, "artifact " + rel + " does not match its hash");
  }
}

// ---- train -----------------------------------------------------------------

void Pipeline::train() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string ckpt = "checkpoints/model.ckpt", vocab = "checkpoints/vocab.txt", log = "checkpoints/train.json";
  if (fresh(ckpt) && fresh(vocab) && fresh(log)) {
    spdlog::info("train: checkpoint up to date");
    return;
  }
  fs::create_directories(path("checkpoints"));
  suite_.vocab.save(path(vocab));
  json train_log;
  if (!config_.checkpoint.empty()) {
    Checkpoint ext = load_checkpoint(config_.checkpoint);
    require(ext.config.vocab_size == static_cast<int>(suite_.vocab.size()), ErrorKind::ConfigMismatch,
            "external checkpoint vocab size differs from the suite");
    save_checkpoint(path(ckpt), ext.config, ext.params,
                    json{{"config_hash", hash_}, {"source_sha256", sha256_file(config_.checkpoint)}});
    train_log = tagged(json{{"source", "external"}, {"source_sha256", sha256_file(config_.checkpoint)}});
  } else {
    const auto corpus = generate_synthetic_corpus(suite_.specs(), suite_.vocab, config_.corpus_sequences,
                                                  config_.corpus_seed, suite_.corpus);
    std::vector<std::vector<TokenId>> seqs;
    seqs.reserve(corpus.size());
    for (const auto& s : corpus) seqs.push_back(s.tokens);
    spdlog::info("train: {} sequences", seqs.size());
    const TrainResult tr = with_context("train", [&] { return train_toy(seqs, config_.model, config_.train); });
    save_checkpoint(path(ckpt), config_.model, tr.params, json{{"config_hash", hash_}});
    train_log = tagged(json{{"source", "trained"},
                            {"initial_heldout_loss", tr.initial_heldout_loss},
                            {"final_heldout_loss", tr.final_heldout_loss},
                            {"epoch_train_losses", tr.epoch_train_losses},
                            {"steps", tr.steps}});
  }
  write_file_atomic(path(log), train_log.dump(2) + "\n");
  checkpoint_.reset();
  for (const auto& rel : {ckpt, vocab, log}) record("train", rel);
  save_manifest();
  record_timing("train", seconds_since(t0));
}

const Checkpoint& Pipeline::checkpoint() {
  if (!checkpoint_) {
    if (!fresh("checkpoints/model.ckpt")) train();
    Checkpoint ck = load_checkpoint(path("checkpoints/model.ckpt"));
    if (ck.meta.value("config_hash", "") != hash_) {
      fail(ErrorKind::ConfigMismatch, "checkpoint was produced under another config");
    }
    checkpoint_ = std::move(ck);
  }
  return *checkpoint_;
}

// ---- datasets / traces -----------------------------------------------------

ConceptDataset Pipeline::dataset_for(const SuiteConcept& sc) {
  std::vector<std::string> st(suite_.statements.begin(),
                              suite_.statements.begin() + static_cast<std::ptrdiff_t>(config_.dataset_statements));
  return build_concept_dataset(st, suite_.question_template, sc.prefix_text, suite_.vocab, config_.split_seed,
                               sc.spec.concept_id);
}

namespace {

std::vector<ForwardTrace> traces_for(std::span<const RenderedPrompt> prompts, const Checkpoint& ck) {
  std::vector<ForwardTrace> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(forward(p.token_ids, ck.params, ck.config).trace);
  return out;
}

LabeledEmbeddings block_data(int block, Marker marker, const ConceptDataset& ds,
                             std::span<const ForwardTrace> pc, std::span<const ForwardTrace> p0,
                             const SoftLabelSet* soft) {
  LabeledEmbeddings d;
  const std::size_t n = ds.prefixed.size() + ds.unprefixed.size();
  const int k = pc.front().hidden_at(block).cols();
  d.X.resize(static_cast<Eigen::Index>(n), k);
  d.y.resize(static_cast<Eigen::Index>(n));
  d.block = block;
  Eigen::Index r = 0;
  for (std::size_t p = 0; p < ds.prefixed.size(); ++p, ++r) {
    d.X.row(r) = pc[p].hidden_at(block).row(ds.prefixed[p].position(marker)).cast<double>();
    d.y(r) = soft ? soft->label(block, p) : 1.0;
  }
  for (std::size_t p = 0; p < ds.unprefixed.size(); ++p, ++r) {
    d.X.row(r) = p0[p].hidden_at(block).row(ds.unprefixed[p].position(marker)).cast<double>();
    d.y(r) = 0.0;
  }
  return d;
}

ConceptVector run_extractor(const MethodConfig& m, const LabeledEmbeddings& d) {
  if (m.extractor == "diff_means") return diff_in_means(d);
  if (m.extractor == "pca") return pca_pairs(d, m.pca_seed);
  if (m.extractor == "ridge") return ridge_regression(d, m.ridge_grid);
  if (m.extractor == "logistic") return logistic_regression(d, m.logistic_grid);
  return rfm(d, m.rfm).first;
}

json soft_labels_json(const SoftLabelSet& s) {
  json blocks = json::array();
  for (std::size_t b = 0; b < s.prefixed.size(); ++b) {
    blocks.push_back(json{{"block", b + 1}, {"prefixed", s.prefixed[b]}, {"raw_min", s.raw_min[b]},
                          {"raw_max", s.raw_max[b]}});
  }
  return json{{"n_unprefixed", s.n_unprefixed}, {"normalized", s.normalized}, {"blocks", blocks}};
}

}  // namespace

// ---- extract ---------------------------------------------------------------

void Pipeline::extract(const MethodConfig& method) {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint& ck = checkpoint();
  const std::string key = method.extraction_key();
  const std::string dir = "vectors/" + key;
  fs::create_directories(path(dir));
  fs::create_directories(path("datasets"));
  const std::string stage = "extract:" + key;

  const auto ids = concept_ids();
  std::vector<std::vector<std::string>> written(ids.size());
  parallel_for(ids.size(), threads_, [&](std::size_t i) {
    const std::string& id = ids[i];
    const std::string bundle = dir + "/" + id + ".json", blob = dir + "/" + id + ".vec",
                      sel_file = dir + "/" + id + ".selection.json", lab_file = dir + "/" + id + ".labels.json",
                      ds_file = "datasets/" + id + ".json", tok_file = "datasets/" + id + ".tokens";
    written[i] = {ds_file, tok_file, bundle, blob, sel_file, lab_file};
    if (fresh(bundle) && fresh(blob) && fresh(sel_file) && fresh(lab_file) && fresh(ds_file) && fresh(tok_file)) return;

    with_context(id, [&] {
      const SuiteConcept& sc = suite_.concept_by_id(id);
      const ConceptDataset ds = dataset_for(sc);
      save_dataset(ds, suite_.vocab, path(ds_file), json{{"config_hash", hash_}});
      const auto pc = traces_for(ds.prefixed, ck);
      const auto p0 = traces_for(ds.unprefixed, ck);
      TokenSelection sel;
      switch (method.selection) {
        case SelectionMethod::Attention: sel = select_token(pc, ds.prefixed, config_.candidates); break;
        case SelectionMethod::Fixed: sel = fixed_selection(method.fixed_marker, ck.config.n_blocks); break;
        case SelectionMethod::EmbeddingDiff: {
          const auto pcf = traces_for(ds.counterparts, ck);
          sel = select_token_by_embedding_diff(pc, ds.prefixed, pcf, ds.counterparts, config_.candidates);
          break;
        }
      }
      const SoftLabelSet soft = soft_labels(ds.prefixed, pc, ds.unprefixed.size(), sel, false);
      VectorBundle vb;
      vb.concept_id = id;
      vb.method = method.extractor;
      for (int b = 1; b <= ck.config.n_blocks; ++b) {
        vb.blocks.push_back(with_context("block " + std::to_string(b), [&] {
          LabeledEmbeddings d =
              block_data(b, sel.at(b).marker, ds, pc, p0, method.soft_labels ? &soft : nullptr);
          d = preprocess(d, method.preprocess);
          return run_extractor(method, d);
        }));
      }
      vb.provenance = json{{"config_hash", hash_},
                           {"extraction", method.extraction_json()},
                           {"selection", sel.to_json()},
                           {"n_prefixed", ds.prefixed.size()},
                           {"n_unprefixed", ds.unprefixed.size()}};
      save_vector_bundle(vb, path(bundle));
      write_file_atomic(path(sel_file), tagged(json{{"concept_id", id}, {"selection", sel.to_json()}}).dump(2) + "\n");
      write_file_atomic(path(lab_file),
                        tagged(json{{"concept_id", id},
                                    {"mode", method.soft_labels ? "soft" : "hard"},
                                    {"soft_labels", soft_labels_json(soft)}})
                                .dump(1) +
                            "\n");
    });
  });
  for (const auto& files : written) {
    for (const auto& f : files) record(stage, f);
  }
  write_file_atomic(path(dir + "/method.json"), tagged(method.extraction_json()).dump(2) + "\n");
  record(stage, dir + "/method.json");
  save_manifest();
  record_timing(stage, seconds_since(t0));
}

VectorBundle Pipeline::load_vectors(const MethodConfig& method, const std::string& concept_id) const {
  const fs::path p = path("vectors/" + method.extraction_key() + "/" + concept_id + ".json");
  VectorBundle vb = load_vector_bundle(p);
  if (vb.provenance.value("config_hash", "") != hash_) {
    fail(ErrorKind::ConfigMismatch, p.string() + " was produced under another config");
  }
  return vb;
}

// ---- enrich ----------------------------------------------------------------

void Pipeline::enrich() {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint& ck = checkpoint();
  fs::create_directories(path("enrichment"));
  const auto ids = concept_ids();
  parallel_for(ids.size(), threads_, [&](std::size_t i) {
    const std::string rel = "enrichment/" + ids[i] + ".json";
    if (fresh(rel)) return;
    with_context(ids[i], [&] {
      const ConceptDataset ds = dataset_for(suite_.concept_by_id(ids[i]));
      const auto pc = traces_for(ds.prefixed, ck);
      const TokenSelection sel = select_token(pc, ds.prefixed, config_.candidates);
      const EnrichmentReport rep = enrichment_report(ids[i], ds.prefixed, pc, sel, config_.enrichment);
      json j = rep.to_json(true);
      j["selection"] = sel.to_json();
      write_file_atomic(path(rel), tagged(std::move(j)).dump(1) + "\n");
    });
  });
  for (const auto& id : ids) record("enrich", "enrichment/" + id + ".json");
  const auto reports = enrichment_reports();
  if (!reports.empty()) {
    write_enrichment_csv(path("enrichment/scores.csv"), reports);
    write_enrichment_sidecar(path("enrichment/sidecar.json"), reports);
    record("enrich", "enrichment/scores.csv");
    record("enrich", "enrichment/sidecar.json");
  }
  save_manifest();
  record_timing("enrich", seconds_since(t0));
}

std::vector<EnrichmentReport> Pipeline::enrichment_reports() const {
  std::vector<EnrichmentReport> out;
  for (const auto& id : concept_ids()) {
    out.push_back(EnrichmentReport::from_json(load_tagged(path("enrichment/" + id + ".json"))));
  }
  return out;
}

std::vector<int> Pipeline::steered_blocks(const MethodConfig& method, const std::string& concept_id) const {
  std::vector<double> scores;
  if (method.blocks.needs_enrichment()) {
    scores = EnrichmentReport::from_json(load_tagged(path("enrichment/" + concept_id + ".json"))).scores();
  }
  return method.blocks.resolve(config_.model.n_blocks, scores);
}

// ---- steer -----------------------------------------------------------------

void Pipeline::steer(const MethodConfig& method) {
  const auto t0 = std::chrono::steady_clock::now();
  const Checkpoint& ck = checkpoint();
  const auto ids = concept_ids();
  if (method.blocks.needs_enrichment()) {
    bool ready = true;
    for (const auto& id : ids) ready = ready && fresh("enrichment/" + id + ".json");
    if (!ready) enrich();
  }
  {
    bool ready = true;
    for (const auto& id : ids) ready = ready && fresh("vectors/" + method.extraction_key() + "/" + id + ".json");
    if (!ready) extract(method);
  }
  const std::string dir = "generations/" + method.name;
  fs::create_directories(path(dir));
  const std::string stage = "steer:" + method.name;
  parallel_for(ids.size(), threads_, [&](std::size_t i) {
    const std::string rel = dir + "/" + ids[i] + ".json";
    if (fresh(rel)) return;
    with_context(ids[i], [&] {
      const SuiteConcept& sc = suite_.concept_by_id(ids[i]);
      const VectorBundle vb = load_vectors(method, ids[i]);
      const auto blocks = steered_blocks(method, ids[i]);
      SteeringSpec spec;
      for (int b : blocks) spec.vectors[b] = vb.at(b).direction.cast<float>();
      DecodeOptions dec;
      dec.max_new = config_.max_new_tokens;
      json questions = json::array();
      for (const auto& q : sc.probe_questions) {
        const RenderedPrompt pr = render_prompt({}, tokenize(q, suite_.vocab), suite_.vocab);
        json outs = json::array();
        for (double eps : config_.coefficients) {
          spec.coefficient = static_cast<float>(eps);
          const auto tokens = generate(pr.token_ids, ck.params, ck.config, &spec, dec);
          outs.push_back(json{{"coefficient", eps}, {"tokens", tokens}, {"text", detokenize(tokens, suite_.vocab)}});
        }
        questions.push_back(json{{"question", q}, {"outputs", std::move(outs)}});
      }
      write_file_atomic(path(rel), tagged(json{{"concept_id", ids[i]},
                                               {"method", method.name},
                                               {"blocks", blocks},
                                               {"coefficients", config_.coefficients},
                                               {"questions", std::move(questions)}})
                                       .dump(1) +
                                       "\n");
    });
  });
  for (const auto& id : ids) record(stage, dir + "/" + id + ".json");
  save_manifest();
  record_timing(stage, seconds_since(t0));
}

// ---- eval ------------------------------------------------------------------

std::unique_ptr<HttpJudge> Pipeline::make_http_judge(std::shared_ptr<RecordingTransport>* recorder) const {
  std::shared_ptr<Transport> transport;
  if (!config_.judge.replay_path.empty()) {
    transport = std::make_shared<ReplayTransport>(config_.judge.replay_path);
  } else {
    transport = std::make_shared<HttplibTransport>(config_.judge.http.timeout_seconds);
    if (!config_.judge.record_path.empty()) {
      auto rec = std::make_shared<RecordingTransport>(transport);
      if (recorder) *recorder = rec;
      transport = rec;
    }
  }
  return std::make_unique<HttpJudge>(config_.judge.http, transport);
}

std::vector<SteeringScore> Pipeline::eval(const MethodConfig& method) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ids = concept_ids();
  {
    bool ready = true;
    for (const auto& id : ids) ready = ready && fresh("generations/" + method.name + "/" + id + ".json");
    if (!ready) steer(method);
  }
  std::unique_ptr<HttpJudge> http;
  std::shared_ptr<RecordingTransport> recorder;
  if (config_.judge.kind == "http") http = make_http_judge(&recorder);

  std::vector<SteeringScore> scores;
  json details = json::array();
  for (const auto& id : ids) {
    const SuiteConcept& sc = suite_.concept_by_id(id);
    const json gen = load_tagged(path("generations/" + method.name + "/" + id + ".json"));
    const auto coefs = gen.at("coefficients").get<std::vector<double>>();
    std::vector<std::vector<int>> verdicts;
    if (http) {
      std::vector<JudgeItem> items;
      for (const auto& q : gen.at("questions")) {
        for (const auto& o : q.at("outputs")) {
          items.push_back({id, q.at("question").get<std::string>(), o.at("text").get<std::string>(), {}});
        }
      }
      const auto flat = http->judge_all(items);
      std::size_t k = 0;
      for (const auto& q : gen.at("questions")) {
        verdicts.emplace_back();
        for (std::size_t c = 0; c < q.at("outputs").size(); ++c) verdicts.back().push_back(flat[k++]);
      }
    } else {
      KeywordRubric rubric;
      rubric.signal_tokens.insert(sc.spec.signal_tokens.begin(), sc.spec.signal_tokens.end());
      rubric.threshold = sc.judge_threshold;
      for (const auto& q : gen.at("questions")) {
        verdicts.emplace_back();
        for (const auto& o : q.at("outputs")) {
          verdicts.back().push_back(keyword_judge(o.at("tokens").get<std::vector<TokenId>>(), rubric));
        }
      }
    }
    scores.push_back(steering_score(id, sc.spec.concept_class, method.name, coefs, verdicts));
    details.push_back(json{{"concept_id", id},
                           {"class", sc.spec.concept_class},
                           {"verdicts", verdicts},
                           {"best", scores.back().best},
                           {"score", scores.back().score}});
  }
  if (recorder) recorder->save(config_.judge.record_path);
  fs::create_directories(path("scores"));
  const std::string stage = "eval:" + method.name;
  const std::string csv = "scores/" + method.name + ".csv", js = "scores/" + method.name + ".json";
  write_scores_csv(path(csv), scores);
  write_file_atomic(path(js), tagged(json{{"method", method.name},
                                          {"judge", config_.judge.kind},
                                          {"coefficients", config_.coefficients},
                                          {"concepts", details}})
                                  .dump(1) +
                                  "\n");
  record(stage, csv);
  record(stage, js);
  save_manifest();
  record_timing(stage, seconds_since(t0));
  return scores;
}

std::vector<SteeringScore> Pipeline::load_scores(const std::string& method_name) const {
  const json j = load_tagged(path("scores/" + method_name + ".json"));
  std::vector<SteeringScore> out;
  for (const auto& c : j.at("concepts")) {
    out.push_back(steering_score(c.at("concept_id").get<std::string>(), c.at("class").get<std::string>(), method_name,
                                 j.at("coefficients").get<std::vector<double>>(),
                                 c.at("verdicts").get<std::vector<std::vector<int>>>()));
  }
  return out;
}

// ---- jailbreak -------------------------------------------------------------

double signal_rate(std::span<const TokenId> tokens, const SuiteConcept& sc) {
  if (tokens.empty()) return 0.0;
  const std::unordered_set<TokenId> sig(sc.spec.signal_tokens.begin(), sc.spec.signal_tokens.end());
  std::size_t hits = 0;
  for (TokenId t : tokens) hits += sig.count(t);
  return static_cast<double>(hits) / static_cast<double>(tokens.size());
}

JailbreakResult Pipeline::jailbreak() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& jb = config_.jailbreak;
  const MethodConfig& method = config_.method_named(jb.method);
  const SuiteConcept& sc = with_context("jailbreak", [&]() -> const SuiteConcept& {
    return suite_.concept_by_id(jb.concept_id);
  });
  const Checkpoint& ck = checkpoint();
  const std::string vec_rel = "vectors/" + method.extraction_key() + "/" + jb.concept_id + ".json";
  if (!fresh(vec_rel)) {
    // Vectors for a concept outside the configured list still come from the same recipe.
    auto saved = config_.concepts;
    bool listed = !saved || std::find(saved->begin(), saved->end(), jb.concept_id) != saved->end();
    require(listed, ErrorKind::ConfigError, "jailbreak concept '" + jb.concept_id + "' is not in the concept list");
    extract(method);
  }
  if (method.blocks.needs_enrichment() && !fresh("enrichment/" + jb.concept_id + ".json")) enrich();
  const VectorBundle vb = load_vectors(method, jb.concept_id);
  SteeringSpec spec;
  const auto blocks = steered_blocks(method, jb.concept_id);
  for (int b : blocks) spec.vectors[b] = vb.at(b).direction.cast<float>();
  DecodeOptions dec;
  dec.max_new = config_.max_new_tokens;

  // Refuse mode is switched on by the concept prefix; steering then pushes against it.
  std::vector<RenderedPrompt> prompts;
  for (const auto& q : sc.probe_questions) {
    prompts.push_back(render_prompt(sc.spec.prefix_phrase, tokenize(q, suite_.vocab), suite_.vocab));
  }
  JailbreakResult r;
  r.concept_id = jb.concept_id;
  r.coefficients = jb.coefficients;
  json gens = json::array();
  auto rate_for = [&](const SteeringSpec* s, double eps) {
    double total = 0.0;
    json outs = json::array();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto tokens = generate(prompts[i].token_ids, ck.params, ck.config, s, dec);
      total += signal_rate(tokens, sc);
      outs.push_back(json{{"question", sc.probe_questions[i]}, {"tokens", tokens},
                          {"text", detokenize(tokens, suite_.vocab)}});
    }
    gens.push_back(json{{"coefficient", eps}, {"outputs", std::move(outs)}});
    return total / static_cast<double>(prompts.size());
  };
  r.unsteered_rate = rate_for(nullptr, 0.0);
  r.best_rate = r.unsteered_rate;
  for (double eps : jb.coefficients) {
    spec.coefficient = static_cast<float>(eps);
    r.steered_rates.push_back(rate_for(&spec, eps));
    r.best_rate = std::min(r.best_rate, r.steered_rates.back());
  }
  fs::create_directories(path("generations"));
  fs::create_directories(path("scores"));
  write_file_atomic(path("generations/jailbreak.json"),
                    tagged(json{{"concept_id", jb.concept_id}, {"method", method.name}, {"blocks", blocks},
                                {"runs", gens}})
                            .dump(1) +
                        "\n");
  std::ostringstream csv;
  csv << "concept_id,coefficient,refusal_rate\n" << jb.concept_id << ",0," << fmt_double(r.unsteered_rate) << "\n";
  for (std::size_t i = 0; i < jb.coefficients.size(); ++i) {
    csv << jb.concept_id << "," << fmt_double(jb.coefficients[i]) << "," << fmt_double(r.steered_rates[i]) << "\n";
  }
  write_file_atomic(path("scores/jailbreak.csv"), csv.str());
  record("jailbreak", "generations/jailbreak.json");
  record("jailbreak", "scores/jailbreak.csv");
  save_manifest();
  record_timing("jailbreak", seconds_since(t0));
  return r;
}

// ---- sweep / report --------------------------------------------------------

std::vector<VariantSummary> summarize(const std::map<std::string, std::vector<SteeringScore>>& scores,
                                      double success_threshold) {
  std::vector<VariantSummary> out;
  for (const auto& [name, list] : scores) {
    VariantSummary s;
    s.name = name;
    s.n_concepts = static_cast<int>(list.size());
    double total = 0.0;
    for (const auto& sc : list) {
      total += sc.score;
      s.n_steered += sc.score >= success_threshold - 1e-12;
    }
    s.mean_score = list.empty() ? 0.0 : total / static_cast<double>(list.size());
    out.push_back(s);
  }
  return out;
}

void Pipeline::sweep() {
  const auto t0 = std::chrono::steady_clock::now();
  if (concept_ids().empty()) {
    spdlog::info("sweep: no concepts configured, nothing to do");
    save_manifest();
    return;
  }
  train();
  const auto methods = config_.all_methods();
  enrich();
  std::map<std::string, std::vector<SteeringScore>> all;
  for (const auto& m : methods) {
    extract(m);
    steer(m);
    all[m.name] = eval(m);
  }
  json jb_json = nullptr;
  const bool has_jb_concept = [&] {
    for (const auto& c : suite_.concepts) {
      if (c.spec.concept_id == config_.jailbreak.concept_id) return true;
    }
    return false;
  }();
  if (config_.jailbreak.enabled && has_jb_concept) {
    const auto ids = concept_ids();
    if (std::find(ids.begin(), ids.end(), config_.jailbreak.concept_id) != ids.end()) {
      const JailbreakResult r = jailbreak();
      jb_json = json{{"concept_id", r.concept_id},
                     {"unsteered_rate", r.unsteered_rate},
                     {"coefficients", r.coefficients},
                     {"steered_rates", r.steered_rates},
                     {"best_rate", r.best_rate}};
    }
  }

  const auto summaries = summarize(all, config_.success_threshold);
  std::map<std::string, VariantSummary> by_name;
  for (const auto& s : summaries) by_name[s.name] = s;

  for (const auto& cmp : config_.comparisons) {
    const auto& a = all.at(cmp.baseline);
    const auto& b = all.at(cmp.treatment);
    std::ostringstream csv;
    csv << "concept_id,class," << csv_field(cmp.baseline) << "," << csv_field(cmp.treatment) << "\n";
    for (std::size_t i = 0; i < a.size(); ++i) {
      csv << a[i].concept_id << "," << a[i].concept_class << "," << fmt_double(a[i].score) << ","
          << fmt_double(b[i].score) << "\n";
    }
    csv << "__mean__,all," << fmt_double(by_name[cmp.baseline].mean_score) << ","
        << fmt_double(by_name[cmp.treatment].mean_score) << "\n";
    csv << "__fraction_steered__,all," << fmt_double(by_name[cmp.baseline].fraction_steered()) << ","
        << fmt_double(by_name[cmp.treatment].fraction_steered()) << "\n";
    const std::string rel = "scores/compare_" + cmp.axis + ".csv";
    write_file_atomic(path(rel), csv.str());
    record("sweep", rel);
  }
  {
    std::ostringstream csv;
    csv << "method,class,score\n";
    for (const auto& m : methods) {
      for (const auto& [cls, s] : class_scores(all.at(m.name))) csv << m.name << "," << cls << "," << fmt_double(s) << "\n";
    }
    write_file_atomic(path("scores/class_scores.csv"), csv.str());
    record("sweep", "scores/class_scores.csv");
  }
  json methods_j = json::array();
  for (const auto& m : methods) {
    const auto& s = by_name.at(m.name);
    methods_j.push_back(json{{"name", m.name},
                             {"extraction_key", m.extraction_key()},
                             {"mean_score", s.mean_score},
                             {"n_concepts", s.n_concepts},
                             {"n_steered", s.n_steered},
                             {"fraction_steered", s.fraction_steered()}});
  }
  json comps = json::array();
  for (const auto& cmp : config_.comparisons) {
    comps.push_back(json{{"axis", cmp.axis},
                         {"baseline", cmp.baseline},
                         {"treatment", cmp.treatment},
                         {"baseline_mean", by_name[cmp.baseline].mean_score},
                         {"treatment_mean", by_name[cmp.treatment].mean_score}});
  }
  write_file_atomic(path("scores/summary.json"),
                    tagged(json{{"methods", methods_j},
                                {"comparisons", comps},
                                {"success_threshold", config_.success_threshold},
                                {"jailbreak", jb_json}})
                            .dump(2) +
                        "\n");
  record("sweep", "scores/summary.json");
  save_manifest();
  record_timing("sweep", seconds_since(t0));
}

json Pipeline::report() const {
  verify_manifest();
  const fs::path p = path("scores/summary.json");
  require(fs::exists(p), ErrorKind::IoError, "no summary yet; run the sweep first");
  json j = load_tagged(p);
  j["run_dir"] = run_dir_.string();
  return j;
}

std::map<std::string, std::string> hash_tree(const fs::path& dir, const std::vector<std::string>& exclude) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (std::find(exclude.begin(), exclude.end(), rel) != exclude.end()) continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

}  // namespace attnsteer
