#include "attnsteer/enrichment.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

namespace attnsteer {

namespace {

// Permuted sums reorder floating additions; treat near-ties as ties.
constexpr double kTieSlack = 1e-12;

}  // namespace

void PermutationTestConfig::validate() const {
  require(n_permutations >= 1, ErrorKind::ConfigError, "n_permutations must be >= 1");
  require(alpha > 0.0 && alpha < 1.0, ErrorKind::ConfigError, "alpha must lie in (0, 1)");
  require(exact_max_eligible >= 0 && exact_max_eligible <= 9, ErrorKind::ConfigError,
          "exact_max_eligible must be in [0, 9]");
}

json PermutationTestConfig::to_json() const {
  return json{{"n_permutations", n_permutations},
              {"alpha", alpha},
              {"rng_seed", rng_seed},
              {"exact_max_eligible", exact_max_eligible}};
}

PermutationTestConfig PermutationTestConfig::from_json(const json& j) {
  PermutationTestConfig c;
  c.n_permutations = j.value("n_permutations", c.n_permutations);
  c.alpha = j.value("alpha", c.alpha);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.exact_max_eligible = j.value("exact_max_eligible", c.exact_max_eligible);
  c.validate();
  return c;
}

std::string PermutationTestConfig::hash() const { return sha256_hex(to_json().dump()); }

PermutationResult permutation_test(std::span<const float> row, int position, int prefix_begin, int prefix_end,
                                   const PermutationTestConfig& config, std::uint64_t stream_seed) {
  config.validate();
  require(position >= 0 && position < static_cast<int>(row.size()), ErrorKind::InvalidArgument,
          "query position outside the attention row");
  // Eligible set I = {1, ..., position-1}.
  const int n = position - 1;
  if (n < 2) fail(ErrorKind::EligibleSetTooSmall, "eligible set has " + std::to_string(std::max(n, 0)) + " entries");
  const int lo = std::max(prefix_begin, 1), hi = std::min(prefix_end, position);
  if (hi <= lo) fail(ErrorKind::PrefixOutsideEligible, "prefix does not intersect the eligible set");

  std::vector<double> values(static_cast<std::size_t>(n));
  for (int j = 1; j < position; ++j) values[static_cast<std::size_t>(j - 1)] = row[static_cast<std::size_t>(j)];
  // Prefix slots as indices into `values`.
  const int q = hi - lo;
  const int first = lo - 1;

  PermutationResult r;
  r.n_eligible = n;
  r.n_prefix_eligible = q;
  for (int j = lo; j < hi; ++j) r.observed += row[static_cast<std::size_t>(j)];
  const double threshold = r.observed - kTieSlack;

  long long hits = 0;
  if (n <= config.exact_max_eligible) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double s = 0.0;
      for (int j = first; j < first + q; ++j) s += values[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
      hits += s >= threshold;
      ++r.n_draws;
    } while (std::next_permutation(perm.begin(), perm.end()));
    r.exact = true;
  } else {
    // Only the q values landing on prefix slots matter: a partial Fisher-Yates
    // pass draws them uniformly. The scratch array stays a permutation, so
    // it can be reused across draws without resetting.
    std::mt19937_64 rng(stream_seed);
    std::vector<double> scratch = values;
    for (int m = 0; m < config.n_permutations; ++m) {
      double s = 0.0;
      for (int j = 0; j < q; ++j) {
        const auto pick = static_cast<std::size_t>(j) + uniform_index(rng, static_cast<std::uint64_t>(n - j));
        std::swap(scratch[static_cast<std::size_t>(j)], scratch[pick]);
        s += scratch[static_cast<std::size_t>(j)];
      }
      hits += s >= threshold;
    }
    r.n_draws = config.n_permutations;
  }
  r.p_value = static_cast<double>(hits) / static_cast<double>(r.n_draws);
  return r;
}

BlockEnrichment enrichment_score(std::span<const RenderedPrompt> prefixed_prompts,
                                 std::span<const ForwardTrace> traces, const TokenSelection& selection, int block,
                                 const PermutationTestConfig& config) {
  config.validate();
  require(traces.size() == prefixed_prompts.size(), ErrorKind::MissingTrace, "one trace per prompt required");
  require(!prefixed_prompts.empty(), ErrorKind::InvalidArgument, "no prefixed prompts");
  const Marker marker = selection.at(block).marker;
  const int n_heads = traces.front().n_heads();

  BlockEnrichment out;
  out.block = block;
  out.p_values.assign(static_cast<std::size_t>(n_heads), std::vector<double>(prefixed_prompts.size(), 1.0));
  for (int h = 0; h < n_heads; ++h) {
    for (std::size_t p = 0; p < prefixed_prompts.size(); ++p) {
      const auto& pr = prefixed_prompts[p];
      const MatrixF& a = traces[p].attention_at(block, h);
      const int t = pr.position(marker);
      const std::span<const float> row(a.row(t).data(), static_cast<std::size_t>(a.cols()));
      const std::uint64_t stream =
          derive_seed(config.rng_seed, {static_cast<std::uint64_t>(block), static_cast<std::uint64_t>(h), p});
      ++out.n_cells;
      try {
        const double pv = permutation_test(row, t, pr.prefix_begin, pr.prefix_end, config, stream).p_value;
        out.p_values[static_cast<std::size_t>(h)][p] = pv;
        out.n_significant += pv <= config.alpha;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::PrefixOutsideEligible) throw;
        spdlog::warn("block {} head {} prompt {}: {}; counted as not significant", block, h, p, e.what());
        ++out.n_skipped;
      }
    }
  }
  out.score = static_cast<double>(out.n_significant) / static_cast<double>(out.n_cells);
  return out;
}

EnrichmentReport enrichment_report(const std::string& concept_id, std::span<const RenderedPrompt> prefixed_prompts,
                                   std::span<const ForwardTrace> traces, const TokenSelection& selection,
                                   const PermutationTestConfig& config) {
  EnrichmentReport report;
  report.concept_id = concept_id;
  report.config = config;
  for (const auto& choice : selection.blocks) {
    report.blocks.push_back(enrichment_score(prefixed_prompts, traces, selection, choice.block, config));
  }
  return report;
}

double EnrichmentReport::score(int block) const {
  require(block >= 1 && block <= static_cast<int>(blocks.size()), ErrorKind::InvalidArgument,
          "no enrichment score for block " + std::to_string(block));
  return blocks[static_cast<std::size_t>(block - 1)].score;
}

std::vector<double> EnrichmentReport::scores() const {
  std::vector<double> out;
  for (const auto& b : blocks) out.push_back(b.score);
  return out;
}

json EnrichmentReport::to_json(bool include_p_values) const {
  json j{{"concept_id", concept_id}, {"config", config.to_json()}, {"config_hash", config.hash()},
         {"blocks", json::array()}};
  for (const auto& b : blocks) {
    json heads = json::array();
    for (const auto& ps : b.p_values) {
      const auto [mn, mx] = std::minmax_element(ps.begin(), ps.end());
      const double mean = ps.empty() ? 0.0 : std::accumulate(ps.begin(), ps.end(), 0.0) / static_cast<double>(ps.size());
      const auto sig = std::count_if(ps.begin(), ps.end(), [&](double p) { return p <= config.alpha; });
      json h{{"n_significant", sig}, {"min_p", ps.empty() ? 1.0 : *mn}, {"max_p", ps.empty() ? 1.0 : *mx},
             {"mean_p", mean}};
      if (include_p_values) h["p_values"] = ps;
      heads.push_back(std::move(h));
    }
    j["blocks"].push_back(json{{"block", b.block},
                               {"score", b.score},
                               {"n_significant", b.n_significant},
                               {"n_cells", b.n_cells},
                               {"n_skipped", b.n_skipped},
                               {"heads", std::move(heads)}});
  }
  return j;
}

EnrichmentReport EnrichmentReport::from_json(const json& j) {
  EnrichmentReport r;
  r.concept_id = j.at("concept_id").get<std::string>();
  r.config = PermutationTestConfig::from_json(j.at("config"));
  for (const auto& b : j.at("blocks")) {
    BlockEnrichment be;
    be.block = b.at("block").get<int>();
    be.score = b.at("score").get<double>();
    be.n_significant = b.at("n_significant").get<int>();
    be.n_cells = b.at("n_cells").get<int>();
    be.n_skipped = b.value("n_skipped", 0);
    for (const auto& h : b.at("heads")) {
      be.p_values.push_back(h.contains("p_values") ? h.at("p_values").get<std::vector<double>>()
                                                   : std::vector<double>{});
    }
    r.blocks.push_back(std::move(be));
  }
  return r;
}

std::vector<int> rank_blocks(std::span<const double> scores, int k, RankDirection direction, bool include_first) {
  const int L = static_cast<int>(scores.size());
  const int first = include_first ? 1 : 2;
  const int eligible = std::max(0, L - first + 1);
  if (k < 1 || k > eligible) {
    fail(ErrorKind::KOutOfRange, "k = " + std::to_string(k) + " with " + std::to_string(eligible) + " eligible blocks");
  }
  std::vector<int> blocks;
  for (int b = first; b <= L; ++b) blocks.push_back(b);
  std::stable_sort(blocks.begin(), blocks.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a - 1)], sb = scores[static_cast<std::size_t>(b - 1)];
    return direction == RankDirection::Top ? sa > sb : sa < sb;
  });
  blocks.resize(static_cast<std::size_t>(k));
  return blocks;
}

void write_enrichment_csv(const fs::path& path, std::span<const EnrichmentReport> reports) {
  require(!reports.empty(), ErrorKind::InvalidArgument, "no enrichment reports");
  std::ostringstream out;
  out << "concept";
  for (const auto& b : reports.front().blocks) out << ",block_" << b.block;
  out << "\n";
  out.precision(17);
  for (const auto& r : reports) {
    out << r.concept_id;
    for (const auto& b : r.blocks) out << "," << b.score;
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

void write_enrichment_sidecar(const fs::path& path, std::span<const EnrichmentReport> reports) {
  json j{{"format", "attnsteer-enrichment-v1"}, {"concepts", json::array()}};
  if (!reports.empty()) {
    j["config"] = reports.front().config.to_json();
    j["config_hash"] = reports.front().config.hash();
  }
  for (const auto& r : reports) j["concepts"].push_back(r.to_json(true));
  write_file_atomic(path, j.dump(1) + "\n");
}

std::vector<EnrichmentReport> read_enrichment_sidecar(const fs::path& path) {
  const json j = json::parse(read_text_file(path));
  require(j.value("format", "") == "attnsteer-enrichment-v1", ErrorKind::IoError,
          "not an enrichment sidecar: " + path.string());
  std::vector<EnrichmentReport> out;
  for (const auto& c : j.at("concepts")) out.push_back(EnrichmentReport::from_json(c));
  return out;
}

}  // namespace attnsteer
