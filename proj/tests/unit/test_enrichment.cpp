#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>

#include "attnsteer/enrichment.hpp"
#include "helpers.hpp"

using namespace attnsteer;
using testutil::skeleton_prompt;

namespace {

std::vector<float> uniform_row(int T, int t) {
  std::vector<float> r(T, 0.0f);
  for (int j = 0; j <= t; ++j) r[j] = 1.0f / float(t + 1);
  return r;
}

// Trace whose selected-token rows come from `make_row(head, prompt)`.
ForwardTrace trace_with_rows(const RenderedPrompt& pr, int n_blocks, int n_heads, Marker m, auto&& make_row) {
  ForwardTrace tr;
  const int T = pr.length();
  for (int b = 0; b < n_blocks; ++b) {
    tr.hidden.push_back(MatrixF::Zero(T, 2));
    std::vector<MatrixF> heads;
    for (int h = 0; h < n_heads; ++h) {
      MatrixF a = MatrixF::Zero(T, T);
      for (int t = 0; t < T; ++t) {
        const auto r = uniform_row(T, t);
        for (int j = 0; j < T; ++j) a(t, j) = r[j];
      }
      const int t = pr.position(m);
      const std::vector<float> row = make_row(h);
      for (int j = 0; j < T; ++j) a(t, j) = row[j];
      heads.push_back(a);
    }
    tr.attention.push_back(std::move(heads));
  }
  return tr;
}

double exact_p(const std::vector<double>& values, const std::vector<int>& prefix_slots) {
  std::vector<int> perm(values.size());
  std::iota(perm.begin(), perm.end(), 0);
  double obs = 0;
  for (int s : prefix_slots) obs += values[s];
  long long hit = 0, tot = 0;
  do {
    double s = 0;
    for (int j : prefix_slots) s += values[perm[j]];
    hit += s >= obs - 1e-12;
    ++tot;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return double(hit) / double(tot);
}

}  // namespace

TEST_CASE("permutation test defaults and trivial rows") {
  const PermutationTestConfig c;
  CHECK(c.n_permutations == 500);
  CHECK(c.alpha == 0.01);
  for (int t : {5, 12, 30}) {
    const auto row = uniform_row(t + 1, t);
    const auto r = permutation_test(row, t, 1, 3, c, 1);
    CHECK(r.p_value == 1.0);
    CHECK(r.n_eligible == t - 1);
    CHECK(r.exact == (t - 1 <= 6));
  }
  const auto row = uniform_row(10, 9);
  CHECK_THROWS_AS(permutation_test(row, 2, 1, 2, c, 0), Error);  // |I| = 1
  try {
    permutation_test(row, 5, 6, 8, c, 0);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::PrefixOutsideEligible);
  }
}

TEST_CASE("exact enumeration matches an independent oracle") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PermutationTestConfig c;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 5));  // |I| in 2..6
    const int t = n + 1;
    std::vector<float> row(t + 1, 0.0f);
    for (int j = 0; j <= t; ++j) row[j] = static_cast<float>(u(rng));
    const int q = 1 + static_cast<int>(uniform_index(rng, n - 1));
    const auto r = permutation_test(row, t, 1, 1 + q, c, 0);
    std::vector<double> vals;
    for (int j = 1; j < t; ++j) vals.push_back(row[j]);
    std::vector<int> slots(q);
    std::iota(slots.begin(), slots.end(), 0);
    CHECK(r.exact);
    CHECK(r.p_value == doctest::Approx(exact_p(vals, slots)));
  }
}

TEST_CASE("Monte-Carlo p agrees with exact enumeration at |I| = 4") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PermutationTestConfig exact, mc;
  mc.exact_max_eligible = 0;
  mc.n_permutations = 4000;
  int outside = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> row(6, 0.0f);
    for (auto& x : row) x = static_cast<float>(u(rng));
    const int pos = 1 + static_cast<int>(uniform_index(rng, 4));
    const double pe = permutation_test(row, 5, pos, pos + 1, exact, 0).p_value;
    const double pm = permutation_test(row, 5, pos, pos + 1, mc, 1000 + trial).p_value;
    const double se = std::sqrt(std::max(pe * (1 - pe), 1e-12) / mc.n_permutations);
    outside += std::abs(pm - pe) > 3 * se;
  }
  CHECK(outside <= 3);  // about 0.3% expected outside 3 SE
}

TEST_CASE("permutation p-values are uniform under the null") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PermutationTestConfig c;
  int le05 = 0, le01 = 0;
  const int rows = 2000;
  for (int i = 0; i < rows; ++i) {
    const int t = 20;
    std::vector<float> row(t + 1);
    for (auto& x : row) x = static_cast<float>(u(rng));
    const double p = permutation_test(row, t, 1, 4, c, derive_seed(9, {std::uint64_t(i)})).p_value;
    le05 += p <= 0.05;
    le01 += p <= 0.01;
  }
  CHECK(le05 / double(rows) >= 0.03);
  CHECK(le05 / double(rows) <= 0.07);
  CHECK(le01 / double(rows) >= 0.004);
  CHECK(le01 / double(rows) <= 0.02);
}

TEST_CASE("enrichment scores on constructed traces") {
  const PermutationTestConfig c;
  std::vector<RenderedPrompt> prompts;
  for (int p = 0; p < 10; ++p) prompts.push_back(skeleton_prompt(3, 26, p));
  const int T = prompts[0].length();
  const Marker m = Marker::EndHeader;
  const auto sel = fixed_selection(m, 2);

  SUBCASE("uniform rows score 0") {
    std::vector<ForwardTrace> tr;
    for (const auto& pr : prompts)
      tr.push_back(trace_with_rows(pr, 2, 2, m, [&](int) { return uniform_row(T, pr.position(m)); }));
    const auto rep = enrichment_report("c", prompts, tr, sel, c);
    CHECK(rep.score(1) == 0.0);
    CHECK(rep.score(2) == 0.0);
  }
  SUBCASE("rows concentrated on the prefix score 1") {
    std::vector<ForwardTrace> tr;
    for (const auto& pr : prompts)
      tr.push_back(trace_with_rows(pr, 2, 2, m, [&](int) {
        std::vector<float> r(T, 0.0f);
        r[1] = 0.4f;
        r[2] = 0.35f;
        r[3] = 0.25f;
        return r;
      }));
    const auto rep = enrichment_report("c", prompts, tr, sel, c);
    CHECK(rep.score(1) == 1.0);
    CHECK(rep.blocks[0].n_cells == 20);
  }
  SUBCASE("half of the heads significant") {
    std::vector<ForwardTrace> tr;
    for (const auto& pr : prompts)
      tr.push_back(trace_with_rows(pr, 2, 2, m, [&](int h) {
        if (h == 1) return uniform_row(T, pr.position(m));
        std::vector<float> r(T, 0.0f);
        r[1] = r[2] = r[3] = 1.0f / 3.0f;
        return r;
      }));
    const auto rep = enrichment_report("c", prompts, tr, sel, c);
    CHECK(rep.score(2) == doctest::Approx(0.5).epsilon(0.05));
  }
}

TEST_CASE("enrichment is schedule independent and round trips") {
  std::mt19937_64 rng(5);
  std::vector<RenderedPrompt> prompts;
  std::vector<ForwardTrace> tr;
  for (int p = 0; p < 6; ++p) {
    prompts.push_back(skeleton_prompt(2, 10, p));
    tr.push_back(testutil::random_trace(rng, prompts.back().length(), 3, 2, 2));
  }
  const auto sel = fixed_selection(Marker::Newline, 3);
  const auto a = enrichment_report("c", prompts, tr, sel, PermutationTestConfig{});
  const auto b = enrichment_report("c", prompts, tr, sel, PermutationTestConfig{});
  CHECK(a.to_json(true) == b.to_json(true));

  const auto dir = std::filesystem::temp_directory_path() / "attnsteer_enrich_test";
  std::filesystem::create_directories(dir);
  std::vector<EnrichmentReport> reps{a};
  write_enrichment_sidecar(dir / "s.json", reps);
  const auto back = read_enrichment_sidecar(dir / "s.json");
  REQUIRE(back.size() == 1);
  CHECK(back[0].scores() == a.scores());
  CHECK(back[0].config.n_permutations == 500);
  write_enrichment_csv(dir / "s.csv", reps);
  CHECK(read_text_file(dir / "s.csv").rfind("concept,block_1,block_2,block_3\n", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("rank blocks") {
  const std::vector<double> dec{0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2};
  CHECK(rank_blocks(dec, 3, RankDirection::Top) == std::vector<int>{2, 3, 4});
  auto all = rank_blocks(dec, 7, RankDirection::Top);
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<int>{2, 3, 4, 5, 6, 7, 8});
  CHECK(rank_blocks(dec, 2, RankDirection::Bottom) == std::vector<int>{8, 7});
  CHECK(rank_blocks(dec, 1, RankDirection::Top, true) == std::vector<int>{1});
  CHECK_THROWS_AS(rank_blocks(dec, 8, RankDirection::Top), Error);
  CHECK_THROWS_AS(rank_blocks(dec, 0, RankDirection::Top), Error);
  const std::vector<double> ties{0.5, 0.2, 0.2, 0.2};
  CHECK(rank_blocks(ties, 2, RankDirection::Top) == std::vector<int>{2, 3});

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(8);
    for (auto& x : s) x = static_cast<double>(uniform_index(rng, 5)) / 4.0;  // many ties
    const int k = 1 + static_cast<int>(uniform_index(rng, 7));
    for (auto dir : {RankDirection::Top, RankDirection::Bottom}) {
      // sort oracle on (score, block) pairs
      std::vector<std::pair<double, int>> v;
      for (int b = 2; b <= 8; ++b) v.push_back({dir == RankDirection::Top ? -s[b - 1] : s[b - 1], b});
      std::sort(v.begin(), v.end());
      std::vector<int> want;
      for (int i = 0; i < k; ++i) want.push_back(v[i].second);
      CHECK(rank_blocks(s, k, dir) == want);
    }
  }
}
