// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "attnsteer/enrichment.hpp"
#include "attnsteer/extraction.hpp"
#include "attnsteer/guidance.hpp"
#include "attnsteer/model.hpp"
#include "attnsteer/pipeline.hpp"
#include "helpers.hpp"

using namespace attnsteer;
using testutil::cosine;
using testutil::randn;
using testutil::randv;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const std::string& id, bool ok, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("[%s] %-4s %s\n", ok ? "PASS" : "FAIL", id.c_str(), detail.c_str());
  std::fflush(stdout);
}

void info(const std::string& id, const std::string& detail) {
  std::printf("[INFO] %-4s %s\n", id.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string num(double x, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, x);
  return buf;
}

ModelParams random_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = ModelParams::initialize(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 0.6f);
  p.for_each_tensor([&](const std::string& name, std::span<float> t) {
    const bool gain = name.find("norm") != std::string::npos;
    for (float& x : t) x = gain ? 1.0f + 0.2f * n(rng) : n(rng);
  });
  return p;
}

// ---- 1 ---------------------------------------------------------------------

void attention_validity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst_sum = 0.0, worst_upper = 0.0;
  for (int i = 0; i < 1000; ++i) {
    ModelConfig c = testutil::tiny_config(48, 2 + static_cast<int>(i % 3), 16, 1 << (i % 3), 40);
    const ModelParams p = random_params(c, 1000 + i);
    const int T = 1 + static_cast<int>(uniform_index(rng, 40));
    const auto prompt = testutil::random_tokens(rng, T, 48);
    const auto tr = forward(prompt, p, c).trace;
    for (const auto& heads : tr.attention) {
      for (const auto& a : heads) {
        for (int t = 0; t < T; ++t) {
          double s = 0.0;
          for (int j = 0; j < T; ++j) {
            if (j > t) worst_upper = std::max(worst_upper, std::abs(double(a(t, j))));
            s += a(t, j);
          }
          worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        }
      }
    }
  }
  const double secs = since(t0);
  report("1", worst_sum <= 1e-6 && worst_upper == 0.0 && secs <= 60,
         "1000 forward passes: max |row sum - 1| = " + num(worst_sum) + ", max mass above diagonal = " +
             num(worst_upper) + ", " + num(secs, 3) + " s");
}

// ---- 2 ---------------------------------------------------------------------

void steering_identity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(102);
  const ModelConfig c = testutil::tiny_config(64, 3, 32, 4, 64);
  const ModelParams p = random_params(c, 7);
  int bad = 0;
  for (int i = 0; i < 100; ++i) {
    const auto prompt = testutil::random_tokens(rng, 2 + static_cast<int>(uniform_index(rng, 20)), 64);
    const auto base = forward(prompt, p, c).logits;
    DecodeOptions dec;
    dec.max_new = 12;
    const auto gen = generate(prompt, p, c, nullptr, dec);

    SteeringSpec zero_eps;
    const VectorD u = randv(rng, c.d_model).normalized();
    for (int b = 1; b <= c.n_blocks; ++b) zero_eps.vectors[b] = u.cast<float>();
    zero_eps.coefficient = 0.0f;
    SteeringSpec zero_v;
    for (int b = 1; b <= c.n_blocks; ++b) zero_v.vectors[b] = VectorF::Zero(c.d_model);
    zero_v.coefficient = 0.8f;
    for (const SteeringSpec* s : {&zero_eps, &zero_v}) {
      const auto l = forward(prompt, p, c, s).logits;
      const bool same_logits = l.size() == base.size() &&
                               std::memcmp(l.data(), base.data(), sizeof(float) * static_cast<std::size_t>(l.size())) == 0;
      bad += !same_logits || generate(prompt, p, c, s, dec) != gen;
    }
  }
  const double secs = since(t0);
  report("2", bad == 0 && secs <= 60,
         "100 prompts x {eps = 0, v = 0}: " + std::to_string(bad) + " mismatches in logits or greedy tokens, " +
             num(secs, 3) + " s");
}

// ---- 3 ---------------------------------------------------------------------

double prefix_mass(const ForwardTrace& tr, int block, int t, int b0, int b1) {
  double s = 0;
  for (int h = 0; h < tr.n_heads(); ++h)
    for (int j = b0; j < b1; ++j) s += tr.attention[block - 1][h](t, j);
  return s / tr.n_heads();
}

std::pair<Marker, double> brute_select(const std::vector<Marker>& cands, std::size_t n_prompts,
                                       const std::function<double(Marker, std::size_t)>& score) {
  Marker best_m = cands.front();
  double best = -1e300;
  for (Marker m : cands) {
    double mx = -1e300;
    for (std::size_t p = 0; p < n_prompts; ++p) mx = std::max(mx, score(m, p));
    if (mx > best) {
      best = mx;
      best_m = m;
    }
  }
  return {best_m, best};
}

void guidance_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(103);
  const std::vector<Marker> all{Marker::StartHeader, Marker::Role, Marker::EndHeader, Marker::Newline};
  int mismatches = 0, checks = 0;
  for (int inst = 0; inst < 500; ++inst) {
    const int P = 1 + static_cast<int>(uniform_index(rng, 3));
    const int n = 1 + static_cast<int>(uniform_index(rng, 16));
    const int blocks = 2 + static_cast<int>(uniform_index(rng, 2));
    const int heads = 1 + static_cast<int>(uniform_index(rng, 3));
    std::vector<RenderedPrompt> pc, p0;
    std::vector<ForwardTrace> tc, t0r;
    for (int i = 0; i < n; ++i) {
      const int body = static_cast<int>(uniform_index(rng, 12 - 5 - P + 1));  // T = 1 + P + body + 4 <= 12
      pc.push_back(testutil::skeleton_prompt(P, body, i));
      p0.push_back(testutil::skeleton_prompt(0, body, i));
      tc.push_back(testutil::random_trace(rng, pc.back().length(), blocks, heads, 3));
      t0r.push_back(testutil::random_trace(rng, p0.back().length(), blocks, heads, 3));
    }
    std::vector<Marker> cands = all;
    std::shuffle(cands.begin(), cands.end(), rng);
    cands.resize(1 + uniform_index(rng, 4));

    const auto sel = select_token(tc, pc, cands);
    const auto emb = select_token_by_embedding_diff(tc, pc, t0r, p0, cands);
    const bool norm = inst % 2 == 1;
    const auto soft = soft_labels(pc, tc, p0.size(), sel, norm);
    for (int b = 1; b <= blocks; ++b) {
      const auto [m, v] = brute_select(cands, pc.size(), [&](Marker mk, std::size_t p) {
        return prefix_mass(tc[p], b, pc[p].position(mk), 1, 1 + P);
      });
      ++checks;
      mismatches += sel.at(b).marker != m || std::abs(sel.at(b).value - v) > 1e-9;
      const auto [me, ve] = brute_select(cands, pc.size(), [&](Marker mk, std::size_t p) {
        const Eigen::RowVectorXd d = tc[p].hidden[b - 1].row(pc[p].position(mk)).cast<double>() -
                                     t0r[p].hidden[b - 1].row(p0[p].position(mk)).cast<double>();
        return d.norm();
      });
      ++checks;
      mismatches += emb.at(b).marker != me || std::abs(emb.at(b).value - ve) > 1e-9;

      std::vector<double> raw(pc.size());
      for (std::size_t p = 0; p < pc.size(); ++p) raw[p] = prefix_mass(tc[p], b, pc[p].position(m), 1, 1 + P);
      const double lo = *std::min_element(raw.begin(), raw.end()), hi = *std::max_element(raw.begin(), raw.end());
      for (std::size_t p = 0; p < pc.size(); ++p) {
        double want = raw[p];
        if (norm) want = hi > lo ? (raw[p] - lo) / (hi - lo) : 1.0;
        ++checks;
        mismatches += std::abs(soft.label(b, p) - want) > 1e-9;
      }
      const auto full = soft.block_labels(b);
      ++checks;
      mismatches += full.size() != pc.size() + p0.size() ||
                    std::any_of(full.begin() + static_cast<std::ptrdiff_t>(pc.size()), full.end(),
                                [](double y) { return y != 0.0; });
    }
  }
  const double secs = since(t0);
  report("3", mismatches == 0 && secs <= 120,
         "500 instances, " + std::to_string(checks) + " selections/labels vs brute force: " +
             std::to_string(mismatches) + " mismatches, " + num(secs, 3) + " s");
}

// ---- 4 ---------------------------------------------------------------------

LabeledEmbeddings make(MatrixD X, VectorD y) {
  LabeledEmbeddings d;
  d.X = std::move(X);
  d.y = std::move(y);
  d.block = 2;
  return d;
}

void rfm_numerics() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(104);
  const int k = 6;
  const MatrixD A = randn(rng, k, k);
  const MatrixD M = A * A.transpose() / k + 0.1 * MatrixD::Identity(k, k);
  const KernelPredictor f(randn(rng, 30, k), randv(rng, 30), M, 2.0);
  double worst_grad = 0.0;
  for (int i = 0; i < 100; ++i) {
    const VectorD x = randv(rng, k);
    const VectorD g = f.gradient(x);
    VectorD fd(k);
    for (int j = 0; j < k; ++j) {
      VectorD e = VectorD::Zero(k);
      e(j) = 1e-5;
      fd(j) = (f(x + e) - f(x - e)) / 2e-5;
    }
    worst_grad = std::max(worst_grad, (g - fd).norm() / g.norm());
  }

  const MatrixD X = randn(rng, 200, 10);
  const VectorD ws = randv(rng, 10);
  RfmOptions o;
  o.iterations = 3;
  const auto [cv, state] = rfm(make(X, X * ws), o);
  const double asym = (state.M - state.M.transpose()).norm();
  const double min_eig = Eigen::SelfAdjointEigenSolver<MatrixD>(state.M).eigenvalues().minCoeff();
  const auto top = top_eigenvector(state.M, 0);
  const double residual = top.residual;
  const double c = std::abs(cosine(cv.direction, ws));
  const double secs = since(t0);
  report("4", worst_grad <= 1e-4 && asym == 0.0 && min_eig >= -1e-8 && residual <= 1e-6 && c >= 0.99 && secs <= 300,
         "max gradient rel. error " + num(worst_grad) + ", AGOP asymmetry " + num(asym) + ", min eigenvalue " +
             num(min_eig) + ", eigen residual " + num(residual) + ", planted |cos| " + num(c, 6) + ", " +
             num(secs, 3) + " s");
}

// ---- 5 ---------------------------------------------------------------------

void extractor_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(105);
  double dm_worst = 0.0, pca_worst = 1.0, ridge_worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 10 + static_cast<int>(uniform_index(rng, 30)), k = 3 + static_cast<int>(uniform_index(rng, 8));
    const VectorD shift = 2.0 * randv(rng, k);
    MatrixD X = randn(rng, 2 * n, k);
    VectorD y = VectorD::Zero(2 * n);
    for (int i = 0; i < n; ++i) {
      X.row(i) += shift.transpose();
      y(i) = 1.0;
    }
    const VectorD raw = X.topRows(n).colwise().mean().transpose() - X.bottomRows(n).colwise().mean().transpose();
    dm_worst = std::max(dm_worst, std::abs(std::abs(cosine(diff_in_means(make(X, y)).direction, raw)) - 1.0));

    const auto v = pca_pairs(make(X, y), trial);
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 prng(trial);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(prng, i)]);
    MatrixD Z(n, k);
    for (int i = 0; i < n; ++i) Z.row(i) = X.row(i) - X.row(n + perm[static_cast<std::size_t>(i)]);
    Eigen::SelfAdjointEigenSolver<MatrixD> es(Z.transpose() * Z);
    pca_worst = std::min(pca_worst, std::abs(cosine(v.direction, es.eigenvectors().col(k - 1))));

    const VectorD yr = randv(rng, 2 * n);
    for (double C : default_ridge_grid().grid) {
      const VectorD w = ridge_solve(X, yr, C);
      const MatrixD G = X.transpose() * X + C * MatrixD::Identity(k, k);
      const VectorD ref = G.ldlt().solve(X.transpose() * yr);
      ridge_worst = std::max(ridge_worst, (w - ref).norm() / ref.norm());
    }
  }
  const double secs = since(t0);
  report("5", dm_worst <= 1e-10 && pca_worst >= 1 - 1e-8 && ridge_worst <= 1e-8 && secs <= 120,
         "100 instances each: diff-in-means ||cos|-1| max " + num(dm_worst) + ", pca min |cos| " +
             num(pca_worst, 12) + ", ridge max rel. error " + num(ridge_worst) + ", " + num(secs, 3) + " s");
}

// ---- 6 ---------------------------------------------------------------------

double exact_p(const std::vector<double>& values, int q) {
  std::vector<int> perm(values.size());
  std::iota(perm.begin(), perm.end(), 0);
  double obs = 0;
  for (int s = 0; s < q; ++s) obs += values[static_cast<std::size_t>(s)];
  long long hit = 0, tot = 0;
  do {
    double s = 0;
    for (int j = 0; j < q; ++j) s += values[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
    hit += s >= obs - 1e-12;
    ++tot;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return double(hit) / double(tot);
}

void permutation_calibration() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(106);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const PermutationTestConfig c;
  int le05 = 0, le01 = 0;
  const int rows = 2000;
  for (int i = 0; i < rows; ++i) {
    const int t = 12 + static_cast<int>(uniform_index(rng, 30));
    std::vector<float> row(static_cast<std::size_t>(t + 1));
    for (auto& x : row) x = static_cast<float>(u(rng));
    const int P = 1 + static_cast<int>(uniform_index(rng, 4));
    const double p = permutation_test(row, t, 1, 1 + P, c, derive_seed(61, {std::uint64_t(i)})).p_value;
    le05 += p <= 0.05;
    le01 += p <= 0.01;
  }
  const double f05 = le05 / double(rows), f01 = le01 / double(rows);

  // Monte-Carlo p against exact enumeration on small eligible sets
  PermutationTestConfig mc;
  mc.exact_max_eligible = 0;
  int outside = 0, exact_bad = 0;
  const int trials = 300;
  for (int trial = 0; trial < trials; ++trial) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 5));  // |I| in 2..6
    const int t = n + 1;
    std::vector<float> row(static_cast<std::size_t>(t + 1));
    for (auto& x : row) x = static_cast<float>(u(rng));
    const int q = 1 + static_cast<int>(uniform_index(rng, n - 1));
    std::vector<double> vals;
    for (int j = 1; j < t; ++j) vals.push_back(row[static_cast<std::size_t>(j)]);
    const double pe = exact_p(vals, q);
    exact_bad += std::abs(permutation_test(row, t, 1, 1 + q, c, 0).p_value - pe) > 1e-12;
    const double pm = permutation_test(row, t, 1, 1 + q, mc, 5000 + trial).p_value;
    const double se = std::sqrt(std::max(pe * (1 - pe), 1e-12) / mc.n_permutations);
    outside += std::abs(pm - pe) > 3 * se;
  }
  // 3 SE bounds fail about 0.3% of the time by chance; allow that rate with slack
  const int allowed = 3;
  const double secs = since(t0);
  report("6", f05 >= 0.03 && f05 <= 0.07 && f01 >= 0.004 && f01 <= 0.02 && exact_bad == 0 && outside <= allowed &&
                  secs <= 180,
         "2000 null rows: P(p<=0.05) = " + num(f05) + ", P(p<=0.01) = " + num(f01) + "; exact path mismatches " +
             std::to_string(exact_bad) + "/" + std::to_string(trials) + ", Monte-Carlo outside 3 SE " +
             std::to_string(outside) + "/" + std::to_string(trials) + ", " + num(secs, 3) + " s");
}

// ---- 7 / 8 -----------------------------------------------------------------

struct SweepOutcome {
  json summary;
  fs::path run_dir;
  double seconds = 0.0;
};

SweepOutcome full_sweep(const fs::path& root, const ExperimentConfig& base) {
  ExperimentConfig c = base;
  c.output_root = root.string();
  fs::remove_all(root);
  const auto t0 = Clock::now();
  Pipeline p(c);
  p.sweep();
  SweepOutcome o;
  o.seconds = since(t0);
  o.summary = p.report();
  o.run_dir = p.run_dir();
  return o;
}

const json& method_entry(const json& summary, const std::string& name) {
  for (const auto& m : summary.at("methods")) {
    if (m.at("name") == name) return m;
  }
  fail(ErrorKind::ConfigError, "summary has no method " + name);
}

void directional(const SweepOutcome& a, const ExperimentConfig& cfg) {
  const json& s = a.summary;
  auto mean = [&](const char* n) { return method_entry(s, n).at("mean_score").get<double>(); };
  const int n_concepts = method_entry(s, "attn-soft").at("n_concepts").get<int>();
  const bool shape = n_concepts >= 20;
  const std::string tag = " (" + std::to_string(n_concepts) + " concepts, " + num(a.seconds, 4) + " s)";
  report("7a", shape && mean("attn-hard") >= mean("fixed-hard"),
         "attention-guided " + num(mean("attn-hard")) + " >= fixed token " + num(mean("fixed-hard")) + tag);
  report("7b", shape && mean("attn-soft") >= mean("attn-hard"),
         "soft labels " + num(mean("attn-soft")) + " >= hard labels " + num(mean("attn-hard")) + tag);
  const int k = (cfg.model.n_blocks + 1) / 2;
  report("7c", shape && mean("attn-soft-top") >= mean("attn-soft-bottom"),
         "top-" + std::to_string(k) + " enrichment blocks " + num(mean("attn-soft-top")) + " >= bottom-" +
             std::to_string(k) + " " + num(mean("attn-soft-bottom")) + tag);
  const double frac = method_entry(s, "attn-soft").at("fraction_steered").get<double>();
  report("7d", shape && frac >= 0.8,
         "attention + soft + RFM steers " + num(frac) + " of concepts at score >= " +
             num(cfg.success_threshold) + " (need >= 0.8)" + tag);
  report("7t", a.seconds <= 1800, "full default run " + num(a.seconds, 4) + " s (limit 1800 s)");

  const json tl = json::parse(read_text_file(a.run_dir / "checkpoints/train.json"));
  info("7", "held-out loss " + num(tl.at("initial_heldout_loss").get<double>()) + " -> " +
                num(tl.at("final_heldout_loss").get<double>()));
  if (!s.at("jailbreak").is_null()) {
    const auto& jb = s.at("jailbreak");
    info("7", "jailbreak (" + jb.at("concept_id").get<std::string>() + "): refusal rate unsteered " +
                  num(jb.at("unsteered_rate").get<double>()) + ", best steered " +
                  num(jb.at("best_rate").get<double>()));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string root = "acceptance_runs";
  std::set<int> only;
  app.add_option("--root", root, "scratch directory for the full runs")->capture_default_str();
  app.add_option("--only", only, "run only these criteria (1-8)");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  auto want = [&](int c) { return only.empty() || only.count(c); };

  try {
    if (want(1)) attention_validity();
    if (want(2)) steering_identity();
    if (want(3)) guidance_oracles();
    if (want(4)) rfm_numerics();
    if (want(5)) extractor_oracles();
    if (want(6)) permutation_calibration();
    if (want(7) || want(8)) {
      const ExperimentConfig cfg = ExperimentConfig::defaults();
      const SweepOutcome a = full_sweep(fs::path(root) / "run_a", cfg);
      if (want(7)) {
        directional(a, cfg);
        // Same trained model, library-default RFM ridge: shown for disclosure, not scored.
        ExperimentConfig lo = cfg;
        lo.checkpoint = (a.run_dir / "checkpoints/model.ckpt").string();
        lo.jailbreak.enabled = false;
        lo.method.rfm.ridge = RfmOptions{}.ridge;
        for (auto& v : lo.variants) v.rfm.ridge = RfmOptions{}.ridge;
        const SweepOutcome l = full_sweep(fs::path(root) / "run_ridge_default", lo);
        std::string line = "rfm ridge " + num(lo.method.rfm.ridge) + ":";
        for (const auto& m : l.summary.at("methods")) {
          line += " " + m.at("name").get<std::string>() + " " + num(m.at("mean_score").get<double>());
        }
        info("7", line);
      }
      if (want(8)) {
        const SweepOutcome b = full_sweep(fs::path(root) / "run_b", cfg);
        const auto t0 = Clock::now();
        const auto ha = hash_tree(a.run_dir, {"timings.json"});
        const auto hb = hash_tree(b.run_dir, {"timings.json"});
        int differ = 0;
        std::string first;
        std::set<std::string> names;
        for (const auto& [k, v] : ha) names.insert(k);
        for (const auto& [k, v] : hb) names.insert(k);
        for (const auto& n : names) {
          const auto ia = ha.find(n), ib = hb.find(n);
          if (ia == ha.end() || ib == hb.end() || ia->second != ib->second) {
            if (!differ) first = n;
            ++differ;
          }
        }
        const double secs = b.seconds + since(t0);
        report("8", differ == 0 && !ha.empty() && secs <= 2 * a.seconds,
               std::to_string(ha.size()) + " files compared, " + std::to_string(differ) + " differ" +
                   (differ ? " (first: " + first + ")" : "") + "; second run + comparison " + num(secs, 4) +
                   " s vs limit " + num(2 * a.seconds, 4) + " s");
      }
    }
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
