#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "attnsteer/extraction.hpp"
#include "helpers.hpp"

using namespace attnsteer;
using testutil::cosine;
using testutil::randn;
using testutil::randv;

namespace {

LabeledEmbeddings make(MatrixD X, VectorD y, int block = 2) {
  LabeledEmbeddings d;
  d.X = std::move(X);
  d.y = std::move(y);
  d.block = block;
  return d;
}

// n concept rows shifted by `shift`, then n baseline rows.
LabeledEmbeddings two_groups(std::mt19937_64& rng, int n, int k, const VectorD& shift) {
  MatrixD X = randn(rng, 2 * n, k);
  VectorD y = VectorD::Zero(2 * n);
  for (int i = 0; i < n; ++i) {
    X.row(i) += shift.transpose();
    y(i) = 1.0;
  }
  return make(X, y);
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::InvalidArgument;
}

MatrixD random_psd(std::mt19937_64& rng, int k) {
  const MatrixD A = randn(rng, k, k);
  return A * A.transpose() / k + 0.1 * MatrixD::Identity(k, k);
}

}  // namespace

TEST_CASE("diff in means") {
  CHECK((diff_in_means(make((MatrixD(2, 2) << 1, 0, 0, 0).finished(), (VectorD(2) << 1, 0).finished())).direction -
         (VectorD(2) << 1, 0).finished())
            .norm() < 1e-12);
  CHECK(kind_of([] {
          diff_in_means(make((MatrixD(2, 2) << 1, 1, 1, 1).finished(), (VectorD(2) << 1, 0).finished()));
        }) == ErrorKind::DegenerateDirection);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = two_groups(rng, 10, 6, randv(rng, 6));
    VectorD mc = VectorD::Zero(6), m0 = VectorD::Zero(6);
    for (int i = 0; i < 10; ++i) mc += d.X.row(i).transpose() / 10.0;
    for (int i = 10; i < 20; ++i) m0 += d.X.row(i).transpose() / 10.0;
    const auto v = diff_in_means(d);
    CHECK(std::abs(v.direction.norm() - 1.0) < 1e-12);
    CHECK(std::abs(std::abs(cosine(v.direction, mc - m0)) - 1.0) <= 1e-10);
  }
}

TEST_CASE("pca of paired differences") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = two_groups(rng, 30, 8, 2.0 * randv(rng, 8));
    const auto v = pca_pairs(d, trial);
    // rebuild Z with the documented pairing: concept row i minus permuted baseline row
    std::vector<Eigen::Index> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 prng(trial);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(prng, i)]);
    MatrixD Z(30, 8);
    for (int i = 0; i < 30; ++i) Z.row(i) = d.X.row(i) - d.X.row(30 + perm[i]);
    Eigen::SelfAdjointEigenSolver<MatrixD> es(Z.transpose() * Z);
    CHECK(std::abs(cosine(v.direction, es.eigenvectors().col(7))) >= 1 - 1e-8);
  }

  // rank-1 differences: all pairs differ by w
  MatrixD X = randn(rng, 10, 5);
  const VectorD w = randv(rng, 5);
  MatrixD full(20, 5);
  full.topRows(10) = X.rowwise() + w.transpose();
  full.bottomRows(10) = X;
  // every concept row sits w above some baseline row, but pairing is random, so use identical baselines
  for (int i = 0; i < 10; ++i) {
    full.row(10 + i) = X.row(0);
    full.row(i) = X.row(0) + w.transpose();
  }
  VectorD y = VectorD::Zero(20);
  y.head(10).setOnes();
  const auto v = pca_pairs(make(full, y), 3);
  CHECK((v.direction - w.normalized()).norm() < 1e-8);

  MatrixD same = MatrixD::Ones(4, 3);
  CHECK(kind_of([&] { pca_pairs(make(same, (VectorD(4) << 1, 1, 0, 0).finished()), 0); }) ==
        ErrorKind::DegenerateDirection);
  CHECK(kind_of([&] { pca_pairs(make(randn(rng, 3, 3), (VectorD(3) << 1, 1, 0).finished()), 0); }) ==
        ErrorKind::UnbalancedClasses);
}

TEST_CASE("ridge regression") {
  CHECK(default_ridge_grid().grid == std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1, 0.0, 1.0, 10.0});
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const MatrixD X = randn(rng, 40, 6);
    const VectorD y = randv(rng, 40);
    for (double C : default_ridge_grid().grid) {
      const VectorD w = ridge_solve(X, y, C);
      const MatrixD A = X.transpose() * X + C * MatrixD::Identity(6, 6);
      const VectorD ref = A.inverse() * X.transpose() * y;
      CHECK((w - ref).norm() <= 1e-8 * ref.norm());
    }
  }
  // exact interpolation at C = 0
  const MatrixD X = randn(rng, 30, 5);
  const VectorD ws = randv(rng, 5);
  const VectorD y = X * ws;
  CHECK((ridge_solve(X, y, 0.0) - ws).norm() < 1e-10);
  const auto cv = ridge_regression(make(X, y));
  CHECK(std::abs(cosine(cv.direction, ws)) > 1 - 1e-6);
  CHECK(cv.hyperparams.contains("C"));

  // rank deficient at C = 0
  MatrixD R = randn(rng, 3, 5);
  CHECK(kind_of([&] { ridge_solve(R, randv(rng, 3), 0.0); }) == ErrorKind::SingularSystem);
  CHECK(ridge_solve(R, randv(rng, 3), 0.1).allFinite());
}

TEST_CASE("logistic regression") {
  CHECK(default_logistic_grid().grid == std::vector<double>{1000.0, 10.0, 1.0, 0.1});
  // separable along e1
  MatrixD X(40, 2);
  VectorD y(40);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int i = 0; i < 40; ++i) {
    const bool pos = i < 20;
    X(i, 0) = (pos ? 3.0 : -3.0) + 0.3 * n(rng);
    X(i, 1) = n(rng);
    y(i) = pos;
  }
  const auto v = logistic_regression(make(X, y));
  CHECK(v.direction(0) > 0.95);

  // against long-run full-batch gradient descent on the same objective
  for (int trial = 0; trial < 5; ++trial) {
    const auto d = two_groups(rng, 30, 4, randv(rng, 4));
    const double C = 0.1;
    const VectorD w = logistic_fit(d.X, d.y, C);
    VectorD u = VectorD::Zero(4);
    for (int it = 0; it < 200000; ++it) {
      VectorD g = u;
      for (int i = 0; i < d.X.rows(); ++i) {
        const double z = d.X.row(i).dot(u);
        g += C * (1.0 / (1.0 + std::exp(-z)) - d.y(i)) * d.X.row(i).transpose();
      }
      u -= 0.05 * g;
    }
    const double angle = std::acos(std::clamp(cosine(w, u), -1.0, 1.0)) * 180.0 / M_PI;
    CHECK(angle < 1.0);
  }

  VectorD soft = y;
  soft(0) = 0.5;
  CHECK(kind_of([&] { logistic_regression(make(X, soft)); }) == ErrorKind::SoftLabelsUnsupported);
}

TEST_CASE("laplace kernel") {
  std::mt19937_64 rng(5);
  const VectorD x = randv(rng, 4), z = randv(rng, 4);
  const MatrixD I = MatrixD::Identity(4, 4);
  CHECK(laplace_kernel(x, x, I, 2.0) == 1.0);
  CHECK(laplace_kernel(x, z, I, 2.0) == doctest::Approx(std::exp(-(x - z).norm() / 2.0)));
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixD M = random_psd(rng, 4);
    const VectorD a = randv(rng, 4), b = randv(rng, 4);
    double q = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) q += (a(i) - b(i)) * M(i, j) * (a(j) - b(j));
    CHECK(laplace_kernel(a, b, M, 3.0) == doctest::Approx(std::exp(-std::sqrt(q) / 3.0)));
  }
  MatrixD neg = -I;
  CHECK(kind_of([&] { laplace_kernel(x, z, neg, 1.0); }) == ErrorKind::NegativeQuadraticForm);
  const MatrixD P = randn(rng, 6, 4), Q = randn(rng, 3, 4);
  const MatrixD M = random_psd(rng, 4);
  const MatrixD K = laplace_kernel_matrix(P, Q, M, 1.5);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(K(i, j) == doctest::Approx(laplace_kernel(P.row(i).transpose(), Q.row(j).transpose(), M, 1.5)));
}

TEST_CASE("kernel predictor gradient matches finite differences") {
  std::mt19937_64 rng(6);
  const MatrixD C = randn(rng, 20, 5);
  const VectorD alpha = randv(rng, 20);
  const KernelPredictor f(C, alpha, random_psd(rng, 5), 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const VectorD x = randv(rng, 5);
    const VectorD g = f.gradient(x);
    VectorD fd(5);
    for (int i = 0; i < 5; ++i) {
      VectorD e = VectorD::Zero(5);
      e(i) = 1e-5;
      fd(i) = (f(x + e) - f(x - e)) / 2e-5;
    }
    CHECK((g - fd).norm() / g.norm() <= 1e-4);
  }
  // center gradients equal the pointwise gradient at each center with the self term removed
  const MatrixD G = f.center_gradients();
  for (int i = 0; i < 20; ++i) CHECK((G.row(i).transpose() - f.gradient(C.row(i).transpose())).norm() < 1e-9);
}

TEST_CASE("agop") {
  std::mt19937_64 rng(7);
  const MatrixD pts = randn(rng, 15, 4);
  const VectorD w = randv(rng, 4);
  const MatrixD Mlin = agop([&](const VectorD&) { return w; }, pts);
  CHECK((Mlin - w * w.transpose()).norm() < 1e-12);
  const MatrixD M0 = agop([&](const VectorD& x) { return VectorD::Zero(x.size()); }, pts);
  CHECK(M0.norm() == 0.0);

  // predictor on 50 points vs finite-difference gradient outer products
  const MatrixD C = randn(rng, 50, 4);
  const KernelPredictor f(C, randv(rng, 50), MatrixD::Identity(4, 4), 3.0);
  const MatrixD Q = randn(rng, 50, 4);
  const MatrixD analytic = agop([&](const VectorD& x) { return f.gradient(x); }, Q);
  MatrixD fdsum = MatrixD::Zero(4, 4);
  for (int i = 0; i < 50; ++i) {
    VectorD g(4);
    const VectorD x = Q.row(i).transpose();
    for (int j = 0; j < 4; ++j) {
      VectorD e = VectorD::Zero(4);
      e(j) = 1e-5;
      g(j) = (f(x + e) - f(x - e)) / 2e-5;
    }
    fdsum += g * g.transpose() / 50.0;
  }
  CHECK((analytic - fdsum).norm() / fdsum.norm() <= 1e-3);
  CHECK((analytic - analytic.transpose()).norm() == 0.0);
}

TEST_CASE("top eigenvector") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const MatrixD A = randn(rng, 10, 10);
    const MatrixD S = A * A.transpose();
    const auto e = top_eigenvector(S, trial);
    Eigen::SelfAdjointEigenSolver<MatrixD> es(S);
    CHECK(e.residual <= 1e-6);
    CHECK(e.value == doctest::Approx(es.eigenvalues()(9)).epsilon(1e-8));
    CHECK(std::abs(cosine(e.vector, es.eigenvectors().col(9))) > 1 - 1e-6);
  }
  // nearly repeated top eigenvalue falls back to the dense solver
  VectorD d(4);
  d << 1.0, 1.0 - 1e-12, 0.5, 0.1;
  const auto e = top_eigenvector(d.asDiagonal().toDenseMatrix(), 1, 1e-8, 50);
  CHECK(e.residual <= 1e-8);
  CHECK(kind_of([] { top_eigenvector(MatrixD::Zero(3, 3)); }) == ErrorKind::DegenerateDirection);
}

TEST_CASE("rfm") {
  std::mt19937_64 rng(9);
  // planted linear direction
  const MatrixD X = randn(rng, 200, 10);
  const VectorD ws = randv(rng, 10);
  const auto data = make(X, X * ws);
  RfmOptions o;
  o.iterations = 3;
  const auto [cv, state] = rfm(data, o);
  CHECK(std::abs(cosine(cv.direction, ws)) >= 0.99);
  CHECK(cosine(cv.direction, ws) > 0);
  Eigen::SelfAdjointEigenSolver<MatrixD> es(state.M);
  CHECK((state.M - state.M.transpose()).norm() == 0.0);
  CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  CHECK(cv.hyperparams.at("eigen_residual").get<double>() <= 1e-6);

  // zero iterations: M = I and plain Laplace kernel ridge
  RfmOptions z;
  z.iterations = 0;
  const auto s0 = rfm_fit(data, z);
  CHECK((s0.M - MatrixD::Identity(10, 10)).norm() == 0.0);
  const auto kr = fit_kernel_ridge(X, data.y, MatrixD::Identity(10, 10), z.bandwidth, z.ridge);
  CHECK((s0.alpha - kr.alpha()).norm() < 1e-12);
  CHECK_THROWS_AS(rfm(data, z), Error);

  const auto sel = rfm_select(data, o);
  CHECK(sel.first.hyperparams.contains("grid"));
  CHECK(std::abs(cosine(sel.first.direction, ws)) >= 0.99);
}

TEST_CASE("orientation") {
  std::mt19937_64 rng(10);
  const MatrixD X = randn(rng, 30, 4);
  const VectorD v = randv(rng, 4).normalized();
  const VectorD s = X * v;
  VectorD inc = s, dec = -s;
  CHECK(orient(v, X, (inc.array().exp()).matrix()).sign == 1);
  CHECK(orient(v, X, (dec.array().exp()).matrix()).sign == -1);
  for (int trial = 0; trial < 100; ++trial) {
    const VectorD y = randv(rng, 30);
    const VectorD u = randv(rng, 4).normalized();
    const VectorD p = X * u;
    const double r = ((p.array() - p.mean()) * (y.array() - y.mean())).sum();
    const auto o = orient(u, X, y);
    CHECK(o.sign == (r < 0 ? -1 : 1));
    CHECK((o.vector - o.sign * u).norm() == 0.0);
  }
}

TEST_CASE("preprocess") {
  std::mt19937_64 rng(11);
  auto d = make(randn(rng, 3, 4), (VectorD(3) << 0.0, 0.2, 0.4).finished());
  const auto p = preprocess(d, PreprocessFlags{true, true});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p.X.row(i).norm() - 1.0) <= 1e-8);
  CHECK(p.y(0) == doctest::Approx(0.0));
  CHECK(p.y(1) == doctest::Approx(0.5));
  CHECK(p.y(2) == doctest::Approx(1.0));
  const VectorD back = denormalized_labels(p);
  CHECK((back - d.y).norm() < 1e-12);
  // composes
  const auto q = preprocess(p, PreprocessFlags{false, true});
  CHECK((denormalized_labels(q) - d.y).norm() < 1e-12);

  auto zero = d;
  zero.X.row(1).setZero();
  CHECK(kind_of([&] { preprocess(zero, PreprocessFlags{true, false}); }) == ErrorKind::ZeroRow);
}

TEST_CASE("vector bundle round trip") {
  std::mt19937_64 rng(12);
  VectorBundle b;
  b.concept_id = "c";
  b.method = "rfm";
  for (int blk = 1; blk <= 3; ++blk) {
    ConceptVector cv;
    cv.direction = randv(rng, 6).normalized();
    cv.block = blk;
    cv.method = "rfm";
    b.blocks.push_back(cv);
  }
  const auto dir = std::filesystem::temp_directory_path() / "attnsteer_bundle_test";
  std::filesystem::create_directories(dir);
  save_vector_bundle(b, dir / "c.json");
  const auto back = load_vector_bundle(dir / "c.json");
  REQUIRE(back.blocks.size() == 3);
  for (int blk = 1; blk <= 3; ++blk)
    CHECK((back.at(blk).direction - b.at(blk).direction).norm() < 1e-6);
  std::filesystem::remove_all(dir);
}
