#include "attnsteer/extraction.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

namespace attnsteer {

namespace {

constexpr double kPsdTolerance = 1e-8;

bool all_finite(const MatrixD& m) { return m.allFinite(); }

std::vector<Eigen::Index> seeded_permutation(Eigen::Index n, std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
  }
  return idx;
}

MatrixD take_rows(const MatrixD& X, std::span<const Eigen::Index> rows) {
  MatrixD out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

VectorD take(const VectorD& y, std::span<const Eigen::Index> rows) {
  VectorD out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(rows[i]);
  return out;
}

struct Split {
  std::vector<Eigen::Index> train, holdout;
};

Split split_indices(Eigen::Index n, std::uint64_t seed, double holdout_fraction) {
  auto perm = seeded_permutation(n, seed);
  Eigen::Index n_hold = static_cast<Eigen::Index>(std::llround(holdout_fraction * static_cast<double>(n)));
  n_hold = std::clamp<Eigen::Index>(n_hold, 1, n - 1);
  Split s;
  s.holdout.assign(perm.begin(), perm.begin() + n_hold);
  s.train.assign(perm.begin() + n_hold, perm.end());
  return s;
}

ConceptVector finish(const VectorD& raw, const LabeledEmbeddings& data, std::string method, json hyperparams) {
  const double norm = raw.norm();
  if (!(norm >= 1e-10) || !raw.allFinite()) fail(ErrorKind::DegenerateDirection, method + " produced a null direction");
  const Orientation o = orient(raw / norm, data.X, data.y);
  ConceptVector cv;
  cv.direction = o.vector;
  cv.block = data.block;
  cv.method = std::move(method);
  cv.orientation = o.sign;
  cv.pearson = o.pearson;
  cv.ambiguous_orientation = o.ambiguous;
  hyperparams["l2_rows"] = data.l2_rows;
  hyperparams["minmax_labels"] = data.minmax_labels;
  cv.hyperparams = std::move(hyperparams);
  return cv;
}

// Square-root factor R with M = R R^T, after checking M is symmetric PSD.
MatrixD psd_factor(const MatrixD& M) {
  require(M.rows() == M.cols(), ErrorKind::ShapeMismatch, "metric must be square");
  const double scale = std::max(1.0, M.cwiseAbs().maxCoeff());
  if (((M - M.transpose()).cwiseAbs().maxCoeff()) > kPsdTolerance * scale) {
    fail(ErrorKind::NegativeQuadraticForm, "metric is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<MatrixD> es(0.5 * (M + M.transpose()));
  VectorD lambda = es.eigenvalues();
  if (lambda.minCoeff() < -kPsdTolerance * scale) {
    fail(ErrorKind::NegativeQuadraticForm, "metric has eigenvalue " + std::to_string(lambda.minCoeff()));
  }
  lambda = lambda.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * lambda.asDiagonal();
}

// Pairwise distances between rows of already-factored point sets.
MatrixD pairwise_distances(const MatrixD& A, const MatrixD& B, bool symmetric) {
  MatrixD D(A.rows(), B.rows());
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    const Eigen::Index j0 = symmetric ? i : 0;
    for (Eigen::Index j = j0; j < B.rows(); ++j) {
      const double d = (A.row(i) - B.row(j)).norm();
      D(i, j) = d;
      if (symmetric) D(j, i) = d;
    }
  }
  return D;
}

}  // namespace

bool LabeledEmbeddings::hard_labels() const {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) return false;
  }
  return true;
}

void LabeledEmbeddings::validate() const {
  require(X.rows() >= 2, ErrorKind::InvalidArgument, "need at least two labeled embeddings");
  require(y.size() == X.rows(), ErrorKind::ShapeMismatch, "one label per embedding row required");
  require(X.cols() >= 1, ErrorKind::ShapeMismatch, "embeddings have no columns");
  require(all_finite(X) && y.allFinite(), ErrorKind::InvalidArgument, "non-finite embeddings or labels");
  if (y.maxCoeff() == y.minCoeff()) fail(ErrorKind::ConstantLabels, "labels take a single value");
}

LabeledEmbeddings preprocess(const LabeledEmbeddings& data, PreprocessFlags flags) {
  LabeledEmbeddings out = data;
  if (flags.l2_rows) {
    for (Eigen::Index i = 0; i < out.X.rows(); ++i) {
      const double n = out.X.row(i).norm();
      if (n == 0.0) fail(ErrorKind::ZeroRow, "row " + std::to_string(i) + " has zero norm");
      out.X.row(i) /= n;
    }
    out.l2_rows = true;
  }
  if (flags.minmax_labels) {
    const double lo = out.y.minCoeff(), hi = out.y.maxCoeff();
    if (hi == lo) fail(ErrorKind::ConstantLabels, "cannot min-max constant labels");
    out.y = (out.y.array() - lo) / (hi - lo);
    // Compose with any earlier normalization so de-normalization stays exact.
    const double range = out.label_max - out.label_min;
    const double base = out.label_min;
    if (out.minmax_labels) {
      out.label_min = base + lo * range;
      out.label_max = base + hi * range;
    } else {
      out.label_min = lo;
      out.label_max = hi;
    }
    out.minmax_labels = true;
  }
  return out;
}

VectorD denormalized_labels(const LabeledEmbeddings& data) {
  if (!data.minmax_labels) return data.y;
  return (data.label_min + data.y.array() * (data.label_max - data.label_min)).matrix();
}

Orientation orient(const VectorD& v, const MatrixD& X, const VectorD& y) {
  require(v.size() == X.cols() && y.size() == X.rows(), ErrorKind::ShapeMismatch, "orient: shape mismatch");
  require(v.norm() > 0.0, ErrorKind::DegenerateDirection, "cannot orient a zero vector");
  const VectorD s = X * v;
  const double ym = y.mean(), sm = s.mean();
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double a = s(i) - sm, b = y(i) - ym;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (syy == 0.0) fail(ErrorKind::ConstantLabels, "Pearson orientation needs non-constant labels");
  const double rho = sxx == 0.0 ? 0.0 : sxy / std::sqrt(sxx * syy);
  Orientation o;
  o.ambiguous = rho == 0.0;
  o.sign = rho < 0.0 ? -1 : 1;
  o.vector = o.sign * v;
  o.pearson = std::abs(rho);
  return o;
}

EigenPair top_eigenvector(const MatrixD& S, std::uint64_t seed, double tolerance, int max_iterations) {
  require(S.rows() == S.cols() && S.rows() > 0, ErrorKind::ShapeMismatch, "eigenproblem needs a square matrix");
  require(S.allFinite(), ErrorKind::NonFiniteGradient, "non-finite matrix in eigenproblem");
  const double fro = S.norm();
  if (fro < 1e-300) fail(ErrorKind::DegenerateDirection, "matrix is zero");
  const Eigen::Index k = S.rows();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  VectorD v(k);
  for (Eigen::Index i = 0; i < k; ++i) v(i) = normal(rng);
  v.normalize();

  EigenPair out;
  for (int it = 1; it <= max_iterations; ++it) {
    VectorD w = S * v;
    const double lambda = v.dot(w);
    const double residual = (w - lambda * v).norm() / fro;
    if (residual <= tolerance) {
      out = EigenPair{lambda, v, residual, it};
      return out;
    }
    const double wn = w.norm();
    if (wn == 0.0) {
      // Start vector fell in the null space; nudge it.
      for (Eigen::Index i = 0; i < k; ++i) v(i) += 1e-3 * normal(rng);
      v.normalize();
      continue;
    }
    v = w / wn;
  }

  // Tiny spectral gap: use the dense solver, keep the power-iteration sign.
  spdlog::debug("power iteration stalled after {} steps, using dense eigensolver", max_iterations);
  Eigen::SelfAdjointEigenSolver<MatrixD> es(0.5 * (S + S.transpose()));
  VectorD u = es.eigenvectors().col(k - 1);
  if (u.dot(v) < 0.0) u = -u;
  const double lambda = es.eigenvalues()(k - 1);
  const double residual = (S * u - lambda * u).norm() / fro;
  if (!(residual <= tolerance)) {
    fail(ErrorKind::NonConvergedEigenvector, "eigen residual " + std::to_string(residual));
  }
  return EigenPair{lambda, u, residual, max_iterations};
}

ConceptVector diff_in_means(const LabeledEmbeddings& data) {
  data.validate();
  const Eigen::Index k = data.X.cols();
  VectorD mc = VectorD::Zero(k), m0 = VectorD::Zero(k);
  Eigen::Index nc = 0, n0 = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    if (data.y(i) > 0.0) {
      mc += data.X.row(i).transpose();
      ++nc;
    } else {
      m0 += data.X.row(i).transpose();
      ++n0;
    }
  }
  if (nc == 0 || n0 == 0) fail(ErrorKind::UnbalancedClasses, "diff-in-means needs both label groups");
  const VectorD diff = mc / static_cast<double>(nc) - m0 / static_cast<double>(n0);
  if (diff.norm() < 1e-10) fail(ErrorKind::DegenerateDirection, "group means coincide");
  return finish(diff, data, "diff_in_means", json{{"n_concept", nc}, {"n_baseline", n0}});
}

ConceptVector pca_pairs(const LabeledEmbeddings& data, std::uint64_t pairing_seed) {
  data.validate();
  std::vector<Eigen::Index> pos, neg;
  for (Eigen::Index i = 0; i < data.size(); ++i) (data.y(i) > 0.0 ? pos : neg).push_back(i);
  if (pos.size() != neg.size()) {
    fail(ErrorKind::UnbalancedClasses,
         std::to_string(pos.size()) + " concept rows vs " + std::to_string(neg.size()) + " baseline rows");
  }
  const auto perm = seeded_permutation(static_cast<Eigen::Index>(neg.size()), pairing_seed);
  MatrixD Z(static_cast<Eigen::Index>(pos.size()), data.X.cols());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    Z.row(static_cast<Eigen::Index>(i)) = data.X.row(pos[i]) - data.X.row(neg[static_cast<std::size_t>(perm[i])]);
  }
  if (Z.norm() < 1e-10) fail(ErrorKind::DegenerateDirection, "all pair differences vanish");
  const MatrixD G = Z.transpose() * Z;
  const EigenPair top = top_eigenvector(G, pairing_seed);
  return finish(top.vector, data, "pca",
                json{{"pairing_seed", pairing_seed},
                     {"interpretation", "dominant right-singular direction of Z"},
                     {"eigenvalue", top.value},
                     {"residual", top.residual}});
}

VectorD ridge_solve(const MatrixD& X, const VectorD& y, double C) {
  require(C >= 0.0, ErrorKind::InvalidArgument, "ridge penalty must be non-negative");
  require(X.rows() == y.size(), ErrorKind::ShapeMismatch, "ridge: one label per row");
  const Eigen::Index n = X.rows(), k = X.cols();
  MatrixD A(n + k, k);
  A.topRows(n) = X;
  A.bottomRows(k) = std::sqrt(C) * MatrixD::Identity(k, k);
  VectorD b = VectorD::Zero(n + k);
  b.head(n) = y;
  Eigen::ColPivHouseholderQR<MatrixD> qr(A);
  if (qr.rank() < k) {
    fail(ErrorKind::SingularSystem,
         "rank " + std::to_string(qr.rank()) + " < " + std::to_string(k) + " at C = " + std::to_string(C));
  }
  return qr.solve(b);
}

ConceptVector ridge_regression(const LabeledEmbeddings& data, const GridOptions& options) {
  data.validate();
  require(!options.grid.empty(), ErrorKind::InvalidArgument, "empty ridge grid");
  const Split split = split_indices(data.size(), options.split_seed, options.holdout_fraction);
  const MatrixD Xtr = take_rows(data.X, split.train), Xho = take_rows(data.X, split.holdout);
  const VectorD ytr = take(data.y, split.train), yho = take(data.y, split.holdout);
  const double ss_tot = (yho.array() - yho.mean()).square().sum();

  json scores = json::array();
  double best_score = -std::numeric_limits<double>::infinity();
  double best_C = std::numeric_limits<double>::quiet_NaN();
  for (double C : options.grid) {
    VectorD w;
    try {
      w = ridge_solve(Xtr, ytr, C);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::SingularSystem) throw;
      spdlog::warn("ridge block {}: skipping C = {} ({})", data.block, C, e.what());
      scores.push_back(json{{"C", C}, {"skipped", true}});
      continue;
    }
    const double ss_res = (Xho * w - yho).squaredNorm();
    // Constant held-out labels leave R^2 undefined; rank by residual instead.
    const double score = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : -ss_res;
    scores.push_back(json{{"C", C}, {"heldout_r2", score}});
    if (score > best_score) {
      best_score = score;
      best_C = C;
    }
  }
  if (std::isnan(best_C)) fail(ErrorKind::SingularSystem, "every ridge grid point was singular");
  const VectorD w = ridge_solve(data.X, data.y, best_C);
  return finish(w, data, "ridge",
                json{{"C", best_C}, {"grid", scores}, {"split_seed", options.split_seed},
                     {"holdout_fraction", options.holdout_fraction}, {"criterion", "heldout_r2"}});
}

namespace {

double log1pexp(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logistic_objective(const MatrixD& X, const VectorD& y, double C, const VectorD& w) {
  const VectorD z = X * w;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) loss += log1pexp(z(i)) - y(i) * z(i);
  return 0.5 * w.squaredNorm() + C * loss;
}

}  // namespace

VectorD logistic_fit(const MatrixD& X, const VectorD& y, double C, int max_iterations, double tolerance) {
  require(C > 0.0, ErrorKind::InvalidArgument, "logistic C must be positive");
  const Eigen::Index k = X.cols();
  VectorD w = VectorD::Zero(k);
  double f = logistic_objective(X, y, C, w);
  for (int it = 0; it < max_iterations; ++it) {
    const VectorD z = X * w;
    VectorD p(z.size()), d(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      p(i) = sigmoid(z(i));
      d(i) = p(i) * (1.0 - p(i));
    }
    const VectorD grad = w + C * X.transpose() * (p - y);
    if (grad.norm() <= tolerance * (1.0 + C * static_cast<double>(X.rows()))) break;
    MatrixD H = C * X.transpose() * d.asDiagonal() * X;
    H.diagonal().array() += 1.0;
    const VectorD step = H.ldlt().solve(grad);
    // Backtracking keeps Newton monotone when the curvature is badly scaled.
    double t = 1.0;
    const double slope = grad.dot(step);
    VectorD w_new;
    double f_new = f;
    for (int ls = 0; ls < 60; ++ls) {
      w_new = w - t * step;
      f_new = logistic_objective(X, y, C, w_new);
      if (f_new <= f - 1e-4 * t * slope) break;
      t *= 0.5;
    }
    if (!(f_new < f)) break;
    w = w_new;
    f = f_new;
  }
  return w;
}

ConceptVector logistic_regression(const LabeledEmbeddings& data, const GridOptions& options) {
  data.validate();
  if (!data.hard_labels()) {
    fail(ErrorKind::SoftLabelsUnsupported, "logistic regression needs {0,1} labels; use ridge or rfm");
  }
  require(!options.grid.empty(), ErrorKind::InvalidArgument, "empty logistic grid");
  const Split split = split_indices(data.size(), options.split_seed, options.holdout_fraction);
  const MatrixD Xtr = take_rows(data.X, split.train), Xho = take_rows(data.X, split.holdout);
  const VectorD ytr = take(data.y, split.train), yho = take(data.y, split.holdout);

  json scores = json::array();
  double best_acc = -1.0, best_C = options.grid.front();
  for (double C : options.grid) {
    const VectorD w = logistic_fit(Xtr, ytr, C);
    const VectorD z = Xho * w;
    int correct = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) correct += ((z(i) > 0.0 ? 1.0 : 0.0) == yho(i));
    const double acc = static_cast<double>(correct) / static_cast<double>(z.size());
    scores.push_back(json{{"C", C}, {"heldout_accuracy", acc}});
    if (acc > best_acc) {
      best_acc = acc;
      best_C = C;
    }
  }
  const VectorD w = logistic_fit(data.X, data.y, best_C);
  return finish(w, data, "logistic",
                json{{"C", best_C}, {"grid", scores}, {"split_seed", options.split_seed},
                     {"holdout_fraction", options.holdout_fraction}, {"criterion", "heldout_accuracy"}});
}

double laplace_kernel(const VectorD& x, const VectorD& z, const MatrixD& M, double bandwidth) {
  require(bandwidth > 0.0, ErrorKind::InvalidArgument, "bandwidth must be positive");
  require(x.size() == z.size() && M.rows() == x.size(), ErrorKind::ShapeMismatch, "kernel shape mismatch");
  psd_factor(M);
  const VectorD d = x - z;
  const double q = d.dot(M * d);
  return std::exp(-std::sqrt(std::max(q, 0.0)) / bandwidth);
}

MatrixD laplace_kernel_matrix(const MatrixD& X, const MatrixD& Z, const MatrixD& M, double bandwidth) {
  require(bandwidth > 0.0, ErrorKind::InvalidArgument, "bandwidth must be positive");
  require(X.cols() == Z.cols() && M.rows() == X.cols(), ErrorKind::ShapeMismatch, "kernel shape mismatch");
  const MatrixD R = psd_factor(M);
  const MatrixD A = X * R;
  const bool symmetric = &X == &Z;
  const MatrixD D = pairwise_distances(A, symmetric ? A : MatrixD(Z * R), symmetric);
  return (-D.array() / bandwidth).exp().matrix();
}

KernelPredictor::KernelPredictor(MatrixD centers, VectorD alpha, MatrixD M, double bandwidth)
    : centers_(std::move(centers)), alpha_(std::move(alpha)), M_(std::move(M)), bandwidth_(bandwidth) {
  require(alpha_.size() == centers_.rows(), ErrorKind::ShapeMismatch, "one coefficient per center");
  require(M_.rows() == centers_.cols(), ErrorKind::ShapeMismatch, "metric/center mismatch");
  require(bandwidth_ > 0.0, ErrorKind::InvalidArgument, "bandwidth must be positive");
}

double KernelPredictor::operator()(const VectorD& x) const {
  double f = 0.0;
  for (Eigen::Index j = 0; j < centers_.rows(); ++j) {
    const VectorD d = x - centers_.row(j).transpose();
    f += alpha_(j) * std::exp(-std::sqrt(std::max(d.dot(M_ * d), 0.0)) / bandwidth_);
  }
  return f;
}

VectorD KernelPredictor::gradient(const VectorD& x) const {
  // d/dx exp(-||x-c||_M / L) = -K / (L ||x-c||_M) * M (x - c)
  VectorD acc = VectorD::Zero(x.size());
  for (Eigen::Index j = 0; j < centers_.rows(); ++j) {
    const VectorD d = x - centers_.row(j).transpose();
    const VectorD Md = M_ * d;
    const double dist = std::sqrt(std::max(d.dot(Md), 0.0));
    if (dist == 0.0) continue;
    const double kval = std::exp(-dist / bandwidth_);
    acc -= alpha_(j) * kval / (bandwidth_ * dist) * Md;
  }
  return acc;
}

MatrixD KernelPredictor::center_gradients() const {
  const MatrixD R = psd_factor(M_);
  const MatrixD A = centers_ * R;
  const MatrixD D = pairwise_distances(A, A, true);
  const Eigen::Index n = centers_.rows();
  MatrixD W(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = D(i, j);
      W(i, j) = d == 0.0 ? 0.0 : -alpha_(j) * std::exp(-d / bandwidth_) / (bandwidth_ * d);
    }
  }
  // g_i = R * sum_j W_ij (a_i - a_j), with rows a = R^T x.
  const VectorD row_sums = W.rowwise().sum();
  const MatrixD GA = row_sums.asDiagonal() * A - W * A;
  return GA * R.transpose();
}

KernelPredictor fit_kernel_ridge(const MatrixD& X, const VectorD& y, const MatrixD& M, double bandwidth, double ridge,
                                 double max_condition) {
  require(ridge >= 0.0, ErrorKind::InvalidArgument, "ridge must be non-negative");
  require(y.size() == X.rows(), ErrorKind::ShapeMismatch, "one label per row");
  MatrixD K = laplace_kernel_matrix(X, X, M, bandwidth);
  if (ridge == 0.0) {
    const VectorD ev = Eigen::SelfAdjointEigenSolver<MatrixD>(K, Eigen::EigenvaluesOnly).eigenvalues();
    const double lo = ev.minCoeff(), hi = ev.maxCoeff();
    const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (cond > max_condition) {
      fail(ErrorKind::IllConditionedKernel, "kernel condition estimate " + std::to_string(cond) + " at zero ridge");
    }
  }
  K.diagonal().array() += ridge;
  Eigen::LLT<MatrixD> llt(K);
  if (llt.info() != Eigen::Success) fail(ErrorKind::IllConditionedKernel, "kernel system is not positive definite");
  VectorD alpha = llt.solve(y);
  if (!alpha.allFinite()) fail(ErrorKind::IllConditionedKernel, "kernel solve produced non-finite coefficients");
  return KernelPredictor(X, std::move(alpha), M, bandwidth);
}

MatrixD agop(const MatrixD& gradients) {
  require(gradients.rows() > 0, ErrorKind::InvalidArgument, "AGOP of no points");
  if (!gradients.allFinite()) fail(ErrorKind::NonFiniteGradient, "non-finite predictor gradient");
  MatrixD G = gradients.transpose() * gradients / static_cast<double>(gradients.rows());
  return 0.5 * (G + G.transpose());
}

MatrixD agop(const std::function<VectorD(const VectorD&)>& gradient, const MatrixD& points) {
  require(points.rows() > 0, ErrorKind::InvalidArgument, "AGOP of no points");
  MatrixD G(points.rows(), points.cols());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const VectorD g = gradient(points.row(i).transpose());
    require(g.size() == points.cols(), ErrorKind::ShapeMismatch, "gradient dimension mismatch");
    G.row(i) = g.transpose();
  }
  return agop(G);
}

RfmState rfm_fit(const LabeledEmbeddings& data, const RfmOptions& options) {
  data.validate();
  require(options.iterations >= 0, ErrorKind::InvalidArgument, "iterations must be non-negative");
  require(options.bandwidth > 0.0, ErrorKind::InvalidArgument, "bandwidth must be positive");
  require(options.ridge >= 0.0, ErrorKind::InvalidArgument, "ridge must be non-negative");
  RfmState state;
  state.M = MatrixD::Identity(data.X.cols(), data.X.cols());
  state.bandwidth = options.bandwidth;
  state.ridge = options.ridge;
  for (int t = 0; t < options.iterations; ++t) {
    const KernelPredictor f = fit_kernel_ridge(data.X, data.y, state.M, options.bandwidth, options.ridge,
                                               options.max_condition);
    state.M = agop(f.center_gradients());
    ++state.iterations;
    spdlog::debug("rfm block {} iter {}: trace(M) = {:.4g}", data.block, t + 1, state.M.trace());
  }
  const KernelPredictor f = fit_kernel_ridge(data.X, data.y, state.M, options.bandwidth, options.ridge,
                                             options.max_condition);
  state.alpha = f.alpha();
  return state;
}

std::pair<ConceptVector, RfmState> rfm(const LabeledEmbeddings& data, const RfmOptions& options) {
  require(options.iterations >= 1, ErrorKind::InvalidArgument, "rfm needs at least one AGOP iteration");
  RfmState state = rfm_fit(data, options);
  const EigenPair top = top_eigenvector(state.M, options.eigen_seed);
  ConceptVector cv = finish(top.vector, data, "rfm",
                            json{{"bandwidth", options.bandwidth},
                                 {"ridge", options.ridge},
                                 {"iterations", options.iterations},
                                 {"eigenvalue", top.value},
                                 {"eigen_residual", top.residual}});
  return {std::move(cv), std::move(state)};
}

std::pair<ConceptVector, RfmState> rfm_select(const LabeledEmbeddings& data, const RfmOptions& options,
                                              const GridOptions& ridge_grid) {
  data.validate();
  require(!ridge_grid.grid.empty(), ErrorKind::InvalidArgument, "empty rfm ridge grid");
  const Split split = split_indices(data.size(), ridge_grid.split_seed, ridge_grid.holdout_fraction);
  LabeledEmbeddings train = data;
  train.X = take_rows(data.X, split.train);
  train.y = take(data.y, split.train);
  const MatrixD Xho = take_rows(data.X, split.holdout);
  const VectorD yho = take(data.y, split.holdout);
  const double ss_tot = (yho.array() - yho.mean()).square().sum();

  json scores = json::array();
  double best_score = -std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::quiet_NaN();
  for (double lambda : ridge_grid.grid) {
    RfmOptions o = options;
    o.ridge = lambda;
    RfmState st;
    try {
      st = rfm_fit(train, o);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::IllConditionedKernel) throw;
      spdlog::warn("rfm block {}: skipping ridge = {} ({})", data.block, lambda, e.what());
      scores.push_back(json{{"ridge", lambda}, {"skipped", true}});
      continue;
    }
    const KernelPredictor f(train.X, st.alpha, st.M, o.bandwidth);
    double ss_res = 0.0;
    for (Eigen::Index i = 0; i < Xho.rows(); ++i) {
      const double r = f(Xho.row(i).transpose()) - yho(i);
      ss_res += r * r;
    }
    const double score = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : -ss_res;
    scores.push_back(json{{"ridge", lambda}, {"heldout_r2", score}});
    if (score > best_score) {
      best_score = score;
      best = lambda;
    }
  }
  if (std::isnan(best)) fail(ErrorKind::IllConditionedKernel, "every rfm ridge grid point was ill-conditioned");
  RfmOptions o = options;
  o.ridge = best;
  auto out = rfm(data, o);
  out.first.hyperparams["grid"] = scores;
  out.first.hyperparams["split_seed"] = ridge_grid.split_seed;
  out.first.hyperparams["holdout_fraction"] = ridge_grid.holdout_fraction;
  out.first.hyperparams["criterion"] = "heldout_r2";
  return out;
}

const ConceptVector& VectorBundle::at(int block) const {
  require(block >= 1 && block <= static_cast<int>(blocks.size()), ErrorKind::InvalidArgument,
          "bundle has no block " + std::to_string(block));
  return blocks[static_cast<std::size_t>(block - 1)];
}

void save_vector_bundle(const VectorBundle& bundle, const fs::path& manifest_path) {
  require(!bundle.blocks.empty(), ErrorKind::InvalidArgument, "empty vector bundle");
  const Eigen::Index k = bundle.blocks.front().direction.size();
  std::vector<float> flat;
  flat.reserve(bundle.blocks.size() * static_cast<std::size_t>(k));
  json blocks = json::array();
  for (const auto& cv : bundle.blocks) {
    require(cv.direction.size() == k, ErrorKind::ShapeMismatch, "bundle vectors differ in size");
    for (Eigen::Index i = 0; i < k; ++i) flat.push_back(static_cast<float>(cv.direction(i)));
    blocks.push_back(json{{"block", cv.block},
                          {"method", cv.method},
                          {"orientation", cv.orientation},
                          {"pearson", cv.pearson},
                          {"ambiguous_orientation", cv.ambiguous_orientation},
                          {"hyperparams", cv.hyperparams}});
  }
  fs::path blob_path = manifest_path;
  blob_path.replace_extension(".vec");
  const json header{{"format", "attnsteer-vectors-v1"},
                    {"dtype", "float32"},
                    {"shape", {bundle.blocks.size(), k}}};
  write_blob(blob_path, header, pack_f32(flat));
  const json manifest{{"format", "attnsteer-vector-bundle-v1"},
                      {"concept_id", bundle.concept_id},
                      {"method", bundle.method},
                      {"n_blocks", bundle.blocks.size()},
                      {"dim", k},
                      {"blob", blob_path.filename().string()},
                      {"blob_sha256", sha256_file(blob_path)},
                      {"blocks", blocks},
                      {"provenance", bundle.provenance}};
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
}

VectorBundle load_vector_bundle(const fs::path& manifest_path) {
  const json manifest = json::parse(read_text_file(manifest_path));
  require(manifest.value("format", "") == "attnsteer-vector-bundle-v1", ErrorKind::IoError,
          "not a vector bundle: " + manifest_path.string());
  const fs::path blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  if (sha256_file(blob_path) != manifest.at("blob_sha256").get<std::string>()) {
    fail(ErrorKind::IoError, "vector blob hash mismatch: " + blob_path.string());
  }
  const Blob blob = read_blob(blob_path);
  const std::size_t L = manifest.at("n_blocks").get<std::size_t>();
  const std::size_t k = manifest.at("dim").get<std::size_t>();
  const auto flat = unpack_f32(blob.payload, 0, L * k);
  VectorBundle bundle;
  bundle.concept_id = manifest.at("concept_id").get<std::string>();
  bundle.method = manifest.at("method").get<std::string>();
  bundle.provenance = manifest.value("provenance", json::object());
  for (std::size_t b = 0; b < L; ++b) {
    const json& meta = manifest.at("blocks").at(b);
    ConceptVector cv;
    cv.direction.resize(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i) cv.direction(static_cast<Eigen::Index>(i)) = flat[b * k + i];
    cv.block = meta.at("block").get<int>();
    cv.method = meta.at("method").get<std::string>();
    cv.orientation = meta.at("orientation").get<int>();
    cv.pearson = meta.at("pearson").get<double>();
    cv.ambiguous_orientation = meta.at("ambiguous_orientation").get<bool>();
    cv.hyperparams = meta.at("hyperparams");
    bundle.blocks.push_back(std::move(cv));
  }
  return bundle;
}

}  // namespace attnsteer
