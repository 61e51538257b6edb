#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "attnsteer/common.hpp"
#include "attnsteer/io.hpp"

namespace attnsteer {

/// Selected token embeddings at one block with their labels. Hard labels are
/// {0,1}; soft labels lie in [0,1] and are 0 for every unprefixed prompt.
struct LabeledEmbeddings {
  MatrixD X;  // n x k
  VectorD y;  // n
  int block = 0;
  bool l2_rows = false;
  bool minmax_labels = false;
  double label_min = 0.0;  // y_raw = label_min + y * (label_max - label_min) when minmax_labels
  double label_max = 1.0;

  Eigen::Index size() const noexcept { return X.rows(); }
  bool hard_labels() const;
  void validate() const;
};

struct PreprocessFlags {
  bool l2_rows = false;
  bool minmax_labels = false;
};

LabeledEmbeddings preprocess(const LabeledEmbeddings& data, PreprocessFlags flags);
VectorD denormalized_labels(const LabeledEmbeddings& data);

struct Orientation {
  VectorD vector;
  int sign = 1;
  double pearson = 0.0;  // correlation after orientation (>= 0)
  bool ambiguous = false;
};

/// sign(rho) * v for rho = Pearson(<x_i, v>, y_i); rho == 0 keeps the sign and flags ambiguity.
Orientation orient(const VectorD& v, const MatrixD& X, const VectorD& y);

struct ConceptVector {
  VectorD direction;  // unit norm
  int block = 0;
  std::string method;
  int orientation = 1;
  double pearson = 0.0;
  bool ambiguous_orientation = false;
  json hyperparams = json::object();
};

struct EigenPair {
  double value = 0.0;
  VectorD vector;
  double residual = 0.0;  // ||S v - value v|| / ||S||_F
  int iterations = 0;
};

/// Dominant eigenpair of a symmetric PSD matrix by seeded power iteration,
/// finished with Rayleigh-quotient refinement when the spectral gap is small.
EigenPair top_eigenvector(const MatrixD& S, std::uint64_t seed = 0, double tolerance = 1e-8,
                          int max_iterations = 20000);

ConceptVector diff_in_means(const LabeledEmbeddings& data);
ConceptVector pca_pairs(const LabeledEmbeddings& data, std::uint64_t pairing_seed);

struct GridOptions {
  std::vector<double> grid;
  std::uint64_t split_seed = 0;
  double holdout_fraction = 0.2;
};

inline GridOptions default_ridge_grid() { return GridOptions{{1e-4, 1e-3, 1e-2, 1e-1, 0.0, 1.0, 10.0}, 0, 0.2}; }
inline GridOptions default_logistic_grid() { return GridOptions{{1000.0, 10.0, 1.0, 0.1}, 0, 0.2}; }

/// argmin ||Xw - y||^2 + C ||w||^2 via a QR solve of the stacked system.
VectorD ridge_solve(const MatrixD& X, const VectorD& y, double C);
ConceptVector ridge_regression(const LabeledEmbeddings& data, const GridOptions& options = default_ridge_grid());

/// No-intercept logistic fit of 0.5||w||^2 + C * sum logloss by damped Newton steps.
VectorD logistic_fit(const MatrixD& X, const VectorD& y, double C, int max_iterations = 200, double tolerance = 1e-9);
ConceptVector logistic_regression(const LabeledEmbeddings& data, const GridOptions& options = default_logistic_grid());

// Laplace kernel exp(-sqrt((x-z)^T M (x-z)) / bandwidth).
double laplace_kernel(const VectorD& x, const VectorD& z, const MatrixD& M, double bandwidth);
MatrixD laplace_kernel_matrix(const MatrixD& X, const MatrixD& Z, const MatrixD& M, double bandwidth);

/// f(x) = sum_j alpha_j K_M(x_j, x).
class KernelPredictor {
 public:
  KernelPredictor(MatrixD centers, VectorD alpha, MatrixD M, double bandwidth);

  double operator()(const VectorD& x) const;
  VectorD gradient(const VectorD& x) const;
  // Gradient at each center; the non-differentiable self term is dropped.
  MatrixD center_gradients() const;

  const VectorD& alpha() const noexcept { return alpha_; }
  const MatrixD& metric() const noexcept { return M_; }

 private:
  MatrixD centers_;
  VectorD alpha_;
  MatrixD M_;
  double bandwidth_;
};

KernelPredictor fit_kernel_ridge(const MatrixD& X, const VectorD& y, const MatrixD& M, double bandwidth, double ridge,
                                 double max_condition = 1e12);

/// (1/n) sum_i g_i g_i^T for gradient rows g_i.
MatrixD agop(const MatrixD& gradients);
MatrixD agop(const std::function<VectorD(const VectorD&)>& gradient, const MatrixD& points);

struct RfmOptions {
  double bandwidth = 10.0;
  double ridge = 1e-3;
  int iterations = 5;
  double max_condition = 1e12;
  std::uint64_t eigen_seed = 0;
};

struct RfmState {
  MatrixD M;
  VectorD alpha;  // kernel ridge coefficients fitted with M
  double bandwidth = 0.0;
  double ridge = 0.0;
  int iterations = 0;
};

/// Alternates kernel ridge fits and AGOP metric updates. iterations == 0
/// returns M = I and the plain Laplace kernel ridge fit.
RfmState rfm_fit(const LabeledEmbeddings& data, const RfmOptions& options);
std::pair<ConceptVector, RfmState> rfm(const LabeledEmbeddings& data, const RfmOptions& options = {});

inline GridOptions default_rfm_ridge_grid() { return GridOptions{{1e-3, 1e-2, 1e-1, 1.0}, 0, 0.2}; }

/// rfm with the ridge picked from `ridge_grid` by held-out R^2 (same split rule
/// as ridge_regression), then refitted on all rows. options.ridge is ignored.
std::pair<ConceptVector, RfmState> rfm_select(const LabeledEmbeddings& data, const RfmOptions& options,
                                              const GridOptions& ridge_grid = default_rfm_ridge_grid());

/// Per-concept set of block vectors, stored as a JSON manifest plus an L x k float32 blob.
struct VectorBundle {
  std::string concept_id;
  std::string method;
  std::vector<ConceptVector> blocks;  // blocks[b-1]
  json provenance = json::object();

  const ConceptVector& at(int block) const;
};

void save_vector_bundle(const VectorBundle& bundle, const fs::path& manifest_path);
VectorBundle load_vector_bundle(const fs::path& manifest_path);

}  // namespace attnsteer
