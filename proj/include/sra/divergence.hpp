// Discrete Hellinger divergences, entropic optimal transport, a probe-based
// H-divergence proxy, and the quantized pipeline used to evaluate the
// Hellinger bound inequalities exactly on discrete pushforwards.

#pragma once

#include "sra/diffgraph.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sra {

// ---------------------------------------------------------------- Hellinger

struct DistributionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename Derived>
bool is_simplex(const Eigen::MatrixBase<Derived>& p, double tol = 1e-9) {
  if (p.size() == 0) return false;
  if (!p.allFinite() || (p.array() < 0).any()) return false;
  return std::abs(p.sum() - 1.0) <= tol;
}

/// A probability vector over a finite support. Entries >= 0, sum 1 +- 1e-9.
class DiscreteDist {
 public:
  explicit DiscreteDist(Vector p) : p_(std::move(p)) {
    if (!is_simplex(p_)) throw DistributionError("DiscreteDist: not a simplex vector");
  }
  const Vector& probs() const { return p_; }
  Eigen::Index size() const { return p_.size(); }

 private:
  Vector p_;
};

/// D_{1/2}(p, q) = 2 * sum_i (sqrt(p_i) - sqrt(q_i))^2, in [0, 4].
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar hellinger_sq(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
  if (p.size() != q.size())
    throw ShapeError("hellinger: support sizes differ (" + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()) + ")");
  using Scalar = typename DerivedP::Scalar;
  return Scalar(2) * (p.cwiseMax(Scalar(0)).cwiseSqrt() - q.cwiseMax(Scalar(0)).cwiseSqrt()).squaredNorm();
}

/// d_{1/2} = sqrt(D_{1/2}), in [0, 2].
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar hellinger_dist(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
  using std::sqrt;
  return sqrt(hellinger_sq(p, q));
}

inline double hellinger_sq(const DiscreteDist& p, const DiscreteDist& q) { return hellinger_sq(p.probs(), q.probs()); }
inline double hellinger_dist(const DiscreteDist& p, const DiscreteDist& q) { return hellinger_dist(p.probs(), q.probs()); }

/// Hellinger loss of a predicted simplex against the oracle posterior.
/// Bounded above by 4.
inline double hellinger_loss(const Vector& pred, const Vector& oracle) {
  if (pred.size() != oracle.size()) throw ShapeError("hellinger_loss: class counts differ");
  return hellinger_sq(pred, oracle);
}

/// Row-wise Hellinger loss averaged over rows.
double mean_hellinger_loss(const Matrix& pred, const Matrix& oracle);

// ----------------------------------------------------------------- costs

enum class CostKind { OneMinusCosine, SquaredEuclidean };

/// n x m cost between the rows of `a` and the rows of `b`.
Matrix pairwise_cost(const Matrix& a, const Matrix& b, CostKind kind);

/// Index of the lowest-cost codebook row for each row of `z`; ties resolve
/// to the lowest index.
std::vector<int> nearest_rows(const Matrix& z, const Matrix& codebook, CostKind kind);

// -------------------------------------------------------------- Sinkhorn

struct TransportProblem {
  Matrix cost;
  Vector a;
  Vector b;
  double epsilon = 0.05;
};

struct SinkhornOptions {
  int max_iters = 200;
  double tol = 1e-6;
  bool record_history = false;
};

struct SinkhornResult {
  Matrix coupling;
  double transport_cost = 0.0;
  int iterations = 0;
  double marginal_error = 0.0;  ///< L1 residual of row sums vs a
  bool converged = false;
  std::vector<double> cost_history;
};

/// Entropic OT. Uses scaling updates when the Gibbs kernel is representable
/// and log-domain updates otherwise. Zero-mass rows/columns are removed
/// before solving and re-inserted as zero rows/columns of the coupling.
SinkhornResult sinkhorn(const TransportProblem& problem, const SinkhornOptions& opts = {});

/// Entropic OT cost between uniform empirical measures on the two point sets.
double wasserstein_empirical(const Matrix& za, const Matrix& zb, CostKind kind, double epsilon,
                             const SinkhornOptions& opts = {});

// ------------------------------------------------------- H-divergence proxy

struct ProbeConfig {
  int hidden = 32;
  int steps = 200;
  double lr = 1e-2;
  double train_fraction = 0.5;
};

/// Trains a one-hidden-layer probe to separate za from zb and returns
/// max(0, 2 * balanced held-out accuracy - 1).
double h_divergence_proxy(const Matrix& za, const Matrix& zb, const ProbeConfig& cfg, std::uint64_t seed);

// -------------------------------------------------------- quantized pipeline

/// g_q: nearest codebook row of the representation.
struct QuantizedEncoder {
  Matrix codebook;
  CostKind kind = CostKind::OneMinusCosine;

  int num_cells() const { return static_cast<int>(codebook.rows()); }
  std::vector<int> operator()(const Matrix& z) const { return nearest_rows(z, codebook, kind); }
};

inline QuantizedEncoder quantize_encoder(const Matrix& prototypes, CostKind kind = CostKind::OneMinusCosine) {
  if (prototypes.rows() == 0) throw std::invalid_argument("quantize_encoder: empty prototype set");
  return QuantizedEncoder{prototypes, kind};
}

/// One environment seen through g_q: cell index and oracle posterior per sample.
struct QuantizedDomain {
  int domain = 0;
  std::vector<int> cells;
  Matrix oracle_posterior;  ///< n x C
};

/// h_q: cell -> average oracle posterior of its pooled samples (uniform for
/// empty cells).
Matrix fit_quantized_head(const std::vector<QuantizedDomain>& pooled, int num_cells, int num_classes);

// ----------------------------------------------------------- bound records

struct BoundRecord {
  std::string theorem;
  int domain_a = -1;
  int domain_b = -1;
  int subspace = -1;
  double lhs = 0.0;
  std::vector<std::pair<std::string, double>> rhs_terms;
  double rhs = 0.0;
  double tolerance = 1e-9;
  bool satisfied = true;

  double term(const std::string& name) const;
};

inline constexpr double kBoundSlack = 1e-9;
inline constexpr double kHellingerLossBound = 4.0;

/// Cell histogram of a quantized domain.
Vector cell_distribution(const QuantizedDomain& d, int num_cells);
/// Mean Hellinger loss of h_q o g_q against the oracle posterior.
double quantized_loss(const Matrix& head, const QuantizedDomain& d);
/// Label marginal as the mean oracle posterior.
Vector label_marginal(const QuantizedDomain& d);

/// d(P_Y^a, P_Y^b) <= L(f, a)^{1/2} + d(g#a, g#b) + L(f, b)^{1/2}
BoundRecord bound_lower(const Matrix& head, const QuantizedDomain& a, const QuantizedDomain& b,
                        double tol = kBoundSlack);

/// L(f, a) <= L(f, b) + L sqrt(2) d(g#a, g#b)
BoundRecord bound_upper(const Matrix& head, const QuantizedDomain& a, const QuantizedDomain& b,
                        double loss_bound = kHellingerLossBound, double tol = kBoundSlack);

struct SubspaceBoundReport {
  BoundRecord decomposition;          ///< part (i), summed over ordered domain pairs
  std::vector<BoundRecord> per_subspace;  ///< part (ii), per subspace and pair
  std::vector<Vector> mixture_weights;    ///< pi^e over subspaces, per domain
};

/// Subspace decomposition with subspaces A_m = {x : subspace_of_cell[g_q(x)] = m}.
SubspaceBoundReport bound_subspace(const Matrix& head, const std::vector<int>& subspace_of_cell, int num_subspaces,
                                   const std::vector<QuantizedDomain>& domains,
                                   double loss_bound = kHellingerLossBound, double tol = kBoundSlack);

}  // namespace sra
