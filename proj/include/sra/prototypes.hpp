// Prototype distribution sum_i pi_i delta_{m_i} over the representation
// space, balanced Sinkhorn assignment of minibatches onto it, the projection
// loss, and the nearest-prototype subspace projector.

#pragma once

#include "sra/diffgraph.hpp"
#include "sra/divergence.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace sra {

struct PrototypeSet {
  Matrix vectors;  ///< M x d_z
  Vector weights;  ///< simplex over the M prototypes

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }
  void normalize();
};

enum class PrototypeInit { RandomUnit, SampleInit };

inline constexpr int kPrototypesPerClass = 16;

/// M = per_class_factor * num_classes unit vectors with uniform weights.
/// SampleInit draws (normalized) rows of `samples`.
PrototypeSet init_prototypes(int num_classes, int per_class_factor, int dim, std::uint64_t seed,
                             PrototypeInit scheme = PrototypeInit::RandomUnit, const Matrix* samples = nullptr);

struct Assignment {
  Matrix coupling;           ///< B x M; rows sum to 1/B, columns to pi
  std::vector<int> hard;     ///< row argmax, ties to the lowest index
  double transport_cost = 0.0;
  bool converged = true;
};

Assignment assign(const Matrix& z, const PrototypeSet& protos, double epsilon, const SinkhornOptions& opts = {});

/// sum_i <Gamma_i, 1 - cos(Z_i, P)>, with every Gamma_i solved on the current
/// values and held constant, so gradients reach the batches and prototypes
/// only through the cost.
Var projection_loss(std::span<const Var> batches, Var prototype_vectors, const Vector& weights, double epsilon,
                    const SinkhornOptions& opts = {}, std::vector<Assignment>* assignments = nullptr);

/// Nearest prototype under 1 - cosine; ties to the lowest index.
std::vector<int> subspace_of(const Matrix& z, const PrototypeSet& protos);
int subspace_of(const Vector& z, const PrototypeSet& protos);

/// Spherical k-means (cosine); k-means++ seeding, fixed iteration budget.
/// An emptied cluster keeps its previous center.
PrototypeSet spherical_kmeans(const Matrix& z, int k, std::uint64_t seed, int iters = 50);

/// Frequency of each subspace index among `indices`.
Vector empirical_pi(const std::vector<int>& indices, int num_subspaces);

}  // namespace sra
