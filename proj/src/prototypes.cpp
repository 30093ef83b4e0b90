#include "sra/prototypes.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace sra {

void PrototypeSet::normalize() {
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const double n = vectors.row(i).norm();
    if (n > 0) vectors.row(i) /= n;
  }
}

PrototypeSet init_prototypes(int num_classes, int per_class_factor, int dim, std::uint64_t seed, PrototypeInit scheme,
                             const Matrix* samples) {
  if (dim < 1) throw std::invalid_argument("init_prototypes: dim must be >= 1");
  if (num_classes < 1 || per_class_factor < 1) throw std::invalid_argument("init_prototypes: empty prototype set");
  const int M = num_classes * per_class_factor;
  std::mt19937_64 rng(seed);
  PrototypeSet p;
  p.vectors.resize(M, dim);
  p.weights = Vector::Constant(M, 1.0 / M);

  if (scheme == PrototypeInit::SampleInit) {
    if (samples == nullptr || samples->rows() == 0 || samples->cols() != dim)
      throw std::invalid_argument("init_prototypes: sample_init needs a non-empty sample matrix of width dim");
    std::vector<Eigen::Index> idx(samples->rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < M; ++i) p.vectors.row(i) = samples->row(idx[i % idx.size()]);
  } else {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < p.vectors.size(); ++i) p.vectors.data()[i] = nd(rng);
  }
  p.normalize();
  return p;
}

Assignment assign(const Matrix& z, const PrototypeSet& protos, double epsilon, const SinkhornOptions& opts) {
  if (z.rows() < 1) throw std::invalid_argument("assign: empty batch");
  TransportProblem prob;
  prob.cost = pairwise_cost(z, protos.vectors, CostKind::OneMinusCosine);
  prob.a = Vector::Constant(z.rows(), 1.0 / double(z.rows()));
  prob.b = protos.weights;
  prob.epsilon = epsilon;
  SinkhornResult r = sinkhorn(prob, opts);

  Assignment out;
  out.coupling = std::move(r.coupling);
  out.transport_cost = r.transport_cost;
  out.converged = r.converged;
  out.hard.resize(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < out.coupling.cols(); ++j)
      if (out.coupling(i, j) > out.coupling(i, best)) best = static_cast<int>(j);
    out.hard[i] = best;
  }
  return out;
}

Var projection_loss(std::span<const Var> batches, Var prototype_vectors, const Vector& weights, double epsilon,
                    const SinkhornOptions& opts, std::vector<Assignment>* assignments) {
  if (batches.empty()) throw std::invalid_argument("projection_loss: no batches");
  Tape& tape = *prototype_vectors.tape();
  PrototypeSet current{prototype_vectors.value(), weights};
  Var pn = normalize_rows(prototype_vectors);
  Var total;
  for (const Var& z : batches) {
    if (z.rows() < 1) throw std::invalid_argument("projection_loss: empty batch");
    Assignment a = assign(z.value(), current, epsilon, opts);
    const double mass = a.coupling.sum();
    Var similarity = matmul_nt(normalize_rows(z), pn);
    Var term = add_scalar(scale(sum(mul(tape.constant(a.coupling), similarity)), -1.0), mass);
    total = total.tape() ? add(total, term) : term;
    if (assignments) assignments->push_back(std::move(a));
  }
  return total;
}

std::vector<int> subspace_of(const Matrix& z, const PrototypeSet& protos) {
  return nearest_rows(z, protos.vectors, CostKind::OneMinusCosine);
}

int subspace_of(const Vector& z, const PrototypeSet& protos) {
  Matrix row = z.transpose();
  return subspace_of(row, protos).front();
}

PrototypeSet spherical_kmeans(const Matrix& z, int k, std::uint64_t seed, int iters) {
  if (k < 1) throw std::invalid_argument("spherical_kmeans: k must be positive");
  if (z.rows() < k) throw std::invalid_argument("spherical_kmeans: fewer points than clusters");
  Matrix u = z;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double n = u.row(i).norm();
    if (n > 1e-12) u.row(i) /= n;
  }
  std::mt19937_64 rng(seed);
  PrototypeSet out;
  out.vectors.resize(k, u.cols());
  out.vectors.row(0) = u.row(std::uniform_int_distribution<Eigen::Index>(0, u.rows() - 1)(rng));
  // k-means++ on cosine distance
  Vector dist = (1.0 - (u * out.vectors.row(0).transpose()).array()).max(0.0).matrix();
  for (int c = 1; c < k; ++c) {
    Eigen::Index pick = 0;
    const double total = dist.sum();
    if (total <= 0.0) {
      pick = std::uniform_int_distribution<Eigen::Index>(0, u.rows() - 1)(rng);
    } else {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick < u.rows() - 1; ++pick) {
        r -= dist(pick);
        if (r <= 0.0) break;
      }
    }
    out.vectors.row(c) = u.row(pick);
    dist = dist.cwiseMin((1.0 - (u * out.vectors.row(c).transpose()).array()).max(0.0).matrix());
  }
  for (int it = 0; it < iters; ++it) {
    const std::vector<int> lab = nearest_rows(u, out.vectors, CostKind::OneMinusCosine);
    Matrix sums = Matrix::Zero(k, u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i) sums.row(lab[i]) += u.row(i);
    bool moved = false;
    for (int c = 0; c < k; ++c) {
      const double n = sums.row(c).norm();
      if (n < 1e-12) continue;
      const RowVector next = sums.row(c) / n;
      if ((next - out.vectors.row(c)).squaredNorm() > 1e-24) moved = true;
      out.vectors.row(c) = next;
    }
    if (!moved) break;
  }
  out.weights = Vector::Constant(k, 1.0 / k);
  return out;
}

Vector empirical_pi(const std::vector<int>& indices, int num_subspaces) {
  Vector pi = Vector::Zero(num_subspaces);
  for (int m : indices) {
    if (m < 0 || m >= num_subspaces) throw std::out_of_range("empirical_pi: index out of range");
    pi(m) += 1.0;
  }
  if (!indices.empty()) pi /= static_cast<double>(indices.size());
  return pi;
}

}  // namespace sra
