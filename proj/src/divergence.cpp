#include "sra/divergence.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

namespace sra {

double mean_hellinger_loss(const Matrix& pred, const Matrix& oracle) {
  if (pred.rows() != oracle.rows() || pred.cols() != oracle.cols())
    throw ShapeError("mean_hellinger_loss: shapes differ");
  if (pred.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) total += hellinger_sq(pred.row(i), oracle.row(i));
  return total / static_cast<double>(pred.rows());
}

// -------------------------------------------------------------------- costs

Matrix pairwise_cost(const Matrix& a, const Matrix& b, CostKind kind) {
  if (a.cols() != b.cols()) throw ShapeError("pairwise_cost: point dimensions differ");
  switch (kind) {
    case CostKind::OneMinusCosine: {
      Vector na = a.rowwise().norm().cwiseMax(1e-12).cwiseInverse();
      Vector nb = b.rowwise().norm().cwiseMax(1e-12).cwiseInverse();
      Matrix cos = na.asDiagonal() * (a * b.transpose()) * nb.asDiagonal();
      return (1.0 - cos.array()).matrix();
    }
    case CostKind::SquaredEuclidean: {
      Vector sa = a.rowwise().squaredNorm();
      Vector sb = b.rowwise().squaredNorm();
      Matrix c = (-2.0 * a * b.transpose()).colwise() + sa;
      c.rowwise() += sb.transpose();
      return c.cwiseMax(0.0);
    }
  }
  throw std::logic_error("unknown cost kind");
}

std::vector<int> nearest_rows(const Matrix& z, const Matrix& codebook, CostKind kind) {
  if (codebook.rows() == 0) throw std::invalid_argument("nearest_rows: empty codebook");
  Matrix cost = pairwise_cost(z, codebook, kind);
  std::vector<int> idx(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < cost.cols(); ++j)
      if (cost(i, j) < cost(i, best)) best = static_cast<int>(j);
    idx[i] = best;
  }
  return idx;
}

// ----------------------------------------------------------------- Sinkhorn

namespace {

double log_sum_exp(const Eigen::Ref<const Vector>& v) {
  const double c = v.maxCoeff();
  if (!std::isfinite(c)) return c;
  return c + std::log((v.array() - c).exp().sum());
}

SinkhornResult sinkhorn_scaling(const Matrix& cost, const Vector& a, const Vector& b, double eps,
                                const SinkhornOptions& opts) {
  const double shift = cost.minCoeff();
  Matrix kernel = (-(cost.array() - shift) / eps).exp().matrix();
  Vector u = Vector::Ones(a.size());
  Vector v = Vector::Ones(b.size());
  SinkhornResult r;
  for (int it = 1; it <= opts.max_iters; ++it) {
    u = a.cwiseQuotient(kernel * v);
    v = b.cwiseQuotient(kernel.transpose() * u);
    r.iterations = it;
    r.marginal_error = (u.cwiseProduct(kernel * v) - a).lpNorm<1>();
    if (opts.record_history)
      r.cost_history.push_back((u.asDiagonal() * kernel * v.asDiagonal()).cwiseProduct(cost).sum());
    if (r.marginal_error < opts.tol) {
      r.converged = true;
      break;
    }
  }
  r.coupling = u.asDiagonal() * kernel * v.asDiagonal();
  return r;
}

SinkhornResult sinkhorn_log(const Matrix& cost, const Vector& a, const Vector& b, double eps,
                            const SinkhornOptions& opts) {
  const Eigen::Index n = a.size(), m = b.size();
  Vector log_a = a.array().log().matrix();
  Vector log_b = b.array().log().matrix();
  Vector f = Vector::Zero(n);
  Vector g = Vector::Zero(m);
  auto plan = [&]() -> Matrix {
    Matrix lp = (-cost).colwise() + f;
    lp.rowwise() += g.transpose();
    return (lp.array() / eps).exp().matrix();
  };
  SinkhornResult r;
  Vector tmp_row(m), tmp_col(n);
  for (int it = 1; it <= opts.max_iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      tmp_row = (g.transpose() - cost.row(i)) / eps;
      f(i) = eps * (log_a(i) - log_sum_exp(tmp_row));
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      tmp_col = (f - cost.col(j)) / eps;
      g(j) = eps * (log_b(j) - log_sum_exp(tmp_col));
    }
    r.iterations = it;
    Matrix p = plan();
    r.marginal_error = (p.rowwise().sum() - a).lpNorm<1>();
    if (opts.record_history) r.cost_history.push_back(p.cwiseProduct(cost).sum());
    if (r.marginal_error < opts.tol) {
      r.converged = true;
      break;
    }
  }
  r.coupling = plan();
  return r;
}

}  // namespace

SinkhornResult sinkhorn(const TransportProblem& prob, const SinkhornOptions& opts) {
  const Matrix& cost = prob.cost;
  if (cost.rows() != prob.a.size() || cost.cols() != prob.b.size())
    throw ShapeError("sinkhorn: cost is " + std::to_string(cost.rows()) + "x" + std::to_string(cost.cols()) +
                     " but marginals have sizes " + std::to_string(prob.a.size()) + ", " +
                     std::to_string(prob.b.size()));
  if (!(prob.epsilon > 0)) throw std::invalid_argument("sinkhorn: epsilon must be > 0");
  if (!cost.allFinite()) throw std::invalid_argument("sinkhorn: non-finite cost");
  if (!is_simplex(prob.a) || !is_simplex(prob.b)) throw DistributionError("sinkhorn: marginals must be simplices");

  std::vector<Eigen::Index> rows, cols;
  for (Eigen::Index i = 0; i < prob.a.size(); ++i)
    if (prob.a(i) > 0) rows.push_back(i);
  for (Eigen::Index j = 0; j < prob.b.size(); ++j)
    if (prob.b(j) > 0) cols.push_back(j);
  const bool restricted = rows.size() != std::size_t(prob.a.size()) || cols.size() != std::size_t(prob.b.size());

  Matrix c = restricted ? Matrix(cost(rows, cols)) : cost;
  Vector a = restricted ? Vector(prob.a(rows)) : prob.a;
  Vector b = restricted ? Vector(prob.b(cols)) : prob.b;

  const double range = c.maxCoeff() - c.minCoeff();
  SinkhornResult r = range / prob.epsilon <= 100.0 ? sinkhorn_scaling(c, a, b, prob.epsilon, opts)
                                                   : sinkhorn_log(c, a, b, prob.epsilon, opts);
  if (!r.coupling.allFinite()) {
    r = sinkhorn_log(c, a, b, prob.epsilon, opts);
  }
  if (restricted) {
    Matrix full = Matrix::Zero(cost.rows(), cost.cols());
    full(rows, cols) = r.coupling;
    r.coupling = std::move(full);
  }
  r.transport_cost = r.coupling.cwiseProduct(cost).sum();
  return r;
}

double wasserstein_empirical(const Matrix& za, const Matrix& zb, CostKind kind, double epsilon,
                             const SinkhornOptions& opts) {
  if (za.rows() == 0 || zb.rows() == 0) throw std::invalid_argument("wasserstein_empirical: empty point set");
  TransportProblem p;
  p.cost = pairwise_cost(za, zb, kind);
  p.a = Vector::Constant(za.rows(), 1.0 / double(za.rows()));
  p.b = Vector::Constant(zb.rows(), 1.0 / double(zb.rows()));
  p.epsilon = epsilon;
  return sinkhorn(p, opts).transport_cost;
}

// ------------------------------------------------------- H-divergence proxy

double h_divergence_proxy(const Matrix& za, const Matrix& zb, const ProbeConfig& cfg, std::uint64_t seed) {
  if (za.cols() != zb.cols()) throw ShapeError("h_divergence_proxy: point dimensions differ");
  const auto n_train = [&](Eigen::Index n) { return static_cast<Eigen::Index>(std::floor(cfg.train_fraction * n)); };
  const Eigen::Index ta = n_train(za.rows()), tb = n_train(zb.rows());
  if (ta < 1 || tb < 1 || za.rows() - ta < 1 || zb.rows() - tb < 1)
    throw std::invalid_argument("h_divergence_proxy: each set needs at least one train and one held-out point");

  std::mt19937_64 rng(seed);
  auto shuffled = [&](Eigen::Index n) {
    std::vector<Eigen::Index> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
  };
  const auto ia = shuffled(za.rows());
  const auto ib = shuffled(zb.rows());
  const Eigen::Index d = za.cols();

  Matrix train(ta + tb, d);
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < ta; ++i) train.row(i) = za.row(ia[i]), labels.push_back(0);
  for (Eigen::Index i = 0; i < tb; ++i) train.row(ta + i) = zb.row(ib[i]), labels.push_back(1);

  RowVector mu = train.colwise().mean();
  RowVector sd = ((train.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  sd = sd.cwiseMax(1e-8);
  auto standardize = [&](const Matrix& m) -> Matrix {
    return (m.rowwise() - mu).array().rowwise() / sd.array();
  };
  Matrix xtrain = standardize(train);

  ParamStore store;
  std::normal_distribution<double> nd(0.0, 1.0);
  auto init = [&](Eigen::Index r, Eigen::Index c) {
    Matrix w(r, c);
    const double s = std::sqrt(2.0 / double(r + c));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = s * nd(rng);
    return w;
  };
  store.add("w1", init(d, cfg.hidden));
  store.add("b1", Matrix::Zero(1, cfg.hidden));
  store.add("w2", init(cfg.hidden, 2));
  store.add("b2", Matrix::Zero(1, 2));
  auto forward = [&](Tape& t, const Matrix& x) {
    Var h = tanh(affine(t.constant(x), t.param(store, "w1"), t.param(store, "b1")));
    return affine(h, t.param(store, "w2"), t.param(store, "b2"));
  };
  AdamOptions adam;
  adam.lr = cfg.lr;
  for (int step = 0; step < cfg.steps; ++step) {
    store.zero_grad();
    Tape t;
    Var loss = softmax_cross_entropy(forward(t, xtrain), labels);
    t.backward(loss);
    adam_step(store, adam);
  }

  auto held_out_accuracy = [&](const Matrix& z, const std::vector<Eigen::Index>& idx, Eigen::Index start, int label) {
    Matrix x(static_cast<Eigen::Index>(idx.size()) - start, d);
    for (Eigen::Index i = start; i < static_cast<Eigen::Index>(idx.size()); ++i) x.row(i - start) = z.row(idx[i]);
    Tape t;
    Matrix logits = forward(t, standardize(x)).value();
    double hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const int pred = logits(i, 1) > logits(i, 0) ? 1 : 0;
      hits += pred == label;
    }
    return hits / double(logits.rows());
  };
  const double balanced = 0.5 * (held_out_accuracy(za, ia, ta, 0) + held_out_accuracy(zb, ib, tb, 1));
  return std::max(0.0, 2.0 * balanced - 1.0);
}

// ------------------------------------------------------- quantized pipeline

Matrix fit_quantized_head(const std::vector<QuantizedDomain>& pooled, int num_cells, int num_classes) {
  Matrix sums = Matrix::Zero(num_cells, num_classes);
  Vector counts = Vector::Zero(num_cells);
  for (const auto& d : pooled) {
    if (d.oracle_posterior.cols() != num_classes) throw ShapeError("fit_quantized_head: class count mismatch");
    for (std::size_t i = 0; i < d.cells.size(); ++i) {
      const int c = d.cells[i];
      if (c < 0 || c >= num_cells) throw std::out_of_range("fit_quantized_head: cell index out of range");
      sums.row(c) += d.oracle_posterior.row(static_cast<Eigen::Index>(i));
      counts(c) += 1.0;
    }
  }
  for (int c = 0; c < num_cells; ++c) {
    if (counts(c) > 0)
      sums.row(c) /= counts(c);
    else
      sums.row(c).setConstant(1.0 / num_classes);
  }
  return sums;
}

double BoundRecord::term(const std::string& name) const {
  for (const auto& [k, v] : rhs_terms)
    if (k == name) return v;
  throw std::out_of_range("BoundRecord has no term '" + name + "'");
}

Vector cell_distribution(const QuantizedDomain& d, int num_cells) {
  Vector p = Vector::Zero(num_cells);
  for (int c : d.cells) p(c) += 1.0;
  if (!d.cells.empty()) p /= static_cast<double>(d.cells.size());
  return p;
}

double quantized_loss(const Matrix& head, const QuantizedDomain& d) {
  if (d.cells.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < d.cells.size(); ++i)
    total += hellinger_sq(head.row(d.cells[i]), d.oracle_posterior.row(static_cast<Eigen::Index>(i)));
  return total / static_cast<double>(d.cells.size());
}

Vector label_marginal(const QuantizedDomain& d) { return d.oracle_posterior.colwise().mean().transpose(); }

namespace {

void finish(BoundRecord& r) {
  r.rhs = 0.0;
  for (const auto& [_, v] : r.rhs_terms) r.rhs += v;
  r.satisfied = r.lhs <= r.rhs + r.tolerance;
}

}  // namespace

BoundRecord bound_lower(const Matrix& head, const QuantizedDomain& a, const QuantizedDomain& b, double tol) {
  const int cells = static_cast<int>(head.rows());
  BoundRecord r;
  r.theorem = "label_marginal_lower";
  r.domain_a = a.domain;
  r.domain_b = b.domain;
  r.tolerance = tol;
  r.lhs = hellinger_dist(label_marginal(a), label_marginal(b));
  r.rhs_terms = {{"sqrt_loss_a", std::sqrt(quantized_loss(head, a))},
                 {"representation_gap", hellinger_dist(cell_distribution(a, cells), cell_distribution(b, cells))},
                 {"sqrt_loss_b", std::sqrt(quantized_loss(head, b))}};
  finish(r);
  return r;
}

BoundRecord bound_upper(const Matrix& head, const QuantizedDomain& a, const QuantizedDomain& b, double loss_bound,
                        double tol) {
  const int cells = static_cast<int>(head.rows());
  BoundRecord r;
  r.theorem = "target_loss_upper";
  r.domain_a = a.domain;
  r.domain_b = b.domain;
  r.tolerance = tol;
  r.lhs = quantized_loss(head, a);
  const double gap = hellinger_dist(cell_distribution(a, cells), cell_distribution(b, cells));
  r.rhs_terms = {{"loss_b", quantized_loss(head, b)}, {"scaled_representation_gap", loss_bound * std::sqrt(2.0) * gap}};
  finish(r);
  return r;
}

SubspaceBoundReport bound_subspace(const Matrix& head, const std::vector<int>& subspace_of_cell, int num_subspaces,
                                   const std::vector<QuantizedDomain>& domains, double loss_bound, double tol) {
  const int cells = static_cast<int>(head.rows());
  if (static_cast<int>(subspace_of_cell.size()) != cells)
    throw ShapeError("bound_subspace: subspace map must cover every cell");
  const std::size_t E = domains.size();

  // Restriction of every domain to every subspace.
  std::vector<std::vector<QuantizedDomain>> restricted(E, std::vector<QuantizedDomain>(num_subspaces));
  SubspaceBoundReport out;
  for (std::size_t e = 0; e < E; ++e) {
    const auto& d = domains[e];
    const Eigen::Index C = d.oracle_posterior.cols();
    std::vector<std::vector<Eigen::Index>> members(num_subspaces);
    for (std::size_t i = 0; i < d.cells.size(); ++i) {
      const int m = subspace_of_cell[d.cells[i]];
      if (m < 0 || m >= num_subspaces) throw std::out_of_range("bound_subspace: subspace index out of range");
      members[m].push_back(static_cast<Eigen::Index>(i));
    }
    Vector pi = Vector::Zero(num_subspaces);
    for (int m = 0; m < num_subspaces; ++m) {
      auto& rd = restricted[e][m];
      rd.domain = d.domain;
      rd.oracle_posterior.resize(static_cast<Eigen::Index>(members[m].size()), C);
      for (std::size_t k = 0; k < members[m].size(); ++k) {
        rd.cells.push_back(d.cells[members[m][k]]);
        rd.oracle_posterior.row(static_cast<Eigen::Index>(k)) = d.oracle_posterior.row(members[m][k]);
      }
      pi(m) = d.cells.empty() ? 0.0 : double(members[m].size()) / double(d.cells.size());
    }
    out.mixture_weights.push_back(pi);
  }

  // Part (i): |E| sum_e L_e <= sum_{e,e'} sum_m pi^e_m L(f, P^{e'}_m)
  //                          + L sqrt(2) sum_{e,e'} sum_m pi^e_m d(g#P^e_m, g#P^{e'}_m)
  // An empty restriction P^{e'}_m contributes loss 0 and distance 2.
  double lhs = 0.0, loss_term = 0.0, align_term = 0.0;
  for (std::size_t e = 0; e < E; ++e) lhs += quantized_loss(head, domains[e]);
  lhs *= static_cast<double>(E);
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t f = 0; f < E; ++f) {
      for (int m = 0; m < num_subspaces; ++m) {
        const double w = out.mixture_weights[e](m);
        if (w == 0.0) continue;
        const auto& other = restricted[f][m];
        if (other.cells.empty()) {
          align_term += w * 2.0;
          continue;
        }
        loss_term += w * quantized_loss(head, other);
        align_term += w * hellinger_dist(cell_distribution(restricted[e][m], cells), cell_distribution(other, cells));
      }
    }
  }
  BoundRecord& dec = out.decomposition;
  dec.theorem = "subspace_decomposition";
  dec.tolerance = tol;
  dec.lhs = lhs;
  dec.rhs_terms = {{"subspace_losses", loss_term}, {"scaled_subspace_alignment", loss_bound * std::sqrt(2.0) * align_term}};
  finish(dec);

  // Part (ii), per subspace and unordered pair with mass on both sides.
  for (int m = 0; m < num_subspaces; ++m) {
    for (std::size_t e = 0; e < E; ++e) {
      for (std::size_t f = e + 1; f < E; ++f) {
        if (restricted[e][m].cells.empty() || restricted[f][m].cells.empty()) continue;
        BoundRecord r = bound_lower(head, restricted[e][m], restricted[f][m], tol);
        r.theorem = "subspace_label_marginal";
        r.subspace = m;
        out.per_subspace.push_back(std::move(r));
      }
    }
  }
  return out;
}

}  // namespace sra
