// Shared helpers for the test binaries: central finite differences over a
// ParamStore, a norm-wise relative error, small random problems.

#pragma once

#include "sra/diffgraph.hpp"

#include <algorithm>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace sra::testing {

/// Builds a scalar graph on `t` reading its leaves from the store.
using Graph = std::function<Var(Tape&)>;

inline Matrix gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> g(0.0, s);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

inline std::map<std::string, Matrix> analytic_grad(ParamStore& store, const Graph& f) {
  store.zero_grad();
  Tape t;
  t.backward(f(t));
  std::map<std::string, Matrix> out;
  for (auto& [name, p] : store.items()) out[name] = p.has_grad ? p.grad : Matrix::Zero(p.value.rows(), p.value.cols());
  return out;
}

/// Central differences of any scalar function of the store's values.
inline std::map<std::string, Matrix> numeric_grad(ParamStore& store, const std::function<double()>& value,
                                                  double h = 1e-6) {
  std::map<std::string, Matrix> out;
  for (auto& [name, p] : store.items()) {
    Matrix g(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + h;
      const double up = value();
      p.value.data()[i] = keep - h;
      const double down = value();
      p.value.data()[i] = keep;
      g.data()[i] = (up - down) / (2 * h);
    }
    out[name] = g;
  }
  return out;
}

inline std::map<std::string, Matrix> numeric_grad(ParamStore& store, const Graph& f, double h = 1e-6) {
  return numeric_grad(store, [&] {
    Tape t;
    return f(t).scalar();
  }, h);
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-7});
  return (a - b).norm() / scale;
}

/// Worst block-wise relative error between two gradient maps.
inline double max_rel_err(const std::map<std::string, Matrix>& a, const std::map<std::string, Matrix>& b) {
  double worst = 0.0;
  for (const auto& [name, g] : a) worst = std::max(worst, rel_err(g, b.at(name)));
  return worst;
}

/// Exact OT between uniform measures of equal size n: the optimum of the
/// assignment LP sits on a permutation, so enumerate all n! of them.
inline double permutation_ot(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int i = 0; i < n; ++i) c += cost(i, perm[i]);
    best = std::min(best, c / n);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("sra_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace sra::testing
