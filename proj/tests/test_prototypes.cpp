#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sra/prototypes.hpp"
#include "testing.hpp"

#include <set>

using namespace sra;
using namespace sra::testing;

namespace {

Matrix unit_rows(Matrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

// sum_jk G_jk (1 - cos(z_j, p_k)) in plain Eigen
double frozen_projection(const Matrix& z, const Matrix& protos, const Matrix& coupling) {
  const Matrix cos = unit_rows(z) * unit_rows(protos).transpose();
  return (coupling.array() * (1.0 - cos.array())).sum();
}

}  // namespace

TEST_CASE("prototype initialization") {
  PrototypeSet p = init_prototypes(4, 3, 5, 1);
  CHECK(p.size() == 12);
  CHECK(p.dim() == 5);
  CHECK(p.vectors.rowwise().norm().isApprox(Vector::Ones(12)));
  CHECK(p.weights.isApprox(Vector::Constant(12, 1.0 / 12)));

  std::mt19937_64 rng(2);
  Matrix samples = gaussian(30, 5, rng);
  PrototypeSet s = init_prototypes(2, 2, 5, 3, PrototypeInit::SampleInit, &samples);
  const Matrix un = unit_rows(samples);
  for (int k = 0; k < s.size(); ++k) {
    bool found = false;
    for (Eigen::Index i = 0; i < un.rows(); ++i) found |= s.vectors.row(k).isApprox(un.row(i));
    CHECK(found);
  }
  CHECK_THROWS_AS(init_prototypes(2, 2, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(init_prototypes(0, 2, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(init_prototypes(2, 2, 5, 1, PrototypeInit::SampleInit, nullptr), std::invalid_argument);
}

TEST_CASE("balanced assignment respects both marginals") {
  std::mt19937_64 rng(3);
  Matrix z = gaussian(24, 4, rng);
  PrototypeSet p = init_prototypes(2, 4, 4, 5);
  Assignment a = assign(z, p, 0.05);
  CHECK(a.coupling.rows() == 24);
  CHECK(a.coupling.cols() == 8);
  CHECK((a.coupling.rowwise().sum().array() - 1.0 / 24).abs().maxCoeff() < 1e-4);
  CHECK((a.coupling.colwise().sum().transpose() - p.weights).lpNorm<1>() < 1e-4);
  for (Eigen::Index i = 0; i < 24; ++i) {
    Eigen::Index arg;
    a.coupling.row(i).maxCoeff(&arg);
    CHECK(a.hard[i] == arg);
  }
  CHECK(a.transport_cost == doctest::Approx(frozen_projection(z, p.vectors, a.coupling)).epsilon(1e-9));
  CHECK_THROWS_AS(assign(Matrix(0, 4), p, 0.05), std::invalid_argument);
}

TEST_CASE("projection loss value and frozen-coupling gradient") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore s;
    s.add("z0", gaussian(6, 3, rng));
    s.add("z1", gaussian(5, 3, rng));
    s.add("p", gaussian(4, 3, rng));
    const Vector w = Vector::Constant(4, 0.25);
    std::vector<Assignment> frozen;
    {
      Tape t;
      std::vector<Var> zs{t.param(s, "z0"), t.param(s, "z1")};
      Var loss = projection_loss(zs, t.param(s, "p"), w, 0.1, {}, &frozen);
      const double expect = frozen_projection(s.at("z0").value, s.at("p").value, frozen[0].coupling) +
                            frozen_projection(s.at("z1").value, s.at("p").value, frozen[1].coupling);
      CHECK(loss.scalar() == doctest::Approx(expect).epsilon(1e-12));
    }
    auto analytic = analytic_grad(s, [&](Tape& t) {
      std::vector<Var> zs{t.param(s, "z0"), t.param(s, "z1")};
      return projection_loss(zs, t.param(s, "p"), w, 0.1);
    });
    auto numeric = numeric_grad(s, [&] {
      return frozen_projection(s.at("z0").value, s.at("p").value, frozen[0].coupling) +
             frozen_projection(s.at("z1").value, s.at("p").value, frozen[1].coupling);
    });
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("nearest-prototype projector") {
  PrototypeSet p;
  p.vectors = Matrix::Identity(3, 3);
  p.weights = Vector::Constant(3, 1.0 / 3);
  Matrix z(3, 3);
  z << 0.1, 5, 0, -1, 0, 0.2, 3, 2.9, 0;
  CHECK(subspace_of(z, p) == std::vector<int>{1, 2, 0});
  Vector v(3);
  v << 0, 0, -4;
  // costs 1, 1, 2: rows 0 and 1 tie
  CHECK(subspace_of(v, p) == 0);
}

TEST_CASE("spherical k-means finds separated directions") {
  std::mt19937_64 rng(9);
  Matrix centers = unit_rows(gaussian(4, 6, rng));
  Matrix z(400, 6);
  std::vector<int> truth(400);
  for (int i = 0; i < 400; ++i) {
    truth[i] = i % 4;
    z.row(i) = (2.0 + i % 3) * (centers.row(truth[i]) + 0.05 * gaussian(1, 6, rng));
  }
  PrototypeSet k = spherical_kmeans(z, 4, 1);
  CHECK(k.size() == 4);
  CHECK(k.vectors.rowwise().norm().isApprox(Vector::Ones(4)));
  CHECK(k.weights.isApprox(Vector::Constant(4, 0.25)));
  std::vector<int> got = subspace_of(z, k);
  // each true cluster maps to exactly one learned cell and vice versa
  std::set<std::pair<int, int>> pairs;
  for (int i = 0; i < 400; ++i) pairs.insert({truth[i], got[i]});
  CHECK(pairs.size() == 4);
  CHECK(spherical_kmeans(z, 4, 1).vectors == k.vectors);
  CHECK_THROWS_AS(spherical_kmeans(z, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(spherical_kmeans(z.topRows(3), 4, 1), std::invalid_argument);
}

TEST_CASE("empirical pi") {
  Vector pi = empirical_pi({0, 2, 2, 1}, 4);
  CHECK(pi(2) == doctest::Approx(0.5));
  CHECK(pi(3) == 0.0);
  CHECK_THROWS_AS(empirical_pi({4}, 4), std::out_of_range);
}
