#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sra/scm.hpp"
#include "testing.hpp"

#include <fstream>

using namespace sra;

namespace {

Vector uniform(int k) { return Vector::Constant(k, 1.0 / k); }

SCMConfig small_config(CouplingMode mode = CouplingMode::GraphFaithful) {
  SCMConfig c;
  c.mode = mode;
  Vector skew(8);
  skew << 0.3, 0.3, 0.05, 0.05, 0.1, 0.1, 0.05, 0.05;
  c.domains = {{0, uniform(8), {}, 0.9}, {1, skew, {}, 0.6}};
  return c;
}

}  // namespace

TEST_CASE("oracle posterior is the tempered softmax of the label scores") {
  SCM scm(small_config(), 1);
  Vector zc(4);
  zc << 0.3, -1.2, 0.8, 0.1;
  Vector s = scm.label_weights() * zc / scm.config().temperature;
  Vector expect = (s.array() - s.maxCoeff()).exp();
  expect /= expect.sum();
  CHECK(scm.oracle_posterior(zc).isApprox(expect, 1e-12));
  Matrix batch = zc.transpose();
  CHECK(scm.oracle_posteriors(batch).row(0).transpose().isApprox(expect, 1e-12));
}

TEST_CASE("sampling is seeded") {
  SCM scm(small_config(CouplingMode::LabelCoupled), 2);
  DomainDataset a = scm.sample_domain(1, 300, 11);
  DomainDataset b = scm.sample_domain(1, 300, 11);
  DomainDataset c = scm.sample_domain(1, 300, 12);
  CHECK(a.x == b.x);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(a.x == c.x);
  CHECK(a.domain == 1);
  CHECK(a.size() == 300);
  // two SCMs from the same structure seed agree
  SCM again(small_config(CouplingMode::LabelCoupled), 2);
  CHECK(again.mixing() == scm.mixing());
}

TEST_CASE("label marginal matches the mixture oracle at sigma_c = 0") {
  SCMConfig c = small_config();
  c.sigma_causal = 0.0;
  SCM scm(c, 5);
  const Eigen::Index n = 40000;
  DomainDataset d = scm.sample_domain(1, n, 3);
  // P(y) = sum_k pi_k softmax(W mu_k / tau), computed directly
  Vector expect = Vector::Zero(4);
  const Vector& pi = scm.domain(1).component_weights;
  for (int k = 0; k < 8; ++k) {
    Vector s = scm.label_weights() * scm.component_means().row(k).transpose() / c.temperature;
    Vector p = (s.array() - s.maxCoeff()).exp();
    expect += pi(k) * p / p.sum();
  }
  Vector freq = d.label_frequencies();
  for (int y = 0; y < 4; ++y) {
    const double sd = std::sqrt(expect(y) * (1 - expect(y)) / n);
    CHECK(std::abs(freq(y) - expect(y)) < 5 * sd);
  }
}

TEST_CASE("label coupling moves z_e along the class direction with probability rho") {
  SCMConfig c = small_config(CouplingMode::LabelCoupled);
  c.sigma_env = 0.0;
  c.coupling_shift = 2.0;
  SCM scm(c, 4);
  DomainDataset d = scm.sample_domain(0, 20000, 9);
  const Vector nu = scm.domain(0).env_mean;
  int agree = 0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const Vector shift = d.z_env.row(i).transpose() - nu;
    const Vector dir = scm.coupling_direction(d.labels[i]);
    // exactly +-delta along the class axis, nothing else
    CHECK(std::abs(std::abs(shift.dot(dir)) - 2.0) < 1e-12);
    CHECK((shift - shift.dot(dir) * dir).norm() < 1e-12);
    if (shift.dot(dir) > 0) ++agree;
  }
  const double rate = agree / 20000.0;
  CHECK(std::abs(rate - 0.9) < 5 * std::sqrt(0.09 / 20000));
}

TEST_CASE("graph-faithful z_e ignores the label") {
  SCMConfig c = small_config(CouplingMode::GraphFaithful);
  SCM scm(c, 4);
  DomainDataset d = scm.sample_domain(0, 20000, 9);
  const Vector nu = scm.domain(0).env_mean;
  for (int y = 0; y < 4; ++y) {
    Vector s = Vector::Zero(4);
    int n = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i)
      if (d.labels[i] == y) {
        s += d.z_env.row(i).transpose();
        ++n;
      }
    REQUIRE(n > 500);
    CHECK(((s / n) - nu).norm() < 5 * c.sigma_env * 2 / std::sqrt(double(n)));
  }
}

TEST_CASE("noise-free observations are the mixing map of the latents") {
  SCMConfig c = small_config();
  c.sigma_obs = 0.0;
  SCM scm(c, 6);
  DomainDataset d = scm.sample_domain(0, 50, 1);
  Matrix latent(50, 8);
  latent << d.z_causal, d.z_env;
  CHECK(d.x.isApprox(latent * scm.mixing().transpose(), 1e-12));
  CHECK(scm.oracle_invariant_encoder(d.x).isApprox(d.z_causal, 1e-9));
}

TEST_CASE("counterfactual augmentation holds z_c and y") {
  SCM scm(small_config(CouplingMode::LabelCoupled), 8);
  DomainDataset d = scm.sample_domain(0, 10, 2);
  std::mt19937_64 rng(1);
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    LabeledSample s = d.sample(i);
    LabeledSample cf = scm.counterfactual_augment(s, rng);
    CHECK(cf.z_causal == s.z_causal);
    CHECK(cf.y == s.y);
    CHECK_FALSE(cf.z_env == s.z_env);
  }
  LabeledSample s = d.sample(0);
  CHECK(scm.counterfactual_augment(s, 5).x == scm.counterfactual_augment(s, 5).x);
}

TEST_CASE("config validation") {
  SCMConfig c = small_config();
  c.domains[1].id = 0;
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.domains[0].component_weights(0) += 0.1;
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.domains[0].component_weights = uniform(3);
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.domains[0].rho = 1.5;
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.temperature = 0.0;
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.domains.clear();
  CHECK_THROWS_AS(SCM(c, 0), ConfigError);

  c = small_config();
  c.dim_obs = 6;  // fewer observations than latents
  CHECK_THROWS_AS(SCM(c, 0), IdentifiabilityError);

  SCM ok(small_config(), 0);
  CHECK_THROWS_AS(ok.domain(7), std::out_of_range);
  CHECK_THROWS_AS(ok.sample_domain(0, 0, 1), std::invalid_argument);
}

TEST_CASE("causal support") {
  SCMConfig c = small_config();
  Vector half = Vector::Zero(8);
  half.head(4).setConstant(0.25);
  Vector other = Vector::Zero(8);
  other.tail(4).setConstant(0.25);
  c.domains = {{0, half, {}, 0.5}, {1, other, {}, 0.5}};
  SCM scm(c, 0);
  CHECK(scm.check_causal_support({0, 1}).passed);
  auto r = scm.check_causal_support({0});
  CHECK_FALSE(r.passed);
  CHECK(r.uncovered_components == std::vector<int>{4, 5, 6, 7});
}

TEST_CASE("dataset round trip is exact") {
  SCM scm(small_config(CouplingMode::LabelCoupled), 3);
  DomainDataset d = scm.sample_domain(1, 64, 4);
  const auto dir = testing::scratch_dir("scm_io");
  write_dataset(d, dir / "d.csv");
  DomainDataset back = read_dataset(dir / "d.csv");
  CHECK(back.domain == 1);
  CHECK(back.num_classes == 4);
  CHECK(back.x == d.x);
  CHECK(back.z_causal == d.z_causal);
  CHECK(back.z_env == d.z_env);
  CHECK(back.labels == d.labels);
  CHECK(back.components == d.components);
}

TEST_CASE("malformed dataset files") {
  const auto dir = testing::scratch_dir("scm_bad");
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  CHECK_THROWS_AS(read_dataset(put("a.csv", "hello\n")), FormatError);
  CHECK_THROWS_AS(read_dataset(put("b.csv", "dims e=0 n=2 C=2 d_c=1 d_e=1 d_x=2\n0,0,1,2,3,4\n")), FormatError);
  CHECK_THROWS_AS(read_dataset(put("c.csv", "dims e=0 n=1 C=2 d_c=1 d_e=1 d_x=2\n0,0,1,2,x,4\n")), FormatError);
  CHECK_THROWS_AS(read_dataset(put("d.csv", "dims e=0 n=1 C=2 d_c=1 d_e=1 d_x=2\n0,0,1,2,3\n")), FormatError);
  CHECK_THROWS(read_dataset(dir / "missing.csv"));
  CHECK_NOTHROW(read_dataset(put("e.csv", "dims e=0 n=1 C=2 d_c=1 d_e=1 d_x=2\n1,0,1,2,3,4\n")));
}
