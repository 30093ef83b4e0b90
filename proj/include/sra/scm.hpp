// Synthetic structural causal model:
//   e -> (z_c, z_e) -> x,   z_c -> y
// z_c is drawn from a domain-weighted Gaussian mixture, y from a softmax of a
// linear score of z_c shared by every domain, z_e from a domain-specific
// Gaussian (optionally coupled to y), and x = A [z_c; z_e] + noise.

#pragma once

#include "sra/diffgraph.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sra {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IdentifiabilityError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class CouplingMode { GraphFaithful, LabelCoupled };

/// Where counterfactual augmentation draws the replacement z_e from.
enum class AugmentLaw {
  DomainLaw,         ///< a uniformly chosen configured domain's law given y
  EnvironmentSpace,  ///< a uniformly chosen domain mean, no label coupling
};

struct DomainSpec {
  int id = 0;
  Vector component_weights;  ///< pi^e over the K mixture components
  Vector env_mean;           ///< nu_e; drawn from the structure seed when empty
  double rho = 0.5;          ///< label-coupling strength (label_coupled only)
};

struct SCMConfig {
  int num_classes = 4;
  int num_components = 8;
  int dim_causal = 4;
  int dim_env = 4;
  int dim_obs = 16;

  double sigma_causal = 0.5;
  double sigma_env = 0.5;
  double sigma_obs = 0.01;
  double temperature = 0.5;
  double coupling_shift = 1.0;  ///< delta in the label-coupled z_e mean
  CouplingMode mode = CouplingMode::GraphFaithful;
  AugmentLaw augment_law = AugmentLaw::EnvironmentSpace;

  // Scales used when the structure matrices below are drawn from the seed.
  double component_spread = 1.5;
  double component_jitter = 0.3;
  double env_mean_scale = 1.0;

  std::vector<DomainSpec> domains;

  // Optional explicit structure. Empty matrices are drawn from the seed.
  Matrix component_means;  ///< K x d_c
  Matrix label_weights;    ///< C x d_c
  Matrix mixing;           ///< d_x x (d_c + d_e)

  /// Throws ConfigError on malformed values.
  void validate() const;
};

struct LabeledSample {
  Vector x;
  int y = 0;
  Vector z_causal;
  Vector z_env;
  int domain = 0;
  int component = 0;
};

/// Columnar storage of one environment's samples.
struct DomainDataset {
  int domain = 0;
  int num_classes = 0;
  Matrix x;        ///< n x d_x
  Matrix z_causal; ///< n x d_c
  Matrix z_env;    ///< n x d_e
  std::vector<int> labels;
  std::vector<int> components;

  Eigen::Index size() const { return x.rows(); }
  LabeledSample sample(Eigen::Index i) const;
  void push_back(const LabeledSample& s);
  /// Empirical frequency of each observed label.
  Vector label_frequencies() const;
};

struct CausalSupportReport {
  bool passed = true;
  std::vector<int> uncovered_components;
};

class SCM {
 public:
  /// Validates the config, draws missing structure from `seed`, and checks
  /// that the mixing map has full column rank.
  SCM(SCMConfig config, std::uint64_t seed);

  const SCMConfig& config() const { return config_; }
  const Matrix& component_means() const { return config_.component_means; }
  const Matrix& label_weights() const { return config_.label_weights; }
  const Matrix& mixing() const { return config_.mixing; }
  const DomainSpec& domain(int id) const;
  std::vector<int> domain_ids() const;

  DomainDataset sample_domain(int domain_id, Eigen::Index n, std::uint64_t seed) const;

  /// P(Y | z_c) = softmax(W_y z_c / tau); identical for every domain.
  Vector oracle_posterior(const Eigen::Ref<const Vector>& z_causal) const;
  /// Row-wise oracle posterior for an n x d_c block.
  Matrix oracle_posteriors(const Matrix& z_causal) const;

  /// Least-squares inverse of the mixing map restricted to the z_c block.
  Matrix oracle_invariant_encoder(const Matrix& x) const;

  /// Resamples z_e and observation noise while holding z_c and y fixed.
  LabeledSample counterfactual_augment(const LabeledSample& sample, std::mt19937_64& rng) const;
  LabeledSample counterfactual_augment(const LabeledSample& sample, std::uint64_t seed) const;

  CausalSupportReport check_causal_support(const std::vector<int>& domain_ids) const;

  /// Label-coupling direction in z_e space for class y.
  Vector coupling_direction(int y) const;

 private:
  Vector draw_env(const DomainSpec& d, int y, bool coupled, std::mt19937_64& rng) const;
  Vector observe(const Vector& zc, const Vector& ze, std::mt19937_64& rng) const;

  SCMConfig config_;
  Matrix pseudo_inverse_;  ///< (d_c + d_e) x d_x
};

/// Numerical rank via column-pivoting QR.
Eigen::Index numerical_rank(const Matrix& m);

void write_dataset(const DomainDataset& ds, const std::filesystem::path& path);
DomainDataset read_dataset(const std::filesystem::path& path);

}  // namespace sra
