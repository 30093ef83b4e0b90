// Training objectives for ERM and its regularized relatives (IRM, VREx,
// information bottleneck, DANN, CDANN, counterfactual augmentation, subspace
// representation alignment), one shared training loop, tail weight averaging,
// seed ensembling and evaluation.

#pragma once

#include "sra/diffgraph.hpp"
#include "sra/models.hpp"
#include "sra/scm.hpp"

#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sra {

struct AlgoConfig {
  Variant variant = Variant::ERM;
  double penalty_weight = 0.0;  ///< IRM / VREx / IB coefficient
  double lambda_d = 1.0;        ///< adversarial weight
  double lambda_p = 1.0;        ///< projection weight
  double sinkhorn_epsilon = 0.05;
  int sinkhorn_iters = 200;
  double grl_lambda = 1.0;
  bool grl_ramp = false;  ///< 2 / (1 + exp(-10 p)) - 1 schedule when set
  int steps = 2000;
  int batch_size = 32;  ///< per training domain
  double swad_window = 0.5;
  std::uint64_t seed = 0;
  AdamOptions adam;
  int latent_dim = 16;
  int hidden = 64;
  int prototypes_per_class = kPrototypesPerClass;
  bool prototype_sample_init = true;
  int log_every = 50;

  void validate() const;
};

struct DomainBatch {
  int domain = 0;       ///< environment id (for auditing)
  int domain_index = 0; ///< discriminator target in [0, #training domains)
  Matrix x;
  std::vector<int> labels;
  Matrix z_causal;  ///< carried for counterfactual augmentation
};

/// Draws `batch_size` samples with replacement from every training domain.
std::vector<DomainBatch> sample_minibatches(const std::vector<DomainDataset>& domains, int batch_size,
                                            std::mt19937_64& rng);

/// Replaces z_e and observation noise of every sample.
DomainBatch augment_batch(const SCM& scm, const DomainBatch& batch, std::mt19937_64& rng);

// ------------------------------------------------------------- loss terms

/// sum over domains of the mean cross-entropy.
Var erm_loss(std::span<const Var> logits, std::span<const DomainBatch> batches);

/// IRMv1: sum_e (d/dw risk_e(w * logits) at w = 1)^2, via the closed form
/// d/dw CE = mean_i sum_c (softmax(l_i)_c - onehot(y_i)_c) l_ic.
Var irm_penalty(std::span<const Var> logits, std::span<const DomainBatch> batches);

/// Population variance of per-domain risks. Needs >= 2 risks.
Var vrex_penalty(std::span<const Var> risks);

/// Mean per-dimension variance of the features. Needs >= 2 rows.
Var ib_penalty(Var features);

/// Discriminator cross-entropy (mean over the pooled batch) on
/// [R(z), conditioning], where R is gradient reversal.
Var adversarial_loss(Tape& t, ModelBundle& bundle, std::span<const Var> features,
                     std::span<const DomainBatch> batches, Conditioning conditioning, double grl_lambda);

struct ObjectiveTerms {
  Var total;
  double erm = 0.0;
  double penalty = std::numeric_limits<double>::quiet_NaN();
  double projection = std::numeric_limits<double>::quiet_NaN();
  double adversarial = std::numeric_limits<double>::quiet_NaN();
};

struct ObjectiveContext {
  const SCM* scm = nullptr;          ///< required by AUG_ERM
  std::mt19937_64* rng = nullptr;    ///< required by AUG_ERM
  double grl_lambda = 1.0;
};

struct MissingComponentError : std::logic_error {
  using std::logic_error::logic_error;
};

ObjectiveTerms total_objective(const AlgoConfig& cfg, ModelBundle& bundle, Tape& t,
                               std::span<const DomainBatch> batches, const ObjectiveContext& ctx = {});

// -------------------------------------------------------- weight averaging

class WeightAverage {
 public:
  void accumulate(const ParamStore& params);
  std::int64_t count() const { return count_; }
  bool active() const { return count_ > 0; }
  const std::map<std::string, Matrix>& sums() const { return sums_; }

 private:
  std::map<std::string, Matrix> sums_;
  std::int64_t count_ = 0;
};

/// Elementwise mean of the accumulated parameters. Throws if count == 0.
std::map<std::string, Matrix> swad_average(const WeightAverage& avg);

// ----------------------------------------------------------------- training

struct StepRecord {
  int step = 0;
  double total = 0.0;
  double erm = 0.0;
  double penalty = std::numeric_limits<double>::quiet_NaN();
  double projection = std::numeric_limits<double>::quiet_NaN();
  double adversarial = std::numeric_limits<double>::quiet_NaN();
};

struct RunHistory {
  std::vector<StepRecord> steps;
  std::vector<int> batch_domains;  ///< every domain id that fed a gradient
};

struct TrainResult {
  ModelBundle final_model;
  ModelBundle averaged_model;
  RunHistory history;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Runs cfg.steps optimizer steps. `scm` is needed by AUG_ERM only. Throws
/// std::invalid_argument if any training dataset carries `held_out_domain`.
TrainResult train(const AlgoConfig& cfg, const std::vector<DomainDataset>& training_domains, const SCM* scm,
                  int held_out_domain = -1);

// --------------------------------------------------------------- evaluation

/// Mean of the member softmax outputs.
Matrix ensemble_predict(std::span<const ModelBundle* const> members, const Matrix& x);

struct Metrics {
  double accuracy = 0.0;
  double cross_entropy = 0.0;
  double hellinger_loss = 0.0;
  Vector per_class_accuracy;
};

/// Metrics of predicted class probabilities against labels and oracle posteriors.
Metrics evaluate(const Matrix& probs, const DomainDataset& ds, const Matrix& oracle_posterior);
Metrics evaluate(const ModelBundle& bundle, const DomainDataset& ds, const SCM& scm);

}  // namespace sra
