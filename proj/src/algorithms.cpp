#include "sra/algorithms.hpp"

#include "sra/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace sra {

void AlgoConfig::validate() const {
  if (penalty_weight < 0 || lambda_d < 0 || lambda_p < 0 || grl_lambda < 0)
    throw std::invalid_argument("algorithm weights must be non-negative");
  if (!(swad_window > 0.0 && swad_window <= 1.0)) throw std::invalid_argument("swad_window must be in (0, 1]");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(sinkhorn_epsilon > 0)) throw std::invalid_argument("sinkhorn_epsilon must be > 0");
}

std::vector<DomainBatch> sample_minibatches(const std::vector<DomainDataset>& domains, int batch_size,
                                            std::mt19937_64& rng) {
  std::vector<DomainBatch> out;
  out.reserve(domains.size());
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const DomainDataset& ds = domains[d];
    if (ds.size() == 0) throw std::invalid_argument("sample_minibatches: empty domain " + std::to_string(ds.domain));
    std::uniform_int_distribution<Eigen::Index> pick(0, ds.size() - 1);
    DomainBatch b;
    b.domain = ds.domain;
    b.domain_index = static_cast<int>(d);
    b.x.resize(batch_size, ds.x.cols());
    b.z_causal.resize(batch_size, ds.z_causal.cols());
    b.labels.resize(batch_size);
    for (int i = 0; i < batch_size; ++i) {
      const Eigen::Index j = pick(rng);
      b.x.row(i) = ds.x.row(j);
      b.z_causal.row(i) = ds.z_causal.row(j);
      b.labels[i] = ds.labels[j];
    }
    out.push_back(std::move(b));
  }
  return out;
}

DomainBatch augment_batch(const SCM& scm, const DomainBatch& batch, std::mt19937_64& rng) {
  DomainBatch out = batch;
  for (Eigen::Index i = 0; i < batch.x.rows(); ++i) {
    LabeledSample s;
    s.x = batch.x.row(i).transpose();
    s.z_causal = batch.z_causal.row(i).transpose();
    s.y = batch.labels[i];
    s.domain = batch.domain;
    LabeledSample a = scm.counterfactual_augment(s, rng);
    out.x.row(i) = a.x.transpose();
  }
  return out;
}

// ---------------------------------------------------------------- penalties

Var erm_loss(std::span<const Var> logits, std::span<const DomainBatch> batches) {
  if (logits.empty() || logits.size() != batches.size())
    throw std::invalid_argument("erm_loss: need one logit block per domain batch");
  Var total;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    if (batches[e].labels.empty()) throw std::invalid_argument("erm_loss: empty batch");
    Var ce = softmax_cross_entropy(logits[e], batches[e].labels);
    total = total.tape() ? add(total, ce) : ce;
  }
  return total;
}

Var irm_penalty(std::span<const Var> logits, std::span<const DomainBatch> batches) {
  if (logits.empty() || logits.size() != batches.size())
    throw std::invalid_argument("irm_penalty: need one logit block per domain batch");
  Var total;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    const Var l = logits[e];
    Matrix onehot = Matrix::Zero(l.rows(), l.cols());
    for (std::size_t i = 0; i < batches[e].labels.size(); ++i) onehot(Eigen::Index(i), batches[e].labels[i]) = 1.0;
    Var residual = sub(softmax(l), l.tape()->constant(std::move(onehot)));
    Var dw = scale(sum(mul(residual, l)), 1.0 / double(l.rows()));
    Var term = square(dw);
    total = total.tape() ? add(total, term) : term;
  }
  return total;
}

Var vrex_penalty(std::span<const Var> risks) {
  if (risks.size() < 2) throw std::invalid_argument("vrex_penalty: needs at least 2 domains");
  Var stacked = concat_rows(risks);
  return mean(square(center_cols(stacked)));
}

Var ib_penalty(Var features) {
  if (features.rows() < 2) throw std::invalid_argument("ib_penalty: needs at least 2 rows");
  return mean(square(center_cols(features)));
}

Var adversarial_loss(Tape& t, ModelBundle& bundle, std::span<const Var> features,
                     std::span<const DomainBatch> batches, Conditioning conditioning, double grl_lambda) {
  if (features.size() < 2 || features.size() != batches.size())
    throw std::invalid_argument("adversarial_loss: needs at least 2 domains with one feature block each");
  if (conditioning == Conditioning::Subspace && !bundle.has_prototypes())
    throw MissingComponentError("adversarial_loss: subspace conditioning needs prototypes");

  Var z = concat_rows(features);
  std::vector<int> domain_labels;
  for (const auto& b : batches) domain_labels.insert(domain_labels.end(), b.labels.size(), b.domain_index);
  if (static_cast<Eigen::Index>(domain_labels.size()) != z.rows())
    throw ShapeError("adversarial_loss: feature rows do not match batch sizes");

  Var input = grad_reverse(z, grl_lambda);
  if (conditioning == Conditioning::Class) {
    Matrix onehot = Matrix::Zero(z.rows(), bundle.arch.num_classes);
    Eigen::Index r = 0;
    for (const auto& b : batches)
      for (int y : b.labels) onehot(r++, y) = 1.0;
    input = concat_cols(input, t.constant(std::move(onehot)));
  } else if (conditioning == Conditioning::Subspace) {
    PrototypeSet protos = bundle.prototypes();
    std::vector<int> idx = subspace_of(z.value(), protos);
    Matrix m(z.rows(), protos.dim());
    for (Eigen::Index i = 0; i < z.rows(); ++i) m.row(i) = protos.vectors.row(idx[i]).normalized();
    input = concat_cols(input, t.constant(std::move(m)));
  }
  return softmax_cross_entropy(bundle.discriminate(t, input), domain_labels);
}

// ---------------------------------------------------------------- objective

ObjectiveTerms total_objective(const AlgoConfig& cfg, ModelBundle& bundle, Tape& t,
                               std::span<const DomainBatch> batches_in, const ObjectiveContext& ctx) {
  if (batches_in.empty()) throw std::invalid_argument("total_objective: no batches");
  std::vector<DomainBatch> augmented;
  std::span<const DomainBatch> batches = batches_in;
  if (cfg.variant == Variant::AUG_ERM) {
    if (!ctx.scm || !ctx.rng) throw MissingComponentError("AUG_ERM needs the generating SCM and an rng");
    for (const auto& b : batches_in) augmented.push_back(augment_batch(*ctx.scm, b, *ctx.rng));
    batches = augmented;
  }

  // One pooled forward pass, sliced back per domain.
  std::vector<Var> x_parts;
  for (const auto& b : batches) x_parts.push_back(t.constant(b.x));
  Var x = concat_rows(x_parts);
  Var z = bundle.encode(t, x);
  Var logits = bundle.classify(t, z);
  std::vector<Var> z_parts, logit_parts;
  Eigen::Index row = 0;
  for (const auto& b : batches) {
    const Eigen::Index n = b.x.rows();
    z_parts.push_back(slice_rows(z, row, n));
    logit_parts.push_back(slice_rows(logits, row, n));
    row += n;
  }

  ObjectiveTerms out;
  Var erm = erm_loss(logit_parts, batches);
  out.erm = erm.scalar();
  out.total = erm;

  switch (cfg.variant) {
    case Variant::ERM:
    case Variant::AUG_ERM:
      break;
    case Variant::IRM: {
      Var p = irm_penalty(logit_parts, batches);
      out.penalty = p.scalar();
      out.total = add(out.total, scale(p, cfg.penalty_weight));
      break;
    }
    case Variant::VREX: {
      std::vector<Var> risks;
      for (std::size_t e = 0; e < batches.size(); ++e)
        risks.push_back(softmax_cross_entropy(logit_parts[e], batches[e].labels));
      Var p = vrex_penalty(risks);
      out.penalty = p.scalar();
      out.total = add(out.total, scale(p, cfg.penalty_weight));
      break;
    }
    case Variant::IB_ERM: {
      Var p = ib_penalty(z);
      out.penalty = p.scalar();
      out.total = add(out.total, scale(p, cfg.penalty_weight));
      break;
    }
    case Variant::DANN:
    case Variant::CDANN: {
      if (!bundle.has_discriminator()) throw MissingComponentError(to_string(cfg.variant) + " needs a discriminator");
      Var ld = adversarial_loss(t, bundle, z_parts, batches, conditioning_for(cfg.variant), ctx.grl_lambda);
      out.adversarial = ld.scalar();
      out.total = add(out.total, scale(ld, cfg.lambda_d));
      break;
    }
    case Variant::SRA: {
      if (!bundle.has_discriminator() || !bundle.has_prototypes())
        throw MissingComponentError("SRA needs a discriminator and a prototype set");
      SinkhornOptions so;
      so.max_iters = cfg.sinkhorn_iters;
      Var lp = projection_loss(z_parts, t.param(bundle.params, "protos"), bundle.prototype_weights,
                               cfg.sinkhorn_epsilon, so);
      Var ld = adversarial_loss(t, bundle, z_parts, batches, Conditioning::Subspace, ctx.grl_lambda);
      out.projection = lp.scalar();
      out.adversarial = ld.scalar();
      out.total = add(out.total, add(scale(lp, cfg.lambda_p), scale(ld, cfg.lambda_d)));
      break;
    }
  }
  return out;
}

// -------------------------------------------------------- weight averaging

void WeightAverage::accumulate(const ParamStore& params) {
  for (const auto& [name, p] : params.items()) {
    auto it = sums_.find(name);
    if (it == sums_.end())
      sums_.emplace(name, p.value);
    else
      it->second += p.value;
  }
  ++count_;
}

std::map<std::string, Matrix> swad_average(const WeightAverage& avg) {
  if (avg.count() == 0) throw std::logic_error("swad_average: nothing accumulated");
  std::map<std::string, Matrix> out;
  for (const auto& [name, s] : avg.sums()) out.emplace(name, s / static_cast<double>(avg.count()));
  return out;
}

// ----------------------------------------------------------------- training

namespace {

bool is_adversarial(Variant v) { return v == Variant::DANN || v == Variant::CDANN || v == Variant::SRA; }

}  // namespace

TrainResult train(const AlgoConfig& cfg, const std::vector<DomainDataset>& domains, const SCM* scm,
                  int held_out_domain) {
  cfg.validate();
  if (domains.empty()) throw std::invalid_argument("train: no training domains");
  for (const auto& d : domains)
    if (d.domain == held_out_domain)
      throw std::invalid_argument("train: held-out domain " + std::to_string(held_out_domain) +
                                  " is among the training domains");
  if (is_adversarial(cfg.variant) && domains.size() < 2)
    throw std::invalid_argument("train: adversarial variants need at least 2 training domains");
  if (cfg.variant == Variant::AUG_ERM && scm == nullptr) throw MissingComponentError("AUG_ERM needs the SCM");

  Architecture arch;
  arch.input_dim = static_cast<int>(domains.front().x.cols());
  arch.latent_dim = cfg.latent_dim;
  arch.hidden = cfg.hidden;
  arch.num_classes = domains.front().num_classes;
  if (is_adversarial(cfg.variant)) arch.num_domains = static_cast<int>(domains.size());
  if (cfg.variant == Variant::CDANN) arch.conditioning_width = arch.num_classes;
  if (cfg.variant == Variant::SRA) {
    arch.conditioning_width = cfg.latent_dim;
    arch.num_prototypes = cfg.prototypes_per_class * arch.num_classes;
  }

  TrainResult result;
  ModelBundle bundle(cfg.variant, arch, cfg.seed);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);

  if (cfg.variant == Variant::SRA && cfg.prototype_sample_init) {
    Matrix pooled(0, arch.input_dim);
    for (const auto& d : domains) {
      const Eigen::Index take = std::min<Eigen::Index>(d.size(), 512);
      pooled.conservativeResize(pooled.rows() + take, Eigen::NoChange);
      pooled.bottomRows(take) = d.x.topRows(take);
    }
    Matrix reps = bundle.encode(pooled);
    PrototypeSet p = init_prototypes(arch.num_classes, cfg.prototypes_per_class, arch.latent_dim, rng(),
                                     PrototypeInit::SampleInit, &reps);
    bundle.params.at("protos").value = p.vectors;
  }

  const int window_start = static_cast<int>(std::floor((1.0 - cfg.swad_window) * cfg.steps));
  WeightAverage avg;
  std::set<int> seen_domains;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<DomainBatch> batches = sample_minibatches(domains, cfg.batch_size, rng);
    for (const auto& b : batches) seen_domains.insert(b.domain);

    ObjectiveContext ctx;
    ctx.scm = scm;
    ctx.rng = &rng;
    ctx.grl_lambda = cfg.grl_lambda;
    if (cfg.grl_ramp && cfg.steps > 0) {
      const double p = double(step) / double(cfg.steps);
      ctx.grl_lambda = cfg.grl_lambda * (2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0);
    }

    Tape tape;
    ObjectiveTerms terms = total_objective(cfg, bundle, tape, batches, ctx);
    const double total = terms.total.scalar();
    if (!std::isfinite(total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (erm=" << terms.erm << " penalty=" << terms.penalty
         << " projection=" << terms.projection << " adversarial=" << terms.adversarial << ")";
      throw TrainingDiverged(os.str());
    }
    bundle.params.zero_grad();
    tape.backward(terms.total);
    adam_step(bundle.params, cfg.adam);
    if (bundle.has_prototypes()) {
      Matrix& protos = bundle.params.at("protos").value;
      protos.rowwise().normalize();
    }
    ++bundle.step;
    if (step >= window_start) avg.accumulate(bundle.params);

    if (step % cfg.log_every == 0 || step + 1 == cfg.steps)
      result.history.steps.push_back({step, total, terms.erm, terms.penalty, terms.projection, terms.adversarial});
  }

  result.history.batch_domains.assign(seen_domains.begin(), seen_domains.end());
  result.averaged_model = bundle;
  if (avg.active()) {
    for (auto& [name, value] : swad_average(avg)) result.averaged_model.params.at(name).value = std::move(value);
    if (result.averaged_model.has_prototypes()) result.averaged_model.params.at("protos").value.rowwise().normalize();
  }
  result.final_model = std::move(bundle);
  return result;
}

// --------------------------------------------------------------- evaluation

Matrix ensemble_predict(std::span<const ModelBundle* const> members, const Matrix& x) {
  if (members.empty()) throw std::invalid_argument("ensemble_predict: no members");
  Matrix acc = members.front()->predict_proba(x);
  for (std::size_t i = 1; i < members.size(); ++i) {
    if (members[i]->arch.num_classes != members.front()->arch.num_classes)
      throw ShapeError("ensemble_predict: members disagree on class count");
    acc += members[i]->predict_proba(x);
  }
  return acc / static_cast<double>(members.size());
}

Metrics evaluate(const Matrix& probs, const DomainDataset& ds, const Matrix& oracle_posterior) {
  const Eigen::Index n = ds.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (probs.rows() != n || oracle_posterior.rows() != n || probs.cols() != oracle_posterior.cols())
    throw ShapeError("evaluate: prediction/oracle shapes do not match the dataset");
  const Eigen::Index C = probs.cols();
  Metrics m;
  Vector hits = Vector::Zero(C), counts = Vector::Zero(C);
  double correct = 0.0, ce = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index pred = 0;
    probs.row(i).maxCoeff(&pred);
    const int y = ds.labels[i];
    counts(y) += 1.0;
    if (pred == y) {
      correct += 1.0;
      hits(y) += 1.0;
    }
    ce -= std::log(std::max(probs(i, y), 1e-300));
  }
  m.accuracy = correct / double(n);
  m.cross_entropy = ce / double(n);
  m.hellinger_loss = mean_hellinger_loss(probs, oracle_posterior);
  m.per_class_accuracy = Vector::Zero(C);
  for (Eigen::Index c = 0; c < C; ++c) m.per_class_accuracy(c) = counts(c) > 0 ? hits(c) / counts(c) : 0.0;
  return m;
}

Metrics evaluate(const ModelBundle& bundle, const DomainDataset& ds, const SCM& scm) {
  return evaluate(bundle.predict_proba(ds.x), ds, scm.oracle_posteriors(ds.z_causal));
}

}  // namespace sra
