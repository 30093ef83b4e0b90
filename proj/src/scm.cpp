#include "sra/scm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sra {

namespace {

Vector standard_normal(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = nd(rng);
  return v;
}

bool is_simplex(const Vector& p) {
  if (p.size() == 0) return false;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (!(p(i) >= 0.0) || !std::isfinite(p(i))) return false;
  return std::abs(p.sum() - 1.0) <= 1e-9;
}

}  // namespace

// ------------------------------------------------------------------- config

void SCMConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (num_components < num_classes) throw ConfigError("num_components must be >= num_classes");
  if (dim_causal < 1 || dim_env < 1) throw ConfigError("latent dims must be >= 1");
  if (dim_obs < dim_causal + dim_env)
    throw IdentifiabilityError("dim_obs < dim_causal + dim_env: mixing map cannot have full column rank");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (sigma_causal < 0 || sigma_env < 0 || sigma_obs < 0) throw ConfigError("noise scales must be >= 0");
  if (domains.empty()) throw ConfigError("at least one domain is required");
  std::vector<int> ids;
  for (const auto& d : domains) {
    if (d.component_weights.size() != num_components)
      throw ConfigError("domain " + std::to_string(d.id) + ": expected " + std::to_string(num_components) +
                        " component weights");
    if (!is_simplex(d.component_weights))
      throw ConfigError("domain " + std::to_string(d.id) + ": component weights are not a simplex");
    if (d.env_mean.size() != 0 && d.env_mean.size() != dim_env)
      throw ConfigError("domain " + std::to_string(d.id) + ": env_mean has wrong dimension");
    if (d.rho < 0.0 || d.rho > 1.0) throw ConfigError("domain " + std::to_string(d.id) + ": rho outside [0,1]");
    ids.push_back(d.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate domain ids");
  if (component_means.size() && (component_means.rows() != num_components || component_means.cols() != dim_causal))
    throw ConfigError("component_means must be K x d_c");
  if (label_weights.size() && (label_weights.rows() != num_classes || label_weights.cols() != dim_causal))
    throw ConfigError("label_weights must be C x d_c");
  if (mixing.size() && (mixing.rows() != dim_obs || mixing.cols() != dim_causal + dim_env))
    throw ConfigError("mixing must be d_x x (d_c + d_e)");
}

// ------------------------------------------------------------------ dataset

LabeledSample DomainDataset::sample(Eigen::Index i) const {
  LabeledSample s;
  s.x = x.row(i).transpose();
  s.z_causal = z_causal.row(i).transpose();
  s.z_env = z_env.row(i).transpose();
  s.y = labels[i];
  s.component = components[i];
  s.domain = domain;
  return s;
}

void DomainDataset::push_back(const LabeledSample& s) {
  const Eigen::Index n = size();
  if (n > 0 && (s.x.size() != x.cols() || s.z_causal.size() != z_causal.cols() || s.z_env.size() != z_env.cols()))
    throw ShapeError("push_back: sample dims differ from dataset");
  x.conservativeResize(n + 1, s.x.size());
  z_causal.conservativeResize(n + 1, s.z_causal.size());
  z_env.conservativeResize(n + 1, s.z_env.size());
  x.row(n) = s.x.transpose();
  z_causal.row(n) = s.z_causal.transpose();
  z_env.row(n) = s.z_env.transpose();
  labels.push_back(s.y);
  components.push_back(s.component);
}

Vector DomainDataset::label_frequencies() const {
  Vector f = Vector::Zero(num_classes);
  for (int y : labels) f(y) += 1.0;
  if (!labels.empty()) f /= static_cast<double>(labels.size());
  return f;
}

// ---------------------------------------------------------------------- SCM

Eigen::Index numerical_rank(const Matrix& m) {
  Eigen::ColPivHouseholderQR<Matrix> qr(m);
  qr.setThreshold(1e-10);
  return qr.rank();
}

SCM::SCM(SCMConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int C = config_.num_classes, K = config_.num_components;
  const int dc = config_.dim_causal, de = config_.dim_env, dx = config_.dim_obs;

  if (config_.label_weights.size() == 0) {
    config_.label_weights = Matrix::Zero(C, dc);
    if (dc >= C) {
      for (int c = 0; c < C; ++c) config_.label_weights(c, c) = 1.0;
    } else {
      for (int c = 0; c < C; ++c) config_.label_weights.row(c) = standard_normal(dc, rng).transpose();
    }
  }
  if (config_.component_means.size() == 0) {
    // Component k leans towards class k mod C.
    config_.component_means = Matrix(K, dc);
    for (int k = 0; k < K; ++k) {
      Vector dir = config_.label_weights.row(k % C).transpose();
      if (dir.norm() > 0) dir.normalize();
      config_.component_means.row(k) =
          (config_.component_spread * dir + config_.component_jitter * standard_normal(dc, rng)).transpose();
    }
  }
  for (auto& d : config_.domains) {
    if (d.env_mean.size() == 0) d.env_mean = config_.env_mean_scale * standard_normal(de, rng);
  }
  if (config_.mixing.size() == 0) {
    config_.mixing = Matrix(dx, dc + de);
    for (int j = 0; j < dc + de; ++j) config_.mixing.col(j) = standard_normal(dx, rng) / std::sqrt(double(dc + de));
  }

  if (numerical_rank(config_.mixing) < dc + de)
    throw IdentifiabilityError("mixing map is rank deficient: distinct latents can produce the same observation");
  pseudo_inverse_ = config_.mixing.completeOrthogonalDecomposition().pseudoInverse();
}

const DomainSpec& SCM::domain(int id) const {
  for (const auto& d : config_.domains)
    if (d.id == id) return d;
  throw std::out_of_range("unknown domain id " + std::to_string(id));
}

std::vector<int> SCM::domain_ids() const {
  std::vector<int> ids;
  for (const auto& d : config_.domains) ids.push_back(d.id);
  return ids;
}

Vector SCM::coupling_direction(int y) const {
  Vector v = Vector::Zero(config_.dim_env);
  v(y % config_.dim_env) = 1.0;
  return v;
}

Vector SCM::draw_env(const DomainSpec& d, int y, bool coupled, std::mt19937_64& rng) const {
  Vector mean = d.env_mean;
  if (coupled) {
    std::bernoulli_distribution agree(d.rho);
    const double sign = agree(rng) ? 1.0 : -1.0;
    mean += sign * config_.coupling_shift * coupling_direction(y);
  }
  return mean + config_.sigma_env * standard_normal(config_.dim_env, rng);
}

Vector SCM::observe(const Vector& zc, const Vector& ze, std::mt19937_64& rng) const {
  Vector latent(zc.size() + ze.size());
  latent << zc, ze;
  Vector x = config_.mixing * latent;
  if (config_.sigma_obs > 0) x += config_.sigma_obs * standard_normal(config_.dim_obs, rng);
  return x;
}

DomainDataset SCM::sample_domain(int domain_id, Eigen::Index n, std::uint64_t seed) const {
  if (n < 1) throw std::invalid_argument("sample_domain: n must be >= 1");
  const DomainSpec& d = domain(domain_id);
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick_component(d.component_weights.data(),
                                                 d.component_weights.data() + d.component_weights.size());
  const bool coupled = config_.mode == CouplingMode::LabelCoupled;

  DomainDataset ds;
  ds.domain = domain_id;
  ds.num_classes = config_.num_classes;
  ds.x.resize(n, config_.dim_obs);
  ds.z_causal.resize(n, config_.dim_causal);
  ds.z_env.resize(n, config_.dim_env);
  ds.labels.resize(n);
  ds.components.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = pick_component(rng);
    Vector zc = config_.component_means.row(k).transpose() + config_.sigma_causal * standard_normal(config_.dim_causal, rng);
    Vector post = oracle_posterior(zc);
    std::discrete_distribution<int> pick_label(post.data(), post.data() + post.size());
    const int y = pick_label(rng);
    Vector ze = draw_env(d, y, coupled, rng);
    ds.x.row(i) = observe(zc, ze, rng).transpose();
    ds.z_causal.row(i) = zc.transpose();
    ds.z_env.row(i) = ze.transpose();
    ds.labels[i] = y;
    ds.components[i] = k;
  }
  return ds;
}

Vector SCM::oracle_posterior(const Eigen::Ref<const Vector>& z_causal) const {
  Matrix scores = (config_.label_weights * z_causal / config_.temperature).transpose();
  return softmax_rows(scores).row(0).transpose();
}

Matrix SCM::oracle_posteriors(const Matrix& z_causal) const {
  Matrix scores = z_causal * config_.label_weights.transpose() / config_.temperature;
  return softmax_rows(scores);
}

Matrix SCM::oracle_invariant_encoder(const Matrix& x) const {
  Matrix latent = x * pseudo_inverse_.transpose();
  return latent.leftCols(config_.dim_causal);
}

LabeledSample SCM::counterfactual_augment(const LabeledSample& sample, std::mt19937_64& rng) const {
  const auto& domains = config_.domains;
  std::uniform_int_distribution<std::size_t> pick(0, domains.size() - 1);
  const DomainSpec& d = domains[pick(rng)];
  const bool coupled = config_.mode == CouplingMode::LabelCoupled && config_.augment_law == AugmentLaw::DomainLaw;

  LabeledSample out = sample;
  out.z_env = draw_env(d, sample.y, coupled, rng);
  out.x = observe(out.z_causal, out.z_env, rng);
  return out;
}

LabeledSample SCM::counterfactual_augment(const LabeledSample& sample, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  return counterfactual_augment(sample, rng);
}

CausalSupportReport SCM::check_causal_support(const std::vector<int>& domain_ids) const {
  CausalSupportReport report;
  Vector mass = Vector::Zero(config_.num_components);
  for (int id : domain_ids) mass += domain(id).component_weights;
  for (int k = 0; k < config_.num_components; ++k) {
    if (mass(k) <= 0.0) report.uncovered_components.push_back(k);
  }
  report.passed = report.uncovered_components.empty();
  return report;
}

// ---------------------------------------------------------------------- I/O

void write_dataset(const DomainDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "dims e=" << ds.domain << " n=" << ds.size() << " C=" << ds.num_classes << " d_c=" << ds.z_causal.cols()
      << " d_e=" << ds.z_env.cols() << " d_x=" << ds.x.cols() << "\n";
  char buf[40];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.17g", v);
    out << buf;
  };
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    out << ds.labels[i] << "," << ds.components[i];
    for (Eigen::Index j = 0; j < ds.z_causal.cols(); ++j) put(ds.z_causal(i, j));
    for (Eigen::Index j = 0; j < ds.z_env.cols(); ++j) put(ds.z_env(i, j));
    for (Eigen::Index j = 0; j < ds.x.cols(); ++j) put(ds.x(i, j));
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

long parse_header_field(const std::string& header, const std::string& key) {
  const std::string needle = " " + key + "=";
  auto pos = header.find(needle);
  if (pos == std::string::npos) throw FormatError("malformed header: missing '" + key + "'");
  pos += needle.size();
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(header.substr(pos), &used);
  } catch (const std::exception&) {
    throw FormatError("malformed header: bad value for '" + key + "'");
  }
  if (used == 0) throw FormatError("malformed header: bad value for '" + key + "'");
  return v;
}

}  // namespace

DomainDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header) || header.rfind("dims ", 0) != 0)
    throw FormatError(path.string() + ": malformed header");
  const long e = parse_header_field(header, "e");
  const long n = parse_header_field(header, "n");
  const long C = parse_header_field(header, "C");
  const long dc = parse_header_field(header, "d_c");
  const long de = parse_header_field(header, "d_e");
  const long dx = parse_header_field(header, "d_x");
  if (n < 0 || C < 1 || dc < 1 || de < 1 || dx < 1) throw FormatError(path.string() + ": malformed header");

  DomainDataset ds;
  ds.domain = static_cast<int>(e);
  ds.num_classes = static_cast<int>(C);
  ds.x.resize(n, dx);
  ds.z_causal.resize(n, dc);
  ds.z_env.resize(n, de);
  ds.labels.resize(n);
  ds.components.resize(n);
  const long width = 2 + dc + de + dx;

  std::string line;
  std::vector<double> fields;
  for (long i = 0; i < n; ++i) {
    const long row = i + 1;
    if (!std::getline(in, line))
      throw FormatError(path.string() + ": truncated at row " + std::to_string(row) + " of " + std::to_string(n));
    fields.clear();
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (tok.empty() || end != tok.c_str() + tok.size())
        throw FormatError(path.string() + ": row " + std::to_string(row) + ": bad number '" + tok + "'");
      fields.push_back(v);
    }
    if (static_cast<long>(fields.size()) != width)
      throw FormatError(path.string() + ": row " + std::to_string(row) + ": expected " + std::to_string(width) +
                        " fields from header dims, got " + std::to_string(fields.size()));
    ds.labels[i] = static_cast<int>(fields[0]);
    ds.components[i] = static_cast<int>(fields[1]);
    if (ds.labels[i] < 0 || ds.labels[i] >= C)
      throw FormatError(path.string() + ": row " + std::to_string(row) + ": label outside [0, C)");
    std::size_t f = 2;
    for (long j = 0; j < dc; ++j) ds.z_causal(i, j) = fields[f++];
    for (long j = 0; j < de; ++j) ds.z_env(i, j) = fields[f++];
    for (long j = 0; j < dx; ++j) ds.x(i, j) = fields[f++];
  }
  return ds;
}

}  // namespace sra
