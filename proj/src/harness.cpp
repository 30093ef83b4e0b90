#include "sra/harness.hpp"

#include "sra/checkpoint.hpp"
#include "sra/prototypes.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace sra {

using json = nlohmann::json;

namespace {

void expect_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

Vector to_vector(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + " must be an array");
  Vector v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

Matrix to_matrix(const json& arr, const std::string& where) {
  if (!arr.is_array() || arr.empty()) throw ConfigError(where + " must be a non-empty array of rows");
  const std::size_t cols = arr[0].size();
  Matrix m(static_cast<Eigen::Index>(arr.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_array() || arr[i].size() != cols) throw ConfigError(where + ": ragged rows");
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = arr[i][j].get<double>();
  }
  return m;
}

CouplingMode parse_mode(const std::string& s) {
  if (s == "graph_faithful") return CouplingMode::GraphFaithful;
  if (s == "label_coupled") return CouplingMode::LabelCoupled;
  throw ConfigError("unknown scm mode '" + s + "'");
}

AugmentLaw parse_law(const std::string& s) {
  if (s == "domain_law") return AugmentLaw::DomainLaw;
  if (s == "environment_space") return AugmentLaw::EnvironmentSpace;
  throw ConfigError("unknown augment_law '" + s + "'");
}

void parse_scm(const json& j, ExperimentConfig& cfg) {
  expect_keys(j,
              {"classes", "components", "dim_causal", "dim_env", "dim_obs", "sigma_causal", "sigma_env", "sigma_obs",
               "temperature", "coupling_shift", "mode", "augment_law", "component_spread", "component_jitter",
               "env_mean_scale", "structure_seed", "domains", "component_means", "label_weights", "mixing"},
              "scm");
  SCMConfig& s = cfg.scm;
  read_opt(j, "classes", s.num_classes);
  read_opt(j, "components", s.num_components);
  read_opt(j, "dim_causal", s.dim_causal);
  read_opt(j, "dim_env", s.dim_env);
  read_opt(j, "dim_obs", s.dim_obs);
  read_opt(j, "sigma_causal", s.sigma_causal);
  read_opt(j, "sigma_env", s.sigma_env);
  read_opt(j, "sigma_obs", s.sigma_obs);
  read_opt(j, "temperature", s.temperature);
  read_opt(j, "coupling_shift", s.coupling_shift);
  read_opt(j, "component_spread", s.component_spread);
  read_opt(j, "component_jitter", s.component_jitter);
  read_opt(j, "env_mean_scale", s.env_mean_scale);
  read_opt(j, "structure_seed", cfg.structure_seed);
  if (j.contains("mode")) s.mode = parse_mode(j.at("mode").get<std::string>());
  if (j.contains("augment_law")) s.augment_law = parse_law(j.at("augment_law").get<std::string>());
  if (j.contains("component_means")) s.component_means = to_matrix(j.at("component_means"), "scm.component_means");
  if (j.contains("label_weights")) s.label_weights = to_matrix(j.at("label_weights"), "scm.label_weights");
  if (j.contains("mixing")) s.mixing = to_matrix(j.at("mixing"), "scm.mixing");

  if (!j.contains("domains") || !j.at("domains").is_array()) throw ConfigError("scm.domains must be an array");
  for (const auto& d : j.at("domains")) {
    expect_keys(d, {"id", "component_weights", "env_mean", "rho"}, "scm.domains[]");
    if (!d.contains("id") || !d.contains("component_weights"))
      throw ConfigError("scm.domains[]: 'id' and 'component_weights' are required");
    DomainSpec spec;
    spec.id = d.at("id").get<int>();
    const std::string where = "domain " + std::to_string(spec.id);
    spec.component_weights = to_vector(d.at("component_weights"), where + " component_weights");
    if (d.contains("env_mean")) spec.env_mean = to_vector(d.at("env_mean"), where + " env_mean");
    read_opt(d, "rho", spec.rho);
    s.domains.push_back(std::move(spec));
  }
}

void parse_training(const json& j, AlgoConfig& a) {
  expect_keys(j,
              {"steps", "batch_size", "lr", "beta1", "beta2", "adam_eps", "penalty_weight", "lambda_d", "lambda_p",
               "sinkhorn_epsilon", "sinkhorn_iters", "grl_lambda", "grl_ramp", "swad_window", "latent_dim", "hidden",
               "prototypes_per_class", "prototype_sample_init", "log_every"},
              "training");
  read_opt(j, "steps", a.steps);
  read_opt(j, "batch_size", a.batch_size);
  read_opt(j, "lr", a.adam.lr);
  read_opt(j, "beta1", a.adam.beta1);
  read_opt(j, "beta2", a.adam.beta2);
  read_opt(j, "adam_eps", a.adam.eps);
  read_opt(j, "penalty_weight", a.penalty_weight);
  read_opt(j, "lambda_d", a.lambda_d);
  read_opt(j, "lambda_p", a.lambda_p);
  read_opt(j, "sinkhorn_epsilon", a.sinkhorn_epsilon);
  read_opt(j, "sinkhorn_iters", a.sinkhorn_iters);
  read_opt(j, "grl_lambda", a.grl_lambda);
  read_opt(j, "grl_ramp", a.grl_ramp);
  read_opt(j, "swad_window", a.swad_window);
  read_opt(j, "latent_dim", a.latent_dim);
  read_opt(j, "hidden", a.hidden);
  read_opt(j, "prototypes_per_class", a.prototypes_per_class);
  read_opt(j, "prototype_sample_init", a.prototype_sample_init);
  read_opt(j, "log_every", a.log_every);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::optional<double> finite_or_none(double v) {
  if (std::isfinite(v)) return v;
  return std::nullopt;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

json to_json(const BoundRecord& r) {
  json terms = json::object();
  for (const auto& [name, value] : r.rhs_terms) terms[name] = value;
  return json{{"type", "bound"},     {"theorem", r.theorem},     {"domain_a", r.domain_a},
              {"domain_b", r.domain_b}, {"subspace", r.subspace}, {"lhs", r.lhs},
              {"rhs", r.rhs},         {"terms", terms},           {"tolerance", r.tolerance},
              {"satisfied", r.satisfied}};
}

json metrics_json(const std::string& model, int domain, const std::string& split, const Metrics& m) {
  return json{{"type", "metrics"}, {"model", model},           {"domain", domain},
              {"split", split},    {"accuracy", m.accuracy},   {"ce_loss", m.cross_entropy},
              {"hellinger_loss", m.hellinger_loss}};
}

void write_jsonl(const fs::path& path, const std::vector<json>& lines) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  write_text(path, text);
}

bool valid_cell_id(const std::string& id) {
  return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

}  // namespace

// ------------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  scm.validate();
  const std::vector<int> ids = domain_ids();
  auto known = [&](int id) { return std::find(ids.begin(), ids.end(), id) != ids.end(); };
  if (!known(target_domain)) throw ConfigError("target domain " + std::to_string(target_domain) + " is not configured");
  if (training_domains.empty()) throw ConfigError("training_domains is empty");
  std::set<int> seen;
  for (int d : training_domains) {
    if (!known(d)) throw ConfigError("training domain " + std::to_string(d) + " is not configured");
    if (d == target_domain) throw ConfigError("target domain " + std::to_string(d) + " is listed as a training domain");
    if (!seen.insert(d).second) throw ConfigError("training domain " + std::to_string(d) + " listed twice");
  }
  if (seeds.empty()) throw ConfigError("seeds list is empty");
  if (samples_per_domain < 1) throw ConfigError("samples_per_domain must be >= 1");
  if (verify_resolution < 1) throw ConfigError("verify.resolution must be >= 1");
  try {
    algo.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
}

std::vector<int> ExperimentConfig::domain_ids() const {
  std::vector<int> ids;
  for (const auto& d : scm.domains) ids.push_back(d.id);
  return ids;
}

std::vector<int> ExperimentConfig::training_domains_for(int target) const {
  if (target == target_domain) return training_domains;
  const std::vector<int> ids = domain_ids();
  if (std::find(ids.begin(), ids.end(), target) == ids.end())
    throw ConfigError("target domain " + std::to_string(target) + " is not configured");
  std::vector<int> pool = training_domains;
  pool.push_back(target_domain);
  std::vector<int> out;
  for (int id : ids)
    if (id != target && std::find(pool.begin(), pool.end(), id) != pool.end()) out.push_back(id);
  return out;
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    expect_keys(j, {"schema", "name", "scm", "experiment", "training", "verify"}, "config");
    if (!j.contains("schema")) throw ConfigError("config lacks 'schema'");
    const int schema = j.at("schema").get<int>();
    if (schema != kConfigSchema)
      throw ConfigError("unsupported config schema " + std::to_string(schema) + " (expected " +
                        std::to_string(kConfigSchema) + ")");
    read_opt(j, "name", cfg.name);
    if (!j.contains("scm")) throw ConfigError("config lacks 'scm'");
    parse_scm(j.at("scm"), cfg);

    if (!j.contains("experiment")) throw ConfigError("config lacks 'experiment'");
    const json& e = j.at("experiment");
    expect_keys(e, {"training_domains", "target", "samples_per_domain", "seeds", "data_dir"}, "experiment");
    read_opt(e, "training_domains", cfg.training_domains);
    read_opt(e, "target", cfg.target_domain);
    read_opt(e, "samples_per_domain", cfg.samples_per_domain);
    read_opt(e, "seeds", cfg.seeds);
    read_opt(e, "data_dir", cfg.data_dir);

    if (j.contains("training")) parse_training(j.at("training"), cfg.algo);
    if (j.contains("verify")) {
      expect_keys(j.at("verify"), {"resolution"}, "verify");
      read_opt(j.at("verify"), "resolution", cfg.verify_resolution);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.canonical = j.dump();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) { return parse_config(read_file(path)); }

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(cfg.canonical); }

SCM build_scm(const ExperimentConfig& cfg) { return SCM(cfg.scm, cfg.structure_seed); }

// ----------------------------------------------------------------- datasets

fs::path dataset_path(const fs::path& dir, int domain) { return dir / ("domain_" + std::to_string(domain) + ".csv"); }

void generate(const ExperimentConfig& cfg, const fs::path& out_dir, std::uint64_t seed) {
  cfg.validate();
  const SCM scm = build_scm(cfg);
  fs::create_directories(out_dir);
  json files = json::array();
  for (int id : cfg.domain_ids()) {
    const DomainDataset ds = scm.sample_domain(id, cfg.samples_per_domain, splitmix(seed ^ splitmix(id + 1)));
    const fs::path p = dataset_path(out_dir, id);
    write_dataset(ds, p);
    files.push_back({{"domain", id}, {"file", p.filename().string()}, {"rows", ds.size()},
                     {"fnv1a", fnv1a_hex(read_file(p))}});
  }
  json manifest{{"schema", kConfigSchema}, {"config_name", cfg.name},   {"config_hash", config_hash(cfg)},
                {"seed", seed},            {"structure_seed", cfg.structure_seed}, {"files", files}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<DomainDataset> load_domains(const fs::path& dir, const std::vector<int>& ids) {
  std::vector<DomainDataset> out;
  for (int id : ids) {
    const fs::path p = dataset_path(dir, id);
    if (!fs::exists(p)) throw std::runtime_error("missing dataset " + p.string() + " (run `sra generate` first)");
    out.push_back(read_dataset(p));
    if (out.back().domain != id)
      throw FormatError(p.string() + ": holds domain " + std::to_string(out.back().domain) + ", expected " +
                        std::to_string(id));
  }
  return out;
}

// ---------------------------------------------------------------- metrics

const char* const kMetricsHeader =
    "run_id,variant,seed,target_domain,step/final,split,accuracy,ce_loss,hellinger_loss,L_P,L_D,penalty,swad_accuracy";

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.variant << ',' << r.seed << ',' << r.target_domain << ',' << r.step << ',' << r.split
     << ',' << fmt(r.accuracy) << ',' << fmt(r.ce_loss) << ',' << fmt(r.hellinger_loss) << ',' << fmt(r.projection)
     << ',' << fmt(r.adversarial) << ',' << fmt(r.penalty) << ',' << fmt(r.swad_accuracy);
  return os.str();
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) text += format_metrics_row(r) + "\n";
  write_text(path, text);
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError(path.string() + ": unexpected CSV header");
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 13) throw FormatError(where + ": expected 13 fields, got " + std::to_string(f.size()));
    auto num = [&](const std::string& s) -> double {
      if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end != s.c_str() + s.size()) throw FormatError(where + ": bad number '" + s + "'");
      return v;
    };
    MetricsRow r;
    r.run_id = f[0];
    r.variant = f[1];
    r.seed = std::stoull(f[2]);
    r.target_domain = std::stoi(f[3]);
    r.step = f[4];
    r.split = f[5];
    r.accuracy = num(f[6]);
    r.ce_loss = num(f[7]);
    r.hellinger_loss = num(f[8]);
    r.projection = finite_or_none(num(f[9]));
    r.adversarial = finite_or_none(num(f[10]));
    r.penalty = finite_or_none(num(f[11]));
    r.swad_accuracy = num(f[12]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// -------------------------------------------------------------------- runs

std::string make_run_id(Variant v, int target, std::uint64_t seed) {
  return to_string(v) + "_t" + std::to_string(target) + "_s" + std::to_string(seed);
}

RunOutcome train_run(const ExperimentConfig& cfg, const AlgoConfig& algo, int target, const fs::path& data_dir,
                     const fs::path& out_dir, std::string run_id) {
  const std::vector<int> train_ids = cfg.training_domains_for(target);
  const std::vector<int> all_ids = cfg.domain_ids();
  const std::vector<DomainDataset> all = load_domains(data_dir, all_ids);
  std::vector<DomainDataset> train_sets;
  for (int id : train_ids)
    for (const auto& d : all)
      if (d.domain == id) train_sets.push_back(d);
  const SCM scm = build_scm(cfg);

  if (run_id.empty()) run_id = make_run_id(algo.variant, target, algo.seed);
  fs::create_directories(out_dir);
  RunOutcome out;
  out.run_id = run_id;
  out.report = out_dir / (run_id + ".report.jsonl");
  out.metrics = out_dir / (run_id + ".metrics.csv");
  out.row.run_id = run_id;
  out.row.variant = to_string(algo.variant);
  out.row.seed = algo.seed;
  out.row.target_domain = target;

  json run{{"type", "run"},
           {"run_id", run_id},
           {"variant", to_string(algo.variant)},
           {"seed", algo.seed},
           {"target_domain", target},
           {"training_domains", train_ids},
           {"config_hash", config_hash(cfg)},
           {"steps", algo.steps},
           {"penalty_weight", algo.penalty_weight},
           {"lambda_d", algo.lambda_d},
           {"lambda_p", algo.lambda_p}};
  std::vector<json> lines;

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<TrainResult> result;
  try {
    result = train(algo, train_sets, &scm, target);
  } catch (const TrainingDiverged& e) {
    out.error = e.what();
  }
  run["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!result) {
    run["status"] = "diverged";
    run["error"] = out.error;
    lines.push_back(run);
    write_jsonl(out.report, lines);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.row.accuracy = out.row.ce_loss = out.row.hellinger_loss = out.row.swad_accuracy = nan;
    write_metrics_csv(out.metrics, {out.row});
    return out;
  }

  run["status"] = "ok";
  lines.push_back(run);
  for (const auto& s : result->history.steps)
    lines.push_back({{"type", "step"},
                     {"step", s.step},
                     {"total", s.total},
                     {"erm", s.erm},
                     {"penalty", nullable(s.penalty)},
                     {"L_P", nullable(s.projection)},
                     {"L_D", nullable(s.adversarial)}});
  const bool leaked = std::find(result->history.batch_domains.begin(), result->history.batch_domains.end(), target) !=
                      result->history.batch_domains.end();
  lines.push_back({{"type", "audit"},
                   {"batch_domains", result->history.batch_domains},
                   {"target_domain", target},
                   {"target_in_batches", leaked}});

  for (const auto& d : all) {
    const std::string split = d.domain == target ? "target" : "train";
    const Metrics f = evaluate(result->final_model, d, scm);
    const Metrics w = evaluate(result->averaged_model, d, scm);
    lines.push_back(metrics_json("final", d.domain, split, f));
    lines.push_back(metrics_json("swad", d.domain, split, w));
    if (d.domain == target) {
      out.row.accuracy = f.accuracy;
      out.row.ce_loss = f.cross_entropy;
      out.row.hellinger_loss = f.hellinger_loss;
      out.row.swad_accuracy = w.accuracy;
    }
  }
  if (!result->history.steps.empty()) {
    const StepRecord& last = result->history.steps.back();
    out.row.projection = finite_or_none(last.projection);
    out.row.adversarial = finite_or_none(last.adversarial);
    out.row.penalty = finite_or_none(last.penalty);
  }

  out.final_checkpoint = out_dir / (run_id + ".final.ckpt");
  out.swad_checkpoint = out_dir / (run_id + ".swad.ckpt");
  write_checkpoint(result->final_model, out.final_checkpoint);
  write_checkpoint(result->averaged_model, out.swad_checkpoint);
  write_jsonl(out.report, lines);
  write_metrics_csv(out.metrics, {out.row});
  out.ok = true;
  return out;
}

// ------------------------------------------------------------ verification

QuantizedPipeline build_quantized_pipeline(const ModelBundle& model, const SCM& scm,
                                           const std::vector<DomainDataset>& domains, std::uint64_t seed) {
  if (domains.empty()) throw std::invalid_argument("build_quantized_pipeline: no domains");
  const int C = scm.config().num_classes;
  if (model.arch.num_classes != C || model.arch.input_dim != scm.config().dim_obs)
    throw ShapeError("checkpoint architecture does not match the configured SCM");

  std::vector<Matrix> reps;
  Eigen::Index total = 0;
  for (const auto& d : domains) {
    reps.push_back(model.encode(d.x));
    total += reps.back().rows();
  }
  Matrix codebook;
  if (model.has_prototypes()) {
    codebook = model.prototypes().vectors;
  } else {
    Matrix pooled(total, reps.front().cols());
    Eigen::Index r = 0;
    for (const auto& z : reps) {
      pooled.middleRows(r, z.rows()) = z;
      r += z.rows();
    }
    codebook = spherical_kmeans(pooled, kPrototypesPerClass * C, seed).vectors;
  }

  QuantizedPipeline p;
  p.encoder = quantize_encoder(codebook);
  for (std::size_t i = 0; i < domains.size(); ++i)
    p.domains.push_back({domains[i].domain, p.encoder(reps[i]), scm.oracle_posteriors(domains[i].z_causal)});
  p.head = fit_quantized_head(p.domains, p.encoder.num_cells(), C);
  p.num_subspaces = C;
  p.subspace_of_cell.resize(p.encoder.num_cells());
  for (int k = 0; k < p.encoder.num_cells(); ++k) {
    Eigen::Index arg = 0;
    p.head.row(k).maxCoeff(&arg);
    p.subspace_of_cell[k] = static_cast<int>(arg);
  }
  return p;
}

std::vector<BoundRecord> check_bounds(const QuantizedPipeline& p) {
  std::vector<BoundRecord> out;
  const std::size_t n = p.domains.size();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) out.push_back(bound_lower(p.head, p.domains[a], p.domains[b]));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (a != b) out.push_back(bound_upper(p.head, p.domains[a], p.domains[b]));
  SubspaceBoundReport sub = bound_subspace(p.head, p.subspace_of_cell, p.num_subspaces, p.domains);
  out.push_back(sub.decomposition);
  out.insert(out.end(), sub.per_subspace.begin(), sub.per_subspace.end());
  return out;
}

namespace {

struct Marginals {
  std::vector<std::vector<Vector>> sums;  // subspace -> domain -> class sums
  std::vector<std::vector<long>> counts;
};

// Max pairwise (D, d) over subspaces that two domains share.
std::tuple<double, double, int> max_pairwise(const Marginals& m) {
  double max_D = 0.0, max_d = 0.0;
  int pairs = 0;
  for (std::size_t s = 0; s < m.sums.size(); ++s) {
    const std::size_t nd = m.sums[s].size();
    for (std::size_t a = 0; a < nd; ++a)
      for (std::size_t b = a + 1; b < nd; ++b) {
        if (m.counts[s][a] == 0 || m.counts[s][b] == 0) continue;
        const Vector pa = m.sums[s][a] / static_cast<double>(m.counts[s][a]);
        const Vector pb = m.sums[s][b] / static_cast<double>(m.counts[s][b]);
        const double D = hellinger_sq(pa, pb);
        max_D = std::max(max_D, D);
        max_d = std::max(max_d, std::sqrt(D));
        ++pairs;
      }
  }
  return {max_D, max_d, pairs};
}

}  // namespace

SubspaceMarginalReport verify_subspace_marginals(const SCM& scm, const std::vector<DomainDataset>& domains,
                                                 int resolution, std::uint64_t control_seed) {
  if (resolution < 1) throw std::invalid_argument("verify_subspace_marginals: resolution must be >= 1");
  const int C = scm.config().num_classes;
  const std::size_t nd = domains.size();
  SubspaceMarginalReport rep;
  rep.resolution = resolution;
  rep.epsilon = 2.0 * C / resolution;

  std::vector<Matrix> post;
  for (const auto& d : domains) post.push_back(scm.oracle_posteriors(d.z_causal));

  auto add = [&](Marginals& m, int s, std::size_t e, const Vector& p) {
    while (static_cast<int>(m.sums.size()) <= s) {
      m.sums.emplace_back(nd, Vector::Zero(C));
      m.counts.emplace_back(nd, 0);
    }
    m.sums[s][e] += p;
    m.counts[s][e] += 1;
  };

  Marginals grid;
  std::map<std::vector<long long>, int> cell_index;
  for (std::size_t e = 0; e < nd; ++e)
    for (Eigen::Index i = 0; i < post[e].rows(); ++i) {
      const Vector p = post[e].row(i).transpose();
      std::vector<long long> key(C);
      for (int c = 0; c < C; ++c) key[c] = std::llround(p(c) * resolution);
      auto [it, _] = cell_index.emplace(std::move(key), static_cast<int>(cell_index.size()));
      add(grid, it->second, e, p);
    }
  std::tie(rep.max_divergence, rep.max_distance, rep.compared_pairs) = max_pairwise(grid);

  // random linear projector on x
  std::mt19937_64 rng(control_seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix w(C, scm.config().dim_obs);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = g(rng);
  Marginals control;
  for (std::size_t e = 0; e < nd; ++e) {
    const Matrix scores = domains[e].x * w.transpose();
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      Eigen::Index arg = 0;
      scores.row(i).maxCoeff(&arg);
      add(control, static_cast<int>(arg), e, post[e].row(i).transpose());
    }
  }
  double ignored = 0.0;
  std::tie(ignored, rep.control_max_distance, rep.control_pairs) = max_pairwise(control);

  rep.record.theorem = "subspace_marginal_optimal";
  rep.record.lhs = rep.max_divergence;
  rep.record.rhs_terms = {{"epsilon", rep.epsilon}};
  rep.record.rhs = rep.epsilon;
  rep.record.tolerance = kBoundSlack;
  rep.record.satisfied = rep.max_divergence <= rep.epsilon + kBoundSlack;
  return rep;
}

VerifyOutcome verify_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                                const fs::path& out_dir) {
  if (!fs::exists(checkpoint)) throw std::runtime_error("missing checkpoint " + checkpoint.string());
  const ModelBundle model = read_checkpoint(checkpoint);
  const SCM scm = build_scm(cfg);
  const std::vector<DomainDataset> sets = load_domains(data_dir, cfg.domain_ids());

  const QuantizedPipeline pipe = build_quantized_pipeline(model, scm, sets);
  VerifyOutcome out;
  out.records = check_bounds(pipe);
  out.marginals = verify_subspace_marginals(scm, sets, cfg.verify_resolution);
  out.records.push_back(out.marginals.record);
  for (const auto& r : out.records)
    if (!r.satisfied) ++out.violations;

  std::vector<json> lines;
  lines.push_back({{"type", "verify"},
                   {"checkpoint", checkpoint.filename().string()},
                   {"variant", to_string(model.variant)},
                   {"config_hash", config_hash(cfg)},
                   {"codebook", model.has_prototypes() ? "prototypes" : "spherical_kmeans"},
                   {"cells", pipe.encoder.num_cells()},
                   {"subspaces", pipe.num_subspaces},
                   {"violations", out.violations}});
  for (const auto& r : out.records) lines.push_back(to_json(r));
  lines.push_back({{"type", "subspace_marginals"},
                   {"resolution", out.marginals.resolution},
                   {"epsilon", out.marginals.epsilon},
                   {"max_divergence", out.marginals.max_divergence},
                   {"max_distance", out.marginals.max_distance},
                   {"compared_pairs", out.marginals.compared_pairs},
                   {"control_max_distance", out.marginals.control_max_distance},
                   {"control_pairs", out.marginals.control_pairs}});
  fs::create_directories(out_dir);
  out.report = out_dir / (checkpoint.stem().string() + ".verify.jsonl");
  write_jsonl(out.report, lines);
  return out;
}

// ------------------------------------------------------------------- sweeps

SweepGrid parse_grid(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("grid is not valid JSON: ") + e.what());
  }
  SweepGrid g;
  try {
    expect_keys(j, {"schema", "name", "cells", "seeds", "target", "data_seed", "verify"}, "grid");
    if (!j.contains("schema") || j.at("schema").get<int>() != kConfigSchema)
      throw ConfigError("grid: missing or unsupported schema");
    read_opt(j, "name", g.name);
    read_opt(j, "seeds", g.seeds);
    read_opt(j, "data_seed", g.data_seed);
    read_opt(j, "verify", g.verify);
    if (j.contains("target")) g.target = j.at("target").get<int>();
    if (!j.contains("cells") || !j.at("cells").is_array() || j.at("cells").empty())
      throw ConfigError("grid: 'cells' must be a non-empty array");
    std::set<std::string> ids;
    for (const auto& c : j.at("cells")) {
      expect_keys(c, {"id", "variant", "penalty_weight", "lambda_d", "lambda_p", "steps"}, "grid.cells[]");
      GridCell cell;
      cell.id = c.at("id").get<std::string>();
      if (!valid_cell_id(cell.id)) throw ConfigError("grid: cell id '" + cell.id + "' must match [A-Za-z0-9_.-]+");
      if (!ids.insert(cell.id).second) throw ConfigError("grid: duplicate cell id '" + cell.id + "'");
      try {
        cell.variant = parse_variant(c.at("variant").get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("grid: ") + e.what());
      }
      if (c.contains("penalty_weight")) cell.penalty_weight = c.at("penalty_weight").get<double>();
      if (c.contains("lambda_d")) cell.lambda_d = c.at("lambda_d").get<double>();
      if (c.contains("lambda_p")) cell.lambda_p = c.at("lambda_p").get<double>();
      if (c.contains("steps")) cell.steps = c.at("steps").get<int>();
      g.cells.push_back(std::move(cell));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  return g;
}

SweepGrid load_grid(const fs::path& path) { return parse_grid(read_file(path)); }

int workers_from_env() {
  const char* v = std::getenv("SRA_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) throw std::invalid_argument(std::string("SRA_WORKERS: bad value '") + v + "'");
  return static_cast<int>(n);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

SweepOutcome sweep(const ExperimentConfig& cfg, const SweepGrid& grid, const fs::path& out_dir,
                   std::optional<fs::path> data_dir, int workers) {
  if (grid.cells.empty()) throw ConfigError("grid has no cells");
  if (workers < 1) throw std::invalid_argument("sweep: workers must be >= 1");
  const std::vector<std::uint64_t> seeds = grid.seeds.empty() ? cfg.seeds : grid.seeds;
  const int target = grid.target.value_or(cfg.target_domain);
  cfg.training_domains_for(target);

  fs::create_directories(out_dir);
  const fs::path data = data_dir.value_or(out_dir / "data");
  if (!data_dir) generate(cfg, data, grid.data_seed);

  struct Job {
    const GridCell* cell;
    AlgoConfig algo;
    std::string run_id;
  };
  std::vector<Job> jobs;
  for (const auto& cell : grid.cells)
    for (std::uint64_t seed : seeds) {
      AlgoConfig a = cfg.algo;
      a.variant = cell.variant;
      a.seed = seed;
      if (cell.penalty_weight) a.penalty_weight = *cell.penalty_weight;
      if (cell.lambda_d) a.lambda_d = *cell.lambda_d;
      if (cell.lambda_p) a.lambda_p = *cell.lambda_p;
      if (cell.steps) a.steps = *cell.steps;
      jobs.push_back({&cell, a, cell.id + "_s" + std::to_string(seed)});
    }

  SweepOutcome out;
  out.runs.resize(jobs.size());
  std::vector<int> violations(jobs.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      const fs::path run_dir = out_dir / "runs" / job.run_id;
      RunOutcome r;
      try {
        r = train_run(cfg, job.algo, target, data, run_dir, job.run_id);
        if (r.ok && grid.verify) violations[i] = verify_checkpoint(cfg, r.final_checkpoint, data, run_dir).violations;
      } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
        r.run_id = job.run_id;
        r.row.run_id = job.run_id;
        r.row.variant = to_string(job.algo.variant);
        r.row.seed = job.algo.seed;
        r.row.target_domain = target;
        r.row.accuracy = r.row.ce_loss = r.row.hellinger_loss = r.row.swad_accuracy =
            std::numeric_limits<double>::quiet_NaN();
      }
      out.runs[i] = std::move(r);
    }
  };
  const int n_threads = std::min<int>(workers, static_cast<int>(jobs.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    rows.push_back(out.runs[i].row);
    out.cell_of_run.push_back(jobs[i].cell->id);
    out.violations += violations[i];
  }
  write_metrics_csv(out_dir / "sweep_rows.csv", rows);

  std::string text =
      "cell,variant,runs,failed,accuracy_mean,accuracy_std,hellinger_loss_mean,hellinger_loss_std,"
      "swad_accuracy_mean,swad_accuracy_std\n";
  for (const auto& cell : grid.cells) {
    SummaryRow s;
    s.cell = cell.id;
    s.variant = to_string(cell.variant);
    std::vector<double> acc, hel, swad;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].cell != &cell) continue;
      ++s.runs;
      if (!out.runs[i].ok) {
        ++s.failed;
        continue;
      }
      acc.push_back(out.runs[i].row.accuracy);
      hel.push_back(out.runs[i].row.hellinger_loss);
      swad.push_back(out.runs[i].row.swad_accuracy);
    }
    std::tie(s.accuracy_mean, s.accuracy_std) = mean_std(acc);
    std::tie(s.hellinger_mean, s.hellinger_std) = mean_std(hel);
    std::tie(s.swad_accuracy_mean, s.swad_accuracy_std) = mean_std(swad);
    text += s.cell + "," + s.variant + "," + std::to_string(s.runs) + "," + std::to_string(s.failed) + "," +
            fmt(s.accuracy_mean) + "," + fmt(s.accuracy_std) + "," + fmt(s.hellinger_mean) + "," +
            fmt(s.hellinger_std) + "," + fmt(s.swad_accuracy_mean) + "," + fmt(s.swad_accuracy_std) + "\n";
    out.summary.push_back(std::move(s));
  }
  write_text(out_dir / "sweep_summary.csv", text);
  return out;
}

// ------------------------------------------------------------------ report

ReportOutcome report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("report: " + dir.string() + " is not a directory");
  std::vector<fs::path> csvs, logs;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > 12 && name.ends_with(".metrics.csv")) csvs.push_back(entry.path());
    else if (name.ends_with(".jsonl")) logs.push_back(entry.path());
  }
  if (csvs.empty() && logs.empty()) throw std::runtime_error("report: no run outputs under " + dir.string());
  std::sort(csvs.begin(), csvs.end());
  std::sort(logs.begin(), logs.end());

  std::vector<MetricsRow> rows;
  for (const auto& p : csvs) {
    auto r = read_metrics_csv(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::stable_sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) { return a.run_id < b.run_id; });

  ReportOutcome out;
  out.runs = static_cast<int>(rows.size());
  for (const auto& p : logs) {
    std::istringstream in(read_file(p));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error&) {
        throw FormatError(p.string() + ":" + std::to_string(lineno) + ": not a JSON record");
      }
      if (j.value("type", "") != "bound") continue;
      const std::string theorem = j.at("theorem").get<std::string>();
      TheoremTally& t = out.theorems[theorem];
      ++t.checked;
      if (!j.at("satisfied").get<bool>()) {
        ++t.violated;
        std::ostringstream os;
        os << fs::relative(p, dir).string() << ": " << theorem << " a=" << j.at("domain_a") << " b=" << j.at("domain_b")
           << " subspace=" << j.at("subspace") << " lhs=" << j.at("lhs") << " rhs=" << j.at("rhs");
        out.violations.push_back(os.str());
      }
    }
  }

  write_metrics_csv(dir / "report_table.csv", rows);

  std::ostringstream os;
  os << "runs: " << out.runs << "\n\n";
  std::map<std::string, std::vector<const MetricsRow*>> by_variant;
  for (const auto& r : rows) by_variant[r.variant].push_back(&r);
  if (!by_variant.empty()) {
    os << "variant     runs  accuracy (mean +- std)   swad accuracy (mean +- std)\n";
    for (const auto& [variant, list] : by_variant) {
      std::vector<double> acc, swad;
      for (const auto* r : list)
        if (std::isfinite(r->accuracy)) {
          acc.push_back(r->accuracy);
          swad.push_back(r->swad_accuracy);
        }
      const auto [am, as] = mean_std(acc);
      const auto [sm, ss] = mean_std(swad);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-10s %5zu  %.4f +- %.4f         %.4f +- %.4f\n", variant.c_str(), list.size(), am,
                    as, sm, ss);
      os << buf;
    }
    os << "\n";
  }
  os << "theorem checks:\n";
  if (out.theorems.empty()) os << "  (none recorded)\n";
  for (const auto& [name, t] : out.theorems)
    os << "  " << name << ": " << t.checked << " checked, " << t.violated << " violated\n";
  if (!out.violations.empty()) {
    os << "\nviolations:\n";
    for (const auto& v : out.violations) os << "  " << v << "\n";
  }
  out.text = os.str();
  write_text(dir / "report_summary.txt", out.text);
  return out;
}

}  // namespace sra
