// Experiment driver behind the `sra` command line: versioned JSON configs,
// dataset generation with manifests, single training runs with line-oriented
// reports and a metrics CSV row, checkpoint verification on the quantized
// pipeline, parameter sweeps and report aggregation.

#pragma once

#include "sra/algorithms.hpp"
#include "sra/divergence.hpp"
#include "sra/models.hpp"
#include "sra/scm.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sra {

namespace fs = std::filesystem;

inline constexpr int kConfigSchema = 1;

struct ExperimentConfig {
  std::string name;
  SCMConfig scm;
  std::uint64_t structure_seed = 0;
  std::vector<int> training_domains;
  int target_domain = -1;
  Eigen::Index samples_per_domain = 2000;
  AlgoConfig algo;  ///< defaults for every run; variant and seed are per run
  std::vector<std::uint64_t> seeds;
  int verify_resolution = 10000;
  std::string data_dir;   ///< optional default for --data
  std::string canonical;  ///< normalized JSON, the input to config_hash

  /// Throws ConfigError. Also runs SCMConfig::validate.
  void validate() const;
  std::vector<int> domain_ids() const;
  /// Everything except `target`, in config order.
  std::vector<int> training_domains_for(int target) const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const fs::path& path);
/// 16 hex digits of FNV-1a over the canonical JSON.
std::string config_hash(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& bytes);

SCM build_scm(const ExperimentConfig& cfg);

// ----------------------------------------------------------------- datasets

fs::path dataset_path(const fs::path& dir, int domain);
/// Writes domain_<id>.csv for every configured domain plus manifest.json.
void generate(const ExperimentConfig& cfg, const fs::path& out_dir, std::uint64_t seed);
/// Throws std::runtime_error naming the first missing file.
std::vector<DomainDataset> load_domains(const fs::path& dir, const std::vector<int>& ids);

// -------------------------------------------------------------------- runs

/// One row of the fixed metrics schema.
struct MetricsRow {
  std::string run_id;
  std::string variant;
  std::uint64_t seed = 0;
  int target_domain = -1;
  std::string step = "final";
  std::string split = "target";
  double accuracy = 0.0;
  double ce_loss = 0.0;
  double hellinger_loss = 0.0;
  std::optional<double> projection;   ///< L_P
  std::optional<double> adversarial;  ///< L_D
  std::optional<double> penalty;
  double swad_accuracy = 0.0;
};

extern const char* const kMetricsHeader;
std::string format_metrics_row(const MetricsRow& row);
/// Parses a file written by write_metrics_csv; throws FormatError.
std::vector<MetricsRow> read_metrics_csv(const fs::path& path);
void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows);

struct RunOutcome {
  std::string run_id;
  bool ok = false;
  std::string error;
  MetricsRow row;
  fs::path final_checkpoint;
  fs::path swad_checkpoint;
  fs::path report;
  fs::path metrics;
};

std::string make_run_id(Variant v, int target, std::uint64_t seed);

/// Trains on every configured domain except `target`, evaluates on all of
/// them, and writes <run_id>.{final,swad}.ckpt, .report.jsonl and
/// .metrics.csv into `out_dir`. A diverged run is reported (ok = false),
/// not thrown. Missing datasets throw.
RunOutcome train_run(const ExperimentConfig& cfg, const AlgoConfig& algo, int target, const fs::path& data_dir,
                     const fs::path& out_dir, std::string run_id = {});

// ------------------------------------------------------------ verification

/// g_q, h_q and the per-domain quantized samples of one model.
struct QuantizedPipeline {
  QuantizedEncoder encoder;
  Matrix head;
  std::vector<QuantizedDomain> domains;
  std::vector<int> subspace_of_cell;  ///< argmax class of each head row
  int num_subspaces = 0;
};

/// Codebook: the model's prototypes when it has them, else spherical
/// k-means with 16 C centers over the pooled representations.
QuantizedPipeline build_quantized_pipeline(const ModelBundle& model, const SCM& scm,
                                           const std::vector<DomainDataset>& domains, std::uint64_t seed = 0);

/// Lower bound on unordered pairs, upper bound on ordered pairs, then the
/// subspace decomposition and per-subspace label-marginal bounds.
std::vector<BoundRecord> check_bounds(const QuantizedPipeline& pipeline);

struct SubspaceMarginalReport {
  int resolution = 0;
  double epsilon = 0.0;         ///< 2 C / R
  double max_divergence = 0.0;  ///< max D_{1/2} over shared subspaces
  double max_distance = 0.0;    ///< max d_{1/2}
  int compared_pairs = 0;
  double control_max_distance = 0.0;  ///< same, random linear projector
  int control_pairs = 0;
  BoundRecord record;  ///< max_divergence <= epsilon
};

/// Oracle posterior as projector, subspaces = cells of a 1/R grid on the
/// simplex, label marginals = mean oracle posterior per (subspace, domain).
SubspaceMarginalReport verify_subspace_marginals(const SCM& scm, const std::vector<DomainDataset>& domains,
                                                 int resolution, std::uint64_t control_seed = 0);

struct VerifyOutcome {
  std::vector<BoundRecord> records;
  SubspaceMarginalReport marginals;
  int violations = 0;
  fs::path report;
};

/// Writes <checkpoint stem>.verify.jsonl into `out_dir`.
VerifyOutcome verify_checkpoint(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                                const fs::path& out_dir);

// ------------------------------------------------------------------- sweeps

struct GridCell {
  std::string id;
  Variant variant = Variant::ERM;
  std::optional<double> penalty_weight;
  std::optional<double> lambda_d;
  std::optional<double> lambda_p;
  std::optional<int> steps;
};

struct SweepGrid {
  std::string name;
  std::vector<GridCell> cells;
  std::vector<std::uint64_t> seeds;  ///< falls back to the config's seeds
  std::optional<int> target;
  std::uint64_t data_seed = 0;
  bool verify = true;
};

SweepGrid parse_grid(const std::string& json_text);
SweepGrid load_grid(const fs::path& path);

struct SummaryRow {
  std::string cell;
  std::string variant;
  int runs = 0;
  int failed = 0;
  double accuracy_mean = 0.0, accuracy_std = 0.0;
  double hellinger_mean = 0.0, hellinger_std = 0.0;
  double swad_accuracy_mean = 0.0, swad_accuracy_std = 0.0;
};

struct SweepOutcome {
  std::vector<RunOutcome> runs;  ///< cell-major, seed-minor
  std::vector<SummaryRow> summary;
  std::vector<std::string> cell_of_run;
  int violations = 0;
};

/// Worker count from SRA_WORKERS (default 1). Throws on a malformed value.
int workers_from_env();

/// Generates data into <out>/data unless `data_dir` is given, runs every
/// (cell, seed) into <out>/runs/<cell>_s<seed>/, optionally verifies each
/// final checkpoint, and writes sweep_rows.csv and sweep_summary.csv.
SweepOutcome sweep(const ExperimentConfig& cfg, const SweepGrid& grid, const fs::path& out_dir,
                   std::optional<fs::path> data_dir = std::nullopt, int workers = 1);

/// Sample mean and standard deviation (n - 1); std is 0 for n < 2.
std::pair<double, double> mean_std(const std::vector<double>& v);

// ------------------------------------------------------------------ report

struct TheoremTally {
  int checked = 0;
  int violated = 0;
};

struct ReportOutcome {
  int runs = 0;
  std::map<std::string, TheoremTally> theorems;
  std::vector<std::string> violations;  ///< one line per violated record
  std::string text;                     ///< the plain-text summary
};

/// Reads every *.metrics.csv and *.jsonl below `dir`, writes report_table.csv
/// and report_summary.txt into it. Throws if nothing is found.
ReportOutcome report(const fs::path& dir);

}  // namespace sra
