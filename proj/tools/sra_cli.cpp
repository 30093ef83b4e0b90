// sra: generate data, train, verify bounds, sweep grids, aggregate reports.
//
// Exit codes: 0 success, 1 a bound violation or failed run, 2 bad input.

#include "sra/harness.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

namespace {

using namespace sra;

fs::path resolve_data(const ExperimentConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  throw ConfigError("no dataset directory: pass --data or set experiment.data_dir");
}

void print_records(const std::vector<BoundRecord>& records, bool only_violations) {
  for (const auto& r : records) {
    if (only_violations && r.satisfied) continue;
    std::printf("%-28s a=%d b=%d s=%d  lhs=%.6g rhs=%.6g  %s\n", r.theorem.c_str(), r.domain_a, r.domain_b, r.subspace,
                r.lhs, r.rhs, r.satisfied ? "ok" : "VIOLATED");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain generalization lab: synthetic SCM data, DG training variants, bound checks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, algo_name, ckpt_path, grid_path, in_dir;
  std::uint64_t seed = 0;
  int target = -1;
  bool verbose = false;

  auto* gen = app.add_subcommand("generate", "sample every configured domain to CSV plus a manifest");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "sampling seed")->required();

  auto* tr = app.add_subcommand("train", "one leave-one-domain-out training run");
  tr->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  tr->add_option("--algo", algo_name, "ERM IRM VREX IB_ERM DANN CDANN AUG_ERM SRA")->required();
  auto* target_opt = tr->add_option("--target", target, "held-out domain (default: the config's)");
  tr->add_option("--seed", seed)->required();
  tr->add_option("--out", out_dir)->required();
  tr->add_option("--data", data_dir, "dataset directory written by generate");

  auto* ver = app.add_subcommand("verify", "check the bound inequalities on a checkpoint");
  ver->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  ver->add_option("--checkpoint", ckpt_path)->required();
  ver->add_option("--out", out_dir)->required();
  ver->add_option("--data", data_dir);
  ver->add_flag("-v,--verbose", verbose, "print every record, not only violations");

  auto* sw = app.add_subcommand("sweep", "run a grid of (variant, hyperparameters) x seeds");
  sw->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  sw->add_option("--grid", grid_path)->required()->check(CLI::ExistingFile);
  sw->add_option("--out", out_dir)->required();
  sw->add_option("--data", data_dir, "reuse generated data instead of <out>/data");

  auto* rep = app.add_subcommand("report", "aggregate run outputs below a directory");
  rep->add_option("--in", in_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig cfg = load_config(config_path);
      generate(cfg, out_dir, seed);
      std::printf("wrote %zu domains to %s\n", cfg.scm.domains.size(), out_dir.c_str());
      return 0;
    }

    if (*tr) {
      const ExperimentConfig cfg = load_config(config_path);
      AlgoConfig algo = cfg.algo;
      algo.variant = parse_variant(algo_name);
      algo.seed = seed;
      const int t = *target_opt ? target : cfg.target_domain;
      const RunOutcome r = train_run(cfg, algo, t, resolve_data(cfg, data_dir), out_dir);
      if (!r.ok) {
        std::fprintf(stderr, "%s: training aborted: %s\n", r.run_id.c_str(), r.error.c_str());
        return 1;
      }
      std::printf("%s  target acc %.4f  swad acc %.4f  hellinger %.4f\n", r.run_id.c_str(), r.row.accuracy,
                  r.row.swad_accuracy, r.row.hellinger_loss);
      return 0;
    }

    if (*ver) {
      const ExperimentConfig cfg = load_config(config_path);
      const VerifyOutcome v = verify_checkpoint(cfg, ckpt_path, resolve_data(cfg, data_dir), out_dir);
      print_records(v.records, !verbose);
      std::printf("%zu records, %d violated; subspace marginals max d = %.3g (eps %.3g), control %.3g\n",
                  v.records.size(), v.violations, v.marginals.max_distance, v.marginals.epsilon,
                  v.marginals.control_max_distance);
      return v.violations == 0 ? 0 : 1;
    }

    if (*sw) {
      const ExperimentConfig cfg = load_config(config_path);
      const SweepGrid grid = load_grid(grid_path);
      std::optional<fs::path> data;
      if (!data_dir.empty()) data = fs::path(data_dir);
      const SweepOutcome s = sweep(cfg, grid, out_dir, data, workers_from_env());
      int failed = 0;
      for (const auto& row : s.summary) {
        failed += row.failed;
        std::printf("%-16s %-8s n=%d failed=%d  acc %.4f +- %.4f  swad %.4f +- %.4f\n", row.cell.c_str(),
                    row.variant.c_str(), row.runs, row.failed, row.accuracy_mean, row.accuracy_std,
                    row.swad_accuracy_mean, row.swad_accuracy_std);
      }
      if (s.violations > 0) std::printf("%d bound violations\n", s.violations);
      return failed == 0 && s.violations == 0 ? 0 : 1;
    }

    if (*rep) {
      const ReportOutcome r = report(in_dir);
      std::cout << r.text;
      return r.violations.empty() ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
