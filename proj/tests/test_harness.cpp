#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "json.hpp"
#include "sra/checkpoint.hpp"
#include "sra/harness.hpp"
#include "testing.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace sra;
using namespace sra::testing;
using json = nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

json default_json() { return json::parse(slurp(fs::path(SRA_CONFIG_DIR) / "default.json")); }

// default.json shrunk so a run takes a fraction of a second
json small_json() {
  json j = default_json();
  j["experiment"]["samples_per_domain"] = 150;
  j["experiment"]["seeds"] = {0, 1};
  j["training"]["steps"] = 40;
  j["training"]["log_every"] = 10;
  j["verify"]["resolution"] = 20;
  return j;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream in(slurp(p));
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

// 64-bit FNV-1a, written out again
std::string fnv_oracle(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SRA_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

double accuracy_of(const ModelBundle& m, const DomainDataset& d) {
  const Matrix p = m.predict_proba(d.x);
  int hits = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index arg;
    p.row(i).maxCoeff(&arg);
    hits += arg == d.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(p.rows());
}

}  // namespace

TEST_CASE("shipped configs parse and validate") {
  for (const char* name : {"default.json", "label_shift.json", "point_mass.json"}) {
    CAPTURE(name);
    ExperimentConfig c = load_config(fs::path(SRA_CONFIG_DIR) / name);
    CHECK_NOTHROW(c.validate());
  }
  for (const char* name : {"default.json", "ib.json", "tradeoff.json"}) {
    CAPTURE(name);
    CHECK_NOTHROW(load_grid(fs::path(SRA_CONFIG_DIR) / "grids" / name));
  }
  ExperimentConfig c = load_config(fs::path(SRA_CONFIG_DIR) / "default.json");
  CHECK(c.training_domains_for(3) == std::vector<int>{0, 1, 2});
  CHECK(c.training_domains_for(0) == std::vector<int>{1, 2, 3});
  CHECK_THROWS(c.training_domains_for(9));
}

TEST_CASE("config errors are reported") {
  auto rejects = [](json j) {
    CAPTURE(j.dump());
    CHECK_THROWS_AS(parse_config(j.dump()), ConfigError);
  };
  json j = default_json();
  j["scm"]["colour"] = 1;
  rejects(j);
  j = default_json();
  j["training"]["learning_rate"] = 0.1;
  rejects(j);
  j = default_json();
  j.erase("schema");
  rejects(j);
  j = default_json();
  j["schema"] = 2;
  rejects(j);
  j = default_json();
  j["scm"]["domains"][1]["id"] = 0;
  rejects(j);
  j = default_json();
  j["experiment"]["training_domains"] = {0, 1, 3};
  rejects(j);
  j = default_json();
  j["experiment"]["training_domains"] = {0, 0, 1};
  rejects(j);
  j = default_json();
  j["experiment"]["seeds"] = json::array();
  rejects(j);
  j = default_json();
  j["experiment"]["target"] = 7;
  rejects(j);
  j = default_json();
  j["scm"]["mode"] = "sideways";
  rejects(j);
  j = default_json();
  j["training"]["steps"] = -1;
  rejects(j);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
}

TEST_CASE("config hash") {
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
  CHECK(fnv1a_hex("foobar") == fnv_oracle("foobar"));
  const ExperimentConfig a = parse_config(default_json().dump());
  const ExperimentConfig b = parse_config(default_json().dump(4));
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a) == fnv_oracle(a.canonical));
  json j = default_json();
  j["training"]["lr"] = 0.002;
  CHECK(config_hash(parse_config(j.dump())) != config_hash(a));
}

TEST_CASE("generate is deterministic and writes a manifest") {
  const ExperimentConfig cfg = parse_config(small_json().dump());
  const fs::path root = scratch_dir("generate");
  generate(cfg, root / "a", 5);
  generate(cfg, root / "b", 5);
  generate(cfg, root / "c", 6);
  for (int id : cfg.domain_ids()) {
    CAPTURE(id);
    const std::string a = slurp(dataset_path(root / "a", id));
    CHECK(a == slurp(dataset_path(root / "b", id)));
    CHECK(a != slurp(dataset_path(root / "c", id)));
  }
  CHECK(slurp(root / "a" / "manifest.json") == slurp(root / "b" / "manifest.json"));

  const json m = json::parse(slurp(root / "a" / "manifest.json"));
  CHECK(m.at("schema") == 1);
  CHECK(m.at("seed") == 5);
  CHECK(m.at("config_hash") == config_hash(cfg));
  CHECK(m.at("files").size() == cfg.scm.domains.size());
  for (const auto& f : m.at("files")) {
    const fs::path p = root / "a" / f.at("file").get<std::string>();
    CHECK(f.at("rows") == cfg.samples_per_domain);
    CHECK(f.at("fnv1a") == fnv_oracle(slurp(p)));
  }

  auto sets = load_domains(root / "a", cfg.domain_ids());
  REQUIRE(sets.size() == 4);
  for (const auto& d : sets) CHECK(d.size() == cfg.samples_per_domain);
  // domains are independent draws, not copies
  CHECK(!sets[0].x.isApprox(sets[1].x));
  fs::remove(dataset_path(root / "b", 2));
  CHECK_THROWS_AS(load_domains(root / "b", cfg.domain_ids()), std::runtime_error);
}

TEST_CASE("metrics csv round trip") {
  const fs::path dir = scratch_dir("metrics");
  MetricsRow a;
  a.run_id = "x";
  a.variant = "SRA";
  a.seed = 3;
  a.target_domain = 2;
  a.accuracy = 0.1 + 0.2;
  a.ce_loss = 1.0 / 3.0;
  a.hellinger_loss = 0.25;
  a.projection = 0.5;
  a.adversarial = 1.25;
  a.swad_accuracy = 0.7;
  MetricsRow b = a;
  b.run_id = "y";
  b.variant = "ERM";
  b.projection.reset();
  b.adversarial.reset();
  b.penalty.reset();
  write_metrics_csv(dir / "m.metrics.csv", {a, b});
  const auto lines = lines_of(dir / "m.metrics.csv");
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == kMetricsHeader);
  CHECK(lines[2].find(",,,") != std::string::npos);

  const auto back = read_metrics_csv(dir / "m.metrics.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].accuracy == a.accuracy);
  CHECK(back[0].ce_loss == a.ce_loss);
  CHECK(back[0].projection == a.projection);
  CHECK(!back[1].projection);
  CHECK(!back[1].adversarial);
  CHECK(back[1].seed == 3);

  dump(dir / "bad.metrics.csv", "run_id,variant\nx,ERM\n");
  CHECK_THROWS_AS(read_metrics_csv(dir / "bad.metrics.csv"), FormatError);
  dump(dir / "short.metrics.csv", std::string(kMetricsHeader) + "\nx,ERM,0\n");
  CHECK_THROWS_AS(read_metrics_csv(dir / "short.metrics.csv"), FormatError);
}

TEST_CASE("train_run writes the report, one metrics row and checkpoints") {
  const ExperimentConfig cfg = parse_config(small_json().dump());
  const fs::path root = scratch_dir("train");
  generate(cfg, root / "data", 1);
  const auto sets = load_domains(root / "data", cfg.domain_ids());

  for (Variant v : {Variant::ERM, Variant::SRA}) {
    CAPTURE(to_string(v));
    AlgoConfig algo = cfg.algo;
    algo.variant = v;
    algo.seed = 4;
    const RunOutcome r = train_run(cfg, algo, 3, root / "data", root / "out");
    REQUIRE(r.ok);
    CHECK(r.run_id == make_run_id(v, 3, 4));
    CHECK(fs::exists(r.final_checkpoint));
    CHECK(fs::exists(r.swad_checkpoint));

    const auto rows = read_metrics_csv(r.metrics);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].split == "target");
    CHECK(rows[0].target_domain == 3);
    CHECK(rows[0].projection.has_value() == (v == Variant::SRA));
    CHECK(rows[0].adversarial.has_value() == (v == Variant::SRA));

    // the row's accuracies are the checkpoints' accuracies on the held-out domain
    CHECK(rows[0].accuracy == doctest::Approx(accuracy_of(read_checkpoint(r.final_checkpoint), sets[3])));
    CHECK(rows[0].swad_accuracy == doctest::Approx(accuracy_of(read_checkpoint(r.swad_checkpoint), sets[3])));

    int runs = 0, steps = 0, audits = 0, metrics = 0;
    for (const auto& l : lines_of(r.report)) {
      const json j = json::parse(l);
      const std::string type = j.at("type");
      if (type == "run") {
        ++runs;
        CHECK(j.at("status") == "ok");
        CHECK(j.at("config_hash") == config_hash(cfg));
        CHECK(j.at("training_domains") == json{0, 1, 2});
      } else if (type == "step") {
        ++steps;
        CHECK(j.at("L_P").is_null() == (v != Variant::SRA));
      } else if (type == "audit") {
        ++audits;
        CHECK(j.at("target_in_batches") == false);
        for (const auto& d : j.at("batch_domains")) CHECK(d != 3);
      } else if (type == "metrics") {
        ++metrics;
        CHECK(j.at("split") == (j.at("domain") == 3 ? "target" : "train"));
      }
    }
    CHECK(runs == 1);
    CHECK(steps >= 4);
    CHECK(audits == 1);
    CHECK(metrics == 8);  // two models times four domains
  }

  AlgoConfig algo = cfg.algo;
  algo.variant = Variant::ERM;
  CHECK_THROWS(train_run(cfg, algo, 3, root / "missing", root / "out"));

  algo.adam.lr = 1e300;
  const RunOutcome bad = train_run(cfg, algo, 3, root / "data", root / "bad");
  CHECK(!bad.ok);
  CHECK(!bad.error.empty());
  const auto rows = read_metrics_csv(bad.metrics);
  REQUIRE(rows.size() == 1);
  CHECK(std::isnan(rows[0].accuracy));
  CHECK(json::parse(lines_of(bad.report).front()).at("status") == "diverged");
}

TEST_CASE("verify a checkpoint") {
  const ExperimentConfig cfg = parse_config(small_json().dump());
  const fs::path root = scratch_dir("verify");
  generate(cfg, root / "data", 2);
  AlgoConfig algo = cfg.algo;
  algo.variant = Variant::SRA;
  const RunOutcome r = train_run(cfg, algo, 3, root / "data", root / "run");
  REQUIRE(r.ok);

  const VerifyOutcome v = verify_checkpoint(cfg, r.final_checkpoint, root / "data", root / "run");
  CHECK(fs::exists(v.report));
  int lower = 0, lower_bad = 0;
  for (const auto& rec : v.records)
    if (rec.theorem == "label_marginal_lower") {
      ++lower;
      lower_bad += !rec.satisfied;
    }
  CHECK(lower == 6);  // unordered pairs of four domains
  CHECK(lower_bad == 0);

  const auto lines = lines_of(v.report);
  REQUIRE(lines.size() == v.records.size() + 2);
  const json head = json::parse(lines.front());
  CHECK(head.at("type") == "verify");
  CHECK(head.at("codebook") == "prototypes");
  CHECK(head.at("violations") == v.violations);
  CHECK(json::parse(lines.back()).at("type") == "subspace_marginals");

  CHECK_THROWS(verify_checkpoint(cfg, root / "run" / "nope.ckpt", root / "data", root / "run"));
}

TEST_CASE("an encoder that collapses everything gives one cell") {
  const ExperimentConfig cfg = parse_config(small_json().dump());
  const fs::path root = scratch_dir("collapse");
  generate(cfg, root / "data", 3);
  const auto sets = load_domains(root / "data", cfg.domain_ids());
  Architecture arch;
  arch.input_dim = static_cast<int>(sets[0].x.cols());
  arch.latent_dim = 4;
  arch.hidden = 8;
  arch.num_classes = 4;
  ModelBundle m(Variant::ERM, arch, 1);
  // zero weights: the representation is the last bias for every input
  for (auto& [name, p] : m.params.items())
    if (name.rfind("enc.", 0) == 0) p.value.setZero();
  m.params.at("enc.b2").value.setConstant(1.0);
  const SCM scm = build_scm(cfg);
  const QuantizedPipeline q = build_quantized_pipeline(m, scm, sets);
  for (const auto& d : q.domains)
    for (int c : d.cells) CHECK(c == d.cells.front());

  // one cell: the head row is the pooled mean oracle posterior
  Vector pooled = Vector::Zero(4);
  Eigen::Index n = 0;
  for (const auto& d : sets) {
    pooled += scm.oracle_posteriors(d.z_causal).colwise().sum().transpose();
    n += d.size();
  }
  pooled /= static_cast<double>(n);
  const int cell = q.domains.front().cells.front();
  CHECK((q.head.row(cell).transpose() - pooled).norm() < 1e-9);
  for (const auto& rec : check_bounds(q))
    if (rec.theorem == "label_marginal_lower") CHECK(rec.satisfied);
}

TEST_CASE("subspace marginals") {
  const fs::path root = scratch_dir("marginals");
  {
    const ExperimentConfig cfg = parse_config(small_json().dump());
    generate(cfg, root / "one", 1);
    const SCM scm = build_scm(cfg);
    const auto sets = load_domains(root / "one", {0});
    const auto rep = verify_subspace_marginals(scm, sets, 20);
    CHECK(rep.compared_pairs == 0);
    CHECK(rep.max_divergence == 0.0);
    CHECK(rep.epsilon == doctest::Approx(2.0 * 4 / 20));
    CHECK(rep.record.satisfied);
  }
  {
    json j = json::parse(slurp(fs::path(SRA_CONFIG_DIR) / "point_mass.json"));
    j["experiment"]["samples_per_domain"] = 400;
    const ExperimentConfig cfg = parse_config(j.dump());
    generate(cfg, root / "pm", 1);
    const SCM scm = build_scm(cfg);
    const auto sets = load_domains(root / "pm", cfg.domain_ids());
    const auto rep = verify_subspace_marginals(scm, sets, 10000);
    CHECK(rep.compared_pairs > 0);
    CHECK(rep.max_distance < 1e-6);
  }
}

TEST_CASE("grid parsing") {
  auto grid = [](json cells) { return json{{"schema", 1}, {"name", "g"}, {"cells", cells}}.dump(); };
  const SweepGrid g = parse_grid(grid({{{"id", "a"}, {"variant", "IRM"}, {"penalty_weight", 3}}}));
  REQUIRE(g.cells.size() == 1);
  CHECK(g.cells[0].variant == Variant::IRM);
  CHECK(g.cells[0].penalty_weight == 3.0);
  CHECK(!g.cells[0].lambda_d);
  CHECK(g.verify);

  CHECK_THROWS_AS(parse_grid(grid({{{"id", "a"}, {"variant", "ERM"}}, {{"id", "a"}, {"variant", "IRM"}}})), ConfigError);
  CHECK_THROWS_AS(parse_grid(grid({{{"id", "a/b"}, {"variant", "ERM"}}})), ConfigError);
  CHECK_THROWS_AS(parse_grid(grid({{{"id", "a"}, {"variant", "GAN"}}})), ConfigError);
  CHECK_THROWS_AS(parse_grid(grid({{{"id", "a"}, {"variant", "ERM"}, {"lr", 1}}})), ConfigError);
  CHECK_THROWS_AS(parse_grid(grid(json::array())), ConfigError);
  CHECK_THROWS_AS(parse_grid(json{{"cells", {{{"id", "a"}, {"variant", "ERM"}}}}}.dump()), ConfigError);
}

TEST_CASE("mean_std and workers") {
  const auto [m, s] = mean_std({1, 2, 3, 4});
  CHECK(m == doctest::Approx(2.5));
  CHECK(s == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(mean_std({7}).second == 0.0);

  unsetenv("SRA_WORKERS");
  CHECK(workers_from_env() == 1);
  setenv("SRA_WORKERS", "3", 1);
  CHECK(workers_from_env() == 3);
  setenv("SRA_WORKERS", "three", 1);
  CHECK_THROWS_AS(workers_from_env(), std::invalid_argument);
  setenv("SRA_WORKERS", "0", 1);
  CHECK_THROWS_AS(workers_from_env(), std::invalid_argument);
  unsetenv("SRA_WORKERS");
}

TEST_CASE("sweep and report") {
  json j = small_json();
  j["training"]["steps"] = 20;
  const ExperimentConfig cfg = parse_config(j.dump());
  SweepGrid g = load_grid(fs::path(SRA_CONFIG_DIR) / "grids" / "ib.json");
  g.verify = false;
  const fs::path root = scratch_dir("sweep");
  const SweepOutcome s = sweep(cfg, g, root, std::nullopt, 2);

  REQUIRE(s.runs.size() == 20);
  REQUIRE(s.summary.size() == 4);
  CHECK(read_metrics_csv(root / "sweep_rows.csv").size() == 20);
  CHECK(lines_of(root / "sweep_summary.csv").size() == 5);

  // cell-major, seed-minor
  CHECK(s.runs[0].run_id == "ib_0_s0");
  CHECK(s.runs[6].run_id == "ib_1_s1");
  CHECK(s.cell_of_run[19] == "ib_100");

  const auto rows = read_metrics_csv(root / "sweep_rows.csv");
  for (int c = 0; c < 4; ++c) {
    double sum = 0, sq = 0;
    for (int k = 0; k < 5; ++k) sum += rows[c * 5 + k].accuracy;
    const double mean = sum / 5;
    for (int k = 0; k < 5; ++k) sq += (rows[c * 5 + k].accuracy - mean) * (rows[c * 5 + k].accuracy - mean);
    CHECK(s.summary[c].runs == 5);
    CHECK(s.summary[c].failed == 0);
    CHECK(s.summary[c].accuracy_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(s.summary[c].accuracy_std == doctest::Approx(std::sqrt(sq / 4)).epsilon(1e-12));
  }
  // penalty weight reached the runs
  const json first = json::parse(lines_of(root / "runs" / "ib_100_s0" / "ib_100_s0.report.jsonl").front());
  CHECK(first.at("penalty_weight") == 100.0);

  // same seeds, same numbers: the worker count does not matter
  const SweepOutcome serial = sweep(cfg, g, scratch_dir("sweep_serial"), root / "data", 1);
  for (std::size_t i = 0; i < 20; ++i) CHECK(serial.runs[i].row.accuracy == s.runs[i].row.accuracy);

  const ReportOutcome r1 = report(root / "runs");
  CHECK(r1.runs == 20);
  const std::string table = slurp(root / "runs" / "report_table.csv");
  const ReportOutcome r2 = report(root / "runs");
  CHECK(r2.text == r1.text);
  CHECK(slurp(root / "runs" / "report_table.csv") == table);
  CHECK(r1.violations.empty());
  CHECK(r1.text.find("IB_ERM") != std::string::npos);

  CHECK_THROWS(report(scratch_dir("empty")));
  CHECK_THROWS(sweep(cfg, parse_grid(R"({"schema":1,"cells":[{"id":"a","variant":"ERM"}],"target":9})"), root / "t9"));
}

TEST_CASE("report counts bound records and flags violations") {
  const fs::path dir = scratch_dir("report");
  MetricsRow row;
  row.variant = "ERM";
  for (const char* id : {"a", "b", "c"}) {
    row.run_id = id;
    write_metrics_csv(dir / (std::string(id) + ".metrics.csv"), {row});
  }
  json ok{{"type", "bound"}, {"theorem", "label_marginal_lower"}, {"domain_a", 0}, {"domain_b", 1},
          {"subspace", -1},  {"lhs", 0.1},                        {"rhs", 0.2},     {"satisfied", true}};
  json bad = ok;
  bad["lhs"] = 0.3;
  bad["satisfied"] = false;
  dump(dir / "a.verify.jsonl", ok.dump() + "\n" + ok.dump() + "\n");
  ReportOutcome r = report(dir);
  CHECK(r.runs == 3);
  CHECK(r.theorems["label_marginal_lower"].checked == 2);
  CHECK(r.violations.empty());
  CHECK(run_cli("report --in " + dir.string()) == 0);

  dump(dir / "b.verify.jsonl", bad.dump() + "\n");
  r = report(dir);
  CHECK(r.theorems["label_marginal_lower"].checked == 3);
  CHECK(r.theorems["label_marginal_lower"].violated == 1);
  CHECK(r.violations.size() == 1);
  CHECK(run_cli("report --in " + dir.string()) == 1);

  dump(dir / "c.verify.jsonl", "{oops\n");
  CHECK_THROWS_AS(report(dir), FormatError);
}

TEST_CASE("command line exit codes") {
  const fs::path root = scratch_dir("cli");
  dump(root / "cfg.json", small_json().dump());
  json broken = small_json();
  broken["scm"]["extra"] = 1;
  dump(root / "broken.json", broken.dump());
  const std::string cfg = (root / "cfg.json").string();

  CHECK(run_cli("") != 0);
  CHECK(run_cli("frobnicate") != 0);
  CHECK(run_cli("generate --config " + cfg + " --out " + (root / "data").string() + " --seed 1") == 0);
  CHECK(fs::exists(root / "data" / "manifest.json"));
  CHECK(run_cli("generate --config " + (root / "broken.json").string() + " --out " + (root / "x").string() +
                " --seed 1") == 2);
  CHECK(run_cli("train --config " + cfg + " --algo ERM --seed 0 --out " + (root / "run").string()) == 2);  // no data
  CHECK(run_cli("train --config " + cfg + " --algo NOPE --seed 0 --data " + (root / "data").string() + " --out " +
                (root / "run").string()) == 2);
  CHECK(run_cli("train --config " + cfg + " --algo ERM --seed 0 --data " + (root / "data").string() + " --out " +
                (root / "run").string()) == 0);
  CHECK(fs::exists(root / "run" / (make_run_id(Variant::ERM, 3, 0) + ".final.ckpt")));
  CHECK(run_cli("train --config " + cfg + " --algo ERM --seed 0 --target 3 --data " + (root / "data").string() +
                " --out " + (root / "run").string()) == 0);
  CHECK(run_cli("verify --config " + cfg + " --checkpoint " + (root / "run" / "missing.ckpt").string() + " --data " +
                (root / "data").string() + " --out " + (root / "run").string()) == 2);
  CHECK(run_cli("report --in " + (root / "nothing").string()) == 2);
}
