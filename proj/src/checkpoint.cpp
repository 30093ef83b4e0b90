#include "sra/checkpoint.hpp"

#include "sra/scm.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace sra {

namespace {

void write_row(std::ostream& out, const double* data, Eigen::Index n, Eigen::Index stride) {
  char buf[40];
  for (Eigen::Index j = 0; j < n; ++j) {
    std::snprintf(buf, sizeof buf, j == 0 ? "%.17g" : ",%.17g", data[j * stride]);
    out << buf;
  }
  out << "\n";
}

std::vector<double> parse_row(const std::string& line, Eigen::Index expected, const std::string& where) {
  std::vector<double> v;
  std::stringstream ss(line);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    char* end = nullptr;
    const double d = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size()) throw FormatError(where + ": bad number '" + tok + "'");
    v.push_back(d);
  }
  if (static_cast<Eigen::Index>(v.size()) != expected)
    throw FormatError(where + ": expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()));
  return v;
}

}  // namespace

void write_checkpoint(const ModelBundle& b, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const Architecture& a = b.arch;
  out << "checkpoint variant=" << to_string(b.variant) << " input_dim=" << a.input_dim << " latent_dim=" << a.latent_dim
      << " hidden=" << a.hidden << " num_classes=" << a.num_classes << " num_domains=" << a.num_domains
      << " disc_hidden=" << a.disc_hidden << " conditioning_width=" << a.conditioning_width
      << " num_prototypes=" << a.num_prototypes << " step=" << b.step << " params=" << b.params.size() << "\n";
  for (const auto& [name, p] : b.params.items()) {
    out << "param " << name << " " << p.value.rows() << " " << p.value.cols() << "\n";
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) write_row(out, &p.value(i, 0), p.value.cols(), p.value.rows());
  }
  if (b.has_prototypes()) {
    out << "prototype_weights " << b.prototype_weights.size() << "\n";
    write_row(out, b.prototype_weights.data(), b.prototype_weights.size(), 1);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

ModelBundle read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string header;
  if (!std::getline(in, header) || header.rfind("checkpoint ", 0) != 0)
    throw FormatError(path.string() + ": not a checkpoint");

  std::map<std::string, std::string> kv;
  {
    std::stringstream ss(header.substr(11));
    std::string tok;
    while (ss >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError(path.string() + ": malformed header token '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
  }
  auto get = [&](const std::string& k) -> long {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(path.string() + ": header lacks '" + k + "'");
    return std::stol(it->second);
  };

  ModelBundle b;
  if (!kv.count("variant")) throw FormatError(path.string() + ": header lacks 'variant'");
  b.variant = parse_variant(kv["variant"]);
  b.arch.input_dim = static_cast<int>(get("input_dim"));
  b.arch.latent_dim = static_cast<int>(get("latent_dim"));
  b.arch.hidden = static_cast<int>(get("hidden"));
  b.arch.num_classes = static_cast<int>(get("num_classes"));
  b.arch.num_domains = static_cast<int>(get("num_domains"));
  b.arch.disc_hidden = static_cast<int>(get("disc_hidden"));
  b.arch.conditioning_width = static_cast<int>(get("conditioning_width"));
  b.arch.num_prototypes = static_cast<int>(get("num_prototypes"));
  b.step = get("step");
  const long count = get("params");

  std::string line;
  for (long k = 0; k < count; ++k) {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated before parameter " + std::to_string(k));
    std::stringstream ss(line);
    std::string tag, name;
    Eigen::Index rows = 0, cols = 0;
    if (!(ss >> tag >> name >> rows >> cols) || tag != "param" || rows < 0 || cols < 0)
      throw FormatError(path.string() + ": malformed parameter header '" + line + "'");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated in parameter " + name);
      auto v = parse_row(line, cols, path.string() + ": " + name + " row " + std::to_string(i));
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[j];
    }
    b.params.add(name, std::move(m));
  }
  if (b.has_prototypes()) {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing prototype weights");
    std::stringstream ss(line);
    std::string tag;
    Eigen::Index M = 0;
    if (!(ss >> tag >> M) || tag != "prototype_weights" || M != b.arch.num_prototypes)
      throw FormatError(path.string() + ": malformed prototype weights header");
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing prototype weights");
    auto v = parse_row(line, M, path.string() + ": prototype_weights");
    b.prototype_weights = Eigen::Map<Vector>(v.data(), M);
  }
  return b;
}

}  // namespace sra
