// Encoder g, classifier h, domain discriminator h_d and (optionally) the
// prototype set, all stored in one ParamStore.

#pragma once

#include "sra/diffgraph.hpp"
#include "sra/prototypes.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace sra {

enum class Variant { ERM, IRM, VREX, IB_ERM, DANN, CDANN, AUG_ERM, SRA };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

/// What the discriminator sees next to the (reversed) representation.
enum class Conditioning { None, Class, Subspace };

Conditioning conditioning_for(Variant v);

struct Architecture {
  int input_dim = 16;
  int latent_dim = 16;
  int hidden = 64;
  int num_classes = 4;
  int num_domains = 0;  ///< discriminator outputs; 0 disables the discriminator
  int disc_hidden = 64;
  int conditioning_width = 0;
  int num_prototypes = 0;  ///< 0 disables the prototype set
};

class ModelBundle {
 public:
  ModelBundle() = default;
  /// Glorot-normal weights and zero biases drawn from `seed`.
  ModelBundle(Variant variant, const Architecture& arch, std::uint64_t seed);

  Variant variant = Variant::ERM;
  Architecture arch;
  ParamStore params;
  Vector prototype_weights;  ///< fixed uniform pi when prototypes are present
  std::int64_t step = 0;

  bool has_discriminator() const { return arch.num_domains > 0; }
  bool has_prototypes() const { return arch.num_prototypes > 0; }
  PrototypeSet prototypes() const;

  // Differentiable forward pieces.
  Var encode(Tape& t, Var x);
  Var classify(Tape& t, Var z);
  Var discriminate(Tape& t, Var input);

  // Inference on plain matrices.
  Matrix encode(const Matrix& x) const;
  Matrix logits(const Matrix& x) const;
  Matrix predict_proba(const Matrix& x) const;
};

}  // namespace sra
