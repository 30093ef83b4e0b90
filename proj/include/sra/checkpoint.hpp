// Plain-text model checkpoints:
//
//   checkpoint variant=<V> input_dim=.. latent_dim=.. hidden=.. num_classes=..
//              num_domains=.. disc_hidden=.. conditioning_width=..
//              num_prototypes=.. step=.. params=<count>
//   param <name> <rows> <cols>
//   <rows lines of comma-separated %.17g values>
//   ...
//   prototype_weights <M>          (only when num_prototypes > 0)
//   <one line of M values>

#pragma once

#include "sra/models.hpp"

#include <filesystem>

namespace sra {

void write_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle read_checkpoint(const std::filesystem::path& path);

}  // namespace sra
