#pragma once

#include <string>

#include "elab/diffusion_model.hpp"

namespace elab {

/// Single-archive checkpoint: arch descriptor, schedule parameters, all
/// parameter tensors by canonical name (including embedding rows), the run
/// seed and a training-config echo. Raw little-endian float payload; loading
/// reproduces predictions bit-exactly.
void save_checkpoint(const std::string& path, DiffusionModelT<float>& model);

DiffusionModelT<float> load_checkpoint(const std::string& path);

}  // namespace elab
