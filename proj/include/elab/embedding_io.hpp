#pragma once

#include <cstdint>
#include <string>

#include "elab/tensor.hpp"

namespace elab {

/// The artifact a concept-inversion run exports: the learned embedding row
/// plus enough provenance to install it elsewhere. Binary little-endian
/// float payload; round-trips exactly.
struct EmbeddingExport {
    std::string token;
    std::string attack;                // ti | np-ci | sld-ci | manual
    std::uint64_t source_checkpoint = 0;  // weights hash of the model attacked
    Tensor<float> embedding;           // [d]
};

void save_embedding(const std::string& path, const EmbeddingExport& e);
EmbeddingExport load_embedding(const std::string& path);

}  // namespace elab
