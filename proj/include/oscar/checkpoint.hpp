#pragma once

#include <string>
#include <utility>
#include <vector>

#include "oscar/params.hpp"
#include "oscar/tensor.hpp"

namespace oscar {

/// Flat binary checkpoint: "OSC1" magic, u32 tensor count, then per tensor
/// u32 name length + name bytes, u32 rank, u32 dims, raw little-endian
/// float32 payload.
void save_checkpoint(const std::string& path, const ParamRegistry& params);

/// Loads records by name into an existing registry; every registry entry must
/// be present with a matching shape.
void load_checkpoint(const std::string& path, const ParamRegistry& params);

/// Raw read, for tools that inspect checkpoints without a model.
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path);

}  // namespace oscar
