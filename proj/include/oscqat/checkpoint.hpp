#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "oscqat/tensor.hpp"

namespace oscqat {

// Binary checkpoint: magic "OQAT", version u32, then per-tensor records of
// name length (u32) + name + rank (u32) + dims (u64 each) + raw
// little-endian f64 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& tensors);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// Copies loaded tensors into the given destinations by name; every
// destination must be present with a matching shape.
void restore_into(const std::map<std::string, Tensor>& loaded,
                  const std::vector<std::pair<std::string, Tensor*>>& dests);

}  // namespace oscqat
