#pragma once

#include "voldet/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace voldet {

/// Named float tensors in serialization order. Order is preserved on save so
/// checkpoints from identical runs are byte-identical.
using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

// "CKPT1" container: 5-byte magic, tensor count u32 LE, then per tensor
// (name length u32, name bytes, rank u32, dims u32 LE, f32 LE data).
void write_ckpt1(const std::string& path, const NamedTensors& tensors);
NamedTensors read_ckpt1(const std::string& path);

} // namespace voldet
