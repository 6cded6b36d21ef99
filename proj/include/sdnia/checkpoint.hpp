// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace sdnia {

/// Named tensors plus free-form metadata.
///
/// File layout (little endian):
///   "SDNIACKP" | u32 version | u64 header bytes | header JSON | tensor payload
/// The header lists every tensor with dtype, shape, payload offset and byte size, and carries
/// `meta`. Names use '/' separated namespaces such as "nia/conv1.weight" or "detector/...".
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;

  /// Tensors under `prefix/`, with the prefix stripped.
  std::map<std::string, torch::Tensor> section(const std::string& prefix) const;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters and buffers of `module`, dotted names rewritten as "prefix/<name>".
void export_module(const torch::nn::Module& module, const std::string& prefix, Checkpoint& checkpoint);

/// Copies tensors under `prefix/` into the module; every parameter and buffer must be present
/// with a matching shape. Throws DataError otherwise.
void import_module(torch::nn::Module& module, const std::string& prefix, const Checkpoint& checkpoint);

}  // namespace sdnia
