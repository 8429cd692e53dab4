#pragma once

// "FLG1" tensor container. Layout, all integers little-endian:
//   magic "FLG1" | u32 version | u32 tensor count
//   per tensor: u32 name length | UTF-8 name | u32 rank | u64 extent * rank |
//               u8 element tag (1 = f64) | row-major IEEE-754 payload
//   u64 FNV-1a hash of every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flg/autodiff.hpp"

namespace flg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  Matrix value;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors);
/// Throws FormatError on a bad magic, unknown version or element tag,
/// truncation, trailing bytes, or a checksum mismatch.
std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Hash of a file's bytes; equal files give equal values.
std::uint64_t file_checksum(const std::filesystem::path& path);

/// Snapshot of (name, tensor) pairs, with an optional name prefix.
template <typename TensorPtr>
std::vector<NamedTensor> collect(const std::vector<std::pair<std::string, TensorPtr>>& params,
                                 const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back({prefix + name, t->shape(), t->value()});
  return out;
}

/// Copies values into `params` by name (after stripping `prefix`). Every
/// parameter must be present with a matching shape.
void restore(const std::vector<std::pair<std::string, Tensor*>>& params, std::span<const NamedTensor> tensors,
             const std::string& prefix = "");

/// Looks up one tensor by exact name; throws FormatError when absent.
const NamedTensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name);

}  // namespace flg
