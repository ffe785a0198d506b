#pragma once

// Single-file archive of named float tensors plus a JSON metadata record.
//
// Layout (little-endian): "FSITARC1", u64 metadata length, metadata text,
// u64 tensor count, then per tensor: u32 name length, name, u32 rank,
// i32 dims[rank], f32 data[numel]. Entries are written in name order, so
// equal content gives equal bytes.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "fsit/tensor.hpp"

namespace fsit {

struct TensorArchive {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;

  const Tensor<float>& at(const std::string& name) const;
};

/// Writes through a temporary file and renames, so readers never see a
/// partial archive. Throws DataError.
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace fsit
