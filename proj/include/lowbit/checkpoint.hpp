#pragma once

// Model checkpoints and packed (deployment) model files.
//
// Checkpoint:
//   "LBCK" u32 version
//   u32 length + RunConfig text
//   u32 count, then per tensor: u32 name length, name, u8 ndim, u64 dims[ndim],
//     u8 dtype (1 = f64), little-endian data
//   u32 count, then per activation site: u32 name length, name, u8 kind (0 = none,
//     otherwise QuantKind + 1), f64 alpha, f64 threshold, u8 initialized
//
// Packed model:
//   "LBPK" u32 version, u32 length + RunConfig text
//   u32 count, then per quantized matrix: u32 name length, name, u8 QuantKind,
//     one packed section (see kernels.hpp)
//   the checkpoint tensor table for everything that is not packed
//   the activation table

#include <cstddef>
#include <memory>
#include <string>

#include "lowbit/config.hpp"
#include "lowbit/model.hpp"

namespace lowbit {

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Seq2Seq> model;
};

void save_checkpoint(const std::string& path, Seq2Seq& model, const RunConfig& config);
LoadedModel load_checkpoint(const std::string& path);

struct ExportStats {
  std::size_t matrices = 0;
  std::size_t packed_bytes = 0;  // sum of packed section sizes
  std::size_t fp32_bytes = 0;    // 4 bytes per element of the same matrices
  std::size_t file_bytes = 0;
  double ratio = 0;              // fp32_bytes / packed_bytes
};

// Packs every ternary / binary parameter matrix. Throws if there is none.
ExportStats export_packed(const std::string& path, Seq2Seq& model, const RunConfig& config);
// The returned model runs its quantized matrices from the packed levels.
LoadedModel load_packed(const std::string& path);

}  // namespace lowbit
