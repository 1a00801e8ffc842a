#pragma once

// Bit-plane storage and popcount GEMM for binary / ternary matrices.
//
// Element c of row r lives at bit (c % 64) of word (c / 64) of that row.
// Bits beyond `cols` are always zero.
//
//   Binary        {-1,+1}: pos = (level == +1), neg = ~pos on valid bits
//   Ternary       {-1,0,1}: pos = (level == +1), neg = (level == -1)
//   BinaryNonNeg  {0,1}:   pos = (level == 1)
//   TernaryNonNeg {0,1,2}: pos = (level == 1), two = (level == 2)

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "lowbit/quant.hpp"
#include "lowbit/types.hpp"

namespace lowbit {

enum class PackScheme : std::uint8_t {
  Binary = 0,
  Ternary = 1,
  BinaryNonNeg = 2,
  TernaryNonNeg = 3,
};

std::string_view to_string(PackScheme s);

using AccMatrix = RowMatrix<std::int32_t>;

struct PackedMatrix {
  Index rows = 0;
  Index cols = 0;
  PackScheme scheme = PackScheme::Ternary;
  std::vector<std::uint64_t> plane_pos;
  std::vector<std::uint64_t> plane_neg;
  std::vector<std::uint64_t> plane_two;
  std::vector<double> row_scales;

  Index words_per_row() const { return (cols + 63) / 64; }
  const std::uint64_t* pos_row(Index r) const { return plane_pos.data() + r * words_per_row(); }
  const std::uint64_t* neg_row(Index r) const { return plane_neg.data() + r * words_per_row(); }
  const std::uint64_t* two_row(Index r) const { return plane_two.data() + r * words_per_row(); }
};

// Maps a quantizer's level set onto a storage scheme; throws for 8-bit.
PackScheme pack_scheme_for(QuantKind kind);

// Packs `rows` x `cols` levels read with the given row stride. Anything past
// `cols` in a row is ignored.
PackedMatrix pack_levels(const std::int16_t* levels, Index rows, Index cols, Index stride,
                         PackScheme scheme, std::span<const double> row_scales);

// Packs a quantized tensor; a per-tensor scale is replicated to every row.
PackedMatrix pack(const QuantizedTensor<double>& q);

LevelMatrix unpack_levels(const PackedMatrix& m);

// Integer accumulators, shape (w.rows x x.rows).
AccMatrix binary_gemm_raw(const PackedMatrix& w, const PackedMatrix& x);
AccMatrix ternary_gemm_raw(const PackedMatrix& w, const PackedMatrix& x);
// Picks the XNOR path when both operands allow it.
AccMatrix packed_gemm_raw(const PackedMatrix& w, const PackedMatrix& x);

// raw(i, j) * (w.row_scales[i] * x.row_scales[j])
Matrix binary_gemm(const PackedMatrix& w, const PackedMatrix& x);
Matrix ternary_gemm(const PackedMatrix& w, const PackedMatrix& x);
Matrix packed_gemm(const PackedMatrix& w, const PackedMatrix& x);

// Converts accumulators to reals with the same multiplication order used by
// the training-time fake-quantized linear layer.
Matrix apply_scales(const AccMatrix& raw, std::span<const double> w_scales,
                    std::span<const double> x_scales);

// Naive GEMM over dequantized values: out(i, j) = sum_k dq_w(i, k) * dq_x(j, k).
Matrix reference_gemm(const QuantizedTensor<double>& qw, const QuantizedTensor<double>& qx);
// Naive integer dot products of the levels.
AccMatrix reference_gemm_raw(const LevelMatrix& w, const LevelMatrix& x);

// ---------------------------------------------------------------------------
// Packed section file format:
//   u8 scheme, u32 rows, u32 cols, f32 row_scales[rows], zero padding to an
//   8-byte boundary, then the scheme's planes (u64 little-endian words,
//   rows * words_per_row each) in the order pos, neg, two. Binary and
//   BinaryNonNeg store only pos (neg is implied), TernaryNonNeg stores pos
//   and two.

void write_packed(std::ostream& out, const PackedMatrix& m);
PackedMatrix read_packed(std::istream& in);
std::size_t packed_section_bytes(const PackedMatrix& m);

// ---------------------------------------------------------------------------
// Microbenchmark.

struct GemmShape {
  Index m = 0;  // weight rows
  Index k = 0;  // shared depth
  Index n = 0;  // activation rows
};

struct BenchRow {
  GemmShape shape;
  int repeats = 0;
  double binary_ns = 0;
  double ternary_ns = 0;
  double reference_ns = 0;
  double binary_gops = 0;
  double ternary_gops = 0;
  double reference_gops = 0;
  double binary_speedup = 0;  // reference_ns / binary_ns
};

// Median wall time per GEMM call over `repeats` runs for each shape.
std::vector<BenchRow> bench(std::span<const GemmShape> shapes, int repeats,
                            std::uint64_t seed = 1);

std::string bench_header();
std::string format_bench_row(const BenchRow& row);

}  // namespace lowbit
