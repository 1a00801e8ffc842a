#include "lowbit/kernels.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lowbit {

std::string_view to_string(PackScheme s) {
  switch (s) {
    case PackScheme::Binary: return "binary";
    case PackScheme::Ternary: return "ternary";
    case PackScheme::BinaryNonNeg: return "binary_nonneg";
    case PackScheme::TernaryNonNeg: return "ternary_nonneg";
  }
  return "unknown";
}

PackScheme pack_scheme_for(QuantKind kind) {
  switch (kind) {
    case QuantKind::TernaryWeight:
    case QuantKind::TernaryActSigned:
    case QuantKind::BaselineTWN:
      return PackScheme::Ternary;
    case QuantKind::BinaryWeight:
    case QuantKind::BinaryActSigned:
    case QuantKind::BaselineBWN:
      return PackScheme::Binary;
    case QuantKind::TernaryActNonNeg:
      return PackScheme::TernaryNonNeg;
    case QuantKind::BinaryActNonNeg:
      return PackScheme::BinaryNonNeg;
    default:
      break;
  }
  throw std::invalid_argument("pack: unsupported scheme " + std::string(to_string(kind)));
}

namespace {

inline void set_bit(std::vector<std::uint64_t>& plane, Index word, Index bit) {
  plane[static_cast<std::size_t>(word)] |= std::uint64_t{1} << bit;
}

inline std::uint64_t tail_mask(Index cols, Index word) {
  const Index valid = std::min<Index>(64, cols - word * 64);
  return valid >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << valid) - 1);
}

inline int popcount(std::uint64_t v) { return std::popcount(v); }

bool signed_scheme(PackScheme s) { return s == PackScheme::Binary || s == PackScheme::Ternary; }

void check_operands(const PackedMatrix& w, const PackedMatrix& x) {
  if (w.cols != x.cols) throw std::invalid_argument("packed gemm: depth mismatch");
  if (!signed_scheme(w.scheme)) {
    throw std::invalid_argument("packed gemm: weight operand must be binary or ternary");
  }
  if (w.cols > std::numeric_limits<std::int32_t>::max() / 2) {
    throw std::invalid_argument("packed gemm: depth overflows 32-bit accumulators");
  }
}

}  // namespace

PackedMatrix pack_levels(const std::int16_t* levels, Index rows, Index cols, Index stride,
                         PackScheme scheme, std::span<const double> row_scales) {
  if (rows < 0 || cols < 0 || stride < cols) throw std::invalid_argument("pack: bad geometry");
  if (static_cast<Index>(row_scales.size()) != rows) {
    throw std::invalid_argument("pack: one scale per row required");
  }
  PackedMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.scheme = scheme;
  m.row_scales.assign(row_scales.begin(), row_scales.end());
  const Index wpr = m.words_per_row();
  const auto words = static_cast<std::size_t>(rows * wpr);
  m.plane_pos.assign(words, 0);
  m.plane_neg.assign(words, 0);
  if (scheme == PackScheme::TernaryNonNeg) m.plane_two.assign(words, 0);

  for (Index r = 0; r < rows; ++r) {
    const std::int16_t* row = levels + r * stride;
    for (Index c = 0; c < cols; ++c) {
      const int v = row[c];
      const Index word = r * wpr + c / 64;
      const Index bit = c % 64;
      switch (scheme) {
        case PackScheme::Binary:
          if (v == 1) {
            set_bit(m.plane_pos, word, bit);
          } else if (v == -1) {
            set_bit(m.plane_neg, word, bit);
          } else {
            throw std::invalid_argument("pack: binary level outside {-1,1}");
          }
          break;
        case PackScheme::Ternary:
          if (v == 1) {
            set_bit(m.plane_pos, word, bit);
          } else if (v == -1) {
            set_bit(m.plane_neg, word, bit);
          } else if (v != 0) {
            throw std::invalid_argument("pack: ternary level outside {-1,0,1}");
          }
          break;
        case PackScheme::BinaryNonNeg:
          if (v == 1) {
            set_bit(m.plane_pos, word, bit);
          } else if (v != 0) {
            throw std::invalid_argument("pack: level outside {0,1}");
          }
          break;
        case PackScheme::TernaryNonNeg:
          if (v == 1) {
            set_bit(m.plane_pos, word, bit);
          } else if (v == 2) {
            set_bit(m.plane_two, word, bit);
          } else if (v != 0) {
            throw std::invalid_argument("pack: level outside {0,1,2}");
          }
          break;
      }
    }
  }
  return m;
}

PackedMatrix pack(const QuantizedTensor<double>& q) {
  const PackScheme scheme = pack_scheme_for(q.scheme.kind);
  std::vector<double> scales(static_cast<std::size_t>(q.rows()));
  for (Index r = 0; r < q.rows(); ++r) scales[static_cast<std::size_t>(r)] = q.scale(r);
  return pack_levels(q.levels.data(), q.rows(), q.cols(), q.cols(), scheme, scales);
}

LevelMatrix unpack_levels(const PackedMatrix& m) {
  LevelMatrix out = LevelMatrix::Zero(m.rows, m.cols);
  const Index wpr = m.words_per_row();
  for (Index r = 0; r < m.rows; ++r) {
    for (Index c = 0; c < m.cols; ++c) {
      const auto idx = static_cast<std::size_t>(r * wpr + c / 64);
      const std::uint64_t bit = std::uint64_t{1} << (c % 64);
      int v = 0;
      if (m.plane_pos[idx] & bit) v = 1;
      if (m.plane_neg[idx] & bit) v = -1;
      if (!m.plane_two.empty() && (m.plane_two[idx] & bit)) v = 2;
      out(r, c) = static_cast<std::int16_t>(v);
    }
  }
  return out;
}

namespace {

// sum_k a(k) * b(k) for one pair of signed rows against one activation plane.
inline std::int32_t signed_dot(const std::uint64_t* wp, const std::uint64_t* wn,
                               const std::uint64_t* xp, Index words) {
  std::int32_t acc = 0;
  for (Index k = 0; k < words; ++k) {
    acc += popcount(wp[k] & xp[k]) - popcount(wn[k] & xp[k]);
  }
  return acc;
}

}  // namespace

AccMatrix binary_gemm_raw(const PackedMatrix& w, const PackedMatrix& x) {
  check_operands(w, x);
  if (w.scheme != PackScheme::Binary ||
      (x.scheme != PackScheme::Binary && x.scheme != PackScheme::BinaryNonNeg)) {
    throw std::invalid_argument("binary_gemm: expects Binary x Binary or Binary x BinaryNonNeg");
  }
  AccMatrix out(w.rows, x.rows);
  const Index words = w.words_per_row();
  const auto n = static_cast<std::int32_t>(w.cols);
  if (x.scheme == PackScheme::Binary) {
    for (Index i = 0; i < w.rows; ++i) {
      const std::uint64_t* wp = w.pos_row(i);
      for (Index j = 0; j < x.rows; ++j) {
        const std::uint64_t* xp = x.pos_row(j);
        std::int32_t diff = 0;
        for (Index k = 0; k < words; ++k) diff += popcount(wp[k] ^ xp[k]);
        out(i, j) = n - 2 * diff;
      }
    }
  } else {
    for (Index i = 0; i < w.rows; ++i) {
      for (Index j = 0; j < x.rows; ++j) {
        out(i, j) = signed_dot(w.pos_row(i), w.neg_row(i), x.pos_row(j), words);
      }
    }
  }
  return out;
}

AccMatrix ternary_gemm_raw(const PackedMatrix& w, const PackedMatrix& x) {
  check_operands(w, x);
  AccMatrix out(w.rows, x.rows);
  const Index words = w.words_per_row();
  for (Index i = 0; i < w.rows; ++i) {
    const std::uint64_t* wp = w.pos_row(i);
    const std::uint64_t* wn = w.neg_row(i);
    for (Index j = 0; j < x.rows; ++j) {
      std::int32_t acc = 0;
      switch (x.scheme) {
        case PackScheme::Binary:
        case PackScheme::Ternary: {
          const std::uint64_t* xp = x.pos_row(j);
          const std::uint64_t* xn = x.neg_row(j);
          for (Index k = 0; k < words; ++k) {
            acc += popcount(wp[k] & xp[k]) + popcount(wn[k] & xn[k]) -
                   popcount(wp[k] & xn[k]) - popcount(wn[k] & xp[k]);
          }
          break;
        }
        case PackScheme::BinaryNonNeg:
          acc = signed_dot(wp, wn, x.pos_row(j), words);
          break;
        case PackScheme::TernaryNonNeg:
          acc = signed_dot(wp, wn, x.pos_row(j), words) +
                2 * signed_dot(wp, wn, x.two_row(j), words);
          break;
      }
      out(i, j) = acc;
    }
  }
  return out;
}

AccMatrix packed_gemm_raw(const PackedMatrix& w, const PackedMatrix& x) {
  if (w.scheme == PackScheme::Binary &&
      (x.scheme == PackScheme::Binary || x.scheme == PackScheme::BinaryNonNeg)) {
    return binary_gemm_raw(w, x);
  }
  return ternary_gemm_raw(w, x);
}

Matrix apply_scales(const AccMatrix& raw, std::span<const double> w_scales,
                    std::span<const double> x_scales) {
  if (static_cast<Index>(w_scales.size()) != raw.rows() ||
      static_cast<Index>(x_scales.size()) != raw.cols()) {
    throw std::invalid_argument("apply_scales: scale count mismatch");
  }
  Matrix out(raw.rows(), raw.cols());
  for (Index i = 0; i < raw.rows(); ++i) {
    for (Index j = 0; j < raw.cols(); ++j) {
      out(i, j) = static_cast<double>(raw(i, j)) *
                  (w_scales[static_cast<std::size_t>(i)] * x_scales[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

Matrix binary_gemm(const PackedMatrix& w, const PackedMatrix& x) {
  return apply_scales(binary_gemm_raw(w, x), w.row_scales, x.row_scales);
}

Matrix ternary_gemm(const PackedMatrix& w, const PackedMatrix& x) {
  return apply_scales(ternary_gemm_raw(w, x), w.row_scales, x.row_scales);
}

Matrix packed_gemm(const PackedMatrix& w, const PackedMatrix& x) {
  return apply_scales(packed_gemm_raw(w, x), w.row_scales, x.row_scales);
}

Matrix reference_gemm(const QuantizedTensor<double>& qw, const QuantizedTensor<double>& qx) {
  if (qw.cols() != qx.cols()) throw std::invalid_argument("reference_gemm: depth mismatch");
  const Matrix a = qw.dequantize();
  const Matrix b = qx.dequantize();
  Matrix out(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

AccMatrix reference_gemm_raw(const LevelMatrix& w, const LevelMatrix& x) {
  if (w.cols() != x.cols()) throw std::invalid_argument("reference_gemm_raw: depth mismatch");
  AccMatrix out(w.rows(), x.rows());
  for (Index i = 0; i < w.rows(); ++i) {
    for (Index j = 0; j < x.rows(); ++j) {
      std::int32_t acc = 0;
      for (Index k = 0; k < w.cols(); ++k) acc += std::int32_t{w(i, k)} * std::int32_t{x(j, k)};
      out(i, j) = acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("packed section: unexpected end of stream");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

std::size_t header_bytes(Index rows) { return 1 + 4 + 4 + 4 * static_cast<std::size_t>(rows); }

std::size_t padding_for(std::size_t n) { return (8 - n % 8) % 8; }

int stored_planes(PackScheme s) {
  return (s == PackScheme::Binary || s == PackScheme::BinaryNonNeg) ? 1 : 2;
}

}  // namespace

std::size_t packed_section_bytes(const PackedMatrix& m) {
  const std::size_t head = header_bytes(m.rows);
  const std::size_t words = static_cast<std::size_t>(m.rows * m.words_per_row());
  return head + padding_for(head) + 8 * words * static_cast<std::size_t>(stored_planes(m.scheme));
}

void write_packed(std::ostream& out, const PackedMatrix& m) {
  if (m.rows > std::numeric_limits<std::uint32_t>::max() ||
      m.cols > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("write_packed: matrix too large");
  }
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(m.scheme));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols));
  for (double s : m.row_scales) {
    const auto f = static_cast<float>(s);
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  for (std::size_t i = 0; i < padding_for(header_bytes(m.rows)); ++i) put_le<std::uint8_t>(out, 0);
  auto put_plane = [&](const std::vector<std::uint64_t>& plane) {
    for (std::uint64_t w : plane) put_le<std::uint64_t>(out, w);
  };
  put_plane(m.plane_pos);
  if (m.scheme == PackScheme::Ternary) put_plane(m.plane_neg);
  if (m.scheme == PackScheme::TernaryNonNeg) put_plane(m.plane_two);
  if (!out) throw std::runtime_error("write_packed: stream write failed");
}

PackedMatrix read_packed(std::istream& in) {
  PackedMatrix m;
  const auto scheme = get_le<std::uint8_t>(in);
  if (scheme > 3) throw std::runtime_error("read_packed: unknown scheme tag");
  m.scheme = static_cast<PackScheme>(scheme);
  m.rows = get_le<std::uint32_t>(in);
  m.cols = get_le<std::uint32_t>(in);
  m.row_scales.resize(static_cast<std::size_t>(m.rows));
  for (auto& s : m.row_scales) s = std::bit_cast<float>(get_le<std::uint32_t>(in));
  for (std::size_t i = 0; i < padding_for(header_bytes(m.rows)); ++i) get_le<std::uint8_t>(in);
  const auto words = static_cast<std::size_t>(m.rows * m.words_per_row());
  auto get_plane = [&](std::vector<std::uint64_t>& plane) {
    plane.resize(words);
    for (auto& w : plane) w = get_le<std::uint64_t>(in);
  };
  get_plane(m.plane_pos);
  m.plane_neg.assign(words, 0);
  switch (m.scheme) {
    case PackScheme::Binary:
      for (Index r = 0; r < m.rows; ++r) {
        for (Index k = 0; k < m.words_per_row(); ++k) {
          const auto idx = static_cast<std::size_t>(r * m.words_per_row() + k);
          m.plane_neg[idx] = ~m.plane_pos[idx] & tail_mask(m.cols, k);
        }
      }
      break;
    case PackScheme::Ternary:
      get_plane(m.plane_neg);
      break;
    case PackScheme::BinaryNonNeg:
      break;
    case PackScheme::TernaryNonNeg:
      get_plane(m.plane_two);
      break;
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

QuantizedTensor<double> random_levels(Index rows, Index cols, QuantKind kind, std::mt19937_64& rng) {
  QuantizedTensor<double> q;
  q.scheme = QuantScheme::of(kind);
  q.levels.resize(rows, cols);
  const LevelRange range = level_range(kind);
  std::uniform_int_distribution<int> pick(range.min, range.max);
  std::uniform_int_distribution<int> coin(0, 1);
  for (Index i = 0; i < q.levels.size(); ++i) {
    int v = pick(rng);
    if (is_binary(kind) && range.min == -1) v = coin(rng) ? 1 : -1;
    q.levels.data()[i] = static_cast<std::int16_t>(v);
  }
  q.alpha = ColVector<double>::Constant(q.scheme.granularity == Granularity::PerRow ? rows : 1, 0.5);
  q.mu = ColVector<double>::Zero(rows);
  return q;
}

template <typename F>
double median_ns(int repeats, F&& f) {
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
  return samples[samples.size() / 2];
}

}  // namespace

std::vector<BenchRow> bench(std::span<const GemmShape> shapes, int repeats, std::uint64_t seed) {
  if (repeats <= 0) throw std::invalid_argument("bench: repeats must be positive");
  std::mt19937_64 rng(seed);
  std::vector<BenchRow> rows;
  volatile double sink = 0.0;
  for (const GemmShape& s : shapes) {
    if (s.m <= 0 || s.k <= 0 || s.n <= 0) throw std::invalid_argument("bench: empty shape");
    const auto wb = random_levels(s.m, s.k, QuantKind::BinaryWeight, rng);
    const auto xb = random_levels(s.n, s.k, QuantKind::BinaryWeight, rng);
    const auto wt = random_levels(s.m, s.k, QuantKind::TernaryWeight, rng);
    const auto xt = random_levels(s.n, s.k, QuantKind::TernaryWeight, rng);
    const PackedMatrix pwb = pack(wb);
    const PackedMatrix pxb = pack(xb);
    const PackedMatrix pwt = pack(wt);
    const PackedMatrix pxt = pack(xt);

    BenchRow row;
    row.shape = s;
    row.repeats = repeats;
    row.binary_ns = median_ns(repeats, [&] { sink = sink + binary_gemm(pwb, pxb)(0, 0); });
    row.ternary_ns = median_ns(repeats, [&] { sink = sink + ternary_gemm(pwt, pxt)(0, 0); });
    row.reference_ns = median_ns(repeats, [&] { sink = sink + reference_gemm(wb, xb)(0, 0); });
    const double ops = 2.0 * static_cast<double>(s.m) * static_cast<double>(s.k) *
                       static_cast<double>(s.n);
    row.binary_gops = ops / row.binary_ns;
    row.ternary_gops = ops / row.ternary_ns;
    row.reference_gops = ops / row.reference_ns;
    row.binary_speedup = row.reference_ns / row.binary_ns;
    rows.push_back(row);
  }
  return rows;
}

std::string bench_header() {
  return "m\tk\tn\trepeats\tbinary_ns\tternary_ns\treference_ns\tbinary_gops\tternary_gops\t"
         "reference_gops\tbinary_speedup";
}

std::string format_bench_row(const BenchRow& r) {
  std::ostringstream os;
  os << r.shape.m << '\t' << r.shape.k << '\t' << r.shape.n << '\t' << r.repeats << '\t'
     << r.binary_ns << '\t' << r.ternary_ns << '\t' << r.reference_ns << '\t' << r.binary_gops
     << '\t' << r.ternary_gops << '\t' << r.reference_gops << '\t' << r.binary_speedup;
  return os.str();
}

}  // namespace lowbit
