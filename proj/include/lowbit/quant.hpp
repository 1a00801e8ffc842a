#pragma once

// Ternary / binary quantizers for weights and activations.
//
// Every quantizer returns integer levels plus the scale(s) needed to
// reconstruct real values as alpha * level. The statistics (mu) used to
// centre the input before quantization are reported but never added back.
//
// Stat-based quantizers (TWN, BWN, isometric, 8-bit weights) work per row.
// Learned activation quantizers use one alpha for the whole tensor; the
// signed branch still centres each row (token) on its own mean so that a
// token's quantized value never depends on other tokens in the batch.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

#include "lowbit/types.hpp"

namespace lowbit {

inline constexpr double kAlphaEpsilon = 1e-8;

enum class QuantKind : std::uint8_t {
  TernaryWeight,
  BinaryWeight,
  TernaryActNonNeg,
  TernaryActSigned,
  BinaryActNonNeg,
  BinaryActSigned,
  BaselineTWN,
  BaselineBWN,
  Int8Weight,
  Int8ActSigned,
  Int8ActNonNeg,
};

enum class Granularity : std::uint8_t { PerRow, PerTensor };

struct QuantScheme {
  QuantKind kind = QuantKind::TernaryWeight;
  Granularity granularity = Granularity::PerRow;

  static QuantScheme of(QuantKind kind);
  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

struct LevelRange {
  int min;
  int max;
};

constexpr bool is_learned_activation(QuantKind k) {
  return k == QuantKind::TernaryActNonNeg || k == QuantKind::TernaryActSigned ||
         k == QuantKind::BinaryActNonNeg || k == QuantKind::BinaryActSigned ||
         k == QuantKind::Int8ActSigned || k == QuantKind::Int8ActNonNeg;
}

constexpr bool is_non_negative(QuantKind k) {
  return k == QuantKind::TernaryActNonNeg || k == QuantKind::BinaryActNonNeg ||
         k == QuantKind::Int8ActNonNeg;
}

constexpr bool is_ternary(QuantKind k) {
  return k == QuantKind::TernaryWeight || k == QuantKind::TernaryActNonNeg ||
         k == QuantKind::TernaryActSigned || k == QuantKind::BaselineTWN;
}

constexpr bool is_binary(QuantKind k) {
  return k == QuantKind::BinaryWeight || k == QuantKind::BinaryActNonNeg ||
         k == QuantKind::BinaryActSigned || k == QuantKind::BaselineBWN;
}

inline QuantScheme QuantScheme::of(QuantKind kind) {
  return {kind, is_learned_activation(kind) ? Granularity::PerTensor : Granularity::PerRow};
}

constexpr LevelRange level_range(QuantKind k) {
  switch (k) {
    case QuantKind::TernaryWeight:
    case QuantKind::TernaryActSigned:
    case QuantKind::BaselineTWN:
      return {-1, 1};
    case QuantKind::TernaryActNonNeg:
      return {0, 2};
    case QuantKind::BinaryWeight:
    case QuantKind::BinaryActSigned:
    case QuantKind::BaselineBWN:
      return {-1, 1};
    case QuantKind::BinaryActNonNeg:
      return {0, 1};
    case QuantKind::Int8Weight:
    case QuantKind::Int8ActSigned:
      return {-127, 127};
    case QuantKind::Int8ActNonNeg:
      return {0, 255};
  }
  return {0, 0};
}

inline std::string_view to_string(QuantKind k) {
  switch (k) {
    case QuantKind::TernaryWeight: return "ternary_weight";
    case QuantKind::BinaryWeight: return "binary_weight";
    case QuantKind::TernaryActNonNeg: return "ternary_act_nonneg";
    case QuantKind::TernaryActSigned: return "ternary_act_signed";
    case QuantKind::BinaryActNonNeg: return "binary_act_nonneg";
    case QuantKind::BinaryActSigned: return "binary_act_signed";
    case QuantKind::BaselineTWN: return "baseline_twn";
    case QuantKind::BaselineBWN: return "baseline_bwn";
    case QuantKind::Int8Weight: return "int8_weight";
    case QuantKind::Int8ActSigned: return "int8_act_signed";
    case QuantKind::Int8ActNonNeg: return "int8_act_nonneg";
  }
  return "unknown";
}

/// Quantized values with their reconstruction scales.
///
/// `alpha` has one entry per row (PerRow) or a single entry (PerTensor).
/// `mu` always has one entry per row.
template <typename Scalar>
struct QuantizedTensor {
  LevelMatrix levels;
  ColVector<Scalar> alpha;
  ColVector<Scalar> mu;
  QuantScheme scheme;

  Index rows() const { return levels.rows(); }
  Index cols() const { return levels.cols(); }

  Scalar scale(Index row) const {
    return scheme.granularity == Granularity::PerRow ? alpha[row] : alpha[0];
  }

  RowMatrix<Scalar> dequantize() const {
    RowMatrix<Scalar> out(rows(), cols());
    for (Index r = 0; r < rows(); ++r) {
      out.row(r) = levels.row(r).template cast<Scalar>() * scale(r);
    }
    return out;
  }
};

/// Learned activation quantizer state (one alpha per tensor).
template <typename Scalar>
struct ActQuantState {
  Scalar alpha = Scalar(1);
  bool initialized = false;
  QuantScheme scheme = QuantScheme::of(QuantKind::TernaryActSigned);
};

namespace detail {

// Round half away from zero.
template <typename Scalar>
Scalar round_level(Scalar v) {
  return std::round(v);
}

template <typename Scalar>
Scalar clip(Scalar v, Scalar lo, Scalar hi) {
  return std::min(std::max(v, lo), hi);
}

template <typename Scalar>
Scalar clamp_alpha(Scalar a) {
  return std::max(a, Scalar(kAlphaEpsilon));
}

template <typename Scalar>
std::int16_t sign_level(Scalar v) {
  return v >= Scalar(0) ? 1 : -1;
}

template <typename Scalar>
QuantizedTensor<Scalar> allocate(Index rows, Index cols, QuantKind kind) {
  QuantizedTensor<Scalar> q;
  q.scheme = QuantScheme::of(kind);
  q.levels.resize(rows, cols);
  q.alpha = ColVector<Scalar>::Zero(q.scheme.granularity == Granularity::PerRow ? rows : 1);
  q.mu = ColVector<Scalar>::Zero(rows);
  return q;
}

inline void check_nonempty(Index cols) {
  if (cols == 0) throw std::invalid_argument("quantizer input row is empty");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline weight quantizers.

/// Threshold ternarization: delta = 0.7 * mean|w|, alpha = mean of the
/// magnitudes above delta. Applied per row.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> twn_ternarize(const Eigen::MatrixBase<Derived>& w_in) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  detail::check_nonempty(w.cols());
  auto q = detail::allocate<Scalar>(w.rows(), w.cols(), QuantKind::BaselineTWN);
  const auto n = static_cast<Scalar>(w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    const Scalar delta = Scalar(0.7) * w.row(r).cwiseAbs().sum() / n;
    Scalar mass = 0;
    Index count = 0;
    for (Index c = 0; c < w.cols(); ++c) {
      const Scalar v = w(r, c);
      if (v > delta) {
        q.levels(r, c) = 1;
      } else if (v < -delta) {
        q.levels(r, c) = -1;
      } else {
        q.levels(r, c) = 0;
      }
      if (std::abs(v) > delta) {
        mass += std::abs(v);
        ++count;
      }
    }
    q.alpha[r] = count == 0 ? Scalar(kAlphaEpsilon) : detail::clamp_alpha(mass / Scalar(count));
  }
  return q;
}

/// Sign binarization with alpha = mean|w|. sign(0) = +1.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> bwn_binarize(const Eigen::MatrixBase<Derived>& w_in) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  detail::check_nonempty(w.cols());
  auto q = detail::allocate<Scalar>(w.rows(), w.cols(), QuantKind::BaselineBWN);
  const auto n = static_cast<Scalar>(w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) q.levels(r, c) = detail::sign_level(w(r, c));
    q.alpha[r] = detail::clamp_alpha(w.row(r).cwiseAbs().sum() / n);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Max-entropy isometric weight quantizers.

/// mu = mean(w), alpha = 4/3 * mean|w - mu|, level = round(clip((w - mu)/alpha, -1, 1)).
/// For symmetric uniform rows this places the rounding thresholds so that
/// each of the three levels receives a third of the mass.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> isometric_ternarize(
    const Eigen::MatrixBase<Derived>& w_in) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  detail::check_nonempty(w.cols());
  auto q = detail::allocate<Scalar>(w.rows(), w.cols(), QuantKind::TernaryWeight);
  const auto n = static_cast<Scalar>(w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    const Scalar mu = w.row(r).sum() / n;
    const Scalar alpha =
        detail::clamp_alpha(Scalar(4) / Scalar(3) * (w.row(r).array() - mu).abs().sum() / n);
    for (Index c = 0; c < w.cols(); ++c) {
      const Scalar v = detail::clip((w(r, c) - mu) / alpha, Scalar(-1), Scalar(1));
      q.levels(r, c) = static_cast<std::int16_t>(detail::round_level(v));
    }
    q.mu[r] = mu;
    q.alpha[r] = alpha;
  }
  return q;
}

/// mu = mean(w), alpha = mean|w - mu|, level = sign(w - mu).
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> isometric_binarize(
    const Eigen::MatrixBase<Derived>& w_in) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  detail::check_nonempty(w.cols());
  auto q = detail::allocate<Scalar>(w.rows(), w.cols(), QuantKind::BinaryWeight);
  const auto n = static_cast<Scalar>(w.cols());
  for (Index r = 0; r < w.rows(); ++r) {
    const Scalar mu = w.row(r).sum() / n;
    const Scalar alpha = detail::clamp_alpha((w.row(r).array() - mu).abs().sum() / n);
    for (Index c = 0; c < w.cols(); ++c) {
      q.levels(r, c) = detail::sign_level((w(r, c) - mu) / alpha);
    }
    q.mu[r] = mu;
    q.alpha[r] = alpha;
  }
  return q;
}

/// Symmetric per-row 8-bit weights: alpha = max|w| / 127.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> int8_weight_quantize(
    const Eigen::MatrixBase<Derived>& w_in) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  detail::check_nonempty(w.cols());
  auto q = detail::allocate<Scalar>(w.rows(), w.cols(), QuantKind::Int8Weight);
  for (Index r = 0; r < w.rows(); ++r) {
    const Scalar alpha = detail::clamp_alpha(w.row(r).cwiseAbs().maxCoeff() / Scalar(127));
    for (Index c = 0; c < w.cols(); ++c) {
      const Scalar v = detail::clip(w(r, c) / alpha, Scalar(-127), Scalar(127));
      q.levels(r, c) = static_cast<std::int16_t>(detail::round_level(v));
    }
    q.alpha[r] = alpha;
  }
  return q;
}

/// Dispatch over the weight-style (per-row, statistics-based) quantizers.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> quantize_weight(const Eigen::MatrixBase<Derived>& w,
                                                          QuantKind kind) {
  switch (kind) {
    case QuantKind::TernaryWeight: return isometric_ternarize(w);
    case QuantKind::BinaryWeight: return isometric_binarize(w);
    case QuantKind::BaselineTWN: return twn_ternarize(w);
    case QuantKind::BaselineBWN: return bwn_binarize(w);
    case QuantKind::Int8Weight: return int8_weight_quantize(w);
    default: break;
  }
  throw std::invalid_argument("quantize_weight: not a weight scheme: " +
                              std::string(to_string(kind)));
}

/// Straight-through mask for a weight quantizer.
///
/// Isometric ternary: |(w - mu)/alpha| <= 1 (the clip range).
/// Isometric binary:  |(w - mu)/alpha| <  1.
/// 8-bit: inside the clip range, which always holds for absmax scaling.
/// Baseline TWN/BWN: identity.
template <typename Derived>
RowArray<typename Derived::Scalar> weight_ste_mask(
    const Eigen::MatrixBase<Derived>& w_in, const QuantizedTensor<typename Derived::Scalar>& q) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> w = w_in;
  if (w.rows() != q.rows() || w.cols() != q.cols()) {
    throw std::invalid_argument("weight_ste_mask: shape mismatch");
  }
  RowArray<Scalar> mask = RowArray<Scalar>::Ones(w.rows(), w.cols());
  const QuantKind kind = q.scheme.kind;
  if (kind == QuantKind::BaselineTWN || kind == QuantKind::BaselineBWN) return mask;
  for (Index r = 0; r < w.rows(); ++r) {
    const Scalar alpha = q.scale(r);
    for (Index c = 0; c < w.cols(); ++c) {
      const Scalar t = std::abs((w(r, c) - q.mu[r]) / alpha);
      bool pass = true;
      switch (kind) {
        case QuantKind::TernaryWeight: pass = t <= Scalar(1); break;
        case QuantKind::BinaryWeight: pass = t < Scalar(1); break;
        case QuantKind::Int8Weight: pass = t <= Scalar(127); break;
        default: break;
      }
      mask(r, c) = pass ? Scalar(1) : Scalar(0);
    }
  }
  return mask;
}

/// Gradient of the loss w.r.t. the real-valued weights; mu and alpha are
/// treated as constants.
template <typename DerivedW, typename DerivedG>
RowMatrix<typename DerivedW::Scalar> weight_backward(
    const Eigen::MatrixBase<DerivedW>& w, const Eigen::MatrixBase<DerivedG>& upstream,
    const QuantizedTensor<typename DerivedW::Scalar>& q) {
  if (upstream.rows() != w.rows() || upstream.cols() != w.cols()) {
    throw std::invalid_argument("weight_backward: shape mismatch");
  }
  RowMatrix<typename DerivedW::Scalar> g = upstream;
  return (g.array() * weight_ste_mask(w, q)).matrix();
}

// ---------------------------------------------------------------------------
// Learned (elastic) activation quantizers.

namespace detail {

template <typename Scalar>
void check_act_state(const ActQuantState<Scalar>& s) {
  if (!is_learned_activation(s.scheme.kind)) {
    throw std::invalid_argument("activation quantizer: not an activation scheme: " +
                                std::string(to_string(s.scheme.kind)));
  }
  if (!(s.alpha >= Scalar(kAlphaEpsilon))) {
    throw std::invalid_argument("activation quantizer: alpha below epsilon");
  }
}

template <typename Scalar>
void check_non_negative(const RowMatrix<Scalar>& x) {
  if (x.size() > 0 && x.minCoeff() < Scalar(0)) {
    throw std::domain_error(
        "non-negative activation quantizer received a negative input; only "
        "post-ReLU / post-softmax tensors may use it");
  }
}

template <typename Scalar>
ColVector<Scalar> row_means(const RowMatrix<Scalar>& x) {
  ColVector<Scalar> m = ColVector<Scalar>::Zero(x.rows());
  if (x.cols() > 0) m = x.rowwise().sum() / static_cast<Scalar>(x.cols());
  return m;
}

// The low-bit branches compare against the rounding midpoints directly, which
// is exactly round-half-away-from-zero of the clipped value.
template <typename Scalar>
std::int16_t act_level(QuantKind kind, Scalar t) {
  switch (kind) {
    case QuantKind::TernaryActNonNeg:
      return t >= Scalar(1.5) ? 2 : (t >= Scalar(0.5) ? 1 : 0);
    case QuantKind::TernaryActSigned:
      return t >= Scalar(0.5) ? 1 : (t <= Scalar(-0.5) ? -1 : 0);
    case QuantKind::BinaryActNonNeg:
      return t >= Scalar(0.5) ? 1 : 0;
    case QuantKind::BinaryActSigned:
      return sign_level(t);
    case QuantKind::Int8ActSigned:
      return static_cast<std::int16_t>(round_level(clip(t, Scalar(-127), Scalar(127))));
    case QuantKind::Int8ActNonNeg:
      return static_cast<std::int16_t>(round_level(clip(t, Scalar(0), Scalar(255))));
    default:
      break;
  }
  throw std::invalid_argument("act_level: not an activation scheme");
}

// Whether the centred value lies in the un-clipped range of the quantizer.
template <typename Scalar>
bool act_in_range(QuantKind kind, Scalar v, Scalar alpha) {
  switch (kind) {
    case QuantKind::TernaryActNonNeg: return Scalar(0) <= v && v <= Scalar(2) * alpha;
    case QuantKind::TernaryActSigned: return std::abs(v) <= alpha;
    case QuantKind::BinaryActNonNeg: return Scalar(0) <= v && v <= alpha;
    case QuantKind::BinaryActSigned: return std::abs(v) <= alpha;
    case QuantKind::Int8ActSigned: return std::abs(v) <= Scalar(127) * alpha;
    case QuantKind::Int8ActNonNeg: return Scalar(0) <= v && v <= Scalar(255) * alpha;
    default: break;
  }
  return false;
}

constexpr bool act_centres(QuantKind kind) {
  return kind == QuantKind::TernaryActSigned || kind == QuantKind::BinaryActSigned;
}

template <QuantKind K>
using KindTag = std::integral_constant<QuantKind, K>;

// Calls f(KindTag<kind>{}) so that per-element switches fold away.
template <typename F>
decltype(auto) dispatch_act(QuantKind kind, F&& f) {
  switch (kind) {
    case QuantKind::TernaryActNonNeg: return f(KindTag<QuantKind::TernaryActNonNeg>{});
    case QuantKind::TernaryActSigned: return f(KindTag<QuantKind::TernaryActSigned>{});
    case QuantKind::BinaryActNonNeg: return f(KindTag<QuantKind::BinaryActNonNeg>{});
    case QuantKind::BinaryActSigned: return f(KindTag<QuantKind::BinaryActSigned>{});
    case QuantKind::Int8ActSigned: return f(KindTag<QuantKind::Int8ActSigned>{});
    case QuantKind::Int8ActNonNeg: return f(KindTag<QuantKind::Int8ActNonNeg>{});
    default: break;
  }
  throw std::invalid_argument("not an activation scheme: " + std::string(to_string(kind)));
}

}  // namespace detail

/// Quantize an activation tensor with a learned per-tensor alpha.
///
/// Non-negative branches: level = round(clip(x/alpha, 0, top)).
/// Signed ternary: level = round(clip(x'/alpha, -1, 1)), x' = x - row mean.
/// Signed binary:  level = sign(x').
/// 8-bit: symmetric uniform levels without centring.
template <typename Derived>
QuantizedTensor<typename Derived::Scalar> quantize_activation(
    const Eigen::MatrixBase<Derived>& x_in, const ActQuantState<typename Derived::Scalar>& state) {
  using Scalar = typename Derived::Scalar;
  detail::check_act_state(state);
  const RowMatrix<Scalar> x = x_in;
  const QuantKind kind = state.scheme.kind;
  if (is_non_negative(kind)) detail::check_non_negative(x);
  auto q = detail::allocate<Scalar>(x.rows(), x.cols(), kind);
  if (detail::act_centres(kind)) q.mu = detail::row_means(x);
  q.alpha[0] = state.alpha;
  const Scalar alpha = state.alpha;
  detail::dispatch_act(kind, [&](auto tag) {
    for (Index r = 0; r < x.rows(); ++r) {
      const Scalar m = q.mu[r];
      for (Index c = 0; c < x.cols(); ++c) {
        q.levels(r, c) = detail::act_level(tag.value, (x(r, c) - m) / alpha);
      }
    }
  });
  return q;
}

template <typename Derived>
QuantizedTensor<typename Derived::Scalar> elastic_ternarize(
    const Eigen::MatrixBase<Derived>& x, const ActQuantState<typename Derived::Scalar>& state) {
  if (!is_ternary(state.scheme.kind)) {
    throw std::invalid_argument("elastic_ternarize: scheme is not ternary");
  }
  return quantize_activation(x, state);
}

template <typename Derived>
QuantizedTensor<typename Derived::Scalar> elastic_binarize(
    const Eigen::MatrixBase<Derived>& x, const ActQuantState<typename Derived::Scalar>& state) {
  if (!is_binary(state.scheme.kind)) {
    throw std::invalid_argument("elastic_binarize: scheme is not binary");
  }
  return quantize_activation(x, state);
}

/// d(loss)/d(alpha) for a learned activation quantizer, straight-through
/// over the rounding:
///   ternary / 8-bit / non-negative binary: level - (x'/alpha) * 1[x' in range]
///   signed binary: sign(x')
template <typename DerivedX, typename DerivedG>
typename DerivedX::Scalar act_grad_alpha(const Eigen::MatrixBase<DerivedX>& x_in,
                                         const ActQuantState<typename DerivedX::Scalar>& state,
                                         const Eigen::MatrixBase<DerivedG>& upstream) {
  using Scalar = typename DerivedX::Scalar;
  if (upstream.rows() != x_in.rows() || upstream.cols() != x_in.cols()) {
    throw std::invalid_argument("act_grad_alpha: shape mismatch");
  }
  detail::check_act_state(state);
  const RowMatrix<Scalar> x = x_in;
  const QuantKind kind = state.scheme.kind;
  const Scalar alpha = state.alpha;
  const ColVector<Scalar> mu =
      detail::act_centres(kind) ? detail::row_means(x) : ColVector<Scalar>::Zero(x.rows());
  return detail::dispatch_act(kind, [&](auto tag) {
    constexpr QuantKind k = decltype(tag)::value;
    Scalar total = 0;
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        const Scalar u = upstream(r, c);
        if (u == Scalar(0)) continue;
        const Scalar v = x(r, c) - mu[r];
        Scalar partial;
        if constexpr (k == QuantKind::BinaryActSigned) {
          partial = Scalar(detail::sign_level(v));
        } else {
          const Scalar level = detail::act_level(k, v / alpha);
          partial = level - (detail::act_in_range(k, v, alpha) ? v / alpha : Scalar(0));
        }
        total += u * partial;
      }
    }
    return total;
  });
}

template <typename DerivedX, typename DerivedG>
typename DerivedX::Scalar elastic_ternarize_grad_alpha(
    const Eigen::MatrixBase<DerivedX>& x, const ActQuantState<typename DerivedX::Scalar>& state,
    const Eigen::MatrixBase<DerivedG>& upstream) {
  if (!is_ternary(state.scheme.kind)) {
    throw std::invalid_argument("elastic_ternarize_grad_alpha: scheme is not ternary");
  }
  return act_grad_alpha(x, state, upstream);
}

template <typename DerivedX, typename DerivedG>
typename DerivedX::Scalar elastic_binarize_grad_alpha(
    const Eigen::MatrixBase<DerivedX>& x, const ActQuantState<typename DerivedX::Scalar>& state,
    const Eigen::MatrixBase<DerivedG>& upstream) {
  if (!is_binary(state.scheme.kind)) {
    throw std::invalid_argument("elastic_binarize_grad_alpha: scheme is not binary");
  }
  return act_grad_alpha(x, state, upstream);
}

/// Straight-through input gradient: upstream passes where the (centred)
/// input lies in the un-clipped range of its branch. The row mean is
/// detached.
template <typename DerivedX, typename DerivedG>
RowMatrix<typename DerivedX::Scalar> act_grad_input(
    const Eigen::MatrixBase<DerivedX>& x_in, const ActQuantState<typename DerivedX::Scalar>& state,
    const Eigen::MatrixBase<DerivedG>& upstream) {
  using Scalar = typename DerivedX::Scalar;
  if (upstream.rows() != x_in.rows() || upstream.cols() != x_in.cols()) {
    throw std::invalid_argument("act_grad_input: shape mismatch");
  }
  detail::check_act_state(state);
  const RowMatrix<Scalar> x = x_in;
  const QuantKind kind = state.scheme.kind;
  const ColVector<Scalar> mu =
      detail::act_centres(kind) ? detail::row_means(x) : ColVector<Scalar>::Zero(x.rows());
  RowMatrix<Scalar> g(x.rows(), x.cols());
  detail::dispatch_act(kind, [&](auto tag) {
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index c = 0; c < x.cols(); ++c) {
        const bool pass = detail::act_in_range(tag.value, x(r, c) - mu[r], state.alpha);
        g(r, c) = pass ? upstream(r, c) : Scalar(0);
      }
    }
  });
  return g;
}

/// First-batch alpha for a learned activation quantizer: 4/3 * mean|x'| for
/// ternary, mean|x'| for binary, with x' the input centred on its tensor
/// mean. The 8-bit helper uses the absolute maximum over its level count.
template <typename Derived>
typename Derived::Scalar calibrate_alpha(const Eigen::MatrixBase<Derived>& x_in, QuantKind kind) {
  using Scalar = typename Derived::Scalar;
  const RowMatrix<Scalar> x = x_in;
  if (x.size() == 0) return Scalar(kAlphaEpsilon);
  if (kind == QuantKind::Int8ActSigned) {
    return detail::clamp_alpha(x.cwiseAbs().maxCoeff() / Scalar(127));
  }
  if (kind == QuantKind::Int8ActNonNeg) {
    return detail::clamp_alpha(x.maxCoeff() / Scalar(255));
  }
  const Scalar mean = x.mean();
  const Scalar mad = (x.array() - mean).abs().mean();
  const Scalar factor = is_ternary(kind) ? Scalar(4) / Scalar(3) : Scalar(1);
  return detail::clamp_alpha(factor * mad);
}

// ---------------------------------------------------------------------------
// Entropy diagnostics.

template <typename Scalar>
std::map<int, double> level_proportions(const QuantizedTensor<Scalar>& q) {
  std::map<int, double> p;
  const auto n = static_cast<double>(q.levels.size());
  if (n == 0) return p;
  for (Index i = 0; i < q.levels.size(); ++i) p[q.levels.data()[i]] += 1.0;
  for (auto& [level, count] : p) count /= n;
  return p;
}

/// Shannon entropy of the level distribution, in nats.
template <typename Scalar>
double quant_entropy(const QuantizedTensor<Scalar>& q) {
  double h = 0.0;
  for (const auto& [level, p] : level_proportions(q)) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace lowbit
