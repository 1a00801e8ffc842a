#include "lowbit/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lowbit {

std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::Both: return "both";
    case Ablation::WeightOnly: return "weight_only";
    case Ablation::ActOnly: return "act_only";
    case Ablation::Baseline: return "baseline";
  }
  return "both";
}

Ablation parse_ablation(std::string_view s) {
  if (s == "both") return Ablation::Both;
  if (s == "weight_only") return Ablation::WeightOnly;
  if (s == "act_only") return Ablation::ActOnly;
  if (s == "baseline") return Ablation::Baseline;
  throw std::invalid_argument("unknown ablation '" + std::string(s) +
                              "' (expected both, weight_only, act_only or baseline)");
}

namespace {

bool valid_bits(int b) { return b == 1 || b == 2 || b == 8 || b == 32; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size < 3) fail("vocab_size must be at least 3 (BOS, EOS and one content token)");
  if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0) fail("dimensions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (n_enc_layers < 0 || n_dec_layers < 0) fail("layer counts must be non-negative");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  if (!valid_bits(bits_embed) || !valid_bits(bits_weight) || !valid_bits(bits_act)) {
    fail("bit widths must be one of 1, 2, 8, 32");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

void parse_bits(std::string_view triple, ModelConfig& config) {
  std::vector<int> parts;
  std::string item;
  std::istringstream in{std::string(triple)};
  while (std::getline(in, item, '-')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("bits must look like E-W-A, got '" + std::string(triple) + "'");
    }
  }
  if (parts.size() != 3) {
    throw std::invalid_argument("bits must look like E-W-A, got '" + std::string(triple) + "'");
  }
  for (int b : parts) {
    if (!valid_bits(b)) throw std::invalid_argument("bit widths must be one of 1, 2, 8, 32");
  }
  config.bits_embed = parts[0];
  config.bits_weight = parts[1];
  config.bits_act = parts[2];
}

std::string bits_string(const ModelConfig& c) {
  return std::to_string(c.bits_embed) + "-" + std::to_string(c.bits_weight) + "-" +
         std::to_string(c.bits_act);
}

std::optional<QuantKind> weight_kind_for(int bits, Ablation ablation) {
  const bool isometric = ablation == Ablation::Both || ablation == Ablation::WeightOnly;
  switch (bits) {
    case 32: return std::nullopt;
    case 8: return QuantKind::Int8Weight;
    case 2: return isometric ? QuantKind::TernaryWeight : QuantKind::BaselineTWN;
    case 1: return isometric ? QuantKind::BinaryWeight : QuantKind::BaselineBWN;
    default: break;
  }
  throw std::invalid_argument("unsupported weight bit width " + std::to_string(bits));
}

std::optional<QuantKind> act_kind_for(int bits, Ablation ablation, bool non_negative) {
  const bool elastic = ablation == Ablation::Both || ablation == Ablation::ActOnly;
  switch (bits) {
    case 32: return std::nullopt;
    case 8: return non_negative ? QuantKind::Int8ActNonNeg : QuantKind::Int8ActSigned;
    case 2:
      if (!elastic) return QuantKind::BaselineTWN;
      return non_negative ? QuantKind::TernaryActNonNeg : QuantKind::TernaryActSigned;
    case 1:
      if (!elastic) return QuantKind::BaselineBWN;
      return non_negative ? QuantKind::BinaryActNonNeg : QuantKind::BinaryActSigned;
    default: break;
  }
  throw std::invalid_argument("unsupported activation bit width " + std::to_string(bits));
}

// ---------------------------------------------------------------------------

WeightQuantizer::WeightQuantizer(Parameter& weight, std::optional<QuantKind> kind)
    : weight_(&weight), kind_(kind) {
  if (kind_ && is_learned_activation(*kind_)) {
    throw std::invalid_argument("weight quantizer given an activation scheme");
  }
}

void WeightQuantizer::refresh() {
  if (!kind_ || frozen_) return;
  if (version_ == weight_->version) return;
  q_ = quantize_weight(weight_->value, *kind_);
  for (Index r = 0; r < q_.alpha.size(); ++r) {
    q_.alpha[r] = static_cast<double>(static_cast<float>(q_.alpha[r]));
  }
  levels_ = q_.levels.cast<double>();
  dequant_ = q_.dequantize();
  mask_ = weight_ste_mask(weight_->value, q_);
  scales_.assign(q_.alpha.data(), q_.alpha.data() + q_.alpha.size());
  if (*kind_ == QuantKind::Int8Weight) {
    packed_.reset();
  } else {
    packed_ = pack(q_);
  }
  version_ = weight_->version;
}

Var WeightQuantizer::leaf(Tape& tape) {
  if (!kind_) return tape.parameter(*weight_);
  refresh();
  if (frozen_) return tape.constant(dequant_);
  return tape.leaf(dequant_, [this](const Matrix& g) {
    Parameter& p = *weight_;
    if (p.grad.rows() != g.rows() || p.grad.cols() != g.cols()) p.zero_grad();
    p.grad.array() += g.array() * mask_;
  });
}

void WeightQuantizer::freeze(const PackedMatrix& packed, QuantKind kind) {
  if (packed.rows != weight_->value.rows() || packed.cols != weight_->value.cols()) {
    throw std::invalid_argument("packed matrix shape does not match " + weight_->name);
  }
  kind_ = kind;
  q_.scheme = QuantScheme::of(kind);
  q_.levels = unpack_levels(packed);
  q_.alpha = Eigen::Map<const ColVector<double>>(packed.row_scales.data(), packed.rows);
  q_.mu = ColVector<double>::Zero(packed.rows);
  levels_ = q_.levels.cast<double>();
  dequant_ = q_.dequantize();
  mask_ = RowArray<double>::Ones(packed.rows, packed.cols);
  scales_ = packed.row_scales;
  packed_ = packed;
  weight_->value = dequant_;
  weight_->touch();
  version_ = weight_->version;
  frozen_ = true;
}

// ---------------------------------------------------------------------------

ActQuantizer::ActQuantizer(std::string name, std::optional<QuantKind> kind)
    : name_(std::move(name)), kind_(kind), alpha_(name_ + ".alpha", Matrix::Ones(1, 1), true) {
  if (kind_ && (*kind_ == QuantKind::TernaryWeight || *kind_ == QuantKind::BinaryWeight ||
                *kind_ == QuantKind::Int8Weight)) {
    throw std::invalid_argument("activation quantizer given a weight scheme");
  }
}

void ActQuantizer::set_state(double alpha, double threshold, bool initialized) {
  alpha_.value(0, 0) = std::max(alpha, kAlphaEpsilon);
  alpha_.touch();
  threshold_ = threshold;
  initialized_ = initialized;
}

ActQuantState<double> ActQuantizer::state() const {
  if (!learned()) throw std::logic_error(name_ + ": no learned scale");
  return {alpha_.value(0, 0), initialized_, QuantScheme::of(*kind_)};
}

void ActQuantizer::calibrate(const Matrix& sample) {
  if (!kind_ || initialized_) return;
  if (learned()) {
    alpha_.value(0, 0) = calibrate_alpha(sample, *kind_);
  } else {
    const auto flat = Eigen::Map<const Matrix>(sample.data(), 1, sample.size());
    if (*kind_ == QuantKind::BaselineTWN) {
      threshold_ = 0.7 * flat.cwiseAbs().mean();
      alpha_.value(0, 0) = twn_ternarize(flat).alpha[0];
    } else {
      alpha_.value(0, 0) = bwn_binarize(flat).alpha[0];
    }
  }
  alpha_.touch();
  initialized_ = true;
}

QuantizedTensor<double> ActQuantizer::quantize(const Matrix& x) {
  if (!kind_) throw std::logic_error(name_ + ": identity site has no quantizer");
  calibrate(x);
  if (learned()) return quantize_activation(x, state());
  QuantizedTensor<double> q;
  q.scheme = {*kind_, Granularity::PerTensor};
  q.alpha = ColVector<double>::Constant(1, alpha_.value(0, 0));
  q.mu = ColVector<double>::Zero(x.rows());
  q.levels.resize(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    std::int16_t level = v >= 0.0 ? 1 : -1;
    if (*kind_ == QuantKind::BaselineTWN && std::abs(v) <= threshold_) level = 0;
    q.levels.data()[i] = level;
  }
  return q;
}

Matrix ActQuantizer::grad_input(const Matrix& x, const Matrix& upstream) const {
  if (!learned()) return upstream;
  return act_grad_input(x, state(), upstream);
}

double ActQuantizer::grad_alpha(const Matrix& x, const Matrix& upstream) const {
  if (!learned()) return 0.0;
  return act_grad_alpha(x, state(), upstream);
}

Var ActQuantizer::alpha_leaf(Tape& tape) {
  if (!learned()) return {};
  return tape.parameter(alpha_);
}

Var ActQuantizer::apply(Tape& tape, const Var& x) {
  if (!kind_) return x;
  Matrix out = quantize(x.value()).dequantize();
  std::vector<Var> inputs{x};
  if (learned()) inputs.push_back(alpha_leaf(tape));
  return tape.record(std::move(inputs), std::move(out), [this, x](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += grad_input(x.value(), g);
    if (s.size() > 1 && s[1]) (*s[1])(0, 0) += grad_alpha(x.value(), g);
  });
}

// ---------------------------------------------------------------------------

Var quant_linear(Tape& tape, const Var& x, ActQuantizer& act, WeightQuantizer& weight,
                 const Var& weight_leaf, const Var* bias, bool packed) {
  const Matrix& xv = x.value();
  const Index rows = xv.rows();
  const Index out_dim = weight_leaf.rows();
  if (weight_leaf.cols() != xv.cols()) throw std::invalid_argument("quant_linear: depth mismatch");
  if (bias && (bias->rows() != 1 || bias->cols() != out_dim)) {
    throw std::invalid_argument("quant_linear: bias must be 1 x out");
  }

  // Integer levels (or raw values) and their per-row scales.
  QuantizedTensor<double> qx;
  Matrix x_levels;
  std::vector<double> x_scales(static_cast<std::size_t>(rows), 1.0);
  if (act.quantized()) {
    qx = act.quantize(xv);
    x_levels = qx.levels.cast<double>();
    for (Index r = 0; r < rows; ++r) x_scales[static_cast<std::size_t>(r)] = qx.scale(r);
  } else {
    x_levels = xv;
  }
  std::vector<double> w_scales(static_cast<std::size_t>(out_dim), 1.0);
  if (weight.quantized()) w_scales.assign(weight.scales().begin(), weight.scales().end());
  const Matrix& w_levels = weight.quantized() ? weight.levels() : weight_leaf.value();

  Matrix y(rows, out_dim);
  const bool use_kernels = packed && act.quantized() && weight.packed() != nullptr &&
                           *act.kind() != QuantKind::Int8ActSigned &&
                           *act.kind() != QuantKind::Int8ActNonNeg;
  if (use_kernels) {
    const AccMatrix raw = packed_gemm_raw(*weight.packed(), pack(qx));
    for (Index r = 0; r < rows; ++r) {
      for (Index o = 0; o < out_dim; ++o) {
        y(r, o) = static_cast<double>(raw(o, r)) *
                  (w_scales[static_cast<std::size_t>(o)] * x_scales[static_cast<std::size_t>(r)]);
      }
    }
  } else {
    const Matrix raw = x_levels * w_levels.transpose();
    for (Index r = 0; r < rows; ++r) {
      for (Index o = 0; o < out_dim; ++o) {
        y(r, o) = raw(r, o) *
                  (w_scales[static_cast<std::size_t>(o)] * x_scales[static_cast<std::size_t>(r)]);
      }
    }
  }
  if (bias) y.rowwise() += bias->value().row(0);

  std::vector<Var> inputs{x};
  int alpha_slot = -1;
  if (act.learned()) {
    alpha_slot = static_cast<int>(inputs.size());
    inputs.push_back(act.alpha_leaf(tape));
  }
  const int weight_slot = static_cast<int>(inputs.size());
  inputs.push_back(weight_leaf);
  int bias_slot = -1;
  if (bias) {
    bias_slot = static_cast<int>(inputs.size());
    inputs.push_back(*bias);
  }

  Matrix x_dq = std::move(x_levels);
  if (act.quantized()) {
    for (Index r = 0; r < rows; ++r) x_dq.row(r) *= x_scales[static_cast<std::size_t>(r)];
  }
  return tape.record(
      std::move(inputs), std::move(y),
      [x, weight_leaf, x_dq = std::move(x_dq), act = &act, alpha_slot, weight_slot, bias_slot](
          const Matrix& g, GradSlots s) {
        if (s[weight_slot]) s[weight_slot]->noalias() += g.transpose() * x_dq;
        if (bias_slot >= 0 && s[bias_slot]) *s[bias_slot] += g.colwise().sum();
        const bool need_alpha = alpha_slot >= 0 && s[alpha_slot];
        if (!s[0] && !need_alpha) return;
        const Matrix g_xdq = g * weight_leaf.value();
        if (s[0]) *s[0] += act->grad_input(x.value(), g_xdq);
        if (need_alpha) (*s[alpha_slot])(0, 0) += act->grad_alpha(x.value(), g_xdq);
      });
}

namespace {

Matrix uniform_init(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal_init(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

QuantLinear::QuantLinear(const std::string& name, int in, int out,
                         std::optional<QuantKind> weight_kind, std::optional<QuantKind> act_kind,
                         std::mt19937_64& rng, bool with_bias)
    : weight(name + ".weight", uniform_init(out, in, 1.0 / std::sqrt(double(in)), rng)),
      bias(name + ".bias", Matrix::Zero(1, out)),
      has_bias(with_bias),
      wq(weight, weight_kind),
      input(name + ".in", act_kind) {}

Var QuantLinear::forward(Tape& tape, const Var& x, bool packed) {
  const Var w = wq.leaf(tape);
  if (!has_bias) return quant_linear(tape, x, input, wq, w, nullptr, packed);
  const Var b = tape.parameter(bias);
  return quant_linear(tape, x, input, wq, w, &b, packed);
}

// ---------------------------------------------------------------------------

namespace {

struct AttnBlock {
  Index q_off, q_len, k_off, k_len, col;
  Matrix probs;      // softmax output, zeros where masked
  Matrix quantized;  // what multiplies V
};

Index visible_keys(const AttnBlock& b, Index i, bool causal) {
  return causal ? std::min(b.k_len, i + 1 + (b.k_len - b.q_len)) : b.k_len;
}

}  // namespace

Var attention_core(Tape& tape, const Var& q, const Var& k, const Var& v, ActQuantizer& probs,
                   const AttentionLayout& layout, int n_heads) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Index d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) {
    throw std::invalid_argument("attention: q, k, v shapes disagree");
  }
  if (n_heads <= 0 || d % n_heads != 0) throw std::invalid_argument("attention: bad head count");
  if (layout.queries.size() != layout.keys.size()) {
    throw std::invalid_argument("attention: query and key layouts differ in sequence count");
  }
  const Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool causal = layout.causal;

  auto blocks = std::make_shared<std::vector<AttnBlock>>();
  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const SeqSpan qs = layout.queries[s];
    const SeqSpan ks = layout.keys[s];
    if (qs.offset + qs.length > qv.rows() || ks.offset + ks.length > kv.rows()) {
      throw std::out_of_range("attention: span outside tensor");
    }
    if (ks.length == 0 && qs.length > 0) throw std::invalid_argument("attention: no keys");
    if (causal && qs.length > ks.length) {
      throw std::invalid_argument("attention: causal queries exceed keys");
    }
    for (int h = 0; h < n_heads; ++h) {
      AttnBlock b{qs.offset, qs.length, ks.offset, ks.length, h * dh, {}, {}};
      Matrix scores = qv.block(b.q_off, b.col, b.q_len, dh) *
                      kv.block(b.k_off, b.col, b.k_len, dh).transpose() * scale;
      b.probs = Matrix::Zero(b.q_len, b.k_len);
      for (Index i = 0; i < b.q_len; ++i) {
        const Index n = visible_keys(b, i, causal);
        auto row = scores.row(i).head(n);
        const double m = row.maxCoeff();
        auto e = (row.array() - m).exp();
        b.probs.row(i).head(n) = (e / e.sum()).matrix();
      }
      blocks->push_back(std::move(b));
    }
  }

  // First-batch calibration sees only the unmasked probabilities.
  if (probs.quantized() && !probs.initialized()) {
    std::vector<double> valid;
    for (const AttnBlock& b : *blocks) {
      for (Index i = 0; i < b.q_len; ++i) {
        const Index n = visible_keys(b, i, causal);
        for (Index j = 0; j < n; ++j) valid.push_back(b.probs(i, j));
      }
    }
    probs.calibrate(Eigen::Map<const Matrix>(valid.data(), 1, static_cast<Index>(valid.size())));
  }

  Matrix out = Matrix::Zero(qv.rows(), d);
  for (AttnBlock& b : *blocks) {
    if (!probs.quantized()) {
      b.quantized = b.probs;
    } else {
      b.quantized = probs.quantize(b.probs).dequantize();
      if (causal) {
        for (Index i = 0; i < b.q_len; ++i) {
          const Index n = visible_keys(b, i, causal);
          b.quantized.row(i).tail(b.k_len - n).setZero();
        }
      }
    }
    out.block(b.q_off, b.col, b.q_len, dh).noalias() +=
        b.quantized * vv.block(b.k_off, b.col, b.k_len, dh);
  }

  std::vector<Var> inputs{q, k, v};
  if (probs.learned()) inputs.push_back(probs.alpha_leaf(tape));
  return tape.record(
      std::move(inputs), std::move(out),
      [q, k, v, blocks, probs = &probs, dh, scale](const Matrix& g, GradSlots s) {
        const Matrix& qv = q.value();
        const Matrix& kv = k.value();
        const Matrix& vv = v.value();
        const bool need_alpha = s.size() > 3 && s[3];
        for (const AttnBlock& b : *blocks) {
          const auto g_out = g.block(b.q_off, b.col, b.q_len, dh);
          if (s[2]) {
            s[2]->block(b.k_off, b.col, b.k_len, dh).noalias() += b.quantized.transpose() * g_out;
          }
          if (!s[0] && !s[1] && !need_alpha) continue;
          const Matrix g_quant = g_out * vv.block(b.k_off, b.col, b.k_len, dh).transpose();
          if (need_alpha) (*s[3])(0, 0) += probs->grad_alpha(b.probs, g_quant);
          if (!s[0] && !s[1]) continue;
          const Matrix g_probs = probs->grad_input(b.probs, g_quant);
          const Vector dot = g_probs.cwiseProduct(b.probs).rowwise().sum();
          const Matrix g_scores =
              (b.probs.array() * (g_probs.colwise() - dot).array()).matrix() * scale;
          if (s[0]) {
            s[0]->block(b.q_off, b.col, b.q_len, dh).noalias() +=
                g_scores * kv.block(b.k_off, b.col, b.k_len, dh);
          }
          if (s[1]) {
            s[1]->block(b.k_off, b.col, b.k_len, dh).noalias() +=
                g_scores.transpose() * qv.block(b.q_off, b.col, b.q_len, dh);
          }
        }
      });
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, const ModelConfig& c,
                                       std::mt19937_64& rng)
    : n_heads(c.n_heads),
      q_proj(name + ".q_proj", c.d_model, c.d_model, weight_kind_for(c.bits_weight, c.ablation),
             act_kind_for(c.bits_act, c.ablation, false), rng),
      k_proj(name + ".k_proj", c.d_model, c.d_model, weight_kind_for(c.bits_weight, c.ablation),
             act_kind_for(c.bits_act, c.ablation, false), rng),
      v_proj(name + ".v_proj", c.d_model, c.d_model, weight_kind_for(c.bits_weight, c.ablation),
             act_kind_for(c.bits_act, c.ablation, false), rng),
      o_proj(name + ".o_proj", c.d_model, c.d_model, weight_kind_for(c.bits_weight, c.ablation),
             act_kind_for(c.bits_act, c.ablation, false), rng),
      q_act(name + ".q", act_kind_for(c.bits_act, c.ablation, false)),
      k_act(name + ".k", act_kind_for(c.bits_act, c.ablation, false)),
      v_act(name + ".v", act_kind_for(c.bits_act, c.ablation, false)),
      prob_act(name + ".probs", act_kind_for(c.bits_act, c.ablation, true)) {}

Var MultiHeadAttention::forward(Tape& tape, const Var& q_in, const Var& kv_in,
                                const AttentionLayout& layout, bool packed) {
  const Var q = q_act.apply(tape, q_proj.forward(tape, q_in, packed));
  const Var k = k_act.apply(tape, k_proj.forward(tape, kv_in, packed));
  const Var v = v_act.apply(tape, v_proj.forward(tape, kv_in, packed));
  const Var o = attention_core(tape, q, k, v, prob_act, layout, n_heads);
  return o_proj.forward(tape, o, packed);
}

FeedForward::FeedForward(const std::string& name, const ModelConfig& c, std::mt19937_64& rng)
    : up(name + ".up", c.d_model, c.d_ffn, weight_kind_for(c.bits_weight, c.ablation),
         act_kind_for(c.bits_act, c.ablation, false), rng),
      down(name + ".down", c.d_ffn, c.d_model, weight_kind_for(c.bits_weight, c.ablation),
           act_kind_for(c.bits_act, c.ablation, true), rng) {}

Var FeedForward::forward(Tape& tape, const Var& x, bool packed) {
  return down.forward(tape, relu(up.forward(tape, x, packed)), packed);
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Matrix::Ones(1, dim)), beta(name + ".beta", Matrix::Zero(1, dim)) {}

Var LayerNorm::forward(Tape& tape, const Var& x) {
  return layernorm_rows(x, tape.parameter(gamma), tape.parameter(beta));
}

EncoderLayer::EncoderLayer(const std::string& name, const ModelConfig& c, std::mt19937_64& rng)
    : ln1(name + ".ln1", c.d_model),
      ln2(name + ".ln2", c.d_model),
      self_attn(name + ".self_attn", c, rng),
      ffn(name + ".ffn", c, rng) {}

DecoderLayer::DecoderLayer(const std::string& name, const ModelConfig& c, std::mt19937_64& rng)
    : ln1(name + ".ln1", c.d_model),
      ln2(name + ".ln2", c.d_model),
      ln3(name + ".ln3", c.d_model),
      self_attn(name + ".self_attn", c, rng),
      cross_attn(name + ".cross_attn", c, rng),
      ffn(name + ".ffn", c, rng) {}

// ---------------------------------------------------------------------------

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

Seq2Seq::Seq2Seq(const ModelConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      init_rng_(seed),
      tok_embed_("embed.tok", normal_init(config.vocab_size, config.d_model,
                                          1.0 / std::sqrt(double(config.d_model)), init_rng_)),
      pos_embed_("embed.pos", normal_init(config.max_seq_len, config.d_model,
                                          1.0 / std::sqrt(double(config.d_model)), init_rng_)),
      embed_q_(tok_embed_, weight_kind_for(config.bits_embed, config.ablation)),
      head_act_("head.in", act_kind_for(config.bits_act, config.ablation, false)),
      enc_norm_("enc.norm", config.d_model),
      dec_norm_("dec.norm", config.d_model) {
  for (int i = 0; i < config_.n_enc_layers; ++i) {
    enc_.push_back(std::make_unique<EncoderLayer>("enc." + std::to_string(i), config_, init_rng_));
  }
  for (int i = 0; i < config_.n_dec_layers; ++i) {
    dec_.push_back(std::make_unique<DecoderLayer>("dec." + std::to_string(i), config_, init_rng_));
  }
  requantize();
}

Var Seq2Seq::embed(Tape& tape, const std::vector<std::vector<int>>& seqs, const Var& table,
                   std::vector<SeqSpan>& spans) {
  std::vector<int> ids;
  std::vector<int> positions;
  spans.clear();
  for (const auto& seq : seqs) {
    if (seq.empty()) throw std::invalid_argument("empty sequence");
    if (static_cast<int>(seq.size()) > config_.max_seq_len) {
      throw std::invalid_argument("sequence of length " + std::to_string(seq.size()) +
                                  " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    spans.push_back({static_cast<Index>(ids.size()), static_cast<Index>(seq.size())});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || seq[i] >= config_.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(seq[i]) + " outside vocabulary");
      }
      ids.push_back(seq[i]);
      positions.push_back(static_cast<int>(i));
    }
  }
  return add(gather_rows(table, ids), gather_rows(tape.parameter(pos_embed_), positions));
}

Var Seq2Seq::maybe_dropout(Tape& tape, const Var& x, const ForwardOptions& opt) {
  if (!opt.training || config_.dropout <= 0.0) return x;
  if (opt.rng == nullptr) throw std::invalid_argument("dropout needs a random generator");
  const double keep = 1.0 - config_.dropout;
  std::bernoulli_distribution coin(keep);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = coin(*opt.rng) ? 1.0 / keep : 0.0;
  (void)tape;
  return dropout(x, mask);
}

Var Seq2Seq::encode(Tape& tape, const std::vector<std::vector<int>>& src,
                    const ForwardOptions& opt, std::vector<SeqSpan>& spans) {
  Var x = embed(tape, src, embed_q_.leaf(tape), spans);
  const AttentionLayout layout{spans, spans, false};
  for (auto& layer : enc_) {
    const Var h = layer->ln1.forward(tape, x);
    x = add(x, maybe_dropout(tape, layer->self_attn.forward(tape, h, h, layout, opt.packed), opt));
    const Var f = layer->ffn.forward(tape, layer->ln2.forward(tape, x), opt.packed);
    x = add(x, maybe_dropout(tape, f, opt));
  }
  return enc_norm_.forward(tape, x);
}

Var Seq2Seq::decode(Tape& tape, const std::vector<std::vector<int>>& dec_in, const Var& enc,
                    const std::vector<SeqSpan>& enc_spans, const ForwardOptions& opt) {
  if (dec_in.size() != enc_spans.size()) {
    throw std::invalid_argument("decoder and encoder batch sizes differ");
  }
  std::vector<SeqSpan> spans;
  Var x = embed(tape, dec_in, embed_q_.leaf(tape), spans);
  const AttentionLayout self_layout{spans, spans, true};
  const AttentionLayout cross_layout{spans, enc_spans, false};
  for (auto& layer : dec_) {
    Var h = layer->ln1.forward(tape, x);
    x = add(x, maybe_dropout(tape, layer->self_attn.forward(tape, h, h, self_layout, opt.packed),
                             opt));
    h = layer->ln2.forward(tape, x);
    x = add(x, maybe_dropout(
                   tape, layer->cross_attn.forward(tape, h, enc, cross_layout, opt.packed), opt));
    const Var f = layer->ffn.forward(tape, layer->ln3.forward(tape, x), opt.packed);
    x = add(x, maybe_dropout(tape, f, opt));
  }
  return dec_norm_.forward(tape, x);
}

Var Seq2Seq::logits(Tape& tape, const Var& dec_states, const ForwardOptions& opt) {
  return quant_linear(tape, dec_states, head_act_, embed_q_, embed_q_.leaf(tape), nullptr,
                      opt.packed);
}

ForwardResult Seq2Seq::forward(Tape& tape, const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt,
                               const ForwardOptions& opt) {
  if (src.size() != tgt.size()) throw std::invalid_argument("source and target counts differ");
  if (src.empty()) throw std::invalid_argument("empty batch");
  std::vector<std::vector<int>> enc_in;
  std::vector<std::vector<int>> dec_in;
  ForwardResult r;
  for (std::size_t i = 0; i < src.size(); ++i) {
    enc_in.push_back(src[i]);
    enc_in.back().push_back(kEos);
    dec_in.push_back({kBos});
    dec_in.back().insert(dec_in.back().end(), tgt[i].begin(), tgt[i].end());
    r.targets.insert(r.targets.end(), tgt[i].begin(), tgt[i].end());
    r.targets.push_back(kEos);
  }
  std::vector<SeqSpan> enc_spans;
  r.enc_out = encode(tape, enc_in, opt, enc_spans);
  r.dec_out = decode(tape, dec_in, r.enc_out, enc_spans, opt);
  r.logits = logits(tape, r.dec_out, opt);
  return r;
}

namespace {

void add_linear(std::vector<Parameter*>& out, QuantLinear& l) {
  out.push_back(&l.weight);
  if (l.has_bias) out.push_back(&l.bias);
}

void add_attention(std::vector<Parameter*>& out, MultiHeadAttention& a) {
  add_linear(out, a.q_proj);
  add_linear(out, a.k_proj);
  add_linear(out, a.v_proj);
  add_linear(out, a.o_proj);
}

void add_norm(std::vector<Parameter*>& out, LayerNorm& n) {
  out.push_back(&n.gamma);
  out.push_back(&n.beta);
}

void add_acts(std::vector<ActQuantizer*>& out, MultiHeadAttention& a) {
  for (QuantLinear* l : {&a.q_proj, &a.k_proj, &a.v_proj, &a.o_proj}) out.push_back(&l->input);
  out.push_back(&a.q_act);
  out.push_back(&a.k_act);
  out.push_back(&a.v_act);
  out.push_back(&a.prob_act);
}

void add_weights(std::vector<WeightQuantizer*>& out, MultiHeadAttention& a) {
  for (QuantLinear* l : {&a.q_proj, &a.k_proj, &a.v_proj, &a.o_proj}) out.push_back(&l->wq);
}

}  // namespace

std::vector<Parameter*> Seq2Seq::tensors() {
  std::vector<Parameter*> out{&tok_embed_, &pos_embed_};
  for (auto& l : enc_) {
    add_norm(out, l->ln1);
    add_attention(out, l->self_attn);
    add_norm(out, l->ln2);
    add_linear(out, l->ffn.up);
    add_linear(out, l->ffn.down);
  }
  for (auto& l : dec_) {
    add_norm(out, l->ln1);
    add_attention(out, l->self_attn);
    add_norm(out, l->ln2);
    add_attention(out, l->cross_attn);
    add_norm(out, l->ln3);
    add_linear(out, l->ffn.up);
    add_linear(out, l->ffn.down);
  }
  add_norm(out, enc_norm_);
  add_norm(out, dec_norm_);
  return out;
}

std::vector<ActQuantizer*> Seq2Seq::act_quantizers() {
  std::vector<ActQuantizer*> out;
  for (auto& l : enc_) {
    add_acts(out, l->self_attn);
    out.push_back(&l->ffn.up.input);
    out.push_back(&l->ffn.down.input);
  }
  for (auto& l : dec_) {
    add_acts(out, l->self_attn);
    add_acts(out, l->cross_attn);
    out.push_back(&l->ffn.up.input);
    out.push_back(&l->ffn.down.input);
  }
  out.push_back(&head_act_);
  return out;
}

std::vector<Parameter*> Seq2Seq::parameters() {
  std::vector<Parameter*> out = tensors();
  for (ActQuantizer* a : act_quantizers()) {
    if (a->learned()) out.push_back(&a->alpha());
  }
  return out;
}

std::vector<WeightQuantizer*> Seq2Seq::weight_quantizers() {
  std::vector<WeightQuantizer*> out{&embed_q_};
  for (auto& l : enc_) {
    add_weights(out, l->self_attn);
    out.push_back(&l->ffn.up.wq);
    out.push_back(&l->ffn.down.wq);
  }
  for (auto& l : dec_) {
    add_weights(out, l->self_attn);
    add_weights(out, l->cross_attn);
    out.push_back(&l->ffn.up.wq);
    out.push_back(&l->ffn.down.wq);
  }
  return out;
}

std::vector<WeightQuantizer*> Seq2Seq::quantized_matrices() {
  std::vector<WeightQuantizer*> out;
  for (WeightQuantizer* w : weight_quantizers()) {
    if (w->quantized()) out.push_back(w);
  }
  return out;
}

Parameter* Seq2Seq::find_tensor(const std::string& name) {
  for (Parameter* p : tensors()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

ActQuantizer* Seq2Seq::find_act(const std::string& name) {
  for (ActQuantizer* a : act_quantizers()) {
    if (a->name() == name) return a;
  }
  return nullptr;
}

void Seq2Seq::requantize() {
  for (WeightQuantizer* w : weight_quantizers()) w->refresh();
}

// ---------------------------------------------------------------------------

TeacherOutputs teacher_outputs(Seq2Seq& teacher, const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt) {
  Tape tape(false);
  const ForwardResult r = teacher.forward(tape, src, tgt);
  return {r.logits.value(), r.enc_out.value(), r.dec_out.value()};
}

Var distill_loss(Tape& tape, const ForwardResult& student, const TeacherOutputs& teacher,
                 std::span<const int> labels, const DistillOptions& opt, DistillTerms* terms) {
  if (!(opt.temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  Var total = cross_entropy(student.logits, labels);
  DistillTerms t;
  t.ce = total.value()(0, 0);

  if (opt.lambda_kd != 0.0) {
    const Matrix& tl = teacher.logits;
    if (tl.rows() != student.logits.rows() || tl.cols() != student.logits.cols()) {
      throw std::invalid_argument("teacher and student logits differ in shape");
    }
    const double temp = opt.temperature;
    Matrix p_t(tl.rows(), tl.cols());
    double neg_entropy = 0.0;
    for (Index r = 0; r < tl.rows(); ++r) {
      const Eigen::RowVectorXd z = tl.row(r) / temp;
      const double lse = z.maxCoeff() + std::log((z.array() - z.maxCoeff()).exp().sum());
      const Eigen::RowVectorXd logp = z.array() - lse;
      p_t.row(r) = logp.array().exp().matrix();
      neg_entropy += p_t.row(r).dot(logp);
    }
    const double rows = static_cast<double>(std::max<Index>(tl.rows(), 1));
    const Var log_s = log_softmax_rows(scale(student.logits, 1.0 / temp));
    const Var cross = sum(mul(tape.constant(std::move(p_t)), log_s));
    // KL = (sum p_t log p_t - sum p_t log p_s) / rows
    Matrix offset(1, 1);
    offset(0, 0) = neg_entropy / rows;
    const Var kl = add(tape.constant(std::move(offset)), scale(cross, -1.0 / rows));
    t.kd = kl.value()(0, 0);
    total = add(total, scale(kl, opt.lambda_kd * temp * temp));
  }

  if (opt.lambda_h != 0.0) {
    const Var h = add(mse(student.enc_out, tape.constant(teacher.enc_out)),
                      mse(student.dec_out, tape.constant(teacher.dec_out)));
    t.hidden = h.value()(0, 0) / 2.0;
    total = add(total, scale(h, opt.lambda_h / 2.0));
  }
  if (terms) *terms = t;
  return total;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<int>> greedy_decode_batch(Seq2Seq& model,
                                                  const std::vector<std::vector<int>>& srcs,
                                                  int max_len, int eos_id, bool packed) {
  constexpr std::size_t kChunk = 64;
  const int cap = std::min(max_len, model.config().max_seq_len - 1);
  std::vector<std::vector<int>> results(srcs.size());
  ForwardOptions opt;
  opt.packed = packed;

  for (std::size_t begin = 0; begin < srcs.size(); begin += kChunk) {
    const std::size_t end = std::min(srcs.size(), begin + kChunk);
    std::vector<std::vector<int>> enc_in;
    for (std::size_t i = begin; i < end; ++i) {
      enc_in.push_back(srcs[i]);
      enc_in.back().push_back(kEos);
    }
    Matrix enc;
    std::vector<SeqSpan> enc_spans;
    {
      Tape tape(false);
      enc = model.encode(tape, enc_in, opt, enc_spans).value();
    }

    const std::size_t n = end - begin;
    std::vector<bool> done(n, cap <= 0);
    for (int step = 0; step < cap; ++step) {
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < n; ++i) {
        if (!done[i]) active.push_back(i);
      }
      if (active.empty()) break;

      std::vector<std::vector<int>> dec_in;
      std::vector<SeqSpan> spans;
      Index rows = 0;
      for (std::size_t i : active) rows += enc_spans[i].length;
      Matrix enc_sub(rows, enc.cols());
      Index at = 0;
      for (std::size_t i : active) {
        const SeqSpan s = enc_spans[i];
        enc_sub.middleRows(at, s.length) = enc.middleRows(s.offset, s.length);
        spans.push_back({at, s.length});
        at += s.length;
        dec_in.push_back({kBos});
        const auto& so_far = results[begin + i];
        dec_in.back().insert(dec_in.back().end(), so_far.begin(), so_far.end());
      }

      Tape tape(false);
      const Var states = model.decode(tape, dec_in, tape.constant(std::move(enc_sub)), spans, opt);
      std::vector<int> last;
      int offset = 0;
      for (const auto& d : dec_in) {
        offset += static_cast<int>(d.size());
        last.push_back(offset - 1);
      }
      const Matrix logits = model.logits(tape, gather_rows(states, last), opt).value();
      for (std::size_t a = 0; a < active.size(); ++a) {
        Index best = 0;
        logits.row(static_cast<Index>(a)).maxCoeff(&best);
        const std::size_t i = active[a];
        if (static_cast<int>(best) == eos_id) {
          done[i] = true;
          continue;
        }
        results[begin + i].push_back(static_cast<int>(best));
        if (static_cast<int>(results[begin + i].size()) >= cap) done[i] = true;
      }
    }
  }
  return results;
}

std::vector<int> greedy_decode(Seq2Seq& model, const std::vector<int>& src, int max_len,
                               int eos_id, bool packed) {
  return greedy_decode_batch(model, {src}, max_len, eos_id, packed).front();
}

std::unique_ptr<Seq2Seq> init_student_from_teacher(Seq2Seq& teacher, const ModelConfig& config,
                                                   std::uint64_t seed) {
  const ModelConfig& tc = teacher.config();
  if (tc.vocab_size != config.vocab_size || tc.d_model != config.d_model ||
      tc.n_heads != config.n_heads || tc.n_enc_layers != config.n_enc_layers ||
      tc.n_dec_layers != config.n_dec_layers || tc.d_ffn != config.d_ffn ||
      tc.max_seq_len != config.max_seq_len) {
    throw std::invalid_argument("student architecture must match the teacher");
  }
  auto student = std::make_unique<Seq2Seq>(config, seed);
  for (Parameter* p : student->tensors()) {
    const Parameter* src = teacher.find_tensor(p->name);
    if (src == nullptr) throw std::logic_error("teacher has no tensor " + p->name);
    p->value = src->value;
    p->touch();
  }
  student->requantize();
  return student;
}

}  // namespace lowbit
