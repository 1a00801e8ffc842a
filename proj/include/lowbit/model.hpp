#pragma once

// Small pre-LN transformer encoder-decoder with fake-quantized matrices.
//
// Every parameter matrix (projections, FFN, the tied token embedding) keeps a
// real-valued master copy and is re-quantized per row whenever it changes.
// Activations entering a matrix product are quantized with a learned
// per-tensor scale: the signed scheme everywhere except post-ReLU and
// post-softmax tensors, which use the non-negative scheme. Layer norms,
// biases, positional embeddings and residual sums stay full precision.

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lowbit/autograd.hpp"
#include "lowbit/kernels.hpp"
#include "lowbit/quant.hpp"

namespace lowbit {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;

enum class Ablation : std::uint8_t { Both, WeightOnly, ActOnly, Baseline };

std::string_view to_string(Ablation a);
Ablation parse_ablation(std::string_view s);

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_ffn = 128;
  int max_seq_len = 33;
  int bits_embed = 32;
  int bits_weight = 32;
  int bits_act = 32;
  double dropout = 0.0;
  // Which half of the quantization recipe is active; only matters for 1/2 bits.
  Ablation ablation = Ablation::Both;

  void validate() const;
  bool full_precision() const { return bits_embed == 32 && bits_weight == 32 && bits_act == 32; }
};

// Parses "E-W-A", e.g. "2-2-8".
void parse_bits(std::string_view triple, ModelConfig& config);
std::string bits_string(const ModelConfig& config);

// Quantizer kinds implied by a bit width and the ablation setting.
std::optional<QuantKind> weight_kind_for(int bits, Ablation ablation);
std::optional<QuantKind> act_kind_for(int bits, Ablation ablation, bool non_negative);

// ---------------------------------------------------------------------------

/// Per-row fake quantization of one parameter matrix.
class WeightQuantizer {
 public:
  WeightQuantizer(Parameter& weight, std::optional<QuantKind> kind);

  bool quantized() const { return kind_.has_value(); }
  std::optional<QuantKind> kind() const { return kind_; }
  Parameter& parameter() const { return *weight_; }

  // Re-quantizes if the master weights changed since the last call.
  void refresh();
  // Tape leaf holding the dequantized weights; its gradient is masked by the
  // straight-through rule and accumulated into the master weights.
  Var leaf(Tape& tape);

  // Valid after refresh(). Scales are rounded to binary32 so that a packed
  // export reproduces the training-time forward exactly.
  const QuantizedTensor<double>& quantized_tensor() const { return q_; }
  const Matrix& levels() const { return levels_; }
  const Matrix& dequantized() const { return dequant_; }
  std::span<const double> scales() const { return scales_; }
  const PackedMatrix* packed() const { return packed_ ? &*packed_ : nullptr; }

  // Replaces the master copy with fixed levels (packed-model loading).
  void freeze(const PackedMatrix& packed, QuantKind kind);
  bool frozen() const { return frozen_; }

 private:
  Parameter* weight_;
  std::optional<QuantKind> kind_;
  std::uint64_t version_ = ~std::uint64_t{0};
  bool frozen_ = false;
  QuantizedTensor<double> q_;
  Matrix levels_;
  Matrix dequant_;
  RowArray<double> mask_;
  std::vector<double> scales_;
  std::optional<PackedMatrix> packed_;
};

/// Activation quantizer for one site: identity, learned (elastic or 8-bit),
/// or the baseline, whose threshold and scale are taken from the statistics
/// of the first batch it sees and then kept fixed.
class ActQuantizer {
 public:
  ActQuantizer(std::string name, std::optional<QuantKind> kind);

  const std::string& name() const { return name_; }
  std::optional<QuantKind> kind() const { return kind_; }
  bool quantized() const { return kind_.has_value(); }
  bool learned() const { return kind_ && is_learned_activation(*kind_); }
  bool initialized() const { return initialized_; }
  Parameter& alpha() { return alpha_; }
  const Parameter& alpha() const { return alpha_; }
  // Baseline ternary threshold (zero elsewhere).
  double threshold() const { return threshold_; }
  void set_state(double alpha, double threshold, bool initialized);
  void reset_calibration() { initialized_ = false; }

  ActQuantState<double> state() const;
  // Sets the scale from the statistics of `sample` if this is the first call.
  void calibrate(const Matrix& sample);
  QuantizedTensor<double> quantize(const Matrix& x);
  Matrix grad_input(const Matrix& x, const Matrix& upstream) const;
  double grad_alpha(const Matrix& x, const Matrix& upstream) const;

  // Standalone fake-quant node: output = dequantized x.
  Var apply(Tape& tape, const Var& x);
  // Alpha leaf to pass into fused nodes; invalid Var for non-learned sites.
  Var alpha_leaf(Tape& tape);

 private:
  std::string name_;
  std::optional<QuantKind> kind_;
  Parameter alpha_;
  double threshold_ = 0.0;
  bool initialized_ = false;
};

// Fused fake-quantized linear layer: y = Q(x) Q(W)^T + b, computed as an
// integer-level product scaled by alpha_w[o] * alpha_x[r]. Set `packed` to run
// the product through the popcount kernels (inference only).
Var quant_linear(Tape& tape, const Var& x, ActQuantizer& act, WeightQuantizer& weight,
                 const Var& weight_leaf, const Var* bias, bool packed = false);

struct QuantLinear {
  QuantLinear(const std::string& name, int in, int out, std::optional<QuantKind> weight_kind,
              std::optional<QuantKind> act_kind, std::mt19937_64& rng, bool with_bias = true);

  Parameter weight;  // out x in; rows are output channels
  Parameter bias;    // 1 x out
  bool has_bias;
  WeightQuantizer wq;
  ActQuantizer input;

  Var forward(Tape& tape, const Var& x, bool packed = false);
};

struct SeqSpan {
  Index offset = 0;
  Index length = 0;
};

struct AttentionLayout {
  std::vector<SeqSpan> queries;
  std::vector<SeqSpan> keys;
  bool causal = false;
};

// softmax(Q K^T / sqrt(d_head) + mask) V per sequence and head, with the
// probability matrix passed through `probs` before multiplying V.
Var attention_core(Tape& tape, const Var& q, const Var& k, const Var& v, ActQuantizer& probs,
                   const AttentionLayout& layout, int n_heads);

struct MultiHeadAttention {
  MultiHeadAttention(const std::string& name, const ModelConfig& c, std::mt19937_64& rng);

  int n_heads;
  QuantLinear q_proj, k_proj, v_proj, o_proj;
  ActQuantizer q_act, k_act, v_act, prob_act;

  Var forward(Tape& tape, const Var& q_in, const Var& kv_in, const AttentionLayout& layout,
              bool packed = false);
};

struct FeedForward {
  FeedForward(const std::string& name, const ModelConfig& c, std::mt19937_64& rng);

  QuantLinear up, down;

  Var forward(Tape& tape, const Var& x, bool packed = false);
};

struct LayerNorm {
  LayerNorm(const std::string& name, int dim);
  Parameter gamma, beta;
  Var forward(Tape& tape, const Var& x);
};

struct EncoderLayer {
  EncoderLayer(const std::string& name, const ModelConfig& c, std::mt19937_64& rng);
  LayerNorm ln1, ln2;
  MultiHeadAttention self_attn;
  FeedForward ffn;
};

struct DecoderLayer {
  DecoderLayer(const std::string& name, const ModelConfig& c, std::mt19937_64& rng);
  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
};

struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
  bool packed = false;
};

struct ForwardResult {
  Var logits;   // one row per decoder position
  Var enc_out;  // final encoder states (after the final layer norm)
  Var dec_out;  // final decoder states
  std::vector<int> targets;
};

class Seq2Seq {
 public:
  Seq2Seq(const ModelConfig& config, std::uint64_t seed);
  Seq2Seq(const Seq2Seq&) = delete;
  Seq2Seq& operator=(const Seq2Seq&) = delete;

  const ModelConfig& config() const { return config_; }

  // Teacher-forced pass: encoder reads src + EOS, decoder reads BOS + tgt
  // and predicts tgt + EOS.
  ForwardResult forward(Tape& tape, const std::vector<std::vector<int>>& src,
                        const std::vector<std::vector<int>>& tgt, const ForwardOptions& opt = {});

  Var encode(Tape& tape, const std::vector<std::vector<int>>& src, const ForwardOptions& opt,
             std::vector<SeqSpan>& spans);
  // Decoder over `dec_in` sequences attending to `enc` (rows laid out by enc_spans).
  Var decode(Tape& tape, const std::vector<std::vector<int>>& dec_in, const Var& enc,
             const std::vector<SeqSpan>& enc_spans, const ForwardOptions& opt);
  Var logits(Tape& tape, const Var& dec_states, const ForwardOptions& opt);

  // Trainable parameters including learned activation scales.
  std::vector<Parameter*> parameters();
  // Weight / bias / norm / embedding parameters only (no activation scales).
  std::vector<Parameter*> tensors();
  std::vector<ActQuantizer*> act_quantizers();
  std::vector<WeightQuantizer*> weight_quantizers();
  // Quantized parameter matrices, in a stable order.
  std::vector<WeightQuantizer*> quantized_matrices();

  Parameter* find_tensor(const std::string& name);
  ActQuantizer* find_act(const std::string& name);

  void requantize();

 private:
  Var embed(Tape& tape, const std::vector<std::vector<int>>& seqs, const Var& table,
            std::vector<SeqSpan>& spans);
  Var maybe_dropout(Tape& tape, const Var& x, const ForwardOptions& opt);

  ModelConfig config_;
  std::mt19937_64 init_rng_;
  Parameter tok_embed_;
  Parameter pos_embed_;
  WeightQuantizer embed_q_;
  ActQuantizer head_act_;
  std::vector<std::unique_ptr<EncoderLayer>> enc_;
  std::vector<std::unique_ptr<DecoderLayer>> dec_;
  LayerNorm enc_norm_;
  LayerNorm dec_norm_;
};

// ---------------------------------------------------------------------------

struct DistillOptions {
  double lambda_kd = 1.0;
  double lambda_h = 1.0;
  double temperature = 2.0;
};

struct TeacherOutputs {
  Matrix logits;
  Matrix enc_out;
  Matrix dec_out;
};

struct DistillTerms {
  double ce = 0;
  double kd = 0;
  double hidden = 0;
};

TeacherOutputs teacher_outputs(Seq2Seq& teacher, const std::vector<std::vector<int>>& src,
                               const std::vector<std::vector<int>>& tgt);

// CE(student, labels) + lambda_kd * T^2 * KL(softmax(t/T) || softmax(s/T))
//   + lambda_h * (MSE(enc) + MSE(dec)) / 2
Var distill_loss(Tape& tape, const ForwardResult& student, const TeacherOutputs& teacher,
                 std::span<const int> labels, const DistillOptions& opt,
                 DistillTerms* terms = nullptr);

// Greedy decoding from BOS until EOS or max_len tokens; the result excludes
// BOS and EOS.
std::vector<int> greedy_decode(Seq2Seq& model, const std::vector<int>& src, int max_len,
                               int eos_id = kEos, bool packed = false);
std::vector<std::vector<int>> greedy_decode_batch(Seq2Seq& model,
                                                  const std::vector<std::vector<int>>& srcs,
                                                  int max_len, int eos_id = kEos,
                                                  bool packed = false);

// Copies every real-valued tensor from the teacher; activation scales are
// left to be calibrated on the first forward pass.
std::unique_ptr<Seq2Seq> init_student_from_teacher(Seq2Seq& teacher, const ModelConfig& config,
                                                   std::uint64_t seed);

}  // namespace lowbit
