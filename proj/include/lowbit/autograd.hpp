#pragma once

// Define-by-run reverse-mode differentiation over row-major double matrices.
//
// A Tape owns every intermediate value of one forward pass. Parameters live
// outside the tape; a parameter leaf accumulates into Parameter::grad when
// the tape is differentiated. Tapes are not shared between threads.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lowbit/types.hpp"

namespace lowbit {

struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Matrix value, bool positive = false);

  std::string name;
  Matrix value;
  Matrix grad;
  // Learned scales are kept >= kAlphaEpsilon by the optimizer.
  bool positive = false;
  // Bumped whenever `value` changes; quantized caches compare against it.
  std::uint64_t version = 0;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  void touch() { ++version; }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// One slot per input; nullptr when that input does not need a gradient.
// Slots are pre-sized and zeroed, backward rules accumulate with +=.
using GradSlots = std::span<Matrix* const>;
using BackwardFn = std::function<void(const Matrix& grad_out, GradSlots input_grads)>;

class Tape {
 public:
  Tape() = default;
  // With gradients disabled no backward closures are kept (inference).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Parameter& p);
  // Leaf whose gradient is routed through `backward` with a single slot that
  // is always nullptr-free; used for straight-through weight leaves.
  Var leaf(Matrix value, std::function<void(const Matrix& grad)> sink);
  Var record(std::vector<Var> inputs, Matrix value, BackwardFn backward);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(const Var& root);
  void backward(const Var& root, const Matrix& seed);

  const Matrix& value(const Var& v) const { return nodes_[check(v)].value; }
  bool requires_grad(const Var& v) const { return nodes_[check(v)].requires_grad; }
  // Gradient accumulated into an intermediate during the last backward.
  Matrix grad(const Var& v) const;
  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<int> inputs;
    BackwardFn backward;
    std::function<void(const Matrix&)> sink;
    Parameter* param = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
  };

  int check(const Var& v) const;
  Var push(Node node);

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Differentiable operations. None of them mutate their inputs.

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Adds a 1 x cols row vector to every row.
Var add_row(const Var& a, const Var& row);
Var transpose(const Var& a);
// Row-major reinterpretation.
Var reshape(const Var& a, Index rows, Index cols);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var gather_rows(const Var& table, std::span<const int> ids);

Var relu(const Var& x);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var embedding(std::span<const int> ids, const Var& table);
// Mean token cross-entropy; targets[i] indexes the column of row i.
Var cross_entropy(const Var& logits, std::span<const int> targets);
Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);
// Inverted dropout with a caller-supplied keep mask (entries 0 or 1/(1-p)).
Var dropout(const Var& x, const Matrix& mask);

// ---------------------------------------------------------------------------
// Custom-gradient node factory: forward computes the output from the input
// values, backward receives the saved inputs, the output and the upstream
// gradient and fills the input slots.

using CustomForward = std::function<Matrix(std::span<const Matrix* const> inputs)>;
using CustomBackward = std::function<void(std::span<const Matrix* const> inputs,
                                          const Matrix& output, const Matrix& grad_out,
                                          GradSlots input_grads)>;

class CustomOp {
 public:
  CustomOp(CustomForward forward, CustomBackward backward)
      : forward_(std::move(forward)), backward_(std::move(backward)) {}

  Var operator()(const std::vector<Var>& inputs) const;

 private:
  CustomForward forward_;
  CustomBackward backward_;
};

CustomOp custom_grad(CustomForward forward, CustomBackward backward);

// ---------------------------------------------------------------------------
// Optimizer.

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options = {});

  void zero_grad();
  // Applies one update from the gradients currently stored in the parameters.
  void step();

  AdamOptions& options() { return options_; }
  long steps() const { return steps_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamOptions options_;
  long steps_ = 0;
};

// Rescales all gradients so that their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

}  // namespace lowbit
