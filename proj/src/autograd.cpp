#include "lowbit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "lowbit/quant.hpp"

namespace lowbit {

Parameter::Parameter(std::string name_, Matrix value_, bool positive_)
    : name(std::move(name_)), value(std::move(value_)), positive(positive_) {
  grad = Matrix::Zero(value.rows(), value.cols());
}

const Matrix& Var::value() const { return tape_->value(*this); }

bool Var::requires_grad() const { return tape_->requires_grad(*this); }

int Tape::check(const Var& v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
  return v.id_;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::leaf(Matrix value, std::function<void(const Matrix&)> sink) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) n.sink = std::move(sink);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::record(std::vector<Var> inputs, Matrix value, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    const int id = check(in);
    n.inputs.push_back(id);
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[check(v)];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(const Var& root) {
  const Matrix& v = value(root);
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar (1x1)");
  }
  backward(root, Matrix::Ones(1, 1));
}

void Tape::backward(const Var& root, const Matrix& seed) {
  const int root_id = check(root);
  if (seed.rows() != nodes_[root_id].value.rows() || seed.cols() != nodes_[root_id].value.cols()) {
    throw std::invalid_argument("backward: seed shape mismatch");
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  nodes_[root_id].grad = seed;
  nodes_[root_id].has_grad = true;

  std::vector<Matrix*> slots;
  for (int i = root_id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) {
        n.param->zero_grad();
      }
      n.param->grad += n.grad;
    }
    if (n.sink) n.sink(n.grad);
    if (!n.backward) continue;
    slots.assign(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[n.inputs[k]];
      if (!in.requires_grad) continue;
      if (!in.has_grad) {
        in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
        in.has_grad = true;
      }
      slots[k] = &in.grad;
    }
    n.backward(n.grad, GradSlots(slots.data(), slots.size()));
  }
}

// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

Tape& tape_of(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
  return a.tape();
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return t.record({a, b}, std::move(out), [a, b](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->noalias() += g * b.value().transpose();
    if (s[1]) s[1]->noalias() += a.value().transpose() * g;
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return t.record({a, b}, std::move(out), [a, b](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->noalias() += g * b.value();
    if (s[1]) s[1]->noalias() += g.transpose() * a.value();
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return t.record({a, b}, a.value() + b.value(), [](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g;
    if (s[1]) *s[1] += g;
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return t.record({a, b}, a.value() - b.value(), [](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g;
    if (s[1]) *s[1] -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record({a, b}, std::move(out), [a, b](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g.cwiseProduct(b.value());
    if (s[1]) *s[1] += g.cwiseProduct(a.value());
  });
}

Var scale(const Var& a, double factor) {
  return a.tape().record({a}, a.value() * factor, [factor](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g * factor;
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: row must be 1 x cols");
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record({a, row}, std::move(out), [](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g;
    if (s[1]) *s[1] += g.colwise().sum();
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return a.tape().record({a}, std::move(out), [](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g.transpose();
  });
}

Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  const Index r0 = a.rows();
  const Index c0 = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape().record({a}, std::move(out), [r0, c0](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += Eigen::Map<const Matrix>(g.data(), r0, c0);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape().record(parts, std::move(out), [offsets](const Matrix& g, GradSlots s) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (s[k]) *s[k] += g.middleRows(offsets[k], s[k]->rows());
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape().record(parts, std::move(out), [offsets](const Matrix& g, GradSlots s) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (s[k]) *s[k] += g.middleCols(offsets[k], s[k]->cols());
    }
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside tensor");
  }
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record({a}, std::move(out), [start, count](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->middleRows(start, count) += g;
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside tensor");
  }
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record({a}, std::move(out), [start, count](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->middleCols(start, count) += g;
  });
}

Var gather_rows(const Var& table, std::span<const int> ids_in) {
  const Matrix& tv = table.value();
  std::vector<int> ids(ids_in.begin(), ids_in.end());
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("gather_rows: id out of range");
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  return table.tape().record({table}, std::move(out), [ids](const Matrix& g, GradSlots s) {
    if (!s[0]) return;
    for (std::size_t i = 0; i < ids.size(); ++i) s[0]->row(ids[i]) += g.row(static_cast<Index>(i));
  });
}

Var embedding(std::span<const int> ids, const Var& table) { return gather_rows(table, ids); }

Var relu(const Var& x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape().record({x}, std::move(out), [x](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += (x.value().array() > 0.0).select(g, 0.0);
  });
}

namespace {

Matrix softmax_values(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(const Var& x) {
  // The backward rule reads the output back from the tape once it exists.
  auto self = std::make_shared<Var>();
  Var out = x.tape().record({x}, softmax_values(x.value()), [self](const Matrix& g, GradSlots s) {
    if (!s[0]) return;
    const Matrix& y = self->value();
    const Vector dot = g.cwiseProduct(y).rowwise().sum();
    *s[0] += (y.array() * (g.colwise() - dot).array()).matrix();
  });
  *self = out;
  return out;
}

Var log_softmax_rows(const Var& x) {
  const Matrix& xv = x.value();
  Matrix y(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double m = xv.row(r).maxCoeff();
    const double lse = m + std::log((xv.row(r).array() - m).exp().sum());
    y.row(r) = xv.row(r).array() - lse;
  }
  Matrix probs = y.array().exp().matrix();
  return x.tape().record({x}, std::move(y), [probs](const Matrix& g, GradSlots s) {
    if (!s[0]) return;
    const Vector gsum = g.rowwise().sum();
    *s[0] += g - (probs.array().colwise() * gsum.array()).matrix();
  });
}

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& xv = x.value();
  const Index n = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw std::invalid_argument("layernorm_rows: affine parameters must be 1 x cols");
  }
  Matrix xhat(xv.rows(), n);
  Vector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  Tape& t = tape_of(x, gamma);
  return t.record({x, gamma, beta}, std::move(out),
                  [xhat, inv_std, gamma](const Matrix& g, GradSlots s) {
                    if (s[1]) *s[1] += g.cwiseProduct(xhat).colwise().sum();
                    if (s[2]) *s[2] += g.colwise().sum();
                    if (!s[0]) return;
                    const Matrix gx =
                        (g.array().rowwise() * gamma.value().row(0).array()).matrix();
                    const double n = static_cast<double>(g.cols());
                    for (Index r = 0; r < g.rows(); ++r) {
                      const double m1 = gx.row(r).sum() / n;
                      const double m2 = gx.row(r).dot(xhat.row(r)) / n;
                      s[0]->row(r) +=
                          ((gx.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[r])
                              .matrix();
                    }
                  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets_in) {
  const Matrix& lv = logits.value();
  if (static_cast<Index>(targets_in.size()) != lv.rows()) {
    throw std::invalid_argument("cross_entropy: one target per row required");
  }
  std::vector<int> targets(targets_in.begin(), targets_in.end());
  Matrix probs(lv.rows(), lv.cols());
  double loss = 0.0;
  for (Index r = 0; r < lv.rows(); ++r) {
    const int t = targets[r];
    if (t < 0 || t >= lv.cols()) throw std::out_of_range("cross_entropy: target out of range");
    const double m = lv.row(r).maxCoeff();
    const double lse = m + std::log((lv.row(r).array() - m).exp().sum());
    loss += lse - lv(r, t);
    probs.row(r) = (lv.row(r).array() - lse).exp().matrix();
  }
  const double rows = static_cast<double>(std::max<Index>(lv.rows(), 1));
  Matrix out(1, 1);
  out(0, 0) = loss / rows;
  return logits.tape().record(
      {logits}, std::move(out), [probs, targets, rows](const Matrix& g, GradSlots s) {
        if (!s[0]) return;
        Matrix d = probs;
        for (std::size_t r = 0; r < targets.size(); ++r) d(static_cast<Index>(r), targets[r]) -= 1.0;
        *s[0] += d * (g(0, 0) / rows);
      });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record({a}, std::move(out), [](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->array() += g(0, 0);
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(std::max<Index>(a.value().size(), 1));
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.tape().record({a}, std::move(out), [n](const Matrix& g, GradSlots s) {
    if (s[0]) s[0]->array() += g(0, 0) / n;
  });
}

Var mse(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mse");
  Matrix diff = a.value() - b.value();
  const double n = static_cast<double>(std::max<Index>(diff.size(), 1));
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return t.record({a, b}, std::move(out), [diff, n](const Matrix& g, GradSlots s) {
    const double k = 2.0 * g(0, 0) / n;
    if (s[0]) *s[0] += diff * k;
    if (s[1]) *s[1] -= diff * k;
  });
}

Var dropout(const Var& x, const Matrix& mask) {
  require_same_shape(x.value(), mask, "dropout");
  Matrix out = x.value().cwiseProduct(mask);
  return x.tape().record({x}, std::move(out), [mask](const Matrix& g, GradSlots s) {
    if (s[0]) *s[0] += g.cwiseProduct(mask);
  });
}

// ---------------------------------------------------------------------------

Var CustomOp::operator()(const std::vector<Var>& inputs) const {
  if (inputs.empty()) throw std::invalid_argument("custom op needs at least one input");
  std::vector<const Matrix*> values;
  values.reserve(inputs.size());
  for (const Var& in : inputs) values.push_back(&in.value());
  Matrix out = forward_(std::span<const Matrix* const>(values.data(), values.size()));
  auto self = std::make_shared<Var>();
  Var result = inputs.front().tape().record(
      inputs, std::move(out),
      [backward = backward_, saved = inputs, self](const Matrix& g, GradSlots s) {
        std::vector<const Matrix*> vals;
        vals.reserve(saved.size());
        for (const Var& v : saved) vals.push_back(&v.value());
        backward(std::span<const Matrix* const>(vals.data(), vals.size()), self->value(), g, s);
      });
  *self = result;
  return result;
}

CustomOp custom_grad(CustomForward forward, CustomBackward backward) {
  return CustomOp(std::move(forward), std::move(backward));
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Adam::step() {
  ++steps_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = b1 * m_[i] + (1.0 - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0 - b2) * p.grad.cwiseProduct(p.grad);
    Matrix update =
        ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + options_.eps)).matrix();
    if (options_.weight_decay != 0.0) update += options_.weight_decay * p.value;
    p.value -= options_.lr * update;
    if (p.positive) p.value = p.value.cwiseMax(kAlphaEpsilon);
    p.touch();
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (Parameter* p : params) p->grad *= k;
  }
  return norm;
}

}  // namespace lowbit
