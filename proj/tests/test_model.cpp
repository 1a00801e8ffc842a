#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lowbit/model.hpp"

using namespace lowbit;
using gradcheck::weighted_sum;

namespace {

ModelConfig tiny_config(const char* bits = "32-32-32", Ablation ablation = Ablation::Both) {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 12;
  c.max_seq_len = 9;
  c.ablation = ablation;
  parse_bits(bits, c);
  return c;
}

ModelConfig small_config(const char* bits = "32-32-32", Ablation ablation = Ablation::Both) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_ffn = 64;
  c.max_seq_len = 17;
  c.ablation = ablation;
  parse_bits(bits, c);
  return c;
}

using Batch = std::vector<std::vector<int>>;

Batch random_batch(std::mt19937_64& rng, int n, int vocab, int min_len, int max_len) {
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::uniform_int_distribution<int> tok(2, vocab - 1);
  Batch out(static_cast<std::size_t>(n));
  for (auto& s : out) {
    s.resize(static_cast<std::size_t>(len(rng)));
    for (int& t : s) t = tok(rng);
  }
  return out;
}

Matrix random_matrix(std::mt19937_64& rng, Index r, Index c, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

// Plain softmax attention written independently of attention_core.
Matrix reference_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                           const AttentionLayout& layout, int heads) {
  const Index d = q.cols(), dh = d / heads;
  Matrix out = Matrix::Zero(q.rows(), d);
  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const SeqSpan qs = layout.queries[s], ks = layout.keys[s];
    for (int h = 0; h < heads; ++h) {
      for (Index i = 0; i < qs.length; ++i) {
        const Index visible = layout.causal ? i + 1 + (ks.length - qs.length) : ks.length;
        std::vector<double> w;
        double mx = -1e300;
        for (Index j = 0; j < visible; ++j) {
          double dot = 0;
          for (Index c = 0; c < dh; ++c) {
            dot += q(qs.offset + i, h * dh + c) * k(ks.offset + j, h * dh + c);
          }
          w.push_back(dot / std::sqrt(static_cast<double>(dh)));
          mx = std::max(mx, w.back());
        }
        double z = 0;
        for (double& x : w) z += (x = std::exp(x - mx));
        for (Index j = 0; j < visible; ++j) {
          for (Index c = 0; c < dh; ++c) {
            out(qs.offset + i, h * dh + c) += w[j] / z * v(ks.offset + j, h * dh + c);
          }
        }
      }
    }
  }
  return out;
}

double ce_loss(Seq2Seq& m, const Batch& src, const Batch& tgt) {
  Tape t(false);
  auto r = m.forward(t, src, tgt);
  return cross_entropy(r.logits, r.targets).value()(0, 0);
}

void train_copy(Seq2Seq& m, int steps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Adam opt(m.parameters(), AdamOptions{.lr = 3e-3});
  for (int i = 0; i < steps; ++i) {
    const Batch src = random_batch(rng, 16, m.config().vocab_size, 2, 6);
    Tape t;
    auto r = m.forward(t, src, src, {.training = true});
    opt.zero_grad();
    t.backward(cross_entropy(r.logits, r.targets));
    opt.step();
  }
}

}  // namespace

TEST_CASE("configuration") {
  ModelConfig c;
  parse_bits("2-2-8", c);
  CHECK(c.bits_embed == 2);
  CHECK(c.bits_weight == 2);
  CHECK(c.bits_act == 8);
  CHECK(bits_string(c) == "2-2-8");
  CHECK_THROWS_AS(parse_bits("2-3-2", c), std::invalid_argument);
  CHECK_THROWS_AS(parse_bits("2-2", c), std::invalid_argument);
  CHECK_THROWS_AS(parse_bits("2-2-x", c), std::invalid_argument);
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_ablation("weight_only") == Ablation::WeightOnly);
  CHECK(to_string(Ablation::ActOnly) == "act_only");
  CHECK_THROWS(parse_ablation("neither"));
}

TEST_CASE("ablation settings pick the quantizer kinds") {
  CHECK(weight_kind_for(2, Ablation::Both) == QuantKind::TernaryWeight);
  CHECK(weight_kind_for(2, Ablation::WeightOnly) == QuantKind::TernaryWeight);
  CHECK(weight_kind_for(2, Ablation::ActOnly) == QuantKind::BaselineTWN);
  CHECK(weight_kind_for(1, Ablation::Baseline) == QuantKind::BaselineBWN);
  CHECK(weight_kind_for(1, Ablation::Both) == QuantKind::BinaryWeight);
  CHECK(weight_kind_for(8, Ablation::Baseline) == QuantKind::Int8Weight);
  CHECK_FALSE(weight_kind_for(32, Ablation::Both).has_value());

  CHECK(act_kind_for(2, Ablation::Both, true) == QuantKind::TernaryActNonNeg);
  CHECK(act_kind_for(2, Ablation::ActOnly, false) == QuantKind::TernaryActSigned);
  CHECK(act_kind_for(2, Ablation::WeightOnly, true) == QuantKind::BaselineTWN);
  CHECK(act_kind_for(1, Ablation::Baseline, false) == QuantKind::BaselineBWN);
  CHECK(act_kind_for(1, Ablation::Both, true) == QuantKind::BinaryActNonNeg);
  CHECK(act_kind_for(8, Ablation::Both, false) == QuantKind::Int8ActSigned);
  CHECK(act_kind_for(8, Ablation::Both, true) == QuantKind::Int8ActNonNeg);
  CHECK_FALSE(act_kind_for(32, Ablation::Both, true).has_value());
}

// ---------------------------------------------------------------------------

TEST_CASE("full-precision quant_linear is a plain linear layer") {
  std::mt19937_64 rng(1);
  QuantLinear l("l", 5, 3, std::nullopt, std::nullopt, rng);
  l.bias.value = random_matrix(rng, 1, 3);
  const Matrix x = random_matrix(rng, 4, 5);
  Tape t;
  const Var y = l.forward(t, t.constant(x));
  const Matrix want = (x * l.weight.value.transpose()).rowwise() + l.bias.value.row(0);
  CHECK((y.value() - want).cwiseAbs().maxCoeff() < 1e-14);

  Parameter xp("x", x);
  auto r = gradcheck::check({&xp, &l.weight, &l.bias},
                            [&](Tape& tp) { return weighted_sum(l.forward(tp, tp.parameter(xp))); });
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("ternary weights on an all-ones input give scaled row sums") {
  std::mt19937_64 rng(2);
  QuantLinear l("l", 10, 4, QuantKind::TernaryWeight, std::nullopt, rng);
  l.bias.value = random_matrix(rng, 1, 4);
  Tape t;
  const Var y = l.forward(t, t.constant(Matrix::Ones(2, 10)));
  const auto q = isometric_ternarize(l.weight.value);
  for (Index o = 0; o < 4; ++o) {
    const double alpha = static_cast<float>(q.alpha[o]);
    const double want = alpha * q.levels.row(o).cast<double>().sum() + l.bias.value(0, o);
    CHECK(y.value()(0, o) == doctest::Approx(want).epsilon(1e-14));
    CHECK(y.value()(1, o) == y.value()(0, o));
  }
}

TEST_CASE("weight gradients are masked outside the clip range") {
  std::mt19937_64 rng(3);
  QuantLinear l("l", 16, 6, QuantKind::TernaryWeight, std::nullopt, rng);
  l.weight.value(0, 0) = 5.0;
  l.weight.value(3, 7) = -4.0;
  l.weight.touch();
  const Matrix x = random_matrix(rng, 5, 16);
  l.weight.zero_grad();
  Tape t;
  t.backward(weighted_sum(l.forward(t, t.constant(x))));
  const auto q = isometric_ternarize(l.weight.value);
  int blocked = 0;
  for (Index r = 0; r < 6; ++r) {
    for (Index c = 0; c < 16; ++c) {
      const bool inside = std::fabs((l.weight.value(r, c) - q.mu[r]) / q.alpha[r]) <= 1.0;
      if (!inside) {
        ++blocked;
        CHECK(l.weight.grad(r, c) == 0.0);
      } else {
        CHECK(l.weight.grad(r, c) != 0.0);
      }
    }
  }
  CHECK(blocked >= 2);
}

TEST_CASE("learned activation gradients flow through quant_linear") {
  std::mt19937_64 rng(4);
  QuantLinear l("l", 8, 5, QuantKind::TernaryWeight, QuantKind::TernaryActSigned, rng);
  Parameter xp("x", random_matrix(rng, 6, 8));
  xp.zero_grad();
  l.input.alpha().zero_grad();
  Tape t;
  const Var y = l.forward(t, t.parameter(xp));
  CHECK(l.input.initialized());
  std::srand(99);
  const Matrix w = Matrix::Random(6, 5);
  t.backward(sum(mul(y, t.constant(w))));
  const Matrix g_xdq = w * l.wq.dequantized();
  const auto st = l.input.state();
  CHECK((xp.grad - act_grad_input(xp.value, st, g_xdq)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(l.input.alpha().grad(0, 0) ==
        doctest::Approx(act_grad_alpha(xp.value, st, g_xdq)).epsilon(1e-12));
}

TEST_CASE("packed and fake-quantized linear layers agree exactly") {
  std::mt19937_64 rng(5);
  const std::pair<QuantKind, QuantKind> kinds[] = {
      {QuantKind::TernaryWeight, QuantKind::TernaryActSigned},
      {QuantKind::TernaryWeight, QuantKind::TernaryActNonNeg},
      {QuantKind::BinaryWeight, QuantKind::BinaryActSigned},
      {QuantKind::BinaryWeight, QuantKind::BinaryActNonNeg},
      {QuantKind::BaselineTWN, QuantKind::BaselineTWN},
      {QuantKind::BaselineBWN, QuantKind::BaselineBWN},
  };
  for (const auto& [wk, ak] : kinds) {
    QuantLinear l("l", 70, 9, wk, ak, rng);
    l.bias.value = random_matrix(rng, 1, 9);
    const Matrix x = is_non_negative(ak) ? random_matrix(rng, 7, 70, 0, 2) : random_matrix(rng, 7, 70);
    Tape t(false);
    const Matrix fake = l.forward(t, t.constant(x)).value();
    const Matrix packed = l.forward(t, t.constant(x), true).value();
    CHECK(fake == packed);
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("attention over a single position returns its value row") {
  std::mt19937_64 rng(6);
  ActQuantizer none("p", std::nullopt);
  Tape t;
  const Matrix v = random_matrix(rng, 1, 8);
  const AttentionLayout layout{{{0, 1}}, {{0, 1}}, true};
  const Var o = attention_core(t, t.constant(random_matrix(rng, 1, 8)),
                               t.constant(random_matrix(rng, 1, 8)), t.constant(v), none, layout, 2);
  CHECK((o.value() - v).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("full-precision attention matches a reference implementation") {
  std::mt19937_64 rng(7);
  ActQuantizer none("p", std::nullopt);
  const AttentionLayout self{{{0, 3}, {3, 5}}, {{0, 3}, {3, 5}}, true};
  const AttentionLayout cross{{{0, 3}, {3, 5}}, {{0, 4}, {4, 2}}, false};
  for (const auto* layout : {&self, &cross}) {
    const Index kr = layout == &self ? 8 : 6;
    const Matrix q = random_matrix(rng, 8, 12), k = random_matrix(rng, kr, 12),
                 v = random_matrix(rng, kr, 12);
    Tape t;
    const Var o = attention_core(t, t.constant(q), t.constant(k), t.constant(v), none, *layout, 3);
    CHECK((o.value() - reference_attention(q, k, v, *layout, 3)).cwiseAbs().maxCoeff() < 1e-6);

    Parameter qp("q", q), kp("k", k), vp("v", v);
    auto r = gradcheck::check({&qp, &kp, &vp}, [&](Tape& tp) {
      return weighted_sum(attention_core(tp, tp.parameter(qp), tp.parameter(kp), tp.parameter(vp),
                                         none, *layout, 3));
    });
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("ternarized attention probabilities lie in {0, alpha, 2 alpha}") {
  std::mt19937_64 rng(8);
  ActQuantizer probs("p", QuantKind::TernaryActNonNeg);
  const Index n = 6;
  const AttentionLayout layout{{{0, n}}, {{0, n}}, false};
  Tape t;
  // With V = I the output rows are the quantized probability rows.
  const Var o = attention_core(t, t.constant(random_matrix(rng, n, n, -3, 3)),
                               t.constant(random_matrix(rng, n, n, -3, 3)),
                               t.constant(Matrix::Identity(n, n)), probs, layout, 1);
  const double alpha = probs.alpha().value(0, 0);
  std::set<double> seen;
  for (Index i = 0; i < o.value().size(); ++i) {
    const double v = o.value().data()[i];
    const bool member = v == 0.0 || v == alpha || v == 2 * alpha;
    CHECK(member);
    seen.insert(v);
  }
  CHECK(seen.size() >= 2);
}

TEST_CASE("causal masking survives probability quantization") {
  std::mt19937_64 rng(9);
  ActQuantizer probs("p", QuantKind::TernaryActNonNeg);
  const AttentionLayout layout{{{0, 5}}, {{0, 5}}, true};
  Matrix q = random_matrix(rng, 5, 4), k = random_matrix(rng, 5, 4), v = random_matrix(rng, 5, 4);
  Tape t;
  const Matrix a = attention_core(t, t.constant(q), t.constant(k), t.constant(v), probs, layout, 1).value();
  k.row(4).setConstant(9.0);
  v.row(4).setConstant(-9.0);
  const Matrix b = attention_core(t, t.constant(q), t.constant(k), t.constant(v), probs, layout, 1).value();
  CHECK(a.topRows(4) == b.topRows(4));
}

// ---------------------------------------------------------------------------

TEST_CASE("feed-forward block") {
  std::mt19937_64 rng(10);
  ModelConfig c = tiny_config();
  FeedForward ffn("f", c, rng);
  Tape t;
  CHECK(ffn.forward(t, t.constant(Matrix::Zero(3, 8))).value().isZero());

  ffn.up.bias.value = random_matrix(rng, 1, 12);
  ffn.down.bias.value = random_matrix(rng, 1, 8);
  const Matrix x = random_matrix(rng, 3, 8);
  const Matrix h = ((x * ffn.up.weight.value.transpose()).rowwise() + ffn.up.bias.value.row(0))
                       .cwiseMax(0.0);
  const Matrix want = (h * ffn.down.weight.value.transpose()).rowwise() + ffn.down.bias.value.row(0);
  CHECK((ffn.forward(t, t.constant(x)).value() - want).cwiseAbs().maxCoeff() < 1e-13);

  FeedForward q("q", tiny_config("2-2-2"), rng);
  CHECK(q.down.input.kind() == QuantKind::TernaryActNonNeg);
  for (int i = 0; i < 20; ++i) CHECK_NOTHROW(q.forward(t, t.constant(random_matrix(rng, 4, 8, -5, 5))));
}

TEST_CASE("quantized embeddings and the tied output head") {
  Seq2Seq m(tiny_config("2-32-32"), 3);
  const auto mats = m.quantized_matrices();
  REQUIRE(mats.size() == 1);
  CHECK(mats[0]->parameter().name == "embed.tok");
  const Matrix& table = mats[0]->dequantized();
  for (Index r = 0; r < table.rows(); ++r) {
    std::set<double> distinct(table.row(r).data(), table.row(r).data() + table.cols());
    CHECK(distinct.size() <= 3);
  }
  std::mt19937_64 rng(11);
  const Matrix states = random_matrix(rng, 4, 8);
  Tape t;
  const Matrix logits = m.logits(t, t.constant(states), {}).value();
  CHECK((logits - states * table.transpose()).cwiseAbs().maxCoeff() < 1e-12);

  Seq2Seq fp(tiny_config(), 3);
  CHECK(fp.quantized_matrices().empty());
  const Matrix fl = fp.logits(t, t.constant(states), {}).value();
  CHECK((fl - states * fp.find_tensor("embed.tok")->value.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("model inventory") {
  ModelConfig c;
  parse_bits("2-2-2", c);
  Seq2Seq m(c, 1);
  CHECK(m.quantized_matrices().size() == 33);
  std::size_t learned = 0;
  for (ActQuantizer* a : m.act_quantizers()) learned += a->learned();
  CHECK(m.parameters().size() == m.tensors().size() + learned);
  CHECK(m.find_tensor("dec.1.cross_attn.v_proj.weight") != nullptr);
  CHECK(m.find_act("enc.0.self_attn.probs")->kind() == QuantKind::TernaryActNonNeg);
  CHECK(m.find_act("enc.0.ffn.down.in")->kind() == QuantKind::TernaryActNonNeg);
  CHECK(m.find_act("dec.0.self_attn.q")->kind() == QuantKind::TernaryActSigned);

  ModelConfig b = c;
  b.ablation = Ablation::Baseline;
  Seq2Seq base(b, 1);
  CHECK(base.parameters().size() == base.tensors().size());
  for (WeightQuantizer* w : base.quantized_matrices()) CHECK(w->kind() == QuantKind::BaselineTWN);
}

TEST_CASE("full-precision model gradients match finite differences") {
  Seq2Seq m(tiny_config(), 4);
  std::mt19937_64 rng(12);
  const Batch src = random_batch(rng, 2, 7, 1, 4);
  const Batch tgt = random_batch(rng, 2, 7, 1, 4);
  auto r = gradcheck::check(m.parameters(), [&](Tape& t) {
    auto out = m.forward(t, src, tgt);
    return cross_entropy(out.logits, out.targets);
  });
  CHECK(r.points > 1000);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("decoder outputs ignore later target tokens") {
  for (const char* bits : {"32-32-32", "2-2-2", "1-1-1"}) {
    CAPTURE(bits);
    Seq2Seq m(small_config(bits), 5);
    std::mt19937_64 rng(13);
    const Batch src = random_batch(rng, 3, 16, 3, 8);
    Batch a = random_batch(rng, 3, 16, 6, 8);
    Tape warm(false);
    m.forward(warm, src, a);  // calibrates activation scales
    Batch b = a;
    for (auto& s : b) {
      s[4] = 2 + (s[4] + 3) % 14;
      s.back() = 2 + (s.back() + 5) % 14;
    }
    Tape t(false);
    const auto ra = m.forward(t, src, a);
    const auto rb = m.forward(t, src, b);
    Index off = 0;
    for (const auto& s : a) {
      // Positions 0..4 read BOS and tokens 0..3 only.
      CHECK(ra.dec_out.value().middleRows(off, 5) == rb.dec_out.value().middleRows(off, 5));
      CHECK(ra.logits.value().middleRows(off, 5) == rb.logits.value().middleRows(off, 5));
      off += static_cast<Index>(s.size()) + 1;
    }
  }
}

TEST_CASE("packed model forward equals the fake-quantized forward") {
  for (const char* bits : {"2-2-2", "1-1-1", "2-2-32"}) {
    for (Ablation ab : {Ablation::Both, Ablation::Baseline}) {
      CAPTURE(bits);
      Seq2Seq m(small_config(bits, ab), 6);
      std::mt19937_64 rng(14);
      const Batch src = random_batch(rng, 4, 16, 3, 9);
      const Batch tgt = random_batch(rng, 4, 16, 3, 9);
      Tape t(false);
      const Matrix fake = m.forward(t, src, tgt).logits.value();
      const Matrix packed = m.forward(t, src, tgt, {.packed = true}).logits.value();
      CHECK(fake == packed);
    }
  }
}

// ---------------------------------------------------------------------------

TEST_CASE("distillation loss terms") {
  Tape t;
  ForwardResult s;
  const Matrix sl = (Matrix(2, 3) << 1.0, -0.5, 0.3, 0.2, 0.1, 2.0).finished();
  const Matrix tl = (Matrix(2, 3) << 0.4, 1.2, -1.0, 0.0, 0.5, 0.7).finished();
  s.logits = t.constant(sl);
  const std::vector<int> labels{0, 2};
  TeacherOutputs teacher{tl, {}, {}};

  DistillTerms terms;
  const double temp = 2.0;
  const Var loss = distill_loss(t, s, teacher, labels, {1.0, 0.0, temp}, &terms);
  double kl = 0;
  for (Index r = 0; r < 2; ++r) {
    double zt = 0, zs = 0;
    for (Index c = 0; c < 3; ++c) {
      zt += std::exp(tl(r, c) / temp);
      zs += std::exp(sl(r, c) / temp);
    }
    for (Index c = 0; c < 3; ++c) {
      const double pt = std::exp(tl(r, c) / temp) / zt;
      const double ps = std::exp(sl(r, c) / temp) / zs;
      kl += pt * std::log(pt / ps) / 2.0;
    }
  }
  CHECK(terms.kd == doctest::Approx(kl).epsilon(1e-12));
  const double ce = cross_entropy(s.logits, labels).value()(0, 0);
  CHECK(terms.ce == doctest::Approx(ce));
  CHECK(loss.value()(0, 0) == doctest::Approx(ce + temp * temp * kl).epsilon(1e-12));

  const Var pure = distill_loss(t, s, teacher, labels, {0.0, 0.0, temp});
  CHECK(pure.value()(0, 0) == ce);

  TeacherOutputs wrong{Matrix::Zero(2, 4), {}, {}};
  CHECK_THROWS_AS(distill_loss(t, s, wrong, labels, {}), std::invalid_argument);
}

TEST_CASE("a student identical to its teacher has zero distillation terms") {
  Seq2Seq teacher(tiny_config(), 7);
  auto student = init_student_from_teacher(teacher, tiny_config(), 99);
  std::mt19937_64 rng(15);
  const Batch src = random_batch(rng, 3, 7, 2, 5);
  Batch tgt = random_batch(rng, 3, 7, 2, 5);
  const TeacherOutputs to = teacher_outputs(teacher, src, tgt);
  Tape t;
  const auto r = student->forward(t, src, tgt);
  CHECK(r.logits.value() == to.logits);
  std::vector<int> argmax;
  for (Index i = 0; i < to.logits.rows(); ++i) {
    Index best = 0;
    to.logits.row(i).maxCoeff(&best);
    argmax.push_back(static_cast<int>(best));
  }
  DistillTerms terms;
  distill_loss(t, r, to, argmax, {}, &terms);
  CHECK(std::fabs(terms.kd) < 1e-12);
  CHECK(terms.hidden == 0.0);
}

TEST_CASE("student initialisation") {
  Seq2Seq teacher(small_config(), 8);
  train_copy(teacher, 150, 1);
  std::mt19937_64 rng(16);
  const Batch src = random_batch(rng, 16, 16, 2, 6);

  auto quantized = init_student_from_teacher(teacher, small_config("2-2-2"), 2);
  for (ActQuantizer* a : quantized->act_quantizers()) CHECK_FALSE(a->initialized());
  const double student_loss = ce_loss(*quantized, src, src);
  for (ActQuantizer* a : quantized->act_quantizers()) CHECK(a->initialized());

  Seq2Seq random_model(small_config("2-2-2"), 3);
  CHECK(student_loss < ce_loss(random_model, src, src));

  ModelConfig other = small_config("2-2-2");
  other.d_ffn = 48;
  CHECK_THROWS_AS(init_student_from_teacher(teacher, other, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST_CASE("greedy decoding") {
  Seq2Seq m(small_config("2-2-2"), 9);
  std::mt19937_64 rng(17);
  const Batch src = random_batch(rng, 10, 16, 2, 8);
  const auto a = greedy_decode_batch(m, src, 5);
  const auto b = greedy_decode_batch(m, src, 5);
  CHECK(a == b);
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(a[i].size() <= 5);
    CHECK(greedy_decode(m, src[i], 5) == a[i]);
  }
  // The cap never exceeds the positional table.
  for (const auto& out : greedy_decode_batch(m, src, 1000)) CHECK(out.size() <= 16);
}

TEST_CASE("greedy decoding agrees with the teacher-forced forward pass") {
  Seq2Seq m(small_config(), 10);
  train_copy(m, 60, 2);
  std::mt19937_64 rng(18);
  const Batch src = random_batch(rng, 8, 16, 2, 6);
  const auto outs = greedy_decode_batch(m, src, 12);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (outs[i].size() >= 12) continue;  // hit the cap without EOS
    Tape t(false);
    const auto r = m.forward(t, {src[i]}, {outs[i]});
    for (Index p = 0; p < r.logits.rows(); ++p) {
      Index best = 0;
      r.logits.value().row(p).maxCoeff(&best);
      CHECK(static_cast<int>(best) == r.targets[static_cast<std::size_t>(p)]);
    }
  }
}

TEST_CASE("input validation") {
  Seq2Seq m(tiny_config(), 1);
  Tape t;
  CHECK_THROWS(m.forward(t, {{2, 3}}, {{2}, {3}}));
  CHECK_THROWS(m.forward(t, {{2, 30}}, {{2}}));
  CHECK_THROWS(m.forward(t, {std::vector<int>(12, 2)}, {{2}}));
  ModelConfig c = tiny_config();
  c.dropout = 0.2;
  Seq2Seq d(c, 1);
  CHECK_THROWS(d.forward(t, {{2, 3}}, {{2}}, {.training = true}));
  std::mt19937_64 rng(1);
  CHECK_NOTHROW(d.forward(t, {{2, 3}}, {{2}}, {.training = true, .rng = &rng}));
}
