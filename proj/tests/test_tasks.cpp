#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "lowbit/tasks.hpp"

using namespace lowbit;

namespace {

TaskSpec spec(TaskKind kind, std::uint64_t seed = 3) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = 12;
  s.min_len = 2;
  s.max_len = 9;
  s.seed = seed;
  return s;
}

ModelConfig small_model(const char* bits) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.d_ffn = 32;
  c.max_seq_len = 13;
  parse_bits(bits, c);
  return c;
}

// Forces every decoder state to a constant that the tied head maps to EOS.
void make_eos_model(Seq2Seq& m) {
  Parameter* gamma = m.find_tensor("dec.norm.gamma");
  Parameter* beta = m.find_tensor("dec.norm.beta");
  Parameter* table = m.find_tensor("embed.tok");
  gamma->value.setZero();
  beta->value.setOnes();
  table->value.row(kEos).setConstant(5.0);
  for (Parameter* p : {gamma, beta, table}) p->touch();
}

}  // namespace

TEST_CASE("task targets") {
  CHECK(make_target(TaskKind::Copy, {5, 7, 9}) == std::vector<int>{5, 7, 9});
  CHECK(make_target(TaskKind::Reverse, {1, 2, 3}) == std::vector<int>{3, 2, 1});
  CHECK(make_target(TaskKind::SortDigits, {9, 4, 6, 4}) == std::vector<int>{4, 4, 6, 9});
  CHECK(parse_task_kind("reverse") == TaskKind::Reverse);
  CHECK(to_string(TaskKind::SortDigits) == "sort");
  CHECK_THROWS_AS(parse_task_kind("rotate"), std::invalid_argument);
}

TEST_CASE("generation is deterministic and well formed") {
  for (TaskKind kind : {TaskKind::Copy, TaskKind::Reverse, TaskKind::SortDigits}) {
    const TaskSpec s = spec(kind);
    const Dataset a = generate(s, 300);
    const Dataset b = generate(s, 300);
    REQUIRE(a.size() == 300);
    bool differs = false;
    const Dataset other = generate(spec(kind, 4), 300);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].src == b[i].src);
      CHECK(a[i].tgt == b[i].tgt);
      CHECK(a[i].tgt == make_target(kind, a[i].src));
      const auto n = static_cast<int>(a[i].src.size());
      CHECK(n >= s.min_len);
      CHECK(n <= s.max_len);
      for (int t : a[i].src) {
        CHECK(t > kEos);
        CHECK(t < s.vocab_size);
      }
      differs = differs || a[i].src != other[i].src;
    }
    CHECK(differs);
  }
  CHECK_THROWS(generate(spec(TaskKind::Copy), -1));
}

TEST_CASE("task spec validation") {
  TaskSpec s = spec(TaskKind::Copy);
  CHECK_NOTHROW(s.validate(12));
  CHECK_THROWS_AS(s.validate(11), std::invalid_argument);
  s.min_len = 0;
  CHECK_THROWS_AS(s.validate(40), std::invalid_argument);
  s = spec(TaskKind::Copy);
  s.min_len = 10;
  CHECK_THROWS_AS(s.validate(40), std::invalid_argument);
  s = spec(TaskKind::Copy);
  s.vocab_size = 2;
  CHECK_THROWS_AS(s.validate(40), std::invalid_argument);
}

TEST_CASE("dataset text round trip") {
  const Dataset d = generate(spec(TaskKind::Reverse), 50);
  std::stringstream buf;
  write_dataset(buf, d);
  const std::string text = buf.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 50);
  CHECK(std::count(text.begin(), text.end(), '\t') == 50);
  const Dataset back = read_dataset(buf);
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back[i].src == d[i].src);
    CHECK(back[i].tgt == d[i].tgt);
  }
  std::istringstream bad("1 2 3\n");
  CHECK_THROWS(read_dataset(bad));
  std::istringstream junk("1 x\t2\n");
  CHECK_THROWS(read_dataset(junk));
}

// ---------------------------------------------------------------------------

TEST_CASE("scoring") {
  const Dataset d{{{5, 6, 7}, {5, 6, 7}}, {{3, 4}, {4, 3}}};

  SUBCASE("perfect outputs") {
    const EvalReport r = score({{5, 6, 7}, {4, 3}}, d, 12);
    CHECK(r.n == 2);
    CHECK(r.token_accuracy == 1.0);
    CHECK(r.sequence_accuracy == 1.0);
    CHECK(r.avg_gen_length == r.avg_ref_length);
    CHECK(r.avg_ref_length == 2.5);
  }
  SUBCASE("empty outputs") {
    const EvalReport r = score({{}, {}}, d, 12);
    CHECK(r.token_accuracy == 0.0);
    CHECK(r.sequence_accuracy == 0.0);
    CHECK(r.avg_gen_length == 0.0);
  }
  SUBCASE("left-aligned truncation") {
    // 2 of 3 positions, then 1 of 2 positions; the extra token counts nowhere.
    const EvalReport r = score({{5, 6, 9, 9}, {4}}, d, 12);
    CHECK(r.token_accuracy == doctest::Approx(3.0 / 5.0));
    CHECK(r.sequence_accuracy == 0.0);
    CHECK(r.avg_gen_length == 2.5);
  }
  SUBCASE("outputs at the cap count as unterminated") {
    const EvalReport r = score({{5, 6, 7}, {4, 3}}, d, 3);
    CHECK(r.unterminated == 0.5);
  }
  CHECK_THROWS(score({{}}, d, 12));
}

TEST_CASE("metrics do not depend on dataset order") {
  std::mt19937_64 rng(5);
  Dataset d = generate(spec(TaskKind::Copy), 200);
  std::vector<std::vector<int>> hyps;
  std::uniform_int_distribution<int> coin(0, 3);
  for (const auto& ex : d) {
    auto h = ex.tgt;
    if (coin(rng) == 0) h.pop_back();
    if (coin(rng) == 0) h[0] = 11;
    if (coin(rng) == 0) h.push_back(2);
    hyps.push_back(h);
  }
  const EvalReport a = score(hyps, d, 12);
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Dataset d2;
  std::vector<std::vector<int>> h2;
  for (std::size_t i : order) {
    d2.push_back(d[i]);
    h2.push_back(hyps[i]);
  }
  const EvalReport b = score(h2, d2, 12);
  CHECK(a.token_accuracy == doctest::Approx(b.token_accuracy).epsilon(1e-15));
  CHECK(a.sequence_accuracy == doctest::Approx(b.sequence_accuracy).epsilon(1e-15));
  CHECK(a.avg_gen_length == doctest::Approx(b.avg_gen_length).epsilon(1e-15));
  CHECK(a.sequence_accuracy > 0.1);
  CHECK(a.sequence_accuracy < 0.9);
}

TEST_CASE("evaluating a model") {
  const Dataset d = generate(spec(TaskKind::Copy), 40);

  SUBCASE("immediate EOS") {
    Seq2Seq m(small_model("32-32-32"), 1);
    make_eos_model(m);
    const EvalReport r = evaluate(m, d);
    CHECK(r.sequence_accuracy == 0.0);
    CHECK(r.avg_gen_length == 0.0);
    CHECK(r.layer_entropy.empty());
  }
  SUBCASE("generated length respects the decode cap") {
    for (const char* bits : {"32-32-32", "2-2-2", "1-1-1"}) {
      Seq2Seq m(small_model(bits), 2);
      for (int cap : {3, 7, 100}) {
        const EvalReport r = evaluate(m, d, {.max_decode_len = cap});
        CHECK(r.avg_gen_length <= std::min(cap, 12));
        CHECK(r.token_accuracy >= 0.0);
        CHECK(r.token_accuracy <= 1.0);
      }
    }
  }
  SUBCASE("one entropy value per quantized matrix") {
    Seq2Seq m(small_model("2-2-2"), 3);
    const EvalReport r = evaluate(m, d);
    // 1 encoder layer (6 matrices) + 2 decoder layers (10 each) + embedding.
    CHECK(r.layer_entropy.size() == 27);
    CHECK(r.layer_names.size() == 27);
    CHECK(r.layer_names.front() == "embed.tok");
    for (double h : r.layer_entropy) {
      CHECK(h > 0.0);
      CHECK(h <= std::log(3.0) + 1e-12);
    }
    Seq2Seq w(small_model("32-2-32"), 3);
    CHECK(evaluate(w, d).layer_entropy.size() == 26);
  }
  SUBCASE("packed evaluation matches") {
    Seq2Seq m(small_model("2-2-2"), 4);
    const EvalReport a = evaluate(m, d);
    const EvalReport b = evaluate(m, d, {.packed = true});
    CHECK(a.token_accuracy == b.token_accuracy);
    CHECK(a.avg_gen_length == b.avg_gen_length);
  }
}

TEST_CASE("report formatting") {
  EvalReport r;
  r.n = 3;
  r.token_accuracy = 0.5;
  r.layer_entropy = {1.0, 0.5};
  const std::string s = format_report(r);
  CHECK(s.find("n=3 ") == 0);
  CHECK(s.find("token_accuracy=0.5") != std::string::npos);
  CHECK(s.find("mean_entropy=0.75") != std::string::npos);
  CHECK(s.find("quantized_matrices=2") != std::string::npos);
}
