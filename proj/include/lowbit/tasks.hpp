#pragma once

// Synthetic sequence-to-sequence tasks and generation metrics.
//
// Content tokens are drawn from [2, vocab_size); ids 0 and 1 are BOS / EOS.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lowbit/model.hpp"

namespace lowbit {

enum class TaskKind : std::uint8_t { Copy, Reverse, SortDigits };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int vocab_size = 64;
  int min_len = 4;
  int max_len = 16;
  std::uint64_t seed = 1;

  // Throws unless 2 < vocab_size and 0 < min_len <= max_len < max_seq_len - 2.
  void validate(int max_seq_len) const;
};

struct Example {
  std::vector<int> src;
  std::vector<int> tgt;
};

using Dataset = std::vector<Example>;

std::vector<int> make_target(TaskKind kind, const std::vector<int>& src);

// Deterministic in spec.seed.
Dataset generate(const TaskSpec& spec, int n);

// One line per example: space-separated source ids, a tab, target ids.
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);

struct EvalOptions {
  int max_decode_len = -1;  // defaults to max_seq_len - 1
  bool packed = false;
};

struct EvalReport {
  int n = 0;
  double token_accuracy = 0;
  double sequence_accuracy = 0;
  double avg_gen_length = 0;
  double avg_ref_length = 0;
  // Fraction of outputs that reached the decode cap without emitting EOS.
  double unterminated = 0;
  std::vector<std::string> layer_names;
  std::vector<double> layer_entropy;
};

// Metrics over already-decoded outputs. Token accuracy counts positions i
// with hyp[i] == ref[i] over the total reference length.
EvalReport score(const std::vector<std::vector<int>>& hyps, const Dataset& data, int cap);

// Greedy-decodes every source and scores it; also records the level entropy
// of every quantized matrix.
EvalReport evaluate(Seq2Seq& model, const Dataset& data, const EvalOptions& opt = {});

// One line of space-separated key=value pairs.
std::string format_report(const EvalReport& r);

}  // namespace lowbit
