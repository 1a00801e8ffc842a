#include "lowbit/tasks.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lowbit {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::SortDigits: return "sort";
  }
  return "copy";
}

TaskKind parse_task_kind(std::string_view s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse") return TaskKind::Reverse;
  if (s == "sort") return TaskKind::SortDigits;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected copy, reverse or sort)");
}

void TaskSpec::validate(int max_seq_len) const {
  if (vocab_size <= 2) throw std::invalid_argument("task: vocab_size must exceed 2");
  if (min_len <= 0 || min_len > max_len) {
    throw std::invalid_argument("task: need 0 < min_len <= max_len");
  }
  if (max_len >= max_seq_len - 2) {
    throw std::invalid_argument("task: max_len must be below max_seq_len - 2");
  }
}

std::vector<int> make_target(TaskKind kind, const std::vector<int>& src) {
  std::vector<int> tgt = src;
  switch (kind) {
    case TaskKind::Copy: break;
    case TaskKind::Reverse: std::reverse(tgt.begin(), tgt.end()); break;
    case TaskKind::SortDigits: std::sort(tgt.begin(), tgt.end()); break;
  }
  return tgt;
}

Dataset generate(const TaskSpec& spec, int n) {
  if (n < 0) throw std::invalid_argument("generate: negative example count");
  if (spec.vocab_size <= 2 || spec.min_len <= 0 || spec.min_len > spec.max_len) {
    throw std::invalid_argument("generate: invalid task spec");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> length(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> token(kEos + 1, spec.vocab_size - 1);
  Dataset data;
  data.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.src.resize(static_cast<std::size_t>(length(rng)));
    for (int& t : ex.src) t = token(rng);
    ex.tgt = make_target(spec.kind, ex.src);
    data.push_back(std::move(ex));
  }
  return data;
}

namespace {

void write_ids(std::ostream& out, const std::vector<int>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out << ' ';
    out << ids[i];
  }
}

std::vector<int> parse_ids(const std::string& text) {
  std::vector<int> ids;
  std::istringstream in(text);
  int v = 0;
  while (in >> v) ids.push_back(v);
  if (!in.eof()) throw std::invalid_argument("dataset: non-integer token in '" + text + "'");
  return ids;
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& data) {
  for (const Example& ex : data) {
    write_ids(out, ex.src);
    out << '\t';
    write_ids(out, ex.tgt);
    out << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  Dataset data;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::invalid_argument("dataset: line without a tab");
    data.push_back({parse_ids(line.substr(0, tab)), parse_ids(line.substr(tab + 1))});
  }
  return data;
}

EvalReport score(const std::vector<std::vector<int>>& hyps, const Dataset& data, int cap) {
  if (hyps.size() != data.size()) throw std::invalid_argument("score: output count mismatch");
  EvalReport r;
  r.n = static_cast<int>(data.size());
  if (data.empty()) return r;
  long matched = 0;
  long ref_total = 0;
  long gen_total = 0;
  long exact = 0;
  long capped = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& hyp = hyps[i];
    const auto& ref = data[i].tgt;
    const std::size_t overlap = std::min(hyp.size(), ref.size());
    for (std::size_t k = 0; k < overlap; ++k) matched += hyp[k] == ref[k];
    ref_total += static_cast<long>(ref.size());
    gen_total += static_cast<long>(hyp.size());
    exact += hyp == ref;
    capped += static_cast<int>(hyp.size()) >= cap;
  }
  const double n = static_cast<double>(data.size());
  r.token_accuracy = ref_total == 0 ? 1.0 : static_cast<double>(matched) / ref_total;
  r.sequence_accuracy = static_cast<double>(exact) / n;
  r.avg_gen_length = static_cast<double>(gen_total) / n;
  r.avg_ref_length = static_cast<double>(ref_total) / n;
  r.unterminated = static_cast<double>(capped) / n;
  return r;
}

EvalReport evaluate(Seq2Seq& model, const Dataset& data, const EvalOptions& opt) {
  const int cap = opt.max_decode_len > 0 ? std::min(opt.max_decode_len, model.config().max_seq_len - 1)
                                         : model.config().max_seq_len - 1;
  std::vector<std::vector<int>> srcs;
  srcs.reserve(data.size());
  for (const Example& ex : data) srcs.push_back(ex.src);
  const auto hyps = greedy_decode_batch(model, srcs, cap, kEos, opt.packed);
  EvalReport r = score(hyps, data, cap);
  model.requantize();
  for (WeightQuantizer* w : model.quantized_matrices()) {
    r.layer_names.push_back(w->parameter().name);
    r.layer_entropy.push_back(quant_entropy(w->quantized_tensor()));
  }
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  out << "n=" << r.n << " token_accuracy=" << r.token_accuracy
      << " sequence_accuracy=" << r.sequence_accuracy << " avg_gen_length=" << r.avg_gen_length
      << " avg_ref_length=" << r.avg_ref_length << " unterminated=" << r.unterminated;
  if (!r.layer_entropy.empty()) {
    double mean = 0;
    for (double h : r.layer_entropy) mean += h;
    out << " mean_entropy=" << mean / static_cast<double>(r.layer_entropy.size())
        << " quantized_matrices=" << r.layer_entropy.size();
  }
  return out.str();
}

}  // namespace lowbit
