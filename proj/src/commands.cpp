#include "lowbit/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace lowbit {

namespace fs = std::filesystem;

RunConfig resolve_config(const std::string& config_path, const Overrides& overrides) {
  RunConfig config = config_path.empty() ? RunConfig{} : load_config(config_path);
  for (const auto& [key, value] : overrides) set_config_value(config, key, value);
  return config;
}

namespace {

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("cannot create output directory " + dir);
  }
  const fs::path probe = fs::path(dir) / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw std::runtime_error("output directory " + dir + " is not writable");
  }
  fs::remove(probe, ec);
}

std::ofstream open_text(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << std::setprecision(10);
  return f;
}

void write_eval(const fs::path& path, const EvalReport& r) {
  std::ofstream f = open_text(path);
  f << format_report(r) << '\n';
}

TrainOutcome logged_training(const RunConfig& config, std::ostream& out,
                             const std::function<TrainOutcome(const EpochCallback&)>& train) {
  std::ofstream metrics = open_text(fs::path(config.output_dir) / "metrics.log");
  const TrainOutcome outcome = train([&](const EpochLog& e) {
    out << format_epoch(e) << std::endl;
    metrics << format_epoch(e) << std::endl;
  });
  out << format_report(outcome.report) << std::endl;
  write_eval(fs::path(config.output_dir) / "eval.log", outcome.report);
  return outcome;
}

}  // namespace

TrainOutcome cmd_train_teacher(const RunConfig& config, std::ostream& out) {
  config.validate();
  if (!config.model.full_precision()) {
    throw std::invalid_argument("train-teacher trains a full-precision model; use bits 32-32-32, got " +
                                bits_string(config.model));
  }
  prepare_dir(config.output_dir);
  Seq2Seq model(config.model, config.seed);
  const TrainOutcome outcome = logged_training(
      config, out, [&](const EpochCallback& cb) { return train_teacher(model, config, cb); });
  save_checkpoint((fs::path(config.output_dir) / "teacher.ckpt").string(), model, config);
  return outcome;
}

TrainOutcome cmd_train_student(const RunConfig& config_in, const std::string& teacher_ckpt,
                               std::ostream& out) {
  LoadedModel teacher = load_checkpoint(teacher_ckpt);
  RunConfig config = config_in;
  const ModelConfig& tc = teacher.config.model;
  config.model.vocab_size = tc.vocab_size;
  config.model.d_model = tc.d_model;
  config.model.n_heads = tc.n_heads;
  config.model.n_enc_layers = tc.n_enc_layers;
  config.model.n_dec_layers = tc.n_dec_layers;
  config.model.d_ffn = tc.d_ffn;
  config.model.max_seq_len = tc.max_seq_len;
  config.validate();
  prepare_dir(config.output_dir);
  auto student = init_student_from_teacher(*teacher.model, config.model, config.seed);
  const TrainOutcome outcome = logged_training(config, out, [&](const EpochCallback& cb) {
    return train_student(*student, *teacher.model, config, cb);
  });
  save_checkpoint((fs::path(config.output_dir) / "student.ckpt").string(), *student, config);
  return outcome;
}

EvalReport cmd_eval(const std::string& ckpt, const Overrides& overrides, const std::string& out_dir,
                    std::ostream& out) {
  LoadedModel m = load_checkpoint(ckpt);
  RunConfig config = m.config;
  for (const auto& [key, value] : overrides) {
    if (key.rfind("task.", 0) != 0 && key != "eval_size") {
      throw std::invalid_argument("eval accepts only task.* and eval_size overrides, got " + key);
    }
    set_config_value(config, key, value);
  }
  config.validate();
  const EvalReport r = evaluate(*m.model, held_out_set(config));
  out << format_report(r) << std::endl;
  if (!out_dir.empty()) {
    prepare_dir(out_dir);
    write_eval(fs::path(out_dir) / "eval.log", r);
  }
  return r;
}

HistFiles cmd_report_hist(const std::string& ckpt, const std::string& out_dir, std::ostream& out) {
  LoadedModel m = load_checkpoint(ckpt);
  const auto matrices = m.model->quantized_matrices();
  if (matrices.empty()) throw std::invalid_argument(ckpt + " has no quantized matrices");
  prepare_dir(out_dir);
  HistFiles files{(fs::path(out_dir) / "levels.tsv").string(),
                  (fs::path(out_dir) / "weight_hist.tsv").string()};
  std::ofstream levels = open_text(files.levels);
  std::ofstream hist = open_text(files.weights);
  levels << "matrix\tscheme\trows\tcols\tp_neg\tp_zero\tp_pos\tentropy\n";
  hist << "matrix\tbin\tlo\thi\tcount\n";
  constexpr int kBins = 64;
  for (WeightQuantizer* w : matrices) {
    const auto& q = w->quantized_tensor();
    double neg = 0, zero = 0, pos = 0;
    for (const auto& [level, p] : level_proportions(q)) {
      (level < 0 ? neg : level == 0 ? zero : pos) += p;
    }
    const std::string& name = w->parameter().name;
    levels << name << '\t' << to_string(*w->kind()) << '\t' << q.rows() << '\t' << q.cols() << '\t'
           << neg << '\t' << zero << '\t' << pos << '\t' << quant_entropy(q) << '\n';

    const Matrix& v = w->parameter().value;
    const double lo = v.minCoeff();
    const double hi = v.maxCoeff();
    const double width = hi > lo ? (hi - lo) / kBins : 1.0;
    std::vector<long> counts(kBins, 0);
    for (Index i = 0; i < v.size(); ++i) {
      const int b = std::clamp(static_cast<int>((v.data()[i] - lo) / width), 0, kBins - 1);
      ++counts[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < kBins; ++b) {
      hist << name << '\t' << b << '\t' << lo + b * width << '\t' << lo + (b + 1) * width << '\t'
           << counts[static_cast<std::size_t>(b)] << '\n';
    }
  }
  out << "matrices=" << matrices.size() << " levels=" << files.levels
      << " weight_hist=" << files.weights << std::endl;
  return files;
}

ExportStats cmd_export_packed(const std::string& ckpt, const std::string& out_path,
                              std::ostream& out) {
  LoadedModel m = load_checkpoint(ckpt);
  const ExportStats s = export_packed(out_path, *m.model, m.config);
  out << "matrices=" << s.matrices << " packed_bytes=" << s.packed_bytes
      << " fp32_bytes=" << s.fp32_bytes << " ratio=" << s.ratio << " file_bytes=" << s.file_bytes
      << " path=" << out_path << std::endl;
  return s;
}

std::vector<GemmShape> parse_shapes(const std::string& text) {
  std::vector<GemmShape> shapes;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    GemmShape s;
    char x1 = 0, x2 = 0;
    std::istringstream one(item);
    if (!(one >> s.m >> x1 >> s.k >> x2 >> s.n) || x1 != 'x' || x2 != 'x' || !one.eof() ||
        s.m <= 0 || s.k <= 0 || s.n <= 0) {
      throw std::invalid_argument("shape '" + item + "' is not MxKxN with positive sizes");
    }
    shapes.push_back(s);
  }
  if (shapes.empty()) throw std::invalid_argument("no shapes given");
  return shapes;
}

std::vector<BenchRow> cmd_bench(const std::vector<GemmShape>& shapes, int repeats,
                                std::ostream& out) {
  const auto rows = bench(shapes, repeats);
  out << bench_header() << '\n';
  for (const BenchRow& r : rows) out << format_bench_row(r) << '\n';
  out.flush();
  return rows;
}

std::map<std::string, std::string> parse_kv_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream in(line);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("not key=value: " + token);
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  return kv;
}

}  // namespace lowbit
