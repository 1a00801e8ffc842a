#pragma once

// Subcommand implementations behind the `lowbit` executable. Each throws
// std::exception on failure; the executable turns that into a nonzero exit.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "lowbit/checkpoint.hpp"
#include "lowbit/config.hpp"
#include "lowbit/kernels.hpp"
#include "lowbit/tasks.hpp"
#include "lowbit/train.hpp"

namespace lowbit {

using Overrides = std::map<std::string, std::string>;

// Loads `config_path` (if non-empty) and applies the overrides in key order.
RunConfig resolve_config(const std::string& config_path, const Overrides& overrides);

// Writes <output_dir>/teacher.ckpt, metrics.log and eval.log.
TrainOutcome cmd_train_teacher(const RunConfig& config, std::ostream& out);

// Architecture fields come from the teacher checkpoint; bits, ablation and
// the training settings from `config`. Writes <output_dir>/student.ckpt,
// metrics.log and eval.log.
TrainOutcome cmd_train_student(const RunConfig& config, const std::string& teacher_ckpt,
                               std::ostream& out);

// Evaluates on the held-out set of the checkpoint's task, with task.* and
// eval_size overrides applied. Writes <out_dir>/eval.log when out_dir is set.
EvalReport cmd_eval(const std::string& ckpt, const Overrides& overrides, const std::string& out_dir,
                    std::ostream& out);

struct HistFiles {
  std::string levels;   // one row per quantized matrix
  std::string weights;  // 64 rows per quantized matrix
};

HistFiles cmd_report_hist(const std::string& ckpt, const std::string& out_dir, std::ostream& out);

ExportStats cmd_export_packed(const std::string& ckpt, const std::string& out_path,
                              std::ostream& out);

std::vector<GemmShape> parse_shapes(const std::string& text);
std::vector<BenchRow> cmd_bench(const std::vector<GemmShape>& shapes, int repeats,
                                std::ostream& out);

// Key=value row files written by the commands.
std::map<std::string, std::string> parse_kv_line(const std::string& line);

}  // namespace lowbit
