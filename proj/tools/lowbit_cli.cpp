// lowbit: train, distill, evaluate and export ternary / binary seq2seq models.

#include <exception>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "lowbit/commands.hpp"

namespace {

using lowbit::Overrides;

// Registers --<key> for every config key, collecting given values.
void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& values) {
  for (const std::string& key : lowbit::config_keys()) {
    if (key == "seed" || key == "bits" || key == "ablation" || key == "output_dir") continue;
    cmd->add_option("--" + key, values[key], "override config key " + key);
  }
}

Overrides collect(const std::map<std::string, std::string>& values) {
  Overrides o;
  for (const auto& [k, v] : values) {
    if (!v.empty()) o[k] = v;
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary / binary transformer training kit"};
  app.require_subcommand(1);

  std::string config_path, seed, out, bits, ablation, teacher, ckpt, shapes = "64x64x64,256x256x256,512x512x512";
  int repeats = 5;
  std::map<std::string, std::string> values;

  auto* teach = app.add_subcommand("train-teacher", "train the full-precision teacher");
  auto* student = app.add_subcommand("train-student", "distill a quantized student from a teacher");
  for (CLI::App* cmd : {teach, student}) {
    cmd->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--bits", bits, "E-W-A bit widths, e.g. 2-2-2");
    cmd->add_option("--ablation", ablation, "both, weight_only, act_only or baseline");
    add_config_flags(cmd, values);
  }
  student->add_option("--teacher", teacher, "teacher checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "greedy-decode the held-out set and report metrics");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--out", out, "directory for eval.log");
  for (const char* key : {"task.kind", "task.min_len", "task.max_len", "task.seed", "eval_size"}) {
    eval->add_option(std::string("--") + key, values[key], std::string("override ") + key);
  }

  auto* hist = app.add_subcommand("report-hist", "level proportions, entropy and weight histograms");
  hist->add_option("--ckpt", ckpt, "checkpoint")->required();
  hist->add_option("--out", out, "output directory")->required();

  auto* exp = app.add_subcommand("export-packed", "write the bit-packed model file");
  exp->add_option("--ckpt", ckpt, "checkpoint")->required();
  exp->add_option("--out", out, "packed model path")->required();

  auto* bench = app.add_subcommand("bench", "time packed GEMM against the float reference");
  bench->add_option("--shapes", shapes, "comma-separated MxKxN list");
  bench->add_option("--repeats", repeats, "timed runs per shape")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    Overrides overrides = collect(values);
    if (!seed.empty()) overrides["seed"] = seed;
    if (!bits.empty()) overrides["bits"] = bits;
    if (!ablation.empty()) overrides["ablation"] = ablation;
    if (*teach || *student) {
      if (!out.empty()) overrides["output_dir"] = out;
      const lowbit::RunConfig config = lowbit::resolve_config(config_path, overrides);
      if (*teach) {
        lowbit::cmd_train_teacher(config, std::cout);
      } else {
        lowbit::cmd_train_student(config, teacher, std::cout);
      }
    } else if (*eval) {
      lowbit::cmd_eval(ckpt, overrides, out, std::cout);
    } else if (*hist) {
      lowbit::cmd_report_hist(ckpt, out, std::cout);
    } else if (*exp) {
      lowbit::cmd_export_packed(ckpt, out, std::cout);
    } else if (*bench) {
      lowbit::cmd_bench(lowbit::parse_shapes(shapes), repeats, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
