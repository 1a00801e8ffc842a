#pragma once

// Teacher training and distillation of quantized students.

#include <functional>
#include <vector>

#include "lowbit/config.hpp"
#include "lowbit/model.hpp"
#include "lowbit/tasks.hpp"

namespace lowbit {

struct EpochLog {
  int epoch = 0;
  long step = 0;
  double lr = 0;
  double loss = 0;
  double ce = 0;
  double kd = 0;
  double hidden = 0;
  double token_accuracy = 0;
  double sequence_accuracy = 0;
  double avg_gen_length = 0;
  double seconds = 0;
};

std::string format_epoch(const EpochLog& log);

struct TrainOutcome {
  std::vector<EpochLog> epochs;
  EvalReport report;  // full held-out evaluation after the last epoch
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Linear warmup followed by cosine decay to a tenth of the peak rate.
double learning_rate(const RunConfig& config, long step, long total_steps);

// Training and held-out sets implied by the config.
Dataset training_set(const RunConfig& config);
Dataset held_out_set(const RunConfig& config);

TrainOutcome train_teacher(Seq2Seq& model, const RunConfig& config,
                           const EpochCallback& on_epoch = {});

// Distills `teacher` into `student` (usually built by init_student_from_teacher).
TrainOutcome train_student(Seq2Seq& student, Seq2Seq& teacher, const RunConfig& config,
                           const EpochCallback& on_epoch = {});

}  // namespace lowbit
