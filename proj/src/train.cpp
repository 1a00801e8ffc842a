#include "lowbit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lowbit {

std::string format_epoch(const EpochLog& e) {
  std::ostringstream out;
  out << "epoch=" << e.epoch << " step=" << e.step << " lr=" << e.lr << " loss=" << e.loss
      << " ce=" << e.ce << " kd=" << e.kd << " hidden=" << e.hidden
      << " token_accuracy=" << e.token_accuracy << " sequence_accuracy=" << e.sequence_accuracy
      << " avg_gen_length=" << e.avg_gen_length << " seconds=" << e.seconds;
  return out.str();
}

double learning_rate(const RunConfig& config, long step, long total_steps) {
  const double peak = config.lr;
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return peak * static_cast<double>(step + 1) / config.warmup_steps;
  }
  const long decay = std::max<long>(1, total_steps - config.warmup_steps);
  const double t = std::clamp(static_cast<double>(step - config.warmup_steps) / decay, 0.0, 1.0);
  return peak * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * t)));
}

Dataset training_set(const RunConfig& config) { return generate(config.task, config.train_size); }

Dataset held_out_set(const RunConfig& config) {
  TaskSpec spec = config.task;
  spec.seed = eval_seed(config.task);
  return generate(spec, config.eval_size);
}

namespace {

using Batch = std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>>;

// One pass: returns the loss and its parts for the given batch.
using StepFn = std::function<DistillTerms(const Batch&, Tape&, double& loss)>;

TrainOutcome run(Seq2Seq& model, const RunConfig& config, const StepFn& step_fn,
                 const EpochCallback& on_epoch) {
  config.validate();
  const Dataset train = training_set(config);
  const Dataset held_out = held_out_set(config);
  const Dataset probe(held_out.begin(),
                      held_out.begin() + std::min<std::size_t>(held_out.size(),
                                                               static_cast<std::size_t>(config.log_eval_size)));

  std::vector<Parameter*> params = model.parameters();
  Adam opt(params, {.lr = config.lr});
  std::mt19937_64 order_rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  const long per_epoch = static_cast<long>((train.size() + config.batch_size - 1) / config.batch_size);
  const long total = per_epoch * config.epochs;
  long step = 0;
  TrainOutcome outcome;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochLog log;
    log.epoch = epoch;
    for (long b = 0; b < per_epoch; ++b) {
      Batch batch;
      const std::size_t lo = static_cast<std::size_t>(b) * config.batch_size;
      const std::size_t hi = std::min(train.size(), lo + config.batch_size);
      for (std::size_t i = lo; i < hi; ++i) {
        batch.first.push_back(train[order[i]].src);
        batch.second.push_back(train[order[i]].tgt);
      }
      opt.options().lr = learning_rate(config, step, total);
      Tape tape;
      double loss = 0;
      const DistillTerms terms = step_fn(batch, tape, loss);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged: loss is " + std::to_string(loss) +
                                 " at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step));
      }
      clip_grad_norm(params, config.clip_norm);
      opt.step();
      opt.zero_grad();
      ++step;
      log.loss += loss;
      log.ce += terms.ce;
      log.kd += terms.kd;
      log.hidden += terms.hidden;
    }
    const double n = static_cast<double>(per_epoch);
    log.loss /= n;
    log.ce /= n;
    log.kd /= n;
    log.hidden /= n;
    log.step = step;
    log.lr = opt.options().lr;
    if (!probe.empty()) {
      const EvalReport r = evaluate(model, probe);
      log.token_accuracy = r.token_accuracy;
      log.sequence_accuracy = r.sequence_accuracy;
      log.avg_gen_length = r.avg_gen_length;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    outcome.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  outcome.report = evaluate(model, held_out);
  return outcome;
}

}  // namespace

TrainOutcome train_teacher(Seq2Seq& model, const RunConfig& config, const EpochCallback& on_epoch) {
  ForwardOptions opt;
  opt.training = true;
  std::mt19937_64 dropout_rng(config.seed + 1);
  opt.rng = &dropout_rng;
  return run(
      model, config,
      [&](const Batch& batch, Tape& tape, double& loss) {
        const ForwardResult r = model.forward(tape, batch.first, batch.second, opt);
        const Var l = cross_entropy(r.logits, r.targets);
        tape.backward(l);
        loss = l.value()(0, 0);
        DistillTerms terms;
        terms.ce = loss;
        return terms;
      },
      on_epoch);
}

TrainOutcome train_student(Seq2Seq& student, Seq2Seq& teacher, const RunConfig& config,
                           const EpochCallback& on_epoch) {
  ForwardOptions opt;
  opt.training = true;
  std::mt19937_64 dropout_rng(config.seed + 1);
  opt.rng = &dropout_rng;
  const bool need_teacher = config.kd.lambda_kd != 0.0 || config.kd.lambda_h != 0.0;
  return run(
      student, config,
      [&](const Batch& batch, Tape& tape, double& loss) {
        const ForwardResult r = student.forward(tape, batch.first, batch.second, opt);
        TeacherOutputs t;
        if (need_teacher) t = teacher_outputs(teacher, batch.first, batch.second);
        DistillTerms terms;
        const Var l = distill_loss(tape, r, t, r.targets, config.kd, &terms);
        tape.backward(l);
        loss = l.value()(0, 0);
        return terms;
      },
      on_epoch);
}

}  // namespace lowbit
