#include "lowbit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace lowbit {

void RunConfig::validate() const {
  model.validate();
  task.validate(model.max_seq_len);
  if (task.vocab_size > model.vocab_size) {
    throw std::invalid_argument("task.vocab_size exceeds model.vocab_size");
  }
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (train_size < 1 || eval_size < 1 || log_eval_size < 0) {
    throw std::invalid_argument("train_size and eval_size must be positive");
  }
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be non-negative");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (!(kd.temperature > 0.0)) throw std::invalid_argument("kd.temperature must be positive");
  if (kd.lambda_kd < 0.0 || kd.lambda_h < 0.0) {
    throw std::invalid_argument("distillation weights must be non-negative");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw std::invalid_argument("config: bad value '" + text + "' for " + key);
  }
  return v;
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_number<T>("", v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename S, typename T>
Field nested_field(S RunConfig::*outer, T S::*member) {
  return {[outer, member](RunConfig& c, const std::string& v) {
            (c.*outer).*member = parse_number<T>("", v);
          },
          [outer, member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double((c.*outer).*member);
            else return std::to_string((c.*outer).*member);
          }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.vocab_size", nested_field(&RunConfig::model, &ModelConfig::vocab_size)},
      {"model.d_model", nested_field(&RunConfig::model, &ModelConfig::d_model)},
      {"model.n_heads", nested_field(&RunConfig::model, &ModelConfig::n_heads)},
      {"model.n_enc_layers", nested_field(&RunConfig::model, &ModelConfig::n_enc_layers)},
      {"model.n_dec_layers", nested_field(&RunConfig::model, &ModelConfig::n_dec_layers)},
      {"model.d_ffn", nested_field(&RunConfig::model, &ModelConfig::d_ffn)},
      {"model.max_seq_len", nested_field(&RunConfig::model, &ModelConfig::max_seq_len)},
      {"model.dropout", nested_field(&RunConfig::model, &ModelConfig::dropout)},
      {"bits",
       {[](RunConfig& c, const std::string& v) { parse_bits(v, c.model); },
        [](const RunConfig& c) { return bits_string(c.model); }}},
      {"ablation",
       {[](RunConfig& c, const std::string& v) { c.model.ablation = parse_ablation(v); },
        [](const RunConfig& c) { return std::string(to_string(c.model.ablation)); }}},
      {"task.kind",
       {[](RunConfig& c, const std::string& v) { c.task.kind = parse_task_kind(v); },
        [](const RunConfig& c) { return std::string(to_string(c.task.kind)); }}},
      {"task.vocab_size", nested_field(&RunConfig::task, &TaskSpec::vocab_size)},
      {"task.min_len", nested_field(&RunConfig::task, &TaskSpec::min_len)},
      {"task.max_len", nested_field(&RunConfig::task, &TaskSpec::max_len)},
      {"task.seed", nested_field(&RunConfig::task, &TaskSpec::seed)},
      {"epochs", number_field(&RunConfig::epochs)},
      {"batch_size", number_field(&RunConfig::batch_size)},
      {"lr", number_field(&RunConfig::lr)},
      {"kd.lambda_kd", nested_field(&RunConfig::kd, &DistillOptions::lambda_kd)},
      {"kd.lambda_h", nested_field(&RunConfig::kd, &DistillOptions::lambda_h)},
      {"kd.temperature", nested_field(&RunConfig::kd, &DistillOptions::temperature)},
      {"train_size", number_field(&RunConfig::train_size)},
      {"eval_size", number_field(&RunConfig::eval_size)},
      {"log_eval_size", number_field(&RunConfig::log_eval_size)},
      {"warmup_steps", number_field(&RunConfig::warmup_steps)},
      {"clip_norm", number_field(&RunConfig::clip_norm)},
      {"seed", number_field(&RunConfig::seed)},
      {"output_dir",
       {[](RunConfig& c, const std::string& v) { c.output_dir = v; },
        [](const RunConfig& c) { return c.output_dir; }}},
  };
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return field;
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, field] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  try {
    f.set(config, trim(value));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config: bad value '" + value + "' for " + key + ": " + e.what());
  }
}

std::string get_config_value(const RunConfig& config, const std::string& key) {
  return find_field(key).get(config);
}

RunConfig parse_config(std::istream& in) {
  RunConfig config;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(config, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  return parse_config(in);
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(config) + "\n";
  return out;
}

std::uint64_t eval_seed(const TaskSpec& task) { return task.seed ^ 0x9e3779b97f4a7c15ULL; }

}  // namespace lowbit
