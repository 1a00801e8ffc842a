#include "lowbit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lowbit {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kPackedVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("unexpected end of file");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 24)) throw std::runtime_error("corrupt file: string too long");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("unexpected end of file");
  return s;
}

void check_magic(std::istream& in, const char* magic, std::uint32_t version,
                 const std::string& path) {
  char buf[4] = {};
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(path + ": not a " + std::string(magic, 4) + " file");
  }
  const auto v = get<std::uint32_t>(in);
  if (v != version) throw std::runtime_error(path + ": unsupported format version " + std::to_string(v));
}

void write_tensor(std::ostream& out, const Parameter& p) {
  put_string(out, p.name);
  put<std::uint8_t>(out, 2);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
  put<std::uint8_t>(out, kDtypeF64);
  out.write(reinterpret_cast<const char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
}

void read_tensor_into(std::istream& in, Seq2Seq& model) {
  const std::string name = get_string(in);
  const auto ndim = get<std::uint8_t>(in);
  if (ndim != 2) throw std::runtime_error("tensor " + name + ": expected 2 dimensions");
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  if (get<std::uint8_t>(in) != kDtypeF64) throw std::runtime_error("tensor " + name + ": bad dtype");
  Parameter* p = model.find_tensor(name);
  if (p == nullptr) throw std::runtime_error("checkpoint tensor " + name + " not in model");
  if (static_cast<std::uint64_t>(p->value.rows()) != rows ||
      static_cast<std::uint64_t>(p->value.cols()) != cols) {
    throw std::runtime_error("tensor " + name + ": shape does not match the config");
  }
  in.read(reinterpret_cast<char*>(p->value.data()),
          static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  if (!in) throw std::runtime_error("unexpected end of file in tensor " + name);
  p->touch();
}

void write_acts(std::ostream& out, Seq2Seq& model) {
  const auto acts = model.act_quantizers();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(acts.size()));
  for (const ActQuantizer* a : acts) {
    put_string(out, a->name());
    put<std::uint8_t>(out, a->kind() ? static_cast<std::uint8_t>(*a->kind()) + 1 : 0);
    put<double>(out, a->alpha().value(0, 0));
    put<double>(out, a->threshold());
    put<std::uint8_t>(out, a->initialized() ? 1 : 0);
  }
}

void read_acts(std::istream& in, Seq2Seq& model) {
  const auto n = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = get_string(in);
    const auto kind = get<std::uint8_t>(in);
    const auto alpha = get<double>(in);
    const auto threshold = get<double>(in);
    const bool initialized = get<std::uint8_t>(in) != 0;
    ActQuantizer* a = model.find_act(name);
    if (a == nullptr) throw std::runtime_error("activation site " + name + " not in model");
    const std::uint8_t expect = a->kind() ? static_cast<std::uint8_t>(*a->kind()) + 1 : 0;
    if (kind != expect) throw std::runtime_error("activation site " + name + ": scheme mismatch");
    a->set_state(alpha, threshold, initialized);
  }
}

std::ofstream open_out(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return in;
}

RunConfig config_from_text(const std::string& text) {
  std::istringstream in(text);
  RunConfig c = parse_config(in);
  c.validate();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, Seq2Seq& model, const RunConfig& config) {
  std::ofstream out = open_out(path);
  out.write("LBCK", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, serialize_config(config));
  const auto tensors = model.tensors();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Parameter* p : tensors) write_tensor(out, *p);
  write_acts(out, model);
  if (!out) throw std::runtime_error("write failed: " + path);
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in = open_in(path);
  check_magic(in, "LBCK", kCheckpointVersion, path);
  LoadedModel m;
  m.config = config_from_text(get_string(in));
  m.model = std::make_unique<Seq2Seq>(m.config.model, m.config.seed);
  const auto n = get<std::uint32_t>(in);
  if (n != m.model->tensors().size()) throw std::runtime_error(path + ": tensor count mismatch");
  for (std::uint32_t i = 0; i < n; ++i) read_tensor_into(in, *m.model);
  read_acts(in, *m.model);
  m.model->requantize();
  return m;
}

ExportStats export_packed(const std::string& path, Seq2Seq& model, const RunConfig& config) {
  model.requantize();
  std::vector<WeightQuantizer*> packed;
  for (WeightQuantizer* w : model.quantized_matrices()) {
    if (w->packed() != nullptr) packed.push_back(w);
  }
  if (packed.empty()) {
    throw std::invalid_argument("model has no ternary or binary matrices to pack (bits " +
                                bits_string(config.model) + ")");
  }
  ExportStats stats;
  {
    std::ofstream out = open_out(path);
    out.write("LBPK", 4);
    put<std::uint32_t>(out, kPackedVersion);
    put_string(out, serialize_config(config));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(packed.size()));
    for (const WeightQuantizer* w : packed) {
      put_string(out, w->parameter().name);
      put<std::uint8_t>(out, static_cast<std::uint8_t>(*w->kind()));
      const auto before = out.tellp();
      write_packed(out, *w->packed());
      stats.packed_bytes += static_cast<std::size_t>(out.tellp() - before);
      stats.fp32_bytes += static_cast<std::size_t>(w->packed()->rows * w->packed()->cols) * 4;
    }
    std::vector<const Parameter*> rest;
    for (const Parameter* p : model.tensors()) {
      const bool is_packed = std::any_of(packed.begin(), packed.end(), [p](const WeightQuantizer* w) {
        return &w->parameter() == p;
      });
      if (!is_packed) rest.push_back(p);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(rest.size()));
    for (const Parameter* p : rest) write_tensor(out, *p);
    write_acts(out, model);
    if (!out) throw std::runtime_error("write failed: " + path);
  }
  stats.matrices = packed.size();
  stats.file_bytes = static_cast<std::size_t>(std::filesystem::file_size(path));
  stats.ratio = static_cast<double>(stats.fp32_bytes) / static_cast<double>(stats.packed_bytes);
  return stats;
}

LoadedModel load_packed(const std::string& path) {
  std::ifstream in = open_in(path);
  check_magic(in, "LBPK", kPackedVersion, path);
  LoadedModel m;
  m.config = config_from_text(get_string(in));
  m.model = std::make_unique<Seq2Seq>(m.config.model, m.config.seed);
  const auto count = get<std::uint32_t>(in);
  auto quantizers = m.model->weight_quantizers();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(in);
    const auto kind = static_cast<QuantKind>(get<std::uint8_t>(in));
    const PackedMatrix pm = read_packed(in);
    auto it = std::find_if(quantizers.begin(), quantizers.end(),
                           [&](const WeightQuantizer* w) { return w->parameter().name == name; });
    if (it == quantizers.end()) throw std::runtime_error("packed matrix " + name + " not in model");
    if ((*it)->kind() != kind) throw std::runtime_error("packed matrix " + name + ": scheme mismatch");
    (*it)->freeze(pm, kind);
  }
  const auto n = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) read_tensor_into(in, *m.model);
  read_acts(in, *m.model);
  m.model->requantize();
  return m;
}

}  // namespace lowbit
