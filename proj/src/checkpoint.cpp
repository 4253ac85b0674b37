#include "seqvc/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "seqvc/corpus.hpp"
#include "seqvc/errors.hpp"

namespace seqvc {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

constexpr char kMagic[8] = {'S', 'Q', 'V', 'C', 'C', 'K', 'P', 'T'};

[[noreturn]] void bad(const std::string& msg) { throw ContractError("checkpoint: " + msg); }

template <typename T>
void put(std::vector<char>& out, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const char> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) bad("truncated header");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

json header(const Checkpoint& c) {
  json params = json::array();
  for (const auto& [path, t] : c.params.entries()) params.push_back({{"path", path}, {"shape", t.shape()}});
  json moments = json::array();
  for (const auto& [path, mo] : c.optimizer.moments) moments.push_back(path);
  return {{"config", c.config},
          {"stage", c.stage},
          {"seed", c.seed},
          {"step", c.step},
          {"params", params},
          {"optimizer", {{"config", c.optimizer.config}, {"step", c.optimizer.step}, {"moments", moments}}}};
}

}  // namespace

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt) {
  for (const auto& [path, mo] : ckpt.optimizer.moments) {
    if (!ckpt.params.contains(path) || ckpt.params.at(path).numel() != mo.m.size() || mo.v.size() != mo.m.size()) {
      bad("optimizer moments do not match parameter " + path);
    }
  }
  const std::string head = header(ckpt).dump();
  std::vector<char> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(head.size()));
  out.insert(out.end(), head.begin(), head.end());
  for (const auto& [path, t] : ckpt.params.entries()) {
    for (double v : t.data()) put<float>(out, static_cast<float>(v));
  }
  for (const auto& [path, mo] : ckpt.optimizer.moments) {
    for (double v : mo.m) put<double>(out, v);
    for (double v : mo.v) put<double>(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const char> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) bad("bad magic");
  std::size_t pos = 8;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    bad("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto head_len = get<std::uint32_t>(bytes, pos);
  if (pos + head_len > bytes.size()) bad("truncated header");
  json head;
  try {
    head = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + head_len));
  } catch (const json::exception& e) {
    bad(std::string("malformed header: ") + e.what());
  }
  pos += head_len;

  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> table;
  std::vector<std::string> moment_paths;
  try {
    c.config = head.at("config").get<ModelConfig>();
    c.stage = head.at("stage").get<std::string>();
    c.seed = head.at("seed").get<std::uint64_t>();
    c.step = head.at("step").get<std::uint64_t>();
    for (const auto& p : head.at("params")) table.emplace_back(p.at("path").get<std::string>(), p.at("shape").get<Shape>());
    const auto& opt = head.at("optimizer");
    c.optimizer.config = opt.at("config").get<OptimizerConfig>();
    c.optimizer.step = opt.at("step").get<std::uint64_t>();
    moment_paths = opt.at("moments").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    bad(std::string("malformed header: ") + e.what());
  }

  std::size_t expected = 0;
  std::map<std::string, std::size_t> numel;
  for (const auto& [path, shape] : table) {
    numel[path] = shape_numel(shape);
    expected += numel[path] * sizeof(float);
  }
  for (const auto& path : moment_paths) {
    auto it = numel.find(path);
    if (it == numel.end()) bad("optimizer moments for unknown parameter " + path);
    expected += 2 * it->second * sizeof(double);
  }
  if (bytes.size() - pos != expected) {
    bad("payload length mismatch: expected " + std::to_string(expected) + " bytes, found " +
        std::to_string(bytes.size() - pos));
  }
  for (const auto& [path, shape] : table) {
    std::vector<double> values(numel[path]);
    for (double& v : values) v = get<float>(bytes, pos);
    c.params.add(path, Tensor(shape, std::move(values)));
  }
  for (const auto& path : moment_paths) {
    Moments mo;
    mo.m.resize(numel[path]);
    mo.v.resize(numel[path]);
    for (double& v : mo.m) v = get<double>(bytes, pos);
    for (double& v : mo.v) v = get<double>(bytes, pos);
    c.optimizer.moments[path] = std::move(mo);
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  atomic_write(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) bad("no such file " + path.string());
  const auto bytes = read_file(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const ContractError& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
}

json checkpoint_metadata(const Checkpoint& ckpt) {
  json j = header(ckpt);
  j.erase("params");
  j["optimizer"].erase("moments");
  j["format_version"] = kCheckpointVersion;
  j["parameters"] = ckpt.params.parameter_count();
  j["tensors"] = ckpt.params.size();
  std::map<std::string, std::size_t> per_subtree;
  for (const auto& [path, t] : ckpt.params.entries()) per_subtree[path.substr(0, path.find('.'))] += t.numel();
  j["subtrees"] = per_subtree;
  j["trainable_tensors"] = ckpt.optimizer.moments.size();
  return j;
}

Seq2SeqModel model_from_checkpoint(const Checkpoint& ckpt) {
  Seq2SeqModel m = build_model(ckpt.config, ckpt.seed);
  if (m.params.size() != ckpt.params.size()) {
    bad("parameter table has " + std::to_string(ckpt.params.size()) + " tensors but the config builds " +
        std::to_string(m.params.size()));
  }
  m.params.copy_from(ckpt.params, "");
  return m;
}

Checkpoint make_checkpoint(const Seq2SeqModel& model, const OptState& opt, std::uint64_t seed, std::uint64_t step,
                           const std::string& stage) {
  Checkpoint c;
  c.config = model.config;
  c.params = model.params.clone();
  c.optimizer = opt;
  c.seed = seed;
  c.step = step;
  c.stage = stage;
  return c;
}

}  // namespace seqvc
