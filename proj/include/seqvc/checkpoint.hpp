#pragma once

// Versioned binary checkpoints: model config, parameters as f32, optimizer
// moments as f64 (so a resumed run continues exactly), step and seed.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/model.hpp"
#include "seqvc/optim.hpp"

namespace seqvc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParamTree params;
  OptState optimizer;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::string stage;
};

// Layout: "SQVCCKPT", u32 version, u32 header bytes, header JSON (config,
// shape table, optimizer), then f32 parameters and f64 moments, little-endian,
// in header order.
std::vector<char> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const char> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Header fields plus parameter counts per top-level subtree.
nlohmann::json checkpoint_metadata(const Checkpoint& ckpt);

// Model whose parameters equal the checkpoint's (every path must match).
Seq2SeqModel model_from_checkpoint(const Checkpoint& ckpt);
Checkpoint make_checkpoint(const Seq2SeqModel& model, const OptState& opt, std::uint64_t seed, std::uint64_t step,
                           const std::string& stage);

}  // namespace seqvc
