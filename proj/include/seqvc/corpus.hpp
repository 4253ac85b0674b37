#pragma once

// Synthetic parallel speech corpora over a toy phoneme inventory, the
// per-utterance feature file format, and log-mel extraction from PCM audio.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/tensor.hpp"

namespace seqvc {

// 12 phonemes (ids 0..11) plus silence (id 12).
inline constexpr std::size_t kPhonemes = 12;
inline constexpr int kSilence = 12;
inline constexpr std::size_t kInventorySize = 13;

// Spectral template of one symbol: a sum of two Gaussian bumps over bins.
struct SymbolTemplate {
  double center[2] = {0.0, 0.0};
  double width[2] = {1.0, 1.0};
  double height[2] = {0.0, 0.0};
  int base_duration = 4;  // frames at duration rate 1
};

struct Inventory {
  std::size_t feat_dim = 20;
  std::vector<SymbolTemplate> symbols;  // kInventorySize entries

  // Noise-free template value at (possibly fractional) bin f.
  double template_value(int symbol, double f) const;
};

Inventory make_inventory(std::size_t feat_dim, std::uint64_t seed);

struct SpeakerProfile {
  std::string id;
  double duration_rate = 1.0;
  std::vector<double> band_gain;  // feat_dim entries, all > 0
  double shift = 0.0;             // template shift in bins
  double noise = 0.1;
  std::uint64_t seed = 0;
};

void validate(const SpeakerProfile& p, std::size_t feat_dim);
void to_json(nlohmann::json& j, const SpeakerProfile& p);
void from_json(const nlohmann::json& j, SpeakerProfile& p);

// Random profile; `seed` fixes every field.
SpeakerProfile make_speaker(const std::string& id, std::size_t feat_dim, std::uint64_t seed);
// A profile near `base` (small perturbation of rate, gains, shift).
SpeakerProfile make_similar_speaker(const std::string& id, const SpeakerProfile& base, std::uint64_t seed);

inline constexpr double kFeatureFloor = -4.0;

struct Rendered {
  Tensor features;         // [frames x feat_dim]
  std::vector<int> labels; // emitting symbol per frame
};

// Frame = floor + gain[f] * template(s, f - shift) + noise * N(0, 1), with
// round(rate * base_duration(s)) frames (at least 1) per symbol.
Rendered render_utterance(std::span<const int> symbols, const SpeakerProfile& profile, const Inventory& inventory,
                          std::uint64_t noise_seed);

enum class Split { train, validation, evaluation };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Utterance {
  std::string id;
  std::string speaker;
  Split split = Split::train;
  std::vector<int> symbols;
  std::vector<int> labels;
  std::string path;  // feature file, relative to the corpus directory
  Tensor features;
};

struct CorpusSpec {
  std::string name = "corpus";
  std::size_t feat_dim = 20;
  std::size_t train = 50;
  std::size_t validation = 5;
  std::size_t evaluation = 5;
  // Parallel: every speaker renders the same utterance ids. Otherwise each
  // speaker gets its own symbol sequences.
  bool parallel = true;
  std::size_t min_symbols = 5;
  std::size_t max_symbols = 20;
  std::uint64_t seed = 1;
  std::uint64_t inventory_seed = 7;
  std::vector<SpeakerProfile> speakers;
};

struct Corpus {
  std::string name;
  std::size_t feat_dim = 0;
  bool parallel = true;
  std::uint64_t inventory_seed = 0;
  std::vector<SpeakerProfile> speakers;
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> select(const std::string& speaker, Split split) const;
  const Utterance* find(const std::string& speaker, const std::string& id) const;
};

// Feature values are rounded to float, matching what the files store.
Corpus generate_corpus(const CorpusSpec& spec);

// Writes manifest.json and one feature file per utterance.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);
nlohmann::json manifest_json(const Corpus& corpus);

// Flat binary: "SQVCFEAT", u32 version, u32 rows, u32 cols, f32 LE row-major.
void write_features(const std::filesystem::path& path, const Tensor& features);
Tensor read_features(const std::filesystem::path& path);

// Write to a sibling temp file, then rename over `path`.
void atomic_write(const std::filesystem::path& path, std::span<const char> bytes);
std::vector<char> read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Audio

struct MelConfig {
  std::size_t n_fft = 1024;
  std::size_t hop = 256;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double floor = 1e-10;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// [n_mels x (n_fft/2 + 1)] triangular filters with unit peaks.
std::vector<std::vector<double>> mel_filterbank(double rate, const MelConfig& cfg);
// Center frequency of each mel filter in Hz.
std::vector<double> mel_centers(const MelConfig& cfg);

// Log-magnitude mel spectrogram, [1 + N / hop x n_mels].
Tensor extract_mel(std::span<const double> samples, double rate, const MelConfig& cfg = {});

struct Wav {
  std::uint32_t rate = 16000;
  std::vector<double> samples;  // in [-1, 1)
};
// 16-bit PCM mono only.
Wav read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Wav& wav);

}  // namespace seqvc
