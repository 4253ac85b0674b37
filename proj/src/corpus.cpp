#include "seqvc/corpus.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "seqvc/errors.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

constexpr char kFeatMagic[8] = {'S', 'Q', 'V', 'C', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatVersion = 1;

template <typename T>
void put(std::vector<char>& out, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<char>& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > in.size()) contract(what + ": truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string utterance_id(std::size_t index) {
  std::string digits = std::to_string(index);
  if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
  return "u" + digits;
}

std::vector<int> random_sequence(Rng& rng, std::size_t min_len, std::size_t max_len) {
  const std::size_t len = min_len + rng.index(max_len - min_len + 1);
  std::vector<int> s(len, kSilence);
  int prev = kSilence;
  for (std::size_t i = 1; i + 1 < len; ++i) {
    int p;
    do {
      p = static_cast<int>(rng.index(kPhonemes));
    } while (p == prev);
    s[i] = prev = p;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Inventory and speakers

double Inventory::template_value(int symbol, double f) const {
  const auto& t = symbols.at(static_cast<std::size_t>(symbol));
  double v = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double z = (f - t.center[k]) / t.width[k];
    v += t.height[k] * std::exp(-0.5 * z * z);
  }
  return v;
}

Inventory make_inventory(std::size_t feat_dim, std::uint64_t seed) {
  if (feat_dim < 8) contract("inventory: feat_dim must be >= 8");
  Rng rng(derive_seed(seed, "inventory"));
  Inventory inv;
  inv.feat_dim = feat_dim;
  const double F = static_cast<double>(feat_dim);
  // Always satisfiable for F >= 8; equals 3 bins from F = 12 up.
  const double separation = std::min(3.0, F / 4.0);
  for (std::size_t p = 0; p < kPhonemes; ++p) {
    SymbolTemplate t;
    // First bump spread over the band so phonemes stay distinguishable.
    t.center[0] = (static_cast<double>(p) + 0.5) * F / static_cast<double>(kPhonemes) + rng.uniform(-0.3, 0.3);
    do {
      t.center[1] = rng.uniform(1.0, F - 2.0);
    } while (std::abs(t.center[1] - t.center[0]) < separation);
    t.width[0] = rng.uniform(1.0, 2.0);
    t.width[1] = rng.uniform(1.5, 3.0);
    t.height[0] = rng.uniform(3.0, 4.5);
    t.height[1] = rng.uniform(1.5, 3.0);
    t.base_duration = 2 + static_cast<int>(rng.index(4));
    inv.symbols.push_back(t);
  }
  SymbolTemplate silence;
  silence.height[0] = silence.height[1] = 0.0;
  silence.base_duration = 4;
  inv.symbols.push_back(silence);
  return inv;
}

void validate(const SpeakerProfile& p, std::size_t feat_dim) {
  if (!(p.duration_rate > 0.0)) contract("speaker '" + p.id + "': duration rate must be positive");
  if (p.band_gain.size() != feat_dim) {
    contract("speaker '" + p.id + "': " + std::to_string(p.band_gain.size()) + " band gains for " +
             std::to_string(feat_dim) + " bins");
  }
  for (double g : p.band_gain) {
    if (!(g > 0.0)) contract("speaker '" + p.id + "': band gains must be positive");
  }
  if (!(p.noise >= 0.0)) contract("speaker '" + p.id + "': noise level must be non-negative");
}

void to_json(json& j, const SpeakerProfile& p) {
  j = json{{"id", p.id},         {"duration_rate", p.duration_rate}, {"band_gain", p.band_gain},
           {"shift", p.shift},   {"noise", p.noise},                 {"seed", p.seed}};
}

void from_json(const json& j, SpeakerProfile& p) {
  try {
    j.at("id").get_to(p.id);
    j.at("duration_rate").get_to(p.duration_rate);
    j.at("band_gain").get_to(p.band_gain);
    j.at("shift").get_to(p.shift);
    j.at("noise").get_to(p.noise);
    j.at("seed").get_to(p.seed);
  } catch (const json::exception& e) {
    contract(std::string("speaker profile: ") + e.what());
  }
}

SpeakerProfile make_speaker(const std::string& id, std::size_t feat_dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "speaker"));
  SpeakerProfile p;
  p.id = id;
  p.seed = seed;
  p.duration_rate = rng.uniform(0.75, 1.35);
  const double a1 = rng.uniform(0.1, 0.35), a2 = rng.uniform(0.1, 0.35);
  const double ph1 = rng.uniform(0.0, 2.0 * std::numbers::pi), ph2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t f = 0; f < feat_dim; ++f) {
    const double x = 2.0 * std::numbers::pi * static_cast<double>(f) / static_cast<double>(feat_dim);
    p.band_gain.push_back(std::exp(a1 * std::sin(x + ph1) + a2 * std::sin(2.0 * x + ph2)));
  }
  p.shift = rng.uniform(-1.5, 1.5);
  p.noise = rng.uniform(0.05, 0.12);
  return p;
}

SpeakerProfile make_similar_speaker(const std::string& id, const SpeakerProfile& base, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "similar-speaker"));
  SpeakerProfile p = base;
  p.id = id;
  p.seed = seed;
  p.duration_rate = base.duration_rate * std::exp(rng.normal(0.0, 0.05));
  for (double& g : p.band_gain) g *= std::exp(rng.normal(0.0, 0.05));
  p.shift = base.shift + rng.normal(0.0, 0.2);
  return p;
}

Rendered render_utterance(std::span<const int> symbols, const SpeakerProfile& profile, const Inventory& inventory,
                          std::uint64_t noise_seed) {
  if (symbols.empty()) contract("render_utterance: empty symbol sequence");
  validate(profile, inventory.feat_dim);
  const std::size_t F = inventory.feat_dim;
  Rng rng(noise_seed);
  std::vector<double> values;
  Rendered r;
  for (int s : symbols) {
    if (s < 0 || static_cast<std::size_t>(s) >= inventory.symbols.size()) {
      contract("render_utterance: symbol " + std::to_string(s) + " outside the inventory");
    }
    const double base = inventory.symbols[static_cast<std::size_t>(s)].base_duration;
    const auto frames = std::max<long>(1, std::lround(profile.duration_rate * base));
    std::vector<double> frame(F);
    for (std::size_t f = 0; f < F; ++f) {
      frame[f] = kFeatureFloor +
                 profile.band_gain[f] * inventory.template_value(s, static_cast<double>(f) - profile.shift);
    }
    for (long i = 0; i < frames; ++i) {
      for (std::size_t f = 0; f < F; ++f) values.push_back(frame[f] + profile.noise * rng.normal());
      r.labels.push_back(s);
    }
  }
  r.features = Tensor({r.labels.size(), F}, std::move(values));
  return r;
}

// ---------------------------------------------------------------------------
// Corpus

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::evaluation: return "evaluation";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "evaluation") return Split::evaluation;
  contract("unknown split '" + s + "'");
}

std::vector<const Utterance*> Corpus::select(const std::string& speaker, Split split) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances) {
    if (u.speaker == speaker && u.split == split) out.push_back(&u);
  }
  return out;
}

const Utterance* Corpus::find(const std::string& speaker, const std::string& id) const {
  for (const auto& u : utterances) {
    if (u.speaker == speaker && u.id == id) return &u;
  }
  return nullptr;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.train + spec.validation + spec.evaluation == 0) contract("generate_corpus: corpus sizes are all zero");
  if (spec.min_symbols < 3 || spec.max_symbols < spec.min_symbols) {
    contract("generate_corpus: need 3 <= min_symbols <= max_symbols");
  }
  Corpus c;
  c.name = spec.name;
  c.feat_dim = spec.feat_dim;
  c.parallel = spec.parallel;
  c.inventory_seed = spec.inventory_seed;
  c.speakers = spec.speakers;
  if (c.speakers.empty()) c.speakers.push_back(make_speaker("spk0", spec.feat_dim, derive_seed(spec.seed, "spk", 0)));
  std::set<std::string> ids;
  for (const auto& s : c.speakers) {
    validate(s, spec.feat_dim);
    if (!ids.insert(s.id).second) contract("generate_corpus: duplicate speaker id '" + s.id + "'");
  }
  const Inventory inv = make_inventory(spec.feat_dim, spec.inventory_seed);

  const std::size_t total = spec.train + spec.validation + spec.evaluation;
  auto split_of = [&](std::size_t i) {
    if (i < spec.train) return Split::train;
    return i < spec.train + spec.validation ? Split::validation : Split::evaluation;
  };
  std::vector<std::vector<int>> shared;
  if (spec.parallel) {
    for (std::size_t i = 0; i < total; ++i) {
      Rng rng(derive_seed(spec.seed, "symbols", i));
      shared.push_back(random_sequence(rng, spec.min_symbols, spec.max_symbols));
    }
  }
  for (const auto& spk : c.speakers) {
    for (std::size_t i = 0; i < total; ++i) {
      Utterance u;
      u.speaker = spk.id;
      u.split = split_of(i);
      if (spec.parallel) {
        u.id = utterance_id(i);
        u.symbols = shared[i];
      } else {
        u.id = spk.id + "_" + utterance_id(i);
        Rng rng(derive_seed(spec.seed, "symbols:" + spk.id, i));
        u.symbols = random_sequence(rng, spec.min_symbols, spec.max_symbols);
      }
      auto r = render_utterance(u.symbols, spk, inv, derive_seed(spec.seed, "noise:" + spk.id, i));
      for (double& v : r.features.mutable_data()) v = static_cast<double>(static_cast<float>(v));
      u.features = r.features;
      u.labels = std::move(r.labels);
      u.path = "feats/" + spk.id + "/" + u.id + ".feat";
      c.utterances.push_back(std::move(u));
    }
  }
  return c;
}

json manifest_json(const Corpus& corpus) {
  json utts = json::array();
  for (const auto& u : corpus.utterances) {
    utts.push_back({{"id", u.id},
                    {"speaker", u.speaker},
                    {"split", to_string(u.split)},
                    {"symbols", u.symbols},
                    {"labels", u.labels},
                    {"frames", u.features.rows()},
                    {"path", u.path}});
  }
  return json{{"name", corpus.name},
              {"feat_dim", corpus.feat_dim},
              {"parallel", corpus.parallel},
              {"inventory_seed", corpus.inventory_seed},
              {"inventory_size", kInventorySize},
              {"speakers", corpus.speakers},
              {"utterances", utts}};
}

void write_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& u : corpus.utterances) {
    fs::create_directories((dir / u.path).parent_path());
    write_features(dir / u.path, u.features);
  }
  const std::string text = manifest_json(corpus).dump(1);
  atomic_write(dir / "manifest.json", std::span<const char>(text.data(), text.size()));
}

Corpus load_corpus(const fs::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  json m;
  try {
    m = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    contract("manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  Corpus c;
  try {
    c.name = m.at("name").get<std::string>();
    c.feat_dim = m.at("feat_dim").get<std::size_t>();
    c.parallel = m.at("parallel").get<bool>();
    c.inventory_seed = m.at("inventory_seed").get<std::uint64_t>();
    c.speakers = m.at("speakers").get<std::vector<SpeakerProfile>>();
    std::map<std::string, Split> split_of_id;
    for (const auto& ju : m.at("utterances")) {
      Utterance u;
      u.id = ju.at("id").get<std::string>();
      u.speaker = ju.at("speaker").get<std::string>();
      u.split = parse_split(ju.at("split").get<std::string>());
      u.symbols = ju.at("symbols").get<std::vector<int>>();
      u.labels = ju.at("labels").get<std::vector<int>>();
      u.path = ju.at("path").get<std::string>();
      auto [it, fresh] = split_of_id.emplace(u.id, u.split);
      if (!fresh && it->second != u.split) contract("manifest: utterance '" + u.id + "' appears in two splits");
      u.features = read_features(dir / u.path);
      if (u.features.cols() != c.feat_dim) contract("manifest: " + u.path + " has the wrong feature dimension");
      if (u.labels.size() != u.features.rows()) contract("manifest: labels of '" + u.id + "' do not match frames");
      for (int s : u.symbols) {
        if (s < 0 || static_cast<std::size_t>(s) >= kInventorySize) contract("manifest: symbol id out of range");
      }
      c.utterances.push_back(std::move(u));
    }
  } catch (const json::exception& e) {
    contract("manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  return c;
}

void atomic_write(const fs::path& path, std::span<const char> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) contract("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) contract("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path);
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) contract("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_features(const fs::path& path, const Tensor& features) {
  if (features.rank() != 2) contract("write_features: expected a matrix");
  std::vector<char> out(kFeatMagic, kFeatMagic + 8);
  put<std::uint32_t>(out, kFeatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(features.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(features.cols()));
  for (double v : features.data()) put<float>(out, static_cast<float>(v));
  atomic_write(path, out);
}

Tensor read_features(const fs::path& path) {
  const auto in = read_file(path);
  const std::string what = "feature file " + path.string();
  if (in.size() < 8 || std::memcmp(in.data(), kFeatMagic, 8) != 0) contract(what + ": bad magic");
  std::size_t pos = 8;
  const auto version = get<std::uint32_t>(in, pos, what);
  if (version != kFeatVersion) contract(what + ": unsupported version " + std::to_string(version));
  const auto rows = get<std::uint32_t>(in, pos, what);
  const auto cols = get<std::uint32_t>(in, pos, what);
  const std::size_t n = std::size_t{rows} * cols;
  if (in.size() - pos != n * sizeof(float)) contract(what + ": payload length mismatch");
  std::vector<double> v(n);
  for (auto& x : v) x = get<float>(in, pos, what);
  return Tensor({rows, cols}, std::move(v));
}

// ---------------------------------------------------------------------------
// Audio

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_centers(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> c(cfg.n_mels);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    c[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) / static_cast<double>(cfg.n_mels + 1));
  }
  return c;
}

std::vector<std::vector<double>> mel_filterbank(double rate, const MelConfig& cfg) {
  if (cfg.n_mels == 0 || cfg.n_fft < 2 || !(cfg.fmax > cfg.fmin) || cfg.fmax > rate / 2.0) {
    contract("mel_filterbank: invalid configuration");
  }
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  const std::size_t bins = cfg.n_fft / 2 + 1;
  std::vector<std::vector<double>> fb(cfg.n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * rate / static_cast<double>(cfg.n_fft);
      double w = 0.0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      fb[m][k] = w;
    }
  }
  return fb;
}

Tensor extract_mel(std::span<const double> samples, double rate, const MelConfig& cfg) {
  if (samples.empty()) contract("extract_mel: empty signal");
  const std::size_t N = samples.size(), n_fft = cfg.n_fft, half = n_fft / 2;
  const std::size_t frames = 1 + N / cfg.hop;
  const auto fb = mel_filterbank(rate, cfg);
  const std::size_t bins = n_fft / 2 + 1;

  // Reflect-padded sample at (possibly out-of-range) index i.
  auto at = [&](long i) {
    if (N == 1) return samples[0];
    const long period = 2 * static_cast<long>(N - 1);
    long k = i % period;
    if (k < 0) k += period;
    if (k >= static_cast<long>(N)) k = period - k;
    return samples[static_cast<std::size_t>(k)];
  };

  std::vector<double> window(n_fft);
  for (std::size_t i = 0; i < n_fft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_fft));
  }
  double* in = fftw_alloc_real(n_fft);
  fftw_complex* spec = fftw_alloc_complex(bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), in, spec, FFTW_ESTIMATE);

  std::vector<double> out(frames * cfg.n_mels);
  std::vector<double> mag(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t * cfg.hop) - static_cast<long>(half);
    for (std::size_t i = 0; i < n_fft; ++i) in[i] = window[i] * at(start + static_cast<long>(i));
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(spec[k][0], spec[k][1]);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb[m][k] * mag[k];
      out[t * cfg.n_mels + m] = std::log(std::max(e, cfg.floor));
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(spec);
  fftw_free(in);
  return Tensor({frames, cfg.n_mels}, std::move(out));
}

Wav read_wav(const fs::path& path) {
  const auto in = read_file(path);
  const std::string what = "wav " + path.string();
  if (in.size() < 12 || std::memcmp(in.data(), "RIFF", 4) != 0 || std::memcmp(in.data() + 8, "WAVE", 4) != 0) {
    contract(what + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  Wav wav;
  while (pos + 8 <= in.size()) {
    const std::string id(in.data() + pos, 4);
    pos += 4;
    const auto size = get<std::uint32_t>(in, pos, what);
    if (pos + size > in.size()) contract(what + ": chunk '" + id + "' overruns the file");
    if (id == "fmt ") {
      std::size_t p = pos;
      const auto format = get<std::uint16_t>(in, p, what);
      const auto channels = get<std::uint16_t>(in, p, what);
      wav.rate = get<std::uint32_t>(in, p, what);
      p += 6;  // byte rate, block align
      const auto bits = get<std::uint16_t>(in, p, what);
      if (format != 1 || channels != 1 || bits != 16) {
        contract(what + ": only 16-bit PCM mono is supported");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) contract(what + ": data chunk before fmt chunk");
      std::size_t p = pos;
      for (std::size_t i = 0; i < size / 2; ++i) wav.samples.push_back(get<std::int16_t>(in, p, what) / 32768.0);
      return wav;
    }
    pos += size + (size & 1);
  }
  contract(what + ": no data chunk");
}

void write_wav(const fs::path& path, const Wav& wav) {
  const auto data_bytes = static_cast<std::uint32_t>(wav.samples.size() * 2);
  std::vector<char> out;
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put<std::uint32_t>(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, 1);
  put<std::uint16_t>(out, 1);
  put<std::uint32_t>(out, wav.rate);
  put<std::uint32_t>(out, wav.rate * 2);
  put<std::uint16_t>(out, 2);
  put<std::uint16_t>(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put<std::uint32_t>(out, data_bytes);
  for (double s : wav.samples) {
    const double c = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    put<std::int16_t>(out, static_cast<std::int16_t>(c));
  }
  atomic_write(path, out);
}

}  // namespace seqvc
