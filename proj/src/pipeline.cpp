#include "seqvc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "seqvc/errors.hpp"
#include "seqvc/train.hpp"

namespace seqvc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

void write_text(const fs::path& path, const std::string& text) { atomic_write(path, std::span<const char>(text)); }

std::string map_stem(const std::string& id, std::size_t layer, std::size_t head) {
  return id + ".l" + std::to_string(layer) + ".h" + std::to_string(head);
}

}  // namespace

std::vector<ConvertedUtterance> convert_split(const Seq2SeqModel& model, const Corpus& vc, Split split,
                                              const std::string& source) {
  if (model.config.task != Task::vc) contract("convert: checkpoint is a " + to_string(model.config.task) + " model");
  std::vector<ConvertedUtterance> out;
  NoGradGuard no_grad;
  for (const auto* u : vc.select(source, split)) {
    const DecodeResult r = decode_autoregressive(model, encode(model, u->features));
    out.push_back({u->id, r.features, r.attention, r.stopped_by});
  }
  if (out.empty()) contract("convert: no '" + source + "' utterances in split " + to_string(split));
  return out;
}

void write_attention_pgm(const fs::path& path, const Tensor& attn) {
  const std::size_t h = attn.rows();
  const std::size_t w = attn.cols();
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double a : attn.data()) {
    const double v = std::clamp(a, 0.0, 1.0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
  }
  write_text(path, bytes);
}

void write_attention_csv(const fs::path& path, const Tensor& attn) {
  std::string text;
  char buf[32];
  const auto d = attn.data();
  for (std::size_t t = 0; t < attn.rows(); ++t) {
    for (std::size_t n = 0; n < attn.cols(); ++n) {
      std::snprintf(buf, sizeof buf, "%.9g", d[t * attn.cols() + n]);
      if (n) text += ',';
      text += buf;
    }
    text += '\n';
  }
  write_text(path, text);
}

void write_converted(const std::vector<ConvertedUtterance>& utts, Split split, const fs::path& dir) {
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "attention");
  json list = json::array();
  for (const auto& u : utts) {
    const std::string feat = "features/" + u.id + ".feat";
    write_features(dir / feat, u.features);
    json maps = json::array();
    for (std::size_t l = 0; l < u.attention.size(); ++l) {
      for (std::size_t h = 0; h < u.attention[l].size(); ++h) {
        const std::string stem = "attention/" + map_stem(u.id, l, h);
        write_attention_pgm(dir / (stem + ".pgm"), u.attention[l][h]);
        write_attention_csv(dir / (stem + ".csv"), u.attention[l][h]);
        maps.push_back(stem);
      }
    }
    list.push_back({{"id", u.id},
                    {"features", feat},
                    {"frames", u.features.rows()},
                    {"stopped_by", to_string(u.stopped_by)},
                    {"attention", maps}});
  }
  const json manifest{{"split", to_string(split)}, {"utterances", list}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<ConvertedUtterance> read_converted(const fs::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    contract((dir / "manifest.json").string() + ": " + e.what());
  }
  std::vector<ConvertedUtterance> out;
  try {
    for (const auto& u : manifest.at("utterances")) {
      ConvertedUtterance c;
      c.id = u.at("id").get<std::string>();
      c.features = read_features(dir / u.at("features").get<std::string>());
      const auto stop = u.at("stopped_by").get<std::string>();
      if (stop != "threshold" && stop != "max_length") contract("converted manifest: bad stopped_by '" + stop + "'");
      c.stopped_by = stop == "threshold" ? StopReason::threshold : StopReason::max_length;
      out.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    contract((dir / "manifest.json").string() + ": " + e.what());
  }
  return out;
}

namespace {

double pooled_rate(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  std::size_t edits = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    edits += error_rate(hyps[i], refs[i]).distance;
    total += refs[i].size();
  }
  if (total == 0) return edits == 0 ? 0.0 : 1.0;
  return static_cast<double>(edits) / static_cast<double>(total);
}

std::vector<std::vector<int>> recognize(const Seq2SeqModel& recognizer, const std::vector<Tensor>& speech) {
  if (recognizer.config.task != Task::asr) contract("symbol error rate: recognizer must be an asr model");
  NoGradGuard no_grad;
  std::vector<std::vector<int>> out;
  for (const auto& s : speech) out.push_back(decode_text(recognizer, encode(recognizer, s)));
  return out;
}

}  // namespace

double symbol_error_rate(const Seq2SeqModel& recognizer, const std::vector<Tensor>& speech,
                         const std::vector<std::vector<int>>& references) {
  if (speech.size() != references.size()) contract("symbol error rate: speech and reference counts differ");
  return pooled_rate(recognize(recognizer, speech), references);
}

ClusterResult encoder_clusters(const Seq2SeqModel& model, const std::vector<Example>& examples, std::size_t top_k) {
  NoGradGuard no_grad;
  std::vector<Tensor> hidden;
  std::vector<int> labels;
  for (const auto& e : examples) {
    if (e.input_labels.empty()) contract("encoder clusters: example " + e.id + " has no frame labels");
    const Tensor h = encode(model, e.input);
    const auto l = hidden_step_labels(e.input_labels, h.rows());
    labels.insert(labels.end(), l.begin(), l.end());
    hidden.push_back(h);
  }
  if (hidden.empty()) contract("encoder clusters: no examples");
  return cluster_score(concat_rows(hidden), labels, top_k);
}

json evaluate_conversion(const Corpus& vc, const std::vector<ConvertedUtterance>& converted,
                         const EvalOptions& o) {
  if (converted.empty()) contract("evaluate: no converted utterances");
  std::vector<Tensor> conv_speech, target_speech;
  std::vector<std::vector<int>> truth;
  json rows = json::array();
  double mcd_sum = 0.0;
  std::size_t by_threshold = 0;
  for (const auto& c : converted) {
    const auto* t = vc.find(kTargetSpeaker, c.id);
    if (!t) contract("evaluate: no target utterance for " + c.id);
    if (t->split != o.split) contract("evaluate: " + c.id + " is not in split " + to_string(o.split));
    const double d = mcd(c.features, t->features, o.mcd);
    mcd_sum += d;
    by_threshold += c.stopped_by == StopReason::threshold;
    conv_speech.push_back(c.features);
    target_speech.push_back(t->features);
    truth.push_back(t->symbols);
    rows.push_back({{"id", c.id}, {"mcd_db", d}, {"stopped_by", to_string(c.stopped_by)}});
  }
  const double n = static_cast<double>(converted.size());
  json report{{"split", to_string(o.split)},
              {"utterances", converted.size()},
              {"mcd_db", mcd_sum / n},
              {"stop_by_threshold", static_cast<double>(by_threshold) / n},
              {"symbol_error_rate", nullptr},
              {"recognizer_error_rate", nullptr},
              {"diagonality", nullptr},
              {"silhouette", nullptr}};

  if (o.recognizer) {
    const auto heard = recognize(*o.recognizer, target_speech);
    report["symbol_error_rate"] = pooled_rate(recognize(*o.recognizer, conv_speech), heard);
    report["recognizer_error_rate"] = pooled_rate(heard, truth);
  }
  if (o.model) {
    const auto examples = vc_examples(vc, o.split);
    report["diagonality"] = teacher_forced_metrics(*o.model, examples, o.loss).at("diagonality");
    report["silhouette"] = encoder_clusters(*o.model, examples).silhouette;
  }
  report["per_utterance"] = rows;
  return report;
}

}  // namespace seqvc
