#pragma once

// Conversion of a corpus split and the evaluation report built on it.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/corpus.hpp"
#include "seqvc/metrics.hpp"
#include "seqvc/model.hpp"
#include "seqvc/objectives.hpp"
#include "seqvc/pretrain.hpp"

namespace seqvc {

struct ConvertedUtterance {
  std::string id;
  Tensor features;
  std::vector<std::vector<Tensor>> attention;  // empty when read back from disk
  StopReason stopped_by = StopReason::max_length;
};

// encode + decode_autoregressive for every source utterance of `split`.
std::vector<ConvertedUtterance> convert_split(const Seq2SeqModel& model, const Corpus& vc, Split split,
                                              const std::string& source = kSourceSpeaker);

// dir/manifest.json, dir/features/<id>.feat, and one PGM plus one CSV per
// attention map under dir/attention/<id>.l<layer>.h<head>.{pgm,csv}.
void write_converted(const std::vector<ConvertedUtterance>& utts, Split split, const std::filesystem::path& dir);
std::vector<ConvertedUtterance> read_converted(const std::filesystem::path& dir);

// 8-bit grayscale, one row per decoder step, white = weight 1.
void write_attention_pgm(const std::filesystem::path& path, const Tensor& attn);
void write_attention_csv(const std::filesystem::path& path, const Tensor& attn);

// Edits summed over utterances divided by reference symbols summed.
double symbol_error_rate(const Seq2SeqModel& recognizer, const std::vector<Tensor>& speech,
                         const std::vector<std::vector<int>>& references);

// Encoder outputs of every example's input stacked, labelled per hidden step,
// then scored over the `top_k` most frequent labels.
ClusterResult encoder_clusters(const Seq2SeqModel& model, const std::vector<Example>& examples,
                               std::size_t top_k = 5);

struct EvalOptions {
  Split split = Split::evaluation;
  McdConfig mcd;
  LossWeights loss;
  const Seq2SeqModel* model = nullptr;       // diagonality and silhouette
  const Seq2SeqModel* recognizer = nullptr;  // symbol error rate
};

// Report fields: mcd_db, symbol_error_rate (recognizer output on converted
// speech against its output on the real target speech), recognizer_error_rate
// (its output on the real target speech against the true symbols),
// diagonality, silhouette, stop_by_threshold and per-utterance rows. Fields
// whose inputs are absent are null.
nlohmann::json evaluate_conversion(const Corpus& vc, const std::vector<ConvertedUtterance>& converted,
                                   const EvalOptions& options);

}  // namespace seqvc
