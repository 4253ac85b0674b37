#pragma once

// Run configuration, training examples, and the mini-batch training loop.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/model.hpp"
#include "seqvc/objectives.hpp"
#include "seqvc/optim.hpp"

namespace seqvc {

// Sizes of the three synthetic corpora gen-data writes.
struct DataConfig {
  std::size_t feat_dim = 20;
  std::size_t tts_train = 200;
  std::size_t tts_validation = 10;
  std::size_t asr_speakers = 8;
  std::size_t asr_train = 50;  // per speaker
  std::size_t asr_validation = 5;
  std::size_t vc_train = 50;
  std::size_t vc_validation = 20;
  std::size_t vc_evaluation = 20;
};

struct StageSettings {
  std::size_t steps = 2000;
};

// Stage names: tts_dec, tts_enc, asr_enc, asr_dec, vc, recognizer.
const std::vector<std::string>& stage_names();

struct RunConfig {
  ModelConfig model;  // task and vocab are set per stage
  LossWeights loss;
  OptimizerConfig optimizer;
  DataConfig data;
  std::map<std::string, StageSettings> stages;  // every stage name present
  std::uint64_t seed = 1;
  std::size_t batch_size = 8;
  std::size_t validate_every = 250;
  bool freeze = true;  // false only for negative-control tests
  std::string pretraining = "tts";  // train-vc initialization: none, tts or asr

  RunConfig();
};

void validate(const RunConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Sets the value at a dotted path ("stages.vc.steps=100"). The path must
// already exist; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

// One training pair. Inputs are features or symbols depending on the model
// task; so are targets.
struct Example {
  std::string id;
  Tensor input;
  std::vector<int> input_symbols;
  std::vector<int> input_labels;  // frame labels of `input`, when known
  Tensor target;
  std::vector<int> target_symbols;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> validation;
};

// Zero-pads rows up to a multiple of r.
Tensor pad_to_multiple(const Tensor& x, std::size_t r);

// Teacher-forced objective of one example.
LossReport example_loss(const Seq2SeqModel& model, const Example& ex, const LossWeights& w,
                        const nn::ForwardContext& ctx, DecoderOutput* out = nullptr);

// Mean cross-attention diagonality over the maps the guided loss selects.
double attention_diagonality(const DecoderOutput& out, Architecture arch, const LossWeights& w);

// Teacher-forced loss parts and attention diagonality averaged over examples.
std::map<std::string, double> teacher_forced_metrics(const Seq2SeqModel& model, const std::vector<Example>& examples,
                                                     const LossWeights& w);

struct TraceRow {
  std::size_t step = 0;
  std::string part;
  double value = 0.0;
};

struct ValidationRow {
  std::size_t step = 0;
  std::map<std::string, double> values;
};

struct FreezeAudit {
  std::vector<std::string> prefixes;
  std::size_t steps_checked = 0;
  double max_drift = 0.0;
  bool passed() const { return max_drift == 0.0; }
};

struct FitOptions {
  std::size_t steps = 0;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  LossWeights loss;
  OptimizerConfig optimizer;
  std::vector<std::string> frozen;
  // When false the frozen prefixes are still audited but the optimizer
  // updates them, so the audit must report drift.
  bool enforce_freeze = true;
  std::size_t validate_every = 0;  // 0 = only at the start and the end
  std::optional<OptState> resume;
  // Called after every optimizer step.
  std::function<void(std::size_t step, const Seq2SeqModel&)> on_step;
};

struct FitResult {
  OptState optimizer;
  std::vector<TraceRow> trace;
  std::vector<ValidationRow> validation;
  FreezeAudit audit;
  std::size_t steps_done = 0;
  bool aborted = false;  // non-finite loss or gradient; parameters are the last good ones
  std::string abort_reason;
};

// Batches are length-bucketed runs of `batch_size` examples, visited in a
// seeded random order each epoch. Each step minimizes the mean per-example
// objective under teacher forcing.
FitResult fit(Seq2SeqModel& model, const Dataset& data, const FitOptions& opts);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

}  // namespace seqvc
