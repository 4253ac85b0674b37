#include "seqvc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "seqvc/corpus.hpp"
#include "seqvc/errors.hpp"
#include "seqvc/metrics.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

using nlohmann::json;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

// Reads known keys of `j` into fields; unknown keys are errors.
class Reader {
 public:
  Reader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) contract(what_ + ": expected a JSON object");
  }
  template <typename T>
  Reader& get(const char* key, T& field) {
    seen_.push_back(key);
    if (!j_.contains(key)) return *this;
    try {
      j_.at(key).get_to(field);
    } catch (const json::exception&) {
      contract(what_ + ": bad value for '" + key + "'");
    }
    return *this;
  }
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) contract(what_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::vector<std::string> seen_;
};

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"tts_dec", "tts_enc", "asr_enc", "asr_dec", "vc", "recognizer"};
  return names;
}

RunConfig::RunConfig() {
  for (const auto& s : stage_names()) stages[s] = StageSettings{};
}

void validate(const RunConfig& c) {
  validate(c.model);
  validate(c.loss);
  validate(c.optimizer);
  if (c.batch_size == 0) contract("run config: batch_size must be positive");
  if (c.pretraining != "none" && c.pretraining != "tts" && c.pretraining != "asr") {
    contract("run config: pretraining must be none, tts or asr");
  }
  for (const auto& s : stage_names()) {
    if (!c.stages.count(s)) contract("run config: missing stage '" + s + "'");
  }
  for (const auto& [name, st] : c.stages) {
    if (std::find(stage_names().begin(), stage_names().end(), name) == stage_names().end()) {
      contract("run config: unknown stage '" + name + "'");
    }
  }
  const auto& d = c.data;
  if (d.feat_dim != c.model.feat_dim) contract("run config: data.feat_dim must equal model.feat_dim");
  if (d.tts_train == 0 || d.asr_speakers == 0 || d.asr_train == 0 || d.vc_train == 0) {
    contract("run config: every corpus needs training utterances");
  }
}

void to_json(json& j, const RunConfig& c) {
  json stages = json::object();
  for (const auto& [name, s] : c.stages) stages[name] = {{"steps", s.steps}};
  const auto& d = c.data;
  j = {{"model", c.model},
       {"loss", c.loss},
       {"optimizer", c.optimizer},
       {"data",
        {{"feat_dim", d.feat_dim},
         {"tts_train", d.tts_train},
         {"tts_validation", d.tts_validation},
         {"asr_speakers", d.asr_speakers},
         {"asr_train", d.asr_train},
         {"asr_validation", d.asr_validation},
         {"vc_train", d.vc_train},
         {"vc_validation", d.vc_validation},
         {"vc_evaluation", d.vc_evaluation}}},
       {"stages", stages},
       {"seed", c.seed},
       {"batch_size", c.batch_size},
       {"validate_every", c.validate_every},
       {"freeze", c.freeze},
       {"pretraining", c.pretraining}};
}

void from_json(const json& j, RunConfig& c) {
  Reader r(j, "run config");
  r.get("model", c.model).get("loss", c.loss).get("optimizer", c.optimizer);
  r.get("seed", c.seed).get("batch_size", c.batch_size).get("validate_every", c.validate_every);
  r.get("freeze", c.freeze).get("pretraining", c.pretraining);
  json data = json::object(), stages = json::object();
  r.get("data", data).get("stages", stages);
  r.finish();

  Reader rd(data, "run config data");
  auto& d = c.data;
  rd.get("feat_dim", d.feat_dim).get("tts_train", d.tts_train).get("tts_validation", d.tts_validation);
  rd.get("asr_speakers", d.asr_speakers).get("asr_train", d.asr_train).get("asr_validation", d.asr_validation);
  rd.get("vc_train", d.vc_train).get("vc_validation", d.vc_validation).get("vc_evaluation", d.vc_evaluation);
  rd.finish();

  if (!stages.is_object()) contract("run config: stages must be an object");
  for (const auto& [name, s] : stages.items()) {
    if (std::find(stage_names().begin(), stage_names().end(), name) == stage_names().end()) {
      contract("run config: unknown stage '" + name + "'");
    }
    Reader rs(s, "run config stage " + name);
    rs.get("steps", c.stages[name].steps);
    rs.finish();
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) contract("override '" + assignment + "' is not of the form path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (!node->is_object() || !node->contains(key)) contract("override: no config entry at '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    begin = dot + 1;
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json doc = RunConfig{};
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) contract("cannot read config " + path);
    json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) contract("config " + path + " is not valid JSON");
    if (!file.is_object()) contract("config " + path + " must hold a JSON object");
    // Unknown keys survive the merge and are rejected by from_json.
    doc.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c;
  from_json(doc, c);
  validate(c);
  return c;
}

Tensor pad_to_multiple(const Tensor& x, std::size_t r) {
  const std::size_t n = (x.rows() + r - 1) / r * r;
  if (n == x.rows()) return x;
  std::vector<double> v(x.data().begin(), x.data().end());
  v.resize(n * x.cols(), 0.0);
  return Tensor({n, x.cols()}, std::move(v));
}

LossReport example_loss(const Seq2SeqModel& model, const Example& ex, const LossWeights& w,
                        const nn::ForwardContext& ctx, DecoderOutput* out) {
  const auto& c = model.config;
  const Tensor h = c.text_input() ? encode(model, ex.input_symbols, ctx) : encode(model, ex.input, ctx);
  DecoderOutput dec;
  LossReport rep;
  if (c.text_output()) {
    dec = decode_text_teacher_forced(model, h, ex.target_symbols, ctx);
    rep = text_objective(dec, ex.target_symbols, c, w);
  } else {
    const Tensor target = pad_to_multiple(ex.target, c.reduction);
    dec = decode_teacher_forced(model, h, target, ex.target.rows(), ctx);
    rep = speech_objective(dec, target, ex.target.rows(), c, w);
  }
  if (out) *out = std::move(dec);
  return rep;
}

double attention_diagonality(const DecoderOutput& out, Architecture arch, const LossWeights& w) {
  auto maps = guided_maps(out.attention, arch, w);
  if (maps.empty()) {
    for (std::size_t l = 0; l < out.attention.size(); ++l) {
      for (std::size_t hd = 0; hd < out.attention[l].size(); ++hd) maps.emplace_back(l, hd);
    }
  }
  double s = 0.0;
  for (auto [l, hd] : maps) s += diagonality(out.attention[l][hd], w.ga_sigma);
  return s / static_cast<double>(maps.size());
}

std::map<std::string, double> teacher_forced_metrics(const Seq2SeqModel& model, const std::vector<Example>& examples,
                                                     const LossWeights& w) {
  if (examples.empty()) contract("teacher_forced_metrics: no examples");
  NoGradGuard no_grad;
  std::map<std::string, double> sums;
  for (const auto& ex : examples) {
    DecoderOutput out;
    const auto rep = example_loss(model, ex, w, {}, &out);
    for (const auto& [k, v] : rep.parts) sums[k] += v;
    sums["diagonality"] += attention_diagonality(out, model.config.architecture, w);
  }
  for (auto& [k, v] : sums) v /= static_cast<double>(examples.size());
  return sums;
}

FitResult fit(Seq2SeqModel& model, const Dataset& data, const FitOptions& o) {
  validate(o.loss);
  if (o.batch_size == 0) contract("fit: batch_size must be positive");
  if (o.steps > 0 && data.train.empty()) contract("fit: empty training set");
  FitResult r;
  for (const auto& prefix : o.frozen) {
    if (model.params.paths_with_prefix(prefix).empty()) contract("fit: frozen prefix '" + prefix + "' matches no parameter");
  }
  r.optimizer = o.resume ? *o.resume
                         : make_opt_state(model.params, o.optimizer,
                                          o.enforce_freeze ? o.frozen : std::vector<std::string>{});
  for (auto& [path, t] : model.params.entries()) {
    Tensor(t).set_requires_grad(r.optimizer.moments.count(path) != 0);
  }

  ParamTree frozen_ref;
  for (const auto& prefix : o.frozen) {
    for (const auto& path : model.params.paths_with_prefix(prefix)) {
      if (!frozen_ref.contains(path)) frozen_ref.add(path, model.params.at(path).clone());
    }
  }
  r.audit.prefixes = o.frozen;

  // Length buckets: sort by input length, then cut into consecutive batches.
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  auto length = [&](std::size_t i) {
    const auto& ex = data.train[i];
    return ex.input.defined() ? ex.input.rows() : ex.input_symbols.size();
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return length(a) < length(b); });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += o.batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + o.batch_size)));
  }
  std::vector<std::size_t> visit(batches.size());
  std::iota(visit.begin(), visit.end(), 0);
  Rng shuffle_rng(derive_seed(o.seed, "shuffle"));
  std::size_t cursor = 0;

  auto run_validation = [&](std::size_t step) {
    if (data.validation.empty()) return;
    r.validation.push_back({step, teacher_forced_metrics(model, data.validation, o.loss)});
  };
  run_validation(0);

  for (std::size_t step = 1; step <= o.steps; ++step) {
    if (cursor == 0) {
      for (std::size_t i = visit.size(); i > 1; --i) std::swap(visit[i - 1], visit[shuffle_rng.index(i)]);
    }
    const auto& batch = batches[visit[cursor]];
    cursor = (cursor + 1) % batches.size();

    Rng dropout_rng(derive_seed(o.seed, "dropout", step));
    const nn::ForwardContext ctx{true, &dropout_rng};
    model.params.zero_grad();
    std::map<std::string, double> parts;
    double loss_value = 0.0;
    bool finite = true;
    try {
      TapeScope scope;
      Tensor total;
      for (std::size_t i : batch) {
        const auto rep = example_loss(model, data.train[i], o.loss, ctx);
        for (const auto& [k, v] : rep.parts) parts[k] += v / static_cast<double>(batch.size());
        total = total.defined() ? add(total, rep.total) : rep.total;
      }
      total = scale(total, 1.0 / static_cast<double>(batch.size()));
      loss_value = total.item();
      finite = std::isfinite(loss_value);
      if (finite) scope.tape().backward(total);
    } catch (const NumericError&) {
      // The tensor engine refuses to propagate NaN or inf out of an op.
      finite = false;
    }
    if (!finite) {
      r.aborted = true;
      r.abort_reason = "non-finite loss at step " + std::to_string(step);
      break;
    }

    const ParamTree last_good = model.params.clone();
    try {
      optimizer_step(model.params, r.optimizer);
    } catch (const NumericError& e) {
      r.aborted = true;
      r.abort_reason = std::string(e.what()) + " at step " + std::to_string(step);
      break;
    }
    for (const auto& [path, t] : model.params.entries()) {
      if (!all_finite(t.data())) {
        model.params.copy_from(last_good, "");
        r.aborted = true;
        r.abort_reason = "non-finite parameter " + path + " after step " + std::to_string(step);
        break;
      }
    }
    if (r.aborted) break;

    for (const auto& [k, v] : parts) r.trace.push_back({step, k, v});
    for (const auto& [path, ref] : frozen_ref.entries()) {
      const auto now = model.params.at(path).data();
      const auto before = ref.data();
      for (std::size_t i = 0; i < now.size(); ++i) r.audit.max_drift = std::max(r.audit.max_drift, std::abs(now[i] - before[i]));
    }
    ++r.audit.steps_checked;
    r.steps_done = step;
    if (o.on_step) o.on_step(step, model);
    if (o.validate_every > 0 && step % o.validate_every == 0 && step != o.steps) run_validation(step);
  }
  if (r.steps_done > 0 && !r.aborted) run_validation(r.steps_done);
  for (auto& [path, t] : model.params.entries()) Tensor(t).set_requires_grad(true);
  return r;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::string text = "step,part,value\n";
  char buf[64];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof buf, "%.17g", row.value);
    text += std::to_string(row.step) + "," + row.part + "," + buf + "\n";
  }
  atomic_write(path, std::span<const char>(text.data(), text.size()));
}

}  // namespace seqvc
