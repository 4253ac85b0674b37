#include "seqvc/pretrain.hpp"

#include "seqvc/errors.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

void require_nonempty(const std::vector<Example>& train, Stage s) {
  if (train.empty()) contract("stage " + to_string(s) + ": empty training corpus");
}

Dataset dataset(std::vector<Example> (*make)(const Corpus&, Split), const Corpus& c, Stage s) {
  Dataset d{make(c, Split::train), make(c, Split::validation)};
  require_nonempty(d.train, s);
  return d;
}

Seq2SeqModel fresh_model(const RunConfig& run, Stage s) {
  return build_model(stage_model_config(run.model, s), derive_seed(run.seed, "stage." + to_string(s)));
}

}  // namespace

std::string to_string(Stage s) {
  switch (s) {
    case Stage::tts_dec:
      return "tts_dec";
    case Stage::tts_enc:
      return "tts_enc";
    case Stage::asr_enc:
      return "asr_enc";
    case Stage::asr_dec:
      return "asr_dec";
    case Stage::vc:
      return "vc";
    case Stage::recognizer:
      return "recognizer";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::tts_dec, Stage::tts_enc, Stage::asr_enc, Stage::asr_dec, Stage::vc, Stage::recognizer}) {
    if (to_string(st) == s) return st;
  }
  contract("unknown stage '" + s + "'");
}

StagePlan default_plan(Stage s, const RunConfig& run) {
  StagePlan p;
  p.stage = s;
  p.steps = run.stages.at(to_string(s)).steps;
  if (s == Stage::tts_enc) p.frozen = {"decoder."};
  if (s == Stage::asr_dec) p.frozen = {"encoder."};
  return p;
}

void validate(const StagePlan& plan, const Seq2SeqModel& model) {
  std::vector<std::string> required;
  if (plan.stage == Stage::tts_enc) required = {"decoder."};
  if (plan.stage == Stage::asr_dec) required = {"encoder."};
  if (plan.frozen != required) {
    contract("stage " + to_string(plan.stage) + ": frozen prefixes must be exactly " +
             (required.empty() ? std::string("none") : required.front()));
  }
  for (const auto& p : plan.frozen) {
    if (model.params.paths_with_prefix(p).empty()) contract("stage plan: frozen prefix '" + p + "' is not in the model");
  }
}

ModelConfig stage_model_config(const ModelConfig& base, Stage s) {
  ModelConfig c = base;
  c.vocab = 0;
  c.task = Task::vc;
  if (s == Stage::tts_dec) c.task = Task::tts;
  if (s == Stage::asr_enc || s == Stage::recognizer) c.task = Task::asr;
  if (c.task != Task::vc) c.vocab = kTextVocab;
  validate(c);
  return c;
}

CorpusSpec tts_corpus_spec(const RunConfig& run) {
  const auto& d = run.data;
  CorpusSpec s;
  s.name = "tts";
  s.feat_dim = d.feat_dim;
  s.train = d.tts_train;
  s.validation = d.tts_validation;
  s.evaluation = 0;
  s.seed = derive_seed(run.seed, "corpus.tts");
  s.inventory_seed = derive_seed(run.seed, "inventory");
  const auto target = make_speaker(kTargetSpeaker, d.feat_dim, derive_seed(run.seed, "speaker.tgt"));
  s.speakers = {make_similar_speaker("tts", target, derive_seed(run.seed, "speaker.tts"))};
  return s;
}

CorpusSpec asr_corpus_spec(const RunConfig& run) {
  const auto& d = run.data;
  CorpusSpec s;
  s.name = "asr";
  s.feat_dim = d.feat_dim;
  s.parallel = false;
  s.train = d.asr_train;
  s.validation = d.asr_validation;
  s.evaluation = 0;
  s.seed = derive_seed(run.seed, "corpus.asr");
  s.inventory_seed = derive_seed(run.seed, "inventory");
  for (std::size_t i = 0; i < d.asr_speakers; ++i) {
    const std::string id = "asr" + std::to_string(i);
    s.speakers.push_back(make_speaker(id, d.feat_dim, derive_seed(run.seed, "speaker.asr", i)));
  }
  return s;
}

CorpusSpec vc_corpus_spec(const RunConfig& run) {
  const auto& d = run.data;
  CorpusSpec s;
  s.name = "vc";
  s.feat_dim = d.feat_dim;
  s.train = d.vc_train;
  s.validation = d.vc_validation;
  s.evaluation = d.vc_evaluation;
  s.seed = derive_seed(run.seed, "corpus.vc");
  s.inventory_seed = derive_seed(run.seed, "inventory");
  s.speakers = {make_speaker(kSourceSpeaker, d.feat_dim, derive_seed(run.seed, "speaker.src")),
                make_speaker(kTargetSpeaker, d.feat_dim, derive_seed(run.seed, "speaker.tgt"))};
  return s;
}

std::vector<Example> tts_examples(const Corpus& c, Split split) {
  std::vector<Example> out;
  for (const auto& u : c.utterances) {
    if (u.split != split) continue;
    Example e;
    e.id = u.speaker + "/" + u.id;
    e.input_symbols = u.symbols;
    e.target = u.features;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> autoencoder_examples(const Corpus& c, Split split) {
  std::vector<Example> out;
  for (const auto& u : c.utterances) {
    if (u.split != split) continue;
    Example e;
    e.id = u.speaker + "/" + u.id;
    e.input = u.features;
    e.input_labels = u.labels;
    e.target = u.features;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> asr_examples(const Corpus& c, Split split) {
  std::vector<Example> out;
  for (const auto& u : c.utterances) {
    if (u.split != split) continue;
    Example e;
    e.id = u.speaker + "/" + u.id;
    e.input = u.features;
    e.input_labels = u.labels;
    e.target_symbols = u.symbols;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> vc_examples(const Corpus& c, Split split, const std::string& source, const std::string& target) {
  if (!c.parallel) contract("vc_examples: corpus '" + c.name + "' is not parallel");
  std::vector<Example> out;
  for (const auto* s : c.select(source, split)) {
    const auto* t = c.find(target, s->id);
    if (!t) contract("vc_examples: no target utterance for " + s->id);
    Example e;
    e.id = s->id;
    e.input = s->features;
    e.input_labels = s->labels;
    e.target = t->features;
    e.target_symbols = t->symbols;
    out.push_back(std::move(e));
  }
  return out;
}

FitOptions stage_fit_options(const StagePlan& plan, const RunConfig& run) {
  FitOptions o;
  o.steps = plan.steps;
  o.batch_size = run.batch_size;
  o.seed = derive_seed(run.seed, "fit." + to_string(plan.stage));
  o.loss = run.loss;
  o.optimizer = run.optimizer;
  o.frozen = plan.frozen;
  o.enforce_freeze = run.freeze;
  o.validate_every = run.validate_every;
  return o;
}

StageResult run_stage(Seq2SeqModel& model, const Dataset& data, const StagePlan& plan, const RunConfig& run) {
  validate(plan, model);
  const auto opts = stage_fit_options(plan, run);
  StageResult r;
  r.fit = fit(model, data, opts);
  if (run.freeze && !r.fit.audit.passed()) {
    throw NumericError("stage " + to_string(plan.stage) + ": frozen parameters drifted");
  }
  r.checkpoint = make_checkpoint(model, r.fit.optimizer, opts.seed, r.fit.steps_done, to_string(plan.stage));
  return r;
}

StageResult run_tts_decoder_stage(const Corpus& d_tts, const RunConfig& run) {
  const Stage s = Stage::tts_dec;
  const Dataset data = dataset(&tts_examples, d_tts, s);
  Seq2SeqModel model = fresh_model(run, s);
  return run_stage(model, data, default_plan(s, run), run);
}

StageResult run_tts_encoder_stage(const Corpus& d_tts, const Checkpoint& dec_ckpt, const RunConfig& run) {
  const Stage s = Stage::tts_enc;
  const Dataset data = dataset(&autoencoder_examples, d_tts, s);
  Seq2SeqModel model = fresh_model(run, s);
  model.params.copy_from(dec_ckpt.params, "decoder.");
  const bool init_ok = bit_equal(model.params, dec_ckpt.params, "decoder.");
  auto r = run_stage(model, data, default_plan(s, run), run);
  r.init_audit_passed = init_ok;
  return r;
}

StageResult run_asr_encoder_stage(const Corpus& d_asr, const RunConfig& run) {
  const Stage s = Stage::asr_enc;
  const Dataset data = dataset(&asr_examples, d_asr, s);
  Seq2SeqModel model = fresh_model(run, s);
  return run_stage(model, data, default_plan(s, run), run);
}

StageResult run_asr_decoder_stage(const Corpus& d_tts, const Checkpoint& asr_enc_ckpt, const Checkpoint& tts_dec_ckpt,
                                  const RunConfig& run) {
  const Stage s = Stage::asr_dec;
  const Dataset data = dataset(&autoencoder_examples, d_tts, s);
  Seq2SeqModel model = fresh_model(run, s);
  model.params.copy_from(asr_enc_ckpt.params, "encoder.");
  model.params.copy_from(tts_dec_ckpt.params, "decoder.");
  const bool init_ok =
      bit_equal(model.params, tts_dec_ckpt.params, "decoder.") && bit_equal(model.params, asr_enc_ckpt.params, "encoder.");
  auto r = run_stage(model, data, default_plan(s, run), run);
  r.init_audit_passed = init_ok;
  return r;
}

StageResult run_recognizer_stage(const Corpus& d_asr, const RunConfig& run) {
  const Stage s = Stage::recognizer;
  const Dataset data = dataset(&asr_examples, d_asr, s);
  Seq2SeqModel model = fresh_model(run, s);
  return run_stage(model, data, default_plan(s, run), run);
}

Seq2SeqModel transfer_init(const ModelConfig& vc_config, const Checkpoint& enc_ckpt, const Checkpoint& dec_ckpt,
                           std::uint64_t seed) {
  Seq2SeqModel m = build_model(vc_config, seed);
  m.params.copy_from(enc_ckpt.params, "encoder.");
  m.params.copy_from(dec_ckpt.params, "decoder.");
  return m;
}

StageResult run_vc_stage(const Corpus& vc, Seq2SeqModel init, const RunConfig& run) {
  const Stage s = Stage::vc;
  Dataset data{vc_examples(vc, Split::train), vc_examples(vc, Split::validation)};
  require_nonempty(data.train, s);
  return run_stage(init, data, default_plan(s, run), run);
}

}  // namespace seqvc
