#include "seqvc/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "seqvc/checkpoint.hpp"
#include "seqvc/errors.hpp"
#include "seqvc/grad_suite.hpp"
#include "seqvc/pipeline.hpp"
#include "seqvc/pretrain.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

// SEQVC_LOG=quiet silences progress lines; anything else keeps them.
bool verbose() {
  const char* level = std::getenv("SEQVC_LOG");
  return !(level && std::string(level) == "quiet");
}

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--config", c.config, "run configuration JSON");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--seed", c.seed, "root seed (overrides the config)");
  cmd->add_option("--set", c.sets, "dotted.path=value override (repeatable)");
}

RunConfig run_config(const Common& c) {
  if (!c.config.empty() && !fs::exists(c.config)) contract("config file not found: " + c.config);
  auto overrides = c.sets;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  return load_run_config(c.config, overrides);
}

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  atomic_write(path, std::span<const char>(text));
}

json fit_summary(const std::string& stage, const StageResult& r) {
  json validation = json::array();
  for (const auto& v : r.fit.validation) validation.push_back({{"step", v.step}, {"values", v.values}});
  return {{"stage", stage},
          {"steps", r.fit.steps_done},
          {"aborted", r.fit.aborted},
          {"abort_reason", r.fit.abort_reason},
          {"init_audit_passed", r.init_audit_passed},
          {"freeze_audit",
           {{"prefixes", r.fit.audit.prefixes},
            {"steps_checked", r.fit.audit.steps_checked},
            {"max_drift", r.fit.audit.max_drift},
            {"passed", r.fit.audit.passed()}}},
          {"validation", validation}};
}

class Session {
 public:
  Session(std::ostream& out, std::ostream& err) : out_(out), err_(err), verbose_(verbose()) {}

  void log(const std::string& line) const {
    if (verbose_) err_ << line << "\n";
  }

  // Checkpoint, trace and summary; a stage that aborted on a non-finite value
  // still leaves its last good parameters behind.
  void save_stage(const fs::path& dir, const std::string& name, const StageResult& r) {
    fs::create_directories(dir);
    save_checkpoint(r.checkpoint, dir / (name + ".ckpt"));
    write_trace_csv((dir / (name + ".trace.csv")).string(), r.fit.trace);
    write_json(dir / (name + ".json"), fit_summary(name, r));
    if (r.fit.aborted) throw NumericError("stage " + name + " aborted: " + r.fit.abort_reason);
    std::string line = "stage " + name + ": " + std::to_string(r.fit.steps_done) + " steps";
    if (!r.fit.validation.empty()) {
      const auto& last = r.fit.validation.back().values;
      for (const char* k : {"l1", "ce", "diagonality"}) {
        if (last.count(k)) line += ", " + std::string(k) + " " + std::to_string(last.at(k));
      }
    }
    log(line);
  }

  int gen_data(const Common& c) {
    const RunConfig run = run_config(c);
    const fs::path dir = c.out;
    fs::create_directories(dir);
    write_json(dir / "config.json", run);
    for (const auto& [name, spec] : {std::pair{"tts", tts_corpus_spec(run)}, std::pair{"asr", asr_corpus_spec(run)},
                                     std::pair{"vc", vc_corpus_spec(run)}}) {
      const Corpus corpus = generate_corpus(spec);
      write_corpus(corpus, dir / name);
      log(std::string("corpus ") + name + ": " + std::to_string(corpus.utterances.size()) + " utterances");
    }
    return 0;
  }

  int pretrain_tts(const Common& c, const std::string& data) {
    const RunConfig run = run_config(c);
    const Corpus tts = load_corpus(fs::path(data) / "tts");
    const auto a1 = run_tts_decoder_stage(tts, run);
    save_stage(c.out, "tts_dec", a1);
    const auto a2 = run_tts_encoder_stage(tts, a1.checkpoint, run);
    save_stage(c.out, "tts_enc", a2);
    return 0;
  }

  int pretrain_asr(const Common& c, const std::string& data, std::string tts_dec) {
    const RunConfig run = run_config(c);
    if (tts_dec.empty()) tts_dec = (fs::path(c.out) / "tts_dec.ckpt").string();
    const Checkpoint a1 = load_checkpoint(tts_dec);
    const Corpus asr = load_corpus(fs::path(data) / "asr");
    const Corpus tts = load_corpus(fs::path(data) / "tts");
    const auto b1 = run_asr_encoder_stage(asr, run);
    save_stage(c.out, "asr_enc", b1);
    const auto b2 = run_asr_decoder_stage(tts, b1.checkpoint, a1, run);
    save_stage(c.out, "asr_dec", b2);
    save_stage(c.out, "recognizer", run_recognizer_stage(asr, run));
    return 0;
  }

  int train_vc(const Common& c, const std::string& data, std::string pretrained) {
    const RunConfig run = run_config(c);
    if (pretrained.empty()) pretrained = c.out;
    const Corpus vc = load_corpus(fs::path(data) / "vc");
    const ModelConfig cfg = stage_model_config(run.model, Stage::vc);
    const std::uint64_t seed = derive_seed(run.seed, "stage.vc");
    const fs::path dir(pretrained);
    Seq2SeqModel init = [&] {
      if (run.pretraining == "tts") {
        return transfer_init(cfg, load_checkpoint(dir / "tts_enc.ckpt"), load_checkpoint(dir / "tts_dec.ckpt"), seed);
      }
      if (run.pretraining == "asr") {
        const Checkpoint b2 = load_checkpoint(dir / "asr_dec.ckpt");
        return transfer_init(cfg, b2, b2, seed);
      }
      return build_model(cfg, seed);
    }();
    log("vc initialization: " + run.pretraining);
    save_stage(c.out, "vc", run_vc_stage(vc, std::move(init), run));
    return 0;
  }

  int convert(const Common& c, const std::string& data, const std::string& checkpoint, const std::string& split) {
    const Checkpoint ckpt = load_checkpoint(checkpoint);
    const Corpus vc = load_corpus(fs::path(data) / "vc");
    const Split s = parse_split(split);
    const auto converted = convert_split(model_from_checkpoint(ckpt), vc, s);
    write_converted(converted, s, c.out);
    const auto stopped = std::count_if(converted.begin(), converted.end(),
                                       [](const auto& u) { return u.stopped_by == StopReason::threshold; });
    log("converted " + std::to_string(converted.size()) + " utterances, " + std::to_string(stopped) +
        " stopped by threshold");
    return 0;
  }

  int evaluate(const Common& c, const std::string& data, const std::string& converted_dir,
               const std::string& checkpoint, const std::string& recognizer, const std::string& split) {
    const RunConfig run = run_config(c);
    const Corpus vc = load_corpus(fs::path(data) / "vc");
    const auto converted = read_converted(converted_dir);
    EvalOptions o;
    o.split = parse_split(split);
    o.loss = run.loss;
    std::optional<Seq2SeqModel> model, rec;
    if (!checkpoint.empty()) {
      model = model_from_checkpoint(load_checkpoint(checkpoint));
      o.model = &*model;
    }
    if (!recognizer.empty()) {
      rec = model_from_checkpoint(load_checkpoint(recognizer));
      o.recognizer = &*rec;
    }
    const json report = evaluate_conversion(vc, converted, o);
    if (!c.out.empty()) {
      fs::create_directories(c.out);
      write_json(fs::path(c.out) / "report.json", report);
      if (model) {
        const auto clusters = encoder_clusters(*model, vc_examples(vc, o.split));
        write_projection_csv(fs::path(c.out) / "projection.csv", clusters.projection);
      }
    }
    json summary = report;
    summary.erase("per_utterance");
    out_ << summary.dump(2) << "\n";
    return 0;
  }

  int gradcheck(const Common& c) {
    const RunConfig run = run_config(c);
    const auto rows = run_gradient_suite(run.model, run.seed);
    bool pass = true;
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %12s %9s %8s %8s  %s\n", "check", "max_rel_err", "tol", "coords", "skipped",
                  "result");
    out_ << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-28s %12.3e %9.0e %8zu %8zu  %s\n", r.name.c_str(), r.max_rel_error, r.tol,
                    r.checked, r.skipped, r.pass ? "ok" : "FAIL");
      out_ << line;
      pass = pass && r.pass;
    }
    if (!pass) throw NumericError("gradient check failed");
    return 0;
  }

  int inspect(const std::string& checkpoint) {
    out_ << checkpoint_metadata(load_checkpoint(checkpoint)).dump(2) << "\n";
    return 0;
  }

 private:
  std::ostream& out_;
  std::ostream& err_;
  bool verbose_;
};

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequence-to-sequence voice conversion with text-to-speech pretraining", "seqvc"};
  app.require_subcommand(1, 1);

  Common common;
  std::string data, checkpoint, recognizer, converted, pretrained, tts_dec, split = "evaluation";

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpora");
  add_common(gen, common, true);

  auto* ptts = app.add_subcommand("pretrain-tts", "stages tts_dec and tts_enc");
  add_common(ptts, common, true);
  ptts->add_option("--data", data, "gen-data output directory")->required();

  auto* pasr = app.add_subcommand("pretrain-asr", "stages asr_enc, asr_dec and the recognizer");
  add_common(pasr, common, true);
  pasr->add_option("--data", data, "gen-data output directory")->required();
  pasr->add_option("--tts-decoder", tts_dec, "tts_dec checkpoint (default: <out>/tts_dec.ckpt)");

  auto* tvc = app.add_subcommand("train-vc", "voice conversion training");
  add_common(tvc, common, true);
  tvc->add_option("--data", data, "gen-data output directory")->required();
  tvc->add_option("--pretrained", pretrained, "directory holding pretraining checkpoints (default: --out)");

  auto* conv = app.add_subcommand("convert", "convert a split and export attention maps");
  add_common(conv, common, true);
  conv->add_option("--data", data, "gen-data output directory")->required();
  conv->add_option("--checkpoint", checkpoint, "vc checkpoint")->required();
  conv->add_option("--split", split, "train, validation or evaluation");

  auto* eval = app.add_subcommand("evaluate", "objective evaluation report");
  add_common(eval, common, false);
  eval->add_option("--data", data, "gen-data output directory")->required();
  eval->add_option("--converted", converted, "convert output directory")->required();
  eval->add_option("--checkpoint", checkpoint, "vc checkpoint, for diagonality and silhouette");
  eval->add_option("--recognizer", recognizer, "asr checkpoint, for the symbol error rate");
  eval->add_option("--split", split, "split the converted speech came from");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient table");
  add_common(grad, common, false);

  auto* insp = app.add_subcommand("inspect", "print checkpoint metadata");
  insp->add_option("checkpoint", checkpoint, "checkpoint file")->required();

  if (!args.empty() && args[0].rfind("-", 0) != 0 && !app.get_subcommand_no_throw(args[0])) {
    err << "error: unknown command '" << args[0] << "'\n";
    return 1;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  Session s(out, err);
  try {
    if (*gen) return s.gen_data(common);
    if (*ptts) return s.pretrain_tts(common, data);
    if (*pasr) return s.pretrain_asr(common, data, tts_dec);
    if (*tvc) return s.train_vc(common, data, pretrained);
    if (*conv) return s.convert(common, data, checkpoint, split);
    if (*eval) return s.evaluate(common, data, converted, checkpoint, recognizer, split);
    if (*grad) return s.gradcheck(common);
    if (*insp) return s.inspect(checkpoint);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace seqvc
