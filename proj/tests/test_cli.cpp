#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "doctest.h"
#include "seqvc/checkpoint.hpp"
#include "seqvc/cli.hpp"
#include "seqvc/pipeline.hpp"

using namespace seqvc;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  setenv("SEQVC_LOG", "quiet", 1);
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("seqvc_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

// Small corpora, a small model and short stages.
std::vector<std::string> small_sets() {
  std::vector<std::string> sets;
  for (const char* kv : {"data.tts_train=8", "data.tts_validation=2", "data.asr_speakers=2", "data.asr_train=3",
                         "data.asr_validation=1", "data.vc_train=6", "data.vc_validation=2", "data.vc_evaluation=3",
                         "model.d_model=8", "model.heads=2", "model.layers=1", "model.d_ff=8", "model.prenet_dim=8",
                         "model.postnet_channels=4", "model.postnet_layers=2", "model.postnet_kernel=3",
                         "stages.tts_dec.steps=4", "stages.tts_enc.steps=4", "stages.asr_enc.steps=4",
                         "stages.asr_dec.steps=4", "stages.recognizer.steps=4", "stages.vc.steps=4", "batch_size=2"}) {
    sets.push_back("--set");
    sets.push_back(kv);
  }
  return sets;
}

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

std::map<std::string, std::vector<char>> tree_bytes(const fs::path& root) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}).code == 1);
  const auto unknown = run({"frobnicate"});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("frobnicate") != std::string::npos);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"gen-data"}).code == 1);  // --out is required
  CHECK(run({"gen-data", "--out", scratch("x").string(), "--config", "/nonexistent.json"}).code == 1);
  CHECK(run({"gen-data", "--out", scratch("x").string(), "--set", "no.such.key=1"}).code == 1);
  CHECK(run({"inspect", "/nonexistent.ckpt"}).code == 1);
}

TEST_CASE("gen-data is deterministic for a seed") {
  const auto a = scratch("gen_a");
  const auto b = scratch("gen_b");
  const auto c = scratch("gen_c");
  REQUIRE(run(with({"gen-data", "--seed", "7", "--out", a.string()}, small_sets())).code == 0);
  REQUIRE(run(with({"gen-data", "--seed", "7", "--out", b.string()}, small_sets())).code == 0);
  REQUIRE(run(with({"gen-data", "--seed", "8", "--out", c.string()}, small_sets())).code == 0);
  const auto ta = tree_bytes(a);
  CHECK(ta.count("config.json") == 1);
  CHECK(ta.count("vc/manifest.json") == 1);
  CHECK(ta == tree_bytes(b));
  CHECK(ta != tree_bytes(c));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("evaluate scores converted == target as zero distortion and zero errors") {
  const auto dir = scratch("eval");
  const auto sets = small_sets();
  REQUIRE(run(with({"gen-data", "--seed", "3", "--out", (dir / "data").string()}, sets)).code == 0);
  const Corpus vc = load_corpus(dir / "data" / "vc");
  std::vector<ConvertedUtterance> same;
  for (const auto* u : vc.select(kTargetSpeaker, Split::evaluation)) {
    same.push_back({u->id, u->features, {}, StopReason::threshold});
  }
  write_converted(same, Split::evaluation, dir / "conv");

  RunConfig cfg = load_run_config("", {"model.d_model=8", "model.heads=2", "model.d_ff=8"});
  const auto rec = build_model(stage_model_config(cfg.model, Stage::recognizer), 1);
  save_checkpoint(make_checkpoint(rec, make_opt_state(rec.params, cfg.optimizer), 1, 0, "recognizer"),
                  dir / "rec.ckpt");

  const auto r = run({"evaluate", "--data", (dir / "data").string(), "--converted", (dir / "conv").string(),
                      "--recognizer", (dir / "rec.ckpt").string(), "--out", (dir / "eval").string()});
  REQUIRE(r.code == 0);
  const auto bytes = read_file(dir / "eval" / "report.json");
  const auto report = nlohmann::json::parse(bytes.begin(), bytes.end());
  CHECK(report.at("mcd_db").get<double>() == 0.0);
  CHECK(report.at("symbol_error_rate").get<double>() == 0.0);
  CHECK(report.at("utterances").get<std::size_t>() == same.size());
  CHECK(report.at("diagonality").is_null());
  CHECK(r.out.find("mcd_db") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("pipeline commands chain and repeat byte for byte") {
  const auto sets = small_sets();
  auto chain = [&](const fs::path& dir) {
    const std::string data = (dir / "data").string();
    const std::string out = (dir / "run").string();
    REQUIRE(run(with({"gen-data", "--seed", "5", "--out", data}, sets)).code == 0);
    REQUIRE(run(with({"pretrain-tts", "--seed", "5", "--data", data, "--out", out}, sets)).code == 0);
    REQUIRE(run(with({"pretrain-asr", "--seed", "5", "--data", data, "--out", out}, sets)).code == 0);
    REQUIRE(run(with({"train-vc", "--seed", "5", "--data", data, "--out", out}, sets)).code == 0);
    REQUIRE(run({"convert", "--data", data, "--checkpoint", out + "/vc.ckpt", "--out", (dir / "conv").string()}).code ==
            0);
    REQUIRE(run(with({"evaluate", "--data", data, "--converted", (dir / "conv").string(), "--checkpoint",
                      out + "/vc.ckpt", "--recognizer", out + "/recognizer.ckpt", "--out", (dir / "eval").string()},
                     sets))
                .code == 0);
  };
  const auto a = scratch("chain_a");
  const auto b = scratch("chain_b");
  chain(a);
  chain(b);
  const auto ta = tree_bytes(a);
  for (const char* f : {"run/tts_dec.ckpt", "run/tts_enc.ckpt", "run/asr_enc.ckpt", "run/asr_dec.ckpt",
                        "run/recognizer.ckpt", "run/vc.ckpt", "run/vc.trace.csv", "run/tts_enc.json",
                        "conv/manifest.json", "eval/report.json", "eval/projection.csv"}) {
    CHECK_MESSAGE(ta.count(f) == 1, f);
  }
  CHECK(ta == tree_bytes(b));

  const auto summary = nlohmann::json::parse(ta.at("run/tts_enc.json").begin(), ta.at("run/tts_enc.json").end());
  CHECK(summary.at("freeze_audit").at("passed").get<bool>());
  CHECK(summary.at("init_audit_passed").get<bool>());

  bool pgm = false;
  for (const auto& [name, bytes] : ta) pgm = pgm || (name.rfind("conv/attention/", 0) == 0 && bytes[0] == 'P');
  CHECK(pgm);

  // The asr initialization reads asr_dec.ckpt; a missing pretraining
  // directory is a contract error.
  CHECK(run(with({"train-vc", "--data", (a / "data").string(), "--out", (a / "run2").string(), "--set",
                  "pretraining=asr", "--pretrained", (a / "run").string()},
                 sets))
            .code == 0);
  CHECK(run(with({"train-vc", "--data", (a / "data").string(), "--out", (a / "run3").string()}, sets)).code == 1);

  const auto meta = run({"inspect", (a / "run" / "vc.ckpt").string()});
  CHECK(meta.code == 0);
  CHECK(meta.out.find("\"stage\": \"vc\"") != std::string::npos);

  // A diverging run is a numeric failure.
  const auto diverge = run(with({"train-vc", "--data", (a / "data").string(), "--out", (a / "run4").string(), "--set",
                                 "pretraining=none", "--set", "optimizer.lr=1e308"},
                                sets));
  CHECK(diverge.code == 2);
  CHECK(fs::exists(a / "run4" / "vc.ckpt"));
  for (const auto& p : {a, b}) fs::remove_all(p);
}

TEST_CASE("gradcheck prints a passing table") {
  const auto r = run({"gradcheck", "--set", "model.d_model=8", "--set", "model.heads=2", "--set", "model.layers=1",
                      "--set", "model.d_ff=8", "--set", "model.postnet_layers=2"});
  CHECK(r.code == 0);
  CHECK(r.out.find("model.rnn.asr") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}
