#pragma once

// Two-stage pretraining for voice conversion.
//
//   tts_dec (A.1)  text -> speech TTS model; its decoder is the artifact
//   tts_enc (A.2)  speech autoencoder on D_TTS with the A.1 decoder frozen
//   asr_enc (B.1)  speech -> text ASR model on the multi-speaker corpus
//   asr_dec (B.2)  speech decoder on D_TTS behind the frozen B.1 encoder,
//                  initialized from the A.1 decoder
//   vc             final training from a transferred encoder and decoder
//
// `recognizer` is an extra ASR model used only to score converted speech.

#include <cstdint>
#include <string>
#include <vector>

#include "seqvc/checkpoint.hpp"
#include "seqvc/corpus.hpp"
#include "seqvc/train.hpp"

namespace seqvc {

enum class Stage { tts_dec, tts_enc, asr_enc, asr_dec, vc, recognizer };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

// Symbols plus BOS and EOS.
inline constexpr std::size_t kTextVocab = kInventorySize + 2;

struct StagePlan {
  Stage stage = Stage::vc;
  std::vector<std::string> frozen;
  std::size_t steps = 0;
};

// tts_enc freezes "decoder.", asr_dec freezes "encoder.", the rest nothing.
StagePlan default_plan(Stage s, const RunConfig& run);
void validate(const StagePlan& plan, const Seq2SeqModel& model);

// The run's model config with the stage's task and vocabulary.
ModelConfig stage_model_config(const ModelConfig& base, Stage s);

// Corpora written by gen-data, all sharing one phoneme inventory.
CorpusSpec tts_corpus_spec(const RunConfig& run);
CorpusSpec asr_corpus_spec(const RunConfig& run);
CorpusSpec vc_corpus_spec(const RunConfig& run);

inline const std::string kSourceSpeaker = "src";
inline const std::string kTargetSpeaker = "tgt";

std::vector<Example> tts_examples(const Corpus& c, Split split);
std::vector<Example> autoencoder_examples(const Corpus& c, Split split);
std::vector<Example> asr_examples(const Corpus& c, Split split);
std::vector<Example> vc_examples(const Corpus& c, Split split, const std::string& source = kSourceSpeaker,
                                 const std::string& target = kTargetSpeaker);

struct StageResult {
  Checkpoint checkpoint;
  FitResult fit;
  // Transferred subtrees equal their sources at step 0.
  bool init_audit_passed = true;
};

FitOptions stage_fit_options(const StagePlan& plan, const RunConfig& run);
// Trains `model` in place and packages the result.
StageResult run_stage(Seq2SeqModel& model, const Dataset& data, const StagePlan& plan, const RunConfig& run);

StageResult run_tts_decoder_stage(const Corpus& d_tts, const RunConfig& run);
StageResult run_tts_encoder_stage(const Corpus& d_tts, const Checkpoint& dec_ckpt, const RunConfig& run);
StageResult run_asr_encoder_stage(const Corpus& d_asr, const RunConfig& run);
StageResult run_asr_decoder_stage(const Corpus& d_tts, const Checkpoint& asr_enc_ckpt, const Checkpoint& tts_dec_ckpt,
                                  const RunConfig& run);
StageResult run_recognizer_stage(const Corpus& d_asr, const RunConfig& run);

// `encoder.` from enc_ckpt and `decoder.` from dec_ckpt. Every path the config
// builds must exist in its source with the same shape.
Seq2SeqModel transfer_init(const ModelConfig& vc_config, const Checkpoint& enc_ckpt, const Checkpoint& dec_ckpt,
                           std::uint64_t seed = 0);

StageResult run_vc_stage(const Corpus& vc, Seq2SeqModel init, const RunConfig& run);

}  // namespace seqvc
