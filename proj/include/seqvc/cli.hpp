#pragma once

// Command-line entry point.
//
//   gen-data      synthetic TTS, ASR and VC corpora under --out
//   pretrain-tts  stages tts_dec and tts_enc
//   pretrain-asr  stages asr_enc, asr_dec and the evaluation recognizer
//   train-vc      VC training from the initialization named by `pretraining`
//   convert       autoregressive conversion of one split, with attention maps
//   evaluate      JSON report over converted speech
//   gradcheck     finite-difference table for every layer, loss and model
//   inspect       checkpoint metadata
//
// Exit codes: 0 success, 1 contract error (bad input), 2 numeric failure.

#include <iosfwd>
#include <string>
#include <vector>

namespace seqvc {

// args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqvc
