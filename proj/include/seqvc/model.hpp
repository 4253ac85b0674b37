#pragma once

// Seq2seq models for voice conversion, TTS and ASR with either a Transformer
// (VTN) or a recurrent (Tacotron-style) backbone. Every parameter lives under
// `encoder.` or `decoder.`; those two subtrees are what pretraining transfers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/nn.hpp"
#include "seqvc/param_tree.hpp"
#include "seqvc/tensor.hpp"

namespace seqvc {

enum class Architecture { vtn, rnn };
enum class Task { vc, tts, asr };

std::string to_string(Architecture a);
std::string to_string(Task t);
Architecture parse_architecture(const std::string& s);
Task parse_task(const std::string& s);

struct ModelConfig {
  Architecture architecture = Architecture::vtn;
  Task task = Task::vc;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t d_ff = 64;
  std::size_t reduction = 2;
  std::size_t feat_dim = 20;
  std::size_t vocab = 0;  // text tasks only; the last two ids are BOS and EOS
  std::size_t prenet_dim = 32;
  double prenet_dropout = 0.5;
  bool prenet_dropout_at_inference = false;
  std::size_t postnet_channels = 32;
  std::size_t postnet_layers = 5;
  std::size_t postnet_kernel = 5;
  double dropout = 0.1;  // attention / feed-forward sublayer outputs (vtn)
  std::size_t rnn_conv_layers = 3;
  std::size_t rnn_conv_kernel = 5;
  std::size_t loc_channels = 8;
  std::size_t loc_width = 31;
  double stop_threshold = 0.5;
  double max_length_ratio = 10.0;

  int bos() const { return static_cast<int>(vocab) - 2; }
  int eos() const { return static_cast<int>(vocab) - 1; }
  bool text_input() const { return task == Task::tts; }
  bool text_output() const { return task == Task::asr; }
};

// Throws ContractError describing the first violated constraint.
void validate(const ModelConfig& c);

void to_json(nlohmann::json& j, const ModelConfig& c);
// Unknown keys are rejected; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct EncoderLayer {
  nn::MhaParams mha;
  nn::LayerNormParams ln1;
  nn::FfnParams ffn;
  nn::LayerNormParams ln2;
};

struct DecoderLayer {
  nn::MhaParams self_mha;
  nn::LayerNormParams ln1;
  nn::MhaParams cross_mha;
  nn::LayerNormParams ln2;
  nn::FfnParams ffn;
  nn::LayerNormParams ln3;
};

struct VtnEncoder {
  nn::DownsampleParams downsample;  // speech input
  Tensor embed;                     // text input
  nn::SpeParams spe;
  std::vector<EncoderLayer> layers;
};

struct RnnEncoder {
  nn::Linear input;  // speech input
  Tensor embed;      // text input
  std::vector<nn::ConvNormParams> convs;
  nn::LstmParams forward;
  nn::LstmParams backward;
};

struct VtnDecoder {
  nn::PrenetParams prenet;  // speech output
  nn::Linear input_proj;
  Tensor embed;  // text output
  nn::SpeParams spe;
  std::vector<DecoderLayer> layers;
  nn::Linear feat_out;
  nn::Linear stop_out;
  nn::PostnetParams postnet;
  nn::Linear token_out;
};

struct RnnDecoder {
  nn::PrenetParams prenet;
  Tensor embed;
  nn::LocAttParams attention;
  nn::LstmParams lstm0;
  nn::LstmParams lstm1;
  nn::Linear feat_out;
  nn::Linear stop_out;
  nn::PostnetParams postnet;
  nn::Linear token_out;
};

struct Seq2SeqModel {
  ModelConfig config;
  ParamTree params;
  // Handles alias tensors in `params`; only the ones matching the
  // architecture and task are populated.
  VtnEncoder vtn_encoder;
  VtnDecoder vtn_decoder;
  RnnEncoder rnn_encoder;
  RnnDecoder rnn_decoder;

  // Independent copy with the same values.
  Seq2SeqModel clone() const;
};

Seq2SeqModel build_model(const ModelConfig& config, std::uint64_t seed);

// Output of a decoder run. attention[layer][head] is [steps x rows(H)];
// the rnn decoder exposes a single map as attention[0][0].
struct DecoderOutput {
  Tensor pre;          // [steps*r x feat_dim] before the postnet
  Tensor post;         // pre + postnet residual
  Tensor stop_logits;  // [steps x 1]
  Tensor token_logits; // [steps x vocab] for the text decoder
  std::vector<std::vector<Tensor>> attention;
  std::size_t steps = 0;
};

enum class StopReason { threshold, max_length };
std::string to_string(StopReason s);

struct DecodeResult {
  Tensor features;  // post-postnet
  Tensor pre_features;
  std::vector<double> stop_probs;
  std::vector<std::vector<Tensor>> attention;
  StopReason stopped_by = StopReason::max_length;
};

// Speech (vc / asr) or symbol (tts) input -> H [n' x d_model].
Tensor encode(const Seq2SeqModel& model, const Tensor& features, const nn::ForwardContext& ctx = {});
Tensor encode(const Seq2SeqModel& model, std::span<const int> symbols, const nn::ForwardContext& ctx = {});

// Decoder input frames for teacher forcing: go-frame then the last frame of
// each preceding r-group.
Tensor shifted_decoder_inputs(const Tensor& target, std::size_t reduction);

// `target` rows must be a multiple of r; rows at or past `valid_frames` are
// padding and kept out of the postnet. valid_frames == 0 means all rows.
DecoderOutput decode_teacher_forced(const Seq2SeqModel& model, const Tensor& h, const Tensor& target,
                                    std::size_t valid_frames = 0, const nn::ForwardContext& ctx = {});

// Symbol decoder: inputs are BOS followed by `symbols`; logits predict
// `symbols` followed by EOS.
DecoderOutput decode_text_teacher_forced(const Seq2SeqModel& model, const Tensor& h, std::span<const int> symbols,
                                         const nn::ForwardContext& ctx = {});

std::size_t max_decode_steps(const ModelConfig& c, std::size_t encoder_rows);

DecodeResult decode_autoregressive(const Seq2SeqModel& model, const Tensor& h, const nn::ForwardContext& ctx = {});

// Greedy symbol decoding, at most 2 * rows(H) symbols; EOS is not included.
std::vector<int> decode_text(const Seq2SeqModel& model, const Tensor& h);

}  // namespace seqvc
