#pragma once

// Building blocks shared by the Transformer (VTN) and RNN seq2seq models.
// Every make_* function registers its tensors in a ParamTree under `prefix`
// and returns a struct of handles into that tree.

#include <cstddef>
#include <string>
#include <vector>

#include "seqvc/param_tree.hpp"
#include "seqvc/rng.hpp"
#include "seqvc/tensor.hpp"

namespace seqvc::nn {

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // dropout masks; required when dropout is active
};

// Glorot/Xavier uniform draw in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], undefined when the layer has no bias
  Tensor operator()(const Tensor& x) const;
};
Linear make_linear(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias = true);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};
LayerNormParams make_layer_norm(ParamTree& tree, const std::string& prefix, std::size_t dim);
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

// ---------------------------------------------------------------------------
// Attention

struct SdpaResult {
  Tensor output;
  Tensor weights;  // [queries x keys]
};

// softmax(Q K^T / sqrt(d)) V with d = cols(Q); masked keys get weight 0.
SdpaResult sdpa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask = nullptr);

// Fused per-head projections: head i uses columns [i*d_att/h, (i+1)*d_att/h).
struct MhaParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;  // [d_att x d_model]
  std::size_t heads = 1;
  std::size_t d_att = 0;
};
MhaParams make_mha(ParamTree& tree, const std::string& prefix, std::size_t d_model, std::size_t d_att,
                   std::size_t heads, Rng& rng);

struct MhaResult {
  Tensor output;
  std::vector<Tensor> head_weights;
};
MhaResult mha(const Tensor& q, const Tensor& k, const Tensor& v, const MhaParams& p,
              const AttentionMask* mask = nullptr);

// ---------------------------------------------------------------------------
// Feed-forward

struct FfnParams {
  Linear inner;  // d_model -> d_ff
  Linear outer;  // d_ff -> d_model
};
FfnParams make_ffn(ParamTree& tree, const std::string& prefix, std::size_t d_model, std::size_t d_ff, Rng& rng);
Tensor ffn(const Tensor& x, const FfnParams& p);
// LayerNorm(X + FFN(X)).
Tensor ffn_sublayer(const Tensor& x, const FfnParams& p, const LayerNormParams& norm);

// ---------------------------------------------------------------------------
// Scaled positional encoding

struct SpeParams {
  Tensor alpha;  // trainable scalar, initialized to 1
  std::size_t d_model = 0;
};
SpeParams make_spe(ParamTree& tree, const std::string& prefix, std::size_t d_model);
// Unscaled sinusoid table for positions [first, first + length).
Tensor sinusoid_table(std::size_t first, std::size_t length, std::size_t d_model);
Tensor spe(std::size_t length, const SpeParams& p, std::size_t first_position = 0);

// ---------------------------------------------------------------------------
// Location-sensitive attention

struct LocAttParams {
  Linear query;        // query_dim -> att_dim, no bias
  Linear key;          // key_dim -> att_dim
  Tensor loc_filters;  // [channels x 1 x width], width odd
  Linear loc_proj;     // channels -> att_dim, no bias
  Linear score;        // att_dim -> 1, no bias
};
LocAttParams make_location_attention(ParamTree& tree, const std::string& prefix, std::size_t query_dim,
                                     std::size_t key_dim, std::size_t att_dim, std::size_t channels,
                                     std::size_t width, Rng& rng);

struct LocAttResult {
  Tensor context;  // [1 x key_dim]
  Tensor weights;  // [1 x n]
};
// Keys projected once per utterance.
Tensor location_keys(const Tensor& h, const LocAttParams& p);
LocAttResult location_attention(const Tensor& query, const Tensor& h, const Tensor& projected_keys,
                                const Tensor& prev_cum_weights, const LocAttParams& p);
LocAttResult location_attention(const Tensor& query, const Tensor& h, const Tensor& prev_cum_weights,
                                const LocAttParams& p);

// ---------------------------------------------------------------------------
// Convolutional time/frequency downsampler (two 3x3 stride-2 convs)

struct DownsampleParams {
  Tensor conv1_w, conv1_b;  // [d/4 x 1 x 3 x 3]
  Tensor conv2_w, conv2_b;  // [d/2 x d/4 x 3 x 3]
  Linear proj;              // (d/2 * ceil(ceil(F/2)/2)) -> d_model
};
DownsampleParams make_downsampler(ParamTree& tree, const std::string& prefix, std::size_t feat_dim,
                                  std::size_t d_model, Rng& rng);
std::size_t downsampled_length(std::size_t n);
Tensor downsample_conv(const Tensor& x, const DownsampleParams& p);

// ---------------------------------------------------------------------------
// LSTM, gate order (input, forget, candidate, output)

struct LstmParams {
  Tensor w_ih;  // [in x 4H]
  Tensor w_hh;  // [H x 4H]
  Tensor bias;  // [4H]
  std::size_t hidden = 0;
};
LstmParams make_lstm(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng);

struct LstmState {
  Tensor h;  // [1 x H]
  Tensor c;  // [1 x H]
};
LstmState lstm_zero_state(std::size_t hidden);
LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& p);
// Same recurrence with x . w_ih supplied by the caller.
LstmState lstm_step_projected(const Tensor& x_proj, const LstmState& state, const LstmParams& p);
Tensor lstm_sequence(const Tensor& x, const LstmParams& p, bool reverse);
// Forward and reversed passes concatenated along features.
Tensor bilstm(const Tensor& x, const LstmParams& forward, const LstmParams& backward);

// ---------------------------------------------------------------------------
// Decoder prenet / postnet

struct PrenetParams {
  Linear fc1;
  Linear fc2;
  double dropout = 0.5;
  bool dropout_at_inference = false;
};
PrenetParams make_prenet(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t dim,
                         double dropout, bool dropout_at_inference, Rng& rng);
Tensor prenet(const Tensor& x, const PrenetParams& p, const ForwardContext& ctx);

struct ConvParams {
  Tensor weight;  // [cout x cin x k]
  Tensor bias;
};
ConvParams make_conv1d(ParamTree& tree, const std::string& prefix, std::size_t cin, std::size_t cout,
                       std::size_t kernel, Rng& rng);
Tensor conv1d_same(const Tensor& x, const ConvParams& p);

struct PostnetParams {
  std::vector<ConvParams> convs;
};
PostnetParams make_postnet(ParamTree& tree, const std::string& prefix, std::size_t feat_dim,
                           std::size_t channels, std::size_t layers, std::size_t kernel, Rng& rng);
// Residual predicted by the postnet (tanh on all but the last layer). Rows at
// or beyond `valid_rows` are zeroed before every layer so padding never leaks
// into valid frames.
Tensor postnet(const Tensor& x, const PostnetParams& p, std::size_t valid_rows);

// Conv + per-utterance channel normalization + ReLU, the RNN encoder block.
struct ConvNormParams {
  ConvParams conv;
  Tensor gain;
  Tensor bias;
};
ConvNormParams make_conv_norm(ParamTree& tree, const std::string& prefix, std::size_t channels,
                              std::size_t kernel, Rng& rng);
Tensor conv_norm_relu(const Tensor& x, const ConvNormParams& p);

}  // namespace seqvc::nn
