#include "seqvc/model.hpp"

#include <cmath>
#include <set>

#include "seqvc/errors.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

using nlohmann::json;
using nn::ForwardContext;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

Tensor& add_param(ParamTree& tree, const std::string& path, Tensor value) {
  value.set_requires_grad(true);
  return tree.add(path, std::move(value));
}

Tensor drop(const Tensor& x, double p, const ForwardContext& ctx) {
  if (!ctx.training || p == 0.0) return x;
  if (ctx.rng == nullptr) contract("dropout is active but no RNG was supplied");
  return dropout(x, p, *ctx.rng);
}

}  // namespace

std::string to_string(Architecture a) { return a == Architecture::vtn ? "vtn" : "rnn"; }

std::string to_string(Task t) {
  switch (t) {
    case Task::vc: return "vc";
    case Task::tts: return "tts";
    case Task::asr: return "asr";
  }
  return "?";
}

std::string to_string(StopReason s) { return s == StopReason::threshold ? "threshold" : "max_length"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "vtn") return Architecture::vtn;
  if (s == "rnn") return Architecture::rnn;
  contract("unknown architecture '" + s + "' (expected vtn or rnn)");
}

Task parse_task(const std::string& s) {
  if (s == "vc") return Task::vc;
  if (s == "tts") return Task::tts;
  if (s == "asr") return Task::asr;
  contract("unknown task '" + s + "' (expected vc, tts or asr)");
}

void validate(const ModelConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) contract("model config: " + msg);
  };
  need(c.reduction >= 1, "reduction factor must be >= 1");
  need(c.feat_dim >= 1, "feat_dim must be >= 1");
  need(c.d_model >= 2 && c.d_model % 2 == 0, "d_model must be even");
  need(c.layers >= 1, "layers must be >= 1");
  need(c.d_ff >= 1, "d_ff must be >= 1");
  need(c.prenet_dim >= 1, "prenet_dim must be >= 1");
  need(c.postnet_layers >= 1 && c.postnet_channels >= 1, "postnet needs at least one layer and channel");
  need(c.postnet_kernel % 2 == 1, "postnet_kernel must be odd");
  need(c.dropout >= 0.0 && c.dropout < 1.0, "dropout must be in [0, 1)");
  need(c.prenet_dropout >= 0.0 && c.prenet_dropout < 1.0, "prenet_dropout must be in [0, 1)");
  need(c.stop_threshold > 0.0 && c.stop_threshold <= 1.0, "stop_threshold must be in (0, 1]");
  need(c.max_length_ratio > 0.0, "max_length_ratio must be positive");
  if (c.architecture == Architecture::vtn) {
    need(c.heads >= 1 && c.d_model % c.heads == 0, "d_model must be divisible by the head count");
    need(c.d_model % 4 == 0, "vtn d_model must be divisible by 4 for the downsampler");
  } else {
    need(c.rnn_conv_kernel % 2 == 1, "rnn_conv_kernel must be odd");
    need(c.loc_width % 2 == 1, "loc_width must be odd");
    need(c.loc_channels >= 1, "loc_channels must be >= 1");
  }
  if (c.task == Task::vc) {
    need(c.vocab == 0, "vc task takes no vocabulary");
  } else {
    need(c.vocab >= 3, "text tasks need a vocabulary with at least one symbol plus BOS and EOS");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"architecture", to_string(c.architecture)},
           {"task", to_string(c.task)},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"layers", c.layers},
           {"d_ff", c.d_ff},
           {"reduction", c.reduction},
           {"feat_dim", c.feat_dim},
           {"vocab", c.vocab},
           {"prenet_dim", c.prenet_dim},
           {"prenet_dropout", c.prenet_dropout},
           {"prenet_dropout_at_inference", c.prenet_dropout_at_inference},
           {"postnet_channels", c.postnet_channels},
           {"postnet_layers", c.postnet_layers},
           {"postnet_kernel", c.postnet_kernel},
           {"dropout", c.dropout},
           {"rnn_conv_layers", c.rnn_conv_layers},
           {"rnn_conv_kernel", c.rnn_conv_kernel},
           {"loc_channels", c.loc_channels},
           {"loc_width", c.loc_width},
           {"stop_threshold", c.stop_threshold},
           {"max_length_ratio", c.max_length_ratio}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) contract("model config must be a JSON object");
  json defaults;
  to_json(defaults, c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) contract("model config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      contract(std::string("model config: bad value for '") + key + "'");
    }
  };
  std::string arch = to_string(c.architecture), task = to_string(c.task);
  get("architecture", arch);
  get("task", task);
  c.architecture = parse_architecture(arch);
  c.task = parse_task(task);
  get("d_model", c.d_model);
  get("heads", c.heads);
  get("layers", c.layers);
  get("d_ff", c.d_ff);
  get("reduction", c.reduction);
  get("feat_dim", c.feat_dim);
  get("vocab", c.vocab);
  get("prenet_dim", c.prenet_dim);
  get("prenet_dropout", c.prenet_dropout);
  get("prenet_dropout_at_inference", c.prenet_dropout_at_inference);
  get("postnet_channels", c.postnet_channels);
  get("postnet_layers", c.postnet_layers);
  get("postnet_kernel", c.postnet_kernel);
  get("dropout", c.dropout);
  get("rnn_conv_layers", c.rnn_conv_layers);
  get("rnn_conv_kernel", c.rnn_conv_kernel);
  get("loc_channels", c.loc_channels);
  get("loc_width", c.loc_width);
  get("stop_threshold", c.stop_threshold);
  get("max_length_ratio", c.max_length_ratio);
}

// ---------------------------------------------------------------------------
// Construction

namespace {

void build_vtn_encoder(Seq2SeqModel& m, Rng& rng) {
  const auto& c = m.config;
  auto& e = m.vtn_encoder;
  if (c.text_input()) {
    e.embed = add_param(m.params, "encoder.input.embed", nn::xavier_uniform(rng, {c.vocab, c.d_model}, c.vocab, c.d_model));
  } else {
    e.downsample = nn::make_downsampler(m.params, "encoder.input", c.feat_dim, c.d_model, rng);
  }
  e.spe = nn::make_spe(m.params, "encoder.spe", c.d_model);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.mha = nn::make_mha(m.params, p + ".mha", c.d_model, c.d_model, c.heads, rng);
    layer.ln1 = nn::make_layer_norm(m.params, p + ".ln1", c.d_model);
    layer.ffn = nn::make_ffn(m.params, p + ".ffn", c.d_model, c.d_ff, rng);
    layer.ln2 = nn::make_layer_norm(m.params, p + ".ln2", c.d_model);
    e.layers.push_back(std::move(layer));
  }
}

void build_rnn_encoder(Seq2SeqModel& m, Rng& rng) {
  const auto& c = m.config;
  auto& e = m.rnn_encoder;
  if (c.text_input()) {
    e.embed = add_param(m.params, "encoder.input.embed", nn::xavier_uniform(rng, {c.vocab, c.d_model}, c.vocab, c.d_model));
  } else {
    e.input = nn::make_linear(m.params, "encoder.input.proj", c.feat_dim, c.d_model, rng);
  }
  for (std::size_t l = 0; l < c.rnn_conv_layers; ++l) {
    e.convs.push_back(nn::make_conv_norm(m.params, "encoder.conv" + std::to_string(l), c.d_model, c.rnn_conv_kernel, rng));
  }
  e.forward = nn::make_lstm(m.params, "encoder.blstm.fwd", c.d_model, c.d_model / 2, rng);
  e.backward = nn::make_lstm(m.params, "encoder.blstm.bwd", c.d_model, c.d_model / 2, rng);
}

void build_speech_head(Seq2SeqModel& m, nn::Linear& feat_out, nn::Linear& stop_out, nn::PostnetParams& postnet,
                       std::size_t in, Rng& rng) {
  const auto& c = m.config;
  feat_out = nn::make_linear(m.params, "decoder.feat_out", in, c.reduction * c.feat_dim, rng);
  stop_out = nn::make_linear(m.params, "decoder.stop_out", in, 1, rng);
  postnet = nn::make_postnet(m.params, "decoder.postnet", c.feat_dim, c.postnet_channels, c.postnet_layers,
                             c.postnet_kernel, rng);
}

void build_vtn_decoder(Seq2SeqModel& m, Rng& rng) {
  const auto& c = m.config;
  auto& d = m.vtn_decoder;
  if (c.text_output()) {
    d.embed = add_param(m.params, "decoder.embed", nn::xavier_uniform(rng, {c.vocab, c.d_model}, c.vocab, c.d_model));
  } else {
    d.prenet = nn::make_prenet(m.params, "decoder.prenet", c.feat_dim, c.prenet_dim, c.prenet_dropout,
                               c.prenet_dropout_at_inference, rng);
    d.input_proj = nn::make_linear(m.params, "decoder.input.proj", c.prenet_dim, c.d_model, rng);
  }
  d.spe = nn::make_spe(m.params, "decoder.spe", c.d_model);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_mha = nn::make_mha(m.params, p + ".self_mha", c.d_model, c.d_model, c.heads, rng);
    layer.ln1 = nn::make_layer_norm(m.params, p + ".ln1", c.d_model);
    layer.cross_mha = nn::make_mha(m.params, p + ".cross_mha", c.d_model, c.d_model, c.heads, rng);
    layer.ln2 = nn::make_layer_norm(m.params, p + ".ln2", c.d_model);
    layer.ffn = nn::make_ffn(m.params, p + ".ffn", c.d_model, c.d_ff, rng);
    layer.ln3 = nn::make_layer_norm(m.params, p + ".ln3", c.d_model);
    d.layers.push_back(std::move(layer));
  }
  if (c.text_output()) {
    d.token_out = nn::make_linear(m.params, "decoder.token_out", c.d_model, c.vocab, rng);
  } else {
    build_speech_head(m, d.feat_out, d.stop_out, d.postnet, c.d_model, rng);
  }
}

void build_rnn_decoder(Seq2SeqModel& m, Rng& rng) {
  const auto& c = m.config;
  auto& d = m.rnn_decoder;
  std::size_t din = 0;
  if (c.text_output()) {
    d.embed = add_param(m.params, "decoder.embed", nn::xavier_uniform(rng, {c.vocab, c.d_model}, c.vocab, c.d_model));
    din = c.d_model;
  } else {
    d.prenet = nn::make_prenet(m.params, "decoder.prenet", c.feat_dim, c.prenet_dim, c.prenet_dropout,
                               c.prenet_dropout_at_inference, rng);
    din = c.prenet_dim;
  }
  d.attention = nn::make_location_attention(m.params, "decoder.attention", c.d_model, c.d_model, c.d_model,
                                            c.loc_channels, c.loc_width, rng);
  d.lstm0 = nn::make_lstm(m.params, "decoder.lstm0", din + c.d_model, c.d_model, rng);
  d.lstm1 = nn::make_lstm(m.params, "decoder.lstm1", c.d_model, c.d_model, rng);
  if (c.text_output()) {
    d.token_out = nn::make_linear(m.params, "decoder.token_out", 2 * c.d_model, c.vocab, rng);
  } else {
    build_speech_head(m, d.feat_out, d.stop_out, d.postnet, 2 * c.d_model, rng);
  }
}

}  // namespace

Seq2SeqModel build_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Seq2SeqModel m;
  m.config = config;
  Rng enc_rng(derive_seed(seed, "init.encoder"));
  Rng dec_rng(derive_seed(seed, "init.decoder"));
  if (config.architecture == Architecture::vtn) {
    build_vtn_encoder(m, enc_rng);
    build_vtn_decoder(m, dec_rng);
  } else {
    build_rnn_encoder(m, enc_rng);
    build_rnn_decoder(m, dec_rng);
  }
  return m;
}

Seq2SeqModel Seq2SeqModel::clone() const {
  Seq2SeqModel copy = build_model(config, 0);
  copy.params.copy_from(params, "");
  return copy;
}

// ---------------------------------------------------------------------------
// Encoders

namespace {

Tensor vtn_encoder_layers(const Seq2SeqModel& m, Tensor x, const ForwardContext& ctx) {
  const auto& e = m.vtn_encoder;
  x = add(x, nn::spe(x.rows(), e.spe));
  for (const auto& layer : e.layers) {
    auto a = nn::mha(x, x, x, layer.mha);
    x = nn::layer_norm(add(x, drop(a.output, m.config.dropout, ctx)), layer.ln1);
    x = nn::layer_norm(add(x, drop(nn::ffn(x, layer.ffn), m.config.dropout, ctx)), layer.ln2);
  }
  return x;
}

Tensor rnn_encoder_layers(const Seq2SeqModel& m, Tensor x) {
  const auto& e = m.rnn_encoder;
  for (const auto& block : e.convs) x = nn::conv_norm_relu(x, block);
  return nn::bilstm(x, e.forward, e.backward);
}

}  // namespace

Tensor encode(const Seq2SeqModel& model, const Tensor& features, const ForwardContext& ctx) {
  const auto& c = model.config;
  if (c.text_input()) contract("encode: tts model expects symbol ids, got features");
  if (!features.defined() || features.rank() != 2 || features.rows() == 0) contract("encode: empty input");
  if (features.cols() != c.feat_dim) {
    contract("encode: features have " + std::to_string(features.cols()) + " bins, model expects " +
             std::to_string(c.feat_dim));
  }
  if (c.architecture == Architecture::vtn) {
    return vtn_encoder_layers(model, nn::downsample_conv(features, model.vtn_encoder.downsample), ctx);
  }
  return rnn_encoder_layers(model, model.rnn_encoder.input(features));
}

Tensor encode(const Seq2SeqModel& model, std::span<const int> symbols, const ForwardContext& ctx) {
  const auto& c = model.config;
  if (!c.text_input()) contract("encode: " + to_string(c.task) + " model expects features, got symbol ids");
  if (symbols.empty()) contract("encode: empty input");
  if (c.architecture == Architecture::vtn) {
    return vtn_encoder_layers(model, embedding(model.vtn_encoder.embed, symbols), ctx);
  }
  return rnn_encoder_layers(model, embedding(model.rnn_encoder.embed, symbols));
}

// ---------------------------------------------------------------------------
// Decoders

namespace {

// Self-attention keys/values per layer during incremental decoding.
struct VtnCache {
  std::vector<std::vector<Tensor>> inputs;
};

// Runs the decoder stack on `x`. Without a cache, x holds every step and a
// causal mask applies; with a cache, x is the newest step and attends to all
// cached layer inputs, which yields the same rows as the masked batch.
Tensor vtn_decoder_layers(const Seq2SeqModel& m, Tensor x, const Tensor& h, const ForwardContext& ctx,
                          VtnCache* cache, std::vector<std::vector<Tensor>>& attention) {
  const auto& d = m.vtn_decoder;
  const double p = m.config.dropout;
  attention.resize(d.layers.size());
  AttentionMask causal;
  if (!cache) causal = AttentionMask::causal(x.rows());
  if (cache && cache->inputs.empty()) cache->inputs.resize(d.layers.size());
  for (std::size_t l = 0; l < d.layers.size(); ++l) {
    const auto& layer = d.layers[l];
    Tensor kv = x;
    if (cache) {
      cache->inputs[l].push_back(x);
      kv = concat_rows(cache->inputs[l]);
    }
    auto s = nn::mha(x, kv, kv, layer.self_mha, cache ? nullptr : &causal);
    x = nn::layer_norm(add(x, drop(s.output, p, ctx)), layer.ln1);
    auto c = nn::mha(x, h, h, layer.cross_mha);
    x = nn::layer_norm(add(x, drop(c.output, p, ctx)), layer.ln2);
    x = nn::layer_norm(add(x, drop(nn::ffn(x, layer.ffn), p, ctx)), layer.ln3);
    attention[l] = std::move(c.head_weights);
  }
  return x;
}

struct RnnState {
  nn::LstmState s0;
  nn::LstmState s1;
  Tensor cum;
};

RnnState rnn_initial_state(const Seq2SeqModel& m, std::size_t n) {
  return {nn::lstm_zero_state(m.config.d_model), nn::lstm_zero_state(m.config.d_model), Tensor({1, n}, 0.0)};
}

// One recurrent decoder step; returns [h1; c_t] and the attention row.
Tensor rnn_step(const Seq2SeqModel& m, const Tensor& x, const Tensor& h, const Tensor& keys, RnnState& st,
                Tensor& weights) {
  const auto& d = m.rnn_decoder;
  auto att = nn::location_attention(st.s0.h, h, keys, st.cum, d.attention);
  st.cum = add(st.cum, att.weights);
  st.s0 = nn::lstm_step(concat_cols({x, att.context}), st.s0, d.lstm0);
  st.s1 = nn::lstm_step(st.s0.h, st.s1, d.lstm1);
  weights = att.weights;
  return concat_cols({st.s1.h, att.context});
}

Tensor rnn_decoder_sequence(const Seq2SeqModel& m, const Tensor& inputs, const Tensor& h,
                            std::vector<std::vector<Tensor>>& attention) {
  const Tensor keys = nn::location_keys(h, m.rnn_decoder.attention);
  RnnState st = rnn_initial_state(m, h.rows());
  std::vector<Tensor> outs, rows;
  for (std::size_t t = 0; t < inputs.rows(); ++t) {
    Tensor w;
    outs.push_back(rnn_step(m, slice_rows(inputs, t, t + 1), h, keys, st, w));
    rows.push_back(w);
  }
  attention = {{concat_rows(rows)}};
  return concat_rows(outs);
}

void require_encoder_output(const Seq2SeqModel& m, const Tensor& h) {
  if (!h.defined() || h.rank() != 2 || h.rows() == 0) contract("decode: encoder output H is empty");
  if (h.cols() != m.config.d_model) {
    contract("decode: H has " + std::to_string(h.cols()) + " columns, decoder expects " +
             std::to_string(m.config.d_model));
  }
}

Tensor speech_decoder_inputs(const Seq2SeqModel& m, const Tensor& frames, const ForwardContext& ctx) {
  if (m.config.architecture == Architecture::vtn) {
    return m.vtn_decoder.input_proj(nn::prenet(frames, m.vtn_decoder.prenet, ctx));
  }
  return nn::prenet(frames, m.rnn_decoder.prenet, ctx);
}

}  // namespace

Tensor shifted_decoder_inputs(const Tensor& target, std::size_t reduction) {
  if (reduction == 0 || target.rows() % reduction != 0) {
    contract("decoder inputs: " + std::to_string(target.rows()) + " target frames not a multiple of r=" +
             std::to_string(reduction));
  }
  const std::size_t steps = target.rows() / reduction, f = target.cols();
  std::vector<double> v(steps * f, 0.0);
  const auto d = target.data();
  for (std::size_t t = 1; t < steps; ++t) {
    const std::size_t src = t * reduction - 1;
    std::copy(d.begin() + static_cast<std::ptrdiff_t>(src * f), d.begin() + static_cast<std::ptrdiff_t>((src + 1) * f),
              v.begin() + static_cast<std::ptrdiff_t>(t * f));
  }
  return Tensor({steps, f}, std::move(v));
}

DecoderOutput decode_teacher_forced(const Seq2SeqModel& model, const Tensor& h, const Tensor& target,
                                    std::size_t valid_frames, const ForwardContext& ctx) {
  const auto& c = model.config;
  if (c.text_output()) contract("decode_teacher_forced: asr model decodes symbols");
  require_encoder_output(model, h);
  if (target.rank() != 2 || target.cols() != c.feat_dim || target.rows() == 0) {
    contract("decode_teacher_forced: target must be [m x " + std::to_string(c.feat_dim) + "], got " +
             shape_str(target.shape()));
  }
  if (valid_frames == 0) valid_frames = target.rows();
  if (valid_frames > target.rows()) contract("decode_teacher_forced: more valid frames than target rows");
  const Tensor inputs = shifted_decoder_inputs(target, c.reduction);

  DecoderOutput out;
  out.steps = inputs.rows();
  Tensor x = speech_decoder_inputs(model, inputs, ctx);
  const nn::Linear* feat_out;
  const nn::Linear* stop_out;
  const nn::PostnetParams* postnet;
  if (c.architecture == Architecture::vtn) {
    const auto& d = model.vtn_decoder;
    x = add(x, nn::spe(out.steps, d.spe));
    x = vtn_decoder_layers(model, x, h, ctx, nullptr, out.attention);
    feat_out = &d.feat_out;
    stop_out = &d.stop_out;
    postnet = &d.postnet;
  } else {
    const auto& d = model.rnn_decoder;
    x = rnn_decoder_sequence(model, x, h, out.attention);
    feat_out = &d.feat_out;
    stop_out = &d.stop_out;
    postnet = &d.postnet;
  }
  out.pre = reshape((*feat_out)(x), {out.steps * c.reduction, c.feat_dim});
  out.stop_logits = (*stop_out)(x);
  out.post = add(out.pre, nn::postnet(out.pre, *postnet, valid_frames));
  return out;
}

DecoderOutput decode_text_teacher_forced(const Seq2SeqModel& model, const Tensor& h, std::span<const int> symbols,
                                         const ForwardContext& ctx) {
  const auto& c = model.config;
  if (!c.text_output()) contract("decode_text_teacher_forced: requires an asr model");
  require_encoder_output(model, h);
  std::vector<int> inputs{c.bos()};
  inputs.insert(inputs.end(), symbols.begin(), symbols.end());
  DecoderOutput out;
  out.steps = inputs.size();
  if (c.architecture == Architecture::vtn) {
    const auto& d = model.vtn_decoder;
    Tensor x = add(embedding(d.embed, inputs), nn::spe(out.steps, d.spe));
    x = vtn_decoder_layers(model, x, h, ctx, nullptr, out.attention);
    out.token_logits = d.token_out(x);
  } else {
    const auto& d = model.rnn_decoder;
    Tensor x = rnn_decoder_sequence(model, embedding(d.embed, inputs), h, out.attention);
    out.token_logits = d.token_out(x);
  }
  return out;
}

std::size_t max_decode_steps(const ModelConfig& c, std::size_t encoder_rows) {
  const auto cap = static_cast<std::size_t>(std::ceil(c.max_length_ratio * static_cast<double>(encoder_rows)));
  return std::max<std::size_t>(cap, 1);
}

DecodeResult decode_autoregressive(const Seq2SeqModel& model, const Tensor& h, const ForwardContext& ctx) {
  const auto& c = model.config;
  if (c.text_output()) contract("decode_autoregressive: asr model decodes symbols, use decode_text");
  require_encoder_output(model, h);
  NoGradGuard no_grad;
  const std::size_t cap = max_decode_steps(c, h.rows());
  const std::size_t rf = c.reduction * c.feat_dim;
  const bool vtn = c.architecture == Architecture::vtn;

  VtnCache cache;
  RnnState st;
  Tensor keys;
  if (!vtn) {
    st = rnn_initial_state(model, h.rows());
    keys = nn::location_keys(h, model.rnn_decoder.attention);
  }
  const nn::Linear& feat_out = vtn ? model.vtn_decoder.feat_out : model.rnn_decoder.feat_out;
  const nn::Linear& stop_out = vtn ? model.vtn_decoder.stop_out : model.rnn_decoder.stop_out;

  DecodeResult r;
  std::vector<Tensor> groups;
  std::vector<std::vector<std::vector<Tensor>>> att_rows;  // [layer][head][step]
  Tensor prev({1, c.feat_dim}, 0.0);
  for (std::size_t t = 0; t < cap; ++t) {
    Tensor x = speech_decoder_inputs(model, prev, ctx);
    std::vector<std::vector<Tensor>> att;
    if (vtn) {
      x = add(x, nn::spe(1, model.vtn_decoder.spe, t));
      x = vtn_decoder_layers(model, x, h, ctx, &cache, att);
    } else {
      Tensor w;
      x = rnn_step(model, x, h, keys, st, w);
      att = {{w}};
    }
    if (att_rows.empty()) {
      att_rows.resize(att.size());
      for (std::size_t l = 0; l < att.size(); ++l) att_rows[l].resize(att[l].size());
    }
    for (std::size_t l = 0; l < att.size(); ++l) {
      for (std::size_t k = 0; k < att[l].size(); ++k) att_rows[l][k].push_back(att[l][k]);
    }
    Tensor feat = feat_out(x);
    groups.push_back(feat);
    const double p = 1.0 / (1.0 + std::exp(-stop_out(x).item()));
    r.stop_probs.push_back(p);
    prev = slice_cols(feat, rf - c.feat_dim, rf);
    if (p >= c.stop_threshold) {
      r.stopped_by = StopReason::threshold;
      break;
    }
  }
  const std::size_t steps = groups.size();
  r.pre_features = reshape(concat_rows(groups), {steps * c.reduction, c.feat_dim});
  const auto& postnet = vtn ? model.vtn_decoder.postnet : model.rnn_decoder.postnet;
  r.features = add(r.pre_features, nn::postnet(r.pre_features, postnet, r.pre_features.rows()));
  r.attention.resize(att_rows.size());
  for (std::size_t l = 0; l < att_rows.size(); ++l) {
    for (auto& rows : att_rows[l]) r.attention[l].push_back(concat_rows(rows));
  }
  return r;
}

std::vector<int> decode_text(const Seq2SeqModel& model, const Tensor& h) {
  const auto& c = model.config;
  if (!c.text_output()) contract("decode_text: requires an asr model");
  require_encoder_output(model, h);
  NoGradGuard no_grad;
  const bool vtn = c.architecture == Architecture::vtn;
  const std::size_t max_len = 2 * h.rows();
  VtnCache cache;
  RnnState st;
  Tensor keys;
  if (!vtn) {
    st = rnn_initial_state(model, h.rows());
    keys = nn::location_keys(h, model.rnn_decoder.attention);
  }
  std::vector<int> out;
  int prev = c.bos();
  for (std::size_t t = 0; t < max_len; ++t) {
    const int id[1] = {prev};
    Tensor logits;
    if (vtn) {
      const auto& d = model.vtn_decoder;
      std::vector<std::vector<Tensor>> att;
      Tensor x = add(embedding(d.embed, id), nn::spe(1, d.spe, t));
      logits = d.token_out(vtn_decoder_layers(model, x, h, {}, &cache, att));
    } else {
      const auto& d = model.rnn_decoder;
      Tensor w;
      logits = d.token_out(rnn_step(model, embedding(d.embed, id), h, keys, st, w));
    }
    const auto v = logits.data();
    const int best = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    if (best == c.eos()) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace seqvc
