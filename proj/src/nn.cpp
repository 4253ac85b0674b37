#include "seqvc/nn.hpp"

#include <cmath>
#include <string>

#include "seqvc/errors.hpp"

namespace seqvc::nn {

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

Tensor& add_param(ParamTree& tree, const std::string& path, Tensor value) {
  value.set_requires_grad(true);
  return tree.add(path, std::move(value));
}

Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

// Rows [valid, rows) set to zero; identity when nothing is padded.
Tensor mask_rows(const Tensor& x, std::size_t valid) {
  if (valid >= x.rows()) return x;
  std::vector<double> keep(x.numel(), 0.0);
  std::fill(keep.begin(), keep.begin() + static_cast<std::ptrdiff_t>(valid * x.cols()), 1.0);
  return mul_const(x, keep);
}

}  // namespace

Tensor xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-a, a);
  return t;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

Linear make_linear(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias) {
  Linear l;
  l.weight = add_param(tree, prefix + ".weight", xavier_uniform(rng, {in, out}, in, out));
  if (with_bias) l.bias = add_param(tree, prefix + ".bias", zeros({out}));
  return l;
}

LayerNormParams make_layer_norm(ParamTree& tree, const std::string& prefix, std::size_t dim) {
  return {add_param(tree, prefix + ".gain", Tensor({dim}, 1.0)), add_param(tree, prefix + ".bias", zeros({dim}))};
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) { return layer_norm_rows(x, p.gain, p.bias); }

SdpaResult sdpa(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask) {
  if (k.rows() != v.rows()) {
    contract("sdpa: " + std::to_string(k.rows()) + " keys but " + std::to_string(v.rows()) + " values");
  }
  if (q.cols() != k.cols()) {
    contract("sdpa: query dim " + std::to_string(q.cols()) + " != key dim " + std::to_string(k.cols()));
  }
  Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor w = softmax_rows(scores, mask);
  return {matmul(w, v), w};
}

MhaParams make_mha(ParamTree& tree, const std::string& prefix, std::size_t d_model, std::size_t d_att,
                   std::size_t heads, Rng& rng) {
  if (heads == 0 || d_att % heads != 0) {
    contract("mha: d_att " + std::to_string(d_att) + " not divisible by " + std::to_string(heads) + " heads");
  }
  MhaParams p;
  p.query = make_linear(tree, prefix + ".wq", d_model, d_att, rng);
  p.key = make_linear(tree, prefix + ".wk", d_model, d_att, rng);
  p.value = make_linear(tree, prefix + ".wv", d_model, d_att, rng);
  p.output = make_linear(tree, prefix + ".wo", d_att, d_model, rng);
  p.heads = heads;
  p.d_att = d_att;
  return p;
}

MhaResult mha(const Tensor& q, const Tensor& k, const Tensor& v, const MhaParams& p, const AttentionMask* mask) {
  if (p.heads == 0 || p.d_att % p.heads != 0) contract("mha: inconsistent head count");
  Tensor Q = p.query(q), K = p.key(k), V = p.value(v);
  const std::size_t dh = p.d_att / p.heads;
  MhaResult r;
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto head = sdpa(slice_cols(Q, h * dh, (h + 1) * dh), slice_cols(K, h * dh, (h + 1) * dh),
                     slice_cols(V, h * dh, (h + 1) * dh), mask);
    outs.push_back(head.output);
    r.head_weights.push_back(head.weights);
  }
  r.output = p.output(p.heads == 1 ? outs[0] : concat_cols(outs));
  return r;
}

FfnParams make_ffn(ParamTree& tree, const std::string& prefix, std::size_t d_model, std::size_t d_ff, Rng& rng) {
  return {make_linear(tree, prefix + ".w1", d_model, d_ff, rng), make_linear(tree, prefix + ".w2", d_ff, d_model, rng)};
}

Tensor ffn(const Tensor& x, const FfnParams& p) { return p.outer(relu(p.inner(x))); }

Tensor ffn_sublayer(const Tensor& x, const FfnParams& p, const LayerNormParams& norm) {
  if (x.cols() != p.inner.weight.rows()) {
    contract("ffn_sublayer: input " + shape_str(x.shape()) + " vs W1 " + shape_str(p.inner.weight.shape()));
  }
  return layer_norm(add(x, ffn(x, p)), norm);
}

SpeParams make_spe(ParamTree& tree, const std::string& prefix, std::size_t d_model) {
  if (d_model % 2 != 0) contract("spe: d_model must be even, got " + std::to_string(d_model));
  return {add_param(tree, prefix + ".alpha", Tensor::scalar(1.0)), d_model};
}

Tensor sinusoid_table(std::size_t first, std::size_t length, std::size_t d_model) {
  if (d_model % 2 != 0) contract("spe: d_model must be even, got " + std::to_string(d_model));
  Tensor t({length, d_model});
  auto d = t.mutable_data();
  for (std::size_t p = 0; p < length; ++p) {
    const double pos = static_cast<double>(first + p);
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      d[p * d_model + 2 * i] = std::sin(angle);
      d[p * d_model + 2 * i + 1] = std::cos(angle);
    }
  }
  return t;
}

Tensor spe(std::size_t length, const SpeParams& p, std::size_t first_position) {
  if (length == 0) contract("spe: length must be >= 1");
  return scale_by(sinusoid_table(first_position, length, p.d_model), p.alpha);
}

LocAttParams make_location_attention(ParamTree& tree, const std::string& prefix, std::size_t query_dim,
                                     std::size_t key_dim, std::size_t att_dim, std::size_t channels,
                                     std::size_t width, Rng& rng) {
  if (width % 2 == 0) contract("location_attention: filter width must be odd, got " + std::to_string(width));
  LocAttParams p;
  p.query = make_linear(tree, prefix + ".query", query_dim, att_dim, rng, false);
  p.key = make_linear(tree, prefix + ".key", key_dim, att_dim, rng);
  p.loc_filters =
      add_param(tree, prefix + ".loc_conv.weight", xavier_uniform(rng, {channels, 1, width}, width, channels * width));
  p.loc_proj = make_linear(tree, prefix + ".loc_proj", channels, att_dim, rng, false);
  p.score = make_linear(tree, prefix + ".score", att_dim, 1, rng, false);
  return p;
}

Tensor location_keys(const Tensor& h, const LocAttParams& p) { return p.key(h); }

LocAttResult location_attention(const Tensor& query, const Tensor& h, const Tensor& projected_keys,
                                const Tensor& prev_cum_weights, const LocAttParams& p) {
  const std::size_t n = h.rows();
  if (prev_cum_weights.numel() != n) {
    contract("location_attention: cumulative weights of length " + std::to_string(prev_cum_weights.numel()) +
             " for " + std::to_string(n) + " encoder steps");
  }
  for (double w : prev_cum_weights.data()) {
    if (w < 0.0) contract("location_attention: cumulative weights must be non-negative");
  }
  const std::size_t channels = p.loc_filters.dim(0), width = p.loc_filters.dim(2);
  Tensor cum = reshape(prev_cum_weights, {n, 1});
  Tensor loc = conv1d(cum, p.loc_filters, zeros({channels}), 1, width / 2);  // [n x channels]
  Tensor energies = add_row(add(projected_keys, p.loc_proj(loc)), reshape(p.query(query), {p.query.weight.cols()}));
  Tensor scores = reshape(p.score(tanh(energies)), {1, n});
  Tensor a = softmax_rows(scores);
  return {matmul(a, h), a};
}

LocAttResult location_attention(const Tensor& query, const Tensor& h, const Tensor& prev_cum_weights,
                                const LocAttParams& p) {
  return location_attention(query, h, location_keys(h, p), prev_cum_weights, p);
}

DownsampleParams make_downsampler(ParamTree& tree, const std::string& prefix, std::size_t feat_dim,
                                  std::size_t d_model, Rng& rng) {
  if (d_model % 4 != 0) contract("downsample_conv: d_model must be divisible by 4");
  const std::size_t c1 = d_model / 4, c2 = d_model / 2;
  const std::size_t f_out = downsampled_length(feat_dim);
  DownsampleParams p;
  p.conv1_w = add_param(tree, prefix + ".conv1.weight", xavier_uniform(rng, {c1, 1, 3, 3}, 9, c1 * 9));
  p.conv1_b = add_param(tree, prefix + ".conv1.bias", zeros({c1}));
  p.conv2_w = add_param(tree, prefix + ".conv2.weight", xavier_uniform(rng, {c2, c1, 3, 3}, c1 * 9, c2 * 9));
  p.conv2_b = add_param(tree, prefix + ".conv2.bias", zeros({c2}));
  p.proj = make_linear(tree, prefix + ".proj", c2 * f_out, d_model, rng);
  return p;
}

std::size_t downsampled_length(std::size_t n) {
  const std::size_t half = (n + 1) / 2;
  return (half + 1) / 2;
}

Tensor downsample_conv(const Tensor& x, const DownsampleParams& p) {
  if (x.rank() != 2 || x.rows() == 0) contract("downsample_conv: expected a non-empty [n x d_feat] matrix");
  Tensor img = reshape(x, {1, x.rows(), x.cols()});
  Tensor a = relu(conv2d(img, p.conv1_w, p.conv1_b, 2, 1));
  Tensor b = relu(conv2d(a, p.conv2_w, p.conv2_b, 2, 1));
  Tensor flat = time_major(b);
  if (flat.cols() != p.proj.weight.rows()) {
    contract("downsample_conv: " + std::to_string(x.cols()) + " feature bins do not match the projection " +
             shape_str(p.proj.weight.shape()));
  }
  return p.proj(flat);
}

LstmParams make_lstm(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t hidden, Rng& rng) {
  LstmParams p;
  p.w_ih = add_param(tree, prefix + ".w_ih", xavier_uniform(rng, {in, 4 * hidden}, in, 4 * hidden));
  p.w_hh = add_param(tree, prefix + ".w_hh", xavier_uniform(rng, {hidden, 4 * hidden}, hidden, 4 * hidden));
  Tensor b({4 * hidden}, 0.0);
  auto bd = b.mutable_data();
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bd[j] = 1.0;  // forget gate starts open
  p.bias = add_param(tree, prefix + ".bias", std::move(b));
  p.hidden = hidden;
  return p;
}

LstmState lstm_zero_state(std::size_t hidden) { return {zeros({1, hidden}), zeros({1, hidden})}; }

LstmState lstm_step_projected(const Tensor& x_proj, const LstmState& state, const LstmParams& p) {
  const std::size_t H = p.hidden;
  if (x_proj.cols() != 4 * H || state.h.cols() != H || state.c.cols() != H) {
    contract("lstm_step: gate input " + shape_str(x_proj.shape()) + " / state " + shape_str(state.h.shape()) +
             " inconsistent with hidden size " + std::to_string(H));
  }
  Tensor z = add_row(add(x_proj, matmul(state.h, p.w_hh)), p.bias);
  Tensor i = sigmoid(slice_cols(z, 0, H));
  Tensor f = sigmoid(slice_cols(z, H, 2 * H));
  Tensor g = tanh(slice_cols(z, 2 * H, 3 * H));
  Tensor o = sigmoid(slice_cols(z, 3 * H, 4 * H));
  Tensor c = add(mul(f, state.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& p) {
  if (x.cols() != p.w_ih.rows()) {
    contract("lstm_step: input " + shape_str(x.shape()) + " vs w_ih " + shape_str(p.w_ih.shape()));
  }
  return lstm_step_projected(matmul(x, p.w_ih), state, p);
}

Tensor lstm_sequence(const Tensor& x, const LstmParams& p, bool reverse) {
  const std::size_t n = x.rows();
  Tensor proj = matmul(x, p.w_ih);
  LstmState s = lstm_zero_state(p.hidden);
  std::vector<Tensor> out(n);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t t = reverse ? n - 1 - step : step;
    s = lstm_step_projected(slice_rows(proj, t, t + 1), s, p);
    out[t] = s.h;
  }
  return concat_rows(out);
}

Tensor bilstm(const Tensor& x, const LstmParams& forward, const LstmParams& backward) {
  return concat_cols({lstm_sequence(x, forward, false), lstm_sequence(x, backward, true)});
}

PrenetParams make_prenet(ParamTree& tree, const std::string& prefix, std::size_t in, std::size_t dim,
                         double dropout, bool dropout_at_inference, Rng& rng) {
  PrenetParams p;
  p.fc1 = make_linear(tree, prefix + ".fc1", in, dim, rng);
  p.fc2 = make_linear(tree, prefix + ".fc2", dim, dim, rng);
  p.dropout = dropout;
  p.dropout_at_inference = dropout_at_inference;
  return p;
}

Tensor prenet(const Tensor& x, const PrenetParams& p, const ForwardContext& ctx) {
  const bool active = p.dropout > 0.0 && (ctx.training || p.dropout_at_inference);
  if (active && ctx.rng == nullptr) contract("prenet: dropout is active but no RNG was supplied");
  Tensor h = relu(p.fc1(x));
  if (active) h = dropout(h, p.dropout, *ctx.rng);
  h = relu(p.fc2(h));
  if (active) h = dropout(h, p.dropout, *ctx.rng);
  return h;
}

ConvParams make_conv1d(ParamTree& tree, const std::string& prefix, std::size_t cin, std::size_t cout,
                       std::size_t kernel, Rng& rng) {
  if (kernel % 2 == 0) contract("conv1d: kernel must be odd for same padding");
  return {add_param(tree, prefix + ".weight", xavier_uniform(rng, {cout, cin, kernel}, cin * kernel, cout * kernel)),
          add_param(tree, prefix + ".bias", zeros({cout}))};
}

Tensor conv1d_same(const Tensor& x, const ConvParams& p) {
  return conv1d(x, p.weight, p.bias, 1, p.weight.dim(2) / 2);
}

PostnetParams make_postnet(ParamTree& tree, const std::string& prefix, std::size_t feat_dim,
                           std::size_t channels, std::size_t layers, std::size_t kernel, Rng& rng) {
  if (layers == 0) contract("postnet: needs at least one layer");
  PostnetParams p;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t cin = l == 0 ? feat_dim : channels;
    const std::size_t cout = l + 1 == layers ? feat_dim : channels;
    p.convs.push_back(make_conv1d(tree, prefix + ".conv" + std::to_string(l), cin, cout, kernel, rng));
  }
  return p;
}

Tensor postnet(const Tensor& x, const PostnetParams& p, std::size_t valid_rows) {
  Tensor h = x;
  for (std::size_t l = 0; l < p.convs.size(); ++l) {
    h = conv1d_same(mask_rows(h, valid_rows), p.convs[l]);
    if (l + 1 < p.convs.size()) h = tanh(h);
  }
  return mask_rows(h, valid_rows);
}

ConvNormParams make_conv_norm(ParamTree& tree, const std::string& prefix, std::size_t channels,
                              std::size_t kernel, Rng& rng) {
  ConvNormParams p;
  p.conv = make_conv1d(tree, prefix + ".conv", channels, channels, kernel, rng);
  p.gain = add_param(tree, prefix + ".norm.gain", Tensor({channels}, 1.0));
  p.bias = add_param(tree, prefix + ".norm.bias", zeros({channels}));
  return p;
}

Tensor conv_norm_relu(const Tensor& x, const ConvNormParams& p) {
  return relu(instance_norm_cols(conv1d_same(x, p.conv), p.gain, p.bias));
}

}  // namespace seqvc::nn
