#include "seqvc/grad_suite.hpp"

#include "seqvc/grad_check.hpp"
#include "seqvc/nn.hpp"
#include "seqvc/objectives.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

namespace {

using namespace nn;

constexpr double kLayerTol = 1e-4;
constexpr double kModelTol = 1e-3;

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v));
}

// Magnitudes in [0.1, 1.5] keep abs/relu kinks out of reach of eps.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(0.1, 1.5);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(std::move(shape), std::move(v));
}

// Random projection to a scalar so every output element contributes.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& v : w) v = rng.normal();
  return sum(mul_const(y, w));
}

std::vector<NamedTensor> named(const ParamTree& tree) {
  std::vector<NamedTensor> out;
  for (const auto& [path, t] : tree.entries()) out.push_back({path, t});
  return out;
}

GradSuiteRow row(const std::string& name, const GradCheckReport& r, double tol) {
  return {name, r.max_rel_error, tol, r.checked, r.skipped, r.worst, r.pass && r.checked > 0};
}

GradSuiteRow check(const std::string& name, const std::function<Tensor()>& f, std::vector<NamedTensor> wrt) {
  GradCheckOptions o;
  o.tol = kLayerTol;
  return row(name, grad_check(f, std::move(wrt), o), kLayerTol);
}

void layer_rows(std::vector<GradSuiteRow>& out, Rng& rng) {
  {
    ParamTree tree;
    auto p = make_mha(tree, "mha", 4, 4, 2, rng);
    const Tensor x = random_tensor(rng, {3, 4});
    const Tensor mem = random_tensor(rng, {5, 4});
    const AttentionMask causal = AttentionMask::causal(3);
    out.push_back(check("mha.self_causal", [&] { return probe(mha(x, x, x, p, &causal).output, 1); }, named(tree)));
    out.push_back(check("mha.cross", [&] { return probe(mha(x, mem, mem, p).output, 2); }, named(tree)));
    Tensor q = random_tensor(rng, {3, 2});
    Tensor k = random_tensor(rng, {4, 2});
    Tensor v = random_tensor(rng, {4, 3});
    out.push_back(check("sdpa", [&] { return probe(sdpa(q, k, v).output, 3); }, {{"q", q}, {"k", k}, {"v", v}}));
  }
  {
    ParamTree tree;
    auto p = make_ffn(tree, "ffn", 4, 6, rng);
    auto ln = make_layer_norm(tree, "ln", 4);
    const Tensor x = random_tensor(rng, {3, 4});
    out.push_back(check("ffn_sublayer", [&] { return probe(ffn_sublayer(x, p, ln), 4); }, named(tree)));
  }
  {
    ParamTree tree;
    auto p = make_layer_norm(tree, "ln", 5);
    Tensor x = random_tensor(rng, {3, 5});
    auto wrt = named(tree);
    wrt.push_back({"x", x});
    out.push_back(check("layer_norm", [&] { return probe(layer_norm(x, p), 5); }, wrt));
  }
  {
    ParamTree tree;
    auto p = make_spe(tree, "spe", 6);
    out.push_back(check("spe", [&] { return probe(spe(4, p), 6); }, named(tree)));
  }
  {
    ParamTree tree;
    auto p = make_location_attention(tree, "att", 3, 4, 5, 2, 5, rng);
    const Tensor q = random_tensor(rng, {1, 3});
    const Tensor h = random_tensor(rng, {6, 4});
    const Tensor cum = Tensor::matrix(1, 6, {0.0, 0.3, 1.1, 0.5, 0.1, 0.0});
    out.push_back(check(
        "location_attention",
        [&] {
          auto r = location_attention(q, h, cum, p);
          return add(probe(r.context, 7), probe(r.weights, 8));
        },
        named(tree)));
  }
  {
    ParamTree tree;
    auto p = make_downsampler(tree, "ds", 6, 8, rng);
    const Tensor x = random_tensor(rng, {5, 6});
    out.push_back(check("downsampler", [&] { return probe(downsample_conv(x, p), 9); }, named(tree)));
  }
  {
    ParamTree tree;
    auto f = make_lstm(tree, "f", 3, 2, rng);
    auto b = make_lstm(tree, "b", 3, 2, rng);
    const Tensor x = random_tensor(rng, {4, 3});
    out.push_back(check("bilstm", [&] { return probe(bilstm(x, f, b), 10); }, named(tree)));
  }
  {
    ParamTree tree;
    auto pre = make_prenet(tree, "prenet", 3, 5, 0.5, false, rng);
    const Tensor x = random_tensor(rng, {6, 3});
    out.push_back(check("prenet", [&] { return probe(prenet(x, pre, ForwardContext{}), 11); }, named(tree)));
  }
  {
    ParamTree tree;
    auto post = make_postnet(tree, "postnet", 3, 4, 3, 5, rng);
    const Tensor x = random_tensor(rng, {6, 3});
    out.push_back(check("postnet", [&] { return probe(postnet(x, post, 5), 12); }, named(tree)));
  }
  {
    ParamTree tree;
    auto block = make_conv_norm(tree, "block", 4, 3, rng);
    const Tensor x = random_tensor(rng, {6, 4});
    out.push_back(check("conv_norm_relu", [&] { return probe(conv_norm_relu(x, block), 13); }, named(tree)));
  }
}

void loss_rows(std::vector<GradSuiteRow>& out, Rng& rng) {
  const Tensor y = random_tensor(rng, {5, 3});
  Tensor pre = add(y, away_from_zero(rng, {5, 3}));
  Tensor post = add(y, away_from_zero(rng, {5, 3}));
  out.push_back(check("loss.l1", [&] { return l1_part(pre, post, y, 4); }, {{"pre", pre}, {"post", post}}));
  out.push_back(check("loss.l2", [&] { return l2_part(pre, post, y, 4); }, {{"pre", pre}, {"post", post}}));
  Tensor logits = random_tensor(rng, {4, 1});
  const std::vector<double> targets{0, 0, 0, 1};
  out.push_back(check("loss.stop", [&] { return stop_loss(logits, targets, 5.0); }, {{"logits", logits}}));
  Tensor scores = random_tensor(rng, {4, 6});
  out.push_back(check("loss.guided_attention", [&] { return guided_attention_loss(softmax_rows(scores), 0.2); },
                      {{"scores", scores}}));
  Tensor token_logits = random_tensor(rng, {3, 4});
  const std::vector<int> ids{1, 0, 3};
  out.push_back(check("loss.cross_entropy", [&] { return text_cross_entropy(token_logits, ids); },
                      {{"logits", token_logits}}));
}

GradSuiteRow model_row(const ModelConfig& base, Architecture arch, Task task, Rng& rng, std::uint64_t seed,
                       std::size_t coords) {
  ModelConfig c = base;
  c.architecture = arch;
  c.task = task;
  c.vocab = task == Task::vc ? 0 : 9;
  const auto m = build_model(c, seed);
  const std::size_t F = c.feat_dim;
  struct Utt {
    Tensor x;
    std::vector<int> ids;
    Tensor y;
  };
  std::vector<Utt> batch;
  for (std::size_t n : {6, 9}) {
    Utt u;
    u.x = random_tensor(rng, {n, F});
    for (std::size_t i = 0; i + 2 < n; ++i) u.ids.push_back(static_cast<int>(rng.index(7)));
    u.y = random_tensor(rng, {c.reduction * ((n + c.reduction - 1) / c.reduction), F});
    batch.push_back(u);
  }
  const LossWeights w;
  auto loss = [&] {
    Tensor total;
    for (const auto& u : batch) {
      const Tensor h = task == Task::tts ? encode(m, u.ids) : encode(m, u.x);
      Tensor part;
      if (task == Task::asr) {
        part = text_objective(decode_text_teacher_forced(m, h, u.ids), u.ids, c, w).total;
      } else {
        part = speech_objective(decode_teacher_forced(m, h, u.y, u.y.rows()), u.y, u.y.rows(), c, w).total;
      }
      total = total.defined() ? add(total, part) : part;
    }
    return scale(total, 0.5);
  };
  GradCheckOptions o;
  o.tol = kModelTol;
  o.max_coords_per_tensor = coords;
  o.sample_seed = seed;
  return row("model." + to_string(arch) + "." + to_string(task), grad_check(loss, named(m.params), o), kModelTol);
}

}  // namespace

std::vector<GradSuiteRow> run_gradient_suite(const ModelConfig& model, std::uint64_t seed,
                                             std::size_t coords_per_tensor) {
  validate(model);
  Rng rng(seed);
  std::vector<GradSuiteRow> out;
  layer_rows(out, rng);
  loss_rows(out, rng);
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    for (auto task : {Task::vc, Task::tts, Task::asr}) {
      out.push_back(model_row(model, arch, task, rng, seed, coords_per_tensor));
    }
  }
  return out;
}

}  // namespace seqvc
