#include <cmath>

#include "doctest.h"
#include "seqvc/errors.hpp"
#include "seqvc/grad_check.hpp"
#include "seqvc/model.hpp"
#include "test_util.hpp"

using namespace seqvc;
using seqvc::testing::random_tensor;

namespace {

ModelConfig toy(Architecture arch, Task task = Task::vc) {
  ModelConfig c;
  c.architecture = arch;
  c.task = task;
  c.vocab = task == Task::vc ? 0 : 9;
  return c;
}

// Small enough for full finite-difference sweeps.
ModelConfig tiny(Architecture arch, Task task = Task::vc) {
  ModelConfig c = toy(arch, task);
  c.d_model = 8;
  c.heads = 2;
  c.layers = 1;
  c.d_ff = 8;
  c.feat_dim = 4;
  c.prenet_dim = 6;
  c.postnet_channels = 4;
  c.postnet_layers = 2;
  c.postnet_kernel = 3;
  c.rnn_conv_layers = 1;
  c.rnn_conv_kernel = 3;
  c.loc_channels = 2;
  c.loc_width = 3;
  c.vocab = task == Task::vc ? 0 : 6;
  return c;
}

std::size_t lin(std::size_t i, std::size_t o) { return i * o + o; }

std::size_t postnet_count(const ModelConfig& c) {
  const std::size_t C = c.postnet_channels, F = c.feat_dim, k = c.postnet_kernel;
  return (F * C * k + C) + (c.postnet_layers - 2) * (C * C * k + C) + (C * F * k + F);
}

std::size_t lstm_count(std::size_t in, std::size_t h) { return in * 4 * h + h * 4 * h + 4 * h; }

void fill(Tensor t, double v) { std::fill(t.mutable_data().begin(), t.mutable_data().end(), v); }

}  // namespace

TEST_CASE("build_model is deterministic and names parameters by subtree") {
  const auto c = toy(Architecture::vtn);
  auto a = build_model(c, 42);
  auto b = build_model(c, 42);
  auto other = build_model(c, 43);
  CHECK(bit_equal(a.params, b.params));
  CHECK_FALSE(bit_equal(a.params, other.params));

  CHECK(a.params.contains("encoder.layer0.mha.wq.weight"));
  CHECK(a.params.contains("decoder.layer1.ffn.w1.weight"));
  CHECK(a.params.contains("decoder.layer1.cross_mha.wo.bias"));
  CHECK(a.params.contains("decoder.stop_out.bias"));
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    for (auto task : {Task::vc, Task::tts, Task::asr}) {
      auto m = build_model(toy(arch, task), 1);
      std::size_t enc = m.params.paths_with_prefix("encoder.").size();
      std::size_t dec = m.params.paths_with_prefix("decoder.").size();
      CHECK(enc > 0);
      CHECK(dec > 0);
      CHECK(enc + dec == m.params.size());
    }
  }
}

TEST_CASE("parameter count matches layer shapes") {
  SUBCASE("vtn") {
    const auto c = toy(Architecture::vtn);
    const std::size_t d = c.d_model, F = c.feat_dim, P = c.prenet_dim, r = c.reduction;
    const std::size_t c1 = d / 4, c2 = d / 2, fo = 5;  // 20 bins -> 10 -> 5
    const std::size_t mha = 4 * lin(d, d), ffn = lin(d, c.d_ff) + lin(c.d_ff, d), ln = 2 * d;
    const std::size_t encoder = (c1 * 9 + c1) + (c2 * c1 * 9 + c2) + lin(c2 * fo, d) + 1 + c.layers * (mha + 2 * ln + ffn);
    const std::size_t decoder = lin(F, P) + lin(P, P) + lin(P, d) + 1 + c.layers * (2 * mha + 3 * ln + ffn) +
                                lin(d, r * F) + lin(d, 1) + postnet_count(c);
    auto m = build_model(c, 0);
    CHECK(m.params.parameter_count() == encoder + decoder);
  }
  SUBCASE("rnn") {
    const auto c = toy(Architecture::rnn);
    const std::size_t d = c.d_model, F = c.feat_dim, P = c.prenet_dim, r = c.reduction, k = c.rnn_conv_kernel;
    const std::size_t encoder = lin(F, d) + c.rnn_conv_layers * (d * d * k + d + 2 * d) + 2 * lstm_count(d, d / 2);
    const std::size_t attention = d * d + lin(d, d) + c.loc_channels * c.loc_width + c.loc_channels * d + d;
    const std::size_t decoder = lin(F, P) + lin(P, P) + attention + lstm_count(P + d, d) + lstm_count(d, d) +
                                lin(2 * d, r * F) + lin(2 * d, 1) + postnet_count(c);
    auto m = build_model(c, 0);
    CHECK(m.params.parameter_count() == encoder + decoder);
  }
}

TEST_CASE("config validation and json") {
  auto bad = toy(Architecture::vtn);
  bad.vocab = 10;
  CHECK_THROWS_AS(build_model(bad, 0), ContractError);
  bad = toy(Architecture::vtn);
  bad.heads = 3;
  CHECK_THROWS_AS(build_model(bad, 0), ContractError);
  bad = toy(Architecture::rnn, Task::tts);
  bad.vocab = 0;
  CHECK_THROWS_AS(build_model(bad, 0), ContractError);
  bad = toy(Architecture::vtn);
  bad.reduction = 0;
  CHECK_THROWS_AS(validate(bad), ContractError);

  auto c = toy(Architecture::rnn, Task::asr);
  c.reduction = 3;
  c.stop_threshold = 0.7;
  nlohmann::json j = c;
  ModelConfig back = j.get<ModelConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.architecture == Architecture::rnn);
  CHECK(back.reduction == 3);

  j["d_modle"] = 4;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ContractError);
}

TEST_CASE("encoder output shapes") {
  Rng rng(3);
  auto vtn = build_model(toy(Architecture::vtn), 0);
  CHECK(encode(vtn, random_tensor(rng, {16, 20})).shape() == Shape{4, 32});
  CHECK(encode(vtn, random_tensor(rng, {1, 20})).rows() == 1);
  auto rnn = build_model(toy(Architecture::rnn), 0);
  CHECK(encode(rnn, random_tensor(rng, {7, 20})).shape() == Shape{7, 32});

  auto wide = toy(Architecture::vtn);
  wide.d_model = 64;
  CHECK(encode(build_model(wide, 0), random_tensor(rng, {16, 20})).cols() == 64);

  auto tts = build_model(toy(Architecture::vtn, Task::tts), 0);
  const std::vector<int> ids{1, 2, 3, 0, 4};
  CHECK(encode(tts, ids).shape() == Shape{5, 32});
  CHECK_THROWS_AS(encode(tts, random_tensor(rng, {4, 20})), ContractError);
  CHECK_THROWS_AS(encode(vtn, ids), ContractError);
  CHECK_THROWS_AS(encode(vtn, Tensor(Shape{0, 20})), ContractError);
}

TEST_CASE("teacher-forced decoding shapes") {
  Rng rng(4);
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    auto c = toy(arch);
    c.reduction = 1;
    auto m1 = build_model(c, 0);
    const Tensor h = random_tensor(rng, {5, 32});
    auto out = decode_teacher_forced(m1, h, random_tensor(rng, {7, 20}));
    CHECK(out.steps == 7);
    CHECK(out.stop_logits.rows() == 7);

    c.reduction = 2;
    auto m2 = build_model(c, 0);
    out = decode_teacher_forced(m2, h, random_tensor(rng, {6, 20}));
    CHECK(out.steps == 3);
    CHECK(out.pre.shape() == Shape{6, 20});
    CHECK(out.post.shape() == Shape{6, 20});
    for (const auto& layer : out.attention) {
      for (const auto& w : layer) CHECK(w.shape() == Shape{3, 5});
    }
    CHECK_THROWS_AS(decode_teacher_forced(m2, h, random_tensor(rng, {5, 20})), ContractError);

    // A zero final postnet layer adds nothing.
    const auto& postnet = arch == Architecture::vtn ? m2.vtn_decoder.postnet : m2.rnn_decoder.postnet;
    fill(postnet.convs.back().weight, 0.0);
    fill(postnet.convs.back().bias, 0.0);
    out = decode_teacher_forced(m2, h, random_tensor(rng, {6, 20}));
    CHECK(out.post.to_vector() == out.pre.to_vector());
  }
}

TEST_CASE("decoder inputs use the last frame of each previous group") {
  const Tensor y = Tensor::matrix({{1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}, {6, 6}});
  const Tensor x = shifted_decoder_inputs(y, 2);
  CHECK(x.to_vector() == std::vector<double>{0, 0, 2, 2, 4, 4});
  CHECK(shifted_decoder_inputs(y, 1).to_vector() == std::vector<double>{0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5});
}

TEST_CASE("future target frames do not affect earlier teacher-forced outputs") {
  Rng rng(5);
  auto m = build_model(toy(Architecture::vtn), 7);
  const Tensor h = encode(m, random_tensor(rng, {12, 20}));
  const Tensor y = random_tensor(rng, {12, 20});
  Tensor y2 = y.clone();
  // Frames 6.. feed decoder steps 4.. (r = 2).
  for (std::size_t i = 6 * 20; i < y2.numel(); ++i) y2.mutable_data()[i] += 3.0;
  auto a = decode_teacher_forced(m, h, y);
  auto b = decode_teacher_forced(m, h, y2);
  for (std::size_t i = 0; i < 8 * 20; ++i) CHECK(a.pre.data()[i] == b.pre.data()[i]);
  for (std::size_t t = 0; t < 4; ++t) CHECK(a.stop_logits(t, 0) == b.stop_logits(t, 0));
  CHECK(a.pre(8, 0) != b.pre(8, 0));
}

TEST_CASE("autoregressive decoding") {
  Rng rng(6);
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    INFO(to_string(arch));
    auto m = build_model(toy(arch), 11);
    const Tensor h = encode(m, random_tensor(rng, {9, 20}));
    const auto& stop = arch == Architecture::vtn ? m.vtn_decoder.stop_out : m.rnn_decoder.stop_out;

    SUBCASE("immediate stop") {
      fill(stop.weight, 0.0);
      fill(stop.bias, 50.0);
      auto r = decode_autoregressive(m, h);
      CHECK(r.stopped_by == StopReason::threshold);
      CHECK(r.features.rows() == 2);
      CHECK(r.stop_probs.size() == 1);
    }
    SUBCASE("length cap") {
      fill(stop.weight, 0.0);
      fill(stop.bias, -50.0);
      auto r = decode_autoregressive(m, h);
      const std::size_t cap = max_decode_steps(m.config, h.rows());
      CHECK(cap == static_cast<std::size_t>(std::ceil(10.0 * static_cast<double>(h.rows()))));
      CHECK(r.stopped_by == StopReason::max_length);
      CHECK(r.features.rows() == 2 * cap);
      for (const auto& layer : r.attention) {
        for (const auto& w : layer) {
          CHECK(w.rows() == cap);
          for (std::size_t t = 0; t < w.rows(); ++t) {
            double s = 0.0;
            for (std::size_t k = 0; k < w.cols(); ++k) s += w(t, k);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
          }
        }
      }
    }
    SUBCASE("teacher forcing on the generated frames reproduces every step") {
      fill(stop.bias, -4.0);
      auto r = decode_autoregressive(m, h);
      auto tf = decode_teacher_forced(m, h, r.pre_features);
      REQUIRE(tf.pre.numel() == r.pre_features.numel());
      CHECK(tf.pre.to_vector() == r.pre_features.to_vector());
      CHECK(tf.post.to_vector() == r.features.to_vector());
      for (std::size_t l = 0; l < r.attention.size(); ++l) {
        for (std::size_t k = 0; k < r.attention[l].size(); ++k) {
          CHECK(tf.attention[l][k].to_vector() == r.attention[l][k].to_vector());
        }
      }
    }
  }
}

TEST_CASE("autoregressive output is a bounded multiple of r") {
  Rng rng(8);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto c = toy(seed % 2 ? Architecture::rnn : Architecture::vtn);
    c.reduction = 1 + seed % 3;
    c.max_length_ratio = 2.0;
    auto m = build_model(c, seed);
    const std::size_t n = 1 + rng.index(10);
    const Tensor h = encode(m, random_tensor(rng, {n, 20}));
    auto r = decode_autoregressive(m, h);
    CHECK(r.features.rows() % c.reduction == 0);
    CHECK(r.features.rows() <= c.reduction * max_decode_steps(c, h.rows()));
  }
}

TEST_CASE("greedy text decoding") {
  Rng rng(9);
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    auto m = build_model(toy(arch, Task::asr), 2);
    const Tensor h = encode(m, random_tensor(rng, {12, 20}));
    const auto& out = arch == Architecture::vtn ? m.vtn_decoder.token_out : m.rnn_decoder.token_out;

    auto ids = decode_text(m, h);
    CHECK(ids.size() <= 2 * h.rows());
    // Each emitted symbol is the argmax of the teacher-forced logits at its step.
    auto tf = decode_text_teacher_forced(m, h, ids);
    for (std::size_t t = 0; t < tf.steps; ++t) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < m.config.vocab; ++k) {
        if (tf.token_logits(t, k) > tf.token_logits(t, best)) best = k;
      }
      if (t < ids.size()) {
        CHECK(static_cast<int>(best) == ids[t]);
      } else if (ids.size() < 2 * h.rows()) {
        CHECK(static_cast<int>(best) == m.config.eos());
      }
    }

    fill(out.weight, 0.0);
    fill(out.bias, 0.0);
    Tensor(out.bias).mutable_data()[static_cast<std::size_t>(m.config.eos())] = 100.0;
    CHECK(decode_text(m, h).empty());
  }
}

TEST_CASE("clone copies values into independent storage") {
  auto m = build_model(toy(Architecture::rnn), 5);
  auto c = m.clone();
  CHECK(bit_equal(m.params, c.params));
  c.params.at("decoder.stop_out.bias").mutable_data()[0] += 1.0;
  CHECK_FALSE(bit_equal(m.params, c.params));
  CHECK(c.rnn_decoder.stop_out.bias.same_storage(c.params.at("decoder.stop_out.bias")));
}

TEST_CASE("end-to-end gradients pass finite differences") {
  Rng rng(12);
  for (auto arch : {Architecture::vtn, Architecture::rnn}) {
    for (auto task : {Task::vc, Task::tts, Task::asr}) {
      INFO(to_string(arch) << " " << to_string(task));
      auto m = build_model(tiny(arch, task), 3);
      struct Utt {
        Tensor x;
        std::vector<int> ids;
        Tensor y;
      };
      std::vector<Utt> batch;
      for (std::size_t n : {5, 7}) {
        Utt u;
        u.x = random_tensor(rng, {n, 4});
        for (std::size_t i = 0; i < n - 2; ++i) u.ids.push_back(static_cast<int>(rng.index(4)));
        u.y = random_tensor(rng, {2 * (n / 2), 4});
        batch.push_back(u);
      }
      auto loss = [&] {
        Tensor total = Tensor::scalar(0.0);
        for (const auto& u : batch) {
          const Tensor h = task == Task::tts ? encode(m, u.ids) : encode(m, u.x);
          if (task == Task::asr) {
            auto out = decode_text_teacher_forced(m, h, u.ids);
            std::vector<int> target(u.ids);
            target.push_back(m.config.eos());
            total = add(total, cross_entropy_rows(out.token_logits, target));
          } else {
            auto out = decode_teacher_forced(m, h, u.y);
            std::vector<double> stop(out.steps, 0.0);
            stop.back() = 1.0;
            total = add(total, add(mean(square(sub(out.pre, u.y))), mean(abs(sub(out.post, u.y)))));
            total = add(total, mean(bce_with_logits(out.stop_logits, stop, 5.0)));
          }
        }
        return scale(total, 0.5);
      };
      std::vector<NamedTensor> wrt;
      for (const auto& [path, t] : m.params.entries()) wrt.push_back({path, t});
      GradCheckOptions opt;
      opt.tol = 1e-3;
      opt.max_coords_per_tensor = 12;
      opt.sample_seed = 99;
      auto report = grad_check(loss, wrt, opt);
      INFO("worst " << report.worst << " rel " << report.max_rel_error);
      CHECK(report.pass);
      CHECK(report.checked > 100);
    }
  }
}
