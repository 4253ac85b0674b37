#include <cmath>

#include "doctest.h"
#include "seqvc/errors.hpp"
#include "seqvc/grad_check.hpp"
#include "seqvc/objectives.hpp"
#include "test_util.hpp"

using namespace seqvc;
using seqvc::testing::random_away_from_zero;
using seqvc::testing::random_tensor;

namespace {

Tensor uniform_rows(std::size_t rows, std::size_t cols) {
  return Tensor({rows, cols}, 1.0 / static_cast<double>(cols));
}

Tensor random_attention(Rng& rng, std::size_t rows, std::size_t cols) {
  return softmax_rows(random_tensor(rng, {rows, cols}, 2.0));
}

}  // namespace

TEST_CASE("reconstruction loss examples") {
  Rng rng(1);
  const Tensor y = random_tensor(rng, {6, 3});
  CHECK(recon_loss(y, y, y).item() == 0.0);

  const Tensor one = Tensor::matrix({{1.0}});
  const Tensor zero = Tensor::matrix({{0.0}});
  CHECK(recon_loss(one, one, zero).item() == doctest::Approx(4.0));
  CHECK(l1_part(one, one, zero).item() == doctest::Approx(2.0));

  // Padding rows beyond the valid length do not matter.
  const Tensor pre = random_tensor(rng, {6, 3});
  const Tensor post = random_tensor(rng, {6, 3});
  const double base = recon_loss(slice_rows(pre, 0, 4), slice_rows(post, 0, 4), slice_rows(y, 0, 4)).item();
  CHECK(recon_loss(pre, post, y, 4).item() == doctest::Approx(base).epsilon(1e-14));
  const Tensor junk = random_tensor(rng, {6, 3}, 50.0);
  CHECK(recon_loss(concat_rows({slice_rows(pre, 0, 4), slice_rows(junk, 0, 2)}), post, y, 4).item() ==
        doctest::Approx(base).epsilon(1e-14));

  // Hand value: one element off by 0.5 in pre, by -2 in post, over 2 elements.
  const Tensor t = Tensor::matrix({{0.0, 1.0}});
  const double expect = (0.5 / 2 + 2.0 / 2) + (0.25 / 2 + 4.0 / 2);
  CHECK(recon_loss(Tensor::matrix({{0.5, 1.0}}), Tensor::matrix({{0.0, -1.0}}), t).item() ==
        doctest::Approx(expect).epsilon(1e-14));

  CHECK_THROWS_AS(recon_loss(one, one, y), ContractError);
}

TEST_CASE("stop loss examples") {
  const std::vector<double> stop{1.0};
  CHECK(stop_loss(Tensor::matrix({{0.0}}), stop, 5.0).item() == doctest::Approx(5.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(stop_loss(Tensor::matrix({{0.0}}), stop, 5.0).item() == doctest::Approx(3.466).epsilon(1e-3));

  const std::vector<double> targets{0.0, 0.0, 1.0};
  CHECK(stop_loss(Tensor::matrix({{-40.0}, {-40.0}, {40.0}}), targets, 5.0).item() < 1e-15);

  // pos_weight 1 is plain binary cross-entropy.
  const Tensor z = Tensor::matrix({{0.3}, {-1.2}, {2.0}});
  double bce = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z(i, 0)));
    bce += -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
  }
  CHECK(stop_loss(z, targets, 1.0).item() == doctest::Approx(bce / 3.0).epsilon(1e-12));

  const std::vector<double> none{0.0, 0.0};
  CHECK_THROWS_AS(stop_loss(Tensor::matrix({{0.0}, {0.0}}), none, 5.0), ContractError);

  CHECK(stop_targets(3, 6, 2) == std::vector<double>{0, 0, 1});
  CHECK(stop_targets(3, 5, 2) == std::vector<double>{0, 0, 1});
  CHECK(stop_targets(4, 5, 2) == std::vector<double>{0, 0, 1, 0});
}

TEST_CASE("guided attention examples") {
  // Diagonal one-hot attention costs nothing.
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  CHECK(guided_attention_loss(eye, 0.2).item() == 0.0);

  CHECK(guided_attention_loss(uniform_rows(2, 2), 0.2).item() ==
        doctest::Approx(2.0 * 0.5 * (1.0 - std::exp(-3.125)) / 4.0).epsilon(1e-12));
  CHECK(guided_attention_loss(uniform_rows(2, 2), 0.2).item() == doctest::Approx(0.239).epsilon(1e-3));

  // Moving mass toward the diagonal lowers the loss monotonically.
  double prev = 1e9;
  for (double on : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const Tensor a = Tensor::matrix({{on, 1.0 - on}, {1.0 - on, on}});
    const double v = guided_attention_loss(a, 0.2).item();
    CHECK(v < prev);
    prev = v;
  }

  // Transposing the map and swapping the lengths gives the same loss.
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    const Tensor a = random_attention(rng, 5, 7);
    CHECK(guided_attention_loss(a, 0.3).item() ==
          doctest::Approx(guided_attention_loss(transpose(a), 0.3).item()).epsilon(1e-12));
  }
}

TEST_CASE("guided map selection") {
  Rng rng(4);
  std::vector<std::vector<Tensor>> att(3);
  for (auto& layer : att) {
    for (int h = 0; h < 4; ++h) layer.push_back(random_attention(rng, 4, 5));
  }
  LossWeights w;
  CHECK(guided_maps(att, Architecture::vtn, w).size() == 6);
  w.guided_layers = {2};
  w.guided_heads = {3};
  auto maps = guided_maps(att, Architecture::vtn, w);
  REQUIRE(maps.size() == 1);
  CHECK(maps[0] == std::pair<std::size_t, std::size_t>{2, 3});
  CHECK(guided_attention_part(att, Architecture::vtn, w).item() ==
        doctest::Approx(guided_attention_loss(att[2][3], 0.2).item()));
  CHECK(guided_maps(att, Architecture::rnn, w).size() == 1);
  w.guided_heads.clear();
  CHECK_FALSE(guided_attention_part(att, Architecture::vtn, w).defined());
  w.guided_heads = {7};
  CHECK_THROWS_AS(guided_maps(att, Architecture::vtn, w), ContractError);
}

TEST_CASE("compose_total examples") {
  LossParts parts;
  parts.l1 = Tensor::scalar(1.0);
  parts.l2 = Tensor::scalar(2.0);
  parts.stop = Tensor::scalar(3.0);
  LossWeights w;
  w.l1 = 1.0;
  w.l2 = 0.5;
  w.stop = 0.1;
  auto r = compose_total(parts, w, OutputKind::speech);
  CHECK(r.total.item() == doctest::Approx(2.3).epsilon(1e-14));
  CHECK(r.parts.at("l2") == 2.0);

  w = LossWeights{};
  w.l2 = w.stop = w.ga = 0.0;
  parts.ga = Tensor::scalar(0.7);
  CHECK(compose_total(parts, w, OutputKind::speech).total.item() == 1.0);

  parts.extra["context"] = Tensor::scalar(4.0);
  CHECK_THROWS_AS(compose_total(parts, w, OutputKind::speech), ContractError);
  w.extra["context"] = 0.5;
  CHECK(compose_total(parts, w, OutputKind::speech).total.item() == 3.0);

  LossParts missing;
  missing.l1 = Tensor::scalar(1.0);
  CHECK_THROWS_AS(compose_total(missing, w, OutputKind::speech), ContractError);
  CHECK_THROWS_AS(compose_total(missing, w, OutputKind::text), ContractError);

  w.ga_sigma = 0.0;
  CHECK_THROWS_AS(validate(w), ContractError);
}

TEST_CASE("objective with empty guidance ignores attention maps") {
  Rng rng(5);
  ModelConfig c;
  auto m = build_model(c, 1);
  const Tensor h = encode(m, random_tensor(rng, {12, 20}));
  const Tensor y = random_tensor(rng, {10, 20});
  auto out = decode_teacher_forced(m, h, y);
  LossWeights w;
  const double guided = speech_objective(out, y, 10, c, w).total.item();
  w.guided_heads.clear();
  const double unguided = speech_objective(out, y, 10, c, w).total.item();
  for (auto& layer : out.attention) {
    for (auto& a : layer) a = uniform_rows(a.rows(), a.cols());
  }
  CHECK(speech_objective(out, y, 10, c, w).total.item() == unguided);
  CHECK(guided > unguided);
}

TEST_CASE("loss gradients pass grad_check") {
  Rng rng(6);
  const Tensor y = random_tensor(rng, {5, 3});
  auto check = [](const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> point) {
    auto r = grad_check(f, std::move(point), 1e-6, 1e-4);
    INFO("worst " << r.worst << " " << r.max_rel_error);
    CHECK(r.pass);
  };
  check([&](const auto& p) { return recon_loss(p[0], p[1], y, 4); },
        {add(y, random_away_from_zero(rng, {5, 3})), add(y, random_away_from_zero(rng, {5, 3}))});
  const std::vector<double> targets{0, 0, 0, 1};
  check([&](const auto& p) { return stop_loss(p[0], targets, 5.0); }, {random_tensor(rng, {4, 1})});
  check([&](const auto& p) { return guided_attention_loss(softmax_rows(p[0]), 0.2); }, {random_tensor(rng, {4, 6})});
  const std::vector<int> ids{1, 0, 3};
  check([&](const auto& p) { return text_cross_entropy(p[0], ids); }, {random_tensor(rng, {3, 4})});
}
