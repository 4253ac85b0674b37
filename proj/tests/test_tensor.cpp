#include <cmath>

#include "doctest.h"
#include "seqvc/errors.hpp"
#include "seqvc/grad_check.hpp"
#include "seqvc/tensor.hpp"
#include "test_util.hpp"

using namespace seqvc;
using seqvc::testing::random_away_from_zero;
using seqvc::testing::random_tensor;

namespace {

void check_all_close(std::span<const double> a, std::span<const double> b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

GradCheckReport check_fn(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> point) {
  return grad_check(f, std::move(point), 1e-6, 1e-4);
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  // Hand multiplication: [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8].
  CHECK(c(0, 0) == 19);
  CHECK(c(0, 1) == 22);
  CHECK(c(1, 0) == 43);
  CHECK(c(1, 1) == 50);

  Rng rng(3);
  const Tensor m = random_tensor(rng, {2, 5});
  const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor same = matmul(id, m);
  CHECK(std::equal(same.data().begin(), same.data().end(), m.data().begin()));
}

TEST_CASE("matmul shape mismatch names op and shapes") {
  const Tensor a(Shape{2, 3});
  const Tensor b(Shape{2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("non-finite output raises NumericError") {
  const Tensor x = Tensor::vector({-1.0});
  CHECK_THROWS_AS((void)log(x), NumericError);
}

TEST_CASE("softmax basics") {
  const Tensor s = softmax_rows(Tensor::matrix({{0, 0}}));
  CHECK(s(0, 0) == doctest::Approx(0.5));
  CHECK(s(0, 1) == doctest::Approx(0.5));

  Rng rng(11);
  const Tensor x = random_tensor(rng, {6, 9}, 4.0);
  const Tensor y = softmax_rows(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      CHECK(y(i, j) >= 0.0);
      total += y(i, j);
    }
    CHECK(std::fabs(total - 1.0) <= 1e-6);
  }

  const AttentionMask causal = AttentionMask::causal(3);
  const Tensor masked = softmax_rows(random_tensor(rng, {3, 3}), &causal);
  CHECK(masked(0, 1) == 0.0);
  CHECK(masked(0, 2) == 0.0);
  CHECK(masked(1, 2) == 0.0);
  CHECK(masked(0, 0) == 1.0);

  AttentionMask none{1, 2, {0, 0}};
  CHECK_THROWS_AS((void)softmax_rows(Tensor::matrix({{1, 2}}), &none), ContractError);
}

TEST_CASE("backward examples") {
  SUBCASE("sum of squares") {
    TapeScope scope;
    Tensor x = Tensor::vector({1, 2});
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  SUBCASE("softmax sums to one identically") {
    TapeScope scope;
    Tensor x = Tensor::matrix({{0.3, -1.2, 2.0}});
    x.set_requires_grad(true);
    backward(sum(softmax_rows(x)));
    for (double g : x.grad()) CHECK(std::fabs(g) < 1e-15);
  }
  SUBCASE("L1 of a 2x2 linear map matches central differences") {
    const Tensor W = Tensor::matrix({{0.5, -1.0}, {2.0, 0.25}});
    const Tensor x = Tensor::matrix({{1.5}, {-0.7}});
    const Tensor y = Tensor::matrix({{0.1}, {0.2}});
    const auto report = grad_check(
        [&](const std::vector<Tensor>& p) { return sum(abs(sub(matmul(p[0], p[1]), y))); }, {W, x}, 1e-6,
        1e-6);
    CHECK(report.pass);
    CHECK(report.skipped == 0);
  }
  SUBCASE("non-scalar loss is rejected") {
    TapeScope scope;
    Tensor x = Tensor::vector({1, 2});
    x.set_requires_grad(true);
    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
  }
  SUBCASE("unreachable parameters keep zero grad") {
    TapeScope scope;
    Tensor a = Tensor::vector({1, 2});
    Tensor b = Tensor::vector({3});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    backward(sum(a));
    CHECK(b.grad()[0] == 0.0);
  }
}

TEST_CASE("grad_check examples") {
  Rng rng(5);
  SUBCASE("linear function is exact") {
    // Integer point and a power-of-two step keep every evaluation exact.
    const Tensor x = Tensor::vector({3, -1, 4, 1, -5, 9, 2});
    const auto r = grad_check([](const std::vector<Tensor>& p) { return sum(p[0]); }, {x}, 0x1.0p-10, 1e-4);
    CHECK(r.pass);
    CHECK(r.max_rel_error == 0.0);
    const auto loose = check_fn([](const std::vector<Tensor>& p) { return sum(p[0]); }, {random_tensor(rng, {7})});
    CHECK(loose.max_rel_error < 1e-8);
  }
  SUBCASE("layer-norm composite") {
    const Tensor x = random_tensor(rng, {1, 4});
    const Tensor g = random_tensor(rng, {4});
    const Tensor b = random_tensor(rng, {4});
    const Tensor w = random_tensor(rng, {4, 3});
    const auto r = grad_check(
        [](const std::vector<Tensor>& p) {
          return sum(tanh(matmul(layer_norm_rows(p[0], p[1], p[2]), p[3])));
        },
        {x, g, b, w}, 1e-5, 1e-4);
    CHECK(r.pass);
  }
  SUBCASE("relu kink coordinate is excluded") {
    const Tensor x = Tensor::vector({0.0, 1.0, -2.0});
    const auto r = check_fn([](const std::vector<Tensor>& p) { return sum(relu(p[0])); }, {x});
    CHECK(r.pass);
    CHECK(r.skipped == 1);
    CHECK(r.checked == 2);
  }
}

TEST_CASE("every differentiable op passes grad_check") {
  Rng rng(42);
  using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    Fn f;
    std::vector<Tensor> point;
  };
  const Tensor probe = random_tensor(rng, {3, 4});
  // Weighted sum so every output coordinate carries a distinct weight.
  const auto readout = [](const Tensor& t) {
    std::vector<double> w(t.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum(mul_const(t, w));
  };
  const AttentionMask causal = AttentionMask::causal(4);
  std::vector<Case> cases = {
      {"matmul", [&](auto& p) { return readout(matmul(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})}},
      {"matmul_nt", [&](auto& p) { return readout(matmul_nt(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {5, 4})}},
      {"transpose", [&](auto& p) { return readout(transpose(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"add", [&](auto& p) { return readout(add(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"sub", [&](auto& p) { return readout(sub(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"mul", [&](auto& p) { return readout(mul(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}},
      {"add_row", [&](auto& p) { return readout(add_row(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {4})}},
      {"mul_row", [&](auto& p) { return readout(mul_row(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {4})}},
      {"scale_by", [&](auto& p) { return readout(scale_by(p[0], p[1])); }, {random_tensor(rng, {3, 4}), random_tensor(rng, {1})}},
      {"relu", [&](auto& p) { return readout(relu(p[0])); }, {random_away_from_zero(rng, {3, 4})}},
      {"abs", [&](auto& p) { return readout(abs(p[0])); }, {random_away_from_zero(rng, {3, 4})}},
      {"sigmoid", [&](auto& p) { return readout(sigmoid(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"tanh", [&](auto& p) { return readout(tanh(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"exp", [&](auto& p) { return readout(exp(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"log", [&](auto& p) { return readout(log(exp(p[0]))); }, {random_tensor(rng, {3, 4})}},
      {"square", [&](auto& p) { return readout(square(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"softplus", [&](auto& p) { return readout(softplus(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"softmax", [&](auto& p) { return readout(softmax_rows(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"softmax_causal", [&](auto& p) { return readout(softmax_rows(p[0], &causal)); }, {random_tensor(rng, {4, 4})}},
      {"log_softmax", [&](auto& p) { return readout(log_softmax_rows(p[0])); }, {random_tensor(rng, {3, 4})}},
      {"layer_norm", [&](auto& p) { return readout(layer_norm_rows(p[0], p[1], p[2])); },
       {random_tensor(rng, {3, 4}), random_tensor(rng, {4}), random_tensor(rng, {4})}},
      {"instance_norm", [&](auto& p) { return readout(instance_norm_cols(p[0], p[1], p[2])); },
       {random_tensor(rng, {5, 3}), random_tensor(rng, {3}), random_tensor(rng, {3})}},
      {"embedding", [&](auto& p) { const int ids[] = {2, 0, 2}; return readout(embedding(p[0], ids)); }, {random_tensor(rng, {4, 3})}},
      {"concat_rows", [&](auto& p) { return readout(concat_rows({p[0], p[1]})); }, {random_tensor(rng, {2, 3}), random_tensor(rng, {1, 3})}},
      {"concat_cols", [&](auto& p) { return readout(concat_cols({p[0], p[1]})); }, {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 2})}},
      {"slice_rows", [&](auto& p) { return readout(slice_rows(p[0], 1, 3)); }, {random_tensor(rng, {4, 3})}},
      {"slice_cols", [&](auto& p) { return readout(slice_cols(p[0], 1, 3)); }, {random_tensor(rng, {4, 3})}},
      {"reshape", [&](auto& p) { return readout(reshape(p[0], {2, 6})); }, {random_tensor(rng, {4, 3})}},
      {"conv1d", [&](auto& p) { return readout(conv1d(p[0], p[1], p[2], 1, 2)); },
       {random_tensor(rng, {6, 3}), random_tensor(rng, {2, 3, 5}), random_tensor(rng, {2})}},
      {"conv1d_stride", [&](auto& p) { return readout(conv1d(p[0], p[1], p[2], 2, 1)); },
       {random_tensor(rng, {7, 2}), random_tensor(rng, {3, 2, 3}), random_tensor(rng, {3})}},
      {"conv2d", [&](auto& p) { return readout(conv2d(p[0], p[1], p[2], 2, 1)); },
       {random_tensor(rng, {2, 5, 4}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})}},
      {"time_major", [&](auto& p) { return readout(time_major(p[0])); }, {random_tensor(rng, {2, 3, 4})}},
      {"bce", [&](auto& p) { const double y[] = {0, 0, 1}; return sum(bce_with_logits(p[0], y, 5.0)); }, {random_tensor(rng, {3})}},
      {"cross_entropy", [&](auto& p) { const int t[] = {1, 0, 3}; return cross_entropy_rows(p[0], t); }, {random_tensor(rng, {3, 4})}},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    const auto r = check_fn(c.f, c.point);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.skipped == 0);
  }
}

TEST_CASE("backward is deterministic and accumulates") {
  Rng rng(9);
  Tensor w = random_tensor(rng, {4, 3});
  const Tensor x = random_tensor(rng, {5, 4});
  w.set_requires_grad(true);
  const auto loss1 = [&] { return sum(tanh(matmul(x, w))); };
  const auto loss2 = [&] { return mean(square(softmax_rows(matmul(x, w)))); };

  std::vector<double> first, second;
  {
    TapeScope scope;
    w.zero_grad();
    backward(add(loss1(), loss2()));
    first = {w.grad().begin(), w.grad().end()};
  }
  {
    TapeScope scope;
    w.zero_grad();
    backward(add(loss1(), loss2()));
    second = {w.grad().begin(), w.grad().end()};
  }
  CHECK(first == second);

  {
    TapeScope scope;
    w.zero_grad();
    const Tensor l1 = loss1();
    const Tensor l2 = loss2();
    backward(l1);
    backward(l2);
    for (std::size_t i = 0; i < first.size(); ++i) CHECK(std::fabs(w.grad()[i] - first[i]) <= 1e-12);
  }
}

TEST_CASE("no-grad guard records nothing") {
  TapeScope scope;
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  {
    NoGradGuard guard;
    const Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(scope.tape().size() == 0);
  const Tensor z = mul(x, x);
  CHECK(z.requires_grad());
  CHECK(scope.tape().size() == 1);
}

TEST_CASE("dropout keeps expectation and is identity at p=0") {
  Rng rng(1);
  const Tensor x(Shape{1000}, 1.0);
  CHECK(dropout(x, 0.0, rng).same_storage(x));
  const Tensor y = dropout(x, 0.5, rng);
  double total = 0.0;
  for (double v : y.data()) {
    CHECK((v == 0.0 || v == 2.0));
    total += v;
  }
  CHECK(total / 1000.0 == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("embedding gathers rows") {
  const Tensor table = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const int ids[] = {2, 0, 2};
  const Tensor e = embedding(table, ids);
  CHECK(e.shape() == Shape{3, 2});
  CHECK(e.to_vector() == std::vector<double>{5, 6, 1, 2, 5, 6});
  const int bad[] = {3};
  CHECK_THROWS_AS(embedding(table, bad), ContractError);
}
