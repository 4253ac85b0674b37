#include "seqvc/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "seqvc/errors.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

namespace {

struct Probe {
  double value;
  std::uint64_t kinks;
};

Probe evaluate(const std::function<Tensor()>& f) {
  NoGradGuard no_grad;
  KinkTracker tracker;
  const Tensor y = f();
  if (y.numel() != 1) {
    throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
  }
  return {y.item(), tracker.signature()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<NamedTensor> wrt,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<bool> previous_flags;
  for (auto& w : wrt) {
    previous_flags.push_back(w.tensor.requires_grad());
    w.tensor.set_requires_grad(true);
    w.tensor.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope;
    const Tensor y = f();
    if (y.numel() != 1) {
      throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
    }
    scope.tape().backward(y);
    for (auto& w : wrt) analytic.emplace_back(w.tensor.grad().begin(), w.tensor.grad().end());
  }

  Rng rng(options.sample_seed);
  for (std::size_t t = 0; t < wrt.size(); ++t) {
    auto& w = wrt[t];
    TensorCheck check{w.name};
    std::vector<std::size_t> coords(w.tensor.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_tensor > 0 && coords.size() > options.max_coords_per_tensor) {
      for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i) {
        std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
      }
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = w.tensor.mutable_data();
    for (std::size_t i : coords) {
      const double original = values[i];
      values[i] = original + options.eps;
      const Probe plus = evaluate(f);
      values[i] = original - options.eps;
      const Probe minus = evaluate(f);
      values[i] = original;
      const std::string where = w.name + "[" + std::to_string(i) + "]";
      if (!std::isfinite(plus.value) || !std::isfinite(minus.value)) {
        throw NumericError("grad_check: non-finite evaluation at " + where);
      }
      if (plus.kinks != minus.kinks) {
        ++check.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
      const double err = std::fabs(analytic[t][i] - numeric) / std::max(1.0, std::fabs(numeric));
      ++check.checked;
      check.max_rel_error = std::max(check.max_rel_error, err);
      if (report.worst.empty() || err > report.max_rel_error) {
        report.worst = where;
        report.max_rel_error = err;
      }
    }
    report.checked += check.checked;
    report.skipped += check.skipped;
    report.per_tensor.push_back(std::move(check));
  }
  report.pass = report.max_rel_error <= options.tol;
  for (std::size_t t = 0; t < wrt.size(); ++t) wrt[t].tensor.set_requires_grad(previous_flags[t]);
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double eps, double tol) {
  std::vector<NamedTensor> named;
  for (std::size_t i = 0; i < point.size(); ++i) named.push_back({"arg" + std::to_string(i), point[i]});
  GradCheckOptions options;
  options.eps = eps;
  options.tol = tol;
  return grad_check([&f, point]() { return f(point); }, std::move(named), options);
}

}  // namespace seqvc
