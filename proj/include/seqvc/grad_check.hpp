#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "seqvc/tensor.hpp"

namespace seqvc {

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-4;
  // 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t sample_seed = 0;
};

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = true;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crossed a kink
  std::string worst;        // "name[index]" of the largest error
  std::vector<TensorCheck> per_tensor;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Compares the tape gradient of scalar `f()` with central differences for each
// coordinate of `wrt`. `f` reads the tensors through their shared handles;
// they are perturbed in place and restored. Relative error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<NamedTensor> wrt,
                           const GradCheckOptions& options = {});

// Convenience form: f receives the point tensors as arguments.
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double eps, double tol);

}  // namespace seqvc
