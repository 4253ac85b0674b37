#pragma once

// Finite-difference sweep over every layer, every loss term and the
// end-to-end models. Backs the `gradcheck` command and the test suite.

#include <cstdint>
#include <string>
#include <vector>

#include "seqvc/model.hpp"

namespace seqvc {

struct GradSuiteRow {
  std::string name;
  double max_rel_error = 0.0;
  double tol = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
  bool pass = false;
};

// Layers and losses are checked on every coordinate at tolerance 1e-4.
// End-to-end rows use `model` (both architectures, all three tasks) with a
// seeded sample of coordinates per tensor at tolerance 1e-3.
std::vector<GradSuiteRow> run_gradient_suite(const ModelConfig& model, std::uint64_t seed,
                                             std::size_t coords_per_tensor = 8);

}  // namespace seqvc
