#pragma once

// LAMB and Adam(W) over a ParamTree. Only paths registered in the optimizer
// state are ever written, which is how frozen subtrees stay untouched.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqvc/param_tree.hpp"

namespace seqvc {

enum class OptimizerKind { lamb, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::lamb;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double trust_clamp = 10.0;
  // Test mode: tau = 1 everywhere, which reduces LAMB to AdamW.
  bool force_unit_trust = false;
  std::size_t warmup_steps = 0;  // linear ramp; 0 = constant lr
  double clip_norm = 0.0;        // global gradient norm clip; 0 = off
};

void validate(const OptimizerConfig& c);
void to_json(nlohmann::json& j, const OptimizerConfig& c);
void from_json(const nlohmann::json& j, OptimizerConfig& c);

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptState {
  OptimizerConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;  // trainable paths only
};

// Fresh state covering every parameter not under one of `frozen` prefixes.
OptState make_opt_state(const ParamTree& params, const OptimizerConfig& config,
                        const std::vector<std::string>& frozen = {});

// One block update at (1-based) step `t` with learning rate `lr`. Returns the
// trust ratio applied (1 for adam).
double lamb_update(std::span<double> p, std::span<const double> g, Moments& mo, const OptimizerConfig& c,
                   std::uint64_t t, double lr);

struct StepStats {
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  double min_trust = 0.0;
  double max_trust = 0.0;
};

// Applies one step using the gradients stored on the parameters. Every
// gradient is checked first; a non-finite one raises NumericError naming its
// path and nothing is modified.
StepStats optimizer_step(ParamTree& params, OptState& state);

}  // namespace seqvc
