#include "seqvc/optim.hpp"

#include <algorithm>
#include <cmath>

#include "seqvc/errors.hpp"

namespace seqvc {

namespace {

double norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

std::string kind_name(OptimizerKind k) { return k == OptimizerKind::lamb ? "lamb" : "adam"; }

}  // namespace

void validate(const OptimizerConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ContractError("optimizer: " + msg);
  };
  need(c.lr > 0.0 && std::isfinite(c.lr), "lr must be positive");
  need(c.beta1 >= 0.0 && c.beta1 < 1.0, "beta1 must be in [0, 1)");
  need(c.beta2 >= 0.0 && c.beta2 < 1.0, "beta2 must be in [0, 1)");
  need(c.eps > 0.0, "eps must be positive");
  need(c.weight_decay >= 0.0, "weight_decay must be non-negative");
  need(c.trust_clamp > 0.0, "trust_clamp must be positive");
  need(c.clip_norm >= 0.0, "clip_norm must be non-negative");
}

void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", kind_name(c.kind)},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"trust_clamp", c.trust_clamp},
       {"force_unit_trust", c.force_unit_trust},
       {"warmup_steps", c.warmup_steps},
       {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  if (!j.is_object()) throw ContractError("optimizer: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") {
      const auto s = value.get<std::string>();
      if (s == "lamb") {
        c.kind = OptimizerKind::lamb;
      } else if (s == "adam") {
        c.kind = OptimizerKind::adam;
      } else {
        throw ContractError("optimizer: unknown kind '" + s + "'");
      }
    } else if (key == "lr") {
      c.lr = value.get<double>();
    } else if (key == "beta1") {
      c.beta1 = value.get<double>();
    } else if (key == "beta2") {
      c.beta2 = value.get<double>();
    } else if (key == "eps") {
      c.eps = value.get<double>();
    } else if (key == "weight_decay") {
      c.weight_decay = value.get<double>();
    } else if (key == "trust_clamp") {
      c.trust_clamp = value.get<double>();
    } else if (key == "force_unit_trust") {
      c.force_unit_trust = value.get<bool>();
    } else if (key == "warmup_steps") {
      c.warmup_steps = value.get<std::size_t>();
    } else if (key == "clip_norm") {
      c.clip_norm = value.get<double>();
    } else {
      throw ContractError("optimizer: unknown key '" + key + "'");
    }
  }
}

OptState make_opt_state(const ParamTree& params, const OptimizerConfig& config, const std::vector<std::string>& frozen) {
  validate(config);
  for (const auto& prefix : frozen) {
    if (params.paths_with_prefix(prefix).empty()) {
      throw ContractError("frozen prefix '" + prefix + "' matches no parameter");
    }
  }
  OptState s;
  s.config = config;
  for (const auto& [path, t] : params.entries()) {
    const bool is_frozen = std::any_of(frozen.begin(), frozen.end(), [&](const auto& p) { return has_prefix(path, p); });
    if (is_frozen) continue;
    s.moments[path] = Moments{std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0)};
  }
  return s;
}

double lamb_update(std::span<double> p, std::span<const double> g, Moments& mo, const OptimizerConfig& c,
                   std::uint64_t t, double lr) {
  const std::size_t n = p.size();
  if (g.size() != n || mo.m.size() != n || mo.v.size() != n) throw ContractError("lamb_update: size mismatch");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g[i];
    mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double m_hat = mo.m[i] / bc1;
    const double v_hat = mo.v[i] / bc2;
    r[i] = m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * p[i];
  }
  double trust = 1.0;
  if (c.kind == OptimizerKind::lamb && !c.force_unit_trust) {
    const double pn = norm(p), rn = norm(r);
    if (pn > 0.0 && rn > 0.0) trust = std::clamp(pn / rn, 0.0, c.trust_clamp);
  }
  for (std::size_t i = 0; i < n; ++i) p[i] -= lr * trust * r[i];
  return trust;
}

StepStats optimizer_step(ParamTree& params, OptState& state) {
  double sq = 0.0;
  for (const auto& [path, mo] : state.moments) {
    if (!params.contains(path)) throw ContractError("optimizer state refers to unknown parameter " + path);
    const Tensor& t = params.at(path);
    if (t.numel() != mo.m.size()) throw ContractError("optimizer state shape mismatch at " + path);
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient at " + path);
      sq += g * g;
    }
  }
  StepStats stats;
  stats.grad_norm = std::sqrt(sq);
  const auto& c = state.config;
  double scale = 1.0;
  if (c.clip_norm > 0.0 && stats.grad_norm > c.clip_norm) scale = c.clip_norm / stats.grad_norm;

  ++state.step;
  stats.lr = c.lr;
  if (c.warmup_steps > 0) {
    stats.lr *= std::min(1.0, static_cast<double>(state.step) / static_cast<double>(c.warmup_steps));
  }
  stats.min_trust = c.trust_clamp;
  stats.max_trust = 0.0;
  std::vector<double> g;
  for (auto& [path, mo] : state.moments) {
    Tensor& t = params.at(path);
    const auto grad = t.grad();
    g.assign(grad.begin(), grad.end());
    if (scale != 1.0) {
      for (double& v : g) v *= scale;
    }
    const double trust = lamb_update(t.mutable_data(), g, mo, c, state.step, stats.lr);
    stats.min_trust = std::min(stats.min_trust, trust);
    stats.max_trust = std::max(stats.max_trust, trust);
  }
  return stats;
}

}  // namespace seqvc
