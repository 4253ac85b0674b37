#include "seqvc/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "seqvc/errors.hpp"

namespace seqvc {

using nlohmann::json;

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

Tensor valid_diff(const char* op, const Tensor& pred, const Tensor& target, std::size_t valid_rows) {
  if (pred.shape() != target.shape()) {
    contract(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (valid_rows == 0) valid_rows = pred.rows();
  if (valid_rows > pred.rows()) contract(std::string(op) + ": more valid rows than frames");
  Tensor d = sub(pred, target);
  return valid_rows == pred.rows() ? d : slice_rows(d, 0, valid_rows);
}

}  // namespace

void validate(const LossWeights& w) {
  for (double v : {w.l1, w.l2, w.stop, w.stop_pos_weight, w.ga, w.ce}) {
    if (!(v >= 0.0) || !std::isfinite(v)) contract("loss weights must be finite and non-negative");
  }
  for (const auto& [name, v] : w.extra) {
    if (!(v >= 0.0) || !std::isfinite(v)) contract("loss weight '" + name + "' must be finite and non-negative");
  }
  if (!(w.ga_sigma > 0.0)) contract("guided attention sharpness g must be positive");
}

void to_json(json& j, const LossWeights& w) {
  j = json{{"l1", w.l1},
           {"l2", w.l2},
           {"stop", w.stop},
           {"stop_pos_weight", w.stop_pos_weight},
           {"ga", w.ga},
           {"ga_sigma", w.ga_sigma},
           {"ce", w.ce},
           {"guided_layers", w.guided_layers},
           {"guided_heads", w.guided_heads},
           {"extra", w.extra}};
}

void from_json(const json& j, LossWeights& w) {
  if (!j.is_object()) contract("loss weights must be a JSON object");
  json defaults;
  to_json(defaults, w);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) contract("loss weights: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      contract(std::string("loss weights: bad value for '") + key + "'");
    }
  };
  get("l1", w.l1);
  get("l2", w.l2);
  get("stop", w.stop);
  get("stop_pos_weight", w.stop_pos_weight);
  get("ga", w.ga);
  get("ga_sigma", w.ga_sigma);
  get("ce", w.ce);
  get("guided_layers", w.guided_layers);
  get("guided_heads", w.guided_heads);
  get("extra", w.extra);
}

Tensor l1_part(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows) {
  return add(mean(abs(valid_diff("l1", pred_pre, target, valid_rows))),
             mean(abs(valid_diff("l1", pred_post, target, valid_rows))));
}

Tensor l2_part(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows) {
  return add(mean(square(valid_diff("l2", pred_pre, target, valid_rows))),
             mean(square(valid_diff("l2", pred_post, target, valid_rows))));
}

Tensor recon_loss(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows) {
  return add(l1_part(pred_pre, pred_post, target, valid_rows), l2_part(pred_pre, pred_post, target, valid_rows));
}

std::vector<double> stop_targets(std::size_t steps, std::size_t valid_frames, std::size_t reduction) {
  if (reduction == 0 || valid_frames == 0) contract("stop_targets: need at least one frame and r >= 1");
  const std::size_t last = (valid_frames + reduction - 1) / reduction - 1;
  if (last >= steps) contract("stop_targets: final valid step beyond the decoded steps");
  std::vector<double> t(steps, 0.0);
  t[last] = 1.0;
  return t;
}

Tensor stop_loss(const Tensor& stop_logits, std::span<const double> targets, double pos_weight,
                 std::size_t valid_steps) {
  if (stop_logits.numel() != targets.size()) {
    contract("stop_loss: " + std::to_string(stop_logits.numel()) + " logits for " + std::to_string(targets.size()) +
             " targets");
  }
  if (valid_steps == 0) valid_steps = targets.size();
  if (valid_steps > targets.size()) contract("stop_loss: more valid steps than targets");
  bool positive = false;
  for (std::size_t i = 0; i < valid_steps; ++i) {
    if (targets[i] != 0.0 && targets[i] != 1.0) contract("stop_loss: targets must be 0 or 1");
    positive = positive || targets[i] == 1.0;
  }
  if (!positive) contract("stop_loss: no positive (stop) target among valid steps");
  Tensor z = reshape(stop_logits, {targets.size(), 1});
  if (valid_steps < targets.size()) z = slice_rows(z, 0, valid_steps);
  return mean(bce_with_logits(z, targets.first(valid_steps), pos_weight));
}

std::vector<double> guided_attention_weights(std::size_t t_out, std::size_t t_in, double g) {
  std::vector<double> w(t_out * t_in);
  for (std::size_t t = 0; t < t_out; ++t) {
    for (std::size_t n = 0; n < t_in; ++n) {
      const double d = static_cast<double>(n) / static_cast<double>(t_in) -
                       static_cast<double>(t) / static_cast<double>(t_out);
      w[t * t_in + n] = 1.0 - std::exp(-d * d / (2.0 * g * g));
    }
  }
  return w;
}

Tensor guided_attention_loss(const Tensor& attn, double g) {
  if (attn.rank() != 2 || attn.numel() == 0) contract("guided_attention_loss: expected a non-empty matrix");
  if (!(g > 0.0)) contract("guided_attention_loss: g must be positive");
  return mean(mul_const(attn, guided_attention_weights(attn.rows(), attn.cols(), g)));
}

std::vector<std::pair<std::size_t, std::size_t>> guided_maps(const std::vector<std::vector<Tensor>>& attention,
                                                            Architecture arch, const LossWeights& w) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (arch == Architecture::rnn) {
    if (!attention.empty() && !attention[0].empty()) out.emplace_back(0, 0);
    return out;
  }
  for (std::size_t l = 0; l < attention.size(); ++l) {
    if (!w.guided_layers.empty() &&
        std::find(w.guided_layers.begin(), w.guided_layers.end(), l) == w.guided_layers.end()) {
      continue;
    }
    for (std::size_t h : w.guided_heads) {
      if (h >= attention[l].size()) {
        contract("guided attention: head " + std::to_string(h) + " not present in layer " + std::to_string(l));
      }
      out.emplace_back(l, h);
    }
  }
  for (std::size_t l : w.guided_layers) {
    if (l >= attention.size()) contract("guided attention: layer " + std::to_string(l) + " not present");
  }
  return out;
}

Tensor guided_attention_part(const std::vector<std::vector<Tensor>>& attention, Architecture arch,
                             const LossWeights& w) {
  const auto maps = guided_maps(attention, arch, w);
  if (maps.empty()) return {};
  Tensor total = guided_attention_loss(attention[maps[0].first][maps[0].second], w.ga_sigma);
  for (std::size_t i = 1; i < maps.size(); ++i) {
    total = add(total, guided_attention_loss(attention[maps[i].first][maps[i].second], w.ga_sigma));
  }
  return maps.size() == 1 ? total : scale(total, 1.0 / static_cast<double>(maps.size()));
}

Tensor text_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy_rows(logits, targets);
}

LossReport compose_total(const LossParts& parts, const LossWeights& w, OutputKind kind) {
  validate(w);
  auto require = [](const std::optional<Tensor>& p, const char* name) {
    if (!p || !p->defined()) contract(std::string("compose_total: missing required part '") + name + "'");
  };
  LossReport r;
  std::vector<std::pair<double, const Tensor*>> terms;
  auto take = [&](const std::optional<Tensor>& p, const char* name, double weight) {
    if (!p || !p->defined()) return;
    r.parts[name] = p->item();
    terms.emplace_back(weight, &*p);
  };
  if (kind == OutputKind::speech) {
    require(parts.l1, "l1");
    require(parts.l2, "l2");
    require(parts.stop, "stop");
    take(parts.l1, "l1", w.l1);
    take(parts.l2, "l2", w.l2);
    take(parts.stop, "stop", w.stop);
  } else {
    require(parts.ce, "ce");
    take(parts.ce, "ce", w.ce);
  }
  take(parts.ga, "ga", w.ga);
  for (const auto& [name, t] : parts.extra) {
    auto it = w.extra.find(name);
    if (it == w.extra.end()) contract("compose_total: no weight configured for part '" + name + "'");
    r.parts[name] = t.item();
    terms.emplace_back(it->second, &t);
  }
  r.total = scale(*terms[0].second, terms[0].first);
  for (std::size_t i = 1; i < terms.size(); ++i) r.total = add(r.total, scale(*terms[i].second, terms[i].first));
  r.parts["total"] = r.total.item();
  return r;
}

LossReport speech_objective(const DecoderOutput& out, const Tensor& target, std::size_t valid_frames,
                            const ModelConfig& config, const LossWeights& w) {
  if (valid_frames == 0) valid_frames = target.rows();
  LossParts parts;
  parts.l1 = l1_part(out.pre, out.post, target, valid_frames);
  parts.l2 = l2_part(out.pre, out.post, target, valid_frames);
  const auto targets = stop_targets(out.steps, valid_frames, config.reduction);
  const std::size_t valid_steps = (valid_frames + config.reduction - 1) / config.reduction;
  parts.stop = stop_loss(out.stop_logits, targets, w.stop_pos_weight, valid_steps);
  if (w.ga > 0.0) {
    // Padding steps are not part of the alignment.
    auto attention = out.attention;
    if (valid_steps < out.steps) {
      for (auto& layer : attention) {
        for (auto& map : layer) map = slice_rows(map, 0, valid_steps);
      }
    }
    Tensor ga = guided_attention_part(attention, config.architecture, w);
    if (ga.defined()) parts.ga = ga;
  }
  return compose_total(parts, w, OutputKind::speech);
}

LossReport text_objective(const DecoderOutput& out, std::span<const int> symbols, const ModelConfig& config,
                          const LossWeights& w) {
  std::vector<int> targets(symbols.begin(), symbols.end());
  targets.push_back(config.eos());
  LossParts parts;
  parts.ce = text_cross_entropy(out.token_logits, targets);
  if (w.ga > 0.0) {
    Tensor ga = guided_attention_part(out.attention, config.architecture, w);
    if (ga.defined()) parts.ga = ga;
  }
  return compose_total(parts, w, OutputKind::text);
}

}  // namespace seqvc
