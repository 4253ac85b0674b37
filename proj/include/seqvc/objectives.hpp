#pragma once

// Training losses: L1 + L2 reconstruction on both decoder outputs, weighted
// stop-token BCE, guided attention, symbol cross-entropy, and the weighted sum.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "seqvc/model.hpp"
#include "seqvc/tensor.hpp"

namespace seqvc {

struct LossWeights {
  double l1 = 1.0;
  double l2 = 1.0;
  double stop = 1.0;
  double stop_pos_weight = 5.0;
  double ga = 10.0;
  double ga_sigma = 0.2;  // g
  double ce = 1.0;
  // Transformer guidance: cross-attention maps (layer, head) with layer in
  // guided_layers (empty = every layer) and head in guided_heads.
  std::vector<std::size_t> guided_layers;
  std::vector<std::size_t> guided_heads{0, 1};
  // Weights for additional named terms supplied through LossParts::extra.
  std::map<std::string, double> extra;
};

void validate(const LossWeights& w);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// Sum of L1 and L2 parts; rows at or past `valid_rows` are ignored
// (0 = all rows valid).
Tensor recon_loss(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows = 0);
// Mean |.| over valid elements, pre plus post.
Tensor l1_part(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows = 0);
// Mean squared error over valid elements, pre plus post.
Tensor l2_part(const Tensor& pred_pre, const Tensor& pred_post, const Tensor& target, std::size_t valid_rows = 0);

// One target per decoder step: 1 at the step holding the last valid frame.
std::vector<double> stop_targets(std::size_t steps, std::size_t valid_frames, std::size_t reduction);
// Mean weighted BCE over the first `valid_steps` steps (0 = all).
Tensor stop_loss(const Tensor& stop_logits, std::span<const double> targets, double pos_weight,
                 std::size_t valid_steps = 0);

// w[t, n] = 1 - exp(-(n / T_in - t / T_out)^2 / (2 g^2)), t and n from 0.
std::vector<double> guided_attention_weights(std::size_t t_out, std::size_t t_in, double g);
// Mean over (t, n) of attn[t, n] * w[t, n].
Tensor guided_attention_loss(const Tensor& attn, double g);

// Maps selected for guidance; the rnn decoder's single map is always used.
std::vector<std::pair<std::size_t, std::size_t>> guided_maps(const std::vector<std::vector<Tensor>>& attention,
                                                            Architecture arch, const LossWeights& w);
// Mean guided-attention loss over the selected maps; undefined when none.
Tensor guided_attention_part(const std::vector<std::vector<Tensor>>& attention, Architecture arch,
                             const LossWeights& w);

Tensor text_cross_entropy(const Tensor& logits, std::span<const int> targets);

enum class OutputKind { speech, text };

struct LossParts {
  std::optional<Tensor> l1, l2, stop, ga, ce;
  std::map<std::string, Tensor> extra;
};

struct LossReport {
  Tensor total;
  std::map<std::string, double> parts;  // unweighted values, plus "total"
};

// Speech outputs need l1, l2 and stop; text outputs need ce. A missing ga
// part contributes nothing.
LossReport compose_total(const LossParts& parts, const LossWeights& w, OutputKind kind);

// Full objective for one teacher-forced utterance.
LossReport speech_objective(const DecoderOutput& out, const Tensor& target, std::size_t valid_frames,
                            const ModelConfig& config, const LossWeights& w);
LossReport text_objective(const DecoderOutput& out, std::span<const int> symbols, const ModelConfig& config,
                          const LossWeights& w);

}  // namespace seqvc
