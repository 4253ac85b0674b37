#pragma once

#include <vector>

#include "seqvc/rng.hpp"
#include "seqvc/tensor.hpp"

namespace seqvc::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero so relu/abs kinks are not hit by small eps.
inline Tensor random_away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(0.1, 1.5);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace seqvc::testing

#include "seqvc/model.hpp"

namespace seqvc::testing {

// Small enough for fast training tests; vc task unless a text vocab is given.
inline ModelConfig small_config(Architecture arch, Task task = Task::vc, std::size_t vocab = 0) {
  ModelConfig c;
  c.architecture = arch;
  c.task = task;
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
  c.vocab = vocab;
  return c;
}

}  // namespace seqvc::testing
