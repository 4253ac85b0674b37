#pragma once

// Objective evaluation: DTW-aligned mel-cepstral distortion, symbol error
// rate, attention diagonality, and cluster quality of hidden representations.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "seqvc/tensor.hpp"

namespace seqvc {

struct Alignment {
  std::vector<std::pair<std::size_t, std::size_t>> path;
  double cost = 0.0;
};

// Minimum-cost monotone path from (0, 0) to (n-1, m-1) with unit steps in i,
// j or both. Ties prefer the diagonal step, then the step that advances i.
Alignment dtw_align(std::size_t n, std::size_t m, const std::function<double(std::size_t, std::size_t)>& dist);
// Euclidean distance between rows.
Alignment dtw_align(const Tensor& a, const Tensor& b);

// Frame energy in dB from log-magnitude features: 10 log10(sum_f exp(2 x_f)).
std::vector<double> frame_energy_db(const Tensor& features);
// Indices of frames within `threshold_db` of the loudest frame.
std::vector<std::size_t> trim_silence(const Tensor& features, double threshold_db);

struct McdConfig {
  std::size_t order = 24;  // K
  double silence_db = 40.0;
  double constant = 4.342944819032518;  // 10 / ln 10
};

// Orthonormal DCT-II of each row, coefficients 1..min(K, D-1).
Tensor mel_cepstrum(const Tensor& log_mel, std::size_t order);
// Mean over aligned pairs of constant * sqrt(2 * sum_d (c_d - t_d)^2).
double mcd_from_cepstra(const Tensor& converted, const Tensor& target, double constant);
double mcd(const Tensor& converted, const Tensor& target, const McdConfig& cfg = {});

struct EditResult {
  std::size_t distance = 0;
  double rate = 0.0;
};
EditResult error_rate(std::span<const int> hyp, std::span<const int> ref);

// Soft fraction of attention mass inside the diagonal band:
// mean over rows of sum_n a[t, n] * (1 - w[t, n]).
double diagonality(const Tensor& attn, double g = 0.2);

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;
  int label = 0;
  std::size_t index = 0;  // hidden step
};

struct ClusterResult {
  double silhouette = 0.0;
  std::vector<int> labels;  // the top-k labels used, most frequent first
  std::vector<ProjectedPoint> projection;
};

// Majority frame label over each hidden step's ceil(n / n') frame window.
std::vector<int> hidden_step_labels(std::span<const int> frame_labels, std::size_t hidden_steps);

// Silhouette over rows whose label is in the first `top_k` labels by
// frequency; a point's own-cluster distance averages over all cluster members
// including itself. Projection is onto the top two principal components.
ClusterResult cluster_score(const Tensor& reps, std::span<const int> labels, std::size_t top_k = 5);
// Convenience: labels per hidden step from frame labels, then cluster_score.
ClusterResult cluster_score_frames(const Tensor& hidden, std::span<const int> frame_labels, std::size_t top_k = 5);

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectedPoint>& points);

}  // namespace seqvc
