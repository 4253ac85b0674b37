#include "seqvc/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>

#include "seqvc/errors.hpp"
#include "seqvc/objectives.hpp"

namespace seqvc {

namespace {

[[noreturn]] void contract(const std::string& msg) { throw ContractError(msg); }

double row_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.cols();
  const double* pa = a.data().data() + i * d;
  const double* pb = b.data().data() + j * d;
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += (pa[k] - pb[k]) * (pa[k] - pb[k]);
  return std::sqrt(s);
}

Tensor take_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  std::vector<double> v;
  v.reserve(rows.size() * x.cols());
  for (std::size_t r : rows) {
    auto row = x.data().subspan(r * x.cols(), x.cols());
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), x.cols()}, std::move(v));
}

}  // namespace

Alignment dtw_align(std::size_t n, std::size_t m, const std::function<double(std::size_t, std::size_t)>& dist) {
  if (n == 0 || m == 0) contract("dtw_align: both sequences must be non-empty");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> D(n * m, inf);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double best = 0.0;
      if (i > 0 || j > 0) {
        best = inf;
        if (i > 0 && j > 0) best = D[(i - 1) * m + j - 1];
        if (i > 0) best = std::min(best, D[(i - 1) * m + j]);
        if (j > 0) best = std::min(best, D[i * m + j - 1]);
      }
      D[i * m + j] = best + dist(i, j);
    }
  }
  Alignment a;
  a.cost = D[n * m - 1];
  std::size_t i = n - 1, j = m - 1;
  a.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i == 0) {
      --j;
    } else if (j == 0) {
      --i;
    } else {
      const double diag = D[(i - 1) * m + j - 1], up = D[(i - 1) * m + j], left = D[i * m + j - 1];
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    }
    a.path.emplace_back(i, j);
  }
  std::reverse(a.path.begin(), a.path.end());
  return a;
}

Alignment dtw_align(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    contract("dtw_align: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return dtw_align(a.rows(), b.rows(), [&](std::size_t i, std::size_t j) { return row_distance(a, i, b, j); });
}

std::vector<double> frame_energy_db(const Tensor& features) {
  std::vector<double> e(features.rows());
  for (std::size_t t = 0; t < features.rows(); ++t) {
    double s = 0.0;
    for (std::size_t f = 0; f < features.cols(); ++f) s += std::exp(2.0 * features(t, f));
    e[t] = 10.0 * std::log10(s);
  }
  return e;
}

std::vector<std::size_t> trim_silence(const Tensor& features, double threshold_db) {
  if (features.rank() != 2 || features.rows() == 0) contract("trim_silence: empty features");
  const auto e = frame_energy_db(features);
  const double top = *std::max_element(e.begin(), e.end());
  std::vector<std::size_t> keep;
  for (std::size_t t = 0; t < e.size(); ++t) {
    if (e[t] >= top - threshold_db) keep.push_back(t);
  }
  return keep;
}

Tensor mel_cepstrum(const Tensor& log_mel, std::size_t order) {
  const std::size_t D = log_mel.cols();
  if (order == 0) contract("mel_cepstrum: order must be >= 1");
  if (D < 2) contract("mel_cepstrum: need at least two mel bins");
  const std::size_t K = std::min(order, D - 1);
  std::vector<double> out(log_mel.rows() * K);
  for (std::size_t t = 0; t < log_mel.rows(); ++t) {
    for (std::size_t k = 1; k <= K; ++k) {
      double s = 0.0;
      for (std::size_t n = 0; n < D; ++n) {
        s += log_mel(t, n) * std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * static_cast<double>(n) + 1.0) /
                                      (2.0 * static_cast<double>(D)));
      }
      out[t * K + k - 1] = std::sqrt(2.0 / static_cast<double>(D)) * s;
    }
  }
  return Tensor({log_mel.rows(), K}, std::move(out));
}

double mcd_from_cepstra(const Tensor& converted, const Tensor& target, double constant) {
  const Alignment a = dtw_align(converted, target);
  double total = 0.0;
  for (auto [i, j] : a.path) total += constant * std::sqrt(2.0) * row_distance(converted, i, target, j);
  return total / static_cast<double>(a.path.size());
}

double mcd(const Tensor& converted, const Tensor& target, const McdConfig& cfg) {
  if (converted.rank() != 2 || target.rank() != 2 || converted.rows() == 0 || target.rows() == 0) {
    contract("mcd: both feature sequences must be non-empty matrices");
  }
  if (converted.cols() != target.cols()) {
    contract("mcd: " + std::to_string(converted.cols()) + " vs " + std::to_string(target.cols()) + " mel bins");
  }
  const Tensor c = take_rows(converted, trim_silence(converted, cfg.silence_db));
  const Tensor t = take_rows(target, trim_silence(target, cfg.silence_db));
  return mcd_from_cepstra(mel_cepstrum(c, cfg.order), mel_cepstrum(t, cfg.order), cfg.constant);
}

EditResult error_rate(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) contract("error_rate: empty reference");
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] != ref[j - 1]);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  EditResult r;
  r.distance = prev[ref.size()];
  r.rate = static_cast<double>(r.distance) / static_cast<double>(ref.size());
  return r;
}

double diagonality(const Tensor& attn, double g) {
  if (attn.rank() != 2 || attn.numel() == 0) contract("diagonality: expected a non-empty attention map");
  const auto w = guided_attention_weights(attn.rows(), attn.cols(), g);
  double inside = 0.0;
  const auto a = attn.data();
  for (std::size_t i = 0; i < a.size(); ++i) inside += a[i] * (1.0 - w[i]);
  return inside / static_cast<double>(attn.rows());
}

std::vector<int> hidden_step_labels(std::span<const int> frame_labels, std::size_t hidden_steps) {
  if (frame_labels.empty() || hidden_steps == 0) contract("hidden_step_labels: empty input");
  const std::size_t n = frame_labels.size();
  const std::size_t window = (n + hidden_steps - 1) / hidden_steps;
  std::vector<int> out(hidden_steps);
  for (std::size_t s = 0; s < hidden_steps; ++s) {
    const std::size_t begin = std::min(s * window, n - 1);
    const std::size_t end = std::max(begin + 1, std::min((s + 1) * window, n));
    std::map<int, std::size_t> counts;
    for (std::size_t f = begin; f < end; ++f) ++counts[frame_labels[f]];
    int best = counts.begin()->first;
    for (const auto& [label, c] : counts) {
      if (c > counts[best]) best = label;
    }
    out[s] = best;
  }
  return out;
}

ClusterResult cluster_score(const Tensor& reps, std::span<const int> labels, std::size_t top_k) {
  if (reps.rank() != 2 || reps.rows() != labels.size()) {
    contract("cluster_score: " + std::to_string(labels.size()) + " labels for representations " +
             shape_str(reps.shape()));
  }
  std::map<int, std::size_t> freq;
  for (int l : labels) ++freq[l];
  std::vector<std::pair<int, std::size_t>> order(freq.begin(), freq.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  ClusterResult r;
  for (std::size_t i = 0; i < std::min(top_k, order.size()); ++i) r.labels.push_back(order[i].first);
  if (r.labels.size() < 2) contract("cluster_score: need at least two distinct labels");

  std::vector<std::size_t> idx;
  std::map<int, std::size_t> cluster_of;
  for (std::size_t c = 0; c < r.labels.size(); ++c) cluster_of[r.labels[c]] = c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (cluster_of.count(labels[i])) idx.push_back(i);
  }
  const std::size_t n = idx.size(), C = r.labels.size();
  std::vector<std::size_t> sizes(C, 0);
  for (std::size_t i : idx) ++sizes[cluster_of[labels[i]]];

  double total = 0.0;
  std::vector<double> sums(C);
  for (std::size_t a = 0; a < n; ++a) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t b = 0; b < n; ++b) sums[cluster_of[labels[idx[b]]]] += row_distance(reps, idx[a], reps, idx[b]);
    const std::size_t own = cluster_of[labels[idx[a]]];
    const double within = sums[own] / static_cast<double>(sizes[own]);
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      if (c != own) nearest = std::min(nearest, sums[c] / static_cast<double>(sizes[c]));
    }
    const double denom = std::max(within, nearest);
    total += denom > 0.0 ? (nearest - within) / denom : 0.0;
  }
  r.silhouette = total / static_cast<double>(n);

  const std::size_t d = reps.cols();
  Eigen::MatrixXd X(n, d);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t k = 0; k < d; ++k) X(a, k) = reps(idx[a], k);
  }
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(X.transpose() * X / static_cast<double>(n));
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, 2);
  for (std::size_t c = 0; c < std::min<std::size_t>(2, d); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // deterministic sign
    basis.col(static_cast<Eigen::Index>(c)) = v;
  }
  const Eigen::MatrixXd P = X * basis;
  for (std::size_t a = 0; a < n; ++a) {
    r.projection.push_back({P(a, 0), P(a, 1), labels[idx[a]], idx[a]});
  }
  return r;
}

ClusterResult cluster_score_frames(const Tensor& hidden, std::span<const int> frame_labels, std::size_t top_k) {
  const auto labels = hidden_step_labels(frame_labels, hidden.rows());
  return cluster_score(hidden, labels, top_k);
}

void write_projection_csv(const std::filesystem::path& path, const std::vector<ProjectedPoint>& points) {
  std::ofstream out(path);
  if (!out) contract("cannot open " + path.string() + " for writing");
  out << "index,label,pc1,pc2\n";
  out.precision(9);
  for (const auto& p : points) out << p.index << ',' << p.label << ',' << p.x << ',' << p.y << '\n';
}

}  // namespace seqvc
