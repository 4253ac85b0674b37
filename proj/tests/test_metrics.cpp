#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <string>

#include "doctest.h"
#include "seqvc/errors.hpp"
#include "seqvc/metrics.hpp"
#include "seqvc/rng.hpp"
#include "test_util.hpp"

using namespace seqvc;

namespace {

// Exhaustive minimum over all monotone continuous paths.
double brute_force_dtw(std::size_t n, std::size_t m, const std::function<double(std::size_t, std::size_t)>& d,
                       std::size_t i = 0, std::size_t j = 0) {
  const double here = d(i, j);
  if (i == n - 1 && j == m - 1) return here;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < n) best = std::min(best, brute_force_dtw(n, m, d, i + 1, j));
  if (j + 1 < m) best = std::min(best, brute_force_dtw(n, m, d, i, j + 1));
  if (i + 1 < n && j + 1 < m) best = std::min(best, brute_force_dtw(n, m, d, i + 1, j + 1));
  return here + best;
}

std::size_t naive_levenshtein(const std::string& a, const std::string& b) {
  if (a.empty()) return b.size();
  if (b.empty()) return a.size();
  const std::size_t sub = naive_levenshtein(a.substr(1), b.substr(1)) + (a[0] != b[0]);
  return std::min({sub, naive_levenshtein(a.substr(1), b) + 1, naive_levenshtein(a, b.substr(1)) + 1});
}

Tensor eye(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

std::vector<int> as_ints(const std::string& s) { return {s.begin(), s.end()}; }

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  std::vector<double> v;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t k = 0; k < times; ++k) {
      auto row = x.data().subspan(r * x.cols(), x.cols());
      v.insert(v.end(), row.begin(), row.end());
    }
  }
  return Tensor({x.rows() * times, x.cols()}, std::move(v));
}

}  // namespace

TEST_CASE("dtw examples") {
  const std::vector<double> a{1, 2, 3}, b{1, 3};
  auto r = dtw_align(3, 2, [&](std::size_t i, std::size_t j) { return std::abs(a[i] - b[j]); });
  CHECK(r.cost == 1.0);
  CHECK(r.path.front() == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(r.path.back() == std::pair<std::size_t, std::size_t>{2, 1});

  Rng rng(3);
  const Tensor x = testing::random_tensor(rng, {5, 4});
  r = dtw_align(x, x);
  CHECK(r.cost == 0.0);
  REQUIRE(r.path.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(r.path[i] == std::pair<std::size_t, std::size_t>{i, i});

  CHECK_THROWS_AS(dtw_align(0, 3, [](std::size_t, std::size_t) { return 0.0; }), ContractError);
}

TEST_CASE("dtw matches exhaustive search up to six frames") {
  Rng rng(17);
  for (std::size_t n = 1; n <= 6; ++n) {
    for (std::size_t m = 1; m <= 6; ++m) {
      for (int trial = 0; trial < 3; ++trial) {
        std::vector<double> a(n), b(m);
        for (double& v : a) v = std::floor(rng.uniform(0.0, 4.0));  // small integers force ties
        for (double& v : b) v = std::floor(rng.uniform(0.0, 4.0));
        auto d = [&](std::size_t i, std::size_t j) { return std::abs(a[i] - b[j]); };
        const auto r = dtw_align(n, m, d);
        CHECK(r.cost == doctest::Approx(brute_force_dtw(n, m, d)));
        // Path is monotone, continuous and its cost is the reported cost.
        double along = 0.0;
        for (std::size_t k = 0; k < r.path.size(); ++k) {
          along += d(r.path[k].first, r.path[k].second);
          if (k == 0) continue;
          const auto di = r.path[k].first - r.path[k - 1].first, dj = r.path[k].second - r.path[k - 1].second;
          CHECK(di <= 1);
          CHECK(dj <= 1);
          CHECK(di + dj >= 1);
        }
        CHECK(along == doctest::Approx(r.cost));
        CHECK(r.path.back() == std::pair<std::size_t, std::size_t>{n - 1, m - 1});
      }
    }
  }
}

TEST_CASE("trim_silence examples") {
  const Tensor flat = Tensor(Shape{6, 3}, -1.0);
  CHECK(trim_silence(flat, 40.0).size() == 6);

  Tensor loud = Tensor(Shape{5, 3}, -30.0);
  for (std::size_t f = 0; f < 3; ++f) loud.mutable_data()[2 * 3 + f] = 1.0;
  CHECK(trim_silence(loud, 40.0) == std::vector<std::size_t>{2});
  CHECK(trim_silence(loud, std::numeric_limits<double>::infinity()).size() == 5);

  // Energy of a constant frame: 10 log10(F exp(2x)).
  CHECK(frame_energy_db(flat)[0] == doctest::Approx(10.0 * std::log10(3.0 * std::exp(-2.0))));
}

TEST_CASE("mel cepstrum is the orthonormal DCT without the 0th term") {
  Rng rng(4);
  const Tensor x = testing::random_tensor(rng, {3, 8});
  const Tensor c = mel_cepstrum(x, 24);
  REQUIRE(c.shape() == Shape{3, 7});
  // Parseval: the full orthonormal DCT preserves energy, and the 0th term is sqrt(D) * mean.
  for (std::size_t t = 0; t < 3; ++t) {
    double e = 0.0, s = 0.0, ec = 0.0;
    for (std::size_t n = 0; n < 8; ++n) {
      e += x(t, n) * x(t, n);
      s += x(t, n);
    }
    for (std::size_t k = 0; k < 7; ++k) ec += c(t, k) * c(t, k);
    CHECK(ec + s * s / 8.0 == doctest::Approx(e));
  }
  CHECK(mel_cepstrum(x, 3).cols() == 3);
}

TEST_CASE("mcd examples") {
  Rng rng(8);
  const Tensor x = testing::random_tensor(rng, {7, 20});
  CHECK(mcd(x, x) == 0.0);

  const Tensor c = Tensor::matrix({{0.0, 0.0, 0.0}});
  const Tensor t = Tensor::matrix({{0.0, 1.0, 0.0}});
  const double expect = 10.0 / std::numbers::ln10 * std::sqrt(2.0);
  CHECK(mcd_from_cepstra(c, t, McdConfig{}.constant) == doctest::Approx(expect));
  CHECK(expect == doctest::Approx(6.1421).epsilon(1e-4));

  CHECK_THROWS_AS(mcd(x, Tensor(Shape{3, 19})), ContractError);
  CHECK_THROWS_AS(mcd(Tensor(Shape{0, 20}), x), ContractError);
}

TEST_CASE("mcd under target frame duplication") {
  // Duplication leaves the score unchanged when every target frame maps to
  // the same converted frame, or when converted equals target.
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor one = testing::random_tensor(rng, {1, 6});
    const Tensor tgt = testing::random_tensor(rng, {5, 6});
    const double base = mcd_from_cepstra(one, tgt, 1.0);
    CHECK(mcd_from_cepstra(one, repeat_rows(tgt, 2), 1.0) == doctest::Approx(base));
    CHECK(mcd_from_cepstra(tgt, repeat_rows(tgt, 3), 1.0) == 0.0);

    // The DTW inside agrees with exhaustive search on the duplicated pair.
    const Tensor conv = testing::random_tensor(rng, {3, 6});
    const Tensor dup = repeat_rows(tgt, 2);
    auto d = [&](std::size_t i, std::size_t j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k) s += (conv(i, k) - dup(j, k)) * (conv(i, k) - dup(j, k));
      return std::sqrt(s);
    };
    CHECK(dtw_align(conv, dup).cost == doctest::Approx(brute_force_dtw(3, 10, d)));
  }
}

TEST_CASE("mcd is symmetric and non-negative") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = testing::random_tensor(rng, {static_cast<std::size_t>(4 + trial % 3), 20});
    const Tensor b = testing::random_tensor(rng, {5, 20});
    const double ab = mcd(a, b), ba = mcd(b, a);
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(ba));
  }
}

TEST_CASE("error_rate examples") {
  const std::vector<int> ref{1, 2, 3};
  CHECK(error_rate(ref, ref).distance == 0);
  const std::vector<int> sub{1, 9, 3};
  auto r = error_rate(sub, ref);
  CHECK(r.distance == 1);
  CHECK(r.rate == doctest::Approx(1.0 / 3.0));
  CHECK(error_rate(as_ints("kitten"), as_ints("sitting")).distance == 3);
  CHECK(error_rate(std::vector<int>{}, ref).distance == 3);
  CHECK_THROWS_AS(error_rate(ref, std::vector<int>{}), ContractError);
}

TEST_CASE("error_rate agrees with the recursive definition and obeys the triangle inequality") {
  Rng rng(6);
  auto word = [&] {
    std::string s(rng.index(9), 'a');
    for (char& c : s) c = static_cast<char>('a' + rng.index(3));
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const std::string a = word(), b = word(), c = word();
    auto dist = [](const std::string& x, const std::string& y) {
      if (y.empty()) return x.size();
      return error_rate(as_ints(x), as_ints(y)).distance;
    };
    if (a.size() <= 6 && b.size() <= 6) CHECK(dist(a, b) == naive_levenshtein(a, b));
    CHECK(dist(a, c) <= dist(a, b) + dist(b, c));
  }
}

TEST_CASE("diagonality examples") {
  CHECK(diagonality(eye(5)) == doctest::Approx(1.0));

  Tensor anti = Tensor(Shape{5, 5});
  for (std::size_t t = 0; t < 5; ++t) anti.mutable_data()[t * 5 + (4 - t)] = 1.0;
  CHECK(diagonality(anti) < diagonality(eye(5)));

  // Uniform map: the band area fraction, computed directly.
  const std::size_t to = 6, ti = 9;
  const double g = 0.2;
  double area = 0.0;
  for (std::size_t t = 0; t < to; ++t) {
    for (std::size_t n = 0; n < ti; ++n) {
      const double u = static_cast<double>(n) / ti - static_cast<double>(t) / to;
      area += std::exp(-u * u / (2 * g * g));
    }
  }
  area /= static_cast<double>(to * ti);
  CHECK(diagonality(Tensor(Shape{to, ti}, 1.0 / ti)) == doctest::Approx(area));

  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = testing::random_tensor(rng, {4, 7});
    for (double& v : a.mutable_data()) v = std::abs(v);
    for (std::size_t t = 0; t < 4; ++t) {
      double s = 0.0;
      for (std::size_t n = 0; n < 7; ++n) s += a(t, n);
      for (std::size_t n = 0; n < 7; ++n) a.mutable_data()[t * 7 + n] /= s;
    }
    const double d = diagonality(a);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("hidden step labels take window majorities") {
  const std::vector<int> frames{3, 3, 3, 1, 1, 2, 2, 2, 2};
  // ceil(9 / 3) = 3 frames per step
  CHECK(hidden_step_labels(frames, 3) == std::vector<int>{3, 1, 2});
  // ceil(9 / 4) = 3; the last step's window is empty and reuses the final frame
  CHECK(hidden_step_labels(frames, 4) == std::vector<int>{3, 1, 2, 2});
  const std::vector<int> tie{5, 4};
  CHECK(hidden_step_labels(tie, 1) == std::vector<int>{4});
}

TEST_CASE("cluster_score examples") {
  Rng rng(9);
  std::vector<double> v;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    const double c = i % 2 ? 100.0 : -100.0;
    for (int k = 0; k < 3; ++k) v.push_back(c + 0.1 * rng.normal());
    labels.push_back(i % 2);
  }
  const Tensor sep({40, 3}, v);
  auto r = cluster_score(sep, labels);
  CHECK(r.silhouette > 0.99);
  CHECK(r.projection.size() == 40);
  CHECK(r.labels.size() == 2);

  const Tensor blob = testing::random_tensor(rng, {500, 4});
  std::vector<int> random_labels(500);
  for (int& l : random_labels) l = static_cast<int>(rng.index(3));
  CHECK(std::abs(cluster_score(blob, random_labels).silhouette) < 0.1);

  const std::vector<int> single(40, 1);
  CHECK_THROWS_AS(cluster_score(sep, single), ContractError);
  CHECK_THROWS_AS(cluster_score(sep, std::vector<int>(39, 0)), ContractError);
}

TEST_CASE("cluster_score keeps the five most frequent labels") {
  Rng rng(10);
  std::vector<int> labels;
  for (int l = 0; l < 7; ++l) {
    for (int k = 0; k <= l; ++k) labels.push_back(l);
  }
  const Tensor reps = testing::random_tensor(rng, {labels.size(), 3});
  auto r = cluster_score(reps, labels);
  CHECK(r.labels == std::vector<int>{6, 5, 4, 3, 2});
  CHECK(r.projection.size() == 7 + 6 + 5 + 4 + 3);
}

TEST_CASE("cluster_score is invariant to duplication and rotation") {
  Rng rng(11);
  const Tensor reps = testing::random_tensor(rng, {30, 2});
  std::vector<int> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<int>(i % 3);
  const double base = cluster_score(reps, labels).silhouette;

  std::vector<int> dup_labels;
  for (int l : labels) dup_labels.insert(dup_labels.end(), {l, l});
  CHECK(cluster_score(repeat_rows(reps, 2), dup_labels).silhouette == doctest::Approx(base).epsilon(1e-12));

  const double th = 0.7;
  std::vector<double> rot;
  for (std::size_t i = 0; i < 30; ++i) {
    rot.push_back(std::cos(th) * reps(i, 0) - std::sin(th) * reps(i, 1));
    rot.push_back(std::sin(th) * reps(i, 0) + std::cos(th) * reps(i, 1));
  }
  const auto rr = cluster_score(Tensor({30, 2}, rot), labels);
  CHECK(rr.silhouette == doctest::Approx(base).epsilon(1e-12));
  // The PCA projection is rotation invariant up to the deterministic sign.
  const auto r0 = cluster_score(reps, labels);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(std::abs(rr.projection[i].x) == doctest::Approx(std::abs(r0.projection[i].x)));
  }
}

TEST_CASE("projection csv") {
  const auto path = std::filesystem::temp_directory_path() / "seqvc_test_projection.csv";
  write_projection_csv(path, {{1.5, -2.0, 3, 0}, {0.0, 1.0, 4, 1}});
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "index,label,pc1,pc2");
  CHECK(first == "0,3,1.5,-2");
  std::filesystem::remove(path);
}
