#pragma once

// Dense real tensors with a reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same buffer. Every op below
// produces a new tensor and, when gradient recording is enabled and one of its
// inputs requires a gradient, appends a node to the thread's active Tape.
// Tape::backward walks the recorded nodes in reverse order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace seqvc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows here
  bool requires_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;
  // Rank-2 accessors; throw ContractError on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator()(std::size_t i, std::size_t j) const;
  double operator[](std::size_t i) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  // Gradient buffer; allocated as zeros on first access.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy without graph history; requires_grad is cleared.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  void require_defined() const;
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  std::function<void(const TapeNode&)> backward;
};

class Tape {
 public:
  void record(TapeNode node);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Populates grads of every requires_grad tensor reachable from `loss`.
  // Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss);

  // The tape ops record into on the calling thread.
  static Tape& active();

 private:
  std::vector<TapeNode> nodes_;
};

// Installs a fresh tape as the thread's active tape for the scope's lifetime.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

void backward(const Tensor& loss);

// Records a fingerprint of which side of each kink (relu, abs) inputs fall on.
// grad_check uses it to drop coordinates whose perturbation crosses a kink.
class KinkTracker {
 public:
  KinkTracker();
  ~KinkTracker();
  KinkTracker(const KinkTracker&) = delete;
  KinkTracker& operator=(const KinkTracker&) = delete;
  std::uint64_t signature() const { return hash_; }
  void observe(std::span<const double> values);

 private:
  std::uint64_t hash_;
  KinkTracker* previous_;
};

// ---------------------------------------------------------------------------
// Masks for attention. allowed[i * cols + j] != 0 when query i may see key j.

struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask causal(std::size_t n);
  static AttentionMask all(std::size_t rows, std::size_t cols);
  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

class Rng;

// ---------------------------------------------------------------------------
// Ops. Matrices are rank-2 [rows x cols], row-major.

Tensor matmul(const Tensor& a, const Tensor& b);     // [n x k] . [k x m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n x k] . [m x k]^T
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& bias);  // bias [cols] broadcast over rows
Tensor mul_row(const Tensor& x, const Tensor& gain);
Tensor scale(const Tensor& x, double factor);
Tensor scale_by(const Tensor& x, const Tensor& alpha);  // alpha has one element
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_const(const Tensor& x, std::span<const double> weights);  // elementwise, no grad to weights

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor softmax_rows(const Tensor& x, const AttentionMask* mask = nullptr);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Per-column statistics over rows (per-utterance channel normalization).
Tensor instance_norm_cols(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

// x [T x Cin], w [Cout x Cin x k], b [Cout] -> [T' x Cout].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);
// x [Cin x H x W], w [Cout x Cin x kh x kw], b [Cout] -> [Cout x H' x W'].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);
// [C x T x F] -> [T x C*F].
Tensor time_major(const Tensor& x);

// Per-element weighted BCE on logits: pw*y*softplus(-z) + (1-y)*softplus(z).
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets, double pos_weight);
// Mean negative log-likelihood of target ids under row-wise softmax of logits.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);

}  // namespace seqvc
