#include "seqvc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "seqvc/errors.hpp"
#include "seqvc/rng.hpp"

namespace seqvc {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local KinkTracker* g_kink_tracker = nullptr;

Tape& default_tape() {
  thread_local Tape tape;
  return tape;
}

[[noreturn]] void contract(const std::string& message) { throw ContractError(message); }

std::string op_shapes(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (!t.defined()) contract(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    contract(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
             shape_str(t.shape()));
  }
}

std::vector<double>& grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

using BackwardFn = std::function<void(const TapeNode&)>;

// Builds the result tensor, checks it for NaN/Inf and records a tape node
// when any input requires a gradient.
Tensor finish(const char* op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs, BackwardFn backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  }
  if (needs_grad) {
    out->requires_grad = true;
    TapeNode node;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
    node.output = out;
    node.backward = std::move(backward_fn);
    Tape::active().record(std::move(node));
  }
  return Tensor(out);
}

Tensor finish_vec(const char* op, Shape shape, std::vector<double> data,
                  const std::vector<Tensor>& inputs, BackwardFn backward_fn) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  bool needs_grad = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  if (needs_grad) {
    out->requires_grad = true;
    TapeNode node;
    node.op = op;
    for (const Tensor& t : inputs) node.inputs.push_back(t.impl());
    node.output = out;
    node.backward = std::move(backward_fn);
    Tape::active().record(std::move(node));
  }
  return Tensor(out);
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Shared implementation for elementwise unary ops: `deriv(x, y)` gives dy/dx.
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  if (!x.defined()) contract(std::string(op) + ": undefined tensor");
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return finish(op, x.shape(), std::move(out), {&x}, [deriv](const TapeNode& n) {
    auto& src = *n.inputs[0];
    if (!src.requires_grad) return;
    auto& g = grad_buffer(src);
    const auto& gy = n.output->grad;
    const auto& y = n.output->data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * deriv(src.data[i], y[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (values.size() != shape_numel(shape)) {
    contract("Tensor: " + std::to_string(values.size()) + " values do not fill shape " +
             shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) contract("Tensor::matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

void Tensor::require_defined() const {
  if (!impl_) contract("Tensor: use of undefined tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return impl_->shape;
}

std::size_t Tensor::numel() const {
  require_defined();
  return impl_->data.size();
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) contract("Tensor::dim: axis out of range for shape " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) contract("Tensor::rows: not a matrix, shape " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) contract("Tensor::cols: not a matrix, shape " + shape_str(shape()));
  return impl_->shape[1];
}

std::span<const double> Tensor::data() const {
  require_defined();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) contract("Tensor::item: tensor has shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::operator()(std::size_t i, std::size_t j) const {
  return impl_->data[i * cols() + j];
}

double Tensor::operator[](std::size_t i) const { return data()[i]; }

std::vector<double> Tensor::to_vector() const {
  const auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  require_defined();
  impl_->requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  require_defined();
  return grad_buffer(*impl_);
}

std::span<double> Tensor::mutable_grad() {
  require_defined();
  return grad_buffer(*impl_);
}

void Tensor::zero_grad() {
  require_defined();
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
  require_defined();
  return Tensor(impl_->shape, impl_->data);
}

// ---------------------------------------------------------------------------

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) contract("backward: undefined loss");
  if (loss.numel() != 1) contract("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) contract("backward: loss does not depend on any tensor requiring grad");
  for (auto& node : nodes_) node.output->grad.clear();
  bool on_tape = false;
  for (const auto& node : nodes_) {
    if (node.output == loss.impl()) {
      on_tape = true;
      break;
    }
  }
  if (on_tape) {
    loss.impl()->grad.assign(1, 1.0);
  } else {
    grad_buffer(*loss.impl())[0] += 1.0;
    return;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it);
  }
}

Tape& Tape::active() { return g_active_tape ? *g_active_tape : default_tape(); }

TapeScope::TapeScope() : previous_(g_active_tape) { g_active_tape = &tape_; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

KinkTracker::KinkTracker() : hash_(0xCBF29CE484222325ULL), previous_(g_kink_tracker) {
  g_kink_tracker = this;
}
KinkTracker::~KinkTracker() { g_kink_tracker = previous_; }

void KinkTracker::observe(std::span<const double> values) {
  for (double v : values) {
    const std::uint64_t side = v > 0.0 ? 1 : (v < 0.0 ? 2 : 3);
    hash_ ^= side;
    hash_ *= 0x100000001B3ULL;
  }
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  }
  return m;
}

AttentionMask AttentionMask::all(std::size_t rows, std::size_t cols) {
  return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) contract(op_shapes("matmul", a.shape(), b.shape()));
  std::vector<double> c(n * m, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      const double* bp = pb + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return finish("matmul", Shape{n, m}, std::move(c), {&a, &b}, [n, k, m](const TapeNode& node) {
    auto& A = *node.inputs[0];
    auto& B = *node.inputs[1];
    const double* gc = node.output->grad.data();
    if (A.requires_grad) {
      double* ga = grad_buffer(A).data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = B.data.data() + p * m;
          const double* gci = gc + i * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gci[j] * bp[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (B.requires_grad) {
      double* gb = grad_buffer(B).data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* gci = gc + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A.data[i * k + p];
          double* gbp = gb + p * m;
          for (std::size_t j = 0; j < m; ++j) gbp[j] += aip * gci[j];
        }
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) contract(op_shapes("matmul_nt", a.shape(), b.shape()));
  std::vector<double> c(n * m, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
      c[i * m + j] = acc;
    }
  }
  return finish("matmul_nt", Shape{n, m}, std::move(c), {&a, &b}, [n, k, m](const TapeNode& node) {
    auto& A = *node.inputs[0];
    auto& B = *node.inputs[1];
    const double* gc = node.output->grad.data();
    if (A.requires_grad) {
      double* ga = grad_buffer(A).data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          const double g = gc[i * m + j];
          const double* bj = B.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bj[p];
        }
      }
    }
    if (B.requires_grad) {
      double* gb = grad_buffer(B).data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = A.data.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double g = gc[i * m + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * ai[p];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  const auto d = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = d[i * m + j];
  }
  return finish("transpose", Shape{m, n}, std::move(out), {&a}, [n, m](const TapeNode& node) {
    auto& A = *node.inputs[0];
    if (!A.requires_grad) return;
    auto& g = grad_buffer(A);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += gy[j * n + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

namespace {

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) contract(std::string(op) + ": undefined tensor");
  if (a.shape() != b.shape()) contract(op_shapes(op, a.shape(), b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish("add", a.shape(), std::move(out), {&a, &b}, [](const TapeNode& node) {
    const auto& gy = node.output->grad;
    for (auto& in : node.inputs) {
      if (!in->requires_grad) continue;
      auto& g = grad_buffer(*in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return finish("sub", a.shape(), std::move(out), {&a, &b}, [](const TapeNode& node) {
    const auto& gy = node.output->grad;
    if (node.inputs[0]->requires_grad) {
      auto& g = grad_buffer(*node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
    if (node.inputs[1]->requires_grad) {
      auto& g = grad_buffer(*node.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish("mul", a.shape(), std::move(out), {&a, &b}, [](const TapeNode& node) {
    const auto& gy = node.output->grad;
    auto& A = *node.inputs[0];
    auto& B = *node.inputs[1];
    if (A.requires_grad) {
      auto& g = grad_buffer(A);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * B.data[i];
    }
    if (B.requires_grad) {
      auto& g = grad_buffer(B);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * A.data[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_rank("add_row", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (bias.numel() != m) contract(op_shapes("add_row", x.shape(), bias.shape()));
  std::vector<double> out(n * m);
  const auto d = x.data(), b = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = d[i * m + j] + b[j];
  }
  return finish("add_row", x.shape(), std::move(out), {&x, &bias}, [n, m](const TapeNode& node) {
    const auto& gy = node.output->grad;
    if (node.inputs[0]->requires_grad) {
      auto& g = grad_buffer(*node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
    if (node.inputs[1]->requires_grad) {
      auto& g = grad_buffer(*node.inputs[1]);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j];
      }
    }
  });
}

Tensor mul_row(const Tensor& x, const Tensor& gain) {
  require_rank("mul_row", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.numel() != m) contract(op_shapes("mul_row", x.shape(), gain.shape()));
  std::vector<double> out(n * m);
  const auto d = x.data(), s = gain.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = d[i * m + j] * s[j];
  }
  return finish("mul_row", x.shape(), std::move(out), {&x, &gain}, [n, m](const TapeNode& node) {
    const auto& gy = node.output->grad;
    auto& X = *node.inputs[0];
    auto& G = *node.inputs[1];
    if (X.requires_grad) {
      auto& g = grad_buffer(X);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += gy[i * m + j] * G.data[j];
      }
    }
    if (G.requires_grad) {
      auto& g = grad_buffer(G);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j] * X.data[i * m + j];
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& x, const Tensor& alpha) {
  if (!x.defined() || !alpha.defined()) contract("scale_by: undefined tensor");
  if (alpha.numel() != 1) contract("scale_by: alpha must have one element, got " + shape_str(alpha.shape()));
  const double a = alpha.data()[0];
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * d[i];
  return finish("scale_by", x.shape(), std::move(out), {&x, &alpha}, [](const TapeNode& node) {
    const auto& gy = node.output->grad;
    auto& X = *node.inputs[0];
    auto& A = *node.inputs[1];
    if (X.requires_grad) {
      auto& g = grad_buffer(X);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * A.data[0];
    }
    if (A.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * X.data[i];
      grad_buffer(A)[0] += acc;
    }
  });
}

Tensor mul_const(const Tensor& x, std::span<const double> weights) {
  if (!x.defined()) contract("mul_const: undefined tensor");
  if (weights.size() != x.numel()) {
    contract("mul_const: " + std::to_string(weights.size()) + " weights for shape " + shape_str(x.shape()));
  }
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<double> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * w[i];
  return finish("mul_const", x.shape(), std::move(out), {&x}, [w = std::move(w)](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * w[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Tensor relu(const Tensor& x) {
  if (g_kink_tracker && x.defined()) g_kink_tracker->observe(x.data());
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, [](double v) { return stable_sigmoid(v); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  if (g_kink_tracker && x.defined()) g_kink_tracker->observe(x.data());
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, [](double v) { return stable_softplus(v); },
               [](double v, double) { return stable_sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Tensor softmax_rows(const Tensor& x, const AttentionMask* mask) {
  require_rank("softmax_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (mask && (mask->rows != n || mask->cols != m)) {
    contract("softmax_rows: mask " + shape_str({mask->rows, mask->cols}) + " vs input " +
             shape_str(x.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const auto d = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (mask && !mask->at(i, j)) continue;
      mx = any ? std::max(mx, d[i * m + j]) : d[i * m + j];
      any = true;
    }
    if (!any) contract("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (mask && !mask->at(i, j)) continue;
      const double e = std::exp(d[i * m + j] - mx);
      out[i * m + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= total;
  }
  return finish("softmax_rows", x.shape(), std::move(out), {&x}, [n, m](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& y = node.output->data;
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += y[i * m + j] * gy[i * m + j];
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += y[i * m + j] * (gy[i * m + j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank("log_softmax_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<double> out(n * m);
  const auto d = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = d[i * m];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, d[i * m + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(d[i * m + j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = d[i * m + j] - lse;
  }
  return finish("log_softmax_rows", x.shape(), std::move(out), {&x}, [n, m](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& y = node.output->data;
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) total += gy[i * m + j];
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += gy[i * m + j] - std::exp(y[i * m + j]) * total;
    }
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("layer_norm_rows", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.numel() != m || bias.numel() != m) {
    contract(op_shapes("layer_norm_rows", x.shape(), gain.shape()));
  }
  std::vector<double> out(n * m);
  auto xhat = std::make_shared<std::vector<double>>(n * m);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const auto d = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += d[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (d[i * m + j] - mu) * (d[i * m + j] - mu);
    var /= static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    for (std::size_t j = 0; j < m; ++j) {
      const double h = (d[i * m + j] - mu) * inv;
      (*xhat)[i * m + j] = h;
      out[i * m + j] = gv[j] * h + bv[j];
    }
  }
  return finish("layer_norm_rows", x.shape(), std::move(out), {&x, &gain, &bias},
                [n, m, xhat, inv_std](const TapeNode& node) {
    auto& X = *node.inputs[0];
    auto& G = *node.inputs[1];
    auto& B = *node.inputs[2];
    const auto& gy = node.output->grad;
    if (G.requires_grad) {
      auto& g = grad_buffer(G);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j] * (*xhat)[i * m + j];
      }
    }
    if (B.requires_grad) {
      auto& g = grad_buffer(B);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j];
      }
    }
    if (X.requires_grad) {
      auto& g = grad_buffer(X);
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double dh = gy[i * m + j] * G.data[j];
          mean_d += dh;
          mean_dh += dh * (*xhat)[i * m + j];
        }
        mean_d *= inv_m;
        mean_dh *= inv_m;
        for (std::size_t j = 0; j < m; ++j) {
          const double dh = gy[i * m + j] * G.data[j];
          g[i * m + j] += (*inv_std)[i] * (dh - mean_d - (*xhat)[i * m + j] * mean_dh);
        }
      }
    }
  });
}

Tensor instance_norm_cols(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank("instance_norm_cols", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.numel() != m || bias.numel() != m) {
    contract(op_shapes("instance_norm_cols", x.shape(), gain.shape()));
  }
  std::vector<double> out(n * m);
  auto xhat = std::make_shared<std::vector<double>>(n * m);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto d = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t j = 0; j < m; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += d[i * m + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (d[i * m + j] - mu) * (d[i * m + j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[j] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (d[i * m + j] - mu) * inv;
      (*xhat)[i * m + j] = h;
      out[i * m + j] = gv[j] * h + bv[j];
    }
  }
  return finish("instance_norm_cols", x.shape(), std::move(out), {&x, &gain, &bias},
                [n, m, xhat, inv_std](const TapeNode& node) {
    auto& X = *node.inputs[0];
    auto& G = *node.inputs[1];
    auto& B = *node.inputs[2];
    const auto& gy = node.output->grad;
    if (G.requires_grad) {
      auto& g = grad_buffer(G);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j] * (*xhat)[i * m + j];
      }
    }
    if (B.requires_grad) {
      auto& g = grad_buffer(B);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) g[j] += gy[i * m + j];
      }
    }
    if (X.requires_grad) {
      auto& g = grad_buffer(X);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t j = 0; j < m; ++j) {
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dh = gy[i * m + j] * G.data[j];
          mean_d += dh;
          mean_dh += dh * (*xhat)[i * m + j];
        }
        mean_d *= inv_n;
        mean_dh *= inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          const double dh = gy[i * m + j] * G.data[j];
          g[i * m + j] += (*inv_std)[j] * (dh - mean_d - (*xhat)[i * m + j] * mean_dh);
        }
      }
    }
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) contract("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (p == 0.0) return x;
  std::vector<double> keep(x.numel());
  const double scale_kept = 1.0 / (1.0 - p);
  for (double& k : keep) k = rng.uniform() >= p ? scale_kept : 0.0;
  return mul_const(x, keep);
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding", table, 2);
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      contract("embedding: id " + std::to_string(idx[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t n = idx.size();
  return finish("embedding", Shape{n, d}, std::move(out), {&table},
                [idx = std::move(idx), d](const TapeNode& node) {
    auto& T = *node.inputs[0];
    if (!T.requires_grad) return;
    auto& g = grad_buffer(T);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[i]) * d + j] += gy[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

Tensor sum(const Tensor& x) {
  if (!x.defined()) contract("sum: undefined tensor");
  double total = 0.0;
  for (double v : x.data()) total += v;
  return finish("sum", Shape{}, std::vector<double>{total}, {&x}, [](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const double gy = node.output->grad[0];
    for (double& v : g) v += gy;
  });
}

Tensor mean(const Tensor& x) {
  if (!x.defined() || x.numel() == 0) contract("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) contract("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.cols() != m) contract(op_shapes("concat_rows", parts.front().shape(), p.shape()));
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * m);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return finish_vec("concat_rows", Shape{total, m}, std::move(out), parts, [](const TapeNode& node) {
    const auto& gy = node.output->grad;
    std::size_t offset = 0;
    for (auto& in : node.inputs) {
      const std::size_t len = in->data.size();
      if (in->requires_grad) {
        auto& g = grad_buffer(*in);
        for (std::size_t i = 0; i < len; ++i) g[i] += gy[offset + i];
      }
      offset += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) contract("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.rows() != n) contract(op_shapes("concat_cols", parts.front().shape(), p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(n * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
    }
    offset += widths[k];
  }
  return finish_vec("concat_cols", Shape{n, total}, std::move(out), parts,
                    [n, total, widths](const TapeNode& node) {
    const auto& gy = node.output->grad;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k];
      if (in.requires_grad) {
        auto& g = grad_buffer(in);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += gy[i * total + offset + j];
        }
      }
      offset += widths[k];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", x, 2);
  const std::size_t m = x.cols();
  if (begin >= end || end > x.rows()) {
    contract("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
             ") invalid for shape " + shape_str(x.shape()));
  }
  const auto d = x.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(begin * m),
                          d.begin() + static_cast<std::ptrdiff_t>(end * m));
  return finish("slice_rows", Shape{end - begin, m}, std::move(out), {&x}, [begin, m](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < gy.size(); ++i) g[begin * m + i] += gy[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", x, 2);
  const std::size_t n = x.rows(), m = x.cols();
  if (begin >= end || end > m) {
    contract("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
             ") invalid for shape " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  const auto d = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = d[i * m + begin + j];
  }
  return finish("slice_cols", Shape{n, w}, std::move(out), {&x}, [n, m, w, begin](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += gy[i * w + j];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (!x.defined()) contract("reshape: undefined tensor");
  if (shape_numel(shape) != x.numel()) {
    contract("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return finish("reshape", std::move(shape), x.to_vector(), {&x}, [](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  require_rank("conv1d", x, 2);
  require_rank("conv1d", w, 3);
  if (stride < 1) contract("conv1d: stride must be >= 1");
  const std::size_t T = x.rows(), cin = x.cols();
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) contract(op_shapes("conv1d", x.shape(), w.shape()));
  if (b.numel() != cout) contract(op_shapes("conv1d", w.shape(), b.shape()));
  if (T + 2 * pad < k) contract("conv1d: input of " + std::to_string(T) + " steps shorter than kernel");
  const std::size_t T_out = (T + 2 * pad - k) / stride + 1;
  std::vector<double> out(T_out * cout);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < T_out; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = pb[o];
      for (std::size_t q = 0; q < k; ++q) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + q) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        const double* xr = px + static_cast<std::size_t>(src) * cin;
        const double* wr = pw + o * cin * k + q;
        for (std::size_t c = 0; c < cin; ++c) acc += wr[c * k] * xr[c];
      }
      out[t * cout + o] = acc;
    }
  }
  return finish("conv1d", Shape{T_out, cout}, std::move(out), {&x, &w, &b},
                [T, cin, cout, k, stride, pad, T_out](const TapeNode& node) {
    auto& X = *node.inputs[0];
    auto& W = *node.inputs[1];
    auto& B = *node.inputs[2];
    const auto& gy = node.output->grad;
    double* gx = X.requires_grad ? grad_buffer(X).data() : nullptr;
    double* gw = W.requires_grad ? grad_buffer(W).data() : nullptr;
    if (B.requires_grad) {
      auto& gb = grad_buffer(B);
      for (std::size_t t = 0; t < T_out; ++t) {
        for (std::size_t o = 0; o < cout; ++o) gb[o] += gy[t * cout + o];
      }
    }
    if (!gx && !gw) return;
    for (std::size_t t = 0; t < T_out; ++t) {
      for (std::size_t o = 0; o < cout; ++o) {
        const double g = gy[t * cout + o];
        for (std::size_t q = 0; q < k; ++q) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + q) - static_cast<std::ptrdiff_t>(pad);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          for (std::size_t c = 0; c < cin; ++c) {
            const std::size_t wi = o * cin * k + c * k + q;
            if (gx) gx[s * cin + c] += g * W.data[wi];
            if (gw) gw[wi] += g * X.data[s * cin + c];
          }
        }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  if (stride < 1) contract("conv2d: stride must be >= 1");
  const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) contract(op_shapes("conv2d", x.shape(), w.shape()));
  if (b.numel() != cout) contract(op_shapes("conv2d", w.shape(), b.shape()));
  if (H + 2 * pad < kh || W + 2 * pad < kw) contract("conv2d: input smaller than kernel, shape " + shape_str(x.shape()));
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(cout * Ho * Wo);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  const auto inside = [](std::size_t pos, std::size_t off, std::size_t p, std::size_t lim, std::size_t& res) {
    const std::ptrdiff_t v = static_cast<std::ptrdiff_t>(pos + off) - static_cast<std::ptrdiff_t>(p);
    if (v < 0 || v >= static_cast<std::ptrdiff_t>(lim)) return false;
    res = static_cast<std::size_t>(v);
    return true;
  };
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = pb[o];
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t a = 0; a < kh; ++a) {
            std::size_t r;
            if (!inside(i * stride, a, pad, H, r)) continue;
            for (std::size_t e = 0; e < kw; ++e) {
              std::size_t s;
              if (!inside(j * stride, e, pad, W, s)) continue;
              acc += pw[((o * cin + c) * kh + a) * kw + e] * px[(c * H + r) * W + s];
            }
          }
        }
        out[(o * Ho + i) * Wo + j] = acc;
      }
    }
  }
  return finish("conv2d", Shape{cout, Ho, Wo}, std::move(out), {&x, &w, &b},
                [=](const TapeNode& node) {
    auto& X = *node.inputs[0];
    auto& Wt = *node.inputs[1];
    auto& B = *node.inputs[2];
    const auto& gy = node.output->grad;
    double* gx = X.requires_grad ? grad_buffer(X).data() : nullptr;
    double* gw = Wt.requires_grad ? grad_buffer(Wt).data() : nullptr;
    if (B.requires_grad) {
      auto& gb = grad_buffer(B);
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t q = 0; q < Ho * Wo; ++q) gb[o] += gy[o * Ho * Wo + q];
      }
    }
    if (!gx && !gw) return;
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t i = 0; i < Ho; ++i) {
        for (std::size_t j = 0; j < Wo; ++j) {
          const double g = gy[(o * Ho + i) * Wo + j];
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t a = 0; a < kh; ++a) {
              std::size_t r;
              if (!inside(i * stride, a, pad, H, r)) continue;
              for (std::size_t e = 0; e < kw; ++e) {
                std::size_t s;
                if (!inside(j * stride, e, pad, W, s)) continue;
                const std::size_t wi = ((o * cin + c) * kh + a) * kw + e;
                const std::size_t xi = (c * H + r) * W + s;
                if (gx) gx[xi] += g * Wt.data[wi];
                if (gw) gw[wi] += g * X.data[xi];
              }
            }
          }
        }
      }
    }
  });
}

Tensor time_major(const Tensor& x) {
  require_rank("time_major", x, 3);
  const std::size_t C = x.dim(0), T = x.dim(1), F = x.dim(2);
  std::vector<double> out(C * T * F);
  const auto d = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = 0; f < F; ++f) out[t * C * F + c * F + f] = d[(c * T + t) * F + f];
    }
  }
  return finish("time_major", Shape{T, C * F}, std::move(out), {&x}, [C, T, F](const TapeNode& node) {
    auto& X = *node.inputs[0];
    if (!X.requires_grad) return;
    auto& g = grad_buffer(X);
    const auto& gy = node.output->grad;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t f = 0; f < F; ++f) g[(c * T + t) * F + f] += gy[t * C * F + c * F + f];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Fused losses

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets, double pos_weight) {
  if (!logits.defined()) contract("bce_with_logits: undefined tensor");
  if (targets.size() != logits.numel()) {
    contract("bce_with_logits: " + std::to_string(targets.size()) + " targets for shape " +
             shape_str(logits.shape()));
  }
  std::vector<double> y(targets.begin(), targets.end());
  std::vector<double> out(y.size());
  const auto z = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = pos_weight * y[i] * stable_softplus(-z[i]) + (1.0 - y[i]) * stable_softplus(z[i]);
  }
  return finish("bce_with_logits", logits.shape(), std::move(out), {&logits},
                [y = std::move(y), pos_weight](const TapeNode& node) {
    auto& Z = *node.inputs[0];
    if (!Z.requires_grad) return;
    auto& g = grad_buffer(Z);
    const auto& gy = node.output->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = stable_sigmoid(Z.data[i]);
      g[i] += gy[i] * (-pos_weight * y[i] * (1.0 - s) + (1.0 - y[i]) * s);
    }
  });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  require_rank("cross_entropy_rows", logits, 2);
  const std::size_t n = logits.rows(), m = logits.cols();
  if (targets.size() != n) {
    contract("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
             std::to_string(n) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= m) contract("cross_entropy_rows: target id out of range");
  }
  const Tensor logp = log_softmax_rows(logits);
  std::vector<double> pick(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) pick[i * m + static_cast<std::size_t>(targets[i])] = -1.0 / static_cast<double>(n);
  return sum(mul_const(logp, pick));
}

}  // namespace seqvc
