#pragma once

// Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//
// Every op appends a node to the thread's active Graph when any input
// requires a gradient. backward() walks the graph once, newest node first.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xmpt {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatMul,
  kConv2d,
  kUpsample2x,
  kRelu,
  kExp,
  kLog,
  kSum,
  kMean,
  kConcat,
  kGatherRows,
  kL2Normalize,
  kSoftmax,
  kBilinearSample,
  kTranspose,
  kReshape,
  kTakeAlongRows,
};

inline constexpr std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kBilinearSample: return "bilinear_sample";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTakeAlongRows: return "take_along_rows";
  }
  return "unknown";
}

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kAdd,        OpKind::kSub,          OpKind::kMul,         OpKind::kScalarMul,
    OpKind::kMatMul,     OpKind::kConv2d,       OpKind::kUpsample2x,  OpKind::kRelu,
    OpKind::kExp,        OpKind::kLog,          OpKind::kSum,         OpKind::kMean,
    OpKind::kConcat,     OpKind::kGatherRows,   OpKind::kL2Normalize, OpKind::kSoftmax,
    OpKind::kBilinearSample, OpKind::kTranspose, OpKind::kReshape,    OpKind::kTakeAlongRows,
};

inline std::optional<OpKind> op_from_name(std::string_view name) {
  for (OpKind k : kAllOpKinds)
    if (op_name(k) == name) return k;
  return std::nullopt;
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until populated
  std::uint64_t graph_id = 0;  // 0: no node
  std::size_t node_index = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

// Accumulates d(loss)/d(inputs) given the node output (with its grad).
using BackwardFn = std::function<void(const TensorImpl& out, std::span<const ImplPtr> inputs)>;

struct Node {
  OpKind kind;
  std::vector<ImplPtr> inputs;
  std::weak_ptr<TensorImpl> output;
  BackwardFn backward;
};

inline std::uint64_t next_graph_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

/// Append-only operation record. One graph per training step.
class Graph {
 public:
  Graph() : id_(detail::next_graph_id()) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const detail::Node& node(std::size_t i) const { return nodes_.at(i); }

  std::size_t append(detail::Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  // Sign pattern of every relu input seen while tracking is on. Two
  // evaluations with different patterns straddle a kink.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool track_kinks() const { return track_kinks_; }
  std::vector<std::uint8_t>& kink_pattern() { return kink_pattern_; }

 private:
  std::uint64_t id_;
  std::vector<detail::Node> nodes_;
  bool track_kinks_ = false;
  std::vector<std::uint8_t> kink_pattern_;
};

namespace detail {

struct ThreadState {
  Graph root;
  Graph* active = &root;
  bool grad_enabled = true;
};

inline ThreadState& thread_state() {
  thread_local ThreadState s;
  return s;
}

// Test hook: when set, the named op's backward scales its incoming
// gradient by 1.5, so gradient checks must fail for it.
inline std::optional<OpKind>& corrupted_op() {
  static std::optional<OpKind> op;
  return op;
}

}  // namespace detail

inline Graph& active_graph() { return *detail::thread_state().active; }

/// Installs a fresh graph for the lifetime of the scope.
class GraphScope {
 public:
  GraphScope() : prev_(detail::thread_state().active) { detail::thread_state().active = &graph_; }
  ~GraphScope() { detail::thread_state().active = prev_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
  Graph& graph() { return graph_; }

 private:
  Graph graph_;
  Graph* prev_;
};

/// Disables recording for the lifetime of the scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::thread_state().grad_enabled) { detail::thread_state().grad_enabled = false; }
  ~NoGradGuard() { detail::thread_state().grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline void set_gradient_corruption(std::optional<OpKind> op) { detail::corrupted_op() = op; }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape));
    if (shape.empty()) throw ShapeError("tensor: empty shape (use {1} for scalars)");
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor: shape " + to_string(shape) + " needs " + std::to_string(numel_of(shape)) +
                       " values, got " + std::to_string(data.size()));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  // Only leaves may be written; graph nodes keep references to their inputs.
  std::span<double> mutable_data() {
    if (impl_->graph_id != 0) throw AutodiffError("mutable_data: tensor is an op output");
    return impl_->data;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  bool has_node() const { return impl_->graph_id != 0; }

  /// Copy of the values with no graph history and no gradient.
  Tensor detach() const { return from(shape(), impl_->data, false); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!thread_state().grad_enabled) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_output(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

// Records `out` as produced by `kind` from `inputs` when any input needs a gradient.
inline Tensor record(OpKind kind, Tensor out, std::vector<Tensor> inputs, BackwardFn fn) {
  bool any = false;
  if (thread_state().grad_enabled)
    for (auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Graph& g = active_graph();
  Node n;
  n.kind = kind;
  for (auto& t : inputs) n.inputs.push_back(t.impl());
  n.output = out.impl();
  n.backward = std::move(fn);
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.node_index = g.append(std::move(n));
  impl.graph_id = g.id();
  return out;
}

inline double* grad_buffer(const ImplPtr& in) {
  if (!in->requires_grad) return nullptr;
  in->ensure_grad();
  return in->grad.data();
}

[[noreturn]] inline void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense kernels.

namespace kernels {

// C[M×N] (+)= A[M×K] · B[K×N], all row-major and contiguous. Every output
// element is accumulated as c = c + a[i][p]·b[p][j] for p = 0..K−1 in order,
// whichever code path computes it, so permuting A's rows permutes C's rows
// exactly.
typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }
inline v4d splat4(double x) { return v4d{x, x, x, x}; }

inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                 bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  constexpr std::size_t kRows = 4, kCols = 8;
  const std::size_t n_tiled = n - n % kCols, m_tiled = m - m % kRows;
  std::vector<double> panel(k * kCols);
  for (std::size_t j = 0; j < n_tiled; j += kCols) {
    for (std::size_t p = 0; p < k; ++p) std::memcpy(panel.data() + p * kCols, b + p * n + j, kCols * sizeof(double));
    const double* pb = panel.data();
    std::size_t i = 0;
    for (; i < m_tiled; i += kRows) {
      v4d acc[kRows][2];
      for (std::size_t r = 0; r < kRows; ++r) {
        acc[r][0] = load4(c + (i + r) * n + j);
        acc[r][1] = load4(c + (i + r) * n + j + 4);
      }
      const double* a0 = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const v4d b0 = load4(pb + p * kCols), b1 = load4(pb + p * kCols + 4);
        for (std::size_t r = 0; r < kRows; ++r) {
          const v4d as = splat4(a0[r * k + p]);
          acc[r][0] = acc[r][0] + as * b0;
          acc[r][1] = acc[r][1] + as * b1;
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        store4(c + (i + r) * n + j, acc[r][0]);
        store4(c + (i + r) * n + j + 4, acc[r][1]);
      }
    }
    for (; i < m; ++i) {
      v4d acc0 = load4(c + i * n + j), acc1 = load4(c + i * n + j + 4);
      for (std::size_t p = 0; p < k; ++p) {
        const v4d as = splat4(a[i * k + p]);
        acc0 = acc0 + as * load4(pb + p * kCols);
        acc1 = acc1 + as * load4(pb + p * kCols + 4);
      }
      store4(c + i * n + j, acc0);
      store4(c + i * n + j + 4, acc1);
    }
  }
  if (n_tiled == n) return;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = n_tiled; j < n; ++j) {
      double acc = c[i * n + j];
      for (std::size_t p = 0; p < k; ++p) acc = acc + a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

inline std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// C[M×N] (+)= A[M×K] · B[N×K]^T, as row-by-row dot products.
inline void gemm_bt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  const std::size_t k4 = k - k % 4;
  auto hsum = [](v4d v) { return (v[0] + v[1]) + (v[2] + v[3]); };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      v4d acc[4] = {};
      for (std::size_t p = 0; p < k4; p += 4) {
        const v4d bv = load4(bj + p);
        for (std::size_t r = 0; r < 4; ++r) acc[r] = acc[r] + load4(a0 + r * k + p) * bv;
      }
      for (std::size_t r = 0; r < 4; ++r) {
        double s = hsum(acc[r]);
        for (std::size_t p = k4; p < k; ++p) s += a0[r * k + p] * bj[p];
        c[(i + r) * n + j] += s;
      }
    }
  }
  for (; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double* ai = a + i * k;
      const double* bj = b + j * k;
      v4d acc = {};
      for (std::size_t p = 0; p < k4; p += 4) acc = acc + load4(ai + p) * load4(bj + p);
      double s = hsum(acc);
      for (std::size_t p = k4; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
}

// C[M×N] (+)= A[K×M]^T · B[K×N]
inline void gemm_at(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  auto at = transpose(a, k, m);
  gemm(m, n, k, at.data(), b, c, accumulate);
}

struct ConvGeometry {
  std::size_t cin, h, w, kh, kw, stride, pad, hout, wout;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return hout * wout; }
};

// cols[(c,ki,kj) × (oy,ox)]
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.wout + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.hout; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wout; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wout + ox];
          }
        }
      }
}

// Bilinear interpolation taps at continuous coordinate (x, y), pixel centres
// at integers, clamped to the border.
struct Taps {
  std::size_t idx[4];
  double wt[4];
};

inline Taps bilinear_taps(double x, double y, std::size_t w, std::size_t h) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  return Taps{{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
              {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Elementwise with right-aligned broadcasting.

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_index, b_index;  // per output element
  bool same = false;
};

inline Broadcast broadcast(OpKind kind, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      shape_fail(kind, "cannot broadcast " + to_string(a) + " with " + to_string(b) + " at dim " + std::to_string(i));
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  const std::size_t n = numel_of(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d < r; ++d) {
      ia = ia * pa[d] + (pa[d] == 1 ? 0 : idx[d]);
      ib = ib * pb[d] + (pb[d] == 1 ? 0 : idx[d]);
    }
    bc.a_index[flat] = ia;
    bc.b_index[flat] = ib;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < bc.out[d]) break;
      idx[d] = 0;
    }
  }
  return bc;
}

template <class Fwd, class DA, class DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, Fwd f, DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(broadcast(kind, a.shape(), b.shape()));
  const std::size_t n = numel_of(bc->out);
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  if (bc->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[bc->a_index[i]], bd[bc->b_index[i]]);
  }
  Tensor result = make_output(bc->out, std::move(out));
  return record(kind, result, {a, b}, [bc, da, db](const TensorImpl& o, std::span<const ImplPtr> in) {
    const auto& av = in[0]->data;
    const auto& bv = in[1]->data;
    double* ga = grad_buffer(in[0]);
    double* gb = grad_buffer(in[1]);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const std::size_t ia = bc->same ? i : bc->a_index[i];
      const std::size_t ib = bc->same ? i : bc->b_index[i];
      if (ga) ga[ia] += o.grad[i] * da(av[ia], bv[ib]);
      if (gb) gb[ib] += o.grad[i] * db(av[ia], bv[ib]);
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(OpKind kind, const Tensor& x, Fwd f, Deriv df) {
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor result = make_output(x.shape(), std::move(out));
  return record(kind, result, {x}, [df](const TensorImpl& o, std::span<const ImplPtr> in) {
    double* g = grad_buffer(in[0]);
    if (!g) return;
    const auto& xv = in[0]->data;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(xv[i], o.data[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::kAdd, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::kSub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      OpKind::kMul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scalar_mul(const Tensor& x, double s) {
  return detail::unary(
      OpKind::kScalarMul, x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor relu(const Tensor& x) {
  Graph& g = active_graph();
  if (g.track_kinks()) {
    auto& pat = g.kink_pattern();
    for (double v : x.data()) pat.push_back(v > 0.0 ? 1 : 0);
  }
  return detail::unary(
      OpKind::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      OpKind::kExp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) detail::shape_fail(OpKind::kLog, "non-positive input " + std::to_string(v));
  return detail::unary(
      OpKind::kLog, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Reductions.

namespace detail {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Tensor reduce_axis(OpKind kind, const Tensor& x, std::size_t axis, bool keepdim, double scale) {
  if (axis >= x.rank())
    shape_fail(kind, "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  const auto sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim || x.rank() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  }
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xd[(o * sp.extent + e) * sp.inner + i];
  for (auto& v : out) v *= scale;
  Tensor result = make_output(std::move(out_shape), std::move(out));
  return record(kind, result, {x}, [sp, scale](const TensorImpl& o, std::span<const ImplPtr> in) {
    double* g = grad_buffer(in[0]);
    if (!g) return;
    for (std::size_t a = 0; a < sp.outer; ++a)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          g[(a * sp.extent + e) * sp.inner + i] += scale * o.grad[a * sp.inner + i];
  });
}

inline Tensor reduce_all(OpKind kind, const Tensor& x, double scale) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = make_output({1}, {s * scale});
  return record(kind, result, {x}, [scale](const TensorImpl& o, std::span<const ImplPtr> in) {
    double* g = grad_buffer(in[0]);
    if (!g) return;
    const double go = o.grad[0] * scale;
    for (std::size_t i = 0; i < in[0]->data.size(); ++i) g[i] += go;
  });
}

}  // namespace detail

inline Tensor sum(const Tensor& x) { return detail::reduce_all(OpKind::kSum, x, 1.0); }
inline Tensor mean(const Tensor& x) {
  return detail::reduce_all(OpKind::kMean, x, 1.0 / static_cast<double>(x.numel()));
}
inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis(OpKind::kSum, x, axis, keepdim, 1.0);
}
inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  if (axis >= x.rank()) detail::shape_fail(OpKind::kMean, "axis out of range for " + to_string(x.shape()));
  return detail::reduce_axis(OpKind::kMean, x, axis, keepdim, 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Linear algebra and structure.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    detail::shape_fail(OpKind::kMatMul, "incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  kernels::gemm(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  Tensor result = detail::make_output({m, n}, std::move(out));
  return detail::record(OpKind::kMatMul, result, {a, b},
                        [m, k, n](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          if (double* ga = detail::grad_buffer(in[0]))
                            kernels::gemm_bt(m, k, n, o.grad.data(), in[1]->data.data(), ga, true);
                          if (double* gb = detail::grad_buffer(in[1]))
                            kernels::gemm_at(k, n, m, in[0]->data.data(), o.grad.data(), gb, true);
                        });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) detail::shape_fail(OpKind::kTranspose, "expects rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor result = detail::make_output({c, r}, kernels::transpose(x.data().data(), r, c));
  return detail::record(OpKind::kTranspose, result, {x},
                        [r, c](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    detail::shape_fail(OpKind::kReshape, to_string(x.shape()) + " -> " + to_string(shape));
  std::vector<double> d(x.data().begin(), x.data().end());
  Tensor result = detail::make_output(std::move(shape), std::move(d));
  return detail::record(OpKind::kReshape, result, {x},
                        [](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                        });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) detail::shape_fail(OpKind::kConcat, "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) detail::shape_fail(OpKind::kConcat, "axis out of range for " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) detail::shape_fail(OpKind::kConcat, "rank mismatch " + to_string(p.shape()));
    for (std::size_t d = 0; d < s0.size(); ++d)
      if (d != axis && p.dim(d) != s0[d])
        detail::shape_fail(OpKind::kConcat, "dim " + std::to_string(d) + " mismatch: " + to_string(p.shape()) +
                                                " vs " + to_string(s0));
    extents.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  const auto sp = detail::split_axis(out_shape, axis);
  std::vector<double> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pd = parts[pi].data();
    const std::size_t chunk = extents[pi] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * sp.extent * sp.inner + offset * sp.inner);
    offset += extents[pi];
  }
  Tensor result = detail::make_output(out_shape, std::move(out));
  return detail::record(OpKind::kConcat, result, parts,
                        [sp, extents](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          std::size_t off = 0;
                          for (std::size_t pi = 0; pi < in.size(); ++pi) {
                            const std::size_t chunk = extents[pi] * sp.inner;
                            if (double* g = detail::grad_buffer(in[pi]))
                              for (std::size_t a = 0; a < sp.outer; ++a) {
                                const double* src = o.grad.data() + a * sp.extent * sp.inner + off * sp.inner;
                                for (std::size_t i = 0; i < chunk; ++i) g[a * chunk + i] += src[i];
                              }
                            off += extents[pi];
                          }
                        });
}

/// Selects rows along the first axis; repeated indices accumulate in backward.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) detail::shape_fail(OpKind::kGatherRows, "empty index list");
  const std::size_t n = x.dim(0);
  const std::size_t width = x.numel() / n;
  std::vector<double> out(rows.size() * width);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n)
      detail::shape_fail(OpKind::kGatherRows,
                         "row " + std::to_string(rows[r]) + " out of range for " + to_string(x.shape()));
    std::copy_n(xd.data() + rows[r] * width, width, out.data() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor result = detail::make_output(std::move(shape), std::move(out));
  return detail::record(
      OpKind::kGatherRows, result, {x},
      [idx = std::vector<std::size_t>(rows.begin(), rows.end()), width](const detail::TensorImpl& o,
                                                                           std::span<const detail::ImplPtr> in) {
        double* g = detail::grad_buffer(in[0]);
        if (!g) return;
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t c = 0; c < width; ++c) g[idx[r] * width + c] += o.grad[r * width + c];
      });
}

/// out[i][j] = x[i][cols[i*k + j]] for an N×M input and N×k column table.
inline Tensor take_along_rows(const Tensor& x, std::span<const std::size_t> cols, std::size_t k) {
  if (x.rank() != 2) detail::shape_fail(OpKind::kTakeAlongRows, "expects rank 2, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (k == 0 || cols.size() != n * k)
    detail::shape_fail(OpKind::kTakeAlongRows, "index table of " + std::to_string(cols.size()) +
                                                   " entries does not match " + std::to_string(n) + "x" +
                                                   std::to_string(k));
  std::vector<double> out(n * k);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = cols[i * k + j];
      if (c >= m) detail::shape_fail(OpKind::kTakeAlongRows, "column " + std::to_string(c) + " out of range");
      out[i * k + j] = xd[i * m + c];
    }
  Tensor result = detail::make_output({n, k}, std::move(out));
  return detail::record(
      OpKind::kTakeAlongRows, result, {x},
      [idx = std::vector<std::size_t>(cols.begin(), cols.end()), n, m, k](const detail::TensorImpl& o,
                                                                             std::span<const detail::ImplPtr> in) {
        double* g = detail::grad_buffer(in[0]);
        if (!g) return;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) g[i * m + idx[i * k + j]] += o.grad[i * k + j];
      });
}

inline Tensor l2_normalize(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto norms = std::make_shared<std::vector<double>>(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += xd[r * d + c] * xd[r * d + c];
    const double nrm = std::max(std::sqrt(s), 1e-12);
    (*norms)[r] = nrm;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xd[r * d + c] / nrm;
  }
  Tensor result = detail::make_output(x.shape(), std::move(out));
  return detail::record(OpKind::kL2Normalize, result, {x},
                        [norms, d, rows](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* y = o.data.data() + r * d;
                            const double* go = o.grad.data() + r * d;
                            double dot = 0.0;
                            for (std::size_t c = 0; c < d; ++c) dot += y[c] * go[c];
                            for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (go[c] - y[c] * dot) / (*norms)[r];
                          }
                        });
}

inline Tensor softmax(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (out[r * d + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= s;
  }
  Tensor result = detail::make_output(x.shape(), std::move(out));
  return detail::record(OpKind::kSoftmax, result, {x},
                        [d, rows](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* y = o.data.data() + r * d;
                            const double* go = o.grad.data() + r * d;
                            double dot = 0.0;
                            for (std::size_t c = 0; c < d; ++c) dot += y[c] * go[c];
                            for (std::size_t c = 0; c < d; ++c) g[r * d + c] += y[c] * (go[c] - dot);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Image ops. Feature maps are C×H×W unless stated otherwise.

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x: Cin×H×W, weight: Cout×Cin×kh×kw, bias: Cout. im2col + gemm.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {}) {
  using detail::shape_fail;
  if (x.rank() != 3) shape_fail(OpKind::kConv2d, "input must be CxHxW, got " + to_string(x.shape()));
  if (weight.rank() != 4) shape_fail(OpKind::kConv2d, "weight must be rank 4, got " + to_string(weight.shape()));
  if (weight.dim(1) != x.dim(0))
    shape_fail(OpKind::kConv2d, "input channels " + std::to_string(x.dim(0)) + " != weight channels " +
                                    std::to_string(weight.dim(1)));
  if (bias.numel() != weight.dim(0))
    shape_fail(OpKind::kConv2d, "bias length " + std::to_string(bias.numel()) + " != output channels " +
                                    std::to_string(weight.dim(0)));
  if (opt.stride == 0) shape_fail(OpKind::kConv2d, "stride must be positive");
  kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3), opt.stride, opt.padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    shape_fail(OpKind::kConv2d, "kernel larger than padded input " + to_string(x.shape()));
  g.hout = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const std::size_t cout = weight.dim(0);
  auto cols = std::make_shared<std::vector<double>>(g.patch() * g.pixels());
  kernels::im2col(x.data().data(), g, cols->data());
  std::vector<double> out(cout * g.pixels());
  kernels::gemm(cout, g.pixels(), g.patch(), weight.data().data(), cols->data(), out.data(), false);
  const auto bd = bias.data();
  for (std::size_t c = 0; c < cout; ++c)
    for (std::size_t p = 0; p < g.pixels(); ++p) out[c * g.pixels() + p] += bd[c];
  Tensor result = detail::make_output({cout, g.hout, g.wout}, std::move(out));
  return detail::record(
      OpKind::kConv2d, result, {x, weight, bias},
      [g, cout, cols](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
        const std::size_t p = g.pixels();
        if (double* gw = detail::grad_buffer(in[1])) kernels::gemm_bt(cout, g.patch(), p, o.grad.data(), cols->data(), gw, true);
        if (double* gb = detail::grad_buffer(in[2]))
          for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t q = 0; q < p; ++q) gb[c] += o.grad[c * p + q];
        if (double* gx = detail::grad_buffer(in[0])) {
          std::vector<double> dcols(g.patch() * p);
          kernels::gemm_at(g.patch(), p, cout, in[1]->data.data(), o.grad.data(), dcols.data(), false);
          kernels::col2im(dcols.data(), g, gx);
        }
      });
}

/// Doubles H and W with bilinear interpolation (half-pixel centres, edge clamp).
inline Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 3) detail::shape_fail(OpKind::kUpsample2x, "input must be CxHxW, got " + to_string(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = 2 * h, wo = 2 * w;
  auto taps = std::make_shared<std::vector<kernels::Taps>>(ho * wo);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox)
      (*taps)[oy * wo + ox] = kernels::bilinear_taps((static_cast<double>(ox) + 0.5) / 2.0 - 0.5,
                                                     (static_cast<double>(oy) + 0.5) / 2.0 - 0.5, w, h);
  std::vector<double> out(c * ho * wo);
  const auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = xd.data() + ch * h * w;
    double* dst = out.data() + ch * ho * wo;
    for (std::size_t q = 0; q < ho * wo; ++q) {
      const auto& t = (*taps)[q];
      dst[q] = t.wt[0] * src[t.idx[0]] + t.wt[1] * src[t.idx[1]] + t.wt[2] * src[t.idx[2]] + t.wt[3] * src[t.idx[3]];
    }
  }
  Tensor result = detail::make_output({c, ho, wo}, std::move(out));
  return detail::record(OpKind::kUpsample2x, result, {x},
                        [taps, c, h, w, ho, wo](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t q = 0; q < ho * wo; ++q) {
                              const auto& t = (*taps)[q];
                              const double go = o.grad[ch * ho * wo + q];
                              for (int i = 0; i < 4; ++i) g[ch * h * w + t.idx[i]] += t.wt[i] * go;
                            }
                        });
}

struct Point2 {
  double x = 0.0, y = 0.0;
};

/// Samples an H×W×C map at continuous (x, y) positions, pixel centres at
/// integers, clamped to the border. Differentiable w.r.t. the map only.
inline Tensor bilinear_sample(const Tensor& map, std::span<const Point2> at) {
  if (map.rank() != 3) detail::shape_fail(OpKind::kBilinearSample, "map must be HxWxC, got " + to_string(map.shape()));
  if (at.empty()) detail::shape_fail(OpKind::kBilinearSample, "no sample positions");
  const std::size_t h = map.dim(0), w = map.dim(1), c = map.dim(2);
  auto taps = std::make_shared<std::vector<kernels::Taps>>();
  taps->reserve(at.size());
  for (const auto& p : at) taps->push_back(kernels::bilinear_taps(p.x, p.y, w, h));
  std::vector<double> out(at.size() * c, 0.0);
  const auto md = map.data();
  for (std::size_t s = 0; s < at.size(); ++s)
    for (int i = 0; i < 4; ++i) {
      const auto& t = (*taps)[s];
      for (std::size_t ch = 0; ch < c; ++ch) out[s * c + ch] += t.wt[i] * md[t.idx[i] * c + ch];
    }
  Tensor result = detail::make_output({at.size(), c}, std::move(out));
  return detail::record(OpKind::kBilinearSample, result, {map},
                        [taps, c](const detail::TensorImpl& o, std::span<const detail::ImplPtr> in) {
                          double* g = detail::grad_buffer(in[0]);
                          if (!g) return;
                          for (std::size_t s = 0; s < taps->size(); ++s)
                            for (int i = 0; i < 4; ++i) {
                              const auto& t = (*taps)[s];
                              for (std::size_t ch = 0; ch < c; ++ch)
                                g[t.idx[i] * c + ch] += t.wt[i] * o.grad[s * c + ch];
                            }
                        });
}

// ---------------------------------------------------------------------------

/// Populates d(loss)/d(leaf) for every requires-grad leaf reachable from a
/// scalar loss. Gradients accumulate into existing buffers.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw AutodiffError("backward: loss of shape " + to_string(loss.shape()) + " is not scalar");
  Graph& g = active_graph();
  const auto& li = *loss.impl();
  if (li.graph_id == 0 || li.graph_id != g.id())
    throw AutodiffError("backward: loss is detached (no node in the active graph)");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  const auto corrupt = detail::corrupted_op();
  for (std::size_t i = li.node_index + 1; i-- > 0;) {
    const auto& node = g.node(i);
    auto out = node.output.lock();
    if (!out || out->grad.empty()) continue;
    if (corrupt && *corrupt == node.kind) {
      for (auto& v : out->grad) v *= 1.5;
    }
    node.backward(*out, node.inputs);
    // Intermediate gradients are not needed once propagated.
    out->grad.clear();
    out->grad.shrink_to_fit();
  }
}

}  // namespace xmpt
