#pragma once

// Dense float64 tensors with a define-by-run reverse-mode tape.
//
// Tensors are immutable values: data lives behind a shared pointer to const
// storage, and every op returns a fresh tensor with a fresh id. When an op
// sees an input that requires grad (and grad mode is on for the calling
// thread) it appends a node to the thread's active Graph. backward() walks
// that tape in reverse and returns gradients keyed by tensor id.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dflens/error.hpp"

namespace dflens {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {
inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(concat(op, ": produced a non-finite value"));
  }
}
}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : data_(std::make_shared<const std::vector<double>>(std::move(data))),
        shape_(std::move(shape)),
        id_(detail::next_tensor_id()),
        requires_grad_(requires_grad) {
    if (shape_numel(shape_) != data_->size()) {
      throw ShapeError(concat("tensor shape ", shape_string(shape_), " holds ",
                              shape_numel(shape_), " elements but data has ", data_->size()));
    }
    detail::require_finite(*data_, "tensor");
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  const std::vector<double>& vec() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const {
    if (numel() != 1) throw ShapeError(concat("item() on tensor of shape ", shape_string(shape_)));
    return (*data_)[0];
  }

  std::uint64_t id() const { return id_; }
  bool requires_grad() const { return requires_grad_; }

  // Same values, new identity, no history.
  Tensor detach() const { return Tensor(data_, shape_, false); }
  // Leaf copy that records gradients from here on.
  Tensor requiring_grad() const { return Tensor(data_, shape_, true); }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

 private:
  Tensor(std::shared_ptr<const std::vector<double>> data, Shape shape, bool requires_grad)
      : data_(std::move(data)),
        shape_(std::move(shape)),
        id_(detail::next_tensor_id()),
        requires_grad_(requires_grad) {}

  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  std::uint64_t id_;
  bool requires_grad_;
};

enum class OpKind {
  add, sub, mul, scale, add_scalar, relu, silu, add_bias, conv2d, matmul, linear,
  transpose, softmax, upsample, downsample, concat, sum, mean, gap, embedding, reshape
};

// Gradient callback: receives dL/d(output) and accumulates into the buffers of
// inputs that require grad (nullptr entries are skipped).
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>* const> grad_in)>;

struct Node {
  OpKind kind;
  std::vector<Tensor> inputs;
  std::uint64_t output_id;
  BackwardFn backward;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::unordered_map<std::uint64_t, Tensor> grads) : grads_(std::move(grads)) {}

  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  // dL/dt, or zeros when t did not influence the loss.
  Tensor get(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

class Graph {
 public:
  void record(OpKind kind, std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn) {
    nodes_.push_back(Node{kind, std::move(inputs), output.id(), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Reverse sweep from a single-element loss. Returns gradients for every
  /// requires-grad tensor on the tape (leaves and intermediates) and resets
  /// the tape.
  Gradients backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ShapeError(concat("backward: loss must have exactly one element, got shape ",
                              shape_string(loss.shape())));
    }
    std::unordered_map<std::uint64_t, std::vector<double>> grads;
    std::unordered_map<std::uint64_t, Shape> shapes;
    grads[loss.id()] = {1.0};
    shapes[loss.id()] = loss.shape();

    std::vector<std::vector<double>*> slots;
    for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
      auto out = grads.find(node->output_id);
      if (out == grads.end()) continue;
      // Copy: the accumulation below may insert into the map.
      const std::vector<double> grad_out = out->second;
      slots.assign(node->inputs.size(), nullptr);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        const Tensor& in = node->inputs[i];
        if (!in.requires_grad()) continue;
        auto& buf = grads[in.id()];
        if (buf.empty()) {
          buf.assign(in.numel(), 0.0);
          shapes[in.id()] = in.shape();
        }
        slots[i] = &buf;
      }
      node->backward(grad_out, slots);
    }
    nodes_.clear();

    std::unordered_map<std::uint64_t, Tensor> result;
    for (auto& [id, g] : grads) {
      detail::require_finite(g, "backward");
      result.emplace(id, Tensor(shapes[id], std::move(g)));
    }
    return Gradients(std::move(result));
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
struct ThreadTapeState {
  Graph base;
  Graph* active = &base;
  int no_grad_depth = 0;
};
inline ThreadTapeState& tape_state() {
  thread_local ThreadTapeState state;
  return state;
}
}  // namespace detail

// The calling thread's active tape.
inline Graph& active_graph() { return *detail::tape_state().active; }
inline bool grad_enabled() { return detail::tape_state().no_grad_depth == 0; }

/// Installs a fresh Graph as the thread's active tape for the guard's lifetime.
class GraphScope {
 public:
  GraphScope() : previous_(detail::tape_state().active) { detail::tape_state().active = &graph_; }
  ~GraphScope() { detail::tape_state().active = previous_; }
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
  Graph& graph() { return graph_; }

 private:
  Graph graph_;
  Graph* previous_;
};

/// Disables recording on this thread (inference).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::tape_state().no_grad_depth; }
  ~NoGradGuard() { --detail::tape_state().no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Gradients backward(const Tensor& loss) { return active_graph().backward(loss); }

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

inline Tensor make_output(const char* op, Shape shape, std::vector<double> data, bool requires_grad) {
  require_finite(data, op);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline bool is_scalar_operand(const Tensor& t) { return t.rank() == 0 && t.numel() == 1; }

inline void check_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(concat(op, ": expected rank-", rank, " input, got shape ", shape_string(t.shape())));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

/// a (op) b for equal shapes, or with b a rank-0 scalar tensor.
inline Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool scalar_b = detail::is_scalar_operand(b) && !detail::is_scalar_operand(a);
  if (!scalar_b && a.shape() != b.shape()) {
    throw ShapeError(concat("elementwise: incompatible shapes ", shape_string(a.shape()), " and ",
                            shape_string(b.shape())));
  }
  const auto n = a.numel();
  const auto& av = a.vec();
  const auto& bv = b.vec();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = scalar_b ? bv[0] : bv[i];
    switch (op) {
      case BinaryOp::add: out[i] = av[i] + y; break;
      case BinaryOp::sub: out[i] = av[i] - y; break;
      case BinaryOp::mul: out[i] = av[i] * y; break;
    }
  }
  const bool rec = detail::any_requires_grad({&a, &b});
  Tensor result = detail::make_output("elementwise", a.shape(), std::move(out), rec);
  if (rec) {
    const OpKind kind = op == BinaryOp::add ? OpKind::add : op == BinaryOp::sub ? OpKind::sub : OpKind::mul;
    active_graph().record(kind, {a, b}, result,
                          [op, scalar_b, a, b](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            const auto& av = a.vec();
                            const auto& bv = b.vec();
                            if (gin[0]) {
                              auto& ga = *gin[0];
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                ga[i] += op == BinaryOp::mul ? g[i] * (scalar_b ? bv[0] : bv[i]) : g[i];
                              }
                            }
                            if (gin[1]) {
                              auto& gb = *gin[1];
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                double d = op == BinaryOp::add ? g[i] : op == BinaryOp::sub ? -g[i] : g[i] * av[i];
                                gb[scalar_b ? 0 : i] += d;
                              }
                            }
                          });
  }
  return result;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::mul, a, b); }

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto& av = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("scale", a.shape(), std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::scale, {a}, result,
                          [factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                          });
  }
  return result;
}

inline Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.numel());
  const auto& av = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + value;
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("add_scalar", a.shape(), std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::add_scalar, {a}, result,
                          [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                          });
  }
  return result;
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("relu", a.shape(), std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::relu, {a}, result,
                          [a](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            const auto& av = a.vec();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (av[i] > 0.0) (*gin[0])[i] += g[i];
                            }
                          });
  }
  return result;
}

// x * sigmoid(x)
inline Tensor silu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& av = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("silu", a.shape(), std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::silu, {a}, result,
                          [a](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            const auto& av = a.vec();
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double s = 1.0 / (1.0 + std::exp(-av[i]));
                              (*gin[0])[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                            }
                          });
  }
  return result;
}

/// x[C, ...] + bias[C], broadcast over the trailing axes.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 1 || bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
    throw ShapeError(concat("add_bias: bias ", shape_string(bias.shape()), " does not match leading axis of ",
                            shape_string(x.shape())));
  }
  const std::size_t channels = x.dim(0);
  const std::size_t inner = x.numel() / channels;
  std::vector<double> out(x.numel());
  const auto& xv = x.vec();
  const auto& bv = bias.vec();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = xv[c * inner + i] + bv[c];
  }
  const bool rec = detail::any_requires_grad({&x, &bias});
  Tensor result = detail::make_output("add_bias", x.shape(), std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::add_bias, {x, bias}, result,
                          [channels, inner](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            if (gin[0]) {
                              for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                            }
                            if (gin[1]) {
                              for (std::size_t c = 0; c < channels; ++c) {
                                double acc = 0.0;
                                for (std::size_t i = 0; i < inner; ++i) acc += g[c * inner + i];
                                (*gin[1])[c] += acc;
                              }
                            }
                          });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeometry {
  std::size_t in_channels, height, width, out_channels, kernel, stride, padding, out_height, out_width;
  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t pixels() const { return out_height * out_width; }
};

inline void im2col(const std::vector<double>& x, const ConvGeometry& g, std::vector<double>& cols) {
  cols.assign(g.patch() * g.pixels(), 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const double* src = x.data() + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            row[oy * g.out_width + ox] = src[ix];
          }
        }
      }
    }
  }
}

inline void col2im_add(const std::vector<double>& cols, const ConvGeometry& g, std::vector<double>& x) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols.data() + ((c * g.kernel + ky) * g.kernel + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = x.data() + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[ix] += row[oy * g.out_width + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of input[C_in,H,W] with kernels[C_out,C_in,k,k].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  detail::check_rank(input, 3, "conv2d");
  detail::check_rank(kernels, 4, "conv2d");
  const std::size_t k = kernels.dim(2);
  if (kernels.dim(3) != k || k % 2 == 0) {
    throw ShapeError(concat("conv2d: kernels must be square with odd extent, got ", shape_string(kernels.shape())));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw ShapeError(concat("conv2d: kernel input channels ", shape_string(kernels.shape()),
                            " do not match input ", shape_string(input.shape())));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), kernels.dim(0), k, stride, padding, 0, 0};
  const auto span_h = static_cast<std::ptrdiff_t>(g.height + 2 * padding) - static_cast<std::ptrdiff_t>(k);
  const auto span_w = static_cast<std::ptrdiff_t>(g.width + 2 * padding) - static_cast<std::ptrdiff_t>(k);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<std::ptrdiff_t>(stride) != 0 ||
      span_w % static_cast<std::ptrdiff_t>(stride) != 0) {
    throw ShapeError(concat("conv2d: output extent (H + 2*padding - k)/stride + 1 is not integral for input ",
                            shape_string(input.shape()), ", k=", k, ", stride=", stride, ", padding=", padding));
  }
  g.out_height = static_cast<std::size_t>(span_h) / stride + 1;
  g.out_width = static_cast<std::size_t>(span_w) / stride + 1;

  auto cols = std::make_shared<std::vector<double>>();
  detail::im2col(input.vec(), g, *cols);
  std::vector<double> out(g.out_channels * g.pixels());
  detail::as_matrix(out, g.out_channels, g.pixels()).noalias() =
      detail::as_matrix(kernels.data(), g.out_channels, g.patch()) * detail::as_matrix(*cols, g.patch(), g.pixels());

  const bool rec = detail::any_requires_grad({&input, &kernels});
  Tensor result = detail::make_output("conv2d", Shape{g.out_channels, g.out_height, g.out_width}, std::move(out), rec);
  if (rec) {
    active_graph().record(
        OpKind::conv2d, {input, kernels}, result,
        [g, cols, kernels](std::span<const double> grad, std::span<std::vector<double>* const> gin) {
          const auto gmat = detail::as_matrix(grad, g.out_channels, g.pixels());
          if (gin[1]) {
            detail::as_matrix(*gin[1], g.out_channels, g.patch()).noalias() +=
                gmat * detail::as_matrix(*cols, g.patch(), g.pixels()).transpose();
          }
          if (gin[0]) {
            std::vector<double> gcols(g.patch() * g.pixels());
            detail::as_matrix(gcols, g.patch(), g.pixels()).noalias() =
                detail::as_matrix(kernels.data(), g.out_channels, g.patch()).transpose() * gmat;
            detail::col2im_add(gcols, g, *gin[0]);
          }
        });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_rank(a, 2, "matmul");
  detail::check_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError(concat("matmul: inner extents differ for ", shape_string(a.shape()), " and ",
                            shape_string(b.shape())));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(a.data(), m, k) * detail::as_matrix(b.data(), k, n);
  const bool rec = detail::any_requires_grad({&a, &b});
  Tensor result = detail::make_output("matmul", Shape{m, n}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::matmul, {a, b}, result,
                          [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            const auto gm = detail::as_matrix(g, m, n);
                            if (gin[0]) {
                              detail::as_matrix(*gin[0], m, k).noalias() +=
                                  gm * detail::as_matrix(b.data(), k, n).transpose();
                            }
                            if (gin[1]) {
                              detail::as_matrix(*gin[1], k, n).noalias() +=
                                  detail::as_matrix(a.data(), m, k).transpose() * gm;
                            }
                          });
  }
  return result;
}

inline Tensor transpose(const Tensor& a) {
  detail::check_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  detail::as_matrix(out, n, m) = detail::as_matrix(a.data(), m, n).transpose();
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("transpose", Shape{n, m}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::transpose, {a}, result,
                          [m, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            detail::as_matrix(*gin[0], m, n) += detail::as_matrix(g, n, m).transpose();
                          });
  }
  return result;
}

/// x[n, in] * weight[out, in]^T + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::check_rank(x, 2, "linear");
  detail::check_rank(weight, 2, "linear");
  detail::check_rank(bias, 1, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != out_dim) {
    throw ShapeError(concat("linear: incompatible shapes x", shape_string(x.shape()), " w",
                            shape_string(weight.shape()), " b", shape_string(bias.shape())));
  }
  std::vector<double> out(n * out_dim);
  auto om = detail::as_matrix(out, n, out_dim);
  om.noalias() = detail::as_matrix(x.data(), n, in) * detail::as_matrix(weight.data(), out_dim, in).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += bias[c];
  }
  const bool rec = detail::any_requires_grad({&x, &weight, &bias});
  Tensor result = detail::make_output("linear", Shape{n, out_dim}, std::move(out), rec);
  if (rec) {
    active_graph().record(
        OpKind::linear, {x, weight, bias}, result,
        [x, weight, n, in, out_dim](std::span<const double> g, std::span<std::vector<double>* const> gin) {
          const auto gm = detail::as_matrix(g, n, out_dim);
          if (gin[0]) detail::as_matrix(*gin[0], n, in).noalias() += gm * detail::as_matrix(weight.data(), out_dim, in);
          if (gin[1]) {
            detail::as_matrix(*gin[1], out_dim, in).noalias() += gm.transpose() * detail::as_matrix(x.data(), n, in);
          }
          if (gin[2]) {
            for (std::size_t r = 0; r < n; ++r) {
              for (std::size_t c = 0; c < out_dim; ++c) (*gin[2])[c] += g[r * out_dim + c];
            }
          }
        });
  }
  return result;
}

/// Softmax of a rank-2 tensor along `axis` (0: each column sums to 1, 1: each row).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_rank(x, 2, "softmax");
  if (axis > 1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const std::size_t groups = axis == 0 ? cols : rows;
  const std::size_t len = axis == 0 ? rows : cols;
  const std::size_t step = axis == 0 ? cols : 1;
  auto index = [=](std::size_t group, std::size_t i) {
    return axis == 0 ? i * step + group : group * cols + i;
  };
  const auto& xv = x.vec();
  std::vector<double> out(x.numel());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[index(gi, i)]);
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(xv[index(gi, i)] - mx);
      out[index(gi, i)] = e;
      total += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[index(gi, i)] /= total;
  }
  const bool rec = detail::any_requires_grad({&x});
  Tensor result = detail::make_output("softmax", x.shape(), std::move(out), rec);
  if (rec) {
    auto y = std::make_shared<const std::vector<double>>(result.vec());
    active_graph().record(OpKind::softmax, {x}, result,
                          [y, groups, len, index](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            const auto& yv = *y;
                            for (std::size_t gi = 0; gi < groups; ++gi) {
                              double dot = 0.0;
                              for (std::size_t i = 0; i < len; ++i) dot += g[index(gi, i)] * yv[index(gi, i)];
                              for (std::size_t i = 0; i < len; ++i) {
                                const auto p = index(gi, i);
                                (*gin[0])[p] += yv[p] * (g[p] - dot);
                              }
                            }
                          });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Spatial and structural ops

/// Nearest-neighbour upsampling of x[C,H,W] by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::check_rank(x, 3, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto& xv = x.vec();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) out[(ch * oh + i) * ow + j] = xv[(ch * h + i / factor) * w + j / factor];
    }
  }
  const bool rec = detail::any_requires_grad({&x});
  Tensor result = detail::make_output("upsample_nearest", Shape{c, oh, ow}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::upsample, {x}, result,
                          [c, h, w, oh, ow, factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              for (std::size_t i = 0; i < oh; ++i) {
                                for (std::size_t j = 0; j < ow; ++j) {
                                  (*gin[0])[(ch * h + i / factor) * w + j / factor] += g[(ch * oh + i) * ow + j];
                                }
                              }
                            }
                          });
  }
  return result;
}

/// Keeps every `factor`-th row and column of x[C,H,W] (nearest-neighbour downsampling).
inline Tensor downsample_nearest(const Tensor& x, std::size_t factor) {
  detail::check_rank(x, 3, "downsample_nearest");
  if (factor == 0 || x.dim(1) % factor != 0 || x.dim(2) % factor != 0) {
    throw ShapeError(concat("downsample_nearest: factor ", factor, " does not divide ", shape_string(x.shape())));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h / factor, ow = w / factor;
  const auto& xv = x.vec();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) out[(ch * oh + i) * ow + j] = xv[(ch * h + i * factor) * w + j * factor];
    }
  }
  const bool rec = detail::any_requires_grad({&x});
  Tensor result = detail::make_output("downsample_nearest", Shape{c, oh, ow}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::downsample, {x}, result,
                          [c, h, w, oh, ow, factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              for (std::size_t i = 0; i < oh; ++i) {
                                for (std::size_t j = 0; j < ow; ++j) {
                                  (*gin[0])[(ch * h + i * factor) * w + j * factor] += g[(ch * oh + i) * ow + j];
                                }
                              }
                            }
                          });
  }
  return result;
}

/// Channel concatenation of a[Ca,H,W] and b[Cb,H,W].
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::check_rank(a, 3, "concat_channels");
  detail::check_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError(concat("concat_channels: spatial extents differ for ", shape_string(a.shape()), " and ",
                            shape_string(b.shape())));
  }
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.vec().begin(), a.vec().end());
  out.insert(out.end(), b.vec().begin(), b.vec().end());
  const bool rec = detail::any_requires_grad({&a, &b});
  Tensor result = detail::make_output("concat_channels", Shape{a.dim(0) + b.dim(0), a.dim(1), a.dim(2)},
                                      std::move(out), rec);
  if (rec) {
    const std::size_t na = a.numel();
    active_graph().record(OpKind::concat, {a, b}, result,
                          [na](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            if (gin[0]) {
                              for (std::size_t i = 0; i < na; ++i) (*gin[0])[i] += g[i];
                            }
                            if (gin[1]) {
                              for (std::size_t i = na; i < g.size(); ++i) (*gin[1])[i - na] += g[i];
                            }
                          });
  }
  return result;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError(concat("reshape: cannot view ", shape_string(x.shape()), " as ", shape_string(shape)));
  }
  const bool rec = detail::any_requires_grad({&x});
  Tensor result(std::move(shape), x.vec(), rec);
  if (rec) {
    active_graph().record(OpKind::reshape, {x}, result,
                          [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                          });
  }
  return result;
}

/// Rows of table[V, D] selected by ids -> [ids.size(), D].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::check_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw Error(concat("embedding: token id ", ids[r], " outside vocabulary of size ", vocab));
    }
    std::copy_n(table.vec().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const bool rec = detail::any_requires_grad({&table});
  Tensor result = detail::make_output("embedding", Shape{ids.size(), d}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::embedding, {table}, result,
                          [ids, d](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t r = 0; r < ids.size(); ++r) {
                              for (std::size_t j = 0; j < d; ++j) {
                                (*gin[0])[static_cast<std::size_t>(ids[r]) * d + j] += g[r * d + j];
                              }
                            }
                          });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  const bool rec = detail::any_requires_grad({&x});
  Tensor result = detail::make_output("sum", Shape{}, {acc}, rec);
  if (rec) {
    active_graph().record(OpKind::sum, {x}, result,
                          [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (auto& v : *gin[0]) v += g[0];
                          });
  }
  return result;
}

inline Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  const bool rec = detail::any_requires_grad({&x});
  Tensor result = detail::make_output("mean", Shape{}, {acc * inv}, rec);
  if (rec) {
    active_graph().record(OpKind::mean, {x}, result,
                          [inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (auto& v : *gin[0]) v += g[0] * inv;
                          });
  }
  return result;
}

/// out[c] = mean over (i, j) of a[c, i, j]
inline Tensor global_average_pool(const Tensor& a) {
  detail::check_rank(a, 3, "global_average_pool");
  const std::size_t c = a.dim(0), inner = a.dim(1) * a.dim(2);
  const double inv = 1.0 / static_cast<double>(inner);
  std::vector<double> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += a[ch * inner + i];
    out[ch] = acc * inv;
  }
  const bool rec = detail::any_requires_grad({&a});
  Tensor result = detail::make_output("global_average_pool", Shape{c}, std::move(out), rec);
  if (rec) {
    active_graph().record(OpKind::gap, {a}, result,
                          [c, inner, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              for (std::size_t i = 0; i < inner; ++i) (*gin[0])[ch * inner + i] += g[ch] * inv;
                            }
                          });
  }
  return result;
}

}  // namespace dflens
