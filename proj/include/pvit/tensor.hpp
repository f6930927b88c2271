#pragma once

// Minimal dense tensor engine with reverse-mode differentiation.
//
// All values are 64-bit floats in row-major order. Every operation that
// receives an input requiring gradient records a graph node; backward()
// replays the nodes in reverse creation order, so the tape is topologically
// ordered by construction. There is no broadcasting beyond scalar-with-tensor:
// shape disagreements are hard errors.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pvit/rng.hpp"

namespace pvit {

using Shape = std::vector<long>;

struct EngineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeMismatch : EngineError {
    using EngineError::EngineError;
};
struct InvalidAxis : EngineError {
    using EngineError::EngineError;
};
struct NotScalar : EngineError {
    using EngineError::EngineError;
};
struct DisconnectedLoss : EngineError {
    using EngineError::EngineError;
};

inline long shape_numel(const Shape& shape) {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Resolves the gradient buffer for a tensor during one backward pass.
// In direct mode leaf gradients accumulate into Tensor::grad (repeated
// backward calls without reset accumulate); in detached mode everything
// lives in a private map so concurrent passes never touch shared tensors.
class GradStore {
public:
    explicit GradStore(bool detached) : detached_(detached) {}

    std::vector<double>* sink(const TensorPtr& t);
    const std::vector<double>& read(const Tensor& t) const;

    std::unordered_map<const Tensor*, std::vector<double>> take() { return std::move(buffers_); }

private:
    bool detached_;
    std::unordered_map<const Tensor*, std::vector<double>> buffers_;
    std::unordered_set<const Tensor*> direct_seen_;
    friend void backward_impl(const TensorPtr&, GradStore&);
};

struct Node {
    const char* op;
    std::vector<TensorPtr> inputs;
    // Accumulates input gradients given the output tensor and the pass store.
    std::function<void(const Tensor& out, GradStore& store)> backward;
};

inline std::atomic<std::uint64_t> g_tensor_counter{0};

class Tensor {
public:
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // same shape as values once backward has run
    bool requires_grad = false;
    std::unique_ptr<Node> node;  // producing operation; null for leaves
    std::uint64_t id;

    Tensor(Shape s, std::vector<double> v, bool rg)
        : shape(std::move(s)), values(std::move(v)), requires_grad(rg), id(g_tensor_counter.fetch_add(1, std::memory_order_relaxed)) {}

    long numel() const { return static_cast<long>(values.size()); }
    bool is_leaf() const { return node == nullptr; }
    bool is_scalar() const { return values.size() == 1; }

    double scalar() const {
        if (!is_scalar()) throw NotScalar("scalar() on tensor of shape " + shape_str(shape));
        return values[0];
    }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }
};

inline std::vector<double>* GradStore::sink(const TensorPtr& t) {
    if (!detached_) {
        if (t->is_leaf() && !t->requires_grad) return nullptr;  // never accumulates
        if (t->is_leaf()) {
            t->ensure_grad();
            return &t->grad;
        }
        // Intermediates get a fresh gradient each pass.
        if (direct_seen_.insert(t.get()).second) {
            t->grad.assign(t->values.size(), 0.0);
        }
        return &t->grad;
    }
    if (t->is_leaf() && !t->requires_grad) return nullptr;
    auto [it, fresh] = buffers_.try_emplace(t.get());
    if (fresh) it->second.assign(t->values.size(), 0.0);
    return &it->second;
}

inline const std::vector<double>& GradStore::read(const Tensor& t) const {
    if (!detached_) return t.grad;
    auto it = buffers_.find(&t);
    if (it == buffers_.end()) {
        static const std::vector<double> kEmpty;
        return kEmpty;
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// Construction

inline TensorPtr new_tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (long d : shape) {
        if (d < 1) throw ShapeMismatch("dimension < 1 in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != static_cast<long>(values.size())) {
        throw ShapeMismatch("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    }
    return std::make_shared<Tensor>(std::move(shape), std::move(values), requires_grad);
}

inline TensorPtr full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
    return new_tensor(std::move(shape), std::move(v), requires_grad);
}

inline TensorPtr zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

inline TensorPtr scalar_tensor(double value, bool requires_grad = false) { return new_tensor({1}, {value}, requires_grad); }

inline TensorPtr randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return new_tensor(std::move(shape), std::move(v), requires_grad);
}

namespace detail {

inline bool any_grad(const std::vector<TensorPtr>& inputs) {
    for (const auto& t : inputs) {
        if (t->requires_grad || t->node) return true;
    }
    return false;
}

inline TensorPtr make_result(Shape shape, std::vector<double> values, const char* op, std::vector<TensorPtr> inputs,
                             std::function<void(const Tensor&, GradStore&)> backward) {
    auto out = new_tensor(std::move(shape), std::move(values));
    if (any_grad(inputs)) {
        out->node = std::make_unique<Node>(Node{op, std::move(inputs), std::move(backward)});
    }
    return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Binary kinds accept equal shapes or a scalar b.

enum class EwKind { add, sub, mul, div, scale, clip_max, gelu };

namespace detail {

// Shared skeleton for binary elementwise ops where b is a same-shape tensor
// or a single-element tensor applied to every element of a.
template <typename Fwd, typename BwdA, typename BwdB>
TensorPtr binary_op(const char* name, const TensorPtr& a, const TensorPtr& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    const bool b_scalar = b->is_scalar();
    if (!b_scalar) check_same_shape(name, *a, *b);
    std::vector<double> out(a->values.size());
    const double bs = b->values[0];
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(a->values[i], b_scalar ? bs : b->values[i]);
    }
    return make_result(
        a->shape, std::move(out), name, {a, b},
        [=](const Tensor& o, GradStore& store) {
            const auto& g = store.read(o);
            const auto& av = o.node->inputs[0]->values;
            const auto& bv = o.node->inputs[1]->values;
            if (auto* ga = store.sink(o.node->inputs[0])) {
                for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bwd_a(av[i], b_scalar ? bv[0] : bv[i]);
            }
            if (auto* gb = store.sink(o.node->inputs[1])) {
                if (b_scalar) {
                    double acc = 0.0;
                    for (size_t i = 0; i < g.size(); ++i) acc += g[i] * bwd_b(av[i], bv[0]);
                    (*gb)[0] += acc;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * bwd_b(av[i], bv[i]);
                }
            }
        });
}

template <typename Fwd, typename Bwd>
TensorPtr unary_op(const char* name, const TensorPtr& a, Fwd fwd, Bwd bwd) {
    std::vector<double> out(a->values.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a->values[i]);
    return make_result(a->shape, std::move(out), name, {a},
                       [=](const Tensor& o, GradStore& store) {
                           const auto& g = store.read(o);
                           const auto& av = o.node->inputs[0]->values;
                           if (auto* ga = store.sink(o.node->inputs[0])) {
                               for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bwd(av[i], o.values[i]);
                           }
                       });
}

}  // namespace detail

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline TensorPtr scale(const TensorPtr& a, double s) {
    return detail::unary_op(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline TensorPtr add_scalar(const TensorPtr& a, double s) {
    return detail::unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// min(x, c); subgradient 0 at and above the threshold.
inline TensorPtr clip_max(const TensorPtr& a, double c) {
    return detail::unary_op(
        "clip_max", a, [c](double x) { return std::min(x, c); }, [c](double x, double) { return x < c ? 1.0 : 0.0; });
}

// max(x, c); subgradient 0 at and below the threshold.
inline TensorPtr clip_min(const TensorPtr& a, double c) {
    return detail::unary_op(
        "clip_min", a, [c](double x) { return std::max(x, c); }, [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

inline TensorPtr gelu(const TensorPtr& a) {
    // Exact erf form: x * Phi(x). The derivative is computed alongside the
    // forward pass, so backward spends no transcendentals.
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<double> out(a->values.size());
    std::vector<double> deriv(a->values.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a->values[i];
        const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        out[i] = x * phi;
        deriv[i] = phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
    }
    return detail::make_result(a->shape, std::move(out), "gelu", {a},
                               [deriv = std::move(deriv)](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* ga = store.sink(o.node->inputs[0])) {
                                       for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv[i];
                                   }
                               });
}

inline TensorPtr sigmoid(const TensorPtr& a) {
    return detail::unary_op(
        "sigmoid", a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline TensorPtr absval(const TensorPtr& a) {
    return detail::unary_op(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline TensorPtr square(const TensorPtr& a) { return mul(a, a); }

// Elementwise min/max of two same-shape tensors; gradient follows the
// selected operand (ties select a).
inline TensorPtr emin(const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("emin", *a, *b);
    return detail::binary_op(
        "emin", a, b, [](double x, double y) { return std::min(x, y); },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x > y ? 1.0 : 0.0; });
}

inline TensorPtr emax(const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("emax", *a, *b);
    return detail::binary_op(
        "emax", a, b, [](double x, double y) { return std::max(x, y); },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x < y ? 1.0 : 0.0; });
}

// Dispatcher matching the engine's elementwise contract. `scale`, `clip_max`
// and `gelu` ignore or reinterpret b as documented per kind.
inline TensorPtr elementwise(EwKind kind, const TensorPtr& a, const TensorPtr& b) {
    switch (kind) {
        case EwKind::add: return add(a, b);
        case EwKind::sub: return sub(a, b);
        case EwKind::mul: return mul(a, b);
        case EwKind::div: return div(a, b);
        case EwKind::scale: return scale(a, b->scalar());
        case EwKind::clip_max: return clip_max(a, b->scalar());
        case EwKind::gelu: return gelu(a);
    }
    throw EngineError("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Matrix operations (2-D only)

namespace detail {
inline void require_2d(const char* op, const Tensor& t) {
    if (t.shape.size() != 2) throw ShapeMismatch(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape));
}
}  // namespace detail

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    detail::require_2d("matmul", *a);
    detail::require_2d("matmul", *b);
    const long m = a->shape[0], k = a->shape[1], k2 = b->shape[0], p = b->shape[1];
    if (k != k2) throw ShapeMismatch("matmul: inner dims " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    std::vector<double> out(static_cast<size_t>(m * p), 0.0);
    {
        const double* av = a->values.data();
        const double* bv = b->values.data();
        double* ov = out.data();
        for (long i = 0; i < m; ++i) {
            const double* arow = av + i * k;
            double* orow = ov + i * p;
            for (long kk = 0; kk < k; ++kk) {
                const double f = arow[kk];
                const double* brow = bv + kk * p;
                for (long j = 0; j < p; ++j) orow[j] += f * brow[j];
            }
        }
    }
    return detail::make_result(
        {m, p}, std::move(out), "matmul", {a, b},
        [m, k, p](const Tensor& o, GradStore& store) {
            const auto& g = store.read(o);
            const auto& av = o.node->inputs[0]->values;
            const auto& bv = o.node->inputs[1]->values;
            if (auto* ga = store.sink(o.node->inputs[0])) {
                // dA = g . B^T, computed against a transposed copy so the
                // inner loop is contiguous and vectorizes.
                std::vector<double> bt(static_cast<size_t>(p * k));
                for (long kk = 0; kk < k; ++kk)
                    for (long j = 0; j < p; ++j) bt[j * k + kk] = bv[kk * p + j];
                for (long i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * p;
                    double* garow = ga->data() + i * k;
                    for (long j = 0; j < p; ++j) {
                        const double f = grow[j];
                        const double* btrow = bt.data() + j * k;
                        for (long kk = 0; kk < k; ++kk) garow[kk] += f * btrow[kk];
                    }
                }
            }
            if (auto* gb = store.sink(o.node->inputs[1])) {
                // dB[kk,j] += sum_i A[i,kk] * g[i,j]
                for (long i = 0; i < m; ++i) {
                    const double* arow = av.data() + i * k;
                    const double* grow = g.data() + i * p;
                    for (long kk = 0; kk < k; ++kk) {
                        const double f = arow[kk];
                        double* gbrow = gb->data() + kk * p;
                        for (long j = 0; j < p; ++j) gbrow[j] += f * grow[j];
                    }
                }
            }
        });
}

inline TensorPtr transpose(const TensorPtr& a) {
    detail::require_2d("transpose", *a);
    const long m = a->shape[0], n = a->shape[1];
    std::vector<double> out(static_cast<size_t>(m * n));
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j) out[j * m + i] = a->values[i * n + j];
    return detail::make_result({n, m}, std::move(out), "transpose", {a},
                               [m, n](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* ga = store.sink(o.node->inputs[0])) {
                                       for (long j = 0; j < n; ++j)
                                           for (long i = 0; i < m; ++i) (*ga)[i * n + j] += g[j * m + i];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Axis helpers

namespace detail {

struct AxisSplit {
    long outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, long axis, const char* op) {
    if (axis < 0 || axis >= static_cast<long>(shape.size())) {
        throw InvalidAxis(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (long i = 0; i < axis; ++i) s.outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

// Numerically stable softmax along an axis: rows sum to 1 within 1e-12.
inline TensorPtr softmax(const TensorPtr& x, long axis) {
    auto s = detail::split_axis(x->shape, axis, "softmax");
    std::vector<double> out(x->values.size());
    for (long o = 0; o < s.outer; ++o) {
        for (long in = 0; in < s.inner; ++in) {
            const long base = o * s.extent * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (long e = 0; e < s.extent; ++e) mx = std::max(mx, x->values[base + e * s.inner]);
            double denom = 0.0;
            for (long e = 0; e < s.extent; ++e) {
                double t = std::exp(x->values[base + e * s.inner] - mx);
                out[base + e * s.inner] = t;
                denom += t;
            }
            for (long e = 0; e < s.extent; ++e) out[base + e * s.inner] /= denom;
        }
    }
    return detail::make_result(x->shape, std::move(out), "softmax", {x},
                               [s](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (long ot = 0; ot < s.outer; ++ot) {
                                           for (long in = 0; in < s.inner; ++in) {
                                               const long base = ot * s.extent * s.inner + in;
                                               double dot = 0.0;
                                               for (long e = 0; e < s.extent; ++e) {
                                                   const long idx = base + e * s.inner;
                                                   dot += g[idx] * o.values[idx];
                                               }
                                               for (long e = 0; e < s.extent; ++e) {
                                                   const long idx = base + e * s.inner;
                                                   (*gx)[idx] += o.values[idx] * (g[idx] - dot);
                                               }
                                           }
                                       }
                                   }
                               });
}

inline TensorPtr log_softmax(const TensorPtr& x, long axis) {
    auto s = detail::split_axis(x->shape, axis, "log_softmax");
    std::vector<double> out(x->values.size());
    for (long o = 0; o < s.outer; ++o) {
        for (long in = 0; in < s.inner; ++in) {
            const long base = o * s.extent * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (long e = 0; e < s.extent; ++e) mx = std::max(mx, x->values[base + e * s.inner]);
            double denom = 0.0;
            for (long e = 0; e < s.extent; ++e) denom += std::exp(x->values[base + e * s.inner] - mx);
            const double lse = mx + std::log(denom);
            for (long e = 0; e < s.extent; ++e) out[base + e * s.inner] = x->values[base + e * s.inner] - lse;
        }
    }
    return detail::make_result(x->shape, std::move(out), "log_softmax", {x},
                               [s](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (long ot = 0; ot < s.outer; ++ot) {
                                           for (long in = 0; in < s.inner; ++in) {
                                               const long base = ot * s.extent * s.inner + in;
                                               double gsum = 0.0;
                                               for (long e = 0; e < s.extent; ++e) gsum += g[base + e * s.inner];
                                               for (long e = 0; e < s.extent; ++e) {
                                                   const long idx = base + e * s.inner;
                                                   (*gx)[idx] += g[idx] - std::exp(o.values[idx]) * gsum;
                                               }
                                           }
                                       }
                                   }
                               });
}

// Per-row normalization over the last dimension followed by gain/bias.
// A zero-variance row normalizes to 0 and therefore outputs the bias.
inline TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps = 1e-5) {
    if (x->shape.empty()) throw ShapeMismatch("layer_norm: scalar input");
    const long d = x->shape.back();
    if (gain->shape != Shape{d} || bias->shape != Shape{d}) {
        throw ShapeMismatch("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    if (eps <= 0.0) throw EngineError("layer_norm: eps must be > 0");
    const long rows = x->numel() / d;
    std::vector<double> out(x->values.size());
    std::vector<double> xhat(x->values.size());
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (long r = 0; r < rows; ++r) {
        const double* xv = x->values.data() + r * d;
        double mean = 0.0;
        for (long j = 0; j < d; ++j) mean += xv[j];
        mean /= d;
        double var = 0.0;
        for (long j = 0; j < d; ++j) {
            const double t = xv[j] - mean;
            var += t * t;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (long j = 0; j < d; ++j) {
            const double h = (xv[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gain->values[j] * h + bias->values[j];
        }
    }
    return detail::make_result(
        x->shape, std::move(out), "layer_norm", {x, gain, bias},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& o, GradStore& store) {
            const auto& g = store.read(o);
            const auto& gainv = o.node->inputs[1]->values;
            auto* gx = store.sink(o.node->inputs[0]);
            auto* gg = store.sink(o.node->inputs[1]);
            auto* gb = store.sink(o.node->inputs[2]);
            for (long r = 0; r < rows; ++r) {
                const double* grow = g.data() + r * d;
                const double* hrow = xhat.data() + r * d;
                if (gg || gb) {
                    for (long j = 0; j < d; ++j) {
                        if (gg) (*gg)[j] += grow[j] * hrow[j];
                        if (gb) (*gb)[j] += grow[j];
                    }
                }
                if (gx) {
                    double mean_gh = 0.0, mean_ghh = 0.0;
                    for (long j = 0; j < d; ++j) {
                        const double gh = grow[j] * gainv[j];
                        mean_gh += gh;
                        mean_ghh += gh * hrow[j];
                    }
                    mean_gh /= d;
                    mean_ghh /= d;
                    for (long j = 0; j < d; ++j) {
                        const double gh = grow[j] * gainv[j];
                        (*gx)[r * d + j] += inv_std[r] * (gh - mean_gh - hrow[j] * mean_ghh);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline TensorPtr concat(const std::vector<TensorPtr>& parts, long axis) {
    if (parts.empty()) throw ShapeMismatch("concat: no parts");
    const Shape& ref = parts[0]->shape;
    auto s0 = detail::split_axis(ref, axis, "concat");
    long total_extent = 0;
    for (const auto& p : parts) {
        if (p->shape.size() != ref.size()) throw ShapeMismatch("concat: rank mismatch");
        for (size_t i = 0; i < ref.size(); ++i) {
            if (static_cast<long>(i) != axis && p->shape[i] != ref[i]) {
                throw ShapeMismatch("concat: non-axis dims disagree: " + shape_str(p->shape) + " vs " + shape_str(ref));
            }
        }
        total_extent += p->shape[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total_extent;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    // Copy slab by slab: outer index o, then each part's [extent*inner] block.
    long offset = 0;
    for (const auto& p : parts) {
        const long ext = p->shape[axis];
        for (long o = 0; o < s0.outer; ++o) {
            const double* src = p->values.data() + o * ext * s0.inner;
            double* dst = out.data() + (o * total_extent + offset) * s0.inner;
            std::copy(src, src + ext * s0.inner, dst);
        }
        offset += ext;
    }
    std::vector<TensorPtr> inputs = parts;
    return detail::make_result(
        out_shape, std::move(out), "concat", std::move(inputs),
        [s0, axis, total_extent](const Tensor& o, GradStore& store) {
            const auto& g = store.read(o);
            long offset = 0;
            for (const auto& part : o.node->inputs) {
                const long ext = part->shape[axis];
                if (auto* gp = store.sink(part)) {
                    for (long ot = 0; ot < s0.outer; ++ot) {
                        const double* src = g.data() + (ot * total_extent + offset) * s0.inner;
                        double* dst = gp->data() + ot * ext * s0.inner;
                        for (long i = 0; i < ext * s0.inner; ++i) dst[i] += src[i];
                    }
                }
                offset += ext;
            }
        });
}

inline TensorPtr slice(const TensorPtr& x, long axis, long start, long len) {
    auto s = detail::split_axis(x->shape, axis, "slice");
    if (start < 0 || len < 1 || start + len > s.extent) {
        throw ShapeMismatch("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside extent " +
                            std::to_string(s.extent));
    }
    Shape out_shape = x->shape;
    out_shape[axis] = len;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    for (long o = 0; o < s.outer; ++o) {
        const double* src = x->values.data() + (o * s.extent + start) * s.inner;
        std::copy(src, src + len * s.inner, out.data() + o * len * s.inner);
    }
    return detail::make_result(out_shape, std::move(out), "slice", {x},
                               [s, start, len](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (long ot = 0; ot < s.outer; ++ot) {
                                           double* dst = gx->data() + (ot * s.extent + start) * s.inner;
                                           const double* src = g.data() + ot * len * s.inner;
                                           for (long i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                                       }
                                   }
                               });
}

inline TensorPtr reshape(const TensorPtr& x, Shape new_shape) {
    if (shape_numel(new_shape) != x->numel()) {
        throw ShapeMismatch("reshape: " + shape_str(x->shape) + " -> " + shape_str(new_shape) + " changes element count");
    }
    std::vector<double> out = x->values;
    return detail::make_result(std::move(new_shape), std::move(out), "reshape", {x},
                               [](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                                   }
                               });
}

// Tiles a [1,c] row `times` times into [times,c]; backward sums over rows.
inline TensorPtr repeat_rows(const TensorPtr& x, long times) {
    detail::require_2d("repeat_rows", *x);
    if (x->shape[0] != 1) throw ShapeMismatch("repeat_rows: expected [1,c], got " + shape_str(x->shape));
    if (times < 1) throw ShapeMismatch("repeat_rows: times < 1");
    const long c = x->shape[1];
    std::vector<double> out(static_cast<size_t>(times * c));
    for (long r = 0; r < times; ++r) std::copy(x->values.begin(), x->values.end(), out.begin() + r * c);
    return detail::make_result({times, c}, std::move(out), "repeat_rows", {x},
                               [times, c](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (long r = 0; r < times; ++r)
                                           for (long j = 0; j < c; ++j) (*gx)[j] += g[r * c + j];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { sum, mean };

// Reduce along one axis; the axis is removed from the shape (a full reduce
// of a 1-D tensor yields shape [1]).
inline TensorPtr reduce(const TensorPtr& x, Reduce kind, long axis) {
    auto s = detail::split_axis(x->shape, axis, "reduce");
    Shape out_shape;
    for (size_t i = 0; i < x->shape.size(); ++i) {
        if (static_cast<long>(i) != axis) out_shape.push_back(x->shape[i]);
    }
    if (out_shape.empty()) out_shape = {1};
    const double scale_f = kind == Reduce::mean ? 1.0 / static_cast<double>(s.extent) : 1.0;
    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)), 0.0);
    for (long o = 0; o < s.outer; ++o) {
        for (long e = 0; e < s.extent; ++e) {
            const double* src = x->values.data() + (o * s.extent + e) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (long i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
    }
    if (kind == Reduce::mean) {
        for (double& v : out) v *= scale_f;
    }
    return detail::make_result(std::move(out_shape), std::move(out), "reduce", {x},
                               [s, scale_f](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (long ot = 0; ot < s.outer; ++ot) {
                                           for (long e = 0; e < s.extent; ++e) {
                                               double* dst = gx->data() + (ot * s.extent + e) * s.inner;
                                               const double* src = g.data() + ot * s.inner;
                                               for (long i = 0; i < s.inner; ++i) dst[i] += src[i] * scale_f;
                                           }
                                       }
                                   }
                               });
}

// Reduce over every element to a scalar of shape [1].
inline TensorPtr reduce_all(const TensorPtr& x, Reduce kind) {
    const double scale_f = kind == Reduce::mean ? 1.0 / static_cast<double>(x->numel()) : 1.0;
    double acc = 0.0;
    for (double v : x->values) acc += v;
    return detail::make_result({1}, {acc * scale_f}, "reduce_all", {x},
                               [scale_f](const Tensor& o, GradStore& store) {
                                   const auto& g = store.read(o);
                                   if (auto* gx = store.sink(o.node->inputs[0])) {
                                       for (double& gv : *gx) gv += g[0] * scale_f;
                                   }
                               });
}

inline TensorPtr sum_all(const TensorPtr& x) { return reduce_all(x, Reduce::sum); }
inline TensorPtr mean_all(const TensorPtr& x) { return reduce_all(x, Reduce::mean); }

// ---------------------------------------------------------------------------
// Backward

inline void backward_impl(const TensorPtr& loss, GradStore& store) {
    if (!loss->is_scalar()) throw NotScalar("backward: loss has shape " + shape_str(loss->shape));
    if (loss->is_leaf()) throw DisconnectedLoss("backward: loss is not connected to a graph");
    // Collect reachable graph tensors; creation ids give a topological order.
    std::vector<TensorPtr> order;
    std::unordered_set<const Tensor*> seen;
    std::vector<TensorPtr> stack{loss};
    seen.insert(loss.get());
    while (!stack.empty()) {
        TensorPtr t = stack.back();
        stack.pop_back();
        order.push_back(t);
        if (t->node) {
            for (const auto& in : t->node->inputs) {
                if (in->node && seen.insert(in.get()).second) stack.push_back(in);
            }
        }
    }
    std::sort(order.begin(), order.end(), [](const TensorPtr& a, const TensorPtr& b) { return a->id > b->id; });
    if (auto* sink = store.sink(loss)) (*sink)[0] += 1.0;
    for (const auto& t : order) {
        t->node->backward(*t, store);
    }
}

// Accumulates d(loss)/d(leaf) into every requires_grad leaf's grad field.
// Repeated calls without zeroing accumulate.
inline void backward(const TensorPtr& loss) {
    GradStore store(false);
    backward_impl(loss, store);
}

// Pure variant: returns the gradient map without touching any tensor's grad
// field, so independent passes can run concurrently over shared leaves.
inline std::unordered_map<const Tensor*, std::vector<double>> backward_grads(const TensorPtr& loss) {
    GradStore store(true);
    backward_impl(loss, store);
    return store.take();
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

// Compares reverse-mode gradients of f against central differences for every
// scalar in `params`. Returns the worst relative error, using
// max(|analytic|, |numeric|, 1e-8) as the denominator.
inline double finite_diff_check(const std::function<TensorPtr()>& f, const std::vector<TensorPtr>& params, double step) {
    if (step <= 0.0) throw EngineError("finite_diff_check: step must be > 0");
    TensorPtr base = f();
    if (!base->is_scalar()) throw NotScalar("finite_diff_check: f must return a scalar");
    auto grads = backward_grads(base);
    double worst = 0.0;
    for (const auto& p : params) {
        const auto it = grads.find(p.get());
        for (size_t i = 0; i < p->values.size(); ++i) {
            const double analytic = it == grads.end() ? 0.0 : it->second[i];
            const double saved = p->values[i];
            p->values[i] = saved + step;
            const double fp = f()->scalar();
            p->values[i] = saved - step;
            const double fm = f()->scalar();
            p->values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace pvit
