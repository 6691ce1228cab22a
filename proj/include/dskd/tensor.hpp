// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode automatic differentiation.
//
// The whole engine is templated on the scalar type: production code runs the
// float instantiation, the finite-difference gradient oracle re-executes the
// exact same template code in double. A TensorT is a cheap handle onto a
// graph node; applying an op records the node's parents and a backward
// closure, and backward() replays the tape in reverse topological order,
// summing gradients over every consumer of a node.
//
// Conventions:
//   - row-major storage; feature maps are [B, H, W, C]
//   - conv kernels are 3x3, zero padding 1, stride 1 or 2
//   - broadcasting is limited to scalar-with-tensor, per-channel [C], and
//     per-sample-per-channel [B, C] against a [B, ..., C] map
//   - every op validates shapes and checks outputs for non-finite values

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dskd/rng.hpp"

namespace dskd {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(s));
        n *= d;
    }
    return n;
}

template <class Real>
struct NodeT {
    Shape shape;
    std::shared_ptr<std::vector<Real>> data;
    std::vector<Real> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data->size()); }

    std::vector<Real>& ensure_grad() {
        if (grad.empty()) grad.assign(data->size(), Real(0));
        return grad;
    }
};

template <class Real>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), Real(0)); }

    static TensorT filled(Shape shape, Real v) {
        auto n = std::make_shared<NodeT<Real>>();
        int64_t count = shape_numel(shape);
        n->shape = std::move(shape);
        n->data = std::make_shared<std::vector<Real>>(count, v);
        return TensorT(std::move(n));
    }

    static TensorT scalar(Real v) { return filled({1}, v); }

    static TensorT from(Shape shape, std::vector<Real> values) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("from: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        auto n = std::make_shared<NodeT<Real>>();
        n->shape = std::move(shape);
        n->data = std::make_shared<std::vector<Real>>(std::move(values));
        return TensorT(std::move(n));
    }

    static TensorT randn(Shape shape, RngStream& rng, double sd = 1.0) {
        int64_t count = shape_numel(shape);
        std::vector<Real> v(static_cast<size_t>(count));
        for (auto& x : v) x = static_cast<Real>(sd * rng.normal());
        return from(std::move(shape), std::move(v));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_->numel(); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }

    const std::vector<Real>& data() const { return *n_->data; }
    // In-place access; used by the optimizer and the finite-difference oracle.
    std::vector<Real>& mutable_data() { return *n_->data; }

    Real item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
        return (*n_->data)[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<Real>& grad() const {
        if (n_->grad.empty())
            throw std::runtime_error("grad: no gradient accumulated for this tensor");
        return n_->grad;
    }
    void clear_grad() { n_->grad.clear(); }

    // New leaf sharing the same storage, cut off from the graph.
    TensorT detach() const {
        auto n = std::make_shared<NodeT<Real>>();
        n->shape = n_->shape;
        n->data = n_->data;
        return TensorT(std::move(n));
    }

    // Deep copy with no graph history.
    TensorT clone() const {
        auto n = std::make_shared<NodeT<Real>>();
        n->shape = n_->shape;
        n->data = std::make_shared<std::vector<Real>>(*n_->data);
        return TensorT(std::move(n));
    }

    template <class To>
    TensorT<To> cast() const {
        std::vector<To> v(n_->data->size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>((*n_->data)[i]);
        return TensorT<To>::from(n_->shape, std::move(v));
    }

    // Reverse-mode sweep from a scalar loss. Visits each reachable node once,
    // in reverse topological order; fan-out gradients sum.
    void backward() const {
        if (numel() != 1)
            throw std::logic_error("backward: loss must be scalar, shape " + shape_str(shape()));
        if (!n_->requires_grad)
            throw std::logic_error("backward: loss does not require grad (no differentiable leaves)");

        std::vector<NodeT<Real>*> order;
        std::unordered_set<NodeT<Real>*> seen;
        // iterative post-order DFS
        std::vector<std::pair<NodeT<Real>*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                NodeT<Real>* p = node->parents[next].get();
                ++next;
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->ensure_grad()[0] = Real(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
        }
    }

    std::shared_ptr<NodeT<Real>> node() const { return n_; }
    explicit TensorT(std::shared_ptr<NodeT<Real>> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<NodeT<Real>> n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class Real>
void check_finite(const char* op, const std::vector<Real>& v) {
    for (Real x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw NumericError(std::string(op) + ": non-finite value in output");
    }
}

// Builds the result node. Parents and the backward closure are recorded only
// when some input requires grad, so pure evaluation builds no graph.
template <class Real, class BW>
TensorT<Real> make_op(const char* op, Shape shape, std::vector<Real> values,
                      std::initializer_list<TensorT<Real>> inputs, BW&& bw) {
    check_finite(op, values);
    auto n = std::make_shared<NodeT<Real>>();
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<Real>>(std::move(values));
    n->op = op;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg) {
        n->requires_grad = true;
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::forward<BW>(bw);
    }
    return TensorT<Real>(std::move(n));
}

enum class Bcast { Same, Scalar, Channel, SampleChannel };

template <class Real>
Bcast resolve_bcast(const char* op, const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.numel() == 1) return Bcast::Scalar;
    if (b.rank() == 1 && a.shape().back() == b.dim(0)) return Bcast::Channel;
    if (b.rank() == 2 && a.rank() >= 3 && a.dim(0) == b.dim(0) && a.shape().back() == b.dim(1))
        return Bcast::SampleChannel;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Index of the broadcast operand's element feeding a's flat index i.
template <class Real>
int64_t bcast_index(Bcast k, const TensorT<Real>& a, int64_t i) {
    switch (k) {
        case Bcast::Same: return i;
        case Bcast::Scalar: return 0;
        case Bcast::Channel: return i % a.shape().back();
        case Bcast::SampleChannel: {
            int64_t per_sample = a.numel() / a.dim(0);
            int64_t c = i % a.shape().back();
            int64_t bidx = i / per_sample;
            return bidx * a.shape().back() + c;
        }
    }
    return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    auto k = detail::resolve_bcast("add", a, b);
    std::vector<Real> out(a.data().size());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[static_cast<size_t>(i)] =
            a.data()[static_cast<size_t>(i)] +
            b.data()[static_cast<size_t>(detail::bcast_index(k, a, i))];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<Real>("add", a.shape(), std::move(out), {a, b},
                                 [an, bn, k, a](NodeT<Real>& self) {
                                     if (an->requires_grad) {
                                         auto& ga = an->ensure_grad();
                                         for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                     }
                                     if (bn->requires_grad) {
                                         auto& gb = bn->ensure_grad();
                                         for (int64_t i = 0; i < self.numel(); ++i)
                                             gb[static_cast<size_t>(detail::bcast_index(k, a, i))] +=
                                                 self.grad[static_cast<size_t>(i)];
                                     }
                                 });
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    auto k = detail::resolve_bcast("sub", a, b);
    std::vector<Real> out(a.data().size());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[static_cast<size_t>(i)] =
            a.data()[static_cast<size_t>(i)] -
            b.data()[static_cast<size_t>(detail::bcast_index(k, a, i))];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<Real>("sub", a.shape(), std::move(out), {a, b},
                                 [an, bn, k, a](NodeT<Real>& self) {
                                     if (an->requires_grad) {
                                         auto& ga = an->ensure_grad();
                                         for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                     }
                                     if (bn->requires_grad) {
                                         auto& gb = bn->ensure_grad();
                                         for (int64_t i = 0; i < self.numel(); ++i)
                                             gb[static_cast<size_t>(detail::bcast_index(k, a, i))] -=
                                                 self.grad[static_cast<size_t>(i)];
                                     }
                                 });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    auto k = detail::resolve_bcast("mul", a, b);
    std::vector<Real> out(a.data().size());
    for (int64_t i = 0; i < a.numel(); ++i)
        out[static_cast<size_t>(i)] =
            a.data()[static_cast<size_t>(i)] *
            b.data()[static_cast<size_t>(detail::bcast_index(k, a, i))];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<Real>(
        "mul", a.shape(), std::move(out), {a, b}, [an, bn, k, a, b](NodeT<Real>& self) {
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                for (int64_t i = 0; i < self.numel(); ++i)
                    ga[static_cast<size_t>(i)] +=
                        self.grad[static_cast<size_t>(i)] *
                        b.data()[static_cast<size_t>(detail::bcast_index(k, a, i))];
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (int64_t i = 0; i < self.numel(); ++i)
                    gb[static_cast<size_t>(detail::bcast_index(k, a, i))] +=
                        self.grad[static_cast<size_t>(i)] * a.data()[static_cast<size_t>(i)];
            }
        });
}

template <class Real>
TensorT<Real> neg(const TensorT<Real>& a) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = -a.data()[i];
    auto an = a.node();
    return detail::make_op<Real>("neg", a.shape(), std::move(out), {a}, [an](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] -= self.grad[i];
    });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& a, double c) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(a.data()[i] * c);
    auto an = a.node();
    return detail::make_op<Real>("scale", a.shape(), std::move(out), {a}, [an, c](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<Real>(self.grad[i] * c);
    });
}

template <class Real>
TensorT<Real> add_const(const TensorT<Real>& a, double c) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(a.data()[i] + c);
    auto an = a.node();
    return detail::make_op<Real>("add_const", a.shape(), std::move(out), {a}, [an](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

template <class Real>
TensorT<Real> square(const TensorT<Real>& a) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
    auto an = a.node();
    return detail::make_op<Real>("square", a.shape(), std::move(out), {a}, [an, a](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += Real(2) * a.data()[i] * self.grad[i];
    });
}

template <class Real>
TensorT<Real> relu(const TensorT<Real>& a) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > Real(0) ? a.data()[i] : Real(0);
    auto an = a.node();
    return detail::make_op<Real>("relu", a.shape(), std::move(out), {a}, [an, a](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i)
            if (a.data()[i] > Real(0)) ga[i] += self.grad[i];
    });
}

template <class Real>
TensorT<Real> sigmoid(const TensorT<Real>& a) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(a.data()[i]);
        out[i] = static_cast<Real>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                          : std::exp(x) / (1.0 + std::exp(x)));
    }
    auto an = a.node();
    auto saved = out;
    return detail::make_op<Real>("sigmoid", a.shape(), std::move(out), {a},
                                 [an, saved](NodeT<Real>& self) {
                                     auto& ga = an->ensure_grad();
                                     for (size_t i = 0; i < ga.size(); ++i)
                                         ga[i] += self.grad[i] * saved[i] * (Real(1) - saved[i]);
                                 });
}

template <class Real>
TensorT<Real> log_op(const TensorT<Real>& a) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] <= Real(0)) throw NumericError("log: non-positive input");
        out[i] = static_cast<Real>(std::log(static_cast<double>(a.data()[i])));
    }
    auto an = a.node();
    return detail::make_op<Real>("log", a.shape(), std::move(out), {a}, [an, a](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / a.data()[i];
    });
}

// Gradient is zero outside (lo, hi); used to make log arguments safe.
template <class Real>
TensorT<Real> clamp(const TensorT<Real>& a, double lo, double hi) {
    std::vector<Real> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<Real>(
            std::min(hi, std::max(lo, static_cast<double>(a.data()[i]))));
    auto an = a.node();
    return detail::make_op<Real>("clamp", a.shape(), std::move(out), {a},
                                 [an, a, lo, hi](NodeT<Real>& self) {
                                     auto& ga = an->ensure_grad();
                                     for (size_t i = 0; i < ga.size(); ++i) {
                                         double x = static_cast<double>(a.data()[i]);
                                         if (x > lo && x < hi) ga[i] += self.grad[i];
                                     }
                                 });
}

// Same payload under a new shape; gradient passes through untouched.
template <class Real>
TensorT<Real> reshape(const TensorT<Real>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto an = a.node();
    return detail::make_op<Real>("reshape", std::move(shape), std::vector<Real>(a.data()), {a},
                                 [an](NodeT<Real>& self) {
                                     auto& ga = an->ensure_grad();
                                     for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                 });
}

// ---------------------------------------------------------------------------
// reductions

template <class Real>
TensorT<Real> sum(const TensorT<Real>& a) {
    double acc = 0;
    for (Real x : a.data()) acc += static_cast<double>(x);
    auto an = a.node();
    return detail::make_op<Real>("sum", {1}, {static_cast<Real>(acc)}, {a}, [an](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0];
    });
}

template <class Real>
TensorT<Real> mean(const TensorT<Real>& a) {
    double acc = 0;
    for (Real x : a.data()) acc += static_cast<double>(x);
    double inv = 1.0 / static_cast<double>(a.numel());
    auto an = a.node();
    return detail::make_op<Real>("mean", {1}, {static_cast<Real>(acc * inv)}, {a},
                                 [an, inv](NodeT<Real>& self) {
                                     auto& ga = an->ensure_grad();
                                     for (size_t i = 0; i < ga.size(); ++i)
                                         ga[i] += static_cast<Real>(self.grad[0] * inv);
                                 });
}

// Row sums of a 2-D tensor: [B, C] -> [B].
template <class Real>
TensorT<Real> sum_rows(const TensorT<Real>& a) {
    if (a.rank() != 2) throw ShapeError("sum_rows: expected rank-2 input, got " + shape_str(a.shape()));
    int B = a.dim(0), C = a.dim(1);
    std::vector<Real> out(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        double acc = 0;
        for (int c = 0; c < C; ++c) acc += static_cast<double>(a.data()[static_cast<size_t>(b * C + c)]);
        out[static_cast<size_t>(b)] = static_cast<Real>(acc);
    }
    auto an = a.node();
    return detail::make_op<Real>("sum_rows", {B}, std::move(out), {a}, [an, B, C](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) ga[static_cast<size_t>(b * C + c)] += self.grad[static_cast<size_t>(b)];
    });
}

// x[b, idx[b]] gather: [B, C] -> [B].
template <class Real>
TensorT<Real> pick(const TensorT<Real>& a, const std::vector<int>& idx) {
    if (a.rank() != 2) throw ShapeError("pick: expected rank-2 input, got " + shape_str(a.shape()));
    int B = a.dim(0), C = a.dim(1);
    if (static_cast<int>(idx.size()) != B)
        throw ShapeError("pick: index count " + std::to_string(idx.size()) + " != batch " + std::to_string(B));
    std::vector<Real> out(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        if (idx[static_cast<size_t>(b)] < 0 || idx[static_cast<size_t>(b)] >= C)
            throw std::out_of_range("pick: index " + std::to_string(idx[static_cast<size_t>(b)]) +
                                    " out of range for " + std::to_string(C) + " columns");
        out[static_cast<size_t>(b)] = a.data()[static_cast<size_t>(b * C + idx[static_cast<size_t>(b)])];
    }
    auto an = a.node();
    return detail::make_op<Real>("pick", {B}, std::move(out), {a}, [an, idx, C](NodeT<Real>& self) {
        auto& ga = an->ensure_grad();
        for (size_t b = 0; b < idx.size(); ++b)
            ga[b * static_cast<size_t>(C) + static_cast<size_t>(idx[b])] += self.grad[b];
    });
}

// ---------------------------------------------------------------------------
// softmax family (over the last dimension)

namespace detail {
template <class Real>
void softmax_rows(const std::vector<Real>& in, std::vector<Real>& out, int64_t rows, int C,
                  bool log_form) {
    for (int64_t r = 0; r < rows; ++r) {
        const Real* x = in.data() + r * C;
        Real* y = out.data() + r * C;
        double mx = static_cast<double>(x[0]);
        for (int c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(x[c]));
        double z = 0;
        for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(x[c]) - mx);
        double lz = std::log(z);
        for (int c = 0; c < C; ++c) {
            double centered = static_cast<double>(x[c]) - mx;
            y[c] = static_cast<Real>(log_form ? centered - lz : std::exp(centered - lz));
        }
    }
}
}  // namespace detail

template <class Real>
TensorT<Real> softmax(const TensorT<Real>& a) {
    if (a.rank() < 1) throw ShapeError("softmax: rank-0 input");
    int C = a.shape().back();
    int64_t rows = a.numel() / C;
    std::vector<Real> out(a.data().size());
    detail::softmax_rows(a.data(), out, rows, C, false);
    auto an = a.node();
    auto saved = out;
    return detail::make_op<Real>("softmax", a.shape(), std::move(out), {a},
                                 [an, saved, rows, C](NodeT<Real>& self) {
                                     auto& ga = an->ensure_grad();
                                     for (int64_t r = 0; r < rows; ++r) {
                                         const Real* y = saved.data() + r * C;
                                         const Real* gy = self.grad.data() + r * C;
                                         double dot = 0;
                                         for (int c = 0; c < C; ++c)
                                             dot += static_cast<double>(gy[c]) * static_cast<double>(y[c]);
                                         for (int c = 0; c < C; ++c)
                                             ga[static_cast<size_t>(r * C + c)] +=
                                                 y[c] * (gy[c] - static_cast<Real>(dot));
                                     }
                                 });
}

template <class Real>
TensorT<Real> log_softmax(const TensorT<Real>& a) {
    if (a.rank() < 1) throw ShapeError("log_softmax: rank-0 input");
    int C = a.shape().back();
    int64_t rows = a.numel() / C;
    std::vector<Real> out(a.data().size());
    detail::softmax_rows(a.data(), out, rows, C, true);
    auto an = a.node();
    auto saved = out;
    return detail::make_op<Real>(
        "log_softmax", a.shape(), std::move(out), {a}, [an, saved, rows, C](NodeT<Real>& self) {
            auto& ga = an->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const Real* ly = saved.data() + r * C;
                const Real* gy = self.grad.data() + r * C;
                double gsum = 0;
                for (int c = 0; c < C; ++c) gsum += static_cast<double>(gy[c]);
                for (int c = 0; c < C; ++c)
                    ga[static_cast<size_t>(r * C + c)] += static_cast<Real>(
                        static_cast<double>(gy[c]) -
                        std::exp(static_cast<double>(ly[c])) * gsum);
            }
        });
}

// ---------------------------------------------------------------------------
// matmul

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    int N = a.dim(0), K = a.dim(1), M = b.dim(1);
    std::vector<Real> out(static_cast<size_t>(N) * M, Real(0));
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            Real av = a.data()[static_cast<size_t>(n * K + k)];
            if (av == Real(0)) continue;
            for (int m = 0; m < M; ++m)
                out[static_cast<size_t>(n * M + m)] += av * b.data()[static_cast<size_t>(k * M + m)];
        }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<Real>(
        "matmul", {N, M}, std::move(out), {a, b}, [an, bn, a, b, N, K, M](NodeT<Real>& self) {
            if (an->requires_grad) {
                auto& ga = an->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int m = 0; m < M; ++m) {
                        Real g = self.grad[static_cast<size_t>(n * M + m)];
                        if (g == Real(0)) continue;
                        for (int k = 0; k < K; ++k)
                            ga[static_cast<size_t>(n * K + k)] += g * b.data()[static_cast<size_t>(k * M + m)];
                    }
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int k = 0; k < K; ++k) {
                        Real av = a.data()[static_cast<size_t>(n * K + k)];
                        if (av == Real(0)) continue;
                        for (int m = 0; m < M; ++m)
                            gb[static_cast<size_t>(k * M + m)] += av * self.grad[static_cast<size_t>(n * M + m)];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution (3x3 kernels, zero padding 1, stride 1 or 2)

namespace detail {
inline void check_conv_args(const char* op, const Shape& x, const Shape& w, int stride) {
    if (x.size() != 4) throw ShapeError(std::string(op) + ": input must be [B,H,W,C], got " + shape_str(x));
    if (w.size() != 4 || w[0] != 3 || w[1] != 3)
        throw ShapeError(std::string(op) + ": weight must be [3,3,Cin,Cout], got " + shape_str(w));
    if (stride != 1 && stride != 2)
        throw ShapeError(std::string(op) + ": stride must be 1 or 2, got " + std::to_string(stride));
    // zero padding 1 keeps the padded extent >= the 3x3 kernel for any H, W >= 1
}
}  // namespace detail

template <class Real>
TensorT<Real> conv2d(const TensorT<Real>& x, const TensorT<Real>& w, const TensorT<Real>& bias,
                     int stride) {
    detail::check_conv_args("conv2d", x.shape(), w.shape(), stride);
    int B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    int Co = w.dim(3);
    if (w.dim(2) != Ci)
        throw ShapeError("conv2d: weight Cin " + std::to_string(w.dim(2)) + " != input C " +
                         std::to_string(Ci) + " (input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ")");
    if (bias.rank() != 1 || bias.dim(0) != Co)
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " != [Cout=" +
                         std::to_string(Co) + "]");
    int Ho = (H - 1) / stride + 1;
    int Wo = (W - 1) / stride + 1;

    std::vector<Real> out(static_cast<size_t>(B) * Ho * Wo * Co);
    const auto& xd = x.data();
    const auto& wd = w.data();
    const auto& bd = bias.data();
    for (int b = 0; b < B; ++b)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                Real* op_ = out.data() + ((static_cast<size_t>(b) * Ho + oy) * Wo + ox) * Co;
                for (int co = 0; co < Co; ++co) op_[co] = bd[static_cast<size_t>(co)];
                for (int kh = 0; kh < 3; ++kh) {
                    int iy = oy * stride + kh - 1;
                    if (iy < 0 || iy >= H) continue;
                    for (int kw = 0; kw < 3; ++kw) {
                        int ix = ox * stride + kw - 1;
                        if (ix < 0 || ix >= W) continue;
                        const Real* xp = xd.data() + ((static_cast<size_t>(b) * H + iy) * W + ix) * Ci;
                        const Real* wp = wd.data() + ((static_cast<size_t>(kh) * 3 + kw) * Ci) * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            Real xv = xp[ci];
                            if (xv == Real(0)) continue;
                            const Real* wrow = wp + static_cast<size_t>(ci) * Co;
                            for (int co = 0; co < Co; ++co) op_[co] += xv * wrow[co];
                        }
                    }
                }
            }

    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return detail::make_op<Real>(
        "conv2d", {B, Ho, Wo, Co}, std::move(out), {x, w, bias},
        [xn, wn, bn, x, w, B, H, W, Ci, Co, Ho, Wo, stride](NodeT<Real>& self) {
            const auto& xd = x.data();
            const auto& wd = w.data();
            for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const Real* gp = self.grad.data() + ((static_cast<size_t>(b) * Ho + oy) * Wo + ox) * Co;
                        if (bn->requires_grad) {
                            auto& gb = bn->ensure_grad();
                            for (int co = 0; co < Co; ++co) gb[static_cast<size_t>(co)] += gp[co];
                        }
                        for (int kh = 0; kh < 3; ++kh) {
                            int iy = oy * stride + kh - 1;
                            if (iy < 0 || iy >= H) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                int ix = ox * stride + kw - 1;
                                if (ix < 0 || ix >= W) continue;
                                size_t xoff = ((static_cast<size_t>(b) * H + iy) * W + ix) * Ci;
                                size_t woff = (static_cast<size_t>(kh) * 3 + kw) * Ci * Co;
                                if (xn->requires_grad) {
                                    auto& gx = xn->ensure_grad();
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        const Real* wrow = wd.data() + woff + static_cast<size_t>(ci) * Co;
                                        Real acc = 0;
                                        for (int co = 0; co < Co; ++co) acc += gp[co] * wrow[co];
                                        gx[xoff + static_cast<size_t>(ci)] += acc;
                                    }
                                }
                                if (wn->requires_grad) {
                                    auto& gw = wn->ensure_grad();
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        Real xv = xd[xoff + static_cast<size_t>(ci)];
                                        if (xv == Real(0)) continue;
                                        Real* gwrow = gw.data() + woff + static_cast<size_t>(ci) * Co;
                                        for (int co = 0; co < Co; ++co) gwrow[co] += xv * gp[co];
                                    }
                                }
                            }
                        }
                    }
        });
}

// Transposed 3x3 stride-2 convolution, defined as the adjoint of
// conv2d(stride=2, pad=1) so an even-sized map halved by the down conv is
// restored to its exact original extent. Weight layout is [3,3,Cout,Cin].
template <class Real>
TensorT<Real> deconv2d(const TensorT<Real>& x, const TensorT<Real>& w, const TensorT<Real>& bias) {
    if (x.rank() != 4) throw ShapeError("deconv2d: input must be [B,H,W,C], got " + shape_str(x.shape()));
    if (w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3)
        throw ShapeError("deconv2d: weight must be [3,3,Cout,Cin], got " + shape_str(w.shape()));
    int B = x.dim(0), h = x.dim(1), wd_ = x.dim(2), Ci = x.dim(3);
    int Co = w.dim(2);
    if (w.dim(3) != Ci)
        throw ShapeError("deconv2d: weight Cin " + std::to_string(w.dim(3)) + " != input C " +
                         std::to_string(Ci));
    if (bias.rank() != 1 || bias.dim(0) != Co)
        throw ShapeError("deconv2d: bias shape " + shape_str(bias.shape()) + " != [Cout=" +
                         std::to_string(Co) + "]");
    int Ho = 2 * h, Wo = 2 * wd_;

    std::vector<Real> out(static_cast<size_t>(B) * Ho * Wo * Co, Real(0));
    const auto& xd = x.data();
    const auto& wv = w.data();
    for (int b = 0; b < B; ++b)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < wd_; ++ix) {
                const Real* xp = xd.data() + ((static_cast<size_t>(b) * h + iy) * wd_ + ix) * Ci;
                for (int kh = 0; kh < 3; ++kh) {
                    int oy = 2 * iy + kh - 1;
                    if (oy < 0 || oy >= Ho) continue;
                    for (int kw = 0; kw < 3; ++kw) {
                        int ox = 2 * ix + kw - 1;
                        if (ox < 0 || ox >= Wo) continue;
                        Real* op_ = out.data() + ((static_cast<size_t>(b) * Ho + oy) * Wo + ox) * Co;
                        const Real* wp = wv.data() + (static_cast<size_t>(kh) * 3 + kw) * Co * Ci;
                        for (int co = 0; co < Co; ++co) {
                            const Real* wrow = wp + static_cast<size_t>(co) * Ci;
                            Real acc = 0;
                            for (int ci = 0; ci < Ci; ++ci) acc += xp[ci] * wrow[ci];
                            op_[co] += acc;
                        }
                    }
                }
            }
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < Ho * Wo; ++o)
            for (int co = 0; co < Co; ++co)
                out[(static_cast<size_t>(b) * Ho * Wo + o) * Co + co] += bias.data()[static_cast<size_t>(co)];

    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return detail::make_op<Real>(
        "deconv2d", {B, Ho, Wo, Co}, std::move(out), {x, w, bias},
        [xn, wn, bn, x, w, B, h, wd_, Ci, Co, Ho, Wo](NodeT<Real>& self) {
            const auto& xd = x.data();
            const auto& wv = w.data();
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < Ho * Wo; ++o)
                        for (int co = 0; co < Co; ++co)
                            gb[static_cast<size_t>(co)] +=
                                self.grad[(static_cast<size_t>(b) * Ho * Wo + o) * Co + co];
            }
            for (int b = 0; b < B; ++b)
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < wd_; ++ix) {
                        size_t xoff = ((static_cast<size_t>(b) * h + iy) * wd_ + ix) * Ci;
                        for (int kh = 0; kh < 3; ++kh) {
                            int oy = 2 * iy + kh - 1;
                            if (oy < 0 || oy >= Ho) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                int ox = 2 * ix + kw - 1;
                                if (ox < 0 || ox >= Wo) continue;
                                const Real* gp =
                                    self.grad.data() + ((static_cast<size_t>(b) * Ho + oy) * Wo + ox) * Co;
                                size_t woff = (static_cast<size_t>(kh) * 3 + kw) * Co * Ci;
                                if (xn->requires_grad) {
                                    auto& gx = xn->ensure_grad();
                                    for (int ci = 0; ci < Ci; ++ci) {
                                        Real acc = 0;
                                        for (int co = 0; co < Co; ++co)
                                            acc += gp[co] * wv[woff + static_cast<size_t>(co) * Ci + ci];
                                        gx[xoff + static_cast<size_t>(ci)] += acc;
                                    }
                                }
                                if (wn->requires_grad) {
                                    auto& gw = wn->ensure_grad();
                                    for (int co = 0; co < Co; ++co) {
                                        Real g = gp[co];
                                        if (g == Real(0)) continue;
                                        Real* gwrow = gw.data() + woff + static_cast<size_t>(co) * Ci;
                                        for (int ci = 0; ci < Ci; ++ci)
                                            gwrow[ci] += g * xd[xoff + static_cast<size_t>(ci)];
                                    }
                                }
                            }
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// normalization and pooling

// Per-sample, per-channel standardization over the spatial dims, followed by
// externally supplied scale/shift [B, C] (FiLM-style conditioning). No
// running statistics.
template <class Real>
TensorT<Real> channel_norm(const TensorT<Real>& x, const TensorT<Real>& gamma,
                           const TensorT<Real>& beta, double eps = 1e-5) {
    if (x.rank() != 4) throw ShapeError("channel_norm: input must be [B,H,W,C], got " + shape_str(x.shape()));
    int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    Shape want{B, C};
    if (gamma.shape() != want || beta.shape() != want)
        throw ShapeError("channel_norm: scale/shift must be [B,C]=" + shape_str(want) + ", got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    int N = H * W;
    std::vector<Real> out(x.data().size());
    std::vector<Real> xhat(x.data().size());
    std::vector<double> inv_sd(static_cast<size_t>(B) * C);
    const auto& xd = x.data();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double m = 0;
            for (int o = 0; o < N; ++o) m += xd[(static_cast<size_t>(b) * N + o) * C + c];
            m /= N;
            double v = 0;
            for (int o = 0; o < N; ++o) {
                double d = xd[(static_cast<size_t>(b) * N + o) * C + c] - m;
                v += d * d;
            }
            v /= N;
            double is = 1.0 / std::sqrt(v + eps);
            inv_sd[static_cast<size_t>(b) * C + c] = is;
            Real g = gamma.data()[static_cast<size_t>(b) * C + c];
            Real sh = beta.data()[static_cast<size_t>(b) * C + c];
            for (int o = 0; o < N; ++o) {
                size_t i = (static_cast<size_t>(b) * N + o) * C + c;
                Real xh = static_cast<Real>((xd[i] - m) * is);
                xhat[i] = xh;
                out[i] = g * xh + sh;
            }
        }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<Real>(
        "channel_norm", x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, gamma, xhat, inv_sd, B, C, N](NodeT<Real>& self) {
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    size_t bc = static_cast<size_t>(b) * C + c;
                    double sum_g = 0, sum_gx = 0;
                    for (int o = 0; o < N; ++o) {
                        size_t i = (static_cast<size_t>(b) * N + o) * C + c;
                        sum_g += self.grad[i];
                        sum_gx += static_cast<double>(self.grad[i]) * xhat[i];
                    }
                    if (gn->requires_grad) gn->ensure_grad()[bc] += static_cast<Real>(sum_gx);
                    if (bn->requires_grad) bn->ensure_grad()[bc] += static_cast<Real>(sum_g);
                    if (xn->requires_grad) {
                        auto& gx = xn->ensure_grad();
                        double gval = gamma.data()[bc];
                        double k = gval * inv_sd[bc];
                        for (int o = 0; o < N; ++o) {
                            size_t i = (static_cast<size_t>(b) * N + o) * C + c;
                            gx[i] += static_cast<Real>(
                                k * (self.grad[i] - sum_g / N - xhat[i] * sum_gx / N));
                        }
                    }
                }
        });
}

// Global average pooling: [B, H, W, C] -> [B, C].
template <class Real>
TensorT<Real> gap(const TensorT<Real>& x) {
    if (x.rank() != 4) throw ShapeError("gap: input must be [B,H,W,C], got " + shape_str(x.shape()));
    int B = x.dim(0), N = x.dim(1) * x.dim(2), C = x.dim(3);
    std::vector<Real> out(static_cast<size_t>(B) * C, Real(0));
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < N; ++o)
            for (int c = 0; c < C; ++c)
                out[static_cast<size_t>(b) * C + c] += x.data()[(static_cast<size_t>(b) * N + o) * C + c];
    double inv = 1.0 / N;
    for (auto& v : out) v = static_cast<Real>(v * inv);
    auto xn = x.node();
    return detail::make_op<Real>("gap", {B, C}, std::move(out), {x}, [xn, B, N, C, inv](NodeT<Real>& self) {
        auto& gx = xn->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int o = 0; o < N; ++o)
                for (int c = 0; c < C; ++c)
                    gx[(static_cast<size_t>(b) * N + o) * C + c] +=
                        static_cast<Real>(self.grad[static_cast<size_t>(b) * C + c] * inv);
    });
}

// Per-sample convex blend kappa[b]*f[b] + (1-kappa[b])*e[b]; kappa is [B] or [B,1].
template <class Real>
TensorT<Real> blend(const TensorT<Real>& f, const TensorT<Real>& e, const TensorT<Real>& kappa) {
    if (f.shape() != e.shape())
        throw ShapeError("blend: operand shapes differ, " + shape_str(f.shape()) + " vs " +
                         shape_str(e.shape()));
    int B = f.dim(0);
    if (kappa.numel() != B)
        throw ShapeError("blend: kappa must hold one coefficient per sample, got " +
                         shape_str(kappa.shape()) + " for batch " + std::to_string(B));
    int64_t per = f.numel() / B;
    std::vector<Real> out(f.data().size());
    for (int b = 0; b < B; ++b) {
        Real kv = kappa.data()[static_cast<size_t>(b)];
        for (int64_t o = 0; o < per; ++o) {
            size_t i = static_cast<size_t>(b) * per + o;
            out[i] = kv * f.data()[i] + (Real(1) - kv) * e.data()[i];
        }
    }
    auto fn = f.node();
    auto en = e.node();
    auto kn = kappa.node();
    return detail::make_op<Real>(
        "blend", f.shape(), std::move(out), {f, e, kappa},
        [fn, en, kn, f, e, kappa, B, per](NodeT<Real>& self) {
            for (int b = 0; b < B; ++b) {
                Real kv = kappa.data()[static_cast<size_t>(b)];
                double dk = 0;
                for (int64_t o = 0; o < per; ++o) {
                    size_t i = static_cast<size_t>(b) * per + o;
                    Real g = self.grad[i];
                    if (fn->requires_grad) fn->ensure_grad()[i] += g * kv;
                    if (en->requires_grad) en->ensure_grad()[i] += g * (Real(1) - kv);
                    dk += static_cast<double>(g) * (f.data()[i] - e.data()[i]);
                }
                if (kn->requires_grad) kn->ensure_grad()[static_cast<size_t>(b)] += static_cast<Real>(dk);
            }
        });
}

// ---------------------------------------------------------------------------
// gradient oracle

// Max relative error between the analytic gradient of fn at `point` and
// double-precision central differences, over the first `coord_limit`
// coordinates (0 = all). fn must be a pure TensorT<double> -> scalar map.
template <class F>
double grad_check(F&& fn, const TensorT<double>& point, double step, int coord_limit = 0) {
    if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");
    TensorT<double> x = point.clone();
    x.set_requires_grad(true);
    TensorT<double> loss = fn(x);
    if (loss.numel() != 1) throw std::logic_error("grad_check: function must return a scalar");
    loss.backward();
    std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.data().size(), 0.0);

    int64_t n = point.numel();
    int64_t limit = coord_limit > 0 ? std::min<int64_t>(coord_limit, n) : n;
    double max_rel = 0.0;
    for (int64_t i = 0; i < limit; ++i) {
        TensorT<double> xp = point.clone();
        TensorT<double> xm = point.clone();
        xp.mutable_data()[static_cast<size_t>(i)] += step;
        xm.mutable_data()[static_cast<size_t>(i)] -= step;
        double fp = fn(xp).item();
        double fm = fn(xm).item();
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite function value at perturbed point");
        double cd = (fp - fm) / (2.0 * step);
        double rel = std::abs(analytic[static_cast<size_t>(i)] - cd) / std::max(1.0, std::abs(cd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace dskd
