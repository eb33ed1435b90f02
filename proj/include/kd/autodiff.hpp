#pragma once

// Reverse-mode automatic differentiation over BasicTensor<T>.
//
// A Tape records every operation in creation order, which is also a valid
// topological order. Backward walks the tape once in reverse. Nodes whose
// inputs never require a gradient get no backward rule and never allocate
// gradient storage, so frozen parameters stay untouched.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "kd/ops.hpp"

namespace kd {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const BasicTensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

template <typename T>
class Tape {
   public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Reference an externally owned tensor (parameters, input batches).
    /// The tensor must outlive the tape; its requires_grad flag is honored.
    /// Leafing the same tensor twice yields the same node.
    Var<T> leaf(const BasicTensor<T>& t) {
        if (auto it = leaves_.find(&t); it != leaves_.end()) return Var<T>{this, it->second};
        Node n;
        n.source = &t;
        n.requires_grad = grad_enabled_ && t.requires_grad();
        const auto v = push(std::move(n));
        leaves_.emplace(&t, v.id);
        return v;
    }

    Var<T> constant(BasicTensor<T> t) {
        Node n;
        n.value = std::move(t);
        return push(std::move(n));
    }

    Var<T> variable(BasicTensor<T> t) {
        Node n;
        n.value = std::move(t);
        n.requires_grad = grad_enabled_;
        return push(std::move(n));
    }

    /// Record an op result. `backward` runs only if some input needs a gradient.
    Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
        Node n;
        n.value = std::move(value);
        for (const auto& v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const BasicTensor<T>& value(Var<T> v) const {
        const Node& n = nodes_.at(v.id);
        return n.source ? *n.source : n.value;
    }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient after backward, or nullptr when none was produced.
    const BasicTensor<T>* grad(Var<T> v) const {
        const auto& g = nodes_.at(v.id).grad;
        return g ? &*g : nullptr;
    }

    /// Gradient of an externally owned tensor referenced via leaf().
    const BasicTensor<T>* grad_for(const BasicTensor<T>& source) const {
        auto it = leaves_.find(&source);
        return it == leaves_.end() ? nullptr : grad(Var<T>{const_cast<Tape*>(this), it->second});
    }

    /// Gradient buffer of an input, allocated on first use; nullptr for
    /// inputs that do not require a gradient.
    BasicTensor<T>* accumulator(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (!n.grad) n.grad.emplace(value(Var<T>{this, id}).shape());
        return &*n.grad;
    }

    const BasicTensor<T>& incoming(std::size_t self) const { return *nodes_[self].grad; }

    void backward(Var<T> loss) {
        if (value(loss).size() != 1) {
            throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
        }
        if (!requires_grad(loss)) return;
        accumulator(loss.id)->data()[0] = T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad) n.backward(*this, i);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// With gradients disabled, leaves never require a gradient, so no
    /// backward rules are recorded (inference mode).
    void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

   private:
    struct Node {
        BasicTensor<T> value;
        const BasicTensor<T>* source = nullptr;
        std::optional<BasicTensor<T>> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<const BasicTensor<T>*, std::size_t> leaves_;
    bool grad_enabled_ = true;
};

namespace ad {

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> k, Var<T> b, ops::Conv2dParams p) {
    auto& tape = *x.tape;
    return tape.record(ops::conv2d(x.value(), k.value(), b.value(), p), {x, k, b},
                       [x, k, b, p](Tape<T>& t, std::size_t self) {
                           ops::conv2d_backward(t.value(x), t.value(k), t.incoming(self), p, t.accumulator(x.id),
                                                t.accumulator(k.id), t.accumulator(b.id));
                       });
}

template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> k, Var<T> b, ops::Conv2dParams p) {
    auto& tape = *x.tape;
    return tape.record(ops::depthwise_conv2d(x.value(), k.value(), b.value(), p), {x, k, b},
                       [x, k, b, p](Tape<T>& t, std::size_t self) {
                           ops::depthwise_conv2d_backward(t.value(x), t.value(k), t.incoming(self), p,
                                                          t.accumulator(x.id), t.accumulator(k.id),
                                                          t.accumulator(b.id));
                       });
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
    auto& tape = *x.tape;
    return tape.record(ops::dense(x.value(), w.value(), b.value()), {x, w, b},
                       [x, w, b](Tape<T>& t, std::size_t self) {
                           ops::dense_backward(t.value(x), t.value(w), t.incoming(self), t.accumulator(x.id),
                                               t.accumulator(w.id), t.accumulator(b.id));
                       });
}

template <typename T>
Var<T> relu(Var<T> x) {
    auto& tape = *x.tape;
    return tape.record(ops::relu(x.value()), {x}, [x](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& in = t.value(x);
            const auto& g = t.incoming(self);
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (in[i] > T{0}) (*dx)[i] += g[i];
            }
        }
    });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, std::size_t window, std::size_t stride) {
    auto& tape = *x.tape;
    std::vector<std::size_t> argmax;
    auto out = ops::max_pool2d(x.value(), window, stride, &argmax);
    return tape.record(std::move(out), {x}, [x, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& g = t.incoming(self);
            for (std::size_t o = 0; o < argmax.size(); ++o) (*dx)[argmax[o]] += g[o];
        }
    });
}

template <typename T>
Var<T> global_avg_pool2d(Var<T> x) {
    auto& tape = *x.tape;
    return tape.record(ops::global_avg_pool2d(x.value()), {x}, [x](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& g = t.incoming(self);
            const std::size_t hw = dx->dim(2) * dx->dim(3);
            const T inv = T{1} / static_cast<T>(hw);
            for (std::size_t plane = 0; plane < g.size(); ++plane) {
                for (std::size_t i = 0; i < hw; ++i) (*dx)[plane * hw + i] += g[plane] * inv;
            }
        }
    });
}

/// Elementwise gradient pass-through for shape-only ops.
template <typename T>
Var<T> reshape_like(Var<T> x, BasicTensor<T> out) {
    return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& g = t.incoming(self);
            for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
        }
    });
}

template <typename T>
Var<T> flatten(Var<T> x) {
    return reshape_like(x, ops::flatten(x.value()));
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
    auto& tape = *a.tape;
    return tape.record(ops::concat_channels(a.value(), b.value()), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = t.incoming(self);
        const std::size_t n = g.dim(0), ca = t.value(a).dim(1), cb = t.value(b).dim(1), hw = g.dim(2) * g.dim(3);
        auto* da = t.accumulator(a.id);
        auto* db = t.accumulator(b.id);
        for (std::size_t i = 0; i < n; ++i) {
            const T* src = g.raw() + i * (ca + cb) * hw;
            if (da) {
                for (std::size_t j = 0; j < ca * hw; ++j) (*da)[i * ca * hw + j] += src[j];
            }
            if (db) {
                for (std::size_t j = 0; j < cb * hw; ++j) (*db)[i * cb * hw + j] += src[ca * hw + j];
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BasicTensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = t.incoming(self);
        for (auto id : {a.id, b.id}) {
            if (auto* d = t.accumulator(id)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BasicTensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
        const auto& g = t.incoming(self);
        const auto& av = t.value(a);
        const auto& bv = t.value(b);
        if (auto* da = t.accumulator(a.id)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
        }
        if (auto* db = t.accumulator(b.id)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
    BasicTensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    return x.tape->record(std::move(out), {x}, [x, factor](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& g = t.incoming(self);
            for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * factor;
        }
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    T acc{0};
    for (auto v : x.value().data()) acc += v;
    return x.tape->record(BasicTensor<T>({1}, acc), {x}, [x](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const T g = t.incoming(self)[0];
            for (auto& d : dx->data()) d += g;
        }
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Inverted dropout; identity (no node) outside training or at rate 0.
template <typename T>
Var<T> dropout(Var<T> x, double rate, bool training, std::uint64_t seed) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error(ExitCode::config, "dropout rate must lie in [0, 1)");
    if (!training || rate == 0.0) return x;
    auto mask = ops::dropout_mask<T>(x.shape(), rate, seed);
    BasicTensor<T> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return x.tape->record(std::move(out), {x}, [x, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            const auto& g = t.incoming(self);
            for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * mask[i];
        }
    });
}

template <typename T>
Var<T> log_softmax(Var<T> x) {
    auto out = ops::log_softmax(x.value());
    return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, std::size_t self) {
        if (auto* dx = t.accumulator(x.id)) {
            // d/dz_j = g_j - softmax_j * sum_k g_k
            const auto& g = t.incoming(self);
            const auto& y = t.value(Var<T>{&t, self});
            const std::size_t n = y.dim(0), k = y.dim(1);
            for (std::size_t i = 0; i < n; ++i) {
                T gs{0};
                for (std::size_t j = 0; j < k; ++j) gs += g[i * k + j];
                for (std::size_t j = 0; j < k; ++j) {
                    (*dx)[i * k + j] += g[i * k + j] - std::exp(y[i * k + j]) * gs;
                }
            }
        }
    });
}

/// Mean over rows of -log_probs[row, label].
template <typename T>
Var<T> nll_loss(Var<T> log_probs, std::span<const int> labels) {
    const auto& lp = log_probs.value();
    if (lp.rank() != 2 || lp.dim(0) != labels.size()) {
        throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for log-probs " +
                         shape_str(lp.shape()));
    }
    const std::size_t n = lp.dim(0), k = lp.dim(1);
    std::vector<int> lab(labels.begin(), labels.end());
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) {
        if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= k) {
            throw DataError("label " + std::to_string(lab[i]) + " at row " + std::to_string(i) + " outside [0, " +
                            std::to_string(k) + ")");
        }
        acc -= lp[i * k + lab[i]];
    }
    acc /= static_cast<T>(n);
    return log_probs.tape->record(BasicTensor<T>({1}, acc), {log_probs},
                                  [log_probs, lab = std::move(lab), k](Tape<T>& t, std::size_t self) {
                                      if (auto* d = t.accumulator(log_probs.id)) {
                                          const T g = t.incoming(self)[0] / static_cast<T>(lab.size());
                                          for (std::size_t i = 0; i < lab.size(); ++i) (*d)[i * k + lab[i]] -= g;
                                      }
                                  });
}

/// Mean over rows of sum_k r_k (log r_k - log a_k), where r = exp(ref_log)
/// and a = exp(approx_log). log a_k is floored at log(floor); floored
/// entries carry no gradient. `clamped` receives the number of floored terms.
template <typename T>
Var<T> kl_from_log(Var<T> ref_log, Var<T> approx_log, double floor = 1e-12, std::size_t* clamped = nullptr) {
    const auto& r = ref_log.value();
    const auto& a = approx_log.value();
    if (r.shape() != a.shape() || r.rank() != 2) {
        throw ShapeError("kl_divergence: " + shape_str(r.shape()) + " vs " + shape_str(a.shape()));
    }
    const T log_floor = static_cast<T>(std::log(floor));
    const std::size_t n = r.dim(0);
    T acc{0};
    std::size_t n_clamped = 0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const T p = std::exp(r[i]);
        if (p == T{0}) continue;
        T la = a[i];
        if (la < log_floor) {
            la = log_floor;
            ++n_clamped;
        }
        acc += p * (r[i] - la);
    }
    if (clamped) *clamped = n_clamped;
    acc /= static_cast<T>(n);
    return ref_log.tape->record(
        BasicTensor<T>({1}, acc), {ref_log, approx_log}, [ref_log, approx_log, log_floor, n](Tape<T>& t, std::size_t self) {
            const T g = t.incoming(self)[0] / static_cast<T>(n);
            const auto& r = t.value(ref_log);
            const auto& a = t.value(approx_log);
            auto* dr = t.accumulator(ref_log.id);
            auto* da = t.accumulator(approx_log.id);
            for (std::size_t i = 0; i < r.size(); ++i) {
                const T p = std::exp(r[i]);
                if (p == T{0}) continue;
                const bool floored = a[i] < log_floor;
                const T la = floored ? log_floor : a[i];
                if (dr) (*dr)[i] += g * p * (r[i] - la + T{1});
                if (da && !floored) (*da)[i] -= g * p;
            }
        });
}

}  // namespace ad
}  // namespace kd
