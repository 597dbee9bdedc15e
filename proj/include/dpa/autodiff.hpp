#pragma once

// Define-by-run reverse-mode tape. A tape is rebuilt per forward pass and
// owns the gradient slots; tensors captured by backward closures are shared
// read-only. Single-threaded per tape.

#include <array>
#include <cassert>
#include <functional>
#include <limits>
#include <optional>

#include "dpa/tensor.hpp"

namespace dpa {

class Tape;

struct Var {
    Tensor v;
    Tape* tape = nullptr;
    int id = -1;  // gradient slot; -1 when not tracked

    bool tracked() const { return id >= 0; }
    const Shape& shape() const { return v.shape(); }
    int64_t numel() const { return v.numel(); }
};

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

class Tape {
  public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Var leaf(Tensor value, bool requires_grad = false) {
        Var r{std::move(value), this, -1};
        if (grad_enabled_ && requires_grad) r.id = alloc_slot();
        return r;
    }

    // Leaf bound to a Parameter; its gradient is written back after backward().
    Var param(Parameter& p) {
        Var r = leaf(p.value, true);
        if (r.tracked()) bindings_.push_back({&p, r.id});
        return r;
    }

    int alloc_slot() {
        grads_.emplace_back();
        return static_cast<int>(grads_.size() - 1);
    }

    using Vjp = std::function<std::vector<Tensor>(const Tensor& gout)>;

    void record(std::vector<int> input_ids, int out_id, Vjp vjp) {
        nodes_.push_back({std::move(input_ids), out_id, std::move(vjp)});
    }

    // Seeds d(loss)/d(loss)=1 and sweeps nodes in reverse topological order.
    // Slots never reached from the loss keep no gradient.
    void backward(const Var& loss) {
        if (loss.v.numel() != 1) throw NotScalarLoss("backward requires a scalar loss");
        if (!loss.tracked()) return;
        accum(loss.id, Tensor::ones(loss.v.shape()));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out_id > loss.id) continue;  // recorded after the loss
            auto& g = grads_[static_cast<size_t>(it->out_id)];
            if (!g.has_value()) continue;
            std::vector<Tensor> gin = it->vjp(*g);
            assert(gin.size() == it->input_ids.size());
            for (size_t i = 0; i < gin.size(); ++i)
                if (it->input_ids[i] >= 0) accum(it->input_ids[i], gin[i]);
        }
        for (auto& b : bindings_) {
            auto& g = grads_[static_cast<size_t>(b.id)];
            if (g.has_value())
                b.p->grad = broadcast_binary(b.p->grad, *g, [](double a, double c) { return a + c; },
                                             "grad-accumulate");
        }
    }

    bool has_grad(int id) const {
        return id >= 0 && grads_[static_cast<size_t>(id)].has_value();
    }

    const Tensor& grad(int id) const {
        if (!has_grad(id)) throw DpaError("no gradient recorded for slot");
        return *grads_[static_cast<size_t>(id)];
    }

    Tensor grad_or_zero(const Var& x) const {
        if (has_grad(x.id)) return grad(x.id);
        return Tensor::zeros(x.shape());
    }

  private:
    struct Node {
        std::vector<int> input_ids;
        int out_id;
        Vjp vjp;
    };
    struct Binding {
        Parameter* p;
        int id;
    };

    void accum(int id, const Tensor& g) {
        auto& slot = grads_[static_cast<size_t>(id)];
        if (!slot.has_value())
            slot = g;
        else
            slot = broadcast_binary(*slot, g, [](double a, double b) { return a + b; }, "grad-accumulate");
    }

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::vector<std::optional<Tensor>> grads_;
    std::vector<Binding> bindings_;
};

namespace detail {

inline Var make_result(Tape* tape, Tensor value, std::vector<const Var*> inputs, Tape::Vjp vjp,
                       const char* op) {
    check_finite(value, op);
    Var out{std::move(value), tape, -1};
    bool any = false;
    for (const Var* in : inputs)
        if (in->tracked()) any = true;
    if (tape && tape->grad_enabled() && any) {
        out.id = tape->alloc_slot();
        std::vector<int> ids;
        ids.reserve(inputs.size());
        for (const Var* in : inputs) ids.push_back(in->id);
        tape->record(std::move(ids), out.id, std::move(vjp));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives (broadcasting)

inline Var add(const Var& a, const Var& b) {
    Tensor out = broadcast_binary(a.v, b.v, [](double x, double y) { return x + y; }, "add");
    Shape sa = a.shape(), sb = b.shape();
    return detail::make_result(
        a.tape ? a.tape : b.tape, std::move(out), {&a, &b},
        [sa, sb](const Tensor& g) {
            return std::vector<Tensor>{reduce_to(g, sa), reduce_to(g, sb)};
        },
        "add");
}

inline Var sub(const Var& a, const Var& b) {
    Tensor out = broadcast_binary(a.v, b.v, [](double x, double y) { return x - y; }, "sub");
    Shape sa = a.shape(), sb = b.shape();
    return detail::make_result(
        a.tape ? a.tape : b.tape, std::move(out), {&a, &b},
        [sa, sb](const Tensor& g) {
            Tensor gb = reduce_to(g, sb);
            return std::vector<Tensor>{reduce_to(g, sa), unary_map(gb, [](double x) { return -x; })};
        },
        "sub");
}

inline Var mul(const Var& a, const Var& b) {
    Tensor out = broadcast_binary(a.v, b.v, [](double x, double y) { return x * y; }, "mul");
    Tensor av = a.v, bv = b.v;
    return detail::make_result(
        a.tape ? a.tape : b.tape, std::move(out), {&a, &b},
        [av, bv](const Tensor& g) {
            Tensor ga = broadcast_binary(g, bv, [](double x, double y) { return x * y; }, "mul");
            Tensor gb = broadcast_binary(g, av, [](double x, double y) { return x * y; }, "mul");
            return std::vector<Tensor>{reduce_to(ga, av.shape()), reduce_to(gb, bv.shape())};
        },
        "mul");
}

inline Var div(const Var& a, const Var& b) {
    Tensor out = broadcast_binary(a.v, b.v, [](double x, double y) { return x / y; }, "div");
    Tensor av = a.v, bv = b.v;
    return detail::make_result(
        a.tape ? a.tape : b.tape, std::move(out), {&a, &b},
        [av, bv](const Tensor& g) {
            Tensor ga = broadcast_binary(g, bv, [](double x, double y) { return x / y; }, "div");
            Tensor q = broadcast_binary(av, bv, [](double x, double y) { return x / (y * y); }, "div");
            Tensor gb = broadcast_binary(g, q, [](double x, double y) { return -x * y; }, "div");
            return std::vector<Tensor>{reduce_to(ga, av.shape()), reduce_to(gb, bv.shape())};
        },
        "div");
}

// ---------------------------------------------------------------------------
// Elementwise unary primitives

inline Var neg(const Var& a) {
    return detail::make_result(
        a.tape, unary_map(a.v, [](double x) { return -x; }), {&a},
        [](const Tensor& g) {
            return std::vector<Tensor>{unary_map(g, [](double x) { return -x; })};
        },
        "neg");
}

inline Var pow(const Var& a, double e) {
    Tensor out = unary_map(a.v, [e](double x) { return std::pow(x, e); });
    Tensor av = a.v;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [av, e](const Tensor& g) {
            Tensor d = unary_map(av, [e](double x) { return e * std::pow(x, e - 1.0); });
            return std::vector<Tensor>{
                broadcast_binary(g, d, [](double x, double y) { return x * y; }, "pow")};
        },
        "pow");
}

inline Var exp(const Var& a) {
    Tensor out = unary_map(a.v, [](double x) { return std::exp(x); });
    Tensor saved = out;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [saved](const Tensor& g) {
            return std::vector<Tensor>{
                broadcast_binary(g, saved, [](double x, double y) { return x * y; }, "exp")};
        },
        "exp");
}

inline Var log(const Var& a) {
    Tensor out = unary_map(a.v, [](double x) { return std::log(x); });
    Tensor av = a.v;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [av](const Tensor& g) {
            return std::vector<Tensor>{
                broadcast_binary(g, av, [](double x, double y) { return x / y; }, "log")};
        },
        "log");
}

// Subgradient 0 where x == 0, so zero-distance diagonals stay quiet.
inline Var sqrt(const Var& a) {
    Tensor out = unary_map(a.v, [](double x) { return std::sqrt(x); });
    Tensor saved = out;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [saved](const Tensor& g) {
            return std::vector<Tensor>{broadcast_binary(
                g, saved, [](double x, double y) { return y > 0.0 ? 0.5 * x / y : 0.0; }, "sqrt")};
        },
        "sqrt");
}

inline Var sigmoid(const Var& a) {
    Tensor out = unary_map(a.v, [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    Tensor saved = out;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [saved](const Tensor& g) {
            return std::vector<Tensor>{broadcast_binary(
                g, saved, [](double x, double y) { return x * y * (1.0 - y); }, "sigmoid")};
        },
        "sigmoid");
}

// Subgradient 0 at exactly 0.
inline Var relu(const Var& a) {
    Tensor out = unary_map(a.v, [](double x) { return x > 0.0 ? x : 0.0; });
    Tensor av = a.v;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [av](const Tensor& g) {
            return std::vector<Tensor>{broadcast_binary(
                g, av, [](double x, double y) { return y > 0.0 ? x : 0.0; }, "relu")};
        },
        "relu");
}

// Gradient passes only where the input was strictly above the floor.
inline Var clamp_min(const Var& a, double floor) {
    Tensor out = unary_map(a.v, [floor](double x) { return x < floor ? floor : x; });
    Tensor av = a.v;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [av, floor](const Tensor& g) {
            return std::vector<Tensor>{broadcast_binary(
                g, av, [floor](double x, double y) { return y > floor ? x : 0.0; }, "clamp_min")};
        },
        "clamp_min");
}

inline Var add_scalar(const Var& a, double c) {
    return detail::make_result(
        a.tape, unary_map(a.v, [c](double x) { return x + c; }), {&a},
        [](const Tensor& g) { return std::vector<Tensor>{g}; }, "add_scalar");
}

inline Var mul_scalar(const Var& a, double c) {
    return detail::make_result(
        a.tape, unary_map(a.v, [c](double x) { return x * c; }), {&a},
        [c](const Tensor& g) {
            return std::vector<Tensor>{unary_map(g, [c](double x) { return x * c; })};
        },
        "mul_scalar");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a, const std::vector<int>& axes, bool keepdims = false) {
    ReduceResult r = reduce(a.v, axes, keepdims, ReduceKind::Sum);
    Shape in_shape = a.shape();
    Shape keep_shape = reduced_shape(in_shape, axes, true);
    return detail::make_result(
        a.tape, std::move(r.out), {&a},
        [in_shape, keep_shape](const Tensor& g) {
            Tensor gk = g.with_shape(keep_shape);
            Tensor gi = broadcast_binary(Tensor::zeros(in_shape), gk,
                                         [](double, double y) { return y; }, "sum");
            return std::vector<Tensor>{gi};
        },
        "sum");
}

inline Var mean(const Var& a, const std::vector<int>& axes, bool keepdims = false) {
    ReduceResult r = reduce(a.v, axes, keepdims, ReduceKind::Mean);
    Shape in_shape = a.shape();
    Shape keep_shape = reduced_shape(in_shape, axes, true);
    double inv = static_cast<double>(shape_numel(keep_shape)) / static_cast<double>(a.numel());
    return detail::make_result(
        a.tape, std::move(r.out), {&a},
        [in_shape, keep_shape, inv](const Tensor& g) {
            Tensor gk = g.with_shape(keep_shape);
            Tensor gi = broadcast_binary(Tensor::zeros(in_shape), gk,
                                         [inv](double, double y) { return y * inv; }, "mean");
            return std::vector<Tensor>{gi};
        },
        "mean");
}

namespace detail {

inline Var extremum(const Var& a, const std::vector<int>& axes, bool keepdims, ReduceKind kind) {
    ReduceResult r = reduce(a.v, axes, keepdims, kind);
    Shape in_shape = a.shape();
    std::vector<int64_t> arg = std::move(r.arg);
    return detail::make_result(
        a.tape, std::move(r.out), {&a},
        [in_shape, arg](const Tensor& g) {
            Tensor gi = Tensor::zeros(in_shape);
            double* p = gi.mut_data()->data();
            for (int64_t o = 0; o < g.numel(); ++o) p[arg[static_cast<size_t>(o)]] += g[o];
            return std::vector<Tensor>{gi};
        },
        kind == ReduceKind::Max ? "max" : "min");
}

}  // namespace detail

// Ties route the gradient to the first matching element in row-major order.
inline Var reduce_max(const Var& a, const std::vector<int>& axes, bool keepdims = false) {
    return detail::extremum(a, axes, keepdims, ReduceKind::Max);
}

inline Var reduce_min(const Var& a, const std::vector<int>& axes, bool keepdims = false) {
    return detail::extremum(a, axes, keepdims, ReduceKind::Min);
}

inline Var sum_all(const Var& a) {
    std::vector<int> axes(static_cast<size_t>(a.v.rank()));
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
    return sum(a, axes, false);
}

// ---------------------------------------------------------------------------
// Layout primitives

inline Var reshape(const Var& a, Shape shape) {
    Tensor out = a.v.with_shape(shape);
    Shape orig = a.shape();
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [orig](const Tensor& g) { return std::vector<Tensor>{g.with_shape(orig)}; }, "reshape");
}

inline Var permute(const Var& a, const std::vector<int>& dims) {
    Tensor out = permute_tensor(a.v, dims);
    std::vector<int> inv = inverse_permutation(dims);
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [inv](const Tensor& g) { return std::vector<Tensor>{permute_tensor(g, inv)}; }, "permute");
}

inline Var concat(const std::vector<Var>& parts, int axis) {
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    std::vector<const Var*> ins;
    for (const Var& p : parts) {
        vals.push_back(p.v);
        ins.push_back(&p);
    }
    Tensor out = concat_tensors(vals, axis);
    std::vector<int64_t> extents;
    for (const Var& p : parts) extents.push_back(p.v.extent(axis));
    Tape* tape = nullptr;
    for (const Var& p : parts)
        if (p.tape) tape = p.tape;
    return detail::make_result(
        tape, std::move(out), std::move(ins),
        [extents, axis](const Tensor& g) {
            std::vector<Tensor> gs;
            int64_t off = 0;
            for (int64_t e : extents) {
                gs.push_back(slice_tensor(g, axis, off, e));
                off += e;
            }
            return gs;
        },
        "concat");
}

inline Var slice(const Var& a, int axis, int64_t start, int64_t len) {
    Tensor out = slice_tensor(a.v, axis, start, len);
    Shape full = a.shape();
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [full, axis, start](const Tensor& g) {
            return std::vector<Tensor>{unslice_tensor(g, full, axis, start)};
        },
        "slice");
}

// ---------------------------------------------------------------------------
// Softmax over one axis (max-shift stabilized)

inline Var softmax(const Var& a, int axis) {
    ReduceResult mx = reduce(a.v, {axis}, true, ReduceKind::Max);
    Tensor sh = broadcast_binary(a.v, mx.out, [](double x, double m) { return std::exp(x - m); },
                                 "softmax");
    ReduceResult sm = reduce(sh, {axis}, true, ReduceKind::Sum);
    Tensor out = broadcast_binary(sh, sm.out, [](double e, double s) { return e / s; }, "softmax");
    Tensor saved = out;
    return detail::make_result(
        a.tape, std::move(out), {&a},
        [saved, axis](const Tensor& g) {
            Tensor gy = broadcast_binary(g, saved, [](double x, double y) { return x * y; },
                                         "softmax");
            ReduceResult dot = reduce(gy, {axis}, true, ReduceKind::Sum);
            Tensor adj = broadcast_binary(g, dot.out, [](double x, double d) { return x - d; },
                                          "softmax");
            return std::vector<Tensor>{broadcast_binary(
                adj, saved, [](double x, double y) { return x * y; }, "softmax")};
        },
        "softmax");
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D)

inline Var matmul(const Var& a, const Var& b) {
    Tensor out = matmul_tensor(a.v, b.v);
    Tensor av = a.v, bv = b.v;
    return detail::make_result(
        a.tape ? a.tape : b.tape, std::move(out), {&a, &b},
        [av, bv](const Tensor& g) {
            Tensor ga = matmul_tensor(g, permute_tensor(bv, {1, 0}));
            Tensor gb = matmul_tensor(permute_tensor(av, {1, 0}), g);
            return std::vector<Tensor>{ga, gb};
        },
        "matmul");
}

// ---------------------------------------------------------------------------
// 2-D convolution, NCHW, direct loops. Odd kernels only; a 3x3 kernel with
// padding 1 on a 1x1 map is legal and uses only the center tap.

namespace detail {

inline void conv2d_shape_check(const Tensor& x, const Tensor& w, int stride, int padding,
                               int64_t& oh, int64_t& ow) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeMismatch("conv2d expects NCHW input and OIKK weight");
    if (w.extent(2) != w.extent(3) || w.extent(2) % 2 == 0)
        throw ShapeMismatch("conv2d kernel must be square and odd");
    if (x.extent(1) != w.extent(1))
        throw ShapeMismatch("conv2d channel mismatch: input C=" + std::to_string(x.extent(1)) +
                            " weight C_in=" + std::to_string(w.extent(1)));
    if (stride < 1 || padding < 0) throw ShapeMismatch("conv2d bad stride/padding");
    int64_t k = w.extent(2);
    oh = (x.extent(2) + 2 * padding - k) / stride + 1;
    ow = (x.extent(3) + 2 * padding - k) / stride + 1;
    if (x.extent(2) + 2 * padding < k || x.extent(3) + 2 * padding < k || oh < 1 || ow < 1)
        throw ShapeMismatch("conv2d output would be empty");
}

inline Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, int stride,
                             int padding) {
    int64_t oh, ow;
    conv2d_shape_check(x, w, stride, padding, oh, ow);
    int64_t n = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
    int64_t co = w.extent(0), k = w.extent(2);
    Tensor out({n, co, oh, ow});
    double* po = out.mut_data()->data();
    const double* px = x.data();
    const double* pw = w.data();

    if (bias) {
        if (bias->rank() != 1 || bias->extent(0) != co)
            throw ShapeMismatch("conv2d bias shape mismatch");
        for (int64_t in = 0; in < n; ++in)
            for (int64_t c = 0; c < co; ++c) {
                double bv = (*bias)[c];
                double* dst = po + ((in * co + c) * oh) * ow;
                for (int64_t i = 0; i < oh * ow; ++i) dst[i] = bv;
            }
    }
    for (int64_t in = 0; in < n; ++in)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t ic = 0; ic < ci; ++ic) {
                const double* xin = px + ((in * ci + ic) * h) * wd;
                const double* wk = pw + ((c * ci + ic) * k) * k;
                double* dst = po + ((in * co + c) * oh) * ow;
                for (int64_t kh = 0; kh < k; ++kh)
                    for (int64_t kw = 0; kw < k; ++kw) {
                        double wv = wk[kh * k + kw];
                        if (wv == 0.0) continue;
                        for (int64_t y = 0; y < oh; ++y) {
                            int64_t iy = y * stride - padding + kh;
                            if (iy < 0 || iy >= h) continue;
                            const double* xrow = xin + iy * wd;
                            double* orow = dst + y * ow;
                            for (int64_t xo = 0; xo < ow; ++xo) {
                                int64_t ix = xo * stride - padding + kw;
                                if (ix < 0 || ix >= wd) continue;
                                orow[xo] += wv * xrow[ix];
                            }
                        }
                    }
            }
    return out;
}

inline Tensor conv2d_grad_input(const Tensor& g, const Tensor& x_shape_like, const Tensor& w,
                                int stride, int padding) {
    int64_t n = x_shape_like.extent(0), ci = x_shape_like.extent(1);
    int64_t h = x_shape_like.extent(2), wd = x_shape_like.extent(3);
    int64_t co = w.extent(0), k = w.extent(2);
    int64_t oh = g.extent(2), ow = g.extent(3);
    Tensor gx(x_shape_like.shape());
    double* pgx = gx.mut_data()->data();
    const double* pg = g.data();
    const double* pw = w.data();
    for (int64_t in = 0; in < n; ++in)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t ic = 0; ic < ci; ++ic) {
                double* dst = pgx + ((in * ci + ic) * h) * wd;
                const double* wk = pw + ((c * ci + ic) * k) * k;
                const double* gsrc = pg + ((in * co + c) * oh) * ow;
                for (int64_t kh = 0; kh < k; ++kh)
                    for (int64_t kw = 0; kw < k; ++kw) {
                        double wv = wk[kh * k + kw];
                        if (wv == 0.0) continue;
                        for (int64_t y = 0; y < oh; ++y) {
                            int64_t iy = y * stride - padding + kh;
                            if (iy < 0 || iy >= h) continue;
                            double* drow = dst + iy * wd;
                            const double* grow = gsrc + y * ow;
                            for (int64_t xo = 0; xo < ow; ++xo) {
                                int64_t ix = xo * stride - padding + kw;
                                if (ix < 0 || ix >= wd) continue;
                                drow[ix] += wv * grow[xo];
                            }
                        }
                    }
            }
    return gx;
}

inline Tensor conv2d_grad_weight(const Tensor& g, const Tensor& x, const Shape& wshape, int stride,
                                 int padding) {
    int64_t n = x.extent(0), ci = x.extent(1), h = x.extent(2), wd = x.extent(3);
    int64_t co = wshape[0], k = wshape[2];
    int64_t oh = g.extent(2), ow = g.extent(3);
    Tensor gw(wshape);
    double* pgw = gw.mut_data()->data();
    const double* pg = g.data();
    const double* px = x.data();
    for (int64_t in = 0; in < n; ++in)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t ic = 0; ic < ci; ++ic) {
                const double* xin = px + ((in * ci + ic) * h) * wd;
                const double* gsrc = pg + ((in * co + c) * oh) * ow;
                double* wk = pgw + ((c * ci + ic) * k) * k;
                for (int64_t kh = 0; kh < k; ++kh)
                    for (int64_t kw = 0; kw < k; ++kw) {
                        double acc = 0.0;
                        for (int64_t y = 0; y < oh; ++y) {
                            int64_t iy = y * stride - padding + kh;
                            if (iy < 0 || iy >= h) continue;
                            const double* xrow = xin + iy * wd;
                            const double* grow = gsrc + y * ow;
                            for (int64_t xo = 0; xo < ow; ++xo) {
                                int64_t ix = xo * stride - padding + kw;
                                if (ix < 0 || ix >= wd) continue;
                                acc += xrow[ix] * grow[xo];
                            }
                        }
                        wk[kh * k + kw] += acc;
                    }
            }
    return gw;
}

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, const Var* bias, int stride = 1, int padding = 0) {
    Tensor out = detail::conv2d_forward(x.v, w.v, bias ? &bias->v : nullptr, stride, padding);
    Tensor xv = x.v, wv = w.v;
    bool has_bias = bias != nullptr;
    std::vector<const Var*> ins{&x, &w};
    if (bias) ins.push_back(bias);
    return detail::make_result(
        x.tape, std::move(out), std::move(ins),
        [xv, wv, stride, padding, has_bias](const Tensor& g) {
            std::vector<Tensor> gs;
            gs.push_back(detail::conv2d_grad_input(g, xv, wv, stride, padding));
            gs.push_back(detail::conv2d_grad_weight(g, xv, wv.shape(), stride, padding));
            if (has_bias) {
                ReduceResult rb = reduce(g, {0, 2, 3}, false, ReduceKind::Sum);
                gs.push_back(rb.out);
            }
            return gs;
        },
        "conv2d");
}

// ---------------------------------------------------------------------------
// Batch normalization over NCHW (per-channel). Composite: gradients flow
// through the batch statistics. Train mode updates running stats in place
// with `momentum`; eval mode normalizes with the running stats.

inline Var batchnorm2d(Tape& tape, const Var& x, const Var& gamma, const Var& beta,
                       Tensor& running_mean, Tensor& running_var, bool train, double eps = 1e-5,
                       double momentum = 0.1) {
    if (x.v.rank() != 4) throw ShapeMismatch("batchnorm2d expects NCHW");
    int64_t c = x.v.extent(1);
    if (gamma.v.numel() != c || beta.v.numel() != c)
        throw ShapeMismatch("batchnorm2d affine parameter size mismatch");
    Shape cshape{1, c, 1, 1};
    Var g4 = reshape(gamma, cshape);
    Var b4 = reshape(beta, cshape);
    if (train) {
        Var mu = mean(x, {0, 2, 3}, true);
        Var centered = sub(x, mu);
        Var var = mean(mul(centered, centered), {0, 2, 3}, true);
        Var inv_std = pow(add_scalar(var, eps), -0.5);
        Var norm = mul(centered, inv_std);
        // running stats are buffers, not part of the graph
        Tensor bm = mu.v.with_shape({c});
        Tensor bv = var.v.with_shape({c});
        running_mean = broadcast_binary(
            running_mean, bm, [momentum](double r, double b) { return (1 - momentum) * r + momentum * b; },
            "bn-stats");
        running_var = broadcast_binary(
            running_var, bv, [momentum](double r, double b) { return (1 - momentum) * r + momentum * b; },
            "bn-stats");
        return add(mul(norm, g4), b4);
    }
    Var rm = tape.leaf(running_mean.with_shape(cshape));
    Var rv = tape.leaf(running_var.with_shape(cshape));
    Var inv_std = pow(add_scalar(rv, eps), -0.5);
    Var norm = mul(sub(x, rm), inv_std);
    return add(mul(norm, g4), b4);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (central differences).
// Relative error per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

struct GradCheckOpts {
    double h = 1e-5;
    int max_coords_per_tensor = 0;  // 0 = every coordinate
    uint64_t seed = 0;              // subsampling stream
    double fault_scale = 1.0;       // test fixture: scales the analytic side
};

inline double grad_check_many(
    const std::function<Var(Tape&, std::vector<Var>&)>& f, const std::vector<Tensor>& points,
    const GradCheckOpts& opts = {}) {
    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(points.size());
        for (const Tensor& p : points) vars.push_back(tape.leaf(p, true));
        Var loss = f(tape, vars);
        if (loss.v.numel() != 1) throw NotScalarLoss("grad_check target must be scalar");
        tape.backward(loss);
        for (Var& v : vars) analytic.push_back(tape.grad_or_zero(v));
    }
    auto eval_at = [&](const std::vector<Tensor>& pts) {
        Tape tape(false);
        std::vector<Var> vars;
        for (const Tensor& p : pts) vars.push_back(tape.leaf(p));
        return f(tape, vars).v[0];
    };

    std::mt19937_64 rng(opts.seed);
    double worst = 0.0;
    for (size_t t = 0; t < points.size(); ++t) {
        int64_t n = points[t].numel();
        std::vector<int64_t> coords;
        if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
            std::vector<int64_t> all(static_cast<size_t>(n));
            std::iota(all.begin(), all.end(), 0);
            std::shuffle(all.begin(), all.end(), rng);
            coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
        } else {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        }
        for (int64_t i : coords) {
            std::vector<Tensor> plus = points, minus = points;
            plus[t] = points[t].clone();
            minus[t] = points[t].clone();
            (*plus[t].mut_data())[static_cast<size_t>(i)] += opts.h;
            (*minus[t].mut_data())[static_cast<size_t>(i)] -= opts.h;
            double numeric = (eval_at(plus) - eval_at(minus)) / (2.0 * opts.h);
            double a = analytic[t][i] * opts.fault_scale;
            double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

inline double grad_check(const std::function<Var(Tape&, Var&)>& f, const Tensor& point,
                         double h = 1e-5) {
    GradCheckOpts opts;
    opts.h = h;
    return grad_check_many(
        [&f](Tape& t, std::vector<Var>& vs) { return f(t, vs[0]); }, {point}, opts);
}

// Gradient check through module Parameters: `make_loss` must read each
// parameter's current value via tape.param(). Parameter values are perturbed
// in place and restored.
inline double grad_check_parameters(const std::function<Var(Tape&)>& make_loss,
                                    const std::vector<Parameter*>& params,
                                    const GradCheckOpts& opts = {}) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = make_loss(tape);
        if (loss.v.numel() != 1) throw NotScalarLoss("grad_check target must be scalar");
        tape.backward(loss);
    }
    std::vector<Tensor> analytic;
    for (Parameter* p : params) analytic.push_back(p->grad);

    auto eval_loss = [&]() {
        Tape tape(false);
        return make_loss(tape).v[0];
    };

    std::mt19937_64 rng(opts.seed);
    double worst = 0.0;
    for (size_t t = 0; t < params.size(); ++t) {
        Tensor original = params[t]->value;
        int64_t n = original.numel();
        std::vector<int64_t> coords;
        if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
            std::vector<int64_t> all(static_cast<size_t>(n));
            std::iota(all.begin(), all.end(), 0);
            std::shuffle(all.begin(), all.end(), rng);
            coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
        } else {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        }
        for (int64_t i : coords) {
            Tensor plus = original.clone(), minus = original.clone();
            (*plus.mut_data())[static_cast<size_t>(i)] += opts.h;
            (*minus.mut_data())[static_cast<size_t>(i)] -= opts.h;
            params[t]->value = plus;
            double fp = eval_loss();
            params[t]->value = minus;
            double fm = eval_loss();
            params[t]->value = original;
            double numeric = (fp - fm) / (2.0 * opts.h);
            double a = analytic[t][i] * opts.fault_scale;
            double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, err);
        }
        params[t]->zero_grad();
    }
    return worst;
}

}  // namespace dpa
