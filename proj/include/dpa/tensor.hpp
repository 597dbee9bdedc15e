#pragma once

// Dense rank<=4 tensor in canonical NCHW layout, 64-bit row-major storage.
// Values are immutable once published; copies share the underlying buffer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpa {

struct DpaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : DpaError { using DpaError::DpaError; };
struct NonFiniteValue : DpaError { using DpaError::DpaError; };
struct NotScalarLoss : DpaError { using DpaError::DpaError; };
struct InvalidAlpha : DpaError { using DpaError::DpaError; };
struct SpatialSizeMismatch : DpaError { using DpaError::DpaError; };
struct ConfigInvalid : DpaError { using DpaError::DpaError; };
struct LabelOutOfRange : DpaError { using DpaError::DpaError; };
struct DegenerateBatch : DpaError { using DpaError::DpaError; };
struct IoError : DpaError { using DpaError::DpaError; };
struct ParseError : DpaError { using DpaError::DpaError; };
struct MissingImage : DpaError { using DpaError::DpaError; };
struct NonDenseIdentityIds : DpaError { using DpaError::DpaError; };
struct InsufficientIdentities : DpaError { using DpaError::DpaError; };
struct DimensionMismatch : DpaError { using DpaError::DpaError; };
struct NoValidMatch : DpaError { using DpaError::DpaError; };
struct CheckpointMismatch : DpaError { using DpaError::DpaError; };

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

class Tensor {
  public:
    Tensor() : shape_{1}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(check_shape(shape_), 0.0)) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
        if (static_cast<int64_t>(data.size()) != check_shape(shape_))
            throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<double>>(std::move(data));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.mut_data()->begin(), t.mut_data()->end(), v);
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor from(std::initializer_list<double> vals) {
        return Tensor({static_cast<int64_t>(vals.size())}, std::vector<double>(vals));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }
    int64_t extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }

    const double* data() const { return data_->data(); }
    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    double at(std::initializer_list<int64_t> idx) const {
        int64_t off = 0, stride = 1;
        auto it = idx.end();
        auto se = shape_.end();
        while (it != idx.begin()) {
            --it; --se;
            off += *it * stride;
            stride *= *se;
        }
        return (*data_)[static_cast<size_t>(off)];
    }

    Tensor clone() const {
        return Tensor(shape_, *data_);
    }

    Tensor with_shape(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeMismatch("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Mutable access for builders; never call on a published tensor.
    std::vector<double>* mut_data() { return data_.get(); }

  private:
    static int64_t check_shape(const Shape& s) {
        if (s.empty() || s.size() > 4)
            throw ShapeMismatch("tensor rank must be 1..4, got " + shape_str(s));
        for (int64_t e : s)
            if (e < 1) throw ShapeMismatch("tensor extents must be >= 1: " + shape_str(s));
        return shape_numel(s);
    }

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

inline void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite())
        throw NonFiniteValue(std::string("non-finite value produced by ") + op);
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy trailing-dim rules, ranks <= 4)

namespace detail {

inline std::array<int64_t, 4> pad4(const Shape& s) {
    std::array<int64_t, 4> r{1, 1, 1, 1};
    size_t off = 4 - s.size();
    for (size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
    return r;
}

// Row-major strides of a rank-4 padded shape, zeroed on broadcast dims.
inline std::array<int64_t, 4> bcast_strides(const std::array<int64_t, 4>& own,
                                            const std::array<int64_t, 4>& out) {
    std::array<int64_t, 4> st{};
    int64_t acc = 1;
    for (int d = 3; d >= 0; --d) {
        st[d] = acc;
        acc *= own[d];
    }
    for (int d = 0; d < 4; ++d)
        if (own[d] == 1 && out[d] != 1) st[d] = 0;
    return st;
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op = "broadcast") {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeMismatch(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                " and " + shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

template <class F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F f, const char* op) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        double* o = out.mut_data()->data();
        const double* pa = a.data();
        const double* pb = b.data();
        int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) o[i] = f(pa[i], pb[i]);
        return out;
    }
    Shape os = broadcast_shape(a.shape(), b.shape(), op);
    Tensor out(os);
    auto o4 = detail::pad4(os);
    auto sa = detail::bcast_strides(detail::pad4(a.shape()), o4);
    auto sb = detail::bcast_strides(detail::pad4(b.shape()), o4);
    double* o = out.mut_data()->data();
    const double* pa = a.data();
    const double* pb = b.data();
    int64_t w = 0;
    for (int64_t i0 = 0; i0 < o4[0]; ++i0)
        for (int64_t i1 = 0; i1 < o4[1]; ++i1)
            for (int64_t i2 = 0; i2 < o4[2]; ++i2) {
                int64_t oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                int64_t ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for (int64_t i3 = 0; i3 < o4[3]; ++i3)
                    o[w++] = f(pa[oa + i3 * sa[3]], pb[ob + i3 * sb[3]]);
            }
    return out;
}

// Sum g down to `target` shape (inverse of broadcasting).
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out(target);
    auto g4 = detail::pad4(g.shape());
    auto so = detail::bcast_strides(detail::pad4(target), g4);
    double* o = out.mut_data()->data();
    const double* p = g.data();
    int64_t r = 0;
    for (int64_t i0 = 0; i0 < g4[0]; ++i0)
        for (int64_t i1 = 0; i1 < g4[1]; ++i1)
            for (int64_t i2 = 0; i2 < g4[2]; ++i2) {
                int64_t oo = i0 * so[0] + i1 * so[1] + i2 * so[2];
                for (int64_t i3 = 0; i3 < g4[3]; ++i3)
                    o[oo + i3 * so[3]] += p[r++];
            }
    return out;
}

template <class F>
Tensor unary_map(const Tensor& a, F f) {
    Tensor out(a.shape());
    double* o = out.mut_data()->data();
    const double* p = a.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = f(p[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Reductions over an axis set

namespace detail {

inline std::array<bool, 4> axis_mask4(const Shape& in, const std::vector<int>& axes) {
    std::array<bool, 4> m{false, false, false, false};
    size_t off = 4 - in.size();
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(in.size()))
            throw ShapeMismatch("reduction axis " + std::to_string(a) + " out of range for " +
                                shape_str(in));
        m[off + static_cast<size_t>(a)] = true;
    }
    return m;
}

}  // namespace detail

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes, bool keepdims) {
    auto mask = detail::axis_mask4(in, axes);
    size_t off = 4 - in.size();
    Shape out;
    for (size_t i = 0; i < in.size(); ++i) {
        if (mask[off + i]) {
            if (keepdims) out.push_back(1);
        } else {
            out.push_back(in[i]);
        }
    }
    if (out.empty()) out.push_back(1);
    return out;
}

struct ReduceResult {
    Tensor out;
    std::vector<int64_t> arg;  // flat input index picked per output cell (max/min only)
};

enum class ReduceKind { Sum, Mean, Max, Min };

inline ReduceResult reduce(const Tensor& x, const std::vector<int>& axes, bool keepdims,
                           ReduceKind kind) {
    auto mask = detail::axis_mask4(x.shape(), axes);
    auto x4 = detail::pad4(x.shape());
    std::array<int64_t, 4> keep = x4;
    for (int d = 0; d < 4; ++d)
        if (mask[d]) keep[d] = 1;
    auto so = detail::bcast_strides(keep, x4);

    Shape oshape = reduced_shape(x.shape(), axes, keepdims);
    int64_t onum = shape_numel(oshape);
    bool track = kind == ReduceKind::Max || kind == ReduceKind::Min;

    std::vector<double> acc(static_cast<size_t>(onum),
                            kind == ReduceKind::Max   ? -std::numeric_limits<double>::infinity()
                            : kind == ReduceKind::Min ? std::numeric_limits<double>::infinity()
                                                      : 0.0);
    std::vector<int64_t> arg(track ? static_cast<size_t>(onum) : 0, -1);

    const double* p = x.data();
    int64_t r = 0;
    for (int64_t i0 = 0; i0 < x4[0]; ++i0)
        for (int64_t i1 = 0; i1 < x4[1]; ++i1)
            for (int64_t i2 = 0; i2 < x4[2]; ++i2) {
                int64_t oo = i0 * so[0] + i1 * so[1] + i2 * so[2];
                for (int64_t i3 = 0; i3 < x4[3]; ++i3, ++r) {
                    int64_t o = oo + i3 * so[3];
                    double v = p[r];
                    switch (kind) {
                        case ReduceKind::Sum:
                        case ReduceKind::Mean:
                            acc[static_cast<size_t>(o)] += v;
                            break;
                        case ReduceKind::Max:
                            if (v > acc[static_cast<size_t>(o)]) {
                                acc[static_cast<size_t>(o)] = v;
                                arg[static_cast<size_t>(o)] = r;
                            }
                            break;
                        case ReduceKind::Min:
                            if (v < acc[static_cast<size_t>(o)]) {
                                acc[static_cast<size_t>(o)] = v;
                                arg[static_cast<size_t>(o)] = r;
                            }
                            break;
                    }
                }
            }
    if (kind == ReduceKind::Mean) {
        double inv = static_cast<double>(onum) / static_cast<double>(x.numel());
        for (double& v : acc) v *= inv;
    }
    return {Tensor(oshape, std::move(acc)), std::move(arg)};
}

// ---------------------------------------------------------------------------
// Layout ops

inline Tensor permute_tensor(const Tensor& x, const std::vector<int>& dims) {
    int r = x.rank();
    if (static_cast<int>(dims.size()) != r)
        throw ShapeMismatch("permute dims rank mismatch for " + shape_str(x.shape()));
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int d : dims) {
        if (d < 0 || d >= r || seen[static_cast<size_t>(d)])
            throw ShapeMismatch("invalid permutation");
        seen[static_cast<size_t>(d)] = true;
    }
    Shape os(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = x.extent(dims[static_cast<size_t>(i)]);

    std::vector<int64_t> in_strides(static_cast<size_t>(r));
    int64_t acc = 1;
    for (int d = r - 1; d >= 0; --d) {
        in_strides[static_cast<size_t>(d)] = acc;
        acc *= x.extent(d);
    }
    std::vector<int64_t> src_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i)
        src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];

    Tensor out(os);
    double* o = out.mut_data()->data();
    const double* p = x.data();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t n = x.numel();
    for (int64_t w = 0; w < n; ++w) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * src_stride[static_cast<size_t>(i)];
        o[w] = p[src];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return out;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& dims) {
    std::vector<int> inv(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) inv[static_cast<size_t>(dims[i])] = static_cast<int>(i);
    return inv;
}

inline Tensor concat_tensors(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
    int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ShapeMismatch("concat axis out of range");
    Shape os = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != r) throw ShapeMismatch("concat rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && t.extent(d) != os[static_cast<size_t>(d)])
                throw ShapeMismatch("concat extent mismatch on axis " + std::to_string(d));
        total += t.extent(axis);
    }
    os[static_cast<size_t>(axis)] = total;

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];

    Tensor out(os);
    double* o = out.mut_data()->data();
    int64_t row = total * inner;
    int64_t off = 0;
    for (const Tensor& t : parts) {
        const double* p = t.data();
        int64_t chunk = t.extent(axis) * inner;
        for (int64_t u = 0; u < outer; ++u)
            std::memcpy(o + u * row + off, p + u * chunk, static_cast<size_t>(chunk) * sizeof(double));
        off += chunk;
    }
    return out;
}

inline Tensor slice_tensor(const Tensor& x, int axis, int64_t start, int64_t len) {
    int r = x.rank();
    if (axis < 0 || axis >= r) throw ShapeMismatch("slice axis out of range");
    if (start < 0 || len < 1 || start + len > x.extent(axis))
        throw ShapeMismatch("slice range out of bounds");
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.extent(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.extent(d);

    Tensor out(os);
    double* o = out.mut_data()->data();
    const double* p = x.data();
    int64_t in_row = x.extent(axis) * inner;
    int64_t out_row = len * inner;
    for (int64_t u = 0; u < outer; ++u)
        std::memcpy(o + u * out_row, p + u * in_row + start * inner,
                    static_cast<size_t>(out_row) * sizeof(double));
    return out;
}

// Scatter-add `g` (shape of a slice) back into a zero tensor of `full` shape.
inline Tensor unslice_tensor(const Tensor& g, const Shape& full, int axis, int64_t start) {
    Tensor out(full);
    double* o = out.mut_data()->data();
    const double* p = g.data();
    int r = static_cast<int>(full.size());
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= full[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= full[static_cast<size_t>(d)];
    int64_t len = g.shape()[static_cast<size_t>(axis)];
    int64_t in_row = full[static_cast<size_t>(axis)] * inner;
    int64_t g_row = len * inner;
    for (int64_t u = 0; u < outer; ++u)
        std::memcpy(o + u * in_row + start * inner, p + u * g_row,
                    static_cast<size_t>(g_row) * sizeof(double));
    return out;
}

inline Tensor matmul_tensor(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw ShapeMismatch("matmul expects (N,K)x(K,M), got " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    int64_t n = a.extent(0), k = a.extent(1), m = b.extent(1);
    Tensor out({n, m});
    double* o = out.mut_data()->data();
    const double* pa = a.data();
    const double* pb = b.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t p = 0; p < k; ++p) {
            double av = pa[i * k + p];
            const double* brow = pb + p * m;
            double* orow = o + i * m;
            for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    return out;
}

// ---------------------------------------------------------------------------
// DPAT binary tensor file: magic "DPAT", u8 rank, 4x u32 extents,
// u8 dtype tag (0=f64, 1=f32), little-endian row-major payload.

inline void save_tensor(std::ostream& os, const Tensor& t, bool as_f32 = false) {
    os.write("DPAT", 4);
    uint8_t rank = static_cast<uint8_t>(t.rank());
    os.put(static_cast<char>(rank));
    for (int d = 0; d < 4; ++d) {
        uint32_t e = d < t.rank() ? static_cast<uint32_t>(t.extent(d)) : 1u;
        os.write(reinterpret_cast<const char*>(&e), 4);
    }
    os.put(as_f32 ? 1 : 0);
    if (as_f32) {
        std::vector<float> buf(static_cast<size_t>(t.numel()));
        for (int64_t i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(static_cast<size_t>(t.numel()) * sizeof(double)));
    }
    if (!os) throw IoError("failed to write tensor");
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DPAT", 4) != 0) throw ParseError("bad tensor magic");
    uint8_t rank = static_cast<uint8_t>(is.get());
    if (rank < 1 || rank > 4) throw ParseError("bad tensor rank");
    Shape shape;
    for (int d = 0; d < 4; ++d) {
        uint32_t e = 0;
        is.read(reinterpret_cast<char*>(&e), 4);
        if (d < rank) shape.push_back(static_cast<int64_t>(e));
    }
    int dtype = is.get();
    if (dtype != 0 && dtype != 1) throw ParseError("bad tensor dtype tag");
    int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<size_t>(n));
    if (dtype == 1) {
        std::vector<float> buf(static_cast<size_t>(n));
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = buf[static_cast<size_t>(i)];
    } else {
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(static_cast<size_t>(n) * sizeof(double)));
    }
    if (!is) throw ParseError("truncated tensor payload");
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor_file(const std::string& path, const Tensor& t, bool as_f32 = false) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    save_tensor(f, t, as_f32);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    return load_tensor(f);
}

// ---------------------------------------------------------------------------
// Deterministic init helpers

inline Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : *t.mut_data()) v = dist(rng);
    return t;
}

inline Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : *t.mut_data()) v = dist(rng);
    return t;
}

}  // namespace dpa
