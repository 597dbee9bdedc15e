#pragma once

// Dual-pooling attention. Two branches over an NCHW map:
//   CpA — channel attention from spatially pooled descriptors,
//   SpA — spatial attention from channel-pooled location descriptors,
// each refined by two OBR blocks (dynamic 3x3 convolution + BN + ReLU) and
// closed with a sigmoid residual gate. DpA runs both branches in parallel
// and fuses them elementwise.

#include <map>
#include <set>

#include "dpa/pooling.hpp"

namespace dpa {

namespace init {

inline Parameter conv_weight(const std::string& name, int out_ch, int in_ch, int k,
                             std::mt19937_64& rng) {
    double std = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
    return Parameter(name, randn({out_ch, in_ch, k, k}, rng, std));
}

inline Parameter linear_weight(const std::string& name, int out_dim, int in_dim,
                               std::mt19937_64& rng) {
    double std = 1.0 / std::sqrt(static_cast<double>(in_dim));
    return Parameter(name, randn({out_dim, in_dim}, rng, std));
}

inline Parameter zeros(const std::string& name, int n) {
    return Parameter(name, Tensor::zeros({n}));
}

inline Parameter ones(const std::string& name, int n) {
    return Parameter(name, Tensor::ones({n}));
}

}  // namespace init

using Buffers = std::vector<std::pair<std::string, Tensor*>>;

// Dynamic convolution unit: K candidate 3x3 kernels mixed per sample by a
// squeeze network (global average pool -> linear C_in->K -> softmax), then
// BN and ReLU. The mixing weights of each sample sum to 1.
struct ObrBlock {
    int in_channels = 0;
    int out_channels = 0;
    int kernel_count = 0;
    std::vector<Parameter> kernels;
    Parameter attn_weight, attn_bias;
    Parameter bn_gamma, bn_beta;
    Tensor bn_running_mean, bn_running_var;

    static ObrBlock make(const std::string& prefix, int in_ch, int out_ch, int k_count,
                         std::mt19937_64& rng) {
        ObrBlock b;
        b.in_channels = in_ch;
        b.out_channels = out_ch;
        b.kernel_count = k_count;
        for (int k = 0; k < k_count; ++k)
            b.kernels.push_back(
                init::conv_weight(prefix + ".kernel" + std::to_string(k), out_ch, in_ch, 3, rng));
        b.attn_weight = init::linear_weight(prefix + ".attn.w", k_count, in_ch, rng);
        b.attn_bias = init::zeros(prefix + ".attn.b", k_count);
        b.bn_gamma = init::ones(prefix + ".bn.gamma", out_ch);
        b.bn_beta = init::zeros(prefix + ".bn.beta", out_ch);
        b.bn_running_mean = Tensor::zeros({out_ch});
        b.bn_running_var = Tensor::ones({out_ch});
        return b;
    }

    // Per-sample kernel mixing weights, N x K rows summing to 1.
    Var mixing_weights(Tape& tape, const Var& x) {
        int64_t n = x.v.extent(0), c = x.v.extent(1);
        Var gap = reshape(mean(x, {2, 3}, true), {n, c});
        Var logits = add(matmul(gap, permute(tape.param(attn_weight), {1, 0})),
                         tape.param(attn_bias));
        return softmax(logits, 1);
    }

    Var forward(Tape& tape, const Var& x, bool train) {
        if (x.v.rank() != 4 || x.v.extent(1) != in_channels)
            throw ShapeMismatch("obr: expected " + std::to_string(in_channels) + " channels, got " +
                                shape_str(x.v.shape()));
        int64_t n = x.v.extent(0);
        Var w = mixing_weights(tape, x);
        std::vector<Var> kernel_vars;
        kernel_vars.reserve(kernels.size());
        for (Parameter& k : kernels) kernel_vars.push_back(tape.param(k));

        std::vector<Var> rows;
        rows.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            Var mixed = mul(reshape(slice(slice(w, 0, i, 1), 1, 0, 1), {1}), kernel_vars[0]);
            for (int k = 1; k < kernel_count; ++k) {
                Var wk = reshape(slice(slice(w, 0, i, 1), 1, k, 1), {1});
                mixed = add(mixed, mul(wk, kernel_vars[static_cast<size_t>(k)]));
            }
            rows.push_back(conv2d(slice(x, 0, i, 1), mixed, nullptr, 1, 1));
        }
        Var y = n == 1 ? rows[0] : concat(rows, 0);
        Var g = tape.param(bn_gamma);
        Var b = tape.param(bn_beta);
        return relu(batchnorm2d(tape, y, g, b, bn_running_mean, bn_running_var, train));
    }

    void collect(std::vector<Parameter*>& out) {
        for (Parameter& k : kernels) out.push_back(&k);
        out.push_back(&attn_weight);
        out.push_back(&attn_bias);
        out.push_back(&bn_gamma);
        out.push_back(&bn_beta);
    }

    void collect_buffers(Buffers& out, const std::string& prefix) {
        out.push_back({prefix + ".bn.running_mean", &bn_running_mean});
        out.push_back({prefix + ".bn.running_var", &bn_running_var});
    }
};

struct CpaModule {
    int channels = 0;
    GemParams gem;
    Parameter conv_a1_w, conv_a1_b;
    ObrBlock obr1, obr2;

    static CpaModule make(const std::string& prefix, int channels, int k_count,
                          const GemParams& gem, std::mt19937_64& rng) {
        CpaModule m;
        m.channels = channels;
        m.gem = gem;
        m.conv_a1_w = init::conv_weight(prefix + ".conv_a1.w", channels, channels, 1, rng);
        m.conv_a1_b = init::zeros(prefix + ".conv_a1.b", channels);
        m.obr1 = ObrBlock::make(prefix + ".obr1", channels, channels, k_count, rng);
        m.obr2 = ObrBlock::make(prefix + ".obr2", channels, channels, k_count, rng);
        return m;
    }

    Var forward(Tape& tape, const Var& x, bool train) {
        if (x.v.rank() != 4 || x.v.extent(1) != channels)
            throw ShapeMismatch("cpa: expected " + std::to_string(channels) + " channels");
        // a1: average descriptor broadcast onto the retained soft-pool field,
        // then a 1x1 channel mix
        Var pooled = add(soft_pool(x, PoolAxis::Spatial, SoftPoolMode::RetainedMap),
                         avg_pool(x, PoolAxis::Spatial));
        Var wb = tape.param(conv_a1_b);
        Var a1 = conv2d(pooled, tape.param(conv_a1_w), &wb, 1, 0);
        // a2: fine-detail descriptor minus background floor; zero on
        // per-channel-constant input
        Var a2 = sub(gem_pool(x, PoolAxis::Spatial, gem), min_pool(x, PoolAxis::Spatial));
        Var cstar = mul(a1, a2);
        Var h = obr2.forward(tape, obr1.forward(tape, cstar, train), train);
        return sigmoid(add(h, x));
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&conv_a1_w);
        out.push_back(&conv_a1_b);
        obr1.collect(out);
        obr2.collect(out);
    }

    void collect_buffers(Buffers& out, const std::string& prefix) {
        obr1.collect_buffers(out, prefix + ".obr1");
        obr2.collect_buffers(out, prefix + ".obr2");
    }
};

// Bound to one spatial size at construction: the projection that expands the
// concatenated location descriptors back to C depends on H*W.
struct SpaModule {
    int channels = 0;
    int bound_h = 0, bound_w = 0;
    GemParams gem;
    Parameter conv_b1_w, conv_b1_b;    // HW -> HW over location descriptors
    Parameter expand_w, expand_b;      // 2HW -> C
    ObrBlock obr1, obr2;

    static SpaModule make(const std::string& prefix, int channels, int h, int w, int k_count,
                          const GemParams& gem, std::mt19937_64& rng) {
        SpaModule m;
        m.channels = channels;
        m.bound_h = h;
        m.bound_w = w;
        m.gem = gem;
        int hw = h * w;
        m.conv_b1_w = init::conv_weight(prefix + ".conv_b1.w", hw, hw, 1, rng);
        m.conv_b1_b = init::zeros(prefix + ".conv_b1.b", hw);
        m.expand_w = init::conv_weight(prefix + ".expand.w", channels, 2 * hw, 1, rng);
        m.expand_b = init::zeros(prefix + ".expand.b", channels);
        m.obr1 = ObrBlock::make(prefix + ".obr1", channels, channels, k_count, rng);
        m.obr2 = ObrBlock::make(prefix + ".obr2", channels, channels, k_count, rng);
        return m;
    }

    Var forward(Tape& tape, const Var& x, bool train) {
        if (x.v.rank() != 4 || x.v.extent(1) != channels)
            throw ShapeMismatch("spa: expected " + std::to_string(channels) + " channels");
        if (x.v.extent(2) != bound_h || x.v.extent(3) != bound_w)
            throw SpatialSizeMismatch("spa built for " + std::to_string(bound_h) + "x" +
                                      std::to_string(bound_w) + ", got " +
                                      std::to_string(x.v.extent(2)) + "x" +
                                      std::to_string(x.v.extent(3)));
        Var pooled = add(avg_pool(x, PoolAxis::Channel),
                         soft_pool(x, PoolAxis::Channel, SoftPoolMode::Scalar));
        Var b1b = tape.param(conv_b1_b);
        Var b1 = conv2d(pooled, tape.param(conv_b1_w), &b1b, 1, 0);
        Var b2 = sub(gem_pool(x, PoolAxis::Channel, gem), min_pool(x, PoolAxis::Channel));
        Var sstar = concat({b1, b2}, 1);  // N x 2HW x 1 x 1
        Var eb = tape.param(expand_b);
        Var e = conv2d(sstar, tape.param(expand_w), &eb, 1, 0);  // N x C x 1 x 1
        Var h = obr2.forward(tape, obr1.forward(tape, e, train), train);
        return sigmoid(add(h, x));  // broadcast over H x W
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&conv_b1_w);
        out.push_back(&conv_b1_b);
        out.push_back(&expand_w);
        out.push_back(&expand_b);
        obr1.collect(out);
        obr2.collect(out);
    }

    void collect_buffers(Buffers& out, const std::string& prefix) {
        obr1.collect_buffers(out, prefix + ".obr1");
        obr2.collect_buffers(out, prefix + ".obr2");
    }
};

enum class Fusion { Sum, Mean };

inline Var fuse(const Var& a, const Var& b, Fusion fusion) {
    Var s = add(a, b);
    return fusion == Fusion::Mean ? mul_scalar(s, 0.5) : s;
}

struct DpaModule {
    CpaModule cpa;
    SpaModule spa;
    Fusion fusion = Fusion::Mean;

    static DpaModule make(const std::string& prefix, int channels, int h, int w, int k_count,
                          const GemParams& gem, Fusion fusion, std::mt19937_64& rng) {
        DpaModule m;
        m.cpa = CpaModule::make(prefix + ".cpa", channels, k_count, gem, rng);
        m.spa = SpaModule::make(prefix + ".spa", channels, h, w, k_count, gem, rng);
        m.fusion = fusion;
        return m;
    }

    Var forward(Tape& tape, const Var& x, bool train) {
        return fuse(cpa.forward(tape, x, train), spa.forward(tape, x, train), fusion);
    }

    void collect(std::vector<Parameter*>& out) {
        cpa.collect(out);
        spa.collect(out);
    }

    void collect_buffers(Buffers& out, const std::string& prefix) {
        cpa.collect_buffers(out, prefix + ".cpa");
        spa.collect_buffers(out, prefix + ".spa");
    }
};

}  // namespace dpa
