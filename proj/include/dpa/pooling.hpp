#pragma once

// Global pooling operators over NCHW maps, each in two reduction modes:
//   Spatial — reduce H*W per channel, descriptor N x C x 1 x 1
//   Channel — reduce C per location, descriptor N x HW x 1 x 1
// (the channel mode consumes the flattened-location layout, row-major hw = h*W + w).

#include "dpa/autodiff.hpp"

namespace dpa {

enum class PoolAxis { Spatial, Channel };

enum class SoftPoolMode { Scalar, RetainedMap };

struct GemParams {
    double alpha = 3.0;
    double clamp_floor = 1e-6;
};

namespace detail {

inline void require_nchw(const Var& x, const char* op) {
    if (x.v.rank() != 4) throw ShapeMismatch(std::string(op) + " expects an NCHW tensor");
}

// N x 1 x H x W -> N x HW x 1 x 1
inline Var to_location_descriptor(const Var& d) {
    return reshape(d, {d.v.extent(0), d.v.extent(2) * d.v.extent(3), 1, 1});
}

}  // namespace detail

inline Var avg_pool(const Var& x, PoolAxis axis) {
    detail::require_nchw(x, "avg_pool");
    if (axis == PoolAxis::Spatial) return mean(x, {2, 3}, true);
    return detail::to_location_descriptor(mean(x, {1}, true));
}

// Literally -max(-x); ties send the gradient to the first row-major argmin.
inline Var min_pool(const Var& x, PoolAxis axis) {
    detail::require_nchw(x, "min_pool");
    std::vector<int> axes = axis == PoolAxis::Spatial ? std::vector<int>{2, 3} : std::vector<int>{1};
    Var r = neg(reduce_max(neg(x), axes, true));
    return axis == PoolAxis::Spatial ? r : detail::to_location_descriptor(r);
}

inline Var gem_pool(const Var& x, PoolAxis axis, const GemParams& params = {}) {
    detail::require_nchw(x, "gem_pool");
    if (!(params.alpha > 0.0) || !std::isfinite(params.alpha))
        throw InvalidAlpha("gem_pool alpha must be finite and > 0");
    std::vector<int> axes = axis == PoolAxis::Spatial ? std::vector<int>{2, 3} : std::vector<int>{1};
    Var powered = pow(clamp_min(x, params.clamp_floor), params.alpha);
    Var m = pow(mean(powered, axes, true), 1.0 / params.alpha);
    return axis == PoolAxis::Spatial ? m : detail::to_location_descriptor(m);
}

// Softmax-weighted pooling. Scalar collapses the region to its weighted mean;
// RetainedMap keeps the unsummed summand field e^x * x / sum(e^x) at every
// element of the input (its region-sum reproduces the Scalar value).
inline Var soft_pool(const Var& x, PoolAxis axis, SoftPoolMode mode = SoftPoolMode::Scalar) {
    detail::require_nchw(x, "soft_pool");
    int64_t n = x.v.extent(0), c = x.v.extent(1), h = x.v.extent(2), w = x.v.extent(3);
    if (axis == PoolAxis::Spatial) {
        Var flat = reshape(x, {n, c, h * w});
        Var weights = softmax(flat, 2);
        Var summand = mul(weights, flat);
        if (mode == SoftPoolMode::RetainedMap) return reshape(summand, {n, c, h, w});
        return reshape(sum(summand, {2}, true), {n, c, 1, 1});
    }
    Var weights = softmax(x, 1);
    Var summand = mul(weights, x);
    if (mode == SoftPoolMode::RetainedMap) return summand;
    return detail::to_location_descriptor(sum(summand, {1}, true));
}

}  // namespace dpa
