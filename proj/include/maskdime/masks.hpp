#pragma once

// Top-k masks over [1,H,W] maps, dilation, and the baseline mask builders.
// Selection order is by value, descending; equal values go to the earlier
// raster index, so a smaller k always selects a prefix of a larger one.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime {

struct DualMask {
    Tensor mz;
    Tensor mx;
    double k = 0;
    double rho = 0;
};

/// round(frac * n), half-up, at least 1.
inline int mask_count(double frac, std::size_t n) {
    const int c = static_cast<int>(std::floor(frac * static_cast<double>(n) + 0.5));
    return std::clamp(c, 1, static_cast<int>(n));
}

/// Indices sorted by value descending, ties by index ascending.
inline std::vector<int> rank_desc(const Tensor& g) {
    std::vector<int> idx(g.numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return g[static_cast<std::size_t>(a)] > g[static_cast<std::size_t>(b)]; });
    return idx;
}

inline Tensor mask_from_prefix(const Tensor& like, const std::vector<int>& order, int count) {
    Tensor m = Tensor::zeros_like(like);
    for (int i = 0; i < count; ++i) m[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1.0f;
    return m;
}

/// Binary mask of the top round(k*HW) entries.
inline Tensor top_k_mask(const Tensor& g, double k) {
    if (!(k > 0 && k <= 1)) throw ArgumentError("k must lie in (0, 1]");
    return mask_from_prefix(g, rank_desc(g), mask_count(k, g.numel()));
}

/// OR over a kernel x kernel window centred on each pixel, zero outside the image.
inline Tensor dilate(const Tensor& mask, int kernel = 5) {
    if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("dilation kernel must be odd and positive");
    if (mask.rank() < 2) throw ShapeError("dilate needs a 2-D map");
    const int h = mask.dim(-2), w = mask.dim(-1), r = kernel / 2;
    const std::size_t planes = mask.numel() / (static_cast<std::size_t>(h) * w);
    // Separable: rows, then columns.
    Tensor rows = Tensor::zeros_like(mask), out = Tensor::zeros_like(mask);
    for (std::size_t p = 0; p < planes; ++p) {
        const std::size_t base = p * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool any = false;
                for (int dx = std::max(0, x - r); dx <= std::min(w - 1, x + r) && !any; ++dx)
                    any = mask[base + y * w + dx] != 0.0f;
                rows[base + y * w + x] = any ? 1.0f : 0.0f;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool any = false;
                for (int dy = std::max(0, y - r); dy <= std::min(h - 1, y + r) && !any; ++dy)
                    any = rows[base + dy * w + x] != 0.0f;
                out[base + y * w + x] = any ? 1.0f : 0.0f;
            }
    }
    return out;
}

struct DualMaskRaw {
    Tensor mz, mx;
};

/// Pre-dilation selections: mz = top round(k HW), mx = top round(rho k HW).
inline DualMaskRaw select_dual(const Tensor& g, double k, double rho) {
    if (!(k > 0 && k <= 1)) throw ArgumentError("k must lie in (0, 1]");
    if (!(rho > 0 && rho <= 1)) throw ArgumentError("rho must lie in (0, 1]");
    const std::vector<int> order = rank_desc(g);
    const int nz = mask_count(k, g.numel());
    const int nx = std::min(nz, mask_count(rho * k, g.numel()));
    return {mask_from_prefix(g, order, nz), mask_from_prefix(g, order, nx)};
}

inline DualMask build_dual_mask(const Tensor& g, double k, double rho, int kernel = 5) {
    DualMaskRaw raw = select_dual(g, k, rho);
    return {dilate(raw.mz, kernel), dilate(raw.mx, kernel), k, rho};
}

/// Channel-averaged |a - b| as a [1,H,W] map.
inline Tensor abs_diff_map(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "abs_diff_map");
    const int h = a.dim(-2), w = a.dim(-1);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const std::size_t c = a.numel() / hw;
    Tensor out({1, h, w});
    for (std::size_t i = 0; i < hw; ++i) {
        double acc = 0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += std::fabs(static_cast<double>(a[ch * hw + i]) - b[ch * hw + i]);
        out[i] = static_cast<float>(acc / static_cast<double>(c));
    }
    return out;
}

inline Tensor pixel_diff_mask(const Tensor& x0_hat, const Tensor& x, double k, int kernel = 5) {
    return dilate(top_k_mask(abs_diff_map(x0_hat, x), k), kernel);
}

inline Tensor fixed_mask(const Tensor& g_tau, double k, int kernel = 5) {
    return build_dual_mask(g_tau, k, 1.0, kernel).mz;
}

inline double popcount(const Tensor& m) {
    double n = 0;
    for (float v : m.vec()) n += v != 0.0f;
    return n;
}

inline bool is_subset(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "is_subset");
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != 0.0f && b[i] == 0.0f) return false;
    return true;
}

inline double iou(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "iou");
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const bool x = a[i] != 0.0f, y = b[i] != 0.0f;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : inter / uni;
}

}  // namespace maskdime
