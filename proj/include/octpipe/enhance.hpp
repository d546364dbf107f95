#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "octpipe/image.hpp"
#include "octpipe/volume.hpp"

namespace oct {

enum class AveragingMode {
    exclude_center,  // mean of the 8 lateral neighbours, literal reading
    include_center,  // 3x3 box mean
};

struct EnhanceConfig {
    double contrast_exponent = 2.0;
    double clahe_clip = 2.0;
    int clahe_tile_rows = 8;
    int clahe_tile_cols = 8;
    AveragingMode averaging = AveragingMode::exclude_center;

    void validate() const {
        if (contrast_exponent < 1.0) throw data_error("contrast exponent must be >= 1");
        if (clahe_clip < 1.0) throw data_error("clahe clip limit must be >= 1");
        if (clahe_tile_rows < 1 || clahe_tile_cols < 1)
            throw data_error("clahe tile grid must be >= 1x1");
    }
};

// ---------------------------------------------------------------------------
// Spatial averaging: each pixel replaced by the mean of its 8 in-plane
// neighbours (replicate padding at the borders). include_center instead takes
// the plain 3x3 box mean.
// ---------------------------------------------------------------------------
template <typename S>
BasicImage<S> spatial_average(const BasicImage<S>& b,
                              AveragingMode mode = AveragingMode::exclude_center) {
    const int H = b.height, W = b.width;
    BasicImage<S> out(H, W);
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            double acc = 0.0;
            for (int dh = -1; dh <= 1; ++dh) {
                for (int dw = -1; dw <= 1; ++dw) {
                    if (mode == AveragingMode::exclude_center && dh == 0 && dw == 0) continue;
                    const int hh = std::clamp(h + dh, 0, H - 1);
                    const int ww = std::clamp(w + dw, 0, W - 1);
                    acc += static_cast<double>(b.at(hh, ww));
                }
            }
            const double n = (mode == AveragingMode::exclude_center) ? 8.0 : 9.0;
            out.at(h, w) = static_cast<S>(std::clamp(acc / n, 0.0, 1.0));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Depth compensation with contrast enhancement. Per A-scan (column w):
//
//   out(z) = I(z)^n / (2 * sum_{k>=z} I(k)^n)
//
// Denominators below 1e-12 are floored at 1e-12, so empty tails map to 0.
// The output never exceeds 1/2 for nonzero pixels and is clamped to [0,1].
// ---------------------------------------------------------------------------
template <typename S>
BasicImage<S> compensate(const BasicImage<S>& b, double exponent) {
    if (exponent < 1.0) throw data_error("contrast exponent must be >= 1");
    const int H = b.height, W = b.width;
    BasicImage<S> out(H, W);
    std::vector<double> powed(H);
    for (int w = 0; w < W; ++w) {
        for (int h = 0; h < H; ++h)
            powed[h] = std::pow(static_cast<double>(b.at(h, w)), exponent);
        double tail = 0.0;
        // Walk bottom-up so the tail energy is a running suffix sum.
        for (int h = H - 1; h >= 0; --h) {
            tail += powed[h];
            const double denom = std::max(2.0 * tail, 1e-12);
            out.at(h, w) = static_cast<S>(std::clamp(powed[h] / denom, 0.0, 1.0));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CLAHE. 256-bin histograms per tile, clip limit expressed as a multiple of
// the uniform bin height (tile_pixels / 256), one-pass uniform redistribution
// of the excess, mid-cdf transfer functions, bilinear blending between tile
// centres. Tile bounds partition the image evenly with remainders spread one
// row/column at a time.
// ---------------------------------------------------------------------------
namespace detail {

inline constexpr int kClaheBins = 256;

inline int clahe_bin(double x) {
    const int b = static_cast<int>(x * kClaheBins);
    return std::clamp(b, 0, kClaheBins - 1);
}

// tile index -> [begin, end) along an axis of n pixels split into t tiles
inline std::pair<int, int> tile_span(int idx, int n, int t) {
    const int begin = static_cast<int>(static_cast<long long>(idx) * n / t);
    const int end = static_cast<int>(static_cast<long long>(idx + 1) * n / t);
    return {begin, std::max(end, begin + 1)};
}

template <typename S>
std::vector<double> clahe_tile_transfer(const BasicImage<S>& img, int r0, int r1, int c0, int c1,
                                        double clip) {
    double hist[kClaheBins] = {0.0};
    const double npix = static_cast<double>(r1 - r0) * (c1 - c0);
    for (int h = r0; h < r1; ++h)
        for (int w = c0; w < c1; ++w) hist[clahe_bin(static_cast<double>(img.at(h, w)))] += 1.0;

    const double limit = clip * npix / kClaheBins;
    double excess = 0.0;
    for (double& hb : hist) {
        if (hb > limit) {
            excess += hb - limit;
            hb = limit;
        }
    }
    const double add = excess / kClaheBins;
    for (double& hb : hist) hb += add;

    // Mid-cdf transfer: bin i maps to (cum_below + h_i/2) / npix, in [0,1].
    std::vector<double> transfer(kClaheBins);
    double cum = 0.0;
    for (int i = 0; i < kClaheBins; ++i) {
        transfer[i] = (cum + 0.5 * hist[i]) / npix;
        cum += hist[i];
    }
    return transfer;
}

}  // namespace detail

template <typename S>
BasicImage<S> clahe(const BasicImage<S>& b, double clip, int tile_rows, int tile_cols) {
    if (clip < 1.0) throw data_error("clahe clip limit must be >= 1");
    if (tile_rows < 1 || tile_cols < 1) throw data_error("clahe tile grid must be >= 1x1");
    const int H = b.height, W = b.width;
    tile_rows = std::min(tile_rows, H);
    tile_cols = std::min(tile_cols, W);

    std::vector<std::vector<double>> transfer(
        static_cast<std::size_t>(tile_rows) * tile_cols);
    std::vector<double> center_r(tile_rows), center_c(tile_cols);
    for (int tr = 0; tr < tile_rows; ++tr) {
        const auto [r0, r1] = detail::tile_span(tr, H, tile_rows);
        center_r[tr] = 0.5 * (r0 + r1 - 1);
        for (int tc = 0; tc < tile_cols; ++tc) {
            const auto [c0, c1] = detail::tile_span(tc, W, tile_cols);
            if (tr == 0) center_c[tc] = 0.5 * (c0 + c1 - 1);
            transfer[static_cast<std::size_t>(tr) * tile_cols + tc] =
                detail::clahe_tile_transfer(b, r0, r1, c0, c1, clip);
        }
    }

    const auto tile_at = [&](int tr, int tc) -> const std::vector<double>& {
        return transfer[static_cast<std::size_t>(tr) * tile_cols + tc];
    };

    BasicImage<S> out(H, W);
    for (int h = 0; h < H; ++h) {
        // Neighbouring tile centres bracketing this row.
        int tr0 = 0;
        while (tr0 + 1 < tile_rows && center_r[tr0 + 1] <= h) ++tr0;
        int tr1 = std::min(tr0 + 1, tile_rows - 1);
        double fy = 0.0;
        if (h <= center_r[0]) {
            tr0 = tr1 = 0;
        } else if (h >= center_r[tile_rows - 1]) {
            tr0 = tr1 = tile_rows - 1;
        } else {
            fy = (h - center_r[tr0]) / (center_r[tr1] - center_r[tr0]);
        }
        for (int w = 0; w < W; ++w) {
            int tc0 = 0;
            while (tc0 + 1 < tile_cols && center_c[tc0 + 1] <= w) ++tc0;
            int tc1 = std::min(tc0 + 1, tile_cols - 1);
            double fx = 0.0;
            if (w <= center_c[0]) {
                tc0 = tc1 = 0;
            } else if (w >= center_c[tile_cols - 1]) {
                tc0 = tc1 = tile_cols - 1;
            } else {
                fx = (w - center_c[tc0]) / (center_c[tc1] - center_c[tc0]);
            }
            const int bin = detail::clahe_bin(static_cast<double>(b.at(h, w)));
            const double v00 = tile_at(tr0, tc0)[bin];
            const double v01 = tile_at(tr0, tc1)[bin];
            const double v10 = tile_at(tr1, tc0)[bin];
            const double v11 = tile_at(tr1, tc1)[bin];
            const double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                             fy * ((1 - fx) * v10 + fx * v11);
            out.at(h, w) = static_cast<S>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

// The full classical chain: spatial averaging -> compensation -> CLAHE.
template <typename S>
BasicImage<S> digital_enhance(const BasicImage<S>& b, const EnhanceConfig& cfg = {}) {
    cfg.validate();
    return clahe(compensate(spatial_average(b, cfg.averaging), cfg.contrast_exponent),
                 cfg.clahe_clip, cfg.clahe_tile_rows, cfg.clahe_tile_cols);
}

// Applies digital_enhance to every B-scan of a volume.
inline OctVolume enhance_volume(const OctVolume& v, const EnhanceConfig& cfg = {}) {
    OctVolume out = v;
    for (int d = 0; d < v.depth; ++d) {
        insert_bscan(out, digital_enhance(extract_bscan(v, d), cfg), d);
    }
    return out;
}

}  // namespace oct
