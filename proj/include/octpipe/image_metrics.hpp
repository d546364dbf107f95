#pragma once

#include <cmath>

#include "octpipe/errors.hpp"
#include "octpipe/image.hpp"

namespace oct {

// Paired image statistics on [0,255]-rescaled intensities. Population
// (divide-by-N) convention throughout; two-pass so that identical inputs
// produce bitwise-identical variance and cross-covariance.
struct PairStats {
    double mean_x = 0, mean_y = 0;
    double var_x = 0, var_y = 0;
    double stddev_x = 0, stddev_y = 0;
    double cross_cov = 0;
};

template <typename S>
PairStats compute_pair_stats(const BasicImage<S>& x, const BasicImage<S>& y) {
    if (!x.same_shape(y)) throw shape_error("images must have identical dims");
    const std::size_t n = x.size();
    double sx = 0, sy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += 255.0 * static_cast<double>(x.pixels[i]);
        sy += 255.0 * static_cast<double>(y.pixels[i]);
    }
    PairStats st;
    st.mean_x = sx / static_cast<double>(n);
    st.mean_y = sy / static_cast<double>(n);
    double vxx = 0, vyy = 0, vxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = 255.0 * static_cast<double>(x.pixels[i]) - st.mean_x;
        const double dy = 255.0 * static_cast<double>(y.pixels[i]) - st.mean_y;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
    }
    st.var_x = vxx / static_cast<double>(n);
    st.var_y = vyy / static_cast<double>(n);
    st.cross_cov = vxy / static_cast<double>(n);
    st.stddev_x = std::sqrt(st.var_x);
    st.stddev_y = std::sqrt(st.var_y);
    return st;
}

// Universal image quality index: correlation x luminance distortion x
// contrast distortion, each factor in [-1, 1].
//
// The sigma product in L_C and D_C is evaluated as sqrt(var_x * var_y), which
// makes uiqi(x, x) return exactly 1.0 in IEEE arithmetic. If exactly one
// image is constant the correlation factor is 0 by convention (its numerator,
// the cross-covariance, is identically zero).
template <typename S>
double uiqi(const BasicImage<S>& x, const BasicImage<S>& y) {
    const PairStats st = compute_pair_stats(x, y);
    const double mu2 = st.mean_x * st.mean_x + st.mean_y * st.mean_y;
    const double var_sum = st.var_x + st.var_y;
    if (var_sum == 0.0) throw stat_error("uiqi undefined: both images constant");
    if (mu2 == 0.0) throw stat_error("uiqi undefined: both means zero");
    const double sig_prod = std::sqrt(st.var_x * st.var_y);
    const double lc = sig_prod > 0.0 ? st.cross_cov / sig_prod : 0.0;
    const double dl = 2.0 * st.mean_x * st.mean_y / mu2;
    const double dc = 2.0 * sig_prod / var_sum;
    return lc * dl * dc;
}

inline constexpr double kSsimC1 = 6.50;   // (0.01 * 255)^2
inline constexpr double kSsimC2 = 58.52;  // (0.03 * 255)^2

// Single-formula SSIM over whole-image statistics with the stabilising
// constants above, on [0,255]-rescaled intensities.
template <typename S>
double ssim(const BasicImage<S>& x, const BasicImage<S>& y) {
    const PairStats st = compute_pair_stats(x, y);
    const double num = (2.0 * st.mean_x * st.mean_y + kSsimC1) * (2.0 * st.cross_cov + kSsimC2);
    const double den = (st.mean_x * st.mean_x + st.mean_y * st.mean_y + kSsimC1) *
                       (st.var_x + st.var_y + kSsimC2);
    return num / den;
}

// Mean SSIM over an 11x11 sliding window (stride 1, fully inside the image).
// Falls back to the global statistic when the image is smaller than a window.
template <typename S>
double ssim_windowed(const BasicImage<S>& x, const BasicImage<S>& y, int window = 11) {
    if (!x.same_shape(y)) throw shape_error("images must have identical dims");
    if (x.height < window || x.width < window) return ssim(x, y);
    double acc = 0.0;
    std::size_t count = 0;
    for (int h = 0; h + window <= x.height; ++h) {
        for (int w = 0; w + window <= x.width; ++w) {
            BasicImage<S> wx(window, window), wy(window, window);
            for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j) {
                    wx.at(i, j) = x.at(h + i, w + j);
                    wy.at(i, j) = y.at(h + i, w + j);
                }
            acc += ssim(wx, wy);
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

}  // namespace oct
