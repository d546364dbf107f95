// Independent brute-force reference implementations used to freeze expected
// values. These deliberately re-derive results with naive loops and must not
// share code with the library paths they check.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "octpipe/image.hpp"
#include "octpipe/rng.hpp"
#include "octpipe/volume.hpp"

namespace oracle {

using oct::BasicImage;

inline BasicImage<float> random_image(int h, int w, oct::Rng& rng) {
    BasicImage<float> img(h, w);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
    return img;
}

// --- spatial averaging: direct double loop -------------------------------
template <typename S>
BasicImage<S> spatial_average_naive(const BasicImage<S>& b, bool include_center) {
    BasicImage<S> out(b.height, b.width);
    for (int h = 0; h < b.height; ++h)
        for (int w = 0; w < b.width; ++w) {
            double acc = 0;
            int count = 0;
            for (int dh = -1; dh <= 1; ++dh)
                for (int dw = -1; dw <= 1; ++dw) {
                    if (!include_center && dh == 0 && dw == 0) continue;
                    int hh = h + dh, ww = w + dw;
                    hh = hh < 0 ? 0 : (hh >= b.height ? b.height - 1 : hh);
                    ww = ww < 0 ? 0 : (ww >= b.width ? b.width - 1 : ww);
                    acc += b.at(hh, ww);
                    ++count;
                }
            out.at(h, w) = static_cast<S>(acc / count);
        }
    return out;
}

// --- compensation: per-column direct summation ---------------------------
template <typename S>
BasicImage<S> compensate_naive(const BasicImage<S>& b, double n) {
    BasicImage<S> out(b.height, b.width);
    for (int w = 0; w < b.width; ++w)
        for (int h = 0; h < b.height; ++h) {
            double denom = 0;
            for (int k = h; k < b.height; ++k)
                denom += std::pow(static_cast<double>(b.at(k, w)), n);
            denom *= 2.0;
            if (denom < 1e-12) denom = 1e-12;
            double v = std::pow(static_cast<double>(b.at(h, w)), n) / denom;
            out.at(h, w) = static_cast<S>(std::min(1.0, std::max(0.0, v)));
        }
    return out;
}

// --- CLAHE: naive reference with the same definition ---------------------
// 256 bins, clip as a multiple of tile_pixels/256, one-pass uniform excess
// redistribution, mid-cdf transfer, bilinear blending between tile centres.
template <typename S>
BasicImage<S> clahe_naive(const BasicImage<S>& img, double clip, int tr, int tc) {
    const int H = img.height, W = img.width;
    tr = std::min(tr, H);
    tc = std::min(tc, W);
    const int bins = 256;

    auto bin_of = [&](double x) {
        int b = static_cast<int>(x * bins);
        return b < 0 ? 0 : (b > bins - 1 ? bins - 1 : b);
    };
    auto span = [](int idx, int n, int t) {
        int b = static_cast<int>(static_cast<long long>(idx) * n / t);
        int e = static_cast<int>(static_cast<long long>(idx + 1) * n / t);
        if (e < b + 1) e = b + 1;
        return std::pair<int, int>{b, e};
    };

    std::vector<std::vector<double>> maps(tr * tc);
    std::vector<double> centers_r(tr), centers_c(tc);
    for (int i = 0; i < tr; ++i) {
        auto [r0, r1] = span(i, H, tr);
        centers_r[i] = 0.5 * (r0 + r1 - 1);
        for (int j = 0; j < tc; ++j) {
            auto [c0, c1] = span(j, W, tc);
            centers_c[j] = 0.5 * (c0 + c1 - 1);
            std::vector<double> hist(bins, 0.0);
            const double npix = static_cast<double>(r1 - r0) * (c1 - c0);
            for (int h = r0; h < r1; ++h)
                for (int w = c0; w < c1; ++w) hist[bin_of(img.at(h, w))] += 1;
            const double limit = clip * npix / bins;
            double excess = 0;
            for (auto& x : hist)
                if (x > limit) {
                    excess += x - limit;
                    x = limit;
                }
            for (auto& x : hist) x += excess / bins;
            std::vector<double> tf(bins);
            double cum = 0;
            for (int b = 0; b < bins; ++b) {
                tf[b] = (cum + 0.5 * hist[b]) / npix;
                cum += hist[b];
            }
            maps[i * tc + j] = std::move(tf);
        }
    }

    BasicImage<S> out(H, W);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            const int b = bin_of(img.at(h, w));
            // locate bracketing tile centres
            int i0 = 0;
            while (i0 + 1 < tr && centers_r[i0 + 1] <= h) ++i0;
            int i1 = std::min(i0 + 1, tr - 1);
            int j0 = 0;
            while (j0 + 1 < tc && centers_c[j0 + 1] <= w) ++j0;
            int j1 = std::min(j0 + 1, tc - 1);
            double fy = 0, fx = 0;
            if (h <= centers_r[0]) {
                i0 = i1 = 0;
            } else if (h >= centers_r[tr - 1]) {
                i0 = i1 = tr - 1;
            } else {
                fy = (h - centers_r[i0]) / (centers_r[i1] - centers_r[i0]);
            }
            if (w <= centers_c[0]) {
                j0 = j1 = 0;
            } else if (w >= centers_c[tc - 1]) {
                j0 = j1 = tc - 1;
            } else {
                fx = (w - centers_c[j0]) / (centers_c[j1] - centers_c[j0]);
            }
            const double v = (1 - fy) * ((1 - fx) * maps[i0 * tc + j0][b] +
                                         fx * maps[i0 * tc + j1][b]) +
                             fy * ((1 - fx) * maps[i1 * tc + j0][b] +
                                   fx * maps[i1 * tc + j1][b]);
            out.at(h, w) = static_cast<S>(std::min(1.0, std::max(0.0, v)));
        }
    return out;
}

// Plain global histogram equalisation with the same binning and mid-cdf
// mapping (the clip-free single-tile limit of CLAHE).
template <typename S>
BasicImage<S> global_he_naive(const BasicImage<S>& img) {
    const int bins = 256;
    std::vector<double> hist(bins, 0.0);
    for (const auto p : img.pixels) {
        int b = static_cast<int>(static_cast<double>(p) * bins);
        b = b < 0 ? 0 : (b > bins - 1 ? bins - 1 : b);
        hist[b] += 1;
    }
    const double n = static_cast<double>(img.pixels.size());
    std::vector<double> tf(bins);
    double cum = 0;
    for (int b = 0; b < bins; ++b) {
        tf[b] = (cum + 0.5 * hist[b]) / n;
        cum += hist[b];
    }
    BasicImage<S> out(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        int b = static_cast<int>(static_cast<double>(img.pixels[i]) * bins);
        b = b < 0 ? 0 : (b > bins - 1 ? bins - 1 : b);
        out.pixels[i] = static_cast<S>(tf[b]);
    }
    return out;
}

// --- image statistics over [0,255] ---------------------------------------
struct NaiveStats {
    double mx, my, vx, vy, cov;
};

template <typename S>
NaiveStats stats_naive(const BasicImage<S>& x, const BasicImage<S>& y) {
    const double n = static_cast<double>(x.pixels.size());
    NaiveStats s{0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        s.mx += 255.0 * x.pixels[i];
        s.my += 255.0 * y.pixels[i];
    }
    s.mx /= n;
    s.my /= n;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        const double dx = 255.0 * x.pixels[i] - s.mx;
        const double dy = 255.0 * y.pixels[i] - s.my;
        s.vx += dx * dx;
        s.vy += dy * dy;
        s.cov += dx * dy;
    }
    s.vx /= n;
    s.vy /= n;
    s.cov /= n;
    return s;
}

template <typename S>
double uiqi_naive(const BasicImage<S>& x, const BasicImage<S>& y) {
    const NaiveStats s = stats_naive(x, y);
    return (s.cov / (std::sqrt(s.vx) * std::sqrt(s.vy))) *
           (2 * s.mx * s.my / (s.mx * s.mx + s.my * s.my)) *
           (2 * std::sqrt(s.vx) * std::sqrt(s.vy) / (s.vx + s.vy));
}

template <typename S>
double ssim_naive(const BasicImage<S>& x, const BasicImage<S>& y) {
    const NaiveStats s = stats_naive(x, y);
    const double c1 = 6.50, c2 = 58.52;
    return (2 * s.mx * s.my + c1) * (2 * s.cov + c2) /
           ((s.mx * s.mx + s.my * s.my + c1) * (s.vx + s.vy + c2));
}

// --- trilinear / nearest resize references -------------------------------
inline oct::OctVolume resize_volume_naive(const oct::OctVolume& v, int th, int tw, int td) {
    oct::OctVolume out(th, tw, td,
                       {v.spacing.axial_um * v.height / static_cast<float>(th),
                        v.spacing.lateral_um * v.width / static_cast<float>(tw),
                        v.spacing.bscan_um * v.depth / static_cast<float>(td)});
    auto sample = [&](double hh, double ww, double dd) {
        auto tap = [](double c, int n, int& lo, int& hi, double& f) {
            double fl = std::floor(c);
            lo = static_cast<int>(fl);
            f = c - fl;
            if (lo < 0) {
                lo = 0;
                f = 0;
            }
            hi = lo + 1;
            if (hi > n - 1) {
                hi = n - 1;
                if (lo > hi) lo = hi;
                f = 0;
            }
        };
        int h0, h1, w0, w1, d0, d1;
        double fh, fw, fd;
        tap(hh, v.height, h0, h1, fh);
        tap(ww, v.width, w0, w1, fw);
        tap(dd, v.depth, d0, d1, fd);
        double acc = 0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c) {
                    const double wt = (a ? fh : 1 - fh) * (b ? fw : 1 - fw) * (c ? fd : 1 - fd);
                    acc += wt * v.at(a ? h1 : h0, b ? w1 : w0, c ? d1 : d0);
                }
        return acc;
    };
    for (int d = 0; d < td; ++d)
        for (int h = 0; h < th; ++h)
            for (int w = 0; w < tw; ++w)
                out.at(h, w, d) = static_cast<float>(std::clamp(
                    sample((h + 0.5) * v.height / th - 0.5, (w + 0.5) * v.width / tw - 0.5,
                           (d + 0.5) * v.depth / td - 0.5),
                    0.0, 1.0));
    return out;
}

inline oct::LabelVolume resize_labels_naive(const oct::LabelVolume& l, int th, int tw, int td) {
    oct::LabelVolume out(th, tw, td, l.spacing);
    auto near = [](int t, int src, int dst) {
        int s = static_cast<int>(std::floor((t + 0.5) * static_cast<double>(src) / dst));
        return std::clamp(s, 0, src - 1);
    };
    for (int d = 0; d < td; ++d)
        for (int h = 0; h < th; ++h)
            for (int w = 0; w < tw; ++w)
                out.at(h, w, d) = l.at(near(h, l.height, th), near(w, l.width, tw),
                                       near(d, l.depth, td));
    return out;
}

// --- paired t statistic (textbook formula) -------------------------------
inline double ttest_t_naive(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0;
    for (double x : d) mean += x;
    mean /= n;
    double s2 = 0;
    for (double x : d) s2 += (x - mean) * (x - mean);
    s2 /= (n - 1);
    return mean / std::sqrt(s2 / n);
}

// --- ICC(2,1) from the explicit ANOVA table ------------------------------
inline double icc_naive(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double k = 2;
    double grand = 0;
    for (std::size_t i = 0; i < a.size(); ++i) grand += a[i] + b[i];
    grand /= (n * k);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double ssr = 0, ssc = 0, sse = 0;
    ssc = n * ((ma - grand) * (ma - grand) + (mb - grand) * (mb - grand));
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double rm = (a[i] + b[i]) / 2;
        ssr += k * (rm - grand) * (rm - grand);
        const double ea = a[i] - rm - ma + grand;
        const double eb = b[i] - rm - mb + grand;
        sse += ea * ea + eb * eb;
    }
    const double msr = ssr / (n - 1);
    const double msc = ssc / (k - 1);
    const double mse = sse / ((n - 1) * (k - 1));
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n);
}

}  // namespace oracle
