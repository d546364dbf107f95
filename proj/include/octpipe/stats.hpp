#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "octpipe/errors.hpp"

namespace oct {

namespace detail {

// Regularized incomplete beta function I_x(a, b) via the Lentz continued
// fraction, accurate to well below 1e-10 for the t-test arguments used here.
inline double betacf(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 500; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace detail

inline double betainc_reg(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * detail::betacf(a, b, x) / a;
    }
    return 1.0 - front * detail::betacf(b, a, 1.0 - x) / b;
}

// Two-sided p-value for a t statistic with nu degrees of freedom.
inline double t_two_sided_p(double t, double nu) {
    if (!std::isfinite(t)) return 0.0;
    if (t == 0.0) return 1.0;
    const double x = nu / (nu + t * t);
    return betainc_reg(0.5 * nu, 0.5, x);
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    // Set when the paired differences have zero variance. With a zero mean
    // difference this reports (0, 1); with a nonzero one, (+/-inf, 0).
    bool degenerate_variance = false;
};

// Two-sided paired t-test with n-1 degrees of freedom.
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw shape_error("paired samples must have equal length");
    const std::size_t n = a.size();
    if (n < 2) throw stat_error("paired t-test needs n >= 2");
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(n - 1);  // sample variance
    TTestResult r;
    if (var == 0.0) {
        r.degenerate_variance = true;
        if (mean == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = mean > 0 ? std::numeric_limits<double>::infinity()
                           : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    r.p = t_two_sided_p(r.t, static_cast<double>(n - 1));
    return r;
}

// Intraclass correlation coefficient ICC(2,1): two-way random effects,
// absolute agreement, single measurement (Shrout & Fleiss), for two raters.
//
//   ICC = (MSR - MSE) / (MSR + (k-1) MSE + k (MSC - MSE) / n)
inline double icc(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw shape_error("icc samples must have equal length");
    const std::size_t n = a.size();
    if (n < 2) throw stat_error("icc needs n >= 2");
    constexpr double k = 2.0;
    const double nn = static_cast<double>(n);

    double grand = 0.0;
    for (std::size_t i = 0; i < n; ++i) grand += a[i] + b[i];
    grand /= (k * nn);

    double mean_a = 0.0, mean_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_a += a[i];
        mean_b += b[i];
    }
    mean_a /= nn;
    mean_b /= nn;

    double ss_rows = 0.0, ss_cols = 0.0, ss_err = 0.0;
    ss_cols = nn * ((mean_a - grand) * (mean_a - grand) + (mean_b - grand) * (mean_b - grand));
    for (std::size_t i = 0; i < n; ++i) {
        const double row_mean = 0.5 * (a[i] + b[i]);
        ss_rows += k * (row_mean - grand) * (row_mean - grand);
        const double ea = a[i] - row_mean - mean_a + grand;
        const double eb = b[i] - row_mean - mean_b + grand;
        ss_err += ea * ea + eb * eb;
    }

    const double msr = ss_rows / (nn - 1.0);
    const double msc = ss_cols / (k - 1.0);
    const double mse = ss_err / ((nn - 1.0) * (k - 1.0));

    const double denom = msr + (k - 1.0) * mse + k * (msc - mse) / nn;
    if (denom == 0.0) throw stat_error("icc undefined: no variance in the data");
    return (msr - mse) / denom;
}

}  // namespace oct
