#pragma once

#include <algorithm>
#include <cmath>

#include "octpipe/volume.hpp"

namespace oct {

namespace detail {

// Half-pixel-center source coordinate for target index t: (t + 0.5)*S/T - 0.5.
// Reduces to the identity map when S == T.
inline double src_coord(int t, int src_n, int dst_n) {
    return (static_cast<double>(t) + 0.5) * src_n / dst_n - 0.5;
}

struct LinearTap {
    int lo, hi;
    double frac;  // weight of hi
};

inline LinearTap linear_tap(int t, int src_n, int dst_n) {
    const double c = src_coord(t, src_n, dst_n);
    double fl = std::floor(c);
    int lo = static_cast<int>(fl);
    double frac = c - fl;
    if (lo < 0) {
        lo = 0;
        frac = 0.0;
    }
    int hi = lo + 1;
    if (hi > src_n - 1) {
        hi = src_n - 1;
        if (lo > hi) lo = hi;
        frac = 0.0;
    }
    return {lo, hi, frac};
}

inline int nearest_tap(int t, int src_n, int dst_n) {
    // Centre-of-bin nearest neighbour; identity when sizes match.
    const int s = static_cast<int>(std::floor((static_cast<double>(t) + 0.5) * src_n / dst_n));
    return std::clamp(s, 0, src_n - 1);
}

}  // namespace detail

// Trilinear resampling of intensities. Spacing is rescaled by the dimension
// ratios so the physical extent of the volume is preserved.
inline OctVolume resize_volume(const OctVolume& v, int th, int tw, int td) {
    if (th < 1 || tw < 1 || td < 1) throw shape_error("resize target dims must be >= 1");
    VoxelSpacing sp{
        v.spacing.axial_um * static_cast<float>(v.height) / static_cast<float>(th),
        v.spacing.lateral_um * static_cast<float>(v.width) / static_cast<float>(tw),
        v.spacing.bscan_um * static_cast<float>(v.depth) / static_cast<float>(td),
    };
    OctVolume out(th, tw, td, sp);
    for (int d = 0; d < td; ++d) {
        const auto tz = detail::linear_tap(d, v.depth, td);
        for (int h = 0; h < th; ++h) {
            const auto ty = detail::linear_tap(h, v.height, th);
            for (int w = 0; w < tw; ++w) {
                const auto tx = detail::linear_tap(w, v.width, tw);
                double acc = 0.0;
                acc += (1 - tz.frac) * (1 - ty.frac) * (1 - tx.frac) * v.at(ty.lo, tx.lo, tz.lo);
                acc += (1 - tz.frac) * (1 - ty.frac) * tx.frac * v.at(ty.lo, tx.hi, tz.lo);
                acc += (1 - tz.frac) * ty.frac * (1 - tx.frac) * v.at(ty.hi, tx.lo, tz.lo);
                acc += (1 - tz.frac) * ty.frac * tx.frac * v.at(ty.hi, tx.hi, tz.lo);
                acc += tz.frac * (1 - ty.frac) * (1 - tx.frac) * v.at(ty.lo, tx.lo, tz.hi);
                acc += tz.frac * (1 - ty.frac) * tx.frac * v.at(ty.lo, tx.hi, tz.hi);
                acc += tz.frac * ty.frac * (1 - tx.frac) * v.at(ty.hi, tx.lo, tz.hi);
                acc += tz.frac * ty.frac * tx.frac * v.at(ty.hi, tx.hi, tz.hi);
                out.at(h, w, d) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

// Nearest-neighbour resampling of class maps; never invents class ids.
inline LabelVolume resize_labels(const LabelVolume& l, int th, int tw, int td) {
    if (th < 1 || tw < 1 || td < 1) throw shape_error("resize target dims must be >= 1");
    VoxelSpacing sp{
        l.spacing.axial_um * static_cast<float>(l.height) / static_cast<float>(th),
        l.spacing.lateral_um * static_cast<float>(l.width) / static_cast<float>(tw),
        l.spacing.bscan_um * static_cast<float>(l.depth) / static_cast<float>(td),
    };
    LabelVolume out(th, tw, td, sp);
    for (int d = 0; d < td; ++d) {
        const int sd = detail::nearest_tap(d, l.depth, td);
        for (int h = 0; h < th; ++h) {
            const int sh = detail::nearest_tap(h, l.height, th);
            for (int w = 0; w < tw; ++w) {
                const int sw = detail::nearest_tap(w, l.width, tw);
                out.at(h, w, d) = l.at(sh, sw, sd);
            }
        }
    }
    return out;
}

}  // namespace oct
