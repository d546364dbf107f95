#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "octpipe/stats.hpp"
#include "octpipe/volume.hpp"

namespace oct {

// Circular peripapillary scan configuration. The diameter is physical; the
// circle becomes an ellipse in voxel coordinates when the en-face spacings
// (lateral vs inter-B-scan) differ.
struct CircularScanConfig {
    double diameter_um = 3400.0;
    double center_w = 0.0;  // en-face voxel coordinates of the ONH centre
    double center_d = 0.0;
    int samples = 360;
};

// One resampled A-scan: the label column at a point of the circular scan.
struct PolarAScan {
    double angle_rad = 0.0;
    int w = 0, d = 0;  // nearest-neighbour en-face voxel
    std::vector<std::uint8_t> column;
};

inline std::vector<PolarAScan> circular_scan(const LabelVolume& l, const VoxelSpacing& spacing,
                                             const CircularScanConfig& cfg) {
    if (!spacing.valid()) throw data_error("voxel spacing components must be > 0");
    if (cfg.diameter_um <= 0) throw geometry_error("scan diameter must be > 0");
    if (cfg.samples < 1) throw geometry_error("scan needs at least one sample");
    const double radius_um = 0.5 * cfg.diameter_um;
    const double rw = radius_um / spacing.lateral_um;  // radius in w-voxels
    const double rd = radius_um / spacing.bscan_um;    // radius in d-voxels

    std::vector<PolarAScan> out;
    out.reserve(cfg.samples);
    for (int i = 0; i < cfg.samples; ++i) {
        const double theta = 2.0 * M_PI * i / cfg.samples;
        const double wf = cfg.center_w + rw * std::cos(theta);
        const double df = cfg.center_d + rd * std::sin(theta);
        const int w = static_cast<int>(std::lround(wf));
        const int d = static_cast<int>(std::lround(df));
        if (w < 0 || w >= l.width || d < 0 || d >= l.depth)
            throw geometry_error("circular scan leaves the volume at angle " +
                                 std::to_string(theta * 180.0 / M_PI) + " deg");
        PolarAScan a;
        a.angle_rad = theta;
        a.w = w;
        a.d = d;
        a.column.resize(l.height);
        for (int h = 0; h < l.height; ++h) a.column[h] = l.at(h, w, d);
        out.push_back(std::move(a));
    }
    return out;
}

struct ThicknessSample {
    double um = 0.0;
    bool missing = false;        // class absent from the column
    bool non_contiguous = false; // class present in more than one run; topmost used
};

// Thickness of the topmost contiguous run of `class_id` along an A-scan:
// (last - first + 1) * axial_um. A missing class yields 0 um with a flag.
inline ThicknessSample column_thickness(const std::vector<std::uint8_t>& column, int class_id,
                                        double axial_um) {
    ThicknessSample s;
    const int H = static_cast<int>(column.size());
    int first = -1;
    for (int h = 0; h < H; ++h) {
        if (column[h] == class_id) {
            first = h;
            break;
        }
    }
    if (first < 0) {
        s.missing = true;
        return s;
    }
    int last = first;
    while (last + 1 < H && column[last + 1] == class_id) ++last;
    for (int h = last + 1; h < H; ++h) {
        if (column[h] == class_id) {
            s.non_contiguous = true;
            break;
        }
    }
    s.um = (last - first + 1) * axial_um;
    return s;
}

enum class ThicknessKind {
    p_rnflt,  // peripapillary RNFL thickness, class 1 span
    p_gcct,   // peripapillary GCC thickness, class 2 span
};

inline int thickness_class(ThicknessKind k) {
    return k == ThicknessKind::p_rnflt ? 1 : 2;
}

inline std::string thickness_kind_name(ThicknessKind k) {
    return k == ThicknessKind::p_rnflt ? "p-RNFLT" : "p-GCCT";
}

struct ThicknessProfile {
    ThicknessKind kind = ThicknessKind::p_rnflt;
    std::vector<double> per_angle_um;  // one entry per sample, 0 when flagged
    std::vector<bool> flagged;         // missing tissue at that angle
    double global_um = 0.0;            // mean over non-flagged angles
    int valid_angles = 0;
};

inline ThicknessProfile thickness_profile(const std::vector<PolarAScan>& scan, ThicknessKind kind,
                                          double axial_um) {
    ThicknessProfile p;
    p.kind = kind;
    const int cls = thickness_class(kind);
    double acc = 0.0;
    for (const auto& a : scan) {
        const ThicknessSample s = column_thickness(a.column, cls, axial_um);
        p.per_angle_um.push_back(s.um);
        p.flagged.push_back(s.missing);
        if (!s.missing) {
            acc += s.um;
            ++p.valid_angles;
        }
    }
    p.global_um = p.valid_angles > 0 ? acc / p.valid_angles : 0.0;
    return p;
}

// Default ONH centre: centroid of the class-1 en-face footprint (columns that
// contain at least one RNFL/prelamina voxel).
inline std::pair<double, double> onh_center_from_labels(const LabelVolume& l) {
    double sw = 0.0, sd = 0.0;
    std::uint64_t count = 0;
    for (int d = 0; d < l.depth; ++d) {
        for (int w = 0; w < l.width; ++w) {
            for (int h = 0; h < l.height; ++h) {
                if (l.at(h, w, d) == 1) {
                    sw += w;
                    sd += d;
                    ++count;
                    break;
                }
            }
        }
    }
    if (count == 0) throw geometry_error("no class-1 voxels; cannot locate ONH centre");
    return {sw / count, sd / count};
}

}  // namespace oct
