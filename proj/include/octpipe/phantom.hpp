#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "octpipe/rng.hpp"
#include "octpipe/volume.hpp"

namespace oct {

// Device-style profile: emulates scanner-specific contrast curves, noise
// grain and depth attenuation so multi-device behaviour can be probed on
// synthetic data.
enum class DeviceStyle { A, B, C };

inline DeviceStyle device_style_from_string(const std::string& s) {
    if (s == "A" || s == "a") return DeviceStyle::A;
    if (s == "B" || s == "b") return DeviceStyle::B;
    if (s == "C" || s == "c") return DeviceStyle::C;
    throw data_error("unknown device style: " + s);
}

inline std::string device_style_name(DeviceStyle s) {
    switch (s) {
        case DeviceStyle::A: return "A";
        case DeviceStyle::B: return "B";
        default: return "C";
    }
}

struct DeviceProfile {
    double gamma;        // intensity contrast curve
    double attenuation;  // exponential decay per voxel below the ILM
    double noise_mult;   // multiplier on the speckle sigma
    int grain;           // speckle grain block size in voxels
};

inline DeviceProfile device_profile(DeviceStyle s) {
    switch (s) {
        case DeviceStyle::A: return {1.00, 0.000, 1.00, 1};
        case DeviceStyle::B: return {1.45, 0.030, 1.40, 2};
        default: return {0.70, 0.015, 0.85, 1};
    }
}

// Layered ONH phantom. Classes are stacked bands along the axial direction:
// vitreous on top, then RNFL+prelamina, GCC, other retinal, RPE, choroid;
// below that an LC band inside the cup radius and noise elsewhere. All layer
// boundaries share one smooth vertical offset field (undulation + cup), so
// every column carries the exact per-class spans drawn for the volume.
struct PhantomSpec {
    int height = 32, width = 32, depth = 16;
    VoxelSpacing spacing{4.0f, 150.0f, 150.0f};

    int vitreous_min = 6, vitreous_max = 8;
    // thickness ranges (voxels) for classes 1..5
    std::array<std::pair<int, int>, 5> tissue_range = {
        std::pair<int, int>{4, 6},  // RNFL + prelamina
        std::pair<int, int>{3, 5},  // GCC
        std::pair<int, int>{3, 5},  // other retinal
        std::pair<int, int>{2, 3},  // RPE
        std::pair<int, int>{4, 6},  // choroid
    };
    int lc_thickness = 3;

    double boundary_amplitude = 1.0;  // voxels; 0 = flat boundaries
    double cup_depth = 3.0;           // voxels the cup pushes boundaries down
    double cup_radius_frac = 0.22;    // of min(width, depth)

    double noise_sigma = 0.05;  // multiplicative speckle
    DeviceStyle style = DeviceStyle::A;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 8 || width < 2 || depth < 1) throw data_error("phantom dims too small");
        int max_total = vitreous_max + lc_thickness;
        for (const auto& [lo, hi] : tissue_range) {
            if (lo < 1 || hi < lo) throw data_error("invalid tissue thickness range");
            max_total += hi;
        }
        max_total += static_cast<int>(std::ceil(boundary_amplitude + cup_depth)) + 1;
        if (max_total > height)
            throw data_error("infeasible thickness spec: layers exceed volume height");
        if (noise_sigma < 0) throw data_error("noise sigma must be >= 0");
    }
};

// Per-class base reflectivity before the device profile is applied.
inline constexpr std::array<double, kNumClasses> kClassReflectivity = {
    0.06,  // vitreous
    0.62,  // RNFL + prelamina
    0.38,  // GCC
    0.50,  // other retinal
    0.80,  // RPE
    0.33,  // choroid
    0.46,  // LC
    0.14,  // noise floor
};

inline std::pair<OctVolume, LabelVolume> gen_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng master(spec.seed);
    Rng geom = master.derive("phantom-geometry");
    Rng speckle = master.derive("phantom-speckle");

    const int H = spec.height, W = spec.width, D = spec.depth;
    OctVolume vol(H, W, D, spec.spacing);
    LabelVolume lab(H, W, D, spec.spacing);

    // Volume-wide draws: one span per tissue.
    const int vit = spec.vitreous_min +
                    static_cast<int>(geom.uniform_int(spec.vitreous_max - spec.vitreous_min + 1));
    std::array<int, 5> spans;
    for (int i = 0; i < 5; ++i) {
        const auto [lo, hi] = spec.tissue_range[i];
        spans[i] = lo + static_cast<int>(geom.uniform_int(hi - lo + 1));
    }
    const double phase_w = geom.uniform(0, 2 * M_PI);
    const double phase_d = geom.uniform(0, 2 * M_PI);

    const double cw = 0.5 * (W - 1), cd = 0.5 * (D - 1);
    const double cup_radius = spec.cup_radius_frac * std::min(W, D);
    const DeviceProfile prof = device_profile(spec.style);

    // Grainy speckle lattice, nearest-neighbour upsampled by `grain`.
    const int g = std::max(1, prof.grain);
    const int GH = (H + g - 1) / g, GW = (W + g - 1) / g, GD = (D + g - 1) / g;
    std::vector<double> lattice;
    if (spec.noise_sigma > 0) {
        lattice.resize(static_cast<std::size_t>(GH) * GW * GD);
        for (auto& v : lattice) v = speckle.normal();
    }

    for (int d = 0; d < D; ++d) {
        for (int w = 0; w < W; ++w) {
            const double und =
                spec.boundary_amplitude *
                std::sin(2 * M_PI * w / std::max(1, W) + phase_w) *
                std::sin(2 * M_PI * d / std::max(1, D) + phase_d);
            const double rw = w - cw, rd = d - cd;
            const double r = std::sqrt(rw * rw + rd * rd);
            const double cup =
                spec.cup_depth * std::exp(-0.5 * (r * r) / (cup_radius * cup_radius + 1e-9));
            const int offset = static_cast<int>(std::lround(und + cup));
            const bool in_cup = r <= 2.0 * cup_radius;

            int h = 0;
            const int ilm = std::max(0, vit + offset);
            for (; h < std::min(ilm, H); ++h) lab.at(h, w, d) = 0;
            for (int t = 0; t < 5; ++t) {
                const int cls = t + 1;
                for (int i = 0; i < spans[t] && h < H; ++i, ++h)
                    lab.at(h, w, d) = static_cast<std::uint8_t>(cls);
            }
            if (in_cup) {
                for (int i = 0; i < spec.lc_thickness && h < H; ++i, ++h) lab.at(h, w, d) = 6;
            }
            for (; h < H; ++h) lab.at(h, w, d) = 7;

            // Intensities from labels, then profile curve + attenuation + speckle.
            const int ilm_row = std::min(ilm, H - 1);
            for (int hh = 0; hh < H; ++hh) {
                double v = kClassReflectivity[lab.at(hh, w, d)];
                v = std::pow(v, prof.gamma);
                if (hh > ilm_row && prof.attenuation > 0)
                    v *= std::exp(-prof.attenuation * (hh - ilm_row));
                if (spec.noise_sigma > 0) {
                    const double eta = lattice[(static_cast<std::size_t>(d / g) * GH + hh / g) *
                                                   GW + w / g];
                    v *= 1.0 + spec.noise_sigma * prof.noise_mult * eta;
                }
                vol.at(hh, w, d) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return {std::move(vol), std::move(lab)};
}

}  // namespace oct
