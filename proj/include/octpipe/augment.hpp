#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "octpipe/rng.hpp"
#include "octpipe/volume.hpp"

namespace oct {

// One augmentation draw is applied identically to every B-scan of a volume:
// geometric parts to both intensities and labels (nearest-neighbour), the
// intensity parts to the volume only.
struct AugmentSpec {
    double flip_prob = 0.5;
    double rotate_deg = 5.0;    // uniform in [-rotate_deg, +rotate_deg]
    double gamma_min = 0.9;     // intensity curve range
    double gamma_max = 1.1;
    double noise_sigma = 0.0;   // additive speckle, one field shared by all B-scans
    int occlusion_count = 0;    // random zeroed patches
    int occlusion_size = 4;
};

struct AugmentDraw {
    bool flip = false;
    double angle_deg = 0.0;
    double gamma = 1.0;
    std::uint64_t noise_seed = 0;
    std::vector<std::pair<int, int>> occlusions;  // top-left corners (h, w)
};

inline AugmentDraw draw_augment(const AugmentSpec& spec, std::uint64_t draw_seed, int height,
                                int width) {
    Rng rng(draw_seed);
    Rng r = rng.derive("augment-draw");
    AugmentDraw d;
    d.flip = r.uniform() < spec.flip_prob;
    d.angle_deg = spec.rotate_deg > 0 ? r.uniform(-spec.rotate_deg, spec.rotate_deg) : 0.0;
    d.gamma = spec.gamma_max > spec.gamma_min ? r.uniform(spec.gamma_min, spec.gamma_max)
                                              : spec.gamma_min;
    d.noise_seed = r.next_u64();
    for (int i = 0; i < spec.occlusion_count; ++i) {
        const int h = static_cast<int>(r.uniform_int(std::max(1, height - spec.occlusion_size)));
        const int w = static_cast<int>(r.uniform_int(std::max(1, width - spec.occlusion_size)));
        d.occlusions.push_back({h, w});
    }
    return d;
}

namespace detail {

// In-plane rotation about the image centre, destination-to-source mapping.
// Bilinear for intensities, nearest for labels; coordinates clamp to edges.
template <typename GetF>
inline double rotate_sample_bilinear(GetF&& get, int H, int W, double sh, double sw) {
    const double chf = std::clamp(sh, 0.0, static_cast<double>(H - 1));
    const double cwf = std::clamp(sw, 0.0, static_cast<double>(W - 1));
    const int h0 = static_cast<int>(std::floor(chf));
    const int w0 = static_cast<int>(std::floor(cwf));
    const int h1 = std::min(h0 + 1, H - 1);
    const int w1 = std::min(w0 + 1, W - 1);
    const double fh = chf - h0, fw = cwf - w0;
    return (1 - fh) * ((1 - fw) * get(h0, w0) + fw * get(h0, w1)) +
           fh * ((1 - fw) * get(h1, w0) + fw * get(h1, w1));
}

inline void source_coords(int h, int w, double ch, double cw, double cos_t, double sin_t,
                          double& sh, double& sw) {
    const double dh = h - ch, dw = w - cw;
    sh = ch + cos_t * dh - sin_t * dw;
    sw = cw + sin_t * dh + cos_t * dw;
}

}  // namespace detail

inline std::pair<OctVolume, std::optional<LabelVolume>> apply_augment(
    const OctVolume& v, const LabelVolume* l, const AugmentSpec& spec, const AugmentDraw& d) {
    if (l && !(l->height == v.height && l->width == v.width && l->depth == v.depth))
        throw shape_error("volume/label dims differ");
    const int H = v.height, W = v.width, D = v.depth;
    OctVolume out = v;
    std::optional<LabelVolume> lout;
    if (l) lout = *l;

    if (d.flip) {
        for (int dd = 0; dd < D; ++dd)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W / 2; ++w) {
                    std::swap(out.at(h, w, dd), out.at(h, W - 1 - w, dd));
                    if (lout) std::swap(lout->at(h, w, dd), lout->at(h, W - 1 - w, dd));
                }
    }

    if (d.angle_deg != 0.0) {
        const double t = d.angle_deg * M_PI / 180.0;
        const double cos_t = std::cos(t), sin_t = std::sin(t);
        const double ch = 0.5 * (H - 1), cw = 0.5 * (W - 1);
        OctVolume rot = out;
        std::optional<LabelVolume> lrot = lout;
        for (int dd = 0; dd < D; ++dd) {
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double sh, sw;
                    detail::source_coords(h, w, ch, cw, cos_t, sin_t, sh, sw);
                    rot.at(h, w, dd) = static_cast<float>(std::clamp(
                        detail::rotate_sample_bilinear(
                            [&](int a, int b) {
                                return static_cast<double>(out.at(a, b, dd));
                            },
                            H, W, sh, sw),
                        0.0, 1.0));
                    if (lrot) {
                        const int nh = std::clamp(static_cast<int>(std::lround(sh)), 0, H - 1);
                        const int nw = std::clamp(static_cast<int>(std::lround(sw)), 0, W - 1);
                        lrot->at(h, w, dd) = lout->at(nh, nw, dd);
                    }
                }
        }
        out = std::move(rot);
        lout = std::move(lrot);
    }

    if (d.gamma != 1.0) {
        for (auto& x : out.voxels)
            x = static_cast<float>(std::pow(static_cast<double>(x), d.gamma));
    }

    if (spec.noise_sigma > 0) {
        // One 2D field reused for every B-scan, per the same-transform rule.
        Rng nrng(d.noise_seed);
        std::vector<float> field(static_cast<std::size_t>(H) * W);
        for (auto& f : field)
            f = static_cast<float>(spec.noise_sigma * nrng.normal());
        for (int dd = 0; dd < D; ++dd)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    float& x = out.at(h, w, dd);
                    x = std::clamp(x + field[static_cast<std::size_t>(h) * W + w], 0.0f, 1.0f);
                }
    }

    for (const auto& [oh, ow] : d.occlusions) {
        for (int dd = 0; dd < D; ++dd)
            for (int h = oh; h < std::min(H, oh + spec.occlusion_size); ++h)
                for (int w = ow; w < std::min(W, ow + spec.occlusion_size); ++w)
                    out.at(h, w, dd) = 0.0f;
    }

    return {std::move(out), std::move(lout)};
}

inline std::pair<OctVolume, std::optional<LabelVolume>> augment(const OctVolume& v,
                                                                const LabelVolume* l,
                                                                const AugmentSpec& spec,
                                                                std::uint64_t draw_seed) {
    return apply_augment(v, l, spec, draw_augment(spec, draw_seed, v.height, v.width));
}

}  // namespace oct
