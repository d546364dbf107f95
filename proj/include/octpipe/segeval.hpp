#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "octpipe/stats.hpp"
#include "octpipe/volume.hpp"

namespace oct {

// Per-tissue overlap scores between a predicted (d) and a manual (m) label
// volume. Conventions for empty classes: absent from both volumes scores
// dice = sn = 1 (and sp falls out of the formula as 1); absent from exactly
// one scores dice = sn = 0.
struct TissueScore {
    int class_id = 0;
    double dice = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline TissueScore score_tissue(const LabelVolume& d, const LabelVolume& m, int c) {
    if (!d.same_shape(m)) throw shape_error("label volumes must have identical dims");
    if (c < 0 || c >= kNumClasses) throw data_error("class id must be in 0..7");
    TissueScore s;
    s.class_id = c;
    const std::size_t n = d.labels.size();
    for (std::size_t i = 0; i < n; ++i) {
        const bool in_d = d.labels[i] == c;
        const bool in_m = m.labels[i] == c;
        s.tp += in_d && in_m;
        s.fp += in_d && !in_m;
        s.fn += !in_d && in_m;
        s.tn += !in_d && !in_m;
    }
    if (s.tp + s.fp + s.fn == 0) {
        // Class missing from both volumes.
        s.dice = 1.0;
        s.sensitivity = 1.0;
    } else {
        s.dice = 2.0 * static_cast<double>(s.tp) /
                 static_cast<double>(2 * s.tp + s.fp + s.fn);
        s.sensitivity = (s.tp + s.fn) > 0
                            ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn)
                            : 0.0;
    }
    s.specificity = (s.tn + s.fp) > 0
                        ? static_cast<double>(s.tn) / static_cast<double>(s.tn + s.fp)
                        : 1.0;
    return s;
}

// Tissues scored quantitatively: RNFL+prelamina, GCC, other retinal layers,
// RPE, choroid. LC, noise and vitreous are excluded.
inline constexpr std::array<int, 5> kScoredTissues = {1, 2, 3, 4, 5};

struct SegmentationScores {
    std::vector<TissueScore> tissues;  // one per entry of kScoredTissues
    double mean_dice = 0.0;
    double mean_sensitivity = 0.0;
    double mean_specificity = 0.0;
};

inline SegmentationScores score_all(const LabelVolume& d, const LabelVolume& m) {
    SegmentationScores out;
    for (const int c : kScoredTissues) {
        out.tissues.push_back(score_tissue(d, m, c));
        out.mean_dice += out.tissues.back().dice;
        out.mean_sensitivity += out.tissues.back().sensitivity;
        out.mean_specificity += out.tissues.back().specificity;
    }
    const double k = static_cast<double>(kScoredTissues.size());
    out.mean_dice /= k;
    out.mean_sensitivity /= k;
    out.mean_specificity /= k;
    return out;
}

}  // namespace oct
