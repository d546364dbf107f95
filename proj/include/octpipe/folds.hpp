#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octpipe/errors.hpp"
#include "octpipe/rng.hpp"

namespace oct {

// Subject-level cross-validation plan: the test sets partition the subjects,
// so no subject ever appears in both sides of a fold.
struct FoldPlan {
    int num_folds = 5;
    std::vector<std::vector<std::string>> test;
    std::vector<std::vector<std::string>> train;
};

inline FoldPlan make_folds(std::vector<std::string> subjects, std::uint64_t seed,
                           int num_folds = 5) {
    if (static_cast<int>(subjects.size()) < num_folds)
        throw data_error("cross-validation needs at least " + std::to_string(num_folds) +
                         " subjects");
    Rng rng(seed);
    Rng shuffle_rng = rng.derive("folds");
    shuffle_rng.shuffle(subjects.begin(), subjects.end());

    FoldPlan plan;
    plan.num_folds = num_folds;
    plan.test.resize(num_folds);
    plan.train.resize(num_folds);
    const std::size_t n = subjects.size();
    std::size_t begin = 0;
    for (int f = 0; f < num_folds; ++f) {
        // Near-equal parts: sizes differ by at most one.
        const std::size_t size = n / num_folds + (static_cast<std::size_t>(f) < n % num_folds);
        for (std::size_t i = begin; i < begin + size; ++i) plan.test[f].push_back(subjects[i]);
        begin += size;
    }
    for (int f = 0; f < num_folds; ++f) {
        for (int g = 0; g < num_folds; ++g) {
            if (g == f) continue;
            plan.train[f].insert(plan.train[f].end(), plan.test[g].begin(), plan.test[g].end());
        }
    }
    return plan;
}

}  // namespace oct
