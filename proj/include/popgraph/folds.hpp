#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "popgraph/cohort.hpp"
#include "popgraph/errors.hpp"
#include "popgraph/rng.hpp"

// Fold construction and label subsampling, both pure functions of
// (cohort, scheme, seed).
namespace popgraph {

struct Fold {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

struct FoldPlan {
    std::vector<Fold> folds;
    std::string scheme;
};

struct KFoldScheme {
    std::size_t k = 10;
};

struct HoldoutScheme {
    std::size_t repeats = 6;
    double train_frac = 0.8;
    double val_frac = 0.1;
    double test_frac = 0.1;
};

// K near-equal chunks after a seeded shuffle; fold i tests on chunk i,
// validates on the next chunk, trains on the rest.
inline FoldPlan make_folds(const Cohort& cohort, const KFoldScheme& scheme, std::uint64_t seed) {
    const std::size_t k = scheme.k;
    const std::size_t n = cohort.size();
    if (k < 3) throw ConfigError("kfold needs K >= 3 so train folds are nonempty");
    if (n < k) throw ConfigError("kfold needs at least K records");
    std::vector<std::string> ids;
    ids.reserve(n);
    for (const auto& r : cohort.records) ids.push_back(r.id);
    Rng rng(mix_seed(seed, fnv1a("kfold")));
    rng.shuffle(ids);

    std::vector<std::vector<std::string>> chunks(k);
    const std::size_t base = n / k;
    const std::size_t extra = n % k;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t sz = base + (c < extra ? 1 : 0);
        chunks[c].assign(ids.begin() + static_cast<long>(pos), ids.begin() + static_cast<long>(pos + sz));
        pos += sz;
    }

    FoldPlan plan;
    plan.scheme = "kfold(" + std::to_string(k) + ")";
    for (std::size_t i = 0; i < k; ++i) {
        Fold fold;
        fold.test_ids = chunks[i];
        fold.val_ids = chunks[(i + 1) % k];
        for (std::size_t c = 0; c < k; ++c) {
            if (c == i || c == (i + 1) % k) continue;
            fold.train_ids.insert(fold.train_ids.end(), chunks[c].begin(), chunks[c].end());
        }
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

inline FoldPlan make_folds(const Cohort& cohort, const HoldoutScheme& scheme, std::uint64_t seed) {
    const double total = scheme.train_frac + scheme.val_frac + scheme.test_frac;
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("holdout fractions must sum to 1");
    }
    if (scheme.train_frac <= 0.0 || scheme.val_frac <= 0.0 || scheme.test_frac <= 0.0) {
        throw ConfigError("holdout fractions must be positive");
    }
    const std::size_t n = cohort.size();
    const auto n_train = static_cast<std::size_t>(std::llround(scheme.train_frac * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(scheme.val_frac * static_cast<double>(n)));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
        throw ConfigError("holdout split degenerate for N=" + std::to_string(n));
    }
    FoldPlan plan;
    plan.scheme = "holdout(" + std::to_string(scheme.repeats) + ")";
    for (std::size_t rep = 0; rep < scheme.repeats; ++rep) {
        std::vector<std::string> ids;
        ids.reserve(n);
        for (const auto& r : cohort.records) ids.push_back(r.id);
        Rng rng(mix_seed(seed, fnv1a("holdout"), rep));
        rng.shuffle(ids);
        Fold fold;
        fold.train_ids.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
        fold.val_ids.assign(ids.begin() + static_cast<long>(n_train),
                            ids.begin() + static_cast<long>(n_train + n_val));
        fold.test_ids.assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

// Stratified label subsample: ceil(ratio * |labeled train|) ids, proportional
// per class, with at least one id per class present in the train split. When
// the class count exceeds the target, the per-class minimum wins.
inline std::vector<std::string> subsample_labels(const Cohort& cohort,
                                                 const std::vector<std::string>& train_ids,
                                                 double ratio, std::uint64_t seed) {
    if (ratio <= 0.0 || ratio > 1.0) throw ConfigError("label ratio must be in (0,1]");
    std::map<int, std::vector<std::string>> by_class;
    std::size_t n_labeled = 0;
    for (const auto& id : train_ids) {
        const auto& r = cohort.by_id(id);
        if (r.label) {
            by_class[*r.label].push_back(id);
            ++n_labeled;
        }
    }
    if (n_labeled == 0) return {};
    const auto target = static_cast<std::size_t>(
        std::ceil(ratio * static_cast<double>(n_labeled) - 1e-12));

    // proportional quotas: floors first, remainders by largest fraction
    std::vector<int> classes;
    std::vector<std::size_t> quota;
    std::vector<double> frac;
    std::size_t assigned = 0;
    for (const auto& [cls, members] : by_class) {
        const double exact = static_cast<double>(target) * static_cast<double>(members.size()) /
                             static_cast<double>(n_labeled);
        classes.push_back(cls);
        quota.push_back(static_cast<std::size_t>(std::floor(exact)));
        frac.push_back(exact - std::floor(exact));
        assigned += quota.back();
    }
    std::vector<std::size_t> order(classes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (frac[a] != frac[b]) return frac[a] > frac[b];
        return classes[a] < classes[b];
    });
    for (std::size_t i = 0; assigned < target && i < order.size(); ++i) {
        ++quota[order[i]];
        ++assigned;
    }
    for (std::size_t i = 0; i < quota.size(); ++i) {
        if (quota[i] == 0) {
            quota[i] = 1;
            ++assigned;
        }
    }
    while (assigned > target) {
        // shave the largest quota while respecting the per-class minimum
        std::size_t big = 0;
        for (std::size_t i = 1; i < quota.size(); ++i) {
            if (quota[i] > quota[big]) big = i;
        }
        if (quota[big] <= 1) break;
        --quota[big];
        --assigned;
    }

    std::vector<std::string> picked;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        auto members = by_class[classes[i]];
        Rng rng(mix_seed(seed, fnv1a("subsample"), static_cast<std::uint64_t>(classes[i])));
        rng.shuffle(members);
        const std::size_t take = std::min(quota[i], members.size());
        picked.insert(picked.end(), members.begin(), members.begin() + static_cast<long>(take));
    }
    // canonical order: cohort position
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < cohort.records.size(); ++i) pos[cohort.records[i].id] = i;
    std::sort(picked.begin(), picked.end(),
              [&](const std::string& a, const std::string& b) { return pos[a] < pos[b]; });
    return picked;
}

} // namespace popgraph
