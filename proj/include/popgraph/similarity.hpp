#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "popgraph/cohort.hpp"
#include "popgraph/errors.hpp"
#include "popgraph/schema.hpp"

// Pairwise patient similarities. All components are oriented as similarities
// in [0,1] (higher = more alike) so they can be averaged and fed to k-NN
// selection directly.
namespace popgraph {

struct SimilarityMatrix {
    std::size_t n = 0;
    std::vector<double> values; // n x n, row-major

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
    double& at(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

enum class SimilarityKind { Static, Timeseries };

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double similarity_from_distance(double d) { return 1.0 / (1.0 + d); }

// Static cohort similarity: mean of demographic, cognitive, and imaging
// components. Demographics are matched by feature name; cognitive features
// are the medical discrete features other than apoe4; imaging features are
// the medical continuous ones (assumed min-max normalized).
class StaticSimilarity {
public:
    StaticSimilarity(const FeatureSchema& schema, const std::vector<PatientRecord>& records)
        : records_(&records) {
        bool has_apoe4 = false, has_gender = false, has_age = false;
        for (std::size_t f = 0; f < schema.n_discrete(); ++f) {
            const auto& feat = schema.discrete_features[f];
            if (feat.name == "apoe4") {
                apoe4_ = f;
                has_apoe4 = true;
            } else if (feat.name == "gender") {
                gender_ = f;
                has_gender = true;
            } else if (feat.is_medical) {
                cognitive_.push_back(f);
            }
        }
        for (std::size_t f = 0; f < schema.n_continuous(); ++f) {
            const auto& feat = schema.continuous_features[f];
            if (feat.name == "age") {
                age_ = f;
                has_age = true;
            } else if (feat.is_medical) {
                imaging_.push_back(f);
            }
        }
        if (!has_apoe4 || !has_gender || !has_age) {
            throw SchemaError("static similarity needs apoe4, gender, and age features");
        }
        // observed index ranges of cognitive features across the cohort
        cog_lo_.assign(cognitive_.size(), 0.0);
        cog_hi_.assign(cognitive_.size(), 0.0);
        for (std::size_t k = 0; k < cognitive_.size(); ++k) {
            double lo = 1e300, hi = -1e300;
            for (const auto& r : records) {
                const double v = static_cast<double>(r.discrete[cognitive_[k]]);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            cog_lo_[k] = lo;
            cog_hi_[k] = hi;
        }
    }

    // (apoe4 match + gender match + age within 2 years) / 3
    double demographic(std::size_t i, std::size_t j) const {
        const auto& a = (*records_)[i];
        const auto& b = (*records_)[j];
        int fired = 0;
        if (a.discrete[apoe4_] == b.discrete[apoe4_]) ++fired;
        if (a.discrete[gender_] == b.discrete[gender_]) ++fired;
        if (std::abs(a.continuous[age_] - b.continuous[age_]) <= 2.0) ++fired;
        return static_cast<double>(fired) / 3.0;
    }

    // 1 - normalized L2 over range-normalized cognitive features
    double cognitive(std::size_t i, std::size_t j) const {
        if (cognitive_.empty()) return 1.0;
        const auto& a = (*records_)[i];
        const auto& b = (*records_)[j];
        double acc = 0.0;
        for (std::size_t k = 0; k < cognitive_.size(); ++k) {
            const double range = cog_hi_[k] - cog_lo_[k];
            if (range <= 0.0) continue;
            const double d = (static_cast<double>(a.discrete[cognitive_[k]]) -
                              static_cast<double>(b.discrete[cognitive_[k]])) / range;
            acc += d * d;
        }
        const double dhat = std::sqrt(acc) / std::sqrt(static_cast<double>(cognitive_.size()));
        return 1.0 - dhat;
    }

    // 2 * (1 - sig(d)) over the normalized imaging block
    double imaging(std::size_t i, std::size_t j) const {
        const auto& a = (*records_)[i];
        const auto& b = (*records_)[j];
        double acc = 0.0;
        for (std::size_t f : imaging_) {
            const double d = a.continuous[f] - b.continuous[f];
            acc += d * d;
        }
        return 2.0 * (1.0 - logistic(std::sqrt(acc)));
    }

    double overall(std::size_t i, std::size_t j) const {
        return (demographic(i, j) + cognitive(i, j) + imaging(i, j)) / 3.0;
    }

private:
    const std::vector<PatientRecord>* records_;
    std::size_t apoe4_ = 0, gender_ = 0, age_ = 0;
    std::vector<std::size_t> cognitive_;
    std::vector<double> cog_lo_, cog_hi_;
    std::vector<std::size_t> imaging_;
};

// Per-feature summary used by the time-series similarity.
struct Descriptor {
    double mean = 0.0;
    double std = 0.0; // population convention
    double min = 0.0;
    double max = 0.0;
};

// Descriptors over measured (pre-interpolation) cells. A feature with no
// measured cells falls back to the full (interpolated) series; the caller
// collects the flag.
inline Descriptor timeseries_descriptor(const PatientRecord& r, std::size_t feature,
                                        std::size_t tau, bool* used_interpolated = nullptr) {
    std::vector<double> vals;
    for (std::size_t h = 0; h < tau; ++h) {
        if (r.measured[feature * tau + h]) vals.push_back(r.timeseries[feature * tau + h]);
    }
    bool fallback = false;
    if (vals.empty()) {
        fallback = true;
        for (std::size_t h = 0; h < tau; ++h) vals.push_back(r.timeseries[feature * tau + h]);
    }
    if (used_interpolated) *used_interpolated = fallback;
    Descriptor d;
    d.min = vals[0];
    d.max = vals[0];
    for (double v : vals) {
        d.mean += v;
        d.min = std::min(d.min, v);
        d.max = std::max(d.max, v);
    }
    d.mean /= static_cast<double>(vals.size());
    if (vals.size() >= 2) {
        double acc = 0.0;
        for (double v : vals) acc += (v - d.mean) * (v - d.mean);
        d.std = std::sqrt(acc / static_cast<double>(vals.size()));
    }
    return d;
}

// Time-series similarity: z-scored descriptor distance over measurement
// features, mapped through 1/(1+d).
class TimeseriesSimilarity {
public:
    TimeseriesSimilarity(const FeatureSchema& schema, const std::vector<PatientRecord>& records) {
        const std::size_t tau = schema.series_length;
        for (std::size_t f = 0; f < schema.n_series(); ++f) {
            if (schema.timeseries_features[f].kind == SeriesKind::ContinuousMeasurement) {
                features_.push_back(f);
            }
        }
        const std::size_t S = features_.size();
        const std::size_t n = records.size();
        desc_.assign(n * S * 4, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < S; ++k) {
                bool fallback = false;
                const Descriptor d = timeseries_descriptor(records[i], features_[k], tau, &fallback);
                if (fallback) {
                    warnings.push_back("record '" + records[i].id + "': descriptor for feature '" +
                                       schema.timeseries_features[features_[k]].name +
                                       "' uses interpolated values (no measurements)");
                }
                double* dst = desc_.data() + (i * S + k) * 4;
                dst[0] = d.mean;
                dst[1] = d.std;
                dst[2] = d.min;
                dst[3] = d.max;
            }
        }
        // z-score each (feature, component) column across the cohort
        mean_.assign(S * 4, 0.0);
        inv_std_.assign(S * 4, 0.0);
        for (std::size_t c = 0; c < S * 4; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i) m += desc_[i * S * 4 + c];
            m /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = desc_[i * S * 4 + c] - m;
                var += v * v;
            }
            var /= static_cast<double>(n);
            mean_[c] = m;
            inv_std_[c] = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
        }
        n_ = n;
    }

    double overall(std::size_t i, std::size_t j) const {
        const std::size_t S = features_.size();
        if (S == 0) return 1.0;
        double total = 0.0;
        for (std::size_t k = 0; k < S; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < 4; ++c) {
                const std::size_t col = k * 4 + c;
                const double zi = (desc_[(i * S + k) * 4 + c] - mean_[col]) * inv_std_[col];
                const double zj = (desc_[(j * S + k) * 4 + c] - mean_[col]) * inv_std_[col];
                acc += (zi - zj) * (zi - zj);
            }
            total += std::sqrt(acc);
        }
        return similarity_from_distance(total / static_cast<double>(S));
    }

    std::vector<std::string> warnings;

private:
    std::vector<std::size_t> features_;
    std::vector<double> desc_;    // n x S x 4
    std::vector<double> mean_, inv_std_;
    std::size_t n_ = 0;
};

inline SimilarityMatrix build_similarity_matrix(const FeatureSchema& schema,
                                                const std::vector<PatientRecord>& records,
                                                SimilarityKind kind) {
    SimilarityMatrix sim;
    sim.n = records.size();
    sim.values.assign(sim.n * sim.n, 0.0);
    auto fill = [&](auto&& score) {
        for (std::size_t i = 0; i < sim.n; ++i) {
            sim.at(i, i) = score(i, i);
            for (std::size_t j = i + 1; j < sim.n; ++j) {
                const double s = score(i, j);
                sim.at(i, j) = s;
                sim.at(j, i) = s;
            }
        }
    };
    if (kind == SimilarityKind::Static) {
        StaticSimilarity s(schema, records);
        fill([&](std::size_t i, std::size_t j) { return s.overall(i, j); });
    } else {
        TimeseriesSimilarity s(schema, records);
        fill([&](std::size_t i, std::size_t j) { return s.overall(i, j); });
    }
    return sim;
}

inline SimilarityKind default_similarity_kind(const FeatureSchema& schema) {
    return schema.n_series() > 0 ? SimilarityKind::Timeseries : SimilarityKind::Static;
}

} // namespace popgraph
