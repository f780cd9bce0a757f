#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "popgraph/cohort.hpp"
#include "popgraph/errors.hpp"
#include "popgraph/rng.hpp"
#include "popgraph/schema.hpp"

// Deterministic synthetic cohorts with recoverable latent cluster structure:
// the stand-in for restricted clinical sources. Two shapes are provided, one
// static (discrete + continuous features, 3 classes) and one time-series
// (measurements + binary treatments over 24 hours, binary label).
namespace popgraph::synthetic {

enum class Preset { Static, Timeseries };

inline Preset preset_from_string(const std::string& s) {
    if (s == "static") return Preset::Static;
    if (s == "timeseries") return Preset::Timeseries;
    throw ConfigError("unknown preset '" + s + "' (expected static|timeseries)");
}

struct Knobs {
    Preset preset = Preset::Static;
    // static preset shape
    std::size_t n_cognitive = 4;
    std::size_t cognitive_vocab = 12;
    std::size_t n_imaging = 6;
    // timeseries preset shape
    std::size_t n_measurements = 6;
    std::size_t n_treatments = 2;
    std::size_t series_length = 24;
};

inline FeatureSchema make_schema(const Knobs& knobs) {
    FeatureSchema s;
    if (knobs.preset == Preset::Static) {
        s.discrete_features.push_back({"apoe4", 3, true, 0});
        s.discrete_features.push_back({"gender", 2, false, 0});
        for (std::size_t f = 0; f < knobs.n_cognitive; ++f) {
            const int margin = std::max(1, static_cast<int>(
                std::lround(0.05 * static_cast<double>(knobs.cognitive_vocab))));
            s.discrete_features.push_back({"cog" + std::to_string(f), knobs.cognitive_vocab,
                                           true, margin});
        }
        s.continuous_features.push_back({"age", false});
        for (std::size_t f = 0; f < knobs.n_imaging; ++f) {
            s.continuous_features.push_back({"img" + std::to_string(f), true});
        }
        s.series_length = 1;
        s.num_classes = 3;
        s.task_name = "diagnosis";
    } else {
        for (std::size_t f = 0; f < knobs.n_measurements; ++f) {
            s.timeseries_features.push_back({"meas" + std::to_string(f),
                                             SeriesKind::ContinuousMeasurement});
        }
        for (std::size_t f = 0; f < knobs.n_treatments; ++f) {
            s.timeseries_features.push_back({"treat" + std::to_string(f),
                                             SeriesKind::BinaryTreatment});
        }
        s.series_length = knobs.series_length;
        s.num_classes = 2;
        s.task_name = "mortality";
    }
    s.validate();
    return s;
}

namespace detail {

// 0.7 mass on the cluster mode, the rest uniform over the other categories.
inline int draw_cluster_categorical(Rng& rng, std::size_t vocab, std::size_t mode) {
    const double u = rng.next_double();
    if (u < 0.7 || vocab == 1) return static_cast<int>(mode);
    const std::size_t others = vocab - 1;
    std::size_t pick = static_cast<std::size_t>((u - 0.7) / 0.3 * static_cast<double>(others));
    if (pick >= others) pick = others - 1;
    return static_cast<int>(pick < mode ? pick : pick + 1);
}

struct Range {
    double lo, hi;
    double spread() const { return hi - lo; }
    double cluster_mean(std::size_t z, std::size_t n_classes) const {
        return lo + (static_cast<double>(z) + 0.5) / static_cast<double>(n_classes) * spread();
    }
};

inline Range continuous_range(const FeatureSchema& s, std::size_t f) {
    return s.continuous_features[f].name == "age" ? Range{55.0, 85.0} : Range{0.0, 10.0};
}

} // namespace detail

inline Cohort synthesize_cohort(std::uint64_t seed, std::size_t n, const Knobs& knobs) {
    if (n < 20) throw ConfigError("synthetic cohort needs N >= 20");
    Cohort cohort;
    cohort.schema = make_schema(knobs);
    const FeatureSchema& s = cohort.schema;
    cohort.provenance = "synthetic(seed=" + std::to_string(seed) + ",n=" + std::to_string(n) +
                        ",preset=" + (knobs.preset == Preset::Static ? "static" : "timeseries") + ")";
    const std::size_t L = s.num_classes;
    const std::size_t tau = s.series_length;

    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, fnv1a("patient"), i));
        PatientRecord r;
        r.id = "p" + std::to_string(i);
        const std::size_t z = rng.next_below(L);

        for (std::size_t f = 0; f < s.n_discrete(); ++f) {
            const std::size_t vocab = s.discrete_features[f].vocab_size;
            const std::size_t mode = (z + f) % vocab;
            r.discrete.push_back(detail::draw_cluster_categorical(rng, vocab, mode));
        }
        for (std::size_t f = 0; f < s.n_continuous(); ++f) {
            const auto range = detail::continuous_range(s, f);
            r.continuous.push_back(rng.next_gaussian(range.cluster_mean(z, L),
                                                     0.15 * range.spread()));
        }

        r.timeseries.assign(s.series_cells(), 0.0);
        r.measured.assign(s.series_cells(), false);
        for (std::size_t f = 0; f < s.n_series(); ++f) {
            const bool treatment = s.timeseries_features[f].kind == SeriesKind::BinaryTreatment;
            // cluster-dependent baseline + linear trend + AR(1) noise
            double baseline, slope, ar_sigma;
            if (treatment) {
                baseline = (z == f % L) ? 0.8 : -0.8;
                slope = 0.0;
                ar_sigma = 0.6;
            } else {
                baseline = static_cast<double>(f) +
                           2.0 * (static_cast<double>(z) + 0.5);
                slope = 0.05 * (static_cast<double>(f % 3) - 1.0);
                ar_sigma = 0.5;
            }
            double ar = 0.0;
            for (std::size_t h = 0; h < tau; ++h) {
                ar = 0.8 * ar + rng.next_gaussian(0.0, ar_sigma);
                const double latent = baseline + slope * static_cast<double>(h) + ar;
                r.timeseries[f * tau + h] = treatment ? (latent > 0.0 ? 1.0 : 0.0) : latent;
            }
            for (std::size_t h = 0; h < tau; ++h) {
                const bool m = rng.next_bernoulli(0.7);
                r.measured[f * tau + h] = m;
                if (!m) r.timeseries[f * tau + h] = kMissing;
            }
        }

        int label = static_cast<int>(z);
        if (rng.next_double() < 0.1) {
            // flip uniformly to one of the other classes
            const std::size_t other = rng.next_below(L - 1);
            label = static_cast<int>(other < z ? other : other + 1);
        }
        r.label = label;
        cohort.records.push_back(std::move(r));
    }
    return cohort;
}

} // namespace popgraph::synthetic
