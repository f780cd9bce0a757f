#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "popgraph/errors.hpp"
#include "popgraph/schema.hpp"

// Patient records, file ingestion, and the interpolation/normalization
// preprocessing the model expects.
namespace popgraph {

// Unmeasured time-series cells carry this sentinel between load and
// interpolation.
inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct PatientRecord {
    std::string id;
    std::vector<int> discrete;        // D vocabulary indices
    std::vector<double> continuous;   // C floats
    std::vector<double> timeseries;   // S x tau, row-major
    std::vector<bool> measured;       // S x tau, true where a real measurement exists
    std::optional<int> label;

    double series_at(std::size_t feature, std::size_t hour, std::size_t tau) const {
        return timeseries[feature * tau + hour];
    }
    bool measured_at(std::size_t feature, std::size_t hour, std::size_t tau) const {
        return measured[feature * tau + hour];
    }
};

struct Cohort {
    FeatureSchema schema;
    std::vector<PatientRecord> records;
    std::string provenance;

    std::size_t size() const { return records.size(); }

    const PatientRecord& by_id(const std::string& id) const {
        for (const auto& r : records) {
            if (r.id == id) return r;
        }
        throw IndexError("no record with id '" + id + "'");
    }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (records[i].id == id) return i;
        }
        throw IndexError("no record with id '" + id + "'");
    }
};

namespace detail {

inline void validate_record(const PatientRecord& r, const FeatureSchema& s) {
    for (std::size_t f = 0; f < s.n_discrete(); ++f) {
        const int v = r.discrete[f];
        if (v < 0 || static_cast<std::size_t>(v) >= s.discrete_features[f].vocab_size) {
            throw ValidationError("record '" + r.id + "': discrete feature '" +
                                  s.discrete_features[f].name + "' value " + std::to_string(v) +
                                  " outside vocab [0," +
                                  std::to_string(s.discrete_features[f].vocab_size) + ")");
        }
    }
    if (r.label) {
        if (*r.label < 0 || static_cast<std::size_t>(*r.label) >= s.num_classes) {
            throw ValidationError("record '" + r.id + "': label " + std::to_string(*r.label) +
                                  " outside [0," + std::to_string(s.num_classes) + ")");
        }
    }
}

} // namespace detail

inline PatientRecord record_from_json(const nlohmann::json& j, const FeatureSchema& s) {
    PatientRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.discrete = j.value("discrete", std::vector<int>{});
        r.continuous = j.value("continuous", std::vector<double>{});
        if (r.discrete.size() != s.n_discrete()) {
            throw ParseError("record '" + r.id + "': expected " + std::to_string(s.n_discrete()) +
                             " discrete values, got " + std::to_string(r.discrete.size()));
        }
        if (r.continuous.size() != s.n_continuous()) {
            throw ParseError("record '" + r.id + "': expected " + std::to_string(s.n_continuous()) +
                             " continuous values, got " + std::to_string(r.continuous.size()));
        }
        const std::size_t S = s.n_series();
        const std::size_t tau = s.series_length;
        r.timeseries.assign(S * tau, 0.0);
        r.measured.assign(S * tau, false);
        if (S > 0) {
            const auto& ts = j.at("timeseries");
            const auto& me = j.at("measured");
            if (ts.size() != S || me.size() != S) {
                throw ParseError("record '" + r.id + "': expected " + std::to_string(S) +
                                 " timeseries rows");
            }
            for (std::size_t f = 0; f < S; ++f) {
                if (ts[f].size() != tau || me[f].size() != tau) {
                    throw ParseError("record '" + r.id + "': timeseries row " + std::to_string(f) +
                                     " must have length " + std::to_string(tau));
                }
                for (std::size_t h = 0; h < tau; ++h) {
                    const bool m = me[f][h].get<int>() != 0;
                    r.measured[f * tau + h] = m;
                    r.timeseries[f * tau + h] = m ? ts[f][h].get<double>() : kMissing;
                }
            }
        }
        if (j.contains("label") && !j.at("label").is_null()) {
            r.label = j.at("label").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("record: ") + e.what());
    }
    detail::validate_record(r, s);
    return r;
}

inline nlohmann::json record_to_json(const PatientRecord& r, const FeatureSchema& s) {
    nlohmann::json j;
    j["id"] = r.id;
    j["discrete"] = r.discrete;
    j["continuous"] = r.continuous;
    const std::size_t S = s.n_series();
    const std::size_t tau = s.series_length;
    if (S > 0) {
        nlohmann::json ts = nlohmann::json::array();
        nlohmann::json me = nlohmann::json::array();
        for (std::size_t f = 0; f < S; ++f) {
            nlohmann::json trow = nlohmann::json::array();
            nlohmann::json mrow = nlohmann::json::array();
            for (std::size_t h = 0; h < tau; ++h) {
                const bool m = r.measured[f * tau + h];
                // canonical form: unmeasured cells serialize as 0.0
                trow.push_back(m ? r.timeseries[f * tau + h] : 0.0);
                mrow.push_back(m ? 1 : 0);
            }
            ts.push_back(std::move(trow));
            me.push_back(std::move(mrow));
        }
        j["timeseries"] = std::move(ts);
        j["measured"] = std::move(me);
    }
    if (r.label) j["label"] = *r.label;
    return j;
}

inline Cohort load_cohort(const std::string& schema_path, const std::string& records_path) {
    Cohort cohort;
    cohort.schema = load_schema(schema_path);
    cohort.provenance = records_path;
    std::ifstream in(records_path);
    if (!in) throw IOError("cannot open records file '" + records_path + "'");
    std::string line;
    std::size_t line_no = 0;
    std::set<std::string> seen_ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(records_path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        try {
            cohort.records.push_back(record_from_json(j, cohort.schema));
        } catch (const ParseError& e) {
            throw ParseError(records_path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen_ids.insert(cohort.records.back().id).second) {
            throw ValidationError("duplicate record id '" + cohort.records.back().id + "'");
        }
    }
    return cohort;
}

inline void save_cohort(const Cohort& cohort, const std::string& schema_path,
                        const std::string& records_path) {
    save_schema(cohort.schema, schema_path);
    std::ofstream out(records_path);
    if (!out) throw IOError("cannot write records file '" + records_path + "'");
    for (const auto& r : cohort.records) {
        out << record_to_json(r, cohort.schema).dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

struct InterpolationReport {
    std::vector<std::string> warnings;
};

// Linear interpolation of unmeasured interior cells, constant extension at the
// edges, for one measurement series in place. Measured cells are untouched.
inline void interpolate_series(double* values, const std::vector<char>& measured, std::size_t tau) {
    std::vector<std::size_t> anchors;
    for (std::size_t h = 0; h < tau; ++h) {
        if (measured[h]) anchors.push_back(h);
    }
    if (anchors.empty()) return; // caller handles the all-missing case
    for (std::size_t h = 0; h < anchors.front(); ++h) values[h] = values[anchors.front()];
    for (std::size_t h = anchors.back() + 1; h < tau; ++h) values[h] = values[anchors.back()];
    for (std::size_t a = 0; a + 1 < anchors.size(); ++a) {
        const std::size_t l = anchors[a], r = anchors[a + 1];
        for (std::size_t h = l + 1; h < r; ++h) {
            const double t = static_cast<double>(h - l) / static_cast<double>(r - l);
            values[h] = values[l] + t * (values[r] - values[l]);
        }
    }
}

// Cohort-wide mean of each measurement feature over measured cells, used to
// fill series with no measurements at all.
inline std::vector<double> measurement_means(const Cohort& cohort) {
    const std::size_t S = cohort.schema.n_series();
    const std::size_t tau = cohort.schema.series_length;
    std::vector<double> sum(S, 0.0);
    std::vector<std::size_t> count(S, 0);
    for (const auto& r : cohort.records) {
        for (std::size_t f = 0; f < S; ++f) {
            for (std::size_t h = 0; h < tau; ++h) {
                if (r.measured[f * tau + h]) {
                    sum[f] += r.timeseries[f * tau + h];
                    ++count[f];
                }
            }
        }
    }
    std::vector<double> mean(S, 0.0);
    for (std::size_t f = 0; f < S; ++f) {
        if (count[f] > 0) mean[f] = sum[f] / static_cast<double>(count[f]);
    }
    return mean;
}

inline void interpolate_record(PatientRecord& r, const FeatureSchema& schema,
                               const std::vector<double>& feature_means,
                               InterpolationReport* report = nullptr) {
    const std::size_t tau = schema.series_length;
    for (std::size_t f = 0; f < schema.n_series(); ++f) {
        double* vals = r.timeseries.data() + f * tau;
        std::vector<char> m(tau);
        bool any = false;
        for (std::size_t h = 0; h < tau; ++h) {
            m[h] = r.measured[f * tau + h] ? 1 : 0;
            any = any || m[h];
        }
        if (schema.timeseries_features[f].kind == SeriesKind::BinaryTreatment) {
            // applied/not-applied is never interpolated
            for (std::size_t h = 0; h < tau; ++h) {
                if (!m[h]) vals[h] = 0.0;
            }
            continue;
        }
        if (!any) {
            for (std::size_t h = 0; h < tau; ++h) vals[h] = feature_means[f];
            if (report) {
                report->warnings.push_back("record '" + r.id + "': feature '" +
                                           schema.timeseries_features[f].name +
                                           "' has no measurements; filled with cohort mean");
            }
            continue;
        }
        interpolate_series(vals, m, tau);
    }
}

inline InterpolationReport interpolate_cohort(Cohort& cohort) {
    InterpolationReport report;
    const std::vector<double> means = measurement_means(cohort);
    for (auto& r : cohort.records) {
        interpolate_record(r, cohort.schema, means, &report);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct FeatureNorm {
    std::string name;
    double min = 0.0;
    double max = 1.0;
    bool degenerate = false;

    double spread() const { return degenerate ? 0.0 : max - min; }
};

// Min-max statistics for medical continuous features and time-series
// measurements, computed from training records only. ids_read records every
// id whose values entered the statistics, so leakage is testable.
struct NormStats {
    std::vector<std::size_t> continuous_idx;      // which continuous features are normalized
    std::vector<FeatureNorm> continuous;          // stats per entry of continuous_idx
    std::vector<std::size_t> series_idx;          // which series features are normalized
    std::vector<FeatureNorm> series;              // stats per entry of series_idx
    std::vector<std::string> ids_read;
    std::vector<std::string> warnings;
};

inline double apply_minmax(double x, const FeatureNorm& n) {
    if (n.degenerate) return 0.0;
    const double y = (x - n.min) / (n.max - n.min);
    return std::clamp(y, 0.0, 1.0);
}

// Statistics from train ids only; the transform is applied to every record
// (out-of-range values clamp into [0,1]). Time-series statistics use measured
// cells only; the transform covers interpolated cells too.
inline NormStats normalize_continuous(Cohort& cohort, const std::vector<std::string>& train_ids) {
    NormStats stats;
    const FeatureSchema& schema = cohort.schema;
    std::set<std::string> train_set(train_ids.begin(), train_ids.end());

    for (std::size_t f = 0; f < schema.n_continuous(); ++f) {
        if (schema.continuous_features[f].is_medical) stats.continuous_idx.push_back(f);
    }
    for (std::size_t f = 0; f < schema.n_series(); ++f) {
        if (schema.timeseries_features[f].kind == SeriesKind::ContinuousMeasurement) {
            stats.series_idx.push_back(f);
        }
    }

    stats.continuous.assign(stats.continuous_idx.size(), {});
    stats.series.assign(stats.series_idx.size(), {});
    for (std::size_t k = 0; k < stats.continuous_idx.size(); ++k) {
        stats.continuous[k].name = schema.continuous_features[stats.continuous_idx[k]].name;
        stats.continuous[k].min = std::numeric_limits<double>::infinity();
        stats.continuous[k].max = -std::numeric_limits<double>::infinity();
    }
    for (std::size_t k = 0; k < stats.series_idx.size(); ++k) {
        stats.series[k].name = schema.timeseries_features[stats.series_idx[k]].name;
        stats.series[k].min = std::numeric_limits<double>::infinity();
        stats.series[k].max = -std::numeric_limits<double>::infinity();
    }

    const std::size_t tau = schema.series_length;
    for (const auto& r : cohort.records) {
        if (!train_set.count(r.id)) continue;
        stats.ids_read.push_back(r.id);
        for (std::size_t k = 0; k < stats.continuous_idx.size(); ++k) {
            const double v = r.continuous[stats.continuous_idx[k]];
            stats.continuous[k].min = std::min(stats.continuous[k].min, v);
            stats.continuous[k].max = std::max(stats.continuous[k].max, v);
        }
        for (std::size_t k = 0; k < stats.series_idx.size(); ++k) {
            const std::size_t f = stats.series_idx[k];
            for (std::size_t h = 0; h < tau; ++h) {
                if (!r.measured[f * tau + h]) continue;
                const double v = r.timeseries[f * tau + h];
                stats.series[k].min = std::min(stats.series[k].min, v);
                stats.series[k].max = std::max(stats.series[k].max, v);
            }
        }
    }

    auto finalize = [&](FeatureNorm& n) {
        if (!(n.min < n.max)) {
            n.degenerate = true;
            stats.warnings.push_back("feature '" + n.name +
                                     "' has a degenerate training range; values set to 0");
        }
    };
    for (auto& n : stats.continuous) finalize(n);
    for (auto& n : stats.series) finalize(n);

    for (auto& r : cohort.records) {
        for (std::size_t k = 0; k < stats.continuous_idx.size(); ++k) {
            double& v = r.continuous[stats.continuous_idx[k]];
            v = apply_minmax(v, stats.continuous[k]);
        }
        for (std::size_t k = 0; k < stats.series_idx.size(); ++k) {
            const std::size_t f = stats.series_idx[k];
            for (std::size_t h = 0; h < tau; ++h) {
                double& v = r.timeseries[f * tau + h];
                v = apply_minmax(v, stats.series[k]);
            }
        }
    }
    return stats;
}

} // namespace popgraph
