#pragma once

#include <cstddef>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "popgraph/errors.hpp"

// Feature schema for a cohort: which static discrete, static continuous, and
// time-series features records carry, plus task shape.
namespace popgraph {

struct DiscreteFeature {
    std::string name;
    std::size_t vocab_size = 2;
    bool is_medical = true;
    int margin = 0; // error tolerance for ordinal imputation metrics
};

struct ContinuousFeature {
    std::string name;
    bool is_medical = true;
};

enum class SeriesKind { ContinuousMeasurement, BinaryTreatment };

inline std::string to_string(SeriesKind k) {
    return k == SeriesKind::ContinuousMeasurement ? "continuous_measurement" : "binary_treatment";
}

inline SeriesKind series_kind_from_string(const std::string& s) {
    if (s == "continuous_measurement") return SeriesKind::ContinuousMeasurement;
    if (s == "binary_treatment") return SeriesKind::BinaryTreatment;
    throw ParseError("unknown timeseries kind '" + s + "'");
}

struct SeriesFeature {
    std::string name;
    SeriesKind kind = SeriesKind::ContinuousMeasurement;
};

struct FeatureSchema {
    std::vector<DiscreteFeature> discrete_features;
    std::vector<ContinuousFeature> continuous_features;
    std::vector<SeriesFeature> timeseries_features;
    std::size_t series_length = 1; // tau, hours
    std::size_t num_classes = 2;   // L
    std::string task_name;

    std::size_t n_discrete() const { return discrete_features.size(); }
    std::size_t n_continuous() const { return continuous_features.size(); }
    std::size_t n_series() const { return timeseries_features.size(); }

    std::size_t n_measurements() const {
        std::size_t c = 0;
        for (const auto& f : timeseries_features) {
            if (f.kind == SeriesKind::ContinuousMeasurement) ++c;
        }
        return c;
    }

    std::size_t series_cells() const { return n_series() * series_length; }

    void validate() const {
        std::set<std::string> names;
        auto check_name = [&](const std::string& n) {
            if (n.empty()) throw SchemaError("empty feature name");
            if (!names.insert(n).second) throw SchemaError("duplicate feature name '" + n + "'");
        };
        for (const auto& f : discrete_features) {
            check_name(f.name);
            if (f.vocab_size < 2) {
                throw SchemaError("feature '" + f.name + "': vocab_size must be >= 2");
            }
            if (f.margin < 0 || static_cast<std::size_t>(f.margin) >= f.vocab_size) {
                throw SchemaError("feature '" + f.name + "': margin must be in [0, vocab_size)");
            }
        }
        for (const auto& f : continuous_features) check_name(f.name);
        for (const auto& f : timeseries_features) check_name(f.name);
        if (series_length < 1) throw SchemaError("series_length must be >= 1");
        if (num_classes < 2) throw SchemaError("num_classes must be >= 2");
    }
};

inline nlohmann::json schema_to_json(const FeatureSchema& s) {
    nlohmann::json j;
    j["discrete_features"] = nlohmann::json::array();
    for (const auto& f : s.discrete_features) {
        j["discrete_features"].push_back({{"name", f.name},
                                          {"vocab_size", f.vocab_size},
                                          {"is_medical", f.is_medical},
                                          {"margin", f.margin}});
    }
    j["continuous_features"] = nlohmann::json::array();
    for (const auto& f : s.continuous_features) {
        j["continuous_features"].push_back({{"name", f.name}, {"is_medical", f.is_medical}});
    }
    j["timeseries_features"] = nlohmann::json::array();
    for (const auto& f : s.timeseries_features) {
        j["timeseries_features"].push_back({{"name", f.name}, {"kind", to_string(f.kind)}});
    }
    j["series_length"] = s.series_length;
    j["num_classes"] = s.num_classes;
    j["task_name"] = s.task_name;
    return j;
}

inline FeatureSchema schema_from_json(const nlohmann::json& j) {
    FeatureSchema s;
    try {
        for (const auto& f : j.at("discrete_features")) {
            s.discrete_features.push_back({f.at("name").get<std::string>(),
                                           f.at("vocab_size").get<std::size_t>(),
                                           f.at("is_medical").get<bool>(),
                                           f.at("margin").get<int>()});
        }
        for (const auto& f : j.at("continuous_features")) {
            s.continuous_features.push_back({f.at("name").get<std::string>(),
                                             f.at("is_medical").get<bool>()});
        }
        for (const auto& f : j.at("timeseries_features")) {
            s.timeseries_features.push_back({f.at("name").get<std::string>(),
                                             series_kind_from_string(f.at("kind").get<std::string>())});
        }
        s.series_length = j.at("series_length").get<std::size_t>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.task_name = j.at("task_name").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("schema: ") + e.what());
    }
    s.validate();
    return s;
}

inline FeatureSchema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open schema file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("schema file '" + path + "': " + e.what());
    }
    return schema_from_json(j);
}

inline void save_schema(const FeatureSchema& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write schema file '" + path + "'");
    out << schema_to_json(s).dump(2) << "\n";
}

} // namespace popgraph
