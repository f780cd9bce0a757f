#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "popgraph/errors.hpp"

// Task and imputation metrics plus cross-fold aggregation. All functions are
// pure; fold parallelism is safe.
namespace popgraph::metrics {

struct MetricReport {
    std::string name;
    std::vector<double> fold_values;

    std::size_t n_folds() const { return fold_values.size(); }

    // Accumulation runs over a sorted copy so the report does not depend on
    // fold order (floating-point addition is not associative).
    double mean() const {
        std::vector<double> sorted = fold_values;
        std::sort(sorted.begin(), sorted.end());
        return std::accumulate(sorted.begin(), sorted.end(), 0.0) /
               static_cast<double>(sorted.size());
    }

    // Population convention, matching the reporting everywhere.
    double stddev() const {
        const double m = mean();
        std::vector<double> sorted = fold_values;
        std::sort(sorted.begin(), sorted.end());
        double acc = 0.0;
        for (double v : sorted) acc += (v - m) * (v - m);
        return std::sqrt(acc / static_cast<double>(sorted.size()));
    }

    // "mean ± std" with two decimals; percent=true scales rates into percent
    // space first.
    std::string formatted(bool percent = true) const {
        const double s = percent ? 100.0 : 1.0;
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(2);
        os << mean() * s << " ± " << stddev() * s;
        return os.str();
    }
};

inline double accuracy(const std::vector<int>& pred_classes, const std::vector<int>& true_classes) {
    if (pred_classes.size() != true_classes.size()) {
        throw ValidationError("accuracy: length mismatch");
    }
    if (pred_classes.empty()) throw EmptyEval("accuracy: no predictions");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred_classes.size(); ++i) {
        if (pred_classes[i] == true_classes[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(pred_classes.size());
}

// Binary AUC via the Mann-Whitney rank statistic; tied scores get averaged
// ranks, which counts reversed/tied pairs at one half.
inline double roc_auc_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ValidationError("roc_auc: length mismatch");
    if (scores.empty()) throw EmptyEval("roc_auc: no scores");
    std::size_t n_pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValidationError("roc_auc: binary labels must be 0/1");
        n_pos += static_cast<std::size_t>(l);
    }
    const std::size_t n = scores.size();
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw UndefinedMetric("roc_auc: only one class present");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        // 1-based ranks i+1 .. j averaged across the tie group.
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Macro one-vs-rest AUC over row-major per-class scores. Classes absent from
// the labels (or degenerate) are excluded from the mean.
inline double roc_auc_macro_ovr(const std::vector<double>& class_scores, std::size_t n_classes,
                                const std::vector<int>& labels) {
    if (n_classes == 0 || labels.empty() || class_scores.size() != labels.size() * n_classes) {
        throw ValidationError("roc_auc: scores must be n_samples x n_classes");
    }
    double total = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::vector<double> scores(labels.size());
        std::vector<int> ovr(labels.size());
        for (std::size_t r = 0; r < labels.size(); ++r) {
            scores[r] = class_scores[r * n_classes + c];
            ovr[r] = labels[r] == static_cast<int>(c) ? 1 : 0;
        }
        try {
            total += roc_auc_binary(scores, ovr);
            ++included;
        } catch (const UndefinedMetric&) {
            // one-class column; skip
        }
    }
    if (included == 0) throw UndefinedMetric("roc_auc: every class column is degenerate");
    return total / static_cast<double>(included);
}

inline double rmse_masked(const std::vector<double>& preds, const std::vector<double>& targets,
                          const std::vector<bool>& eligible,
                          const std::vector<double>* scale_per_position = nullptr) {
    if (preds.size() != targets.size() || preds.size() != eligible.size() ||
        (scale_per_position && scale_per_position->size() != preds.size())) {
        throw ValidationError("rmse_masked: length mismatch");
    }
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (!eligible[i]) continue;
        double d = preds[i] - targets[i];
        if (scale_per_position) d *= (*scale_per_position)[i];
        acc += d * d;
        ++count;
    }
    if (count == 0) throw EmptyEval("rmse_masked: no eligible positions");
    return std::sqrt(acc / static_cast<double>(count));
}

inline double f1_binary(const std::vector<double>& scores, const std::vector<int>& targets,
                        double threshold = 0.5) {
    if (scores.size() != targets.size()) throw ValidationError("f1_binary: length mismatch");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (targets[i] != 0 && targets[i] != 1) {
            throw ValidationError("f1_binary: targets must be 0/1");
        }
        const bool pred = scores[i] >= threshold;
        if (pred && targets[i] == 1) ++tp;
        else if (pred && targets[i] == 0) ++fp;
        else if (!pred && targets[i] == 1) ++fn;
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

// Ordinal accuracy with a per-feature tolerance: |pred - true| <= margin of
// the feature each position belongs to, pooled over all positions.
inline double margin_accuracy(const std::vector<int>& pred_classes, const std::vector<int>& true_classes,
                              const std::vector<std::size_t>& feature_of,
                              const std::vector<int>& margins) {
    if (pred_classes.size() != true_classes.size() || pred_classes.size() != feature_of.size()) {
        throw ValidationError("margin_accuracy: length mismatch");
    }
    if (pred_classes.empty()) throw EmptyEval("margin_accuracy: no predictions");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred_classes.size(); ++i) {
        if (feature_of[i] >= margins.size() || margins[feature_of[i]] < 0) {
            throw ConfigError("margin_accuracy: no margin for feature " + std::to_string(feature_of[i]));
        }
        if (std::abs(pred_classes[i] - true_classes[i]) <= margins[feature_of[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(pred_classes.size());
}

inline MetricReport aggregate_folds(std::string name, std::vector<double> values) {
    if (values.empty()) throw EmptyEval("aggregate_folds: no fold values");
    return MetricReport{std::move(name), std::move(values)};
}

} // namespace popgraph::metrics
