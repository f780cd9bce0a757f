#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "popgraph/metrics.hpp"
#include "popgraph/rng.hpp"

using namespace popgraph;
namespace m = popgraph::metrics;

namespace {

// All-pairs counting oracle: correctly ordered pairs count 1, ties 1/2.
double auc_pair_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
    double num = 0.0;
    double pairs = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            pairs += 1.0;
            if (scores[i] > scores[j]) num += 1.0;
            else if (scores[i] == scores[j]) num += 0.5;
        }
    }
    return num / pairs;
}

} // namespace

TEST_CASE("accuracy counts exact matches", "[metrics]") {
    REQUIRE(m::accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
    REQUIRE_THAT(m::accuracy({0, 1, 2}, {0, 1, 1}), Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
    REQUIRE(m::accuracy({1, 1}, {0, 2}) == 0.0);
    REQUIRE_THROWS_AS(m::accuracy({}, {}), EmptyEval);
    REQUIRE_THROWS_AS(m::accuracy({1}, {1, 2}), ValidationError);
}

TEST_CASE("binary AUC matches hand values", "[metrics]") {
    SECTION("perfect separation") {
        REQUIRE(m::roc_auc_binary({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
    }
    SECTION("hand pairwise example") {
        REQUIRE_THAT(m::roc_auc_binary({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}),
                     Catch::Matchers::WithinAbs(0.75, 1e-15));
    }
    SECTION("all ties give one half") {
        REQUIRE_THAT(m::roc_auc_binary({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}),
                     Catch::Matchers::WithinAbs(0.5, 1e-15));
    }
    SECTION("single-class labels are undefined") {
        REQUIRE_THROWS_AS(m::roc_auc_binary({0.1, 0.9}, {1, 1}), UndefinedMetric);
        REQUIRE_THROWS_AS(m::roc_auc_binary({0.1, 0.9}, {0, 0}), UndefinedMetric);
    }
}

TEST_CASE("binary AUC equals the all-pairs oracle on random instances", "[metrics]") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.next_below(29);
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse grid keeps tie groups frequent.
            scores[i] = static_cast<double>(rng.next_below(8)) / 7.0;
            labels[i] = static_cast<int>(rng.next_below(2));
        }
        bool has0 = false, has1 = false;
        for (int l : labels) (l ? has1 : has0) = true;
        if (!has0 || !has1) continue;
        REQUIRE_THAT(m::roc_auc_binary(scores, labels),
                     Catch::Matchers::WithinAbs(auc_pair_oracle(scores, labels), 1e-12));
    }
}

TEST_CASE("binary AUC is invariant to strictly monotone transforms", "[metrics]") {
    Rng rng(7);
    std::vector<double> scores(20);
    std::vector<int> labels(20);
    for (std::size_t i = 0; i < 20; ++i) {
        scores[i] = rng.next_uniform(-2.0, 2.0);
        labels[i] = static_cast<int>(rng.next_below(2));
    }
    labels[0] = 0;
    labels[1] = 1;
    const double base = m::roc_auc_binary(scores, labels);

    auto transformed = scores;
    for (auto& s : transformed) s = 3.0 * s + 11.0;
    REQUIRE_THAT(m::roc_auc_binary(transformed, labels), Catch::Matchers::WithinAbs(base, 1e-15));

    transformed = scores;
    for (auto& s : transformed) s = std::exp(s);
    REQUIRE_THAT(m::roc_auc_binary(transformed, labels), Catch::Matchers::WithinAbs(base, 1e-15));

    transformed = scores;
    for (auto& s : transformed) s = std::atan(s);
    REQUIRE_THAT(m::roc_auc_binary(transformed, labels), Catch::Matchers::WithinAbs(base, 1e-15));
}

TEST_CASE("macro one-vs-rest AUC averages per-class AUCs", "[metrics]") {
    SECTION("three classes, hand-checkable") {
        // Rows: class score triplets for labels 0,0,1,1,2,2.
        std::vector<double> scores = {
            0.8, 0.1, 0.1,
            0.6, 0.3, 0.1,
            0.2, 0.7, 0.1,
            0.3, 0.5, 0.2,
            0.1, 0.2, 0.7,
            0.2, 0.2, 0.6,
        };
        std::vector<int> labels = {0, 0, 1, 1, 2, 2};
        std::vector<double> col(6);
        std::vector<int> ovr(6);
        double expect = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t r = 0; r < 6; ++r) {
                col[r] = scores[r * 3 + c];
                ovr[r] = labels[r] == static_cast<int>(c) ? 1 : 0;
            }
            expect += auc_pair_oracle(col, ovr);
        }
        expect /= 3.0;
        REQUIRE_THAT(m::roc_auc_macro_ovr(scores, 3, labels), Catch::Matchers::WithinAbs(expect, 1e-12));
    }
    SECTION("absent classes are excluded from the mean") {
        // Class 2 never appears; only columns 0 and 1 contribute.
        std::vector<double> scores = {
            0.9, 0.1, 0.5,
            0.2, 0.8, 0.5,
            0.7, 0.3, 0.5,
        };
        std::vector<int> labels = {0, 1, 0};
        const double got = m::roc_auc_macro_ovr(scores, 3, labels);
        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("all-degenerate columns raise UndefinedMetric") {
        std::vector<double> scores = {0.5, 0.5, 0.5, 0.5};
        std::vector<int> labels = {0, 0};
        REQUIRE_THROWS_AS(m::roc_auc_macro_ovr(scores, 2, labels), UndefinedMetric);
    }
}

TEST_CASE("masked RMSE", "[metrics]") {
    SECTION("exact predictions give zero") {
        REQUIRE(m::rmse_masked({1.0, 2.0}, {1.0, 2.0}, {true, true}) == 0.0);
    }
    SECTION("hand value sqrt(12.5)") {
        REQUIRE_THAT(m::rmse_masked({3.0, 4.0}, {0.0, 0.0}, {true, true}),
                     Catch::Matchers::WithinAbs(std::sqrt(12.5), 1e-14));
    }
    SECTION("ineligible positions cannot move the value") {
        const double base = m::rmse_masked({3.0, 4.0, 0.0}, {0.0, 0.0, 0.0}, {true, true, false});
        const double perturbed = m::rmse_masked({3.0, 4.0, 1e9}, {0.0, 0.0, 0.0}, {true, true, false});
        REQUIRE(base == perturbed);
    }
    SECTION("per-position scale restores original units") {
        // Normalized error 0.5 with a feature spread of 4 is an error of 2.
        const std::vector<double> spread = {4.0};
        REQUIRE_THAT(m::rmse_masked({0.5}, {0.0}, {true}, &spread),
                     Catch::Matchers::WithinAbs(2.0, 1e-14));
    }
    SECTION("empty eligible set throws") {
        REQUIRE_THROWS_AS(m::rmse_masked({1.0}, {1.0}, {false}), EmptyEval);
    }
}

TEST_CASE("binary F1", "[metrics]") {
    SECTION("perfect predictions with positives") {
        REQUIRE(m::f1_binary({0.9, 0.1, 0.8}, {1, 0, 1}) == 1.0);
    }
    SECTION("TP=1 FP=1 FN=1 gives one half") {
        REQUIRE_THAT(m::f1_binary({0.9, 0.9, 0.1}, {1, 0, 1}), Catch::Matchers::WithinAbs(0.5, 1e-15));
    }
    SECTION("no predicted positives but positives exist") {
        REQUIRE(m::f1_binary({0.1, 0.2}, {1, 1}) == 0.0);
    }
    SECTION("threshold is inclusive") {
        REQUIRE(m::f1_binary({0.5}, {1}) == 1.0);
    }
}

TEST_CASE("margin accuracy", "[metrics]") {
    SECTION("margin zero reduces to plain accuracy") {
        Rng rng(5);
        std::vector<int> preds(50), trues(50);
        std::vector<std::size_t> feat(50, 0);
        for (std::size_t i = 0; i < 50; ++i) {
            preds[i] = static_cast<int>(rng.next_below(6));
            trues[i] = static_cast<int>(rng.next_below(6));
        }
        REQUIRE(m::margin_accuracy(preds, trues, feat, {0}) == m::accuracy(preds, trues));
    }
    SECTION("margin boundary is inclusive") {
        REQUIRE(m::margin_accuracy({12}, {10}, {0}, {2}) == 1.0);
        REQUIRE(m::margin_accuracy({13}, {10}, {0}, {2}) == 0.0);
    }
    SECTION("pooled over features with their own margins") {
        // Feature 0 margin 0, feature 1 margin 3.
        REQUIRE_THAT(m::margin_accuracy({5, 5}, {6, 6}, {0, 1}, {0, 3}),
                     Catch::Matchers::WithinAbs(0.5, 1e-15));
    }
    SECTION("missing margin is a config error") {
        REQUIRE_THROWS_AS(m::margin_accuracy({1}, {1}, {2}, {0, 1}), ConfigError);
    }
}

TEST_CASE("fold aggregation", "[metrics]") {
    SECTION("single fold has zero std") {
        auto report = m::aggregate_folds("acc", {0.7});
        REQUIRE(report.mean() == 0.7);
        REQUIRE(report.stddev() == 0.0);
        REQUIRE(report.n_folds() == 1);
    }
    SECTION("hand mean and population std in percent space") {
        auto report = m::aggregate_folds("acc", {0.70, 0.72});
        REQUIRE(report.formatted(true) == "71.00 ± 1.00");
    }
    SECTION("order invariance") {
        auto a = m::aggregate_folds("x", {0.6, 0.8, 0.7});
        auto b = m::aggregate_folds("x", {0.8, 0.7, 0.6});
        REQUIRE(a.mean() == b.mean());
        REQUIRE(a.stddev() == b.stddev());
    }
    SECTION("matches a one-pass reference") {
        Rng rng(31);
        std::vector<double> vals(10);
        for (auto& v : vals) v = rng.next_uniform(0.0, 1.0);
        double s1 = 0.0, s2 = 0.0;
        for (double v : vals) {
            s1 += v;
            s2 += v * v;
        }
        const double mean = s1 / 10.0;
        const double var = s2 / 10.0 - mean * mean;
        auto report = m::aggregate_folds("r", vals);
        REQUIRE_THAT(report.mean(), Catch::Matchers::WithinAbs(mean, 1e-12));
        REQUIRE_THAT(report.stddev(), Catch::Matchers::WithinAbs(std::sqrt(var), 1e-12));
    }
    SECTION("non-percent formatting") {
        auto report = m::aggregate_folds("rmse", {0.25, 0.35});
        REQUIRE(report.formatted(false) == "0.30 ± 0.05");
    }
}
