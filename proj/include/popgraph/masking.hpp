#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "popgraph/cohort.hpp"
#include "popgraph/errors.hpp"
#include "popgraph/model.hpp"
#include "popgraph/ops.hpp"
#include "popgraph/rng.hpp"
#include "popgraph/schema.hpp"

namespace popgraph {

// ---------------------------------------------------------------------------
// Mask specification
// ---------------------------------------------------------------------------

enum class MaskStrategy { StaticRandom, FeatureMasking, BlockMasking };

inline std::string to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::StaticRandom: return "static";
        case MaskStrategy::FeatureMasking: return "fm";
        case MaskStrategy::BlockMasking: return "bm";
    }
    return "?";
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "static" || s == "static_random") return MaskStrategy::StaticRandom;
    if (s == "fm" || s == "feature_masking") return MaskStrategy::FeatureMasking;
    if (s == "bm" || s == "block_masking") return MaskStrategy::BlockMasking;
    throw ConfigError("unknown mask strategy '" + s + "' (use static, fm, or bm)");
}

struct MaskSpec {
    MaskStrategy strategy = MaskStrategy::StaticRandom;
    double ratio = 0.30;
    std::size_t block_len = 6;
    bool per_feature_blocks = false; // BM study variant: independent block per feature

    void validate(const FeatureSchema& schema) const {
        if (!(ratio > 0.0 && ratio <= 1.0)) {
            throw ConfigError("mask ratio must be in (0, 1], got " + std::to_string(ratio));
        }
        if (strategy == MaskStrategy::StaticRandom) {
            std::size_t medical = 0;
            for (const auto& f : schema.discrete_features) medical += f.is_medical ? 1 : 0;
            for (const auto& f : schema.continuous_features) medical += f.is_medical ? 1 : 0;
            if (medical == 0) {
                throw ConfigError("static_random masking needs at least one medical static feature");
            }
        } else {
            if (schema.n_series() == 0) {
                throw ConfigError(to_string(strategy) + " masking needs time-series features");
            }
            if (strategy == MaskStrategy::BlockMasking &&
                (block_len == 0 || block_len > schema.series_length)) {
                throw ConfigError("block_len must be in [1, tau], got " + std::to_string(block_len));
            }
        }
    }
};

// Per-record mask draw in schema position order: static slots are the D
// discrete then C continuous features; series slots are the S x tau grid.
struct MaskDraw {
    std::vector<char> static_mask; // D + C
    std::vector<char> series_mask; // S x tau
};

// ---------------------------------------------------------------------------
// Strategy draws
// ---------------------------------------------------------------------------

// Uniformly masks round(ratio * M) of the M medical static features, at least one.
inline MaskDraw draw_static_random(const FeatureSchema& schema, double ratio, Rng& rng) {
    const std::size_t d = schema.n_discrete();
    std::vector<std::size_t> medical;
    for (std::size_t k = 0; k < d; ++k) {
        if (schema.discrete_features[k].is_medical) medical.push_back(k);
    }
    for (std::size_t j = 0; j < schema.n_continuous(); ++j) {
        if (schema.continuous_features[j].is_medical) medical.push_back(d + j);
    }
    if (medical.empty()) throw ConfigError("static_random: no medical static features");
    const auto want = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(ratio * static_cast<double>(medical.size()))));
    MaskDraw draw;
    draw.static_mask.assign(d + schema.n_continuous(), 0);
    draw.series_mask.assign(schema.series_cells(), 0);
    for (std::size_t pick : rng.sample_without_replacement(medical.size(), want)) {
        draw.static_mask[medical[pick]] = 1;
    }
    return draw;
}

// Masks round(ratio * S) whole series features (all tau hours), at least one.
inline MaskDraw draw_feature_masking(const FeatureSchema& schema, double ratio, Rng& rng) {
    const std::size_t s = schema.n_series();
    if (s == 0) throw ConfigError("feature_masking: no time-series features");
    const auto want = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(ratio * static_cast<double>(s))));
    MaskDraw draw;
    draw.static_mask.assign(schema.n_discrete() + schema.n_continuous(), 0);
    draw.series_mask.assign(schema.series_cells(), 0);
    for (std::size_t f : rng.sample_without_replacement(s, want)) {
        std::fill_n(draw.series_mask.begin() + f * schema.series_length, schema.series_length, 1);
    }
    return draw;
}

// Masks one contiguous block of block_len hours in every series feature. The
// block start is shared across features unless per_feature is set.
inline MaskDraw draw_block_masking(const FeatureSchema& schema, std::size_t block_len,
                                   bool per_feature, Rng& rng) {
    const std::size_t s = schema.n_series();
    const std::size_t tau = schema.series_length;
    if (s == 0) throw ConfigError("block_masking: no time-series features");
    if (block_len == 0 || block_len > tau) {
        throw ConfigError("block_masking: block_len must be in [1, tau]");
    }
    MaskDraw draw;
    draw.static_mask.assign(schema.n_discrete() + schema.n_continuous(), 0);
    draw.series_mask.assign(schema.series_cells(), 0);
    std::size_t start = rng.next_below(tau - block_len + 1);
    for (std::size_t f = 0; f < s; ++f) {
        if (per_feature && f > 0) start = rng.next_below(tau - block_len + 1);
        std::fill_n(draw.series_mask.begin() + f * tau + start, block_len, 1);
    }
    return draw;
}

inline MaskDraw draw_mask(const FeatureSchema& schema, const MaskSpec& spec, Rng& rng) {
    switch (spec.strategy) {
        case MaskStrategy::StaticRandom: return draw_static_random(schema, spec.ratio, rng);
        case MaskStrategy::FeatureMasking: return draw_feature_masking(schema, spec.ratio, rng);
        case MaskStrategy::BlockMasking:
            return draw_block_masking(schema, spec.block_len, spec.per_feature_blocks, rng);
    }
    throw ConfigError("draw_mask: unknown strategy");
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

// Imputation-target bookkeeping for one batch. Positions are per node in the
// fixed order [D discrete | C continuous | S x tau grid]; targets hold the
// original (pre-mask) values, discrete ones as their index.
struct MaskedBatch {
    NodeBatch inputs;
    std::vector<char> mask;      // n x P
    std::vector<char> eligible;  // n x P, eligible implies mask
    std::vector<double> targets; // n x P
    std::size_t positions_per_node = 0;

    std::size_t eligible_count() const {
        return static_cast<std::size_t>(std::count(eligible.begin(), eligible.end(), char(1)));
    }
    std::size_t mask_count() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), char(1)));
    }
};

// Unmasked model input for task training and evaluation.
inline NodeBatch make_node_batch(const std::vector<const PatientRecord*>& records,
                                 const FeatureSchema& schema, const PopulationGraph* graph) {
    NodeBatch b;
    b.n = records.size();
    b.graph = graph;
    const std::size_t d = schema.n_discrete();
    const std::size_t c = schema.n_continuous();
    const std::size_t cells = schema.series_cells();
    b.discrete.assign(d, std::vector<int>(b.n, 0));
    b.continuous.assign(b.n * c, 0.0);
    b.series.assign(b.n * cells, 0.0);
    b.mask_cols.assign(b.n * cells, 0.0);
    for (std::size_t i = 0; i < b.n; ++i) {
        const PatientRecord& r = *records[i];
        for (std::size_t k = 0; k < d; ++k) b.discrete[k][i] = r.discrete[k];
        std::copy_n(r.continuous.data(), c, b.continuous.data() + i * c);
        std::copy_n(r.timeseries.data(), cells, b.series.data() + i * cells);
    }
    return b;
}

// Applies the spec's strategy to every record with a per-(seed, epoch, patient)
// stream, producing masked inputs plus aligned targets. Eligibility follows
// the measured bitmap for continuous measurements; static features and binary
// treatments are always reconstructable once masked.
inline MaskedBatch apply_mask_tokens(const std::vector<const PatientRecord*>& records,
                                     const FeatureSchema& schema, const MaskSpec& spec,
                                     std::size_t epoch, std::uint64_t seed,
                                     const PopulationGraph* graph) {
    spec.validate(schema);
    MaskedBatch mb;
    mb.inputs = make_node_batch(records, schema, graph);
    const std::size_t d = schema.n_discrete();
    const std::size_t c = schema.n_continuous();
    const std::size_t s = schema.n_series();
    const std::size_t tau = schema.series_length;
    const std::size_t p = d + c + s * tau;
    mb.positions_per_node = p;
    mb.mask.assign(mb.inputs.n * p, 0);
    mb.eligible.assign(mb.inputs.n * p, 0);
    mb.targets.assign(mb.inputs.n * p, 0.0);

    for (std::size_t i = 0; i < mb.inputs.n; ++i) {
        const PatientRecord& r = *records[i];
        Rng rng(mix_seed(seed, fnv1a("mask"), epoch, fnv1a(r.id)));
        const MaskDraw draw = draw_mask(schema, spec, rng);
        char* mask_row = mb.mask.data() + i * p;
        char* elig_row = mb.eligible.data() + i * p;
        double* tgt_row = mb.targets.data() + i * p;

        for (std::size_t k = 0; k < d; ++k) {
            tgt_row[k] = static_cast<double>(r.discrete[k]);
            if (draw.static_mask[k]) {
                mask_row[k] = 1;
                elig_row[k] = 1;
                mb.inputs.discrete[k][i] = static_cast<int>(schema.discrete_features[k].vocab_size);
            }
        }
        for (std::size_t j = 0; j < c; ++j) {
            tgt_row[d + j] = r.continuous[j];
            if (draw.static_mask[d + j]) {
                mask_row[d + j] = 1;
                elig_row[d + j] = 1;
                mb.inputs.continuous[i * c + j] = 0.0;
            }
        }
        for (std::size_t f = 0; f < s; ++f) {
            const bool treatment =
                schema.timeseries_features[f].kind == SeriesKind::BinaryTreatment;
            for (std::size_t h = 0; h < tau; ++h) {
                const std::size_t cell = f * tau + h;
                tgt_row[d + c + cell] = r.timeseries[cell];
                if (!draw.series_mask[cell]) continue;
                mask_row[d + c + cell] = 1;
                elig_row[d + c + cell] = (treatment || r.measured[cell]) ? 1 : 0;
                mb.inputs.series[i * s * tau + cell] = 0.0;
                mb.inputs.mask_cols[i * s * tau + cell] = 1.0;
            }
        }
    }
    return mb;
}

// ---------------------------------------------------------------------------
// Masked-imputation loss
// ---------------------------------------------------------------------------

// Scalar loss tensor plus the per-group breakdown. Groups with no eligible
// support are excluded; the total is the unweighted sum of group means.
struct ImputationLoss {
    Tensor total;
    double discrete_ce = 0.0;
    double continuous_mse = 0.0;
    double treatment_bce = 0.0;
    std::size_t discrete_count = 0;
    std::size_t continuous_count = 0;
    std::size_t treatment_count = 0;
};

inline ImputationLoss imputation_loss(Tape* tape, const Tensor& predictions,
                                      const MaskedBatch& mb, const FeatureSchema& schema,
                                      const ModelConfig& config) {
    const std::size_t n = mb.inputs.n;
    const std::size_t width = config.imputation_width();
    if (predictions.rank() != 2 || predictions.dim(0) != n || predictions.dim(1) != width) {
        throw ShapeError("imputation_loss: predictions " + shape_str(predictions.shape()) +
                         " vs expected {" + std::to_string(n) + "," + std::to_string(width) + "}");
    }
    const auto layout = ImputationLayout::from_config(config);
    const std::size_t d = schema.n_discrete();
    const std::size_t c = schema.n_continuous();
    const std::size_t s = schema.n_series();
    const std::size_t tau = schema.series_length;
    const std::size_t p = mb.positions_per_node;

    ImputationLoss out;

    // discrete static features: pooled mean CE across features
    Tensor ce_sum;
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> row_mask(n, 0.0);
        std::vector<int> targets(n, 0);
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mb.eligible[i * p + k]) {
                row_mask[i] = 1.0;
                targets[i] = static_cast<int>(mb.targets[i * p + k]);
                ++count;
            }
        }
        if (count == 0) continue;
        Tensor logits = ops::slice_last_axis(tape, predictions, layout.discrete_offset[k],
                                             config.discrete_vocab[k]);
        Tensor part = ops::cross_entropy_loss(tape, logits, targets,
                                              Tensor::constant(Shape{n}, std::move(row_mask)),
                                              ops::LossReduction::Sum);
        ce_sum = (out.discrete_count == 0) ? part : ops::add(tape, ce_sum, part);
        out.discrete_count += count;
    }

    // continuous MSE: static continuous plus measured time-series measurements
    std::vector<double> mse_w(n * width, 0.0), mse_t(n * width, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            if (!mb.eligible[i * p + d + j]) continue;
            mse_w[i * width + layout.continuous_offset + j] = 1.0;
            mse_t[i * width + layout.continuous_offset + j] = mb.targets[i * p + d + j];
            ++out.continuous_count;
        }
        for (std::size_t f = 0; f < s; ++f) {
            if (schema.timeseries_features[f].kind != SeriesKind::ContinuousMeasurement) continue;
            for (std::size_t h = 0; h < tau; ++h) {
                const std::size_t cell = f * tau + h;
                if (!mb.eligible[i * p + d + c + cell]) continue;
                mse_w[i * width + layout.series_offset + cell] = 1.0;
                mse_t[i * width + layout.series_offset + cell] = mb.targets[i * p + d + c + cell];
                ++out.continuous_count;
            }
        }
    }

    // binary treatments: BCE over masked cells
    std::vector<double> bce_w(n * width, 0.0), bce_t(n * width, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < s; ++f) {
            if (schema.timeseries_features[f].kind != SeriesKind::BinaryTreatment) continue;
            for (std::size_t h = 0; h < tau; ++h) {
                const std::size_t cell = f * tau + h;
                if (!mb.eligible[i * p + d + c + cell]) continue;
                bce_w[i * width + layout.series_offset + cell] = 1.0;
                bce_t[i * width + layout.series_offset + cell] = mb.targets[i * p + d + c + cell];
                ++out.treatment_count;
            }
        }
    }

    Tensor total;
    bool any = false;
    if (out.discrete_count > 0) {
        Tensor ce = ops::scale(tape, ce_sum, 1.0 / static_cast<double>(out.discrete_count));
        out.discrete_ce = ce.item();
        total = ce;
        any = true;
    }
    if (out.continuous_count > 0) {
        Tensor mse = ops::mse_loss(tape, predictions,
                                   Tensor::constant(Shape{n, width}, std::move(mse_t)),
                                   Tensor::constant(Shape{n, width}, std::move(mse_w)),
                                   ops::LossReduction::MeanOverMask);
        out.continuous_mse = mse.item();
        total = any ? ops::add(tape, total, mse) : mse;
        any = true;
    }
    if (out.treatment_count > 0) {
        Tensor bce = ops::binary_cross_entropy_loss(
            tape, predictions, Tensor::constant(Shape{n, width}, std::move(bce_t)),
            Tensor::constant(Shape{n, width}, std::move(bce_w)), ops::LossReduction::MeanOverMask);
        out.treatment_bce = bce.item();
        total = any ? ops::add(tape, total, bce) : bce;
        any = true;
    }
    if (!any) throw EmptyLossSupport("imputation_loss: no eligible masked positions");
    out.total = total;
    return out;
}

} // namespace popgraph
