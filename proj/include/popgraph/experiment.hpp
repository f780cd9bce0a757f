#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "popgraph/checkpoint.hpp"
#include "popgraph/folds.hpp"
#include "popgraph/metrics.hpp"
#include "popgraph/synthetic.hpp"
#include "popgraph/train.hpp"

namespace popgraph {

enum class Mode { Pretrain, Scratch, Finetune };

inline Mode mode_from_string(const std::string& s) {
    if (s == "pretrain") return Mode::Pretrain;
    if (s == "scratch") return Mode::Scratch;
    if (s == "finetune") return Mode::Finetune;
    throw ConfigError("unknown mode '" + s + "' (expected pretrain|scratch|finetune)");
}

enum class Variant { Full, Linear, NoTsTransformer };

inline Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "linear") return Variant::Linear;
    if (s == "no-ts-transformer") return Variant::NoTsTransformer;
    throw ConfigError("unknown variant '" + s + "' (expected full|linear|no-ts-transformer)");
}

inline void apply_variant(ModelConfig& config, Variant variant) {
    if (variant == Variant::Linear) config.use_graphormer = false;
    if (variant == Variant::NoTsTransformer) config.use_ts_transformer = false;
}

// ---------------------------------------------------------------------------
// Training schedules per dataset preset
// ---------------------------------------------------------------------------

struct TrainPlan {
    std::size_t epochs = 1;
    double lr_start = 1e-4;
    double lr_end = 1e-4;
    LrSchedule schedule = LrSchedule::Constant;
};

inline TrainPlan preset_plan(synthetic::Preset preset, Mode mode, double label_ratio = 1.0) {
    if (preset == synthetic::Preset::Static) {
        switch (mode) {
            case Mode::Pretrain: return {6000, 1e-5, 1e-5, LrSchedule::Constant};
            case Mode::Scratch: return {1200, 1e-5, 5e-6, LrSchedule::Poly};
            case Mode::Finetune: {
                const std::size_t epochs = label_ratio <= 0.01 ? 200 : 1200;
                return {epochs, 5e-6, 5e-6, LrSchedule::Constant};
            }
        }
    } else {
        switch (mode) {
            case Mode::Pretrain: return {3000, 1e-3, 1e-4, LrSchedule::Poly};
            case Mode::Scratch: return {1100, 1e-4, 1e-4, LrSchedule::Constant};
            case Mode::Finetune: return {600, 1e-5, 1e-5, LrSchedule::Constant};
        }
    }
    throw ConfigError("preset_plan: unknown mode");
}

inline TrainPlan scale_plan(TrainPlan plan, double scale) {
    if (scale <= 0.0) throw ConfigError("epochs scale must be positive");
    plan.epochs = static_cast<std::size_t>(
        std::max(1.0, std::ceil(static_cast<double>(plan.epochs) * scale)));
    return plan;
}

inline MaskSpec default_mask(synthetic::Preset preset) {
    MaskSpec mask;
    mask.strategy = preset == synthetic::Preset::Static ? MaskStrategy::StaticRandom
                                                        : MaskStrategy::BlockMasking;
    mask.ratio = 0.3;
    mask.block_len = 6;
    return mask;
}

// Preset depths: 4 graphormer layers on the static preset, 8 on time series.
inline ModelConfig experiment_config(const FeatureSchema& schema, synthetic::Preset preset,
                                     Variant variant) {
    ModelConfig config = ModelConfig::from_schema(schema);
    config.num_graphormer_layers = preset == synthetic::Preset::Static ? 4 : 8;
    apply_variant(config, variant);
    return config;
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

struct ExperimentOptions {
    synthetic::Preset preset = synthetic::Preset::Static;
    Variant variant = Variant::Full;
    std::size_t folds = 0;             // 0: preset default (kfold 10 / 6 holdouts)
    MaskSpec mask = default_mask(synthetic::Preset::Static);
    double epochs_scale = 1.0;
    std::size_t epochs_override = 0;   // 0: preset plan
    double lr_override = 0.0;          // 0: preset plan
    double lr_end_override = 0.0;
    SubgraphOptions subgraphs;
    std::optional<ModelConfig> config; // desk-scale architecture override
    std::uint64_t seed = 1;
};

inline FoldPlan experiment_folds(const Cohort& cohort, const ExperimentOptions& opt) {
    if (opt.preset == synthetic::Preset::Static) {
        KFoldScheme scheme;
        if (opt.folds > 0) scheme.k = opt.folds;
        return make_folds(cohort, scheme, opt.seed);
    }
    HoldoutScheme scheme;
    if (opt.folds > 0) scheme.repeats = opt.folds;
    return make_folds(cohort, scheme, opt.seed);
}

inline TrainPlan resolve_plan(const ExperimentOptions& opt, Mode mode, double label_ratio) {
    TrainPlan plan = scale_plan(preset_plan(opt.preset, mode, label_ratio), opt.epochs_scale);
    if (opt.epochs_override > 0) plan.epochs = opt.epochs_override;
    if (opt.lr_override > 0.0) {
        plan.lr_start = opt.lr_override;
        plan.lr_end = opt.lr_override;
        plan.schedule = LrSchedule::Constant;
    }
    if (opt.lr_end_override > 0.0) {
        plan.lr_end = opt.lr_end_override;
        plan.schedule = plan.lr_end == plan.lr_start ? LrSchedule::Constant : LrSchedule::Poly;
    }
    if (!(plan.lr_start >= plan.lr_end && plan.lr_end > 0.0)) {
        throw ConfigError("learning rates must satisfy lr_start >= lr_end > 0");
    }
    return plan;
}

namespace detail {

inline ModelConfig resolved_config(const Cohort& cohort, const ExperimentOptions& opt) {
    if (opt.config) {
        ModelConfig config = *opt.config;
        apply_variant(config, opt.variant);
        return config;
    }
    return experiment_config(cohort.schema, opt.preset, opt.variant);
}

inline SubgraphOptions resolved_subgraphs(const ExperimentOptions& opt) {
    SubgraphOptions sub = opt.subgraphs;
    sub.sim_kind = opt.preset == synthetic::Preset::Static ? SimilarityKind::Static
                                                           : SimilarityKind::Timeseries;
    return sub;
}

// Fold-aware preprocessing: statistics from the fold's train split only.
inline Cohort normalized_for_fold(const Cohort& cohort, const Fold& fold) {
    Cohort out = cohort;
    normalize_continuous(out, fold.train_ids);
    return out;
}

} // namespace detail

struct PretrainArtifacts {
    FoldPlan folds;
    ModelConfig config;
    TrainPlan plan;
    std::vector<PretrainResult> fold_results;
};

// Per fold: fold-aware normalization, then masked-imputation pre-training on
// the label-free view.
inline PretrainArtifacts experiment_pretrain(const Cohort& raw, const ExperimentOptions& opt) {
    Cohort cohort = raw;
    interpolate_cohort(cohort);

    PretrainArtifacts art;
    art.folds = experiment_folds(cohort, opt);
    art.config = detail::resolved_config(cohort, opt);
    art.plan = resolve_plan(opt, Mode::Pretrain, 1.0);

    PretrainOptions popt;
    popt.mask = opt.mask;
    popt.epochs = art.plan.epochs;
    popt.lr_start = art.plan.lr_start;
    popt.lr_end = art.plan.lr_end;
    popt.schedule = art.plan.schedule;
    popt.subgraphs = detail::resolved_subgraphs(opt);

    for (std::size_t f = 0; f < art.folds.folds.size(); ++f) {
        const Fold& fold = art.folds.folds[f];
        const Cohort fc = detail::normalized_for_fold(cohort, fold);
        art.fold_results.push_back(run_pretraining(UnlabeledCohortView::from(fc), fold, art.config,
                                                   popt, mix_seed(opt.seed, fnv1a("fold"), f)));
    }
    return art;
}

struct TaskArtifacts {
    FoldPlan folds;
    ModelConfig config;
    TrainPlan plan;
    std::vector<TaskResult> fold_results;
    std::vector<std::size_t> labeled_counts;
    std::map<std::string, metrics::MetricReport> reports; // test metrics over folds
};

// Supervised runs over every fold, either from scratch or from per-fold
// pre-training checkpoints.
inline TaskArtifacts experiment_task(const Cohort& raw, Mode mode, double label_ratio,
                                     const std::vector<Checkpoint>* pretrained,
                                     const ExperimentOptions& opt) {
    if (mode == Mode::Pretrain) {
        throw ConfigError("experiment_task: mode must be scratch or finetune");
    }
    Cohort cohort = raw;
    interpolate_cohort(cohort);

    TaskArtifacts art;
    art.folds = experiment_folds(cohort, opt);
    art.config = detail::resolved_config(cohort, opt);
    art.plan = resolve_plan(opt, mode, label_ratio);

    if (mode == Mode::Finetune) {
        if (pretrained == nullptr || pretrained->size() != art.folds.folds.size()) {
            throw ConfigError("experiment_task: finetune needs one checkpoint per fold");
        }
    }

    TaskOptions topt;
    topt.epochs = art.plan.epochs;
    topt.lr_start = art.plan.lr_start;
    topt.lr_end = art.plan.lr_end;
    topt.schedule = art.plan.schedule;
    topt.subgraphs = detail::resolved_subgraphs(opt);

    std::map<std::string, std::vector<double>> metric_values;
    for (std::size_t f = 0; f < art.folds.folds.size(); ++f) {
        const Fold& fold = art.folds.folds[f];
        const Cohort fc = detail::normalized_for_fold(cohort, fold);
        const std::uint64_t fold_seed = mix_seed(opt.seed, fnv1a("fold"), f);

        const std::vector<std::string> labeled =
            subsample_labels(fc, fold.train_ids, label_ratio, mix_seed(fold_seed, fnv1a("labels")));
        art.labeled_counts.push_back(labeled.size());

        const std::uint64_t init_seed = mix_seed(fold_seed, fnv1a("init"));
        const ModelParams init = mode == Mode::Finetune
                                     ? init_finetune((*pretrained)[f], art.config, init_seed)
                                     : build_variant(art.config, init_seed);

        art.fold_results.push_back(
            run_task_training(fc, fold, labeled, init, art.config, topt, fold_seed));
        for (const auto& [name, value] : art.fold_results.back().test_metrics) {
            metric_values[name].push_back(value);
        }
    }
    for (auto& [name, values] : metric_values) {
        art.reports.emplace(name, metrics::aggregate_folds(name, values));
    }
    return art;
}

// Convenience for fine-tuning: extracts the best checkpoints of a pretrain run.
inline std::vector<Checkpoint> best_checkpoints(const PretrainArtifacts& art) {
    std::vector<Checkpoint> out;
    out.reserve(art.fold_results.size());
    for (const auto& r : art.fold_results) out.push_back(r.best);
    return out;
}

// ---------------------------------------------------------------------------
// Label-ratio sweep (Table-2-shaped comparison)
// ---------------------------------------------------------------------------

struct SweepOptions {
    std::vector<double> ratios{0.01, 0.05, 0.10, 0.50, 1.00};
    std::size_t n_seeds = 1;
};

struct SweepResult {
    std::vector<std::string> columns;                 // SC, FT (static) or SC, FT:BM, FT:FM
    std::vector<double> ratios;
    std::map<std::string, metrics::MetricReport> cells;        // "<ratio>|<column>|<metric>"
    std::string csv;
};

namespace detail {

inline std::string sweep_key(double ratio, const std::string& column, const std::string& metric) {
    std::ostringstream ss;
    ss << ratio << '|' << column << '|' << metric;
    return ss.str();
}

} // namespace detail

// Scratch vs fine-tune across label ratios; pre-training happens once per
// seed (per masking column) and is shared by all ratios.
inline SweepResult run_label_sweep(const Cohort& raw, const ExperimentOptions& base,
                                   const SweepOptions& sweep) {
    if (sweep.ratios.empty()) throw ConfigError("label sweep needs at least one ratio");
    if (sweep.n_seeds == 0) throw ConfigError("label sweep needs at least one seed");

    const bool timeseries = base.preset == synthetic::Preset::Timeseries;
    SweepResult res;
    res.ratios = sweep.ratios;
    res.columns = timeseries ? std::vector<std::string>{"SC", "FT:BM", "FT:FM"}
                             : std::vector<std::string>{"SC", "FT"};

    std::map<std::string, std::vector<double>> values; // sweep_key -> per run values
    for (std::size_t s = 0; s < sweep.n_seeds; ++s) {
        ExperimentOptions opt = base;
        opt.seed = mix_seed(base.seed, fnv1a("sweep"), s);

        // one pretrain per fine-tune column, shared across ratios
        std::map<std::string, std::vector<Checkpoint>> pretrained;
        for (const std::string& col : res.columns) {
            if (col == "SC") continue;
            ExperimentOptions popt = opt;
            if (col == "FT:FM") popt.mask.strategy = MaskStrategy::FeatureMasking;
            if (col == "FT:BM") popt.mask.strategy = MaskStrategy::BlockMasking;
            pretrained.emplace(col, best_checkpoints(experiment_pretrain(raw, popt)));
        }

        for (const double ratio : sweep.ratios) {
            for (const std::string& col : res.columns) {
                const bool scratch = col == "SC";
                const TaskArtifacts art =
                    experiment_task(raw, scratch ? Mode::Scratch : Mode::Finetune, ratio,
                                    scratch ? nullptr : &pretrained.at(col), opt);
                for (const auto& [metric, report] : art.reports) {
                    auto& acc = values[detail::sweep_key(ratio, col, metric)];
                    acc.insert(acc.end(), report.fold_values.begin(), report.fold_values.end());
                }
            }
        }
    }
    for (const auto& [key, vals] : values) {
        const std::string metric = key.substr(key.rfind('|') + 1);
        res.cells.emplace(key, metrics::aggregate_folds(metric, vals));
    }

    std::ostringstream csv;
    csv << "ratio,metric";
    for (const auto& col : res.columns) csv << ',' << col;
    csv << '\n';
    for (const double ratio : res.ratios) {
        for (const std::string metric : {"accuracy", "auc"}) {
            csv << ratio << ',' << metric;
            for (const auto& col : res.columns) {
                const auto it = res.cells.find(detail::sweep_key(ratio, col, metric));
                csv << ',' << (it == res.cells.end() ? "n/a" : it->second.formatted());
            }
            csv << '\n';
        }
    }
    res.csv = csv.str();
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation on a fold's test split
// ---------------------------------------------------------------------------

inline std::map<std::string, double> evaluate_checkpoint(const Cohort& raw, const Fold& fold,
                                                         const ModelConfig& config,
                                                         const Checkpoint& ck,
                                                         const SubgraphOptions& sub,
                                                         std::uint64_t seed) {
    if (ck.fingerprint != config_fingerprint(config)) {
        throw IncompatibleCheckpoint("evaluate_checkpoint: config fingerprint mismatch");
    }
    Cohort cohort = raw;
    interpolate_cohort(cohort);
    const Cohort fc = detail::normalized_for_fold(cohort, fold);
    const auto subgraphs = build_subgraphs(fc, fold, sub, seed);
    const ModelParams params = params_from_checkpoint(ck);

    detail::SplitEval eval[3];
    for (const Subgraph& sg : subgraphs) {
        const NodeBatch batch = make_node_batch(sg.record_ptrs(), fc.schema, &sg.graph);
        const Tensor reps = encoder_forward(nullptr, batch, params, config);
        const Tensor logits = decoder_forward(nullptr, reps, params, DecoderHead::Task);
        detail::accumulate_rows(eval, logits, sg.splits, sg.records);
    }
    const detail::SplitEval& test = eval[static_cast<std::size_t>(Split::Test)];
    if (test.empty()) throw EmptyEval("evaluate_checkpoint: no labeled test rows");

    std::map<std::string, double> out;
    out["accuracy"] = metrics::accuracy(test.preds, test.labels);
    if (!test.single_class()) out["auc"] = detail::split_auc(test, config.num_classes);
    if (config.num_classes == 2) {
        out["f1"] = metrics::f1_binary(test.class1_probs(config.num_classes), test.labels);
    }
    return out;
}

} // namespace popgraph
