#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "popgraph/checkpoint.hpp"
#include "popgraph/cohort.hpp"
#include "popgraph/folds.hpp"
#include "popgraph/graph.hpp"
#include "popgraph/masking.hpp"
#include "popgraph/metrics.hpp"
#include "popgraph/model.hpp"
#include "popgraph/ops.hpp"
#include "popgraph/optim.hpp"
#include "popgraph/similarity.hpp"

namespace popgraph {

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

// Pre-training input: record copies with every label removed. run_pretraining
// accepts only this view, so labels are unreachable by construction.
struct UnlabeledCohortView {
    FeatureSchema schema;
    std::vector<PatientRecord> records;

    static UnlabeledCohortView from(const Cohort& cohort) {
        UnlabeledCohortView view;
        view.schema = cohort.schema;
        view.records = cohort.records;
        for (auto& r : view.records) r.label.reset();
        return view;
    }
};

// ---------------------------------------------------------------------------
// Subgraph assembly
// ---------------------------------------------------------------------------

struct SubgraphOptions {
    std::size_t group_size = 500;
    std::size_t knn_k = 5;
    SimilarityKind sim_kind = SimilarityKind::Static;
    int spd_cap = 5;
    std::size_t n_sim_bins = 8;
};

struct Subgraph {
    PopulationGraph graph;
    std::vector<PatientRecord> records; // aligned with graph.node_ids
    std::vector<Split> splits;          // aligned with records

    std::vector<const PatientRecord*> record_ptrs() const {
        std::vector<const PatientRecord*> ptrs;
        ptrs.reserve(records.size());
        for (const auto& r : records) ptrs.push_back(&r);
        return ptrs;
    }
};

// Splits the fold population into split-mixed groups and builds one knn graph
// per group. Source is a Cohort or an UnlabeledCohortView.
template <typename Source>
inline std::vector<Subgraph> build_subgraphs(const Source& source, const Fold& fold,
                                             const SubgraphOptions& opt, std::uint64_t seed) {
    std::unordered_map<std::string, const PatientRecord*> by_id;
    by_id.reserve(source.records.size());
    for (const auto& r : source.records) by_id.emplace(r.id, &r);

    std::unordered_map<std::string, Split> split_of;
    for (const auto& id : fold.train_ids) split_of.emplace(id, Split::Train);
    for (const auto& id : fold.val_ids) split_of.emplace(id, Split::Val);
    for (const auto& id : fold.test_ids) split_of.emplace(id, Split::Test);

    const auto groups = partition_subgraphs({fold.train_ids, fold.val_ids, fold.test_ids},
                                            opt.group_size, seed);
    std::vector<Subgraph> out;
    out.reserve(groups.size());
    for (const auto& ids : groups) {
        Subgraph sg;
        sg.records.reserve(ids.size());
        sg.splits.reserve(ids.size());
        for (const auto& id : ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) {
                throw IndexError("build_subgraphs: fold id '" + id + "' not in the cohort");
            }
            sg.records.push_back(*it->second);
            sg.splits.push_back(split_of.at(id));
        }
        const SimilarityMatrix sim = build_similarity_matrix(source.schema, sg.records, opt.sim_kind);
        sg.graph = knn_graph(sim, opt.knn_k, ids, opt.spd_cap, opt.n_sim_bins);
        out.push_back(std::move(sg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

struct LogRow {
    std::size_t epoch;
    std::string split;
    std::string metric;
    double value;
};

struct TrainLog {
    std::vector<LogRow> rows;

    void add(std::size_t epoch, std::string split, std::string metric, double value) {
        rows.push_back({epoch, std::move(split), std::move(metric), value});
    }

    std::vector<double> series(const std::string& split, const std::string& metric) const {
        std::vector<double> out;
        for (const auto& r : rows) {
            if (r.split == split && r.metric == metric) out.push_back(r.value);
        }
        return out;
    }

    std::string to_csv() const {
        std::ostringstream ss;
        ss << "epoch,split,metric,value\n";
        ss << std::setprecision(17);
        for (const auto& r : rows) {
            ss << r.epoch << ',' << r.split << ',' << r.metric << ',' << r.value << '\n';
        }
        return ss.str();
    }
};

inline ModelParams clone_params(const ModelParams& params) {
    ModelParams out;
    for (const auto& [name, t] : params.tensors) {
        out.tensors.emplace(name, Tensor::make(t.shape(), t.values(), t.requires_grad()));
    }
    return out;
}

// Keeps loss support only on rows of one split; the masked inputs are shared
// by all splits of the subgraph.
inline MaskedBatch restrict_eligible(MaskedBatch mb, const std::vector<Split>& splits, Split keep) {
    const std::size_t p = mb.positions_per_node;
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (splits[i] == keep) continue;
        std::fill(mb.eligible.begin() + static_cast<std::ptrdiff_t>(i * p),
                  mb.eligible.begin() + static_cast<std::ptrdiff_t>((i + 1) * p), char(0));
    }
    return mb;
}

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct PretrainOptions {
    MaskSpec mask;
    std::size_t epochs = 50;
    double lr_start = 1e-5;
    double lr_end = 1e-5;
    LrSchedule schedule = LrSchedule::Constant;
    double lr_power = 1.0;
    SubgraphOptions subgraphs;
};

struct PretrainResult {
    Checkpoint last;
    Checkpoint best;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    TrainLog log;
    std::vector<std::string> warnings;
};

// Masked-imputation pre-training over a fold. Inputs of all nodes are masked;
// the optimized loss reads train rows only, validation rows drive checkpoint
// selection. Labels cannot leak: the view holds none.
inline PretrainResult run_pretraining(const UnlabeledCohortView& view, const Fold& fold,
                                      const ModelConfig& config, const PretrainOptions& opt,
                                      std::uint64_t seed) {
    if (opt.epochs == 0) throw ConfigError("run_pretraining: epochs must be >= 1");
    config.validate();
    opt.mask.validate(view.schema);

    const std::vector<Subgraph> subgraphs = build_subgraphs(view, fold, opt.subgraphs, seed);
    ModelParams params = build_variant(config, mix_seed(seed, fnv1a("init")));
    AdamState adam;

    PretrainResult res;
    bool best_set = false;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const double lr =
            lr_at(opt.schedule, epoch, opt.epochs, opt.lr_start, opt.lr_end, opt.lr_power);

        // one mask draw per record per epoch, shared by the train and val passes
        std::vector<MaskedBatch> batches;
        batches.reserve(subgraphs.size());
        double train_total = 0.0;
        std::size_t train_groups = 0;
        for (const Subgraph& sg : subgraphs) {
            batches.push_back(
                apply_mask_tokens(sg.record_ptrs(), view.schema, opt.mask, epoch, seed, &sg.graph));
            const MaskedBatch train_mb = restrict_eligible(batches.back(), sg.splits, Split::Train);
            if (train_mb.eligible_count() == 0) continue;
            Tape tape;
            const Tensor reps = encoder_forward(&tape, train_mb.inputs, params, config);
            const Tensor preds = decoder_forward(&tape, reps, params, DecoderHead::Imputation);
            const ImputationLoss loss = imputation_loss(&tape, preds, train_mb, view.schema, config);
            tape.backward(loss.total);
            adam_step(params, adam, lr);
            train_total += loss.total.values()[0];
            ++train_groups;
        }
        if (train_groups == 0) {
            throw EmptyLossSupport("run_pretraining: no eligible masked positions on train rows");
        }
        const double train_loss = train_total / static_cast<double>(train_groups);
        res.log.add(epoch, "train", "imputation_loss", train_loss);

        double val_total = 0.0;
        std::size_t val_groups = 0;
        for (std::size_t g = 0; g < subgraphs.size(); ++g) {
            const MaskedBatch val_mb = restrict_eligible(batches[g], subgraphs[g].splits, Split::Val);
            if (val_mb.eligible_count() == 0) continue;
            const Tensor reps = encoder_forward(nullptr, val_mb.inputs, params, config);
            const Tensor preds = decoder_forward(nullptr, reps, params, DecoderHead::Imputation);
            val_total += imputation_loss(nullptr, preds, val_mb, view.schema, config).total.values()[0];
            ++val_groups;
        }
        if (val_groups > 0) {
            const double val_loss = val_total / static_cast<double>(val_groups);
            res.log.add(epoch, "val", "imputation_loss", val_loss);
            if (!best_set || val_loss < res.best_val_loss) {
                best_set = true;
                res.best_val_loss = val_loss;
                res.best_epoch = epoch;
                res.best = make_checkpoint(params, config, &adam,
                                           {{"epoch", static_cast<double>(epoch)},
                                            {"train_imputation_loss", train_loss},
                                            {"val_imputation_loss", val_loss}});
            }
        }
        if (epoch + 1 == opt.epochs) {
            res.last = make_checkpoint(params, config, &adam,
                                       {{"epoch", static_cast<double>(epoch)},
                                        {"train_imputation_loss", train_loss}});
        }
    }
    if (!best_set) {
        res.best = res.last;
        res.best_epoch = opt.epochs - 1;
        res.best_val_loss = std::numeric_limits<double>::quiet_NaN();
        res.warnings.push_back("pretraining: no validation support, best falls back to last epoch");
    }
    return res;
}

// ---------------------------------------------------------------------------
// Task training (fine-tune or from scratch)
// ---------------------------------------------------------------------------

struct TaskOptions {
    std::size_t epochs = 100;
    double lr_start = 1e-4;
    double lr_end = 1e-4;
    LrSchedule schedule = LrSchedule::Constant;
    double lr_power = 1.0;
    SubgraphOptions subgraphs;
};

struct TaskResult {
    Checkpoint best;
    std::size_t best_epoch = 0;
    double best_val_score = 0.0;
    std::string selection_metric = "auc";
    std::map<std::string, double> test_metrics;
    TrainLog log;
    std::vector<std::string> warnings;
};

namespace detail {

struct SplitEval {
    std::vector<double> probs; // rows x L, softmax probabilities
    std::vector<int> labels;
    std::vector<int> preds;

    bool empty() const { return labels.empty(); }
    bool single_class() const {
        for (int l : labels) {
            if (l != labels.front()) return false;
        }
        return true;
    }
    std::vector<double> class1_probs(std::size_t n_classes) const {
        std::vector<double> out;
        out.reserve(labels.size());
        for (std::size_t r = 0; r < labels.size(); ++r) out.push_back(probs[r * n_classes + 1]);
        return out;
    }
};

inline void accumulate_rows(SplitEval eval[3], const Tensor& logits,
                            const std::vector<Split>& splits,
                            const std::vector<PatientRecord>& records) {
    const std::size_t l = logits.dim(1);
    const auto& lv = logits.values();
    for (std::size_t i = 0; i < splits.size(); ++i) {
        if (!records[i].label) continue;
        SplitEval& e = eval[static_cast<std::size_t>(splits[i])];
        const double* row = lv.data() + i * l;
        double mx = row[0];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < l; ++j) {
            if (row[j] > mx) {
                mx = row[j];
                arg = j;
            }
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < l; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < l; ++j) e.probs.push_back(std::exp(row[j] - mx) / sum);
        e.labels.push_back(*records[i].label);
        e.preds.push_back(static_cast<int>(arg));
    }
}

inline double split_auc(const SplitEval& e, std::size_t n_classes) {
    if (n_classes == 2) return metrics::roc_auc_binary(e.class1_probs(n_classes), e.labels);
    return metrics::roc_auc_macro_ovr(e.probs, n_classes, e.labels);
}

} // namespace detail

// Supervised training with CE on labeled train rows; every node of a subgraph
// takes part in the forward pass. Selection follows the validation AUC, the
// reported test metrics belong to the selected epoch.
inline TaskResult run_task_training(const Cohort& cohort, const Fold& fold,
                                    const std::vector<std::string>& labeled_ids,
                                    const ModelParams& init, const ModelConfig& config,
                                    const TaskOptions& opt, std::uint64_t seed) {
    if (opt.epochs == 0) throw ConfigError("run_task_training: epochs must be >= 1");
    config.validate();
    const std::size_t n_classes = config.num_classes;

    const std::vector<Subgraph> subgraphs = build_subgraphs(cohort, fold, opt.subgraphs, seed);
    const std::set<std::string> labeled(labeled_ids.begin(), labeled_ids.end());

    // per-group fixed inputs, CE targets, and CE row masks
    struct GroupData {
        NodeBatch batch;
        std::vector<int> targets;
        Tensor ce_mask;
        std::size_t n_supervised = 0;
    };
    std::vector<GroupData> groups;
    groups.reserve(subgraphs.size());
    std::vector<std::size_t> class_counts(n_classes, 0);
    std::size_t total_supervised = 0;
    for (const Subgraph& sg : subgraphs) {
        GroupData gd;
        gd.batch = make_node_batch(sg.record_ptrs(), cohort.schema, &sg.graph);
        gd.targets.assign(sg.records.size(), 0);
        std::vector<double> mask(sg.records.size(), 0.0);
        for (std::size_t i = 0; i < sg.records.size(); ++i) {
            const PatientRecord& r = sg.records[i];
            if (!r.label) continue;
            gd.targets[i] = *r.label;
            if (sg.splits[i] == Split::Train && labeled.count(r.id) > 0) {
                mask[i] = 1.0;
                ++gd.n_supervised;
                if (*r.label >= 0 && static_cast<std::size_t>(*r.label) < n_classes) {
                    ++class_counts[static_cast<std::size_t>(*r.label)];
                }
            }
        }
        gd.ce_mask = Tensor::constant({sg.records.size()}, std::move(mask));
        total_supervised += gd.n_supervised;
        groups.push_back(std::move(gd));
    }
    if (total_supervised == 0) {
        throw ConfigError("run_task_training: no labeled train nodes");
    }

    TaskResult res;
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (class_counts[c] == 0) {
            res.warnings.push_back("task training: class " + std::to_string(c) +
                                   " has no labeled train node");
        }
    }

    ModelParams params = clone_params(init);
    AdamState adam;
    bool best_set = false;
    bool select_on_accuracy = false;
    Checkpoint last;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const double lr =
            lr_at(opt.schedule, epoch, opt.epochs, opt.lr_start, opt.lr_end, opt.lr_power);

        double ce_total = 0.0;
        std::size_t ce_groups = 0;
        for (const GroupData& gd : groups) {
            if (gd.n_supervised == 0) continue;
            Tape tape;
            const Tensor reps = encoder_forward(&tape, gd.batch, params, config);
            const Tensor logits = decoder_forward(&tape, reps, params, DecoderHead::Task);
            const Tensor loss = ops::cross_entropy_loss(&tape, logits, gd.targets, gd.ce_mask);
            tape.backward(loss);
            adam_step(params, adam, lr);
            ce_total += loss.values()[0];
            ++ce_groups;
        }
        res.log.add(epoch, "train", "ce_loss", ce_total / static_cast<double>(ce_groups));

        // single inference pass per group feeds train/val/test metrics
        detail::SplitEval eval[3];
        for (std::size_t g = 0; g < groups.size(); ++g) {
            const Tensor reps = encoder_forward(nullptr, groups[g].batch, params, config);
            const Tensor logits = decoder_forward(nullptr, reps, params, DecoderHead::Task);
            detail::accumulate_rows(eval, logits, subgraphs[g].splits, subgraphs[g].records);
        }
        for (Split s : {Split::Train, Split::Val, Split::Test}) {
            const detail::SplitEval& e = eval[static_cast<std::size_t>(s)];
            if (e.empty()) continue;
            res.log.add(epoch, split_name(s), "accuracy", metrics::accuracy(e.preds, e.labels));
            if (!e.single_class()) {
                res.log.add(epoch, split_name(s), "auc", detail::split_auc(e, n_classes));
            }
        }

        // validation-based selection: AUC when defined for this fold,
        // accuracy for degenerate single-class validation sets
        const detail::SplitEval& val = eval[static_cast<std::size_t>(Split::Val)];
        if (!val.empty()) {
            if (val.single_class() && !select_on_accuracy) {
                select_on_accuracy = true;
                res.selection_metric = "accuracy";
                res.warnings.push_back(
                    "task training: validation split has a single class, selecting on accuracy");
            }
            const double score = select_on_accuracy ? metrics::accuracy(val.preds, val.labels)
                                                    : detail::split_auc(val, n_classes);
            if (!best_set || score > res.best_val_score) {
                best_set = true;
                res.best_val_score = score;
                res.best_epoch = epoch;
                res.best = make_checkpoint(params, config, &adam,
                                           {{"epoch", static_cast<double>(epoch)},
                                            {"val_" + res.selection_metric, score}});
            }
        }
        if (epoch + 1 == opt.epochs) {
            last = make_checkpoint(params, config, &adam,
                                   {{"epoch", static_cast<double>(epoch)}});
        }
    }
    if (!best_set) {
        res.best = last;
        res.best_epoch = opt.epochs - 1;
        res.best_val_score = std::numeric_limits<double>::quiet_NaN();
        res.selection_metric = "none";
        res.warnings.push_back("task training: no labeled validation rows, best falls back to last epoch");
    }

    // test metrics recomputed from the selected checkpoint
    const ModelParams best_params = params_from_checkpoint(res.best);
    detail::SplitEval eval[3];
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const Tensor reps = encoder_forward(nullptr, groups[g].batch, best_params, config);
        const Tensor logits = decoder_forward(nullptr, reps, best_params, DecoderHead::Task);
        detail::accumulate_rows(eval, logits, subgraphs[g].splits, subgraphs[g].records);
    }
    const detail::SplitEval& test = eval[static_cast<std::size_t>(Split::Test)];
    if (test.empty()) {
        res.warnings.push_back("task training: no labeled test rows, test metrics unavailable");
    } else {
        res.test_metrics["accuracy"] = metrics::accuracy(test.preds, test.labels);
        if (!test.single_class()) {
            res.test_metrics["auc"] = detail::split_auc(test, n_classes);
        } else {
            res.warnings.push_back("task training: test split has a single class, no AUC");
        }
        if (n_classes == 2) {
            res.test_metrics["f1"] = metrics::f1_binary(test.class1_probs(n_classes), test.labels);
        }
    }
    return res;
}

} // namespace popgraph
