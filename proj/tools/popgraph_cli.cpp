// popgraph: reproducible population-graph experiments from the command line.
//
// Subcommands: generate, pretrain, train, finetune, evaluate, sweep.
// Every run writes the resolved RunConfig into the output directory;
// re-invoking with `popgraph --config <out>/run_config.json` reproduces all
// outputs bit-identically.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "popgraph/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace popgraph;

namespace {

struct RunConfig {
    std::string command;
    std::string preset = "static";
    std::string schema_path;
    std::string records_path;
    std::string checkpoint; // finetune: pretrain output dir; evaluate: file
    std::string out = "out";
    std::string mask;        // empty: preset default
    std::string variant = "full";
    std::uint64_t seed = 1;
    std::size_t n = 200;
    std::size_t folds = 0;
    std::size_t fold = 0;    // evaluate
    std::size_t epochs = 0;
    std::size_t n_seeds = 1;
    std::size_t group_size = 500;
    std::size_t knn_k = 5;
    std::size_t block_len = 6;
    double mask_ratio = 0.3;
    double label_ratio = 1.0;
    std::vector<double> label_ratios;
    double epochs_scale = 1.0;
    double lr = 0.0;
    double lr_end = 0.0;
};

json to_json(const RunConfig& rc) {
    return json{{"command", rc.command},
                {"preset", rc.preset},
                {"schema", rc.schema_path},
                {"records", rc.records_path},
                {"checkpoint", rc.checkpoint},
                {"out", rc.out},
                {"mask", rc.mask},
                {"variant", rc.variant},
                {"seed", rc.seed},
                {"n", rc.n},
                {"folds", rc.folds},
                {"fold", rc.fold},
                {"epochs", rc.epochs},
                {"n_seeds", rc.n_seeds},
                {"group_size", rc.group_size},
                {"knn_k", rc.knn_k},
                {"block_len", rc.block_len},
                {"mask_ratio", rc.mask_ratio},
                {"label_ratio", rc.label_ratio},
                {"label_ratios", rc.label_ratios},
                {"epochs_scale", rc.epochs_scale},
                {"lr", rc.lr},
                {"lr_end", rc.lr_end}};
}

RunConfig config_from_json(const json& j) {
    RunConfig rc;
    try {
        rc.command = j.at("command").get<std::string>();
        rc.preset = j.value("preset", rc.preset);
        rc.schema_path = j.value("schema", rc.schema_path);
        rc.records_path = j.value("records", rc.records_path);
        rc.checkpoint = j.value("checkpoint", rc.checkpoint);
        rc.out = j.value("out", rc.out);
        rc.mask = j.value("mask", rc.mask);
        rc.variant = j.value("variant", rc.variant);
        rc.seed = j.value("seed", rc.seed);
        rc.n = j.value("n", rc.n);
        rc.folds = j.value("folds", rc.folds);
        rc.fold = j.value("fold", rc.fold);
        rc.epochs = j.value("epochs", rc.epochs);
        rc.n_seeds = j.value("n_seeds", rc.n_seeds);
        rc.group_size = j.value("group_size", rc.group_size);
        rc.knn_k = j.value("knn_k", rc.knn_k);
        rc.block_len = j.value("block_len", rc.block_len);
        rc.mask_ratio = j.value("mask_ratio", rc.mask_ratio);
        rc.label_ratio = j.value("label_ratio", rc.label_ratio);
        rc.label_ratios = j.value("label_ratios", rc.label_ratios);
        rc.epochs_scale = j.value("epochs_scale", rc.epochs_scale);
        rc.lr = j.value("lr", rc.lr);
        rc.lr_end = j.value("lr_end", rc.lr_end);
    } catch (const json::exception& e) {
        throw ParseError(std::string("run config: ") + e.what());
    }
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IOError("cannot open config '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ParseError("run config '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw IOError("write failed for '" + path.string() + "'");
}

// Provenance first: the run directory always carries its exact config.
void write_provenance(const RunConfig& rc) {
    fs::create_directories(rc.out);
    write_text(fs::path(rc.out) / "run_config.json", to_json(rc).dump(2) + "\n");
}

Cohort load_input_cohort(const RunConfig& rc) {
    if (rc.schema_path.empty() || rc.records_path.empty()) {
        throw ConfigError(rc.command + ": --schema and --records are required");
    }
    return load_cohort(rc.schema_path, rc.records_path);
}

ExperimentOptions make_options(const RunConfig& rc) {
    ExperimentOptions opt;
    opt.preset = synthetic::preset_from_string(rc.preset);
    opt.variant = variant_from_string(rc.variant);
    opt.folds = rc.folds;
    opt.mask = default_mask(opt.preset);
    if (!rc.mask.empty()) opt.mask.strategy = mask_strategy_from_string(rc.mask);
    opt.mask.ratio = rc.mask_ratio;
    opt.mask.block_len = rc.block_len;
    opt.epochs_scale = rc.epochs_scale;
    opt.epochs_override = rc.epochs;
    opt.lr_override = rc.lr;
    opt.lr_end_override = rc.lr_end;
    opt.subgraphs.group_size = rc.group_size;
    opt.subgraphs.knn_k = rc.knn_k;
    opt.seed = rc.seed;
    return opt;
}

std::string format_double(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

void print_warnings(const std::vector<std::string>& warnings) {
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

int run_generate(const RunConfig& rc) {
    synthetic::Knobs knobs;
    knobs.preset = synthetic::preset_from_string(rc.preset);
    const Cohort cohort = synthetic::synthesize_cohort(rc.seed, rc.n, knobs);
    write_provenance(rc);
    const fs::path dir(rc.out);
    save_cohort(cohort, (dir / "schema.json").string(), (dir / "records.json").string());
    std::cout << "generated " << cohort.size() << " records (" << rc.preset << ") into " << rc.out
              << "\n";
    return 0;
}

int run_pretrain(const RunConfig& rc) {
    const Cohort cohort = load_input_cohort(rc);
    write_provenance(rc);
    const PretrainArtifacts art = experiment_pretrain(cohort, make_options(rc));

    std::ostringstream summary;
    summary << "fold,best_epoch,best_val_loss\n";
    for (std::size_t f = 0; f < art.fold_results.size(); ++f) {
        const PretrainResult& res = art.fold_results[f];
        const fs::path fold_dir = fs::path(rc.out) / ("fold" + std::to_string(f));
        fs::create_directories(fold_dir);
        save_checkpoint(res.best, (fold_dir / "pretrain_best.ckpt").string());
        save_checkpoint(res.last, (fold_dir / "pretrain_last.ckpt").string());
        write_text(fold_dir / "pretrain_log.csv", res.log.to_csv());
        summary << f << ',' << res.best_epoch << ',' << format_double(res.best_val_loss) << '\n';
        print_warnings(res.warnings);
        std::cout << "fold " << f << ": best epoch " << res.best_epoch << ", val imputation loss "
                  << res.best_val_loss << "\n";
    }
    write_text(fs::path(rc.out) / "summary.csv", summary.str());
    return 0;
}

int run_task(const RunConfig& rc, Mode mode) {
    const Cohort cohort = load_input_cohort(rc);
    write_provenance(rc);

    std::vector<Checkpoint> pretrained;
    if (mode == Mode::Finetune) {
        if (rc.checkpoint.empty()) throw ConfigError("finetune: --checkpoint is required");
        const ExperimentOptions opt = make_options(rc);
        Cohort interp = cohort;
        interpolate_cohort(interp);
        const std::size_t n_folds = experiment_folds(interp, opt).folds.size();
        for (std::size_t f = 0; f < n_folds; ++f) {
            const fs::path path =
                fs::path(rc.checkpoint) / ("fold" + std::to_string(f)) / "pretrain_best.ckpt";
            pretrained.push_back(load_checkpoint(path.string()));
        }
    }

    const TaskArtifacts art =
        experiment_task(cohort, mode, rc.label_ratio,
                        mode == Mode::Finetune ? &pretrained : nullptr, make_options(rc));

    const std::vector<std::string> metric_names{"accuracy", "auc", "f1"};
    std::ostringstream summary;
    summary << "fold,labeled_count,best_epoch,accuracy,auc,f1\n";
    for (std::size_t f = 0; f < art.fold_results.size(); ++f) {
        const TaskResult& res = art.fold_results[f];
        const fs::path fold_dir = fs::path(rc.out) / ("fold" + std::to_string(f));
        fs::create_directories(fold_dir);
        save_checkpoint(res.best, (fold_dir / "task.ckpt").string());
        write_text(fold_dir / "task_log.csv", res.log.to_csv());
        summary << f << ',' << art.labeled_counts[f] << ',' << res.best_epoch;
        for (const auto& name : metric_names) {
            const auto it = res.test_metrics.find(name);
            summary << ',' << (it == res.test_metrics.end() ? "" : format_double(it->second));
        }
        summary << '\n';
        print_warnings(res.warnings);
        std::cout << "fold " << f << ": labeled " << art.labeled_counts[f] << ", best epoch "
                  << res.best_epoch << ", test accuracy "
                  << res.test_metrics.at("accuracy") << "\n";
    }
    write_text(fs::path(rc.out) / "summary.csv", summary.str());

    std::ostringstream report;
    report << "metric,mean,stddev,n_folds,formatted\n";
    for (const auto& [name, rep] : art.reports) {
        report << name << ',' << format_double(rep.mean()) << ',' << format_double(rep.stddev())
               << ',' << rep.n_folds() << ',' << rep.formatted() << '\n';
        std::cout << name << ": " << rep.formatted() << "\n";
    }
    write_text(fs::path(rc.out) / "report.csv", report.str());
    return 0;
}

int run_evaluate(const RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("evaluate: --checkpoint is required");
    const Cohort cohort = load_input_cohort(rc);
    write_provenance(rc);

    const ExperimentOptions opt = make_options(rc);
    Cohort interp = cohort;
    interpolate_cohort(interp);
    const FoldPlan plan = experiment_folds(interp, opt);
    if (rc.fold >= plan.folds.size()) {
        throw ConfigError("evaluate: fold index " + std::to_string(rc.fold) + " out of range");
    }
    ModelConfig config = detail::resolved_config(interp, opt);
    const Checkpoint ck = load_checkpoint(rc.checkpoint);
    const auto metrics = evaluate_checkpoint(cohort, plan.folds[rc.fold], config, ck,
                                             detail::resolved_subgraphs(opt),
                                             mix_seed(opt.seed, fnv1a("fold"), rc.fold));

    std::ostringstream csv;
    csv << "metric,value\n";
    for (const auto& [name, value] : metrics) {
        csv << name << ',' << format_double(value) << '\n';
        std::cout << name << ": " << value << "\n";
    }
    write_text(fs::path(rc.out) / "metrics.csv", csv.str());
    return 0;
}

int run_sweep(const RunConfig& rc) {
    const Cohort cohort = load_input_cohort(rc);
    write_provenance(rc);

    SweepOptions sweep;
    if (!rc.label_ratios.empty()) sweep.ratios = rc.label_ratios;
    sweep.n_seeds = rc.n_seeds;
    const SweepResult res = run_label_sweep(cohort, make_options(rc), sweep);
    write_text(fs::path(rc.out) / "sweep.csv", res.csv);
    std::cout << res.csv;
    return 0;
}

int dispatch(const RunConfig& rc) {
    if (rc.command == "generate") return run_generate(rc);
    if (rc.command == "pretrain") return run_pretrain(rc);
    if (rc.command == "train") return run_task(rc, Mode::Scratch);
    if (rc.command == "finetune") return run_task(rc, Mode::Finetune);
    if (rc.command == "evaluate") return run_evaluate(rc);
    if (rc.command == "sweep") return run_sweep(rc);
    throw ConfigError("unknown command '" + rc.command + "'");
}

void add_shared_options(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--preset", rc.preset, "Dataset preset: static|timeseries");
    cmd->add_option("--seed", rc.seed, "Base RNG seed");
    cmd->add_option("--out", rc.out, "Output directory");
}

void add_training_options(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--schema", rc.schema_path, "Schema JSON path");
    cmd->add_option("--records", rc.records_path, "Records JSON path");
    cmd->add_option("--folds", rc.folds, "Fold count (0: preset default)");
    cmd->add_option("--mask", rc.mask, "Mask strategy: static|fm|bm (default per preset)");
    cmd->add_option("--mask-ratio", rc.mask_ratio, "Masked fraction");
    cmd->add_option("--block-len", rc.block_len, "Block mask length (hours)");
    cmd->add_option("--variant", rc.variant, "Model variant: full|linear|no-ts-transformer");
    cmd->add_option("--epochs", rc.epochs, "Epoch override (0: preset schedule)");
    cmd->add_option("--epochs-scale", rc.epochs_scale, "Scale preset epoch counts");
    cmd->add_option("--lr", rc.lr, "Learning-rate override (constant unless --lr-end)");
    cmd->add_option("--lr-end", rc.lr_end, "Final learning rate (poly schedule)");
    cmd->add_option("--group-size", rc.group_size, "Max patients per subgraph");
    cmd->add_option("--knn-k", rc.knn_k, "k for the k-NN population graph");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"population-graph transformer experiments"};
    app.require_subcommand(0, 1);

    RunConfig rc;
    std::string config_path;
    app.add_option("--config", config_path, "Run a serialized RunConfig (reproduces a run)");

    CLI::App* generate = app.add_subcommand("generate", "Synthesize a cohort");
    add_shared_options(generate, rc);
    generate->add_option("--n", rc.n, "Number of patients (>= 20)");

    CLI::App* pretrain = app.add_subcommand("pretrain", "Masked-imputation pre-training per fold");
    add_shared_options(pretrain, rc);
    add_training_options(pretrain, rc);

    CLI::App* train = app.add_subcommand("train", "Supervised training from scratch");
    add_shared_options(train, rc);
    add_training_options(train, rc);
    train->add_option("--label-ratio", rc.label_ratio, "Labeled fraction of each train split");

    CLI::App* finetune = app.add_subcommand("finetune", "Fine-tune from pre-training checkpoints");
    add_shared_options(finetune, rc);
    add_training_options(finetune, rc);
    finetune->add_option("--label-ratio", rc.label_ratio, "Labeled fraction of each train split");
    finetune->add_option("--checkpoint", rc.checkpoint, "Pretrain output directory");

    CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a fold");
    add_shared_options(evaluate, rc);
    add_training_options(evaluate, rc);
    evaluate->add_option("--checkpoint", rc.checkpoint, "Checkpoint file");
    evaluate->add_option("--fold", rc.fold, "Fold index");

    CLI::App* sweep = app.add_subcommand("sweep", "Scratch-vs-finetune label-ratio sweep");
    add_shared_options(sweep, rc);
    add_training_options(sweep, rc);
    sweep->add_option("--label-ratios", rc.label_ratios, "Label ratios to sweep");
    sweep->add_option("--n-seeds", rc.n_seeds, "Seeds per cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (!config_path.empty()) return dispatch(load_run_config(config_path));
        for (CLI::App* cmd : {generate, pretrain, train, finetune, evaluate, sweep}) {
            if (cmd->parsed()) {
                rc.command = cmd->get_name();
                return dispatch(rc);
            }
        }
        std::cerr << app.help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e);
    }
}
