#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "popgraph/checkpoint.hpp"
#include "popgraph/optim.hpp"

using namespace popgraph;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.num_graphormer_layers = 1;
    c.num_ts_layers = 1;
    c.attention_heads = 2;
    c.d_discrete = 4;
    c.d_continuous = 4;
    c.d_series = 4;
    c.d_ts_token = 4;
    c.ffn_multiplier = 2;
    c.deg_cap = 3;
    c.discrete_vocab = {3, 2};
    c.n_continuous = 2;
    c.n_series = 2;
    c.series_length = 3;
    c.num_classes = 2;
    return c;
}

ModelParams toy_params(Rng& rng) {
    ModelParams p;
    p.tensors.emplace("w.a", test_helpers::random_param(rng, {2, 3}));
    p.tensors.emplace("w.b", test_helpers::random_param(rng, {4}));
    p.tensors.emplace("w.c", test_helpers::random_param(rng, {1, 2, 2}));
    return p;
}

void set_random_grads(ModelParams& p, Rng& rng) {
    for (auto& [name, t] : p.tensors) {
        t.zero_grad();
        for (auto& g : t.mutable_grad()) g = rng.next_uniform(-2.0, 2.0);
    }
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Plain textbook Adam over raw arrays, the oracle for adam_step.
struct ReferenceAdam {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t t = 0;
    std::map<std::string, std::vector<double>> m, v;

    void step(std::map<std::string, std::vector<double>>& values,
              const std::map<std::string, std::vector<double>>& grads, double lr) {
        t += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, vals] : values) {
            const auto& g = grads.at(name);
            auto& mm = m[name];
            auto& vv = v[name];
            if (mm.size() != g.size()) mm.assign(g.size(), 0.0);
            if (vv.size() != g.size()) vv.assign(g.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = mm[i] / bc1;
                const double vhat = vv[i] / bc2;
                vals[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

} // namespace

TEST_CASE("adam_step matches a textbook reference over several steps", "[train]") {
    Rng rng(31);
    ModelParams params = toy_params(rng);

    std::map<std::string, std::vector<double>> shadow_values;
    for (const auto& [name, t] : params.tensors) shadow_values[name] = t.values();
    ReferenceAdam ref;
    AdamState state;

    for (int step = 0; step < 5; ++step) {
        Rng grad_rng(100 + step);
        set_random_grads(params, grad_rng);
        std::map<std::string, std::vector<double>> grads;
        for (const auto& [name, t] : params.tensors) grads[name] = t.grad();

        adam_step(params, state, 0.01);
        ref.step(shadow_values, grads, 0.01);

        REQUIRE(state.t == ref.t);
        for (const auto& [name, t] : params.tensors) {
            INFO("tensor " << name << " at step " << step);
            REQUIRE(bits_equal(t.values(), shadow_values[name]));
            REQUIRE(bits_equal(state.m[name], ref.m[name]));
            REQUIRE(bits_equal(state.v[name], ref.v[name]));
        }
    }
}

TEST_CASE("adam_step single-step hand example", "[train]") {
    // g=1 at t=1: m_hat = v_hat = 1, so the update is lr/(1+eps) ~ lr.
    ModelParams p;
    p.tensors.emplace("x", Tensor::param({1}, std::vector<double>{1.0}));
    p.tensors.at("x").zero_grad();
    p.tensors.at("x").mutable_grad()[0] = 1.0;

    AdamState state;
    adam_step(p, state, 0.1);

    REQUIRE(state.t == 1);
    REQUIRE_THAT(p.tensors.at("x").values()[0], Catch::Matchers::WithinAbs(0.9, 1e-8));
    REQUIRE_THAT(state.m.at("x")[0], Catch::Matchers::WithinAbs(0.1, 1e-15));
    REQUIRE_THAT(state.v.at("x")[0], Catch::Matchers::WithinAbs(0.001, 1e-15));
}

TEST_CASE("adam_step zero grads and skip rules", "[train]") {
    Rng rng(7);
    ModelParams params = toy_params(rng);
    std::map<std::string, std::vector<double>> before;
    for (const auto& [name, t] : params.tensors) before[name] = t.values();

    SECTION("zero gradients leave values bitwise unchanged but advance t") {
        for (auto& [name, t] : params.tensors) t.zero_grad();
        AdamState state;
        adam_step(params, state, 0.5);
        REQUIRE(state.t == 1);
        for (const auto& [name, t] : params.tensors) {
            REQUIRE(bits_equal(t.values(), before[name]));
        }
    }

    SECTION("tensors without a grad buffer are skipped entirely") {
        params.tensors.at("w.a").zero_grad();
        params.tensors.at("w.a").mutable_grad()[0] = 1.0;
        // w.b and w.c keep no grad buffer at all
        AdamState state;
        adam_step(params, state, 0.1);
        REQUIRE(!bits_equal(params.tensors.at("w.a").values(), before["w.a"]));
        REQUIRE(bits_equal(params.tensors.at("w.b").values(), before["w.b"]));
        REQUIRE(bits_equal(params.tensors.at("w.c").values(), before["w.c"]));
        REQUIRE(state.m.count("w.b") == 0);
        REQUIRE(state.v.count("w.c") == 0);
    }

    SECTION("non-trainable tensors are never updated") {
        ModelParams q;
        q.tensors.emplace("frozen", Tensor::constant({2}, {1.0, 2.0}));
        q.tensors.at("frozen").zero_grad();
        q.tensors.at("frozen").mutable_grad() = {5.0, 5.0};
        AdamState state;
        adam_step(q, state, 0.1);
        REQUIRE(q.tensors.at("frozen").values() == std::vector<double>{1.0, 2.0});
    }
}

TEST_CASE("adam_step rejects non-finite gradients", "[train]") {
    Rng rng(9);
    ModelParams params = toy_params(rng);
    set_random_grads(params, rng);

    SECTION("NaN") {
        params.tensors.at("w.b").mutable_grad()[2] = std::nan("");
        AdamState state;
        REQUIRE_THROWS_MATCHES(adam_step(params, state, 0.1), DivergenceError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("w.b")));
    }
    SECTION("infinity") {
        params.tensors.at("w.c").mutable_grad()[0] = std::numeric_limits<double>::infinity();
        AdamState state;
        REQUIRE_THROWS_AS(adam_step(params, state, 0.1), DivergenceError);
    }
}

TEST_CASE("adam_step trajectories are deterministic", "[train]") {
    auto run = []() {
        Rng rng(77);
        ModelParams params = toy_params(rng);
        AdamState state;
        for (int step = 0; step < 4; ++step) {
            Rng grad_rng(500 + step);
            set_random_grads(params, grad_rng);
            adam_step(params, state, 0.02);
        }
        std::map<std::string, std::vector<double>> out;
        for (const auto& [name, t] : params.tensors) out[name] = t.values();
        return out;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (const auto& [name, vals] : a) REQUIRE(bits_equal(vals, b.at(name)));
}

TEST_CASE("poly_lr follows the linear decay contract", "[train]") {
    REQUIRE(poly_lr(0, 1200, 1e-5, 5e-6) == 1e-5);
    REQUIRE(poly_lr(1199, 1200, 1e-5, 5e-6) == 5e-6);
    REQUIRE_THAT(poly_lr(1, 3, 1e-5, 5e-6), Catch::Matchers::WithinRel(7.5e-6, 1e-12));
    REQUIRE(poly_lr(0, 1, 1e-3, 1e-4) == 1e-3);

    // quadratic power bends the curve toward lr_end
    REQUIRE_THAT(poly_lr(1, 3, 1e-5, 5e-6, 2.0), Catch::Matchers::WithinRel(6.25e-6, 1e-12));

    // monotone non-increasing across the run
    double prev = poly_lr(0, 50, 1e-3, 1e-4);
    for (std::size_t e = 1; e < 50; ++e) {
        const double cur = poly_lr(e, 50, 1e-3, 1e-4);
        REQUIRE(cur <= prev);
        prev = cur;
    }

    REQUIRE_THROWS_AS(poly_lr(5, 5, 1e-5, 5e-6), ConfigError);
    REQUIRE_THROWS_AS(poly_lr(0, 0, 1e-5, 5e-6), ConfigError);
}

TEST_CASE("lr_at dispatches by schedule", "[train]") {
    REQUIRE(lr_at(LrSchedule::Constant, 0, 100, 1e-4, 1e-5) == 1e-4);
    REQUIRE(lr_at(LrSchedule::Constant, 99, 100, 1e-4, 1e-5) == 1e-4);
    REQUIRE(lr_at(LrSchedule::Poly, 99, 100, 1e-4, 1e-5) == 1e-5);
    REQUIRE_THROWS_AS(lr_at(LrSchedule::Constant, 100, 100, 1e-4, 1e-5), ConfigError);

    REQUIRE(lr_schedule_from_string("constant") == LrSchedule::Constant);
    REQUIRE(lr_schedule_from_string("poly") == LrSchedule::Poly);
    REQUIRE_THROWS_AS(lr_schedule_from_string("cosine"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact", "[train]") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = build_variant(cfg, 7);

    // one optimizer step so the Adam state is nontrivial
    Rng rng(3);
    set_random_grads(params, rng);
    AdamState state;
    adam_step(params, state, 1e-3);

    std::map<std::string, double> metrics{{"best_epoch", 12.0}, {"val_loss", 0.25}};
    Checkpoint ck = make_checkpoint(params, cfg, &state, metrics);
    REQUIRE(ck.fingerprint == config_fingerprint(cfg));
    REQUIRE(ck.encoder_fp == encoder_fingerprint(cfg));
    REQUIRE(ck.tensors.size() == params.tensors.size());

    const std::string path_a = "ckpt_roundtrip_a.bin";
    const std::string path_b = "ckpt_roundtrip_b.bin";
    save_checkpoint(ck, path_a);
    const Checkpoint loaded = load_checkpoint(path_a);

    REQUIRE(loaded.version == 1);
    REQUIRE(loaded.fingerprint == ck.fingerprint);
    REQUIRE(loaded.encoder_fp == ck.encoder_fp);
    REQUIRE(loaded.metrics == ck.metrics);
    REQUIRE(loaded.tensors.size() == ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) {
        INFO("tensor " << name);
        REQUIRE(loaded.tensors.count(name) == 1);
        const Tensor& lt = loaded.tensors.at(name);
        REQUIRE(lt.shape() == t.shape());
        REQUIRE(bits_equal(lt.values(), t.values()));
    }
    REQUIRE(loaded.has_adam);
    REQUIRE(loaded.adam.t == state.t);
    REQUIRE(loaded.adam.m.size() == state.m.size());
    for (const auto& [name, mv] : state.m) REQUIRE(bits_equal(loaded.adam.m.at(name), mv));
    for (const auto& [name, vv] : state.v) REQUIRE(bits_equal(loaded.adam.v.at(name), vv));

    // save -> load -> save produces byte-identical files
    save_checkpoint(loaded, path_b);
    REQUIRE(read_file_bytes(path_a) == read_file_bytes(path_b));

    // trainable view of the snapshot
    ModelParams back = params_from_checkpoint(loaded);
    REQUIRE(back.tensors.size() == params.tensors.size());
    for (const auto& [name, t] : back.tensors) {
        REQUIRE(t.requires_grad());
        REQUIRE(bits_equal(t.values(), params.at(name).values()));
    }

    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
}

TEST_CASE("checkpoint without adam state omits the optimizer section", "[train]") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = build_variant(cfg, 2);
    Checkpoint ck = make_checkpoint(params, cfg);
    REQUIRE_FALSE(ck.has_adam);
    const std::string buf = serialize_checkpoint(ck);
    const Checkpoint rt = deserialize_checkpoint(buf);
    REQUIRE_FALSE(rt.has_adam);
    REQUIRE(rt.adam.t == 0);
    REQUIRE(rt.adam.m.empty());
}

TEST_CASE("checkpoint format guards", "[train]") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = build_variant(cfg, 5);
    const Checkpoint ck = make_checkpoint(params, cfg);
    const std::string buf = serialize_checkpoint(ck);

    SECTION("corrupted magic") {
        std::string bad = buf;
        bad[0] = 'X';
        REQUIRE_THROWS_MATCHES(deserialize_checkpoint(bad), FormatError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("magic")));
    }
    SECTION("unsupported version") {
        std::string bad = buf;
        bad[8] = 2; // version is the u32 right after the magic
        REQUIRE_THROWS_MATCHES(deserialize_checkpoint(bad), FormatError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("version")));
    }
    SECTION("truncation at every structural boundary") {
        for (std::size_t cut : {std::size_t{4}, std::size_t{9}, std::size_t{21},
                                buf.size() / 2, buf.size() - 1}) {
            INFO("cut at " << cut << " of " << buf.size());
            REQUIRE_THROWS_AS(deserialize_checkpoint(buf.substr(0, cut)), FormatError);
        }
    }
    SECTION("trailing bytes") {
        REQUIRE_THROWS_AS(deserialize_checkpoint(buf + "z"), FormatError);
    }
    SECTION("io errors") {
        REQUIRE_THROWS_AS(save_checkpoint(ck, "/no_such_dir_zz/x.ckpt"), IOError);
        REQUIRE_THROWS_AS(load_checkpoint("definitely_missing_file.ckpt"), IOError);
    }
}

TEST_CASE("fingerprints separate the encoder from the task head", "[train]") {
    const ModelConfig base = tiny_config();

    ModelConfig more_classes = base;
    more_classes.num_classes = 5;
    REQUIRE(encoder_fingerprint(more_classes) == encoder_fingerprint(base));
    REQUIRE(config_fingerprint(more_classes) != config_fingerprint(base));

    ModelConfig wider = base;
    wider.d_discrete = 8;
    REQUIRE(encoder_fingerprint(wider) != encoder_fingerprint(base));

    ModelConfig linear = base;
    linear.use_graphormer = false;
    REQUIRE(encoder_fingerprint(linear) != encoder_fingerprint(base));

    ModelConfig renamed = base;
    renamed.discrete_names = {"apoe4", "sex"};
    REQUIRE(encoder_fingerprint(renamed) != encoder_fingerprint(base));
}

TEST_CASE("init_finetune transfers the encoder and refreshes the task head", "[train]") {
    const ModelConfig cfg = tiny_config();
    ModelParams pretrained = build_variant(cfg, 1);
    // simulate training drift so transferred weights differ from any fresh init
    for (auto& [name, t] : pretrained.tensors) {
        if (name.rfind("encoder.", 0) != 0) continue;
        for (auto& v : t.mutable_values()) v += 0.25;
    }
    const Checkpoint ck = make_checkpoint(pretrained, cfg);

    const ModelParams ft = init_finetune(ck, cfg, 999);
    const ModelParams fresh = build_variant(cfg, 999);

    std::size_t encoder_tensors = 0;
    for (const auto& [name, t] : ft.tensors) {
        REQUIRE(t.requires_grad());
        if (name.rfind("encoder.", 0) == 0) {
            ++encoder_tensors;
            REQUIRE(bits_equal(t.values(), ck.tensors.at(name).values()));
        }
        REQUIRE(name.rfind("decoder.imputation.", 0) != 0);
    }
    REQUIRE(encoder_tensors > 0);

    // the task head comes from the requested seed, not from the checkpoint
    REQUIRE(bits_equal(ft.at("decoder.task.W").values(), fresh.at("decoder.task.W").values()));
    REQUIRE(!bits_equal(ft.at("decoder.task.W").values(),
                        ck.tensors.at("decoder.task.W").values()));

    // a different class count reuses the same encoder checkpoint
    ModelConfig five = cfg;
    five.num_classes = 5;
    const ModelParams ft5 = init_finetune(ck, five, 4);
    REQUIRE(ft5.at("decoder.task.W").dim(1) == 5);
    REQUIRE(bits_equal(ft5.at("encoder.final_ln.gamma").values(),
                       ck.tensors.at("encoder.final_ln.gamma").values()));
}

TEST_CASE("init_finetune guards", "[train]") {
    const ModelConfig cfg = tiny_config();
    const Checkpoint ck = make_checkpoint(build_variant(cfg, 1), cfg);

    SECTION("mismatched encoder config") {
        ModelConfig wider = cfg;
        wider.d_discrete = 8;
        REQUIRE_THROWS_AS(init_finetune(ck, wider, 0), IncompatibleCheckpoint);
    }
    SECTION("missing tensor in a tampered checkpoint") {
        Checkpoint bad = ck;
        bad.tensors.erase("encoder.final_ln.gamma");
        REQUIRE_THROWS_AS(init_finetune(bad, cfg, 0), IncompatibleCheckpoint);
    }
    SECTION("wrong tensor shape in a tampered checkpoint") {
        Checkpoint bad = ck;
        bad.tensors.erase("encoder.final_ln.gamma");
        bad.tensors.emplace("encoder.final_ln.gamma", Tensor::zeros({3}));
        REQUIRE_THROWS_AS(init_finetune(bad, cfg, 0), IncompatibleCheckpoint);
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#include "popgraph/synthetic.hpp"
#include "popgraph/train.hpp"

namespace {

Fold simple_fold(const Cohort& c, std::size_t n_train, std::size_t n_val) {
    Fold f;
    for (std::size_t i = 0; i < c.records.size(); ++i) {
        const std::string& id = c.records[i].id;
        if (i < n_train) {
            f.train_ids.push_back(id);
        } else if (i < n_train + n_val) {
            f.val_ids.push_back(id);
        } else {
            f.test_ids.push_back(id);
        }
    }
    return f;
}

ModelConfig desk_config(const FeatureSchema& schema) {
    ModelConfig c = ModelConfig::from_schema(schema);
    c.num_graphormer_layers = 1;
    c.num_ts_layers = 1;
    c.attention_heads = 2;
    c.d_discrete = 8;
    c.d_continuous = 8;
    c.d_series = 8;
    c.d_ts_token = 4;
    c.ffn_multiplier = 2;
    c.deg_cap = 8;
    return c;
}

// Noise-free clusters: labels are recoverable from the features alone.
Cohort separable_cohort(std::size_t n) {
    synthetic::Knobs knobs;
    Cohort c;
    c.schema = synthetic::make_schema(knobs);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t z = i % 3;
        PatientRecord r;
        r.id = "s" + std::to_string(i);
        for (std::size_t f = 0; f < c.schema.n_discrete(); ++f) {
            const std::size_t vocab = c.schema.discrete_features[f].vocab_size;
            r.discrete.push_back(static_cast<int>((z + f) % vocab));
        }
        for (std::size_t f = 0; f < c.schema.n_continuous(); ++f) {
            r.continuous.push_back(2.0 * static_cast<double>(z) +
                                   0.05 * static_cast<double>((i / 3) % 5));
        }
        r.label = static_cast<int>(z);
        c.records.push_back(std::move(r));
    }
    return c;
}

Cohort desk_ts_cohort(std::uint64_t seed, std::size_t n) {
    synthetic::Knobs knobs;
    knobs.preset = synthetic::Preset::Timeseries;
    knobs.n_measurements = 3;
    knobs.n_treatments = 1;
    knobs.series_length = 8;
    Cohort c = synthetic::synthesize_cohort(seed, n, knobs);
    interpolate_cohort(c);
    return c;
}

SubgraphOptions desk_groups(std::size_t group_size, SimilarityKind kind) {
    SubgraphOptions opt;
    opt.group_size = group_size;
    opt.knn_k = 5;
    opt.sim_kind = kind;
    return opt;
}

} // namespace

TEST_CASE("UnlabeledCohortView strips every label", "[train]") {
    const Cohort cohort = synthetic::synthesize_cohort(3, 25, {});
    const UnlabeledCohortView view = UnlabeledCohortView::from(cohort);
    REQUIRE(view.records.size() == cohort.records.size());
    for (std::size_t i = 0; i < view.records.size(); ++i) {
        REQUIRE_FALSE(view.records[i].label.has_value());
        REQUIRE(view.records[i].id == cohort.records[i].id);
        REQUIRE(view.records[i].discrete == cohort.records[i].discrete);
        REQUIRE(view.records[i].continuous == cohort.records[i].continuous);
    }
}

TEST_CASE("build_subgraphs covers the fold with aligned tags", "[train]") {
    const Cohort cohort = synthetic::synthesize_cohort(17, 30, {});
    const Fold fold = simple_fold(cohort, 20, 5);
    const auto subgraphs = build_subgraphs(cohort, fold, desk_groups(15, SimilarityKind::Static), 4);

    REQUIRE(subgraphs.size() == 2);
    std::set<std::string> seen;
    for (const auto& sg : subgraphs) {
        REQUIRE(sg.graph.n == sg.records.size());
        REQUIRE(sg.splits.size() == sg.records.size());
        for (std::size_t i = 0; i < sg.records.size(); ++i) {
            REQUIRE(sg.records[i].id == sg.graph.node_ids[i]);
            const std::string& id = sg.records[i].id;
            REQUIRE(seen.insert(id).second);
            const bool in_train =
                std::find(fold.train_ids.begin(), fold.train_ids.end(), id) != fold.train_ids.end();
            const bool in_val =
                std::find(fold.val_ids.begin(), fold.val_ids.end(), id) != fold.val_ids.end();
            if (sg.splits[i] == Split::Train) REQUIRE(in_train);
            if (sg.splits[i] == Split::Val) REQUIRE(in_val);
            if (sg.splits[i] == Split::Test) REQUIRE((!in_train && !in_val));
        }
    }
    REQUIRE(seen.size() == 30);

    Fold bogus = fold;
    bogus.val_ids.push_back("ghost");
    REQUIRE_THROWS_AS(build_subgraphs(cohort, bogus, desk_groups(15, SimilarityKind::Static), 4),
                      IndexError);
}

TEST_CASE("restrict_eligible zeroes rows outside the kept split", "[train]") {
    MaskedBatch mb;
    mb.positions_per_node = 4;
    mb.mask.assign(12, char(1));
    mb.eligible.assign(12, char(1));
    const std::vector<Split> splits{Split::Train, Split::Val, Split::Test};

    const MaskedBatch kept = restrict_eligible(mb, splits, Split::Val);
    for (std::size_t i = 0; i < 12; ++i) {
        const bool val_row = i >= 4 && i < 8;
        REQUIRE(kept.eligible[i] == (val_row ? char(1) : char(0)));
        REQUIRE(kept.mask[i] == char(1)); // inputs and mask untouched
    }
    REQUIRE(mb.eligible == std::vector<char>(12, char(1))); // original intact
}

TEST_CASE("TrainLog renders a deterministic CSV", "[train]") {
    TrainLog log;
    log.add(0, "train", "ce_loss", 0.5);
    log.add(1, "val", "auc", 0.875);
    REQUIRE(log.to_csv() == "epoch,split,metric,value\n0,train,ce_loss,0.5\n1,val,auc,0.875\n");
    REQUIRE(log.series("val", "auc") == std::vector<double>{0.875});
    REQUIRE(log.series("val", "ce_loss").empty());
}

TEST_CASE("pretraining loss decreases on a static cohort", "[train][slow]") {
    const Cohort cohort = synthetic::synthesize_cohort(21, 60, {});
    const Fold fold = simple_fold(cohort, 40, 10);
    const UnlabeledCohortView view = UnlabeledCohortView::from(cohort);
    const ModelConfig config = desk_config(cohort.schema);

    PretrainOptions opt;
    opt.mask.strategy = MaskStrategy::StaticRandom;
    opt.mask.ratio = 0.3;
    opt.epochs = 50;
    opt.lr_start = 1e-3;
    opt.lr_end = 1e-4;
    opt.schedule = LrSchedule::Poly;
    opt.subgraphs = desk_groups(30, SimilarityKind::Static);

    const PretrainResult res = run_pretraining(view, fold, config, opt, 2024);

    const std::vector<double> train = res.log.series("train", "imputation_loss");
    const std::vector<double> val = res.log.series("val", "imputation_loss");
    REQUIRE(train.size() == 50);
    REQUIRE(val.size() == 50);

    // means of consecutive 10-epoch windows decrease strictly
    std::vector<double> window_means;
    for (std::size_t w = 0; w < 5; ++w) {
        double sum = 0.0;
        for (std::size_t e = 10 * w; e < 10 * (w + 1); ++e) sum += train[e];
        window_means.push_back(sum / 10.0);
    }
    for (std::size_t w = 1; w < window_means.size(); ++w) {
        INFO("window " << w << ": " << window_means[w - 1] << " -> " << window_means[w]);
        REQUIRE(window_means[w] < window_means[w - 1]);
    }

    // best checkpoint tracks the first minimum of the validation series
    const auto best_it = std::min_element(val.begin(), val.end());
    REQUIRE(res.best_epoch == static_cast<std::size_t>(best_it - val.begin()));
    REQUIRE(res.best_val_loss == *best_it);
    REQUIRE(res.best.metrics.at("val_imputation_loss") == *best_it);
    REQUIRE(res.best.metrics.at("epoch") == static_cast<double>(res.best_epoch));
    REQUIRE(res.last.metrics.at("epoch") == 49.0);
    REQUIRE(res.warnings.empty());
}

TEST_CASE("pretraining never reads labels and is deterministic", "[train][slow]") {
    const Cohort cohort = desk_ts_cohort(11, 40);
    Cohort flipped = cohort;
    for (auto& r : flipped.records) r.label = 1 - *r.label;
    const Fold fold = simple_fold(cohort, 28, 6);

    ModelConfig config = desk_config(cohort.schema);

    PretrainOptions opt;
    opt.mask.strategy = MaskStrategy::BlockMasking;
    opt.mask.ratio = 0.3;
    opt.mask.block_len = 3;
    opt.epochs = 6;
    opt.lr_start = 1e-3;
    opt.lr_end = 1e-3;
    opt.subgraphs = desk_groups(20, SimilarityKind::Timeseries);

    const PretrainResult a = run_pretraining(UnlabeledCohortView::from(cohort), fold, config, opt, 7);
    const PretrainResult b = run_pretraining(UnlabeledCohortView::from(flipped), fold, config, opt, 7);
    const PretrainResult c = run_pretraining(UnlabeledCohortView::from(cohort), fold, config, opt, 7);

    // labels differ between a and b, checkpoints may not
    REQUIRE(serialize_checkpoint(a.last) == serialize_checkpoint(b.last));
    REQUIRE(serialize_checkpoint(a.best) == serialize_checkpoint(b.best));
    // same seed, same inputs: bit-identical reruns
    REQUIRE(serialize_checkpoint(a.last) == serialize_checkpoint(c.last));
    REQUIRE(a.log.to_csv() == c.log.to_csv());
}

TEST_CASE("task training separates a clean cohort from scratch", "[train][slow]") {
    const Cohort cohort = separable_cohort(200);
    const Fold fold = simple_fold(cohort, 160, 20);
    const ModelConfig config = desk_config(cohort.schema);

    TaskOptions opt;
    opt.epochs = 150;
    opt.lr_start = 1e-3;
    opt.lr_end = 1e-3;
    opt.subgraphs = desk_groups(100, SimilarityKind::Static);

    const ModelParams init = build_variant(config, 5);
    const TaskResult res = run_task_training(cohort, fold, fold.train_ids, init, config, opt, 5);

    const std::vector<double> train_acc = res.log.series("train", "accuracy");
    REQUIRE(train_acc.size() == 150);
    REQUIRE(*std::max_element(train_acc.begin(), train_acc.end()) > 0.9);

    // selection: best epoch is the first maximum of the validation series
    REQUIRE(res.selection_metric == "auc");
    const std::vector<double> val_auc = res.log.series("val", "auc");
    const auto best_it = std::max_element(val_auc.begin(), val_auc.end());
    REQUIRE(res.best_epoch == static_cast<std::size_t>(best_it - val_auc.begin()));
    REQUIRE(res.best_val_score == *best_it);
    REQUIRE(res.best.metrics.at("epoch") == static_cast<double>(res.best_epoch));

    // reported test metrics belong to the selected epoch, not the last one
    const std::vector<double> test_auc = res.log.series("test", "auc");
    REQUIRE(res.test_metrics.at("auc") == test_auc[res.best_epoch]);
    const std::vector<double> test_acc = res.log.series("test", "accuracy");
    REQUIRE(res.test_metrics.at("accuracy") == test_acc[res.best_epoch]);
    REQUIRE(res.test_metrics.at("auc") > 0.9);
    REQUIRE(res.warnings.empty());
}

TEST_CASE("unlabeled nodes couple through the graph but not through labels", "[train]") {
    const Cohort cohort = separable_cohort(24);
    Fold fold;
    for (const auto& r : cohort.records) fold.train_ids.push_back(r.id);
    const auto subgraphs = build_subgraphs(cohort, fold, desk_groups(24, SimilarityKind::Static), 1);
    REQUIRE(subgraphs.size() == 1);
    const Subgraph& sg = subgraphs[0];
    const ModelConfig config = desk_config(cohort.schema);
    const ModelParams params = build_variant(config, 9);

    NodeBatch batch = make_node_batch(sg.record_ptrs(), cohort.schema, &sg.graph);
    std::vector<int> targets(24, 0);
    std::vector<double> mask(24, 0.0);
    for (std::size_t i = 0; i < 12; ++i) {
        targets[i] = *sg.records[i].label;
        mask[i] = 1.0;
    }
    const Tensor ce_mask = Tensor::constant({24}, std::vector<double>(mask));
    const std::size_t u = 20; // unlabeled row

    auto eval_loss = [&](const NodeBatch& b, const std::vector<int>& t) {
        const Tensor reps = encoder_forward(nullptr, b, params, config);
        const Tensor logits = decoder_forward(nullptr, reps, params, DecoderHead::Task);
        return ops::cross_entropy_loss(nullptr, logits, t, ce_mask).values()[0];
    };

    const double base = eval_loss(batch, targets);

    // feature perturbation of an unlabeled node moves the loss (attention coupling)
    NodeBatch shifted = batch;
    shifted.continuous[u * config.n_continuous + 0] += 0.7;
    REQUIRE(eval_loss(shifted, targets) != base);

    // its label is invisible to the masked CE
    std::vector<int> relabeled = targets;
    relabeled[u] = (targets[u] + 1) % 3;
    REQUIRE(eval_loss(batch, relabeled) == base);
}

TEST_CASE("fine-tuning updates the transferred encoder", "[train][slow]") {
    const Cohort cohort = synthetic::synthesize_cohort(33, 60, {});
    const Fold fold = simple_fold(cohort, 40, 10);
    const ModelConfig config = desk_config(cohort.schema);

    PretrainOptions popt;
    popt.mask.strategy = MaskStrategy::StaticRandom;
    popt.mask.ratio = 0.3;
    popt.epochs = 3;
    popt.lr_start = 1e-3;
    popt.lr_end = 1e-3;
    popt.subgraphs = desk_groups(30, SimilarityKind::Static);
    const PretrainResult pre = run_pretraining(UnlabeledCohortView::from(cohort), fold, config, popt, 1);

    const ModelParams ft = init_finetune(pre.best, config, 77);
    const std::vector<double> encoder_before = ft.at("encoder.embed.continuous.W").values();

    TaskOptions topt;
    topt.epochs = 2;
    topt.lr_start = 1e-3;
    topt.lr_end = 1e-3;
    topt.subgraphs = desk_groups(30, SimilarityKind::Static);
    const TaskResult res = run_task_training(cohort, fold, fold.train_ids, ft, config, topt, 77);

    // the caller's params are untouched, the trained encoder moved
    REQUIRE(ft.at("encoder.embed.continuous.W").values() == encoder_before);
    REQUIRE(res.best.tensors.at("encoder.embed.continuous.W").values() != encoder_before);
    REQUIRE(res.best.tensors.count("decoder.imputation.W") == 0);
    REQUIRE(res.test_metrics.count("accuracy") == 1);
}

TEST_CASE("task training is deterministic and reports binary metrics", "[train][slow]") {
    const Cohort cohort = desk_ts_cohort(19, 40);
    const Fold fold = simple_fold(cohort, 28, 6);
    ModelConfig config = desk_config(cohort.schema);

    TaskOptions opt;
    opt.epochs = 4;
    opt.lr_start = 1e-3;
    opt.lr_end = 1e-3;
    opt.subgraphs = desk_groups(20, SimilarityKind::Timeseries);

    const ModelParams init = build_variant(config, 2);
    const TaskResult a = run_task_training(cohort, fold, fold.train_ids, init, config, opt, 3);
    const TaskResult b = run_task_training(cohort, fold, fold.train_ids, init, config, opt, 3);

    REQUIRE(serialize_checkpoint(a.best) == serialize_checkpoint(b.best));
    REQUIRE(a.test_metrics == b.test_metrics);
    REQUIRE(a.log.to_csv() == b.log.to_csv());
    REQUIRE(a.test_metrics.count("auc") == 1);
    REQUIRE(a.test_metrics.count("accuracy") == 1);
    REQUIRE(a.test_metrics.count("f1") == 1);
}

TEST_CASE("task training guards and warnings", "[train]") {
    const Cohort cohort = separable_cohort(30);
    const Fold fold = simple_fold(cohort, 21, 6);
    const ModelConfig config = desk_config(cohort.schema);
    const ModelParams init = build_variant(config, 4);

    TaskOptions opt;
    opt.epochs = 1;
    opt.lr_start = 1e-3;
    opt.lr_end = 1e-3;
    opt.subgraphs = desk_groups(15, SimilarityKind::Static);

    SECTION("zero labeled nodes is a configuration error") {
        REQUIRE_THROWS_AS(run_task_training(cohort, fold, {}, init, config, opt, 0), ConfigError);
    }
    SECTION("a class without labeled train nodes raises a warning") {
        std::vector<std::string> only_class0;
        for (const auto& id : fold.train_ids) {
            if (*cohort.by_id(id).label == 0) only_class0.push_back(id);
        }
        const TaskResult res = run_task_training(cohort, fold, only_class0, init, config, opt, 0);
        REQUIRE(res.warnings.size() == 2);
        REQUIRE(res.warnings[0].find("class 1") != std::string::npos);
        REQUIRE(res.warnings[1].find("class 2") != std::string::npos);
    }
}
