#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "popgraph/errors.hpp"
#include "popgraph/graph.hpp"
#include "popgraph/ops.hpp"
#include "popgraph/rng.hpp"
#include "popgraph/schema.hpp"
#include "popgraph/tensor.hpp"

namespace popgraph {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t num_graphormer_layers = 4;
    std::size_t num_ts_layers = 2;
    std::size_t attention_heads = 4;
    std::size_t d_discrete = 32;   // D'
    std::size_t d_continuous = 32; // C'
    std::size_t d_series = 32;     // S'
    std::size_t d_ts_token = 64;   // E
    std::size_t ffn_multiplier = 4;
    bool use_graphormer = true;
    bool use_ts_transformer = true;
    std::size_t deg_cap = 32;
    std::size_t spd_vocab = 7;     // D_max + 2 (cap sentinel included)
    std::size_t edge_bin_vocab = 9;

    // schema-derived
    std::vector<std::size_t> discrete_vocab; // true vocab, mask slot not included
    std::vector<std::string> discrete_names; // schema order; empty -> f0, f1, ...
    std::size_t n_continuous = 0;
    std::size_t n_series = 0;      // S
    std::size_t series_length = 1; // tau
    std::size_t num_classes = 2;   // L

    std::string discrete_feature_name(std::size_t k) const {
        return discrete_names.empty() ? "f" + std::to_string(k) : discrete_names[k];
    }

    bool has_discrete() const { return !discrete_vocab.empty(); }
    bool has_continuous() const { return n_continuous > 0; }
    bool has_series() const { return n_series > 0; }

    std::size_t hidden() const {
        std::size_t f = 0;
        if (has_discrete()) f += d_discrete;
        if (has_continuous()) f += d_continuous;
        if (has_series()) f += d_series;
        return f;
    }

    std::size_t imputation_width() const {
        std::size_t w = 0;
        for (std::size_t v : discrete_vocab) w += v;
        w += n_continuous;
        w += n_series * series_length;
        return w;
    }

    void validate() const {
        const std::size_t f = hidden();
        if (f == 0) throw ConfigError("model config: no feature blocks present");
        if (attention_heads == 0) throw ConfigError("model config: attention_heads must be positive");
        if (use_graphormer) {
            if (num_graphormer_layers == 0) {
                throw ConfigError("model config: graphormer enabled with zero layers");
            }
            if (f % attention_heads != 0) {
                throw ConfigError("model config: heads " + std::to_string(attention_heads) +
                                  " do not divide hidden width " + std::to_string(f));
            }
        }
        if (has_series() && use_ts_transformer) {
            if (num_ts_layers == 0) {
                throw ConfigError("model config: ts transformer enabled with zero layers");
            }
            if (d_ts_token % attention_heads != 0) {
                throw ConfigError("model config: heads " + std::to_string(attention_heads) +
                                  " do not divide ts token width " + std::to_string(d_ts_token));
            }
        }
        if (num_classes < 2) throw ConfigError("model config: num_classes must be at least 2");
        if (!discrete_names.empty() && discrete_names.size() != discrete_vocab.size()) {
            throw ConfigError("model config: discrete name/vocab count mismatch");
        }
    }

    static ModelConfig from_schema(const FeatureSchema& schema) {
        ModelConfig c;
        for (const auto& f : schema.discrete_features) {
            c.discrete_vocab.push_back(f.vocab_size);
            c.discrete_names.push_back(f.name);
        }
        c.n_continuous = schema.n_continuous();
        c.n_series = schema.n_series();
        c.series_length = schema.series_length;
        c.num_classes = schema.num_classes;
        return c;
    }
};

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

struct ModelParams {
    std::map<std::string, Tensor> tensors;

    bool has(const std::string& name) const { return tensors.count(name) > 0; }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IndexError("model params: no tensor named '" + name + "'");
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors.size());
        for (const auto& [name, t] : tensors) out.push_back(name);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors) n += t.size();
        return n;
    }
};

enum class DecoderHead { Task, Imputation };

// ---------------------------------------------------------------------------
// Node batch
// ---------------------------------------------------------------------------

// One subgraph worth of model input. Node order matches graph->node_ids; the
// graph object must outlive the batch.
struct NodeBatch {
    std::size_t n = 0;
    std::vector<std::vector<int>> discrete; // per feature, length n (mask slot = vocab)
    std::vector<double> continuous;         // n x C row-major
    std::vector<double> series;             // n x S x tau
    std::vector<double> mask_cols;          // n x S x tau, 1 = masked
    const PopulationGraph* graph = nullptr;
};

// Collected attention probability matrices, one tensor per (layer, head) in
// execution order. Graphormer entries are N x N; ts entries are N x tau x tau.
struct AttentionTrace {
    std::vector<Tensor> rows;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor xavier_uniform(Shape shape, Rng& rng) {
    const double fan_in = static_cast<double>(shape[0]);
    const double fan_out = static_cast<double>(shape[1]);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_uniform(-a, a);
    return Tensor::make(std::move(shape), std::move(v), true);
}

inline Tensor gaussian_table(Shape shape, Rng& rng, double sigma = 0.02) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_gaussian(0.0, sigma);
    return Tensor::make(std::move(shape), std::move(v), true);
}

inline void add_weight(ModelParams& p, std::uint64_t seed, const std::string& name, Shape shape) {
    Rng rng(mix_seed(seed, fnv1a(name)));
    p.tensors.emplace(name, xavier_uniform(std::move(shape), rng));
}

inline void add_table(ModelParams& p, std::uint64_t seed, const std::string& name, Shape shape) {
    Rng rng(mix_seed(seed, fnv1a(name)));
    p.tensors.emplace(name, gaussian_table(std::move(shape), rng));
}

inline void add_bias(ModelParams& p, const std::string& name, std::size_t width) {
    p.tensors.emplace(name, Tensor::param(Shape{width}, std::vector<double>(width, 0.0)));
}

inline void add_layer_norm(ModelParams& p, const std::string& prefix, std::size_t width) {
    p.tensors.emplace(prefix + ".gamma", Tensor::param(Shape{width}, std::vector<double>(width, 1.0)));
    p.tensors.emplace(prefix + ".beta", Tensor::param(Shape{width}, std::vector<double>(width, 0.0)));
}

inline void add_attention_block(ModelParams& p, std::uint64_t seed, const std::string& prefix,
                                std::size_t width, std::size_t ffn_multiplier) {
    add_layer_norm(p, prefix + ".ln1", width);
    for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) {
        add_weight(p, seed, prefix + ".attn." + w, Shape{width, width});
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
        add_bias(p, prefix + ".attn." + b, width);
    }
    add_layer_norm(p, prefix + ".ln2", width);
    const std::size_t hidden = width * ffn_multiplier;
    add_weight(p, seed, prefix + ".ffn.W1", Shape{width, hidden});
    add_bias(p, prefix + ".ffn.b1", hidden);
    add_weight(p, seed, prefix + ".ffn.W2", Shape{hidden, width});
    add_bias(p, prefix + ".ffn.b2", width);
}

} // namespace detail

// Deterministic random initialization. Weight matrices are Xavier-uniform,
// biases zero, lookup tables N(0, 0.02); every tensor draws from its own
// name-derived stream so adding a tensor never shifts the others.
inline ModelParams build_variant(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    const std::size_t f = config.hidden();

    if (config.has_discrete()) {
        for (std::size_t k = 0; k < config.discrete_vocab.size(); ++k) {
            detail::add_table(p, seed,
                              "encoder.embed.discrete." + config.discrete_feature_name(k) + ".table",
                              Shape{config.discrete_vocab[k] + 1, config.d_discrete});
        }
    }
    if (config.has_continuous()) {
        detail::add_weight(p, seed, "encoder.embed.continuous.W",
                           Shape{config.n_continuous, config.d_continuous});
        detail::add_bias(p, "encoder.embed.continuous.b", config.d_continuous);
    }
    if (config.has_series()) {
        detail::add_weight(p, seed, "encoder.ts.input.W",
                           Shape{2 * config.n_series, config.d_ts_token});
        detail::add_bias(p, "encoder.ts.input.b", config.d_ts_token);
        if (config.use_ts_transformer) {
            for (std::size_t l = 0; l < config.num_ts_layers; ++l) {
                detail::add_attention_block(p, seed, "encoder.ts.layer" + std::to_string(l),
                                            config.d_ts_token, config.ffn_multiplier);
            }
        }
        detail::add_weight(p, seed, "encoder.ts.output.W", Shape{config.d_ts_token, config.d_series});
        detail::add_bias(p, "encoder.ts.output.b", config.d_series);
    }

    if (config.use_graphormer) {
        detail::add_table(p, seed, "encoder.deg.in.table", Shape{config.deg_cap + 1, f});
        detail::add_table(p, seed, "encoder.deg.out.table", Shape{config.deg_cap + 1, f});
        detail::add_table(p, seed, "encoder.bias.spatial.table",
                          Shape{config.spd_vocab, config.attention_heads});
        detail::add_table(p, seed, "encoder.bias.edge.table",
                          Shape{config.edge_bin_vocab, config.attention_heads});
        for (std::size_t l = 0; l < config.num_graphormer_layers; ++l) {
            detail::add_attention_block(p, seed, "encoder.gt.layer" + std::to_string(l), f,
                                        config.ffn_multiplier);
        }
    } else {
        detail::add_weight(p, seed, "encoder.linear_variant.W", Shape{f, f});
        detail::add_bias(p, "encoder.linear_variant.b", f);
    }
    detail::add_layer_norm(p, "encoder.final_ln", f);

    detail::add_weight(p, seed, "decoder.task.W", Shape{f, config.num_classes});
    detail::add_bias(p, "decoder.task.b", config.num_classes);
    detail::add_weight(p, seed, "decoder.imputation.W", Shape{f, config.imputation_width()});
    detail::add_bias(p, "decoder.imputation.b", config.imputation_width());
    return p;
}

// ---------------------------------------------------------------------------
// Embedding ops
// ---------------------------------------------------------------------------

// Sum of per-feature table rows; indices_per_feature[k] holds one index per
// node, with vocab_k as the mask slot.
inline Tensor embed_discrete(Tape* tape, const std::vector<Tensor>& tables,
                             const std::vector<std::vector<int>>& indices_per_feature) {
    if (tables.empty() || tables.size() != indices_per_feature.size()) {
        throw ConfigError("embed_discrete: table/index count mismatch");
    }
    Tensor acc = ops::embedding_lookup(tape, tables[0], indices_per_feature[0]);
    for (std::size_t k = 1; k < tables.size(); ++k) {
        acc = ops::add(tape, acc, ops::embedding_lookup(tape, tables[k], indices_per_feature[k]));
    }
    return acc;
}

inline Tensor embed_continuous(Tape* tape, const Tensor& values, const Tensor& w, const Tensor& b) {
    return ops::linear(tape, values, w, b);
}

namespace detail {

// Token grid {n, tau, 2S}: per hour, measurement values then mask columns.
inline Tensor ts_tokens(const std::vector<double>& series, const std::vector<double>& mask_cols,
                        std::size_t n, std::size_t s, std::size_t tau) {
    if (series.size() != n * s * tau || mask_cols.size() != series.size()) {
        throw ShapeError("ts_tokens: series/mask size mismatch");
    }
    std::vector<double> v(n * tau * 2 * s);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < tau; ++h) {
            double* dst = v.data() + (i * tau + h) * 2 * s;
            for (std::size_t f = 0; f < s; ++f) {
                dst[f] = series[(i * s + f) * tau + h];
                dst[s + f] = mask_cols[(i * s + f) * tau + h];
            }
        }
    }
    return Tensor::make(Shape{n, tau, 2 * s}, std::move(v), false);
}

struct AttentionWeights {
    const Tensor* wq;
    const Tensor* bq;
    const Tensor* wk;
    const Tensor* bk;
    const Tensor* wv;
    const Tensor* bv;
    const Tensor* wo;
    const Tensor* bo;
};

inline AttentionWeights attention_weights(const ModelParams& params, const std::string& prefix) {
    return {&params.at(prefix + ".attn.Wq"), &params.at(prefix + ".attn.bq"),
            &params.at(prefix + ".attn.Wk"), &params.at(prefix + ".attn.bk"),
            &params.at(prefix + ".attn.Wv"), &params.at(prefix + ".attn.bv"),
            &params.at(prefix + ".attn.Wo"), &params.at(prefix + ".attn.bo")};
}

// Multi-head self-attention over the trailing (sequence, width) axes. x is
// {rows, width} or {batch, rows, width}; bias_per_head, when given, supplies
// one {rows, rows} additive logit bias per head (rank-2 x only).
inline Tensor multi_head_attention(Tape* tape, const Tensor& x, const AttentionWeights& w,
                                   std::size_t heads, const std::vector<Tensor>* bias_per_head,
                                   AttentionTrace* trace) {
    const std::size_t width = x.dim(x.rank() - 1);
    const std::size_t d_head = width / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_head));
    Tensor q = ops::linear(tape, x, *w.wq, *w.bq);
    Tensor k = ops::linear(tape, x, *w.wk, *w.bk);
    Tensor v = ops::linear(tape, x, *w.wv, *w.bv);
    Tensor concat;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = ops::slice_last_axis(tape, q, h * d_head, d_head);
        Tensor kh = ops::slice_last_axis(tape, k, h * d_head, d_head);
        Tensor vh = ops::slice_last_axis(tape, v, h * d_head, d_head);
        Tensor scores = ops::scale(tape, ops::matmul(tape, qh, ops::transpose_last_two(tape, kh)),
                                   inv_sqrt_d);
        if (bias_per_head != nullptr) {
            scores = ops::add(tape, scores, (*bias_per_head)[h]);
        }
        Tensor probs = ops::softmax_last_axis(tape, scores);
        if (trace != nullptr) trace->rows.push_back(probs);
        Tensor head_out = ops::matmul(tape, probs, vh);
        concat = (h == 0) ? head_out : ops::concat_last_axis(tape, concat, head_out);
    }
    return ops::linear(tape, concat, *w.wo, *w.bo);
}

// Pre-norm transformer block: x + MHA(LN1(x)), then x + FFN(LN2(x)).
inline Tensor transformer_block(Tape* tape, const Tensor& x, const ModelParams& params,
                                const std::string& prefix, std::size_t heads,
                                const std::vector<Tensor>* bias_per_head, AttentionTrace* trace) {
    Tensor normed = ops::layer_norm_last_axis(tape, x, params.at(prefix + ".ln1.gamma"),
                                              params.at(prefix + ".ln1.beta"));
    Tensor attn = multi_head_attention(tape, normed, attention_weights(params, prefix), heads,
                                       bias_per_head, trace);
    Tensor mid = ops::add(tape, x, attn);
    Tensor normed2 = ops::layer_norm_last_axis(tape, mid, params.at(prefix + ".ln2.gamma"),
                                               params.at(prefix + ".ln2.beta"));
    Tensor ffn = ops::linear(
        tape, ops::gelu(tape, ops::linear(tape, normed2, params.at(prefix + ".ffn.W1"),
                                          params.at(prefix + ".ffn.b1"))),
        params.at(prefix + ".ffn.W2"), params.at(prefix + ".ffn.b2"));
    return ops::add(tape, mid, ffn);
}

// Per-head {N, N} attention bias from the spatial-distance and edge-bin tables.
inline std::vector<Tensor> structural_bias(Tape* tape, const PopulationGraph& g,
                                           const ModelParams& params, const ModelConfig& config) {
    const std::size_t n = g.n;
    Tensor both = ops::add(
        tape, ops::embedding_lookup(tape, params.at("encoder.bias.spatial.table"), g.spd),
        ops::embedding_lookup(tape, params.at("encoder.bias.edge.table"), g.edge_bins));
    std::vector<Tensor> per_head;
    per_head.reserve(config.attention_heads);
    for (std::size_t h = 0; h < config.attention_heads; ++h) {
        per_head.push_back(
            ops::reshape(tape, ops::slice_last_axis(tape, both, h, 1), Shape{n, n}));
    }
    return per_head;
}

} // namespace detail

// Time-series branch: per-hour tokens -> linear -> (two transformer layers)
// -> mean over hours -> projection to S'. Output {n, S'}.
inline Tensor embed_timeseries(Tape* tape, const std::vector<double>& series,
                               const std::vector<double>& mask_cols, std::size_t n,
                               const ModelParams& params, const ModelConfig& config,
                               AttentionTrace* trace = nullptr) {
    Tensor tokens = detail::ts_tokens(series, mask_cols, n, config.n_series, config.series_length);
    Tensor h = ops::linear(tape, tokens, params.at("encoder.ts.input.W"),
                           params.at("encoder.ts.input.b"));
    if (config.use_ts_transformer) {
        for (std::size_t l = 0; l < config.num_ts_layers; ++l) {
            h = detail::transformer_block(tape, h, params, "encoder.ts.layer" + std::to_string(l),
                                          config.attention_heads, nullptr, trace);
        }
    }
    Tensor pooled = ops::mean_over_axis(tape, h, 1);
    return ops::linear(tape, pooled, params.at("encoder.ts.output.W"),
                       params.at("encoder.ts.output.b"));
}

// Concatenation in fixed block order: discrete, continuous, time-series.
inline Tensor assemble_node_embedding(Tape* tape, const Tensor* d, const Tensor* c,
                                      const Tensor* t) {
    const Tensor* blocks[3] = {d, c, t};
    Tensor out;
    bool any = false;
    for (const Tensor* b : blocks) {
        if (b == nullptr) continue;
        out = any ? ops::concat_last_axis(tape, out, *b) : *b;
        any = true;
    }
    if (!any) throw ConfigError("assemble_node_embedding: all blocks absent");
    return out;
}

// One Graphormer layer: pre-norm MHA over all nodes with structural attention
// bias, then a GELU FFN, residuals around both.
inline Tensor graphormer_layer(Tape* tape, const Tensor& h, const PopulationGraph& graph,
                               const ModelParams& params, const ModelConfig& config,
                               std::size_t layer_index, AttentionTrace* trace = nullptr) {
    if (h.rank() != 2 || h.dim(0) != graph.n) {
        throw ShapeError("graphormer_layer: H " + shape_str(h.shape()) + " vs graph of " +
                         std::to_string(graph.n) + " nodes");
    }
    auto bias = detail::structural_bias(tape, graph, params, config);
    return detail::transformer_block(tape, h, params,
                                     "encoder.gt.layer" + std::to_string(layer_index),
                                     config.attention_heads, &bias, trace);
}

namespace detail {

inline std::vector<int> capped_degrees(const std::vector<std::size_t>& deg, std::size_t cap) {
    std::vector<int> idx(deg.size());
    for (std::size_t i = 0; i < deg.size(); ++i) {
        idx[i] = static_cast<int>(std::min(deg[i], cap));
    }
    return idx;
}

} // namespace detail

// Full encoder: feature embeddings -> degree augmentation -> Graphormer stack
// (or the position-wise linear ablation) -> final layer norm. Output {N, F}.
inline Tensor encoder_forward(Tape* tape, const NodeBatch& batch, const ModelParams& params,
                              const ModelConfig& config, AttentionTrace* trace = nullptr) {
    config.validate();
    if (batch.graph == nullptr) throw ConfigError("encoder_forward: batch has no graph");
    if (batch.graph->n != batch.n) {
        throw ShapeError("encoder_forward: batch of " + std::to_string(batch.n) +
                         " nodes vs graph of " + std::to_string(batch.graph->n));
    }

    Tensor d_block, c_block, t_block;
    bool has_d = false, has_c = false, has_t = false;
    if (config.has_discrete()) {
        if (batch.discrete.size() != config.discrete_vocab.size()) {
            throw ShapeError("encoder_forward: discrete feature count mismatch");
        }
        std::vector<Tensor> tables;
        for (std::size_t k = 0; k < config.discrete_vocab.size(); ++k) {
            tables.push_back(params.at("encoder.embed.discrete." +
                                       config.discrete_feature_name(k) + ".table"));
        }
        d_block = embed_discrete(tape, tables, batch.discrete);
        has_d = true;
    }
    if (config.has_continuous()) {
        Tensor x = Tensor::make(Shape{batch.n, config.n_continuous},
                                std::vector<double>(batch.continuous), false);
        c_block = embed_continuous(tape, x, params.at("encoder.embed.continuous.W"),
                                   params.at("encoder.embed.continuous.b"));
        has_c = true;
    }
    if (config.has_series()) {
        t_block = embed_timeseries(tape, batch.series, batch.mask_cols, batch.n, params, config,
                                   trace);
        has_t = true;
    }
    Tensor h = assemble_node_embedding(tape, has_d ? &d_block : nullptr, has_c ? &c_block : nullptr,
                                       has_t ? &t_block : nullptr);

    if (config.use_graphormer) {
        Tensor deg_in = ops::embedding_lookup(
            tape, params.at("encoder.deg.in.table"),
            detail::capped_degrees(batch.graph->in_degree, config.deg_cap));
        Tensor deg_out = ops::embedding_lookup(
            tape, params.at("encoder.deg.out.table"),
            detail::capped_degrees(batch.graph->out_degree, config.deg_cap));
        h = ops::add(tape, h, ops::add(tape, deg_in, deg_out));
        for (std::size_t l = 0; l < config.num_graphormer_layers; ++l) {
            h = graphormer_layer(tape, h, *batch.graph, params, config, l, trace);
        }
    } else {
        h = ops::linear(tape, h, params.at("encoder.linear_variant.W"),
                        params.at("encoder.linear_variant.b"));
    }
    return ops::layer_norm_last_axis(tape, h, params.at("encoder.final_ln.gamma"),
                                     params.at("encoder.final_ln.beta"));
}

// Linear decoders. Task head: {N, L} logits. Imputation head: {N, W} with the
// fixed layout [discrete logits per feature | continuous scalars | S x tau grid].
inline Tensor decoder_forward(Tape* tape, const Tensor& reps, const ModelParams& params,
                              DecoderHead head) {
    if (head == DecoderHead::Task) {
        return ops::linear(tape, reps, params.at("decoder.task.W"), params.at("decoder.task.b"));
    }
    return ops::linear(tape, reps, params.at("decoder.imputation.W"),
                       params.at("decoder.imputation.b"));
}

// Offsets into the imputation output row.
struct ImputationLayout {
    std::vector<std::size_t> discrete_offset; // start of each feature's logit block
    std::size_t continuous_offset = 0;        // then one scalar per continuous feature
    std::size_t series_offset = 0;            // then S x tau grid, feature-major
    std::size_t width = 0;

    static ImputationLayout from_config(const ModelConfig& config) {
        ImputationLayout lay;
        std::size_t off = 0;
        for (std::size_t v : config.discrete_vocab) {
            lay.discrete_offset.push_back(off);
            off += v;
        }
        lay.continuous_offset = off;
        off += config.n_continuous;
        lay.series_offset = off;
        off += config.n_series * config.series_length;
        lay.width = off;
        return lay;
    }
};

} // namespace popgraph
