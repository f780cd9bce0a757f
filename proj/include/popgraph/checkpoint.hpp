#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "popgraph/errors.hpp"
#include "popgraph/model.hpp"
#include "popgraph/optim.hpp"
#include "popgraph/rng.hpp"

namespace popgraph {

// ---------------------------------------------------------------------------
// Config fingerprints
// ---------------------------------------------------------------------------

// Canonical string of every field that shapes encoder tensors. The task head
// width (num_classes) is decoder-only and deliberately excluded, so encoders
// can transfer across tasks with different label counts.
inline std::string encoder_signature(const ModelConfig& c) {
    std::ostringstream ss;
    ss << "gt=" << (c.use_graphormer ? c.num_graphormer_layers : 0)
       << "|tst=" << (c.use_ts_transformer ? c.num_ts_layers : 0)
       << "|heads=" << c.attention_heads << "|dd=" << c.d_discrete << "|dc=" << c.d_continuous
       << "|ds=" << c.d_series << "|e=" << c.d_ts_token << "|ffn=" << c.ffn_multiplier
       << "|deg=" << c.deg_cap << "|spd=" << c.spd_vocab << "|bins=" << c.edge_bin_vocab
       << "|cont=" << c.n_continuous << "|ser=" << c.n_series << "|tau=" << c.series_length;
    for (std::size_t k = 0; k < c.discrete_vocab.size(); ++k) {
        ss << "|" << c.discrete_feature_name(k) << ":" << c.discrete_vocab[k];
    }
    return ss.str();
}

inline std::uint64_t encoder_fingerprint(const ModelConfig& c) {
    return fnv1a(encoder_signature(c));
}

inline std::uint64_t config_fingerprint(const ModelConfig& c) {
    std::ostringstream ss;
    ss << encoder_signature(c) << "|classes=" << c.num_classes;
    return fnv1a(ss.str());
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::uint32_t version = 1;
    std::uint64_t fingerprint = 0;
    std::uint64_t encoder_fp = 0;
    std::map<std::string, Tensor> tensors;
    bool has_adam = false;
    AdamState adam;
    std::map<std::string, double> metrics;
};

inline Checkpoint make_checkpoint(const ModelParams& params, const ModelConfig& config,
                                  const AdamState* adam = nullptr,
                                  std::map<std::string, double> metrics = {}) {
    Checkpoint ck;
    ck.fingerprint = config_fingerprint(config);
    ck.encoder_fp = encoder_fingerprint(config);
    for (const auto& [name, t] : params.tensors) {
        ck.tensors.emplace(name, Tensor::make(t.shape(), t.values(), false));
    }
    if (adam != nullptr) {
        ck.has_adam = true;
        ck.adam = *adam;
    }
    ck.metrics = std::move(metrics);
    return ck;
}

// Fresh trainable parameter handles from a checkpoint snapshot.
inline ModelParams params_from_checkpoint(const Checkpoint& ck) {
    ModelParams p;
    for (const auto& [name, t] : ck.tensors) {
        p.tensors.emplace(name, Tensor::make(t.shape(), t.values(), true));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Binary IO: little-endian, fixed layout, versioned header
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kCheckpointMagic = 0x54504B4347504F50ull; // "POPGCKPT"
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

struct Cursor {
    const std::string* buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf->size()) throw FormatError("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>((*buf)[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>((*buf)[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf->substr(pos, n);
        pos += n;
        return s;
    }
};

inline void put_moments(std::string& out, const std::map<std::string, std::vector<double>>& mm) {
    put_u32(out, static_cast<std::uint32_t>(mm.size()));
    for (const auto& [name, vec] : mm) {
        put_str(out, name);
        put_u64(out, vec.size());
        for (double x : vec) put_f64(out, x);
    }
}

inline std::map<std::string, std::vector<double>> read_moments(Cursor& cur) {
    std::map<std::string, std::vector<double>> mm;
    const std::uint32_t n = cur.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = cur.str();
        const std::uint64_t len = cur.u64();
        cur.need(len * 8);
        std::vector<double> vec(len);
        for (auto& x : vec) x = cur.f64();
        mm.emplace(std::move(name), std::move(vec));
    }
    return mm;
}

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string out;
    detail::put_u64(out, detail::kCheckpointMagic);
    detail::put_u32(out, detail::kCheckpointVersion);
    detail::put_u64(out, ck.fingerprint);
    detail::put_u64(out, ck.encoder_fp);
    out.push_back(ck.has_adam ? 1 : 0);

    detail::put_u32(out, static_cast<std::uint32_t>(ck.metrics.size()));
    for (const auto& [name, value] : ck.metrics) {
        detail::put_str(out, name);
        detail::put_f64(out, value);
    }

    detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        detail::put_str(out, name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64(out, t.dim(i));
        for (double x : t.values()) detail::put_f64(out, x);
    }

    if (ck.has_adam) {
        detail::put_u64(out, ck.adam.t);
        detail::put_moments(out, ck.adam.m);
        detail::put_moments(out, ck.adam.v);
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
    detail::Cursor cur{&buf};
    if (cur.u64() != detail::kCheckpointMagic) {
        throw FormatError("checkpoint: bad magic, not a checkpoint file");
    }
    const std::uint32_t version = cur.u32();
    if (version != detail::kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.version = version;
    ck.fingerprint = cur.u64();
    ck.encoder_fp = cur.u64();
    cur.need(1);
    ck.has_adam = buf[cur.pos++] != 0;

    const std::uint32_t n_metrics = cur.u32();
    for (std::uint32_t i = 0; i < n_metrics; ++i) {
        std::string name = cur.str();
        ck.metrics.emplace(std::move(name), cur.f64());
    }

    const std::uint32_t n_tensors = cur.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = cur.str();
        const std::uint32_t rank = cur.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (auto& d : shape) {
            d = cur.u64();
            numel *= d;
        }
        cur.need(numel * 8);
        std::vector<double> values(numel);
        for (auto& x : values) x = cur.f64();
        ck.tensors.emplace(std::move(name), Tensor::make(std::move(shape), std::move(values), false));
    }

    if (ck.has_adam) {
        ck.adam.t = cur.u64();
        ck.adam.m = detail::read_moments(cur);
        ck.adam.v = detail::read_moments(cur);
    }
    if (cur.pos != buf.size()) throw FormatError("checkpoint: trailing bytes");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("checkpoint: cannot open '" + path + "' for writing");
    const std::string buf = serialize_checkpoint(ck);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IOError("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("checkpoint: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Weight transfer
// ---------------------------------------------------------------------------

// Fine-tuning initialization: pretrained encoder weights, a fresh task
// decoder, and no imputation decoder (it is not part of the task model).
inline ModelParams init_finetune(const Checkpoint& pretrained, const ModelConfig& config,
                                 std::uint64_t seed) {
    if (pretrained.encoder_fp != encoder_fingerprint(config)) {
        throw IncompatibleCheckpoint("init_finetune: checkpoint encoder fingerprint " +
                                     std::to_string(pretrained.encoder_fp) +
                                     " does not match config " +
                                     std::to_string(encoder_fingerprint(config)));
    }
    ModelParams params = build_variant(config, seed);
    std::erase_if(params.tensors,
                  [](const auto& kv) { return kv.first.rfind("decoder.imputation.", 0) == 0; });
    for (auto& [name, tensor] : params.tensors) {
        if (name.rfind("encoder.", 0) != 0) continue;
        auto it = pretrained.tensors.find(name);
        if (it == pretrained.tensors.end()) {
            throw IncompatibleCheckpoint("init_finetune: checkpoint lacks tensor '" + name + "'");
        }
        if (it->second.shape() != tensor.shape()) {
            throw IncompatibleCheckpoint("init_finetune: shape mismatch for '" + name + "'");
        }
        tensor.mutable_values() = it->second.values();
    }
    return params;
}

} // namespace popgraph
