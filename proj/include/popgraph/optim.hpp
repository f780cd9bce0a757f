#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "popgraph/errors.hpp"
#include "popgraph/model.hpp"

namespace popgraph {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers keyed by parameter name. The step count is
// shared: within one training loop the set of touched tensors is fixed, so a
// global t equals the per-tensor step count.
struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::size_t t = 0;
};

// Standard bias-corrected Adam, applied in place. Tensors without a gradient
// buffer (no path to this step's loss) are left untouched.
inline void adam_step(ModelParams& params, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, tensor] : params.tensors) {
        if (!tensor.requires_grad() || !tensor.has_grad()) continue;
        const auto& g = tensor.grad();
        for (double gv : g) {
            if (!std::isfinite(gv)) {
                throw DivergenceError("adam_step: non-finite gradient in '" + name + "' at t=" +
                                      std::to_string(state.t));
            }
        }
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.size() != g.size()) m.assign(g.size(), 0.0);
        if (v.size() != g.size()) v.assign(g.size(), 0.0);
        auto& vals = tensor.mutable_values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

enum class LrSchedule { Constant, Poly };

inline LrSchedule lr_schedule_from_string(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "poly") return LrSchedule::Poly;
    throw ConfigError("unknown lr schedule '" + s + "' (use constant or poly)");
}

// Polynomial decay from lr_start to lr_end over the epoch range; a single
// epoch run stays at lr_start.
inline double poly_lr(std::size_t epoch, std::size_t epochs, double lr_start, double lr_end,
                      double power = 1.0) {
    if (epochs == 0 || epoch >= epochs) {
        throw ConfigError("poly_lr: epoch " + std::to_string(epoch) + " outside of " +
                          std::to_string(epochs) + " epochs");
    }
    if (epochs == 1) return lr_start;
    const double progress =
        static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return lr_end + (lr_start - lr_end) * std::pow(1.0 - progress, power);
}

inline double lr_at(LrSchedule schedule, std::size_t epoch, std::size_t epochs, double lr_start,
                    double lr_end, double power = 1.0) {
    if (schedule == LrSchedule::Constant) {
        if (epochs == 0 || epoch >= epochs) {
            throw ConfigError("lr_at: epoch out of range");
        }
        return lr_start;
    }
    return poly_lr(epoch, epochs, lr_start, lr_end, power);
}

} // namespace popgraph
