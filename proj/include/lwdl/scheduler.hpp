#pragma once

// Learning-rate scheduling: a constant baseline, a fixed-milestone decay
// baseline, and the per-crucial-layer adaptive rule. The adaptive rule keeps
// one (alpha, eta) pair per crucial layer; eta is an exponentially weighted
// history of that layer's divergence and alpha is rescaled by 1/sqrt(eta+eps)
// on every update epoch, clamped to a configured range.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwdl/tensor.hpp"

namespace lwdl {

enum class SchedulerMode { None, MultiStep, Layerwise };

inline const char* scheduler_mode_name(SchedulerMode m) {
    switch (m) {
        case SchedulerMode::None: return "none";
        case SchedulerMode::MultiStep: return "multistep";
        case SchedulerMode::Layerwise: return "layerwise";
    }
    return "?";
}

struct SchedulerConfig {
    SchedulerMode mode = SchedulerMode::None;
    double base_lr = 0.1;
    double gamma = 0.9;
    double epsilon = 1e-8;
    std::size_t update_interval = 25;
    std::vector<std::size_t> milestones = {25, 35};
    double multistep_factor = 0.01;
    double alpha_min = 1e-5;
    double alpha_max = 1.0;
    double initial_eta = 0.0;

    void validate() const {
        if (!(base_lr > 0.0)) throw ValueError("scheduler: base_lr must be positive");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValueError("scheduler: gamma must lie in [0,1]");
        if (!(epsilon > 0.0)) throw ValueError("scheduler: epsilon must be positive");
        if (update_interval == 0) throw ValueError("scheduler: update_interval must be positive");
        if (!(multistep_factor > 0.0)) throw ValueError("scheduler: multistep_factor must be positive");
        if (!(alpha_min > 0.0 && alpha_min < base_lr && base_lr < alpha_max)) {
            throw ValueError("scheduler: required alpha_min < base_lr < alpha_max");
        }
        if (!(initial_eta >= 0.0)) throw ValueError("scheduler: initial_eta must be non-negative");
    }
};

struct LayerLRState {
    std::size_t layer_index = 0;
    double alpha = 0.0;  // current learning rate for this layer
    double eta = 0.0;    // momentum accumulator over divergence history
};

// One adaptive update:  eta' = gamma*eta + (1-gamma)*jsd,
//                       alpha' = clamp(alpha / sqrt(eta' + eps)).
inline LayerLRState update_layer_lr(const LayerLRState& state, double jsd_value,
                                    const SchedulerConfig& cfg) {
    cfg.validate();
    if (!std::isfinite(jsd_value) || jsd_value < 0.0) {
        throw ValueError("update_layer_lr: divergence must be finite and non-negative, got " +
                         std::to_string(jsd_value));
    }
    LayerLRState next = state;
    next.eta = cfg.gamma * state.eta + (1.0 - cfg.gamma) * jsd_value;
    const double raw = state.alpha / std::sqrt(next.eta + cfg.epsilon);
    next.alpha = std::min(cfg.alpha_max, std::max(cfg.alpha_min, raw));
    return next;
}

// Effective learning rates for one epoch: crucial layers may carry their own
// rate, everything else follows the base entry.
struct LRTable {
    double base = 0.0;
    std::map<std::size_t, double> per_layer;

    double lr_for(std::size_t layer) const {
        auto it = per_layer.find(layer);
        return it == per_layer.end() ? base : it->second;
    }
};

// Advance scheduler state at the end of `epoch` (1-based) and report the
// learning rates in effect afterwards. In Layerwise mode states mutate only
// when the epoch is an exact multiple of the update interval.
inline LRTable scheduler_step(std::vector<LayerLRState>& states, std::size_t epoch,
                              const std::map<std::size_t, double>& epoch_jsd,
                              const SchedulerConfig& cfg) {
    cfg.validate();
    if (epoch == 0) throw ValueError("scheduler_step: epochs are 1-based");
    LRTable table;
    switch (cfg.mode) {
        case SchedulerMode::None: {
            table.base = cfg.base_lr;
            return table;
        }
        case SchedulerMode::MultiStep: {
            double lr = cfg.base_lr;
            for (std::size_t m : cfg.milestones) {
                if (m <= epoch) lr *= cfg.multistep_factor;
            }
            table.base = lr;
            return table;
        }
        case SchedulerMode::Layerwise: {
            table.base = cfg.base_lr;
            if (epoch % cfg.update_interval == 0) {
                for (LayerLRState& s : states) {
                    auto it = epoch_jsd.find(s.layer_index);
                    if (it == epoch_jsd.end()) {
                        throw ValueError("scheduler_step: missing divergence for crucial layer " +
                                         std::to_string(s.layer_index) + " on update epoch " +
                                         std::to_string(epoch));
                    }
                    s = update_layer_lr(s, it->second, cfg);
                }
            }
            for (const LayerLRState& s : states) table.per_layer[s.layer_index] = s.alpha;
            return table;
        }
    }
    throw ValueError("scheduler_step: unknown mode");
}

// Mean divergence per layer over a window of per-batch (or per-epoch) maps.
inline std::map<std::size_t, double> aggregate_epoch_jsd(
    const std::vector<std::map<std::size_t, double>>& window) {
    if (window.empty()) throw ValueError("aggregate_epoch_jsd: empty window");
    std::map<std::size_t, double> acc = window.front();
    for (std::size_t i = 1; i < window.size(); ++i) {
        if (window[i].size() != acc.size()) {
            throw ValueError("aggregate_epoch_jsd: inconsistent layer keys across window entries");
        }
        for (const auto& [layer, v] : window[i]) {
            auto it = acc.find(layer);
            if (it == acc.end()) {
                throw ValueError("aggregate_epoch_jsd: inconsistent layer keys across window entries");
            }
            it->second += v;
        }
    }
    const double inv = 1.0 / static_cast<double>(window.size());
    for (auto& [layer, v] : acc) v *= inv;
    return acc;
}

}  // namespace lwdl
