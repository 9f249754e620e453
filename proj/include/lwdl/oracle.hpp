#pragma once

// Brute-force ground truth used to verify the differentiation engine and the
// learning-rate recurrence: central finite differences and a standalone
// replay of the scheduler update chain.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwdl/scheduler.hpp"
#include "lwdl/tensor.hpp"

namespace lwdl {

struct FDConfig {
    double step = 1e-4;  // scaled per coordinate by max(1, |theta|)

    void validate() const {
        if (!(step > 0.0)) throw ValueError("fd: step must be positive");
    }
};

// f evaluates the scalar objective at the current parameter values.
// Parameters are perturbed in place and restored; f must not cache them.
using FDObjective = std::function<double()>;

namespace detail {

inline double fd_eval(const FDObjective& f) {
    const double v = f();
    if (!std::isfinite(v)) {
        throw ValueError("fd: objective returned a non-finite value at a probe point");
    }
    return v;
}

}  // namespace detail

// Central differences: (f(x+h) - f(x-h)) / 2h per coordinate.
inline std::vector<Tensor> fd_gradient(const FDObjective& f, std::vector<Tensor>& params,
                                       const FDConfig& cfg = {}) {
    cfg.validate();
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor& p : params) {
        Tensor g(p.shape(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double saved = p.at(k);
            const double h = cfg.step * std::max(1.0, std::abs(saved));
            p.at(k) = saved + h;
            const double fp = detail::fd_eval(f);
            p.at(k) = saved - h;
            const double fm = detail::fd_eval(f);
            p.at(k) = saved;
            g.at(k) = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// Second central differences: (f(x+h) - 2 f(x) + f(x-h)) / h^2 per coordinate.
inline std::vector<Tensor> fd_hessian_diag(const FDObjective& f, std::vector<Tensor>& params,
                                           const FDConfig& cfg = {}) {
    cfg.validate();
    const double f0 = detail::fd_eval(f);
    std::vector<Tensor> diag;
    diag.reserve(params.size());
    for (Tensor& p : params) {
        Tensor d(p.shape(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double saved = p.at(k);
            const double h = cfg.step * std::max(1.0, std::abs(saved));
            p.at(k) = saved + h;
            const double fp = detail::fd_eval(f);
            p.at(k) = saved - h;
            const double fm = detail::fd_eval(f);
            p.at(k) = saved;
            d.at(k) = (fp - 2.0 * f0 + fm) / (h * h);
        }
        diag.push_back(std::move(d));
    }
    return diag;
}

// Replays the per-layer learning-rate recurrence over a trace of update
// events, one map of layer -> divergence per event, left to right. Kept
// independent of the scheduler implementation on purpose.
inline std::vector<LayerLRState> replay_scheduler(
    const std::vector<std::map<std::size_t, double>>& jsd_trace, const SchedulerConfig& cfg,
    const std::vector<std::size_t>& layers) {
    cfg.validate();
    if (jsd_trace.empty()) throw ValueError("replay_scheduler: empty trace");
    std::vector<LayerLRState> states;
    states.reserve(layers.size());
    for (std::size_t layer : layers) {
        states.push_back(LayerLRState{layer, cfg.base_lr, cfg.initial_eta});
    }
    for (const auto& event : jsd_trace) {
        if (event.empty()) throw ValueError("replay_scheduler: update event with no layer values");
        for (LayerLRState& s : states) {
            auto it = event.find(s.layer_index);
            if (it == event.end()) {
                throw ValueError("replay_scheduler: missing divergence for layer " +
                                 std::to_string(s.layer_index));
            }
            const double jsd_value = it->second;
            if (!(jsd_value >= 0.0) || !std::isfinite(jsd_value)) {
                throw ValueError("replay_scheduler: divergence must be finite and non-negative");
            }
            s.eta = cfg.gamma * s.eta + (1.0 - cfg.gamma) * jsd_value;
            const double raw = s.alpha / std::sqrt(s.eta + cfg.epsilon);
            s.alpha = std::min(cfg.alpha_max, std::max(cfg.alpha_min, raw));
        }
    }
    return states;
}

}  // namespace lwdl
