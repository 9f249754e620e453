#pragma once

// Per-crucial-layer summary maps compared between teacher and student.
// Three flavors:
//   Attention - channel-wise sum of squared activations, per spatial cell.
//   Jacobian  - per-class squared norm of d(mean logit_c)/d(layer weights).
//   Hessian   - per-class absolute mass of the exact Hessian diagonal of the
//               mean logits with respect to the layer weights.
// Every map is L1-normalized into a probability vector; a degenerate all-zero
// map becomes the uniform vector so divergences stay defined.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lwdl/network.hpp"
#include "lwdl/tensor.hpp"

namespace lwdl {

enum class MapKind { Attention, Jacobian, Hessian };

inline const char* map_kind_name(MapKind k) {
    switch (k) {
        case MapKind::Attention: return "attention";
        case MapKind::Jacobian: return "jacobian";
        case MapKind::Hessian: return "hessian";
    }
    return "?";
}

struct LayerMap {
    std::size_t layer_index = 0;
    MapKind kind = MapKind::Attention;
    std::vector<double> values;
};

namespace detail {

constexpr double kDegenerateMapTotal = 1e-290;

inline std::vector<double> l1_normalize_or_uniform(std::vector<double> raw) {
    double total = 0.0;
    for (double v : raw) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ValueError("layer map: entries must be finite and non-negative");
        }
        total += v;
    }
    if (total < kDegenerateMapTotal) {
        const double u = 1.0 / static_cast<double>(raw.size());
        for (double& v : raw) v = u;
        return raw;
    }
    for (double& v : raw) v /= total;
    return raw;
}

// Differentiable counterpart: divides by the sum on tape, or substitutes the
// (constant, gradient-free) uniform vector on a degenerate input.
inline Tensor normalize_map_tensor(const Tensor& raw) {
    double total = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) total += raw.at(i);
    if (total < kDegenerateMapTotal) {
        return Tensor(Shape{raw.size()}, 1.0 / static_cast<double>(raw.size()));
    }
    return div(raw, sum(raw));
}

// Mean over the batch of one logit column, as a recorded scalar.
inline Tensor class_mean_logit(const Tensor& logits, std::size_t cls) {
    const std::size_t classes = logits.dim(1);
    Tensor pick(Shape{classes}, 0.0);
    pick.at(cls) = 1.0;
    const double inv_batch = 1.0 / static_cast<double>(logits.dim(0));
    return mul(sum(mul(logits, pick)), Tensor::scalar(inv_batch));
}

inline Tensor batch_mean(const Tensor& batch_activation) {
    Shape sample_shape(batch_activation.shape().begin() + 1, batch_activation.shape().end());
    return reshape(mean_axis(batch_activation, 0), sample_shape);
}

}  // namespace detail

inline void validate_layer_map(const LayerMap& m) {
    double total = 0.0;
    for (double v : m.values) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ValueError("layer map: entries must be finite and non-negative");
        }
        total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ValueError("layer map: sums to " + std::to_string(total) + ", expected 1 within 1e-9");
    }
}

// =====================================================================
//  Attention maps
// =====================================================================

// Activation is a single (or batch-averaged) post-activation output:
// [C,H,W] for conv features or [F] for dense features.
inline Tensor attention_map_tensor(const Tensor& activation) {
    check_finite("attention_map", activation);
    Tensor sq = square(activation);
    if (activation.rank() == 3) {
        const std::size_t h = activation.dim(1), w = activation.dim(2);
        sq = reshape(sum_axis(sq, 0), Shape{h * w});
    } else if (activation.rank() != 1) {
        throw ShapeError("attention_map: expected [C,H,W] or [F] activation, got shape " +
                         shape_str(activation.shape()));
    }
    return detail::normalize_map_tensor(sq);
}

inline LayerMap attention_map(const Tensor& activation, std::size_t layer_index = 0) {
    const Tensor t = attention_map_tensor(activation.detached());
    LayerMap m{layer_index, MapKind::Attention, t.values()};
    validate_layer_map(m);
    return m;
}

// =====================================================================
//  Jacobian maps
// =====================================================================

// Per-class squared gradient norms of the batch-mean logits with respect to
// the weight tensors of the requested crucial layers. All layers share the
// same per-class backward sweeps. With `differentiable`, results stay on the
// tape the forward pass was recorded on.
inline std::map<std::size_t, Tensor> jacobian_map_tensors(Tape& tape, Model& model,
                                                          const Tensor& logits,
                                                          const std::vector<std::size_t>& layers,
                                                          bool differentiable) {
    const std::size_t classes = logits.dim(logits.rank() - 1);
    std::map<std::size_t, std::vector<Tensor>> norms;  // layer -> per-class scalars
    for (std::size_t cls = 0; cls < classes; ++cls) {
        Tensor scalar = detail::class_mean_logit(logits, cls);
        GradientMap grads = tape.backward(scalar, {/*retain=*/true, /*create_graph=*/differentiable});
        for (std::size_t layer : layers) {
            Tensor gw = grads.wrt(model.params[layer].weight);
            norms[layer].push_back(sum(square(gw)));
        }
    }
    std::map<std::size_t, Tensor> out;
    for (std::size_t layer : layers) {
        out.emplace(layer, detail::normalize_map_tensor(stack_scalars(norms[layer])));
    }
    return out;
}

inline std::map<std::size_t, LayerMap> jacobian_maps(Model& model,
                                                     const std::vector<std::size_t>& layers,
                                                     const Tensor& batch) {
    ParameterRelease guard(model);
    Tape tape;
    Tensor logits = forward_with_taps(model, &tape, batch).logits;
    auto tensors = jacobian_map_tensors(tape, model, logits, layers, /*differentiable=*/false);
    std::map<std::size_t, LayerMap> out;
    for (auto& [layer, t] : tensors) {
        LayerMap m{layer, MapKind::Jacobian, t.values()};
        validate_layer_map(m);
        out.emplace(layer, std::move(m));
    }
    return out;
}

inline LayerMap jacobian_map(Model& model, std::size_t layer_index, const Tensor& batch) {
    return jacobian_maps(model, {layer_index}, batch).at(layer_index);
}

// =====================================================================
//  Hessian maps
// =====================================================================

// Per-class absolute mass of the exact Hessian diagonal of the batch-mean
// softmax class probabilities with respect to the layer weights. The smooth
// head carries the curvature: raw logits of a relu stack are piecewise
// linear in any single layer's weights, so their within-layer second
// derivatives vanish almost everywhere, and log-softmax curvature collapses
// to the same -lse'' for every class. Probability curvature stays
// class-specific:
//   d2 p_ic / dt2 = p_ic [ (a_ic - s_i)^2 - v_i ],   a = d logits / dt,
// with s, v the softmax-weighted mean and variance of a. Two routes compute
// it: a second-order directional sweep over the tape (any layer kind), and,
// for dense layers, the closed first-order form above where a factorizes as
// a[(u,v),c] = B[c,v] * h[u] (B the logit/pre-activation sensitivity, h the
// layer input). The closed form stays on the tape, so with create_graph the
// hessian layer loss is differentiable through an ordinary double backward.

// Closed-form route for dense crucial layers. `traced` must come from
// forward_with_taps(..., trace = true) on `tape`.
inline std::map<std::size_t, Tensor> hessian_map_tensors(Tape& tape, Model& model,
                                                         const ForwardResult& traced,
                                                         const std::vector<std::size_t>& layers,
                                                         bool differentiable) {
    for (std::size_t layer : layers) {
        if (model.spec.layers[layer].kind != LayerKind::Dense) {
            throw ValueError("hessian_map_tensors: layer " + std::to_string(layer) +
                             " is not dense; use the directional-sweep route");
        }
    }
    if (traced.layer_preacts.empty()) {
        throw ValueError("hessian_map_tensors: forward pass was not traced");
    }
    const Tensor& logits = traced.logits;
    const std::size_t classes = logits.dim(1);
    const std::size_t batch_n = logits.dim(0);
    Tensor p = softmax(logits);

    std::map<std::size_t, std::vector<Tensor>> sensitivities;  // layer -> per-class [N,V]
    std::vector<Tensor> p_cols;                                // per-class [N,1]
    for (std::size_t cls = 0; cls < classes; ++cls) {
        Tensor pick(Shape{classes}, 0.0);
        pick.at(cls) = 1.0;
        Tensor scalar = sum(mul(logits, pick));
        GradientMap grads = tape.backward(scalar, {/*retain=*/true, /*create_graph=*/differentiable});
        for (std::size_t layer : layers) {
            sensitivities[layer].push_back(grads.wrt(traced.layer_preacts[layer]));
        }
        p_cols.push_back(sum_axis(mul(p, pick), 1));
    }

    const Tensor inv_n = Tensor::scalar(1.0 / static_cast<double>(batch_n));
    std::map<std::size_t, Tensor> out;
    for (std::size_t layer : layers) {
        const auto& B = sensitivities[layer];
        Tensor weighted_mean, weighted_sq;
        for (std::size_t cls = 0; cls < classes; ++cls) {
            Tensor term = mul(p_cols[cls], B[cls]);
            Tensor term_sq = mul(p_cols[cls], square(B[cls]));
            weighted_mean = cls == 0 ? term : add(weighted_mean, term);
            weighted_sq = cls == 0 ? term_sq : add(weighted_sq, term_sq);
        }
        Tensor variance = sub(weighted_sq, square(weighted_mean));
        Tensor input_sq_t = transpose(square(traced.layer_inputs[layer]));  // [U,N]
        std::vector<Tensor> masses;
        masses.reserve(classes);
        for (std::size_t cls = 0; cls < classes; ++cls) {
            Tensor curv = mul(p_cols[cls], sub(square(sub(B[cls], weighted_mean)), variance));
            masses.push_back(sum(abs(mul(matmul(input_sq_t, curv), inv_n))));
        }
        out.emplace(layer, detail::normalize_map_tensor(stack_scalars(masses)));
    }
    return out;
}

// Detached extraction for arbitrary layer kinds: closed form for dense
// layers, exact second-order directional sweeps for the rest.
inline std::map<std::size_t, LayerMap> hessian_maps(Model& model,
                                                    const std::vector<std::size_t>& layers,
                                                    const Tensor& batch) {
    ParameterRelease guard(model);
    Tape tape;
    ForwardResult fwd = forward_with_taps(model, &tape, batch, {}, /*trace=*/true);
    std::vector<std::size_t> dense_layers, sweep_layers;
    for (std::size_t layer : layers) {
        (model.spec.layers[layer].kind == LayerKind::Dense ? dense_layers : sweep_layers)
            .push_back(layer);
    }
    std::map<std::size_t, LayerMap> out;
    if (!dense_layers.empty()) {
        auto tensors = hessian_map_tensors(tape, model, fwd, dense_layers, /*differentiable=*/false);
        for (auto& [layer, t] : tensors) {
            LayerMap m{layer, MapKind::Hessian, t.values()};
            validate_layer_map(m);
            out.emplace(layer, std::move(m));
        }
    }
    if (!sweep_layers.empty()) {
        Tensor scores = softmax(fwd.logits);
        const std::size_t classes = scores.dim(scores.rank() - 1);
        std::vector<Tensor> scalars;
        scalars.reserve(classes);
        for (std::size_t cls = 0; cls < classes; ++cls) {
            scalars.push_back(detail::class_mean_logit(scores, cls));
        }
        for (std::size_t layer : sweep_layers) {
            const auto d2 = tape.second_directional_batch(scalars, model.params[layer].weight);
            std::vector<double> mass(classes, 0.0);
            for (std::size_t cls = 0; cls < classes; ++cls) {
                for (double v : d2[cls]) mass[cls] += std::abs(v);
            }
            LayerMap m{layer, MapKind::Hessian, detail::l1_normalize_or_uniform(std::move(mass))};
            validate_layer_map(m);
            out.emplace(layer, std::move(m));
        }
    }
    return out;
}

inline LayerMap hessian_map(Model& model, std::size_t layer_index, const Tensor& batch) {
    return hessian_maps(model, {layer_index}, batch).at(layer_index);
}

// =====================================================================
//  Detached extraction drivers
// =====================================================================

inline std::map<std::size_t, LayerMap> attention_maps(Model& model,
                                                      const std::vector<std::size_t>& layers,
                                                      const Tensor& batch) {
    ForwardResult fwd = forward_with_taps(model, nullptr, batch, layers);
    std::map<std::size_t, LayerMap> out;
    for (std::size_t layer : layers) {
        LayerMap m = attention_map(detail::batch_mean(fwd.taps.at(layer)), layer);
        out.emplace(layer, std::move(m));
    }
    return out;
}

inline std::map<std::size_t, LayerMap> model_maps(Model& model, const std::vector<std::size_t>& layers,
                                                  MapKind kind, const Tensor& batch) {
    switch (kind) {
        case MapKind::Attention: return attention_maps(model, layers, batch);
        case MapKind::Jacobian: {
            auto maps = jacobian_maps(model, layers, batch);
            return maps;
        }
        case MapKind::Hessian: return hessian_maps(model, layers, batch);
    }
    throw ValueError("model_maps: unknown map kind");
}

// One (student, teacher) map pair per crucial pair, both detached.
inline std::vector<std::pair<LayerMap, LayerMap>> extract_pair_maps(Model& student, Model& teacher,
                                                                    const LayerPairing& pairing,
                                                                    MapKind kind,
                                                                    const Tensor& batch) {
    std::vector<std::size_t> s_layers, t_layers;
    for (const auto& [s, t] : pairing.pairs) {
        s_layers.push_back(s);
        t_layers.push_back(t);
    }
    std::vector<std::pair<LayerMap, LayerMap>> out;
    try {
        auto s_maps = model_maps(student, s_layers, kind, batch);
        auto t_maps = model_maps(teacher, t_layers, kind, batch);
        for (const auto& [s, t] : pairing.pairs) {
            const LayerMap& sm = s_maps.at(s);
            const LayerMap& tm = t_maps.at(t);
            if (sm.values.size() != tm.values.size()) {
                throw ShapeError("map lengths differ: " + std::to_string(sm.values.size()) + " vs " +
                                 std::to_string(tm.values.size()));
            }
            out.emplace_back(sm, tm);
        }
    } catch (const std::exception& e) {
        throw ValueError("extract_pair_maps (" + std::string(map_kind_name(kind)) +
                         "): " + e.what());
    }
    return out;
}

}  // namespace lwdl
