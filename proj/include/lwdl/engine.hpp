#pragma once

// Training loops: plain supervised training for the teacher and the
// distillation loop for the student. The student objective is
//     cross_entropy + lambda * sum_j layer_loss_j
// where layer_loss_j is the divergence between student and teacher maps at
// crucial pair j. A fixed probe batch yields per-layer divergences each
// epoch; their window mean drives the per-layer learning-rate updates on
// interval epochs.

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lwdl/dataset.hpp"
#include "lwdl/divergence.hpp"
#include "lwdl/maps.hpp"
#include "lwdl/network.hpp"
#include "lwdl/rng.hpp"
#include "lwdl/scheduler.hpp"
#include "lwdl/tensor.hpp"

namespace lwdl {

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& msg, std::size_t epoch)
        : std::runtime_error(msg), epoch(epoch) {}
    std::size_t epoch;
};

struct EpochResult {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    std::vector<double> per_layer_jsd;    // probe divergence, pairing order
    std::vector<double> per_layer_alpha;  // scheduler state after the epoch, pairing order
};

namespace detail {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kProbeStream = 2;

inline void sgd_step(Model& m, const GradientMap& grads, const LRTable& lr) {
    for (std::size_t i = 0; i < m.params.size(); ++i) {
        auto& p = m.params[i];
        if (!p.present) continue;
        const double rate = lr.lr_for(i);
        const Tensor gw = grads.wrt(p.weight);
        const Tensor gb = grads.wrt(p.bias);
        for (std::size_t k = 0; k < p.weight.size(); ++k) p.weight.at(k) -= rate * gw.at(k);
        for (std::size_t k = 0; k < p.bias.size(); ++k) p.bias.at(k) -= rate * gb.at(k);
    }
}

inline std::vector<std::vector<std::size_t>> batch_partition(const std::vector<std::size_t>& order,
                                                             std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const std::size_t end = std::min(order.size(), at + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

}  // namespace detail

// Argmax accuracy over the given sample indices; ties resolve to the lowest
// class index.
inline double evaluate_accuracy(Model& model, const Dataset& data,
                                const std::vector<std::size_t>& indices,
                                std::size_t eval_batch = 256) {
    if (indices.empty()) throw ValueError("evaluate_accuracy: no samples");
    std::size_t correct = 0;
    for (std::size_t at = 0; at < indices.size(); at += eval_batch) {
        const std::size_t end = std::min(indices.size(), at + eval_batch);
        std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(at),
                                       indices.begin() + static_cast<std::ptrdiff_t>(end));
        auto [batch, labels] = gather_batch(data, chunk);
        Tensor logits = forward(model, batch);
        const std::size_t classes = logits.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (logits.at(i * classes + c) > logits.at(i * classes + best)) best = c;
            }
            correct += static_cast<int>(best) == labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

// =====================================================================
//  Plain supervised training (teacher)
// =====================================================================

inline Model train_teacher(const ModelSpec& spec, const Dataset& data, std::size_t epochs,
                           double lr, std::size_t batch_size, std::uint64_t seed,
                           std::vector<EpochResult>* log = nullptr) {
    if (batch_size == 0) throw ValueError("train_teacher: batch_size must be positive");
    if (!(lr > 0.0)) throw ValueError("train_teacher: learning rate must be positive");
    Model model = build_model(spec);
    Rng shuffle_rng(derive_seed(seed, detail::kTrainStream));
    LRTable table;
    table.base = lr;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<std::size_t> order = data.train_idx;
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& chunk : detail::batch_partition(order, batch_size)) {
            auto [batch, labels] = gather_batch(data, chunk);
            ParameterRelease guard(model);
            Tape tape;
            Tensor logits = forward_with_taps(model, &tape, batch).logits;
            Tensor loss = cross_entropy(logits, labels);
            if (!std::isfinite(loss.item())) {
                throw TrainingDiverged("training loss became non-finite at epoch " +
                                           std::to_string(epoch),
                                       epoch);
            }
            GradientMap grads = tape.backward(loss);
            detail::sgd_step(model, grads, table);
            loss_sum += loss.item();
            ++batches;
        }
        if (log != nullptr) {
            EpochResult r;
            r.epoch = epoch;
            r.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
            r.test_accuracy = evaluate_accuracy(model, data, data.test_idx);
            log->push_back(std::move(r));
        }
    }
    return model;
}

// =====================================================================
//  Composite distillation loss
// =====================================================================

struct CompositeLoss {
    Tensor total;                   // recorded scalar
    double cross_entropy_value = 0.0;
    std::vector<double> per_layer;  // layer losses, pairing order
};

// Cached detached map pairs for the Hessian flavor, refreshed every
// `hessian_refresh` batches by the caller.
struct HessianMapCache {
    std::vector<std::pair<LayerMap, LayerMap>> pairs;
    bool valid = false;
};

// True when the closed-form differentiable hessian route covers every
// crucial student layer of the pairing (dense layers only).
inline bool hessian_maps_differentiable(const Model& student, const LayerPairing& pairing) {
    for (const auto& [s, t] : pairing.pairs) {
        if (student.spec.layers[s].kind != LayerKind::Dense) return false;
    }
    return true;
}

// Builds the distillation objective on `tape`. With lambda == 0 the map
// machinery is skipped entirely and the objective is exactly the
// cross-entropy (per-layer losses report as zero). Teacher maps are always
// detached; gradient flows only through student terms. Detached hessian
// student maps come from the caller-managed refresh cache.
inline CompositeLoss composite_loss(Tape& tape, Model& student, Model& teacher,
                                    const LayerPairing& pairing, MapKind kind, const Tensor& batch,
                                    const std::vector<int>& labels, double lambda,
                                    const DivergenceConfig& divergence, bool differentiable,
                                    const HessianMapCache* hessian_cache = nullptr) {
    CompositeLoss out;
    std::vector<std::size_t> s_layers;
    for (const auto& [s, t] : pairing.pairs) s_layers.push_back(s);

    const bool want_maps = lambda > 0.0;
    const bool hessian_closed_form = kind == MapKind::Hessian && differentiable &&
                                     hessian_maps_differentiable(student, pairing);
    ForwardResult fwd = forward_with_taps(
        student, &tape, batch,
        want_maps && kind == MapKind::Attention ? s_layers : std::vector<std::size_t>{},
        /*trace=*/want_maps && hessian_closed_form);
    Tensor ce = cross_entropy(fwd.logits, labels);
    out.cross_entropy_value = ce.item();
    out.per_layer.assign(pairing.k, 0.0);
    if (!want_maps) {
        out.total = ce;
        return out;
    }

    // Student-side map tensors (recorded when differentiable).
    std::map<std::size_t, Tensor> student_maps;
    bool hessian_from_cache = false;
    if (kind == MapKind::Attention) {
        for (std::size_t layer : s_layers) {
            Tensor tap = fwd.taps.at(layer);
            if (!differentiable) tap = tap.detached();
            student_maps.emplace(layer, attention_map_tensor(detail::batch_mean(tap)));
        }
    } else if (kind == MapKind::Jacobian) {
        student_maps = jacobian_map_tensors(tape, student, fwd.logits, s_layers, differentiable);
    } else if (hessian_closed_form) {
        student_maps = hessian_map_tensors(tape, student, fwd, s_layers, /*differentiable=*/true);
    } else {
        if (hessian_cache == nullptr || !hessian_cache->valid) {
            throw ValueError("composite_loss: detached hessian flavor requires a refreshed map cache");
        }
        hessian_from_cache = true;
    }

    // Teacher-side maps, always detached.
    std::map<std::size_t, LayerMap> teacher_maps;
    if (!hessian_from_cache) {
        std::vector<std::size_t> t_layers;
        for (const auto& [s, t] : pairing.pairs) t_layers.push_back(t);
        teacher_maps = model_maps(teacher, t_layers, kind, batch);
    }

    Tensor layer_sum;
    for (std::size_t j = 0; j < pairing.k; ++j) {
        const auto [s_layer, t_layer] = pairing.pairs[j];
        Tensor loss_j;
        if (hessian_from_cache) {
            const auto& [sm, tm] = hessian_cache->pairs[j];
            loss_j = jsd_tensor(Tensor(Shape{sm.values.size()}, sm.values),
                                Tensor(Shape{tm.values.size()}, tm.values), divergence);
        } else {
            const LayerMap& tm = teacher_maps.at(t_layer);
            loss_j = jsd_tensor(student_maps.at(s_layer),
                                Tensor(Shape{tm.values.size()}, tm.values), divergence);
        }
        out.per_layer[j] = loss_j.item();
        layer_sum = j == 0 ? loss_j : add(layer_sum, loss_j);
    }
    out.total = add(ce, mul(Tensor::scalar(lambda), layer_sum));
    return out;
}

// =====================================================================
//  Distillation loop
// =====================================================================

struct DistillationOptions {
    MapKind kind = MapKind::Attention;
    double lambda = 1.0;
    bool differentiable_maps = true;
    std::size_t hessian_refresh = 5;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::size_t probe_batch = 64;
    DivergenceConfig divergence{};
    SchedulerConfig scheduler{};
};

struct DistillationOutcome {
    std::vector<EpochResult> epochs;
    LayerPairing pairing;
    std::vector<std::size_t> student_layers;  // pairing order
};

inline DistillationOutcome run_distillation(Model& student, Model& teacher, const Dataset& data,
                                            const DistillationOptions& opt) {
    opt.scheduler.validate();
    opt.divergence.validate();
    if (opt.epochs == 0) throw ValueError("run_distillation: epochs must be positive");
    if (opt.batch_size == 0) throw ValueError("run_distillation: batch_size must be positive");
    if (opt.lambda < 0.0) throw ValueError("run_distillation: lambda must be non-negative");

    const std::uint64_t teacher_before = parameter_checksum(teacher);

    Tensor sample(student.spec.input_shape, 0.0);
    DistillationOutcome outcome;
    outcome.pairing = pair_crucial_layers(student, teacher, sample);
    for (const auto& [s, t] : outcome.pairing.pairs) outcome.student_layers.push_back(s);

    std::vector<LayerLRState> states;
    for (std::size_t layer : outcome.student_layers) {
        states.push_back(LayerLRState{layer, opt.scheduler.base_lr, opt.scheduler.initial_eta});
    }

    // Fixed probe batch drawn once from the test split.
    std::vector<std::size_t> probe_pool = data.test_idx;
    Rng probe_rng(derive_seed(opt.seed, detail::kProbeStream));
    probe_rng.shuffle(probe_pool);
    probe_pool.resize(std::min(opt.probe_batch, probe_pool.size()));
    if (probe_pool.empty()) throw ValueError("run_distillation: empty test split, no probe batch");
    Tensor probe_batch = gather_batch(data, probe_pool).first;

    Rng shuffle_rng(derive_seed(opt.seed, detail::kTrainStream));
    LRTable table;
    table.base = opt.scheduler.base_lr;
    for (const LayerLRState& s : states) {
        if (opt.scheduler.mode == SchedulerMode::Layerwise) table.per_layer[s.layer_index] = s.alpha;
    }

    HessianMapCache hessian_cache;
    std::vector<std::map<std::size_t, double>> jsd_window;
    std::size_t batch_counter = 0;

    // The teacher is frozen and the probe batch is fixed, so the teacher's
    // probe maps are computed once per run.
    std::vector<std::size_t> teacher_layers;
    for (const auto& [s, t] : outcome.pairing.pairs) teacher_layers.push_back(t);
    const auto teacher_probe_maps = model_maps(teacher, teacher_layers, opt.kind, probe_batch);

    auto probe_jsd = [&]() {
        std::map<std::size_t, double> per_layer;
        auto student_maps = model_maps(student, outcome.student_layers, opt.kind, probe_batch);
        for (std::size_t j = 0; j < outcome.pairing.k; ++j) {
            const auto& [s_layer, t_layer] = outcome.pairing.pairs[j];
            per_layer[s_layer] = jsd(student_maps.at(s_layer).values,
                                     teacher_probe_maps.at(t_layer).values, opt.divergence);
        }
        return per_layer;
    };

    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        // Stateless modes take their rate from the epoch index directly.
        if (opt.scheduler.mode != SchedulerMode::Layerwise) {
            table = scheduler_step(states, epoch, {}, opt.scheduler);
        }

        std::vector<std::size_t> order = data.train_idx;
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (const auto& chunk : detail::batch_partition(order, opt.batch_size)) {
            auto [batch, labels] = gather_batch(data, chunk);
            const bool detached_hessian =
                opt.kind == MapKind::Hessian &&
                (!opt.differentiable_maps || !hessian_maps_differentiable(student, outcome.pairing));
            if (detached_hessian && opt.lambda > 0.0) {
                if (!hessian_cache.valid || batch_counter % opt.hessian_refresh == 0) {
                    hessian_cache.pairs = extract_pair_maps(student, teacher, outcome.pairing,
                                                            MapKind::Hessian, batch);
                    hessian_cache.valid = true;
                }
            }
            ParameterRelease sg(student);
            ParameterRelease tg(teacher);
            Tape tape;
            CompositeLoss loss =
                composite_loss(tape, student, teacher, outcome.pairing, opt.kind, batch, labels,
                               opt.lambda, opt.divergence, opt.differentiable_maps, &hessian_cache);
            if (!std::isfinite(loss.total.item())) {
                std::ostringstream os;
                os << "distillation loss became non-finite at epoch " << epoch << "; alphas:";
                for (const LayerLRState& s : states) os << " " << s.alpha;
                if (!jsd_window.empty()) {
                    os << "; last probe divergences:";
                    for (const auto& [l, v] : jsd_window.back()) os << " " << v;
                }
                throw TrainingDiverged(os.str(), epoch);
            }
            GradientMap grads = tape.backward(loss.total);
            detail::sgd_step(student, grads, table);
            loss_sum += loss.total.item();
            ++batches;
            ++batch_counter;
        }

        EpochResult r;
        r.epoch = epoch;
        r.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        r.test_accuracy = evaluate_accuracy(student, data, data.test_idx);

        const auto probe = probe_jsd();
        jsd_window.push_back(probe);
        for (std::size_t layer : outcome.student_layers) r.per_layer_jsd.push_back(probe.at(layer));

        if (opt.scheduler.mode == SchedulerMode::Layerwise) {
            if (epoch % opt.scheduler.update_interval == 0) {
                table = scheduler_step(states, epoch, aggregate_epoch_jsd(jsd_window), opt.scheduler);
                jsd_window.clear();
            } else {
                table = scheduler_step(states, epoch, {}, opt.scheduler);
            }
            for (const LayerLRState& s : states) r.per_layer_alpha.push_back(s.alpha);
        } else {
            table = scheduler_step(states, epoch, {}, opt.scheduler);
            for (std::size_t layer : outcome.student_layers) {
                r.per_layer_alpha.push_back(table.lr_for(layer));
            }
        }
        outcome.epochs.push_back(std::move(r));
    }

    if (parameter_checksum(teacher) != teacher_before) {
        throw std::logic_error("run_distillation: teacher parameters changed during the run");
    }
    return outcome;
}

}  // namespace lwdl
