// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Run from the repository root (ctest does this) so the
// shipped reference configs resolve.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lwdl/lwdl.hpp"

using namespace lwdl;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Criterion {
    int number;
    std::string name;
    bool pass = true;
    std::string detail;
    double seconds = 0.0;

    void fail(const std::string& why) {
        pass = false;
        if (!detail.empty()) detail += "; ";
        detail += why;
    }
    void note(const std::string& info) {
        if (!detail.empty()) detail += "; ";
        detail += info;
    }
};

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------------
// Criterion 1: derivative oracle suite
// ---------------------------------------------------------------------

ModelSpec random_tiny_spec(Rng& rng) {
    ModelSpec spec;
    const std::size_t in = 2 + rng.below(3);
    const std::size_t hidden = 3 + rng.below(6);
    const std::size_t out = 2 + rng.below(3);
    spec.input_shape = {in};
    spec.seed = rng.next_u64();
    spec.layers.push_back({LayerKind::Dense, in, hidden, 0, 1, 0, true});
    spec.layers.push_back({LayerKind::Dense, hidden, out, 0, 1, 0, false});
    return spec;
}

// Relu kinks poison central differences; resample until pre-activations
// stay clear of zero at every probe point.
bool preactivations_safe(Model& m, const Tensor& batch) {
    Tensor x = batch;
    for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
        x = add(matmul(x, m.params[i].weight), m.params[i].bias);
        if (m.spec.layers[i].relu) {
            for (std::size_t k = 0; k < x.size(); ++k) {
                if (std::abs(x.at(k)) < 5e-2) return false;
            }
            x = relu(x);
        }
    }
    return true;
}

Criterion criterion_1() {
    Criterion c{1, "derivative oracle suite"};
    const auto t0 = Clock::now();
    Rng rng(1001);

    std::size_t grad_trials = 0;
    double worst_grad = 0.0;
    while (grad_trials < 100) {
        ModelSpec spec = random_tiny_spec(rng);
        Model m = build_model(spec);
        const std::size_t batch_n = 2 + rng.below(3);
        Tensor batch(Shape{batch_n, spec.input_shape[0]});
        for (std::size_t i = 0; i < batch.size(); ++i) batch.at(i) = rng.uniform(-1.0, 1.0);
        std::vector<int> labels(batch_n);
        const std::size_t classes = spec.layers.back().out;
        for (int& l : labels) l = static_cast<int>(rng.below(classes));
        if (!preactivations_safe(m, batch)) continue;

        ParameterRelease guard(m);
        Tape tape;
        Tensor loss = cross_entropy(forward_with_taps(m, &tape, batch).logits, labels);
        GradientMap grads = tape.backward(loss);

        std::vector<Tensor> analytic;
        std::vector<Tensor> handles;
        for (Tensor* p : m.parameters()) {
            analytic.push_back(grads.wrt(*p));
            handles.push_back(*p);
        }
        release_parameters(m);
        auto fd = fd_gradient(
            [&]() { return cross_entropy(forward(m, batch), labels).item(); }, handles);
        for (std::size_t pi = 0; pi < handles.size(); ++pi) {
            for (std::size_t k = 0; k < handles[pi].size(); ++k) {
                worst_grad = std::max(worst_grad, rel_err(analytic[pi].at(k), fd[pi].at(k)));
            }
        }
        ++grad_trials;
    }
    if (worst_grad >= 1e-4) {
        c.fail("gradient vs finite differences worst relative error " + fmt(worst_grad) +
               " >= 1e-4");
    }

    std::size_t hess_trials = 0;
    double worst_hess = 0.0;
    while (hess_trials < 20) {
        ModelSpec spec = random_tiny_spec(rng);
        Model m = build_model(spec);
        Tensor batch(Shape{2, spec.input_shape[0]});
        for (std::size_t i = 0; i < batch.size(); ++i) batch.at(i) = rng.uniform(-1.0, 1.0);
        std::vector<int> labels(2);
        for (int& l : labels) l = static_cast<int>(rng.below(spec.layers.back().out));
        if (!preactivations_safe(m, batch)) continue;

        std::vector<Tensor> diag;
        {
            ParameterRelease guard(m);
            Tape tape;
            Tensor loss = cross_entropy(forward_with_taps(m, &tape, batch).logits, labels);
            std::vector<Tensor> params;
            for (Tensor* p : m.parameters()) params.push_back(*p);
            diag = tape.hessian_diag(loss, params);
        }

        std::vector<Tensor*> handles = m.parameters();
        for (std::size_t pi = 0; pi < handles.size(); ++pi) {
            Tensor& p = *handles[pi];
            for (std::size_t k = 0; k < p.size(); ++k) {
                auto grad_at = [&](double delta) {
                    const double saved = p.at(k);
                    p.at(k) = saved + delta;
                    ParameterRelease guard(m);
                    Tape tape;
                    Tensor loss =
                        cross_entropy(forward_with_taps(m, &tape, batch).logits, labels);
                    const double g = tape.backward(loss).wrt(p).at(k);
                    p.at(k) = saved;
                    return g;
                };
                const double h = 1e-4 * std::max(1.0, std::abs(p.at(k)));
                const double fd = (grad_at(h) - grad_at(-h)) / (2.0 * h);
                worst_hess = std::max(worst_hess, rel_err(diag[pi].at(k), fd));
            }
        }
        ++hess_trials;
    }
    if (worst_hess >= 1e-3) {
        c.fail("hessian diagonal vs finite differences of backward worst relative error " +
               fmt(worst_hess) + " >= 1e-3");
    }

    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    c.note(std::to_string(grad_trials) + " gradient instances (worst " + fmt(worst_grad) +
           "), " + std::to_string(hess_trials) + " hessian instances (worst " + fmt(worst_hess) +
           ")");
    if (c.seconds >= 120.0) c.fail("runtime " + fmt(c.seconds) + "s >= 2 minutes");
    return c;
}

// ---------------------------------------------------------------------
// Criterion 2: divergence suite
// ---------------------------------------------------------------------

Criterion criterion_2() {
    Criterion c{2, "divergence suite"};
    const auto t0 = Clock::now();
    Rng rng(2002);
    auto random_distribution = [&](std::size_t n, double min_entry) {
        std::vector<double> p(n);
        double total = 0.0;
        for (double& v : p) {
            v = min_entry + rng.uniform(0.0, 1.0);
            total += v;
        }
        for (double& v : p) v /= total;
        return p;
    };

    std::size_t pairs = 0;
    for (int trial = 0; trial < 1100; ++trial) {
        const std::size_t n = 2 + trial % 31;
        auto s = random_distribution(n, 0.0);
        auto t = random_distribution(n, 0.0);
        const double v = jsd(s, t);
        if (!(v >= 0.0 && v <= kLn2 + 1e-12)) {
            c.fail("bound violated: jsd = " + fmt(v));
            break;
        }
        if (std::abs(v - jsd(t, s)) > 1e-12) {
            c.fail("symmetry violated by " + fmt(std::abs(v - jsd(t, s))));
            break;
        }
        if (std::abs(v - jsd_entropy_form(s, t)) > 1e-10) {
            c.fail("entropy/KLD form mismatch " + fmt(std::abs(v - jsd_entropy_form(s, t))));
            break;
        }
        if (v <= 1e-9) {
            double maxdiff = 0.0;
            for (std::size_t i = 0; i < n; ++i) maxdiff = std::max(maxdiff, std::abs(s[i] - t[i]));
            if (maxdiff > 1e-4) {
                c.fail("near-zero jsd with max|s-t| = " + fmt(maxdiff));
                break;
            }
        }
        ++pairs;
    }

    // Zero-iff-equal, constructive direction: perturbations of at most 1e-6
    // on well-conditioned vectors must keep jsd under 1e-9, and exact
    // equality must give exactly 0.
    for (int trial = 0; trial < 300 && c.pass; ++trial) {
        const std::size_t n = 2 + trial % 31;
        auto base = random_distribution(n, 0.5);
        if (jsd(base, base) != 0.0) {
            c.fail("jsd(p, p) != 0");
            break;
        }
        auto close = base;
        for (std::size_t i = 0; i + 1 < n; i += 2) {
            const double d = rng.uniform(-1e-6, 1e-6);
            close[i] += d;
            close[i + 1] -= d;
        }
        if (jsd(base, close) > 1e-9) {
            c.fail("jsd of 1e-6-close maps = " + fmt(jsd(base, close)) + " > 1e-9");
            break;
        }
    }

    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    c.note(std::to_string(pairs) + " random pairs");
    if (c.seconds >= 10.0) c.fail("runtime " + fmt(c.seconds) + "s >= 10 seconds");
    return c;
}

// ---------------------------------------------------------------------
// Criterion 3: scheduler recurrence
// ---------------------------------------------------------------------

Criterion criterion_3() {
    Criterion c{3, "scheduler recurrence"};
    const auto t0 = Clock::now();

    for (double gamma : {0.0, 0.5, 0.9, 0.99, 1.0}) {
        for (double jsd_c : {0.0, 0.1, kLn2}) {
            for (double eta0 : {0.0, 0.3}) {
                SchedulerConfig cfg;
                cfg.mode = SchedulerMode::Layerwise;
                cfg.base_lr = 0.1;
                cfg.gamma = gamma;
                cfg.alpha_min = 1e-14;
                cfg.alpha_max = 1e14;
                cfg.initial_eta = eta0;
                LayerLRState s{0, cfg.base_lr, eta0};
                for (std::size_t u = 1; u <= 60; ++u) {
                    s = update_layer_lr(s, jsd_c, cfg);
                    const double g = std::pow(gamma, static_cast<double>(u));
                    const double closed = g * eta0 + (1.0 - g) * jsd_c;
                    if (std::abs(s.eta - closed) >= 1e-12) {
                        c.fail("recurrence vs closed form differs by " +
                               fmt(std::abs(s.eta - closed)) + " at gamma " + fmt(gamma));
                        u = 61;
                    }
                }
            }
        }
    }

    {
        SchedulerConfig cfg;
        cfg.mode = SchedulerMode::Layerwise;
        cfg.base_lr = 0.1;
        std::vector<LayerLRState> states{{0, 0.05, 0.2}, {3, 0.07, 0.1}};
        const auto before = states;
        for (std::size_t epoch = 1; epoch <= 100; ++epoch) {
            if (epoch % cfg.update_interval == 0) continue;
            scheduler_step(states, epoch, {}, cfg);
            for (std::size_t i = 0; i < states.size(); ++i) {
                if (states[i].alpha != before[i].alpha || states[i].eta != before[i].eta) {
                    c.fail("off-interval epoch " + std::to_string(epoch) + " mutated state");
                    epoch = 101;
                }
            }
        }
    }

    {
        SchedulerConfig cfg;
        cfg.mode = SchedulerMode::MultiStep;
        cfg.base_lr = 0.1;
        cfg.milestones = {25, 35};
        cfg.multistep_factor = 0.01;
        std::vector<LayerLRState> states;
        const double at24 = scheduler_step(states, 24, {}, cfg).base;
        const double at25 = scheduler_step(states, 25, {}, cfg).base;
        const double at35 = scheduler_step(states, 35, {}, cfg).base;
        if (at24 != 0.1) c.fail("multistep moved before the first milestone");
        if (at25 != 0.1 * 0.01) c.fail("multistep at epoch 25 is " + fmt(at25));
        if (at35 != 0.1 * 0.01 * 0.01) c.fail("multistep at epoch 35 is " + fmt(at35));
        if (rel_err(at25, 1e-3) > 1e-12 || rel_err(at35, 1e-5) > 1e-12) {
            c.fail("multistep decayed rates off the stated factors");
        }
    }

    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (c.seconds >= 5.0) c.fail("runtime " + fmt(c.seconds) + "s >= 5 seconds");
    return c;
}

// ---------------------------------------------------------------------
// Criterion 4: ablation identities
// ---------------------------------------------------------------------

Criterion criterion_4(const RunConfig& spirals_cfg) {
    Criterion c{4, "ablation identities"};
    const auto t0 = Clock::now();
    Dataset data = build_dataset(spirals_cfg.dataset);

    {
        // lambda = 0 with constant rate must reproduce plain training bit
        // for bit (shortened budget keeps this under a minute).
        const std::size_t epochs = 8;
        Model plain = train_teacher(spirals_cfg.student, data, epochs,
                                    spirals_cfg.scheduler.base_lr,
                                    spirals_cfg.training.batch_size, 424242);
        Model student = build_model(spirals_cfg.student);
        Model teacher = build_model(spirals_cfg.teacher);
        DistillationOptions opt;
        opt.kind = MapKind::Attention;
        opt.lambda = 0.0;
        opt.epochs = epochs;
        opt.batch_size = spirals_cfg.training.batch_size;
        opt.seed = 424242;
        opt.scheduler = spirals_cfg.scheduler;
        opt.scheduler.mode = SchedulerMode::None;
        run_distillation(student, teacher, data, opt);

        auto pa = student.parameters();
        auto pb = plain.parameters();
        for (std::size_t i = 0; i < pa.size() && c.pass; ++i) {
            for (std::size_t k = 0; k < pa[i]->size(); ++k) {
                if (pa[i]->at(k) != pb[i]->at(k)) {
                    c.fail("lambda = 0 run differs from plain training at parameter " +
                           std::to_string(i));
                    break;
                }
            }
        }
    }

    {
        // Self-distillation: identical weights on both sides.
        Model student = build_model(spirals_cfg.student);
        Model twin = build_model(spirals_cfg.student);
        Tensor sample(spirals_cfg.student.input_shape, 0.0);
        LayerPairing pairing = pair_crucial_layers(student, twin, sample);
        auto [batch, labels] =
            gather_batch(data, {data.train_idx.begin(), data.train_idx.begin() + 16});
        for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
            HessianMapCache cache;
            if (kind == MapKind::Hessian) {
                cache.pairs = extract_pair_maps(student, twin, pairing, kind, batch);
                cache.valid = true;
            }
            ParameterRelease sg(student), tg(twin);
            Tape tape;
            CompositeLoss loss =
                composite_loss(tape, student, twin, pairing, kind, batch, labels, 1.0,
                               spirals_cfg.divergence, kind != MapKind::Hessian, &cache);
            for (double v : loss.per_layer) {
                if (!(std::abs(v) <= 1e-12)) {
                    c.fail(std::string(map_kind_name(kind)) + " self layer loss " + fmt(v) +
                           " > 1e-12");
                }
            }
        }
        for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
            auto pairs = extract_pair_maps(student, twin, pairing, kind, batch);
            for (const auto& [sm, tm] : pairs) {
                const double v = jsd(sm.values, tm.values, spirals_cfg.divergence);
                if (!(v <= 1e-9)) {
                    c.fail(std::string(map_kind_name(kind)) + " self jsd " + fmt(v) + " > 1e-9");
                }
            }
        }
    }

    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (c.seconds >= 60.0) c.fail("runtime " + fmt(c.seconds) + "s >= 1 minute");
    return c;
}

// ---------------------------------------------------------------------
// Criteria 5 and 6: directional battery and map alignment
// ---------------------------------------------------------------------

struct RunSummary {
    double final_acc = 0.0;
    std::vector<double> first_jsd, last_jsd;
};

struct Battery {
    // [kind][mode] -> per-seed summaries
    std::map<MapKind, std::map<SchedulerMode, std::vector<RunSummary>>> cells;
    double teacher_acc = 0.0;
    double plain_acc = 0.0;
};

Battery run_battery(const RunConfig& cfg, const std::vector<std::uint64_t>& seeds,
                    unsigned workers) {
    Dataset data = build_dataset(cfg.dataset);
    Model teacher =
        train_teacher(cfg.teacher, data, cfg.training.teacher_epochs, cfg.training.teacher_lr,
                      cfg.training.batch_size, cfg.training.seed);
    Battery battery;
    battery.teacher_acc = evaluate_accuracy(teacher, data, data.test_idx);
    {
        Model plain = train_teacher(cfg.student, data, cfg.training.epochs,
                                    cfg.scheduler.base_lr, cfg.training.batch_size,
                                    cfg.training.seed);
        battery.plain_acc = evaluate_accuracy(plain, data, data.test_idx);
    }

    struct Job {
        MapKind kind;
        SchedulerMode mode;
        std::uint64_t seed;
        std::size_t slot;
    };
    std::vector<Job> jobs;
    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        for (SchedulerMode mode : {SchedulerMode::None, SchedulerMode::Layerwise}) {
            battery.cells[kind][mode].resize(seeds.size());
            for (std::size_t si = 0; si < seeds.size(); ++si) {
                jobs.push_back(Job{kind, mode, seeds[si], si});
            }
        }
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t at = next.fetch_add(1);
            if (at >= jobs.size()) return;
            const Job& job = jobs[at];
            Model teacher_copy = teacher;  // shared read-only buffers
            ModelSpec sp = cfg.student;
            sp.seed = derive_seed(cfg.student.seed, job.seed);
            Model student = build_model(sp);
            DistillationOptions opt;
            opt.kind = job.kind;
            opt.lambda = cfg.training.lambda;
            opt.differentiable_maps = job.kind != MapKind::Hessian &&
                                      cfg.training.differentiable_maps != DifferentiableMapsMode::Off;
            opt.hessian_refresh = cfg.training.hessian_refresh;
            opt.epochs = cfg.training.epochs;
            opt.batch_size = cfg.training.batch_size;
            opt.seed = job.seed;
            opt.probe_batch = cfg.training.probe_batch;
            opt.divergence = cfg.divergence;
            opt.scheduler = cfg.scheduler;
            opt.scheduler.mode = job.mode;
            DistillationOutcome out = run_distillation(student, teacher_copy, data, opt);
            RunSummary s;
            s.final_acc = out.epochs.back().test_accuracy;
            s.first_jsd = out.epochs.front().per_layer_jsd;
            s.last_jsd = out.epochs.back().per_layer_jsd;
            battery.cells[job.kind][job.mode][job.slot] = std::move(s);
        }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 1; i < workers; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return battery;
}

double cell_mean(const std::vector<RunSummary>& runs) {
    double s = 0.0;
    for (const RunSummary& r : runs) s += r.final_acc;
    return s / static_cast<double>(runs.size());
}

void criteria_5_and_6(const RunConfig& spirals, const RunConfig& blobs_easy,
                      const RunConfig& blobs_hard, unsigned workers, Criterion& c5,
                      Criterion& c6) {
    const auto t0 = Clock::now();
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

    Battery sp = run_battery(spirals, seeds, workers);
    const double gap_points = (sp.teacher_acc - sp.plain_acc) * 100.0;
    c5.note("spirals teacher " + fmt(sp.teacher_acc) + ", plain student " + fmt(sp.plain_acc) +
            " (gap " + fmt(gap_points) + " pts)");
    if (gap_points < 5.0 || gap_points > 15.0) {
        c5.fail("plain-student gap " + fmt(gap_points) + " pts outside [5, 15]");
    }
    for (auto& [kind, modes] : sp.cells) {
        const double none = cell_mean(modes.at(SchedulerMode::None));
        const double lw = cell_mean(modes.at(SchedulerMode::Layerwise));
        c5.note(std::string(map_kind_name(kind)) + " spirals none " + fmt(none) + " vs layerwise " +
                fmt(lw));
        if (!(lw >= none)) {
            c5.fail(std::string(map_kind_name(kind)) + ": layerwise mean " + fmt(lw) +
                    " < none mean " + fmt(none) + " on spirals");
        }
    }

    Battery easy = run_battery(blobs_easy, seeds, workers);
    Battery hard = run_battery(blobs_hard, seeds, workers);
    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        const double easy_gap = cell_mean(easy.cells[kind][SchedulerMode::Layerwise]) -
                                cell_mean(easy.cells[kind][SchedulerMode::None]);
        const double hard_gap = cell_mean(hard.cells[kind][SchedulerMode::Layerwise]) -
                                cell_mean(hard.cells[kind][SchedulerMode::None]);
        c5.note(std::string(map_kind_name(kind)) + " blobs gap easy " + fmt(easy_gap * 100) +
                " pts vs hard " + fmt(hard_gap * 100) + " pts");
        if (!(hard_gap >= easy_gap)) {
            c5.fail(std::string(map_kind_name(kind)) + ": hard-task gap " + fmt(hard_gap * 100) +
                    " pts < easy-task gap " + fmt(easy_gap * 100) + " pts");
        }
    }

    c5.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (c5.seconds >= 1800.0) c5.fail("runtime " + fmt(c5.seconds) + "s >= 30 minutes");

    // Criterion 6 reads the spirals layerwise run of the config's own seed.
    const auto t6 = Clock::now();
    const std::size_t cfg_slot = 0;  // seeds[0] == spirals.training.seed by construction
    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        const RunSummary& run = sp.cells[kind][SchedulerMode::Layerwise][cfg_slot];
        for (std::size_t j = 0; j < run.first_jsd.size(); ++j) {
            if (!(run.last_jsd[j] < run.first_jsd[j])) {
                c6.fail(std::string(map_kind_name(kind)) + " pair " + std::to_string(j) +
                        ": final probe jsd " + fmt(run.last_jsd[j]) + " not below epoch-1 " +
                        fmt(run.first_jsd[j]));
            }
        }
        c6.note(std::string(map_kind_name(kind)) + " probe jsd epoch1 " +
                fmt(run.first_jsd.empty() ? 0.0 : run.first_jsd[0]) + " -> final " +
                fmt(run.last_jsd.empty() ? 0.0 : run.last_jsd[0]) + " (pair 0)");
    }
    c6.seconds = std::chrono::duration<double>(Clock::now() - t6).count();
}

// ---------------------------------------------------------------------
// Criterion 7: CLI determinism
// ---------------------------------------------------------------------

Criterion criterion_7() {
    Criterion c{7, "CLI determinism"};
    const auto t0 = Clock::now();
    const std::string cli = "build/lwdl";
    if (!std::filesystem::exists(cli)) {
        c.fail("CLI binary " + cli + " not found (build the lwdl_cli target first)");
        c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        return c;
    }

    const std::string dir = "build/acceptance_c7";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    const std::string config_path = dir + "/run.conf";
    {
        RunConfig cfg = parse_run_config_file("configs/spirals_reference.conf");
        cfg.dataset.n_per_class = 40;
        cfg.training.epochs = 7;
        cfg.training.teacher_epochs = 20;
        cfg.scheduler.update_interval = 3;
        cfg.scheduler.mode = SchedulerMode::Layerwise;
        cfg.output.metrics = dir + "/metrics.csv";
        cfg.output.checkpoint_dir = dir;
        detail::write_file_bytes(config_path, serialize_run_config(cfg));
    }

    auto run_once = [&]() -> std::string {
        const std::string cmd = cli + " distill " + config_path + " > " + dir + "/stdout.txt 2>&1";
        const int rc = std::system(cmd.c_str());
        if (rc != 0) throw std::runtime_error("CLI distill exited with status " + std::to_string(rc));
        return detail::read_file_bytes(dir + "/metrics.csv");
    };
    try {
        const std::string first = run_once();
        const std::string second = run_once();
        if (first != second) {
            c.fail("repeated runs wrote different metrics bytes");
        } else {
            c.note("two distill runs, " + std::to_string(first.size()) + " identical bytes");
        }
    } catch (const std::exception& e) {
        c.fail(e.what());
    }
    c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return c;
}

void print(const Criterion& c) {
    std::cout << (c.pass ? "[PASS]" : "[FAIL]") << " criterion " << c.number << " (" << c.name
              << "): " << (c.detail.empty() ? "ok" : c.detail) << " [" << fmt(c.seconds) << "s]"
              << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    unsigned workers = std::max(1u, std::min(2u, std::thread::hardware_concurrency()));
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg.rfind("--jobs=", 0) == 0) workers = std::stoul(arg.substr(7));
    }

    std::vector<Criterion> results;
    try {
        RunConfig spirals = parse_run_config_file("configs/spirals_reference.conf");
        RunConfig blobs_easy = parse_run_config_file("configs/blobs_easy.conf");
        RunConfig blobs_hard = parse_run_config_file("configs/blobs_hard.conf");
        validate_run_config(spirals);
        validate_run_config(blobs_easy);
        validate_run_config(blobs_hard);

        results.push_back(criterion_1());
        print(results.back());
        results.push_back(criterion_2());
        print(results.back());
        results.push_back(criterion_3());
        print(results.back());
        results.push_back(criterion_4(spirals));
        print(results.back());

        Criterion c5{5, "directional analogue of the reported tables"};
        Criterion c6{6, "map alignment"};
        criteria_5_and_6(spirals, blobs_easy, blobs_hard, workers, c5, c6);
        results.push_back(c5);
        print(c5);
        results.push_back(c6);
        print(c6);

        results.push_back(criterion_7());
        print(results.back());
    } catch (const std::exception& e) {
        std::cerr << "acceptance suite aborted: " << e.what() << "\n";
        return 2;
    }

    bool all = true;
    for (const Criterion& c : results) all = all && c.pass;
    std::cout << (all ? "ALL CRITERIA PASSED" : "SOME CRITERIA FAILED") << std::endl;
    return all ? 0 : 1;
}
