#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lwdl/engine.hpp"
#include "lwdl/oracle.hpp"
#include "testutil.hpp"

using namespace lwdl;
using lwdl::testutil::max_rel_err;

namespace {

ModelSpec tiny_student(std::uint64_t seed) {
    ModelSpec spec;
    spec.input_shape = {2};
    spec.seed = seed;
    spec.layers.push_back({LayerKind::Dense, 2, 8, 0, 1, 0, true});
    spec.layers.push_back({LayerKind::Dense, 8, 4, 0, 1, 0, false});
    return spec;
}

ModelSpec tiny_teacher(std::uint64_t seed) {
    ModelSpec spec;
    spec.input_shape = {2};
    spec.seed = seed;
    spec.layers.push_back({LayerKind::Dense, 2, 8, 0, 1, 0, true});
    spec.layers.push_back({LayerKind::Dense, 8, 8, 0, 1, 0, true});
    spec.layers.push_back({LayerKind::Dense, 8, 4, 0, 1, 0, false});
    return spec;
}

Dataset tiny_data(std::uint64_t seed = 1) { return generate_spirals(40, 4, 0.2, seed); }

DistillationOptions base_options(MapKind kind) {
    DistillationOptions opt;
    opt.kind = kind;
    opt.lambda = 1.0;
    opt.differentiable_maps = true;
    opt.epochs = 4;
    opt.batch_size = 16;
    opt.seed = 5;
    opt.probe_batch = 16;
    opt.scheduler.mode = SchedulerMode::None;
    opt.scheduler.base_lr = 0.05;
    return opt;
}

bool models_bitwise_equal(const Model& a, const Model& b) {
    auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (!lwdl::testutil::bitwise_equal(*pa[i], *pb[i])) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("composite loss with lambda 0 is exactly the cross entropy", "[engine]") {
    Dataset data = tiny_data();
    Model student = build_model(tiny_student(1));
    Model teacher = build_model(tiny_teacher(2));
    Tensor sample(Shape{2}, 0.0);
    LayerPairing pairing = pair_crucial_layers(student, teacher, sample);
    auto [batch, labels] = gather_batch(data, {0, 1, 2, 3});

    ParameterRelease sg(student), tg(teacher);
    Tape tape;
    CompositeLoss loss = composite_loss(tape, student, teacher, pairing, MapKind::Attention, batch,
                                        labels, 0.0, {}, true);
    GradientMap grads = tape.backward(loss.total);

    Model student2 = build_model(tiny_student(1));
    ParameterRelease sg2(student2);
    Tape plain;
    Tensor ce = cross_entropy(forward_with_taps(student2, &plain, batch).logits, labels);
    GradientMap ce_grads = plain.backward(ce);

    REQUIRE(loss.total.item() == ce.item());
    for (std::size_t i = 0; i < student.params.size(); ++i) {
        REQUIRE(lwdl::testutil::bitwise_equal(grads.wrt(student.params[i].weight),
                                              ce_grads.wrt(student2.params[i].weight)));
        REQUIRE(lwdl::testutil::bitwise_equal(grads.wrt(student.params[i].bias),
                                              ce_grads.wrt(student2.params[i].bias)));
    }
}

TEST_CASE("self-distillation layer losses vanish", "[engine]") {
    Dataset data = tiny_data();
    Model student = build_model(tiny_student(3));
    Model twin = build_model(tiny_student(3));
    Tensor sample(Shape{2}, 0.0);
    LayerPairing pairing = pair_crucial_layers(student, twin, sample);
    auto [batch, labels] = gather_batch(data, {0, 5, 9});

    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        ParameterRelease sg(student), tg(twin);
        Tape tape;
        CompositeLoss loss =
            composite_loss(tape, student, twin, pairing, kind, batch, labels, 1.0, {}, true);
        INFO(map_kind_name(kind));
        for (double v : loss.per_layer) REQUIRE(std::abs(v) <= 1e-12);
    }
    SECTION("detached hessian cache route also vanishes") {
        HessianMapCache cache;
        cache.pairs = extract_pair_maps(student, twin, pairing, MapKind::Hessian, batch);
        cache.valid = true;
        ParameterRelease sg(student), tg(twin);
        Tape tape;
        CompositeLoss loss = composite_loss(tape, student, twin, pairing, MapKind::Hessian, batch,
                                            labels, 1.0, {}, false, &cache);
        for (double v : loss.per_layer) REQUIRE(std::abs(v) <= 1e-12);
    }
}

TEST_CASE("reported total decomposes into cross entropy plus layer losses", "[engine]") {
    Dataset data = tiny_data();
    Model student = build_model(tiny_student(4));
    Model teacher = build_model(tiny_teacher(9));
    Tensor sample(Shape{2}, 0.0);
    LayerPairing pairing = pair_crucial_layers(student, teacher, sample);
    auto [batch, labels] = gather_batch(data, {1, 2, 3, 4, 5});
    const double lambda = 0.7;

    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        ParameterRelease sg(student), tg(teacher);
        Tape tape;
        CompositeLoss loss =
            composite_loss(tape, student, teacher, pairing, kind, batch, labels, lambda, {}, true);
        double sum_layers = 0.0;
        for (double v : loss.per_layer) sum_layers += v;
        INFO(map_kind_name(kind));
        REQUIRE(std::abs(loss.total.item() - (loss.cross_entropy_value + lambda * sum_layers)) <
                1e-10);
    }
}

TEST_CASE("composite gradient matches finite differences", "[engine][fd]") {
    Dataset data = tiny_data();
    Model teacher = build_model(tiny_teacher(12));
    Tensor sample(Shape{2}, 0.0);
    auto [batch, labels] = gather_batch(data, {0, 7, 11});

    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        Model student = build_model(tiny_student(11));
        LayerPairing pairing = pair_crucial_layers(student, teacher, sample);
        auto eval_total = [&]() {
            ParameterRelease sg(student), tg(teacher);
            Tape tape;
            return composite_loss(tape, student, teacher, pairing, kind, batch, labels, 0.8, {},
                                  true)
                .total.item();
        };

        ParameterRelease sg(student), tg(teacher);
        Tape tape;
        CompositeLoss loss =
            composite_loss(tape, student, teacher, pairing, kind, batch, labels, 0.8, {}, true);
        GradientMap grads = tape.backward(loss.total);
        std::vector<Tensor> analytic;
        std::vector<Tensor> handles;
        for (auto& p : student.params) {
            analytic.push_back(grads.wrt(p.weight));
            analytic.push_back(grads.wrt(p.bias));
            handles.push_back(p.weight);
            handles.push_back(p.bias);
        }
        release_parameters(student);
        release_parameters(teacher);

        auto fd = fd_gradient(eval_total, handles);
        for (std::size_t i = 0; i < handles.size(); ++i) {
            INFO(map_kind_name(kind) << " param " << i);
            REQUIRE(max_rel_err(analytic[i], fd[i]) < 1e-3);
        }
    }
}

TEST_CASE("teacher parameters never change during a run", "[engine]") {
    Dataset data = tiny_data();
    Model teacher = train_teacher(tiny_teacher(7), data, 3, 0.05, 16, 7);
    const std::uint64_t before = parameter_checksum(teacher);
    for (MapKind kind : {MapKind::Attention, MapKind::Jacobian, MapKind::Hessian}) {
        Model student = build_model(tiny_student(8));
        DistillationOptions opt = base_options(kind);
        opt.epochs = 2;
        run_distillation(student, teacher, data, opt);
        REQUIRE(parameter_checksum(teacher) == before);
    }
}

TEST_CASE("identical seeds give identical runs", "[engine]") {
    Dataset data = tiny_data();
    Model teacher = train_teacher(tiny_teacher(21), data, 2, 0.05, 16, 3);
    auto run = [&]() {
        Model student = build_model(tiny_student(22));
        DistillationOptions opt = base_options(MapKind::Jacobian);
        opt.scheduler.mode = SchedulerMode::Layerwise;
        opt.scheduler.update_interval = 2;
        auto out = run_distillation(student, teacher, data, opt);
        return std::make_pair(parameter_checksum(student), out.epochs);
    };
    auto [sum1, epochs1] = run();
    auto [sum2, epochs2] = run();
    REQUIRE(sum1 == sum2);
    REQUIRE(epochs1.size() == epochs2.size());
    for (std::size_t e = 0; e < epochs1.size(); ++e) {
        REQUIRE(epochs1[e].train_loss == epochs2[e].train_loss);
        REQUIRE(epochs1[e].test_accuracy == epochs2[e].test_accuracy);
        REQUIRE(epochs1[e].per_layer_jsd == epochs2[e].per_layer_jsd);
        REQUIRE(epochs1[e].per_layer_alpha == epochs2[e].per_layer_alpha);
    }
}

TEST_CASE("lambda 0 with constant rate reproduces plain training bit for bit", "[engine]") {
    Dataset data = tiny_data(77);
    const std::uint64_t train_seed = 1234;
    Model plain = train_teacher(tiny_student(50), data, 5, 0.05, 16, train_seed);

    Model student = build_model(tiny_student(50));
    Model teacher = build_model(tiny_teacher(51));
    DistillationOptions opt = base_options(MapKind::Attention);
    opt.lambda = 0.0;
    opt.epochs = 5;
    opt.seed = train_seed;
    run_distillation(student, teacher, data, opt);
    REQUIRE(models_bitwise_equal(student, plain));
}

TEST_CASE("alphas follow the scheduler mode", "[engine]") {
    Dataset data = tiny_data(31);
    Model teacher = train_teacher(tiny_teacher(61), data, 3, 0.05, 16, 9);

    SECTION("mode none keeps every alpha at the base rate") {
        Model student = build_model(tiny_student(60));
        DistillationOptions opt = base_options(MapKind::Attention);
        opt.epochs = 3;
        auto out = run_distillation(student, teacher, data, opt);
        for (const EpochResult& r : out.epochs) {
            for (double a : r.per_layer_alpha) REQUIRE(a == opt.scheduler.base_lr);
        }
    }
    SECTION("multistep decays all layers together at milestones") {
        Model student = build_model(tiny_student(60));
        DistillationOptions opt = base_options(MapKind::Attention);
        opt.epochs = 5;
        opt.scheduler.mode = SchedulerMode::MultiStep;
        opt.scheduler.milestones = {2, 4};
        opt.scheduler.multistep_factor = 0.01;
        auto out = run_distillation(student, teacher, data, opt);
        const double b = opt.scheduler.base_lr;
        std::vector<double> expected{b, b * 0.01, b * 0.01, b * 0.01 * 0.01, b * 0.01 * 0.01};
        for (std::size_t e = 0; e < out.epochs.size(); ++e) {
            for (double a : out.epochs[e].per_layer_alpha) REQUIRE(a == expected[e]);
        }
    }
    SECTION("layerwise alphas change only on interval epochs") {
        Model student = build_model(tiny_student(60));
        DistillationOptions opt = base_options(MapKind::Attention);
        opt.epochs = 7;
        opt.scheduler.mode = SchedulerMode::Layerwise;
        opt.scheduler.update_interval = 3;
        opt.scheduler.alpha_max = 0.5;
        auto out = run_distillation(student, teacher, data, opt);
        std::vector<double> prev(out.student_layers.size(), opt.scheduler.base_lr);
        for (const EpochResult& r : out.epochs) {
            if (r.epoch % 3 != 0) {
                REQUIRE(r.per_layer_alpha == prev);
            }
            prev = r.per_layer_alpha;
        }
        // At least one interval epoch must have moved the rates.
        REQUIRE(out.epochs[2].per_layer_alpha != out.epochs[0].per_layer_alpha);
    }
}

TEST_CASE("teacher training contracts", "[engine]") {
    Dataset data = tiny_data(13);
    SECTION("zero epochs returns the initialized model unchanged") {
        Model init = build_model(tiny_teacher(33));
        Model trained = train_teacher(tiny_teacher(33), data, 0, 0.05, 16, 1);
        REQUIRE(models_bitwise_equal(init, trained));
    }
    SECTION("same seed twice gives bit-identical checkpoints") {
        Model a = train_teacher(tiny_teacher(34), data, 3, 0.05, 16, 2);
        Model b = train_teacher(tiny_teacher(34), data, 3, 0.05, 16, 2);
        save_model("build/teacher_a.lwdl", a);
        save_model("build/teacher_b.lwdl", b);
        REQUIRE(lwdl::detail::read_file_bytes("build/teacher_a.lwdl") ==
                lwdl::detail::read_file_bytes("build/teacher_b.lwdl"));
        std::remove("build/teacher_a.lwdl");
        std::remove("build/teacher_b.lwdl");
    }
}

TEST_CASE("hessian refresh cadence holds layer losses constant in between", "[engine]") {
    Dataset data = tiny_data(41);
    Model teacher = train_teacher(tiny_teacher(71), data, 2, 0.05, 16, 4);
    Model student = build_model(tiny_student(70));
    Tensor sample(Shape{2}, 0.0);
    LayerPairing pairing = pair_crucial_layers(student, teacher, sample);
    auto [batch, labels] = gather_batch(data, {0, 1, 2, 3});

    HessianMapCache cache;
    cache.pairs = extract_pair_maps(student, teacher, pairing, MapKind::Hessian, batch);
    cache.valid = true;

    auto layer_losses = [&]() {
        ParameterRelease sg(student), tg(teacher);
        Tape tape;
        return composite_loss(tape, student, teacher, pairing, MapKind::Hessian, batch, labels,
                              1.0, {}, false, &cache)
            .per_layer;
    };
    auto first = layer_losses();
    // Perturb the student; cached maps keep the reported layer losses fixed.
    student.params[0].weight.at(0) += 0.25;
    auto second = layer_losses();
    REQUIRE(first == second);
}
