#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "lwdl/oracle.hpp"
#include "testutil.hpp"

using namespace lwdl;

TEST_CASE("central differences are exact on quadratics", "[oracle]") {
    std::vector<Tensor> params{Tensor({2}, {3.0, -1.5})};
    auto f = [&]() { return params[0].at(0) * params[0].at(0) + params[0].at(1) * params[0].at(1); };
    auto g = fd_gradient(f, params);
    REQUIRE(std::abs(g[0].at(0) - 6.0) < 1e-8);
    REQUIRE(std::abs(g[0].at(1) + 3.0) < 1e-8);
}

TEST_CASE("central differences on cubics carry only h^2 truncation", "[oracle]") {
    std::vector<Tensor> params{Tensor::scalar(1.0)};
    auto f = [&]() { return std::pow(params[0].item(), 3.0); };
    auto g = fd_gradient(f, params);
    REQUIRE(std::abs(g[0].item() - 3.0) < 1e-7);
}

TEST_CASE("gradient of a constant is exactly zero", "[oracle]") {
    std::vector<Tensor> params{Tensor({3}, {1.0, 2.0, 3.0})};
    auto f = [&]() { return 7.25; };
    auto g = fd_gradient(f, params);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(g[0].at(i) == 0.0);
}

TEST_CASE("second differences recover curvature", "[oracle]") {
    SECTION("x^2 -> 2") {
        std::vector<Tensor> params{Tensor::scalar(0.7)};
        auto f = [&]() { return params[0].item() * params[0].item(); };
        auto d = fd_hessian_diag(f, params);
        REQUIRE(std::abs(d[0].item() - 2.0) < 1e-6);
    }
    SECTION("x^4 at 1 -> 12") {
        std::vector<Tensor> params{Tensor::scalar(1.0)};
        auto f = [&]() { return std::pow(params[0].item(), 4.0); };
        auto d = fd_hessian_diag(f, params);
        REQUIRE(std::abs(d[0].item() - 12.0) < 1e-4);
    }
    SECTION("linear -> 0") {
        std::vector<Tensor> params{Tensor::scalar(2.0)};
        auto f = [&]() { return 3.0 * params[0].item() + 1.0; };
        auto d = fd_hessian_diag(f, params);
        REQUIRE(std::abs(d[0].item()) < 1e-6);
    }
}

TEST_CASE("fd rejects non-finite objectives", "[oracle]") {
    // sqrt goes NaN at the negative probe point theta - h.
    std::vector<Tensor> params{Tensor::scalar(0.0)};
    auto f = [&]() { return std::sqrt(params[0].item()); };
    REQUIRE_THROWS_AS(fd_gradient(f, params), ValueError);
}

TEST_CASE("scheduler replay follows the geometric closed form", "[oracle]") {
    SchedulerConfig cfg;
    cfg.mode = SchedulerMode::Layerwise;
    cfg.base_lr = 0.1;
    cfg.gamma = 0.85;
    cfg.epsilon = 1e-8;
    cfg.alpha_min = 1e-6;
    cfg.alpha_max = 1e6;  // wide bounds: exercise the bare recurrence

    const double c = 0.31;
    const std::size_t u = 12;
    std::vector<std::map<std::size_t, double>> trace(u, {{3, c}});
    auto states = replay_scheduler(trace, cfg, {3});
    REQUIRE(states.size() == 1);
    const double closed = std::pow(cfg.gamma, static_cast<double>(u)) * cfg.initial_eta +
                          (1.0 - std::pow(cfg.gamma, static_cast<double>(u))) * c;
    REQUIRE(std::abs(states[0].eta - closed) < 1e-12);
}

TEST_CASE("scheduler replay edge cases", "[oracle]") {
    SchedulerConfig cfg;
    cfg.base_lr = 0.1;
    SECTION("empty event rejected") {
        std::vector<std::map<std::size_t, double>> trace{{}};
        REQUIRE_THROWS_AS(replay_scheduler(trace, cfg, {0}), ValueError);
    }
    SECTION("empty trace rejected") {
        REQUIRE_THROWS_AS(replay_scheduler({}, cfg, {0}), ValueError);
    }
    SECTION("gamma = 1 freezes the momentum accumulator") {
        cfg.gamma = 1.0;
        cfg.initial_eta = 0.25;
        std::vector<std::map<std::size_t, double>> trace(5, {{0, 0.6}});
        auto states = replay_scheduler(trace, cfg, {0});
        REQUIRE(states[0].eta == 0.25);
    }
}
