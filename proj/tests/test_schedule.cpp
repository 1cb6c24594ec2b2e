#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elab/rng.hpp"
#include "elab/schedule.hpp"

using namespace elab;

TEST_CASE("single-step schedule") {
    auto s = make_schedule(1, ScheduleKind::Linear, 0.5, 0.5);
    CHECK(s.betas.size() == 1);
    CHECK(s.betas[0] == doctest::Approx(0.5));
    CHECK(s.alpha_bars[0] == doctest::Approx(0.5));
}

TEST_CASE("three-step linear schedule matches hand product") {
    auto s = make_schedule(3, ScheduleKind::Linear, 0.1, 0.3);
    CHECK(s.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bars[1] == doctest::Approx(0.72).epsilon(1e-12));
    CHECK(s.alpha_bars[2] == doctest::Approx(0.504).epsilon(1e-12));
}

TEST_CASE("default-scale schedule decays below 1 percent") {
    auto s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02);
    CHECK(s.alpha_bars.back() < 0.01);
}

TEST_CASE("invalid schedule parameters are rejected") {
    CHECK_THROWS(make_schedule(0, ScheduleKind::Linear, 0.1, 0.2));
    CHECK_THROWS(make_schedule(-3, ScheduleKind::Linear, 0.1, 0.2));
    CHECK_THROWS(make_schedule(10, ScheduleKind::Linear, 0.0, 0.2));
    CHECK_THROWS(make_schedule(10, ScheduleKind::Linear, 0.1, 1.0));
    CHECK_THROWS(make_schedule(10, ScheduleKind::Linear, 0.3, 0.2));
}

TEST_CASE("schedule invariants hold over random valid parameters") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const int T = 1 + static_cast<int>(rng.next_u64() % 300);
        double bmin = 1e-5 + rng.uniform() * 0.4;
        double bmax = bmin + rng.uniform() * (0.95 - bmin);
        const auto kind = (rng.next_u64() & 1) ? ScheduleKind::Linear : ScheduleKind::Cosine;
        auto s = make_schedule(T, kind, bmin, bmax);

        double prod = 1.0;
        double prev = 1.0;
        for (int t = 0; t < T; ++t) {
            CHECK(s.betas[static_cast<std::size_t>(t)] > 0.0);
            CHECK(s.betas[static_cast<std::size_t>(t)] < 1.0);
            CHECK(s.alpha_bars[static_cast<std::size_t>(t)] > 0.0);
            CHECK(s.alpha_bars[static_cast<std::size_t>(t)] < 1.0);
            CHECK(s.alpha_bars[static_cast<std::size_t>(t)] < prev);
            prev = s.alpha_bars[static_cast<std::size_t>(t)];
            prod *= 1.0 - s.betas[static_cast<std::size_t>(t)];
            CHECK(std::abs(prod - s.alpha_bars[static_cast<std::size_t>(t)]) <= 1e-12 * std::abs(prod));
        }
    }
}

TEST_CASE("forward_diffuse special cases") {
    auto s = make_schedule(3, ScheduleKind::Linear, 0.1, 0.3);
    Tensor<double> x0({2, 2, 1});
    Tensor<double> eps({2, 2, 1});
    for (std::size_t i = 0; i < 4; ++i) x0.v[i] = 0.5 * static_cast<double>(i + 1);

    SUBCASE("zero noise scales the image") {
        auto xt = forward_diffuse(x0, 2, eps, s);
        for (std::size_t i = 0; i < 4; ++i) CHECK(xt.v[i] == doctest::Approx(std::sqrt(0.72) * x0.v[i]));
    }
    SUBCASE("zero image scales the noise") {
        for (std::size_t i = 0; i < 4; ++i) eps.v[i] = static_cast<double>(i) - 1.5;
        Tensor<double> z({2, 2, 1});
        auto xt = forward_diffuse(z, 2, eps, s);
        for (std::size_t i = 0; i < 4; ++i) CHECK(xt.v[i] == doctest::Approx(std::sqrt(1.0 - 0.72) * eps.v[i]));
    }
    SUBCASE("hand value at alpha_bar = 0.64") {
        auto s2 = make_schedule(1, ScheduleKind::Linear, 0.36, 0.36);  // alpha_bar_1 = 0.64
        Tensor<double> a({1}), e({1});
        a.v[0] = 1.0;
        e.v[0] = 1.0;
        auto xt = forward_diffuse(a, 1, e, s2);
        CHECK(xt.v[0] == doctest::Approx(1.4).epsilon(1e-12));
    }
    SUBCASE("errors") {
        CHECK_THROWS(forward_diffuse(x0, 0, eps, s));
        CHECK_THROWS(forward_diffuse(x0, 4, eps, s));
        Tensor<double> bad({3, 1, 1});
        CHECK_THROWS(forward_diffuse(x0, 1, bad, s));
    }
}

TEST_CASE("forward_diffuse is linear in (x0, eps)") {
    auto s = make_schedule(7, ScheduleKind::Linear, 0.05, 0.2);
    Rng rng(9);
    Tensor<double> x0({3, 3, 1}), eps({3, 3, 1});
    for (auto& v : x0.v) v = rng.normal();
    for (auto& v : eps.v) v = rng.normal();
    const double a = 2.7;
    auto lhs = forward_diffuse(scaled(x0, a), 4, scaled(eps, a), s);
    auto rhs = scaled(forward_diffuse(x0, 4, eps, s), a);
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
}
