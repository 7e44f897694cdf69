#include "tailsafe/dynamics.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace tailsafe;

namespace {

struct ZeroRng {
    double normal(std::uint64_t, std::uint64_t) const { return 0.0; }
};

const auto kConst = [](double, double) { return 0.2; };

}  // namespace

TEST(LogEuler, ZeroShockIsPureDrift) {
    const PathState s = step_log_euler(PathState{100.0, 0.04, 0.0}, kConst, 0.03, 0.01, 0.01, 0.0);
    EXPECT_DOUBLE_EQ(s.S, 100.0 * std::exp((0.03 - 0.01 - 0.02) * 0.01));
    EXPECT_DOUBLE_EQ(s.t, 0.01);
}

TEST(LogEuler, DriftMatchedInMean) {
    const CounterRng rng(42);
    const double dt = 1.0 / 52, r = 0.05, q = 0.0;
    const int n = 1'000'000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = step_log_euler(PathState{1.0, 0, 0}, kConst, r, q, dt, rng.normal(static_cast<std::uint64_t>(i), 0, 0)).S;
        s1 += x;
        s2 += x * x;
    }
    const double m = s1 / n, se = std::sqrt((s2 / n - m * m) / n);
    EXPECT_LE(std::abs(m - std::exp((r - q) * dt)), 4.0 * se);
}

TEST(LogEuler, ExactForConstantVol) {
    const CounterRng rng(7);
    const double dt = 1.0 / 252, r = 0.02, q = 0.01;
    PathState s{4800.0, 0, 0};
    double wsum = 0.0;
    for (int n = 0; n < 252; ++n) {
        const double z = rng.normal(0, static_cast<std::uint64_t>(n), 0);
        s = step_log_euler(s, kConst, r, q, dt, z);
        wsum += std::sqrt(dt) * z;
    }
    const double exact = 4800.0 * std::exp((r - q - 0.02) * 1.0 + 0.2 * wsum);
    EXPECT_NEAR(s.S / exact, 1.0, 1e-12);
}

TEST(Cir, MeanIsFixedPoint) {
    const CirParams p;
    const CirStep s = step_cir(p.theta_lr, p, 0.01, 0.0);
    EXPECT_DOUBLE_EQ(s.v, p.theta_lr);
    EXPECT_FALSE(s.truncated);
}

TEST(Cir, DeterministicRelaxation) {
    CirParams p;
    p.xi_volvol = 0.0;
    p.v0 = 0.09;
    for (int steps : {50, 100, 200}) {
        const double dt = 1.0 / steps;
        double v = p.v0;
        for (int n = 0; n < steps; ++n) v = step_cir(v, p, dt, 0.0).v;
        const double ode = p.theta_lr + (p.v0 - p.theta_lr) * std::exp(-p.kappa_mr);
        EXPECT_LT(std::abs(v - ode), 0.1 * dt);
    }
}

TEST(Cir, TruncationRecorded) {
    const CirStep s = step_cir(1e-4, CirParams{}, 0.01, -10.0);
    EXPECT_TRUE(s.truncated);
    EXPECT_EQ(s.v, 0.0);
}

TEST(Cir, AffineMeanAtHorizon) {
    CirParams p;
    p.xi_volvol = 0.3;
    p.v0 = 0.06;
    const CounterRng rng(99);
    const int paths = 100'000, steps = 200;
    const double T = 0.5, dt = T / steps;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < paths; ++i) {
        double v = p.v0;
        for (int n = 0; n < steps; ++n)
            v = step_cir(v, p, dt, rng.normal(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(n), 1)).v;
        s1 += v;
        s2 += v * v;
    }
    const double m = s1 / paths, se = std::sqrt((s2 / paths - m * m) / paths);
    EXPECT_LE(std::abs(m - (p.theta_lr + (p.v0 - p.theta_lr) * std::exp(-p.kappa_mr * T))), 4.0 * se);
}

TEST(Correlation, LimitsAndSampleValue) {
    auto [a, b] = correlate_draws(0.3, -1.2, 0.0);
    EXPECT_EQ(a, 0.3);
    EXPECT_EQ(b, -1.2);
    EXPECT_EQ(correlate_draws(0.7, 2.0, 1.0).second, 0.7);
    EXPECT_THROW(correlate_draws(0, 0, 1.01), ParameterError);
    const CounterRng rng(5);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::uint64_t i = 0; i < 1'000'000; ++i) {
        const auto [x, y] = correlate_draws(rng.normal(i, 0, 0), rng.normal(i, 0, 1), -0.5);
        sxy += x * y;
        sxx += x * x;
        syy += y * y;
    }
    EXPECT_NEAR(sxy / std::sqrt(sxx * syy), -0.5, 0.005);
}

TEST(VixProxy, LongRunLevel) {
    CirParams p;
    for (double k : {0.5, 4.0, 20.0}) {
        p.kappa_mr = k;
        EXPECT_NEAR(vix_proxy(p.theta_lr, p).vix, 100.0 * std::sqrt(p.theta_lr), 1e-12);
    }
}

TEST(VixProxy, ShortHorizonLimit) {
    CirParams p;
    p.kappa_mr = 1e-12;
    const VixProxy x = vix_proxy(0.09, p);
    EXPECT_NEAR(x.B, 1.0, 1e-12);
    EXPECT_NEAR(x.vix, 30.0, 1e-9);
}

TEST(VixProxy, HighPrecisionOracle) {
    CirParams p;
    p.kappa_mr = 2.0;
    p.theta_lr = 0.04;
    EXPECT_NEAR(vix_proxy(0.09, p, 30.0 / 365.0).vix, 29.3439322392720974, 1e-12);
}

TEST(VixProxy, IncreasingAndConcave) {
    const CirParams p;
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int i = 0; i < 10'000; ++i) {
        double a = u(gen), b = u(gen);
        if (a > b) std::swap(a, b);
        if (b - a < 1e-9) continue;
        const double fa = vix_proxy(a, p).vix, fb = vix_proxy(b, p).vix, fm = vix_proxy(0.5 * (a + b), p).vix;
        EXPECT_LT(fa, fb);
        EXPECT_GE(fm, 0.5 * (fa + fb) - 1e-12);
    }
}

TEST(VixProxy, LipschitzBounds) {
    const CirParams p;
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int i = 0; i < 10'000; ++i) {
        const double a = u(gen), b = u(gen);
        const VixProxy xa = vix_proxy(a, p), xb = vix_proxy(b, p);
        EXPECT_LE(std::abs(xa.vix - xb.vix), xa.lipschitz_global * std::abs(a - b) + 1e-12);
        if (a >= p.theta_lr && b >= p.theta_lr) {
            EXPECT_LE(std::abs(xa.vix - xb.vix), xa.lipschitz * std::abs(a - b) + 1e-12);
        }
    }
}

TEST(Pool, ZeroShocksGiveDriftPath) {
    CirParams p;
    p.xi_volvol = 0.0;
    std::vector<double> S;
    simulate_path(kConst, p, 100.0, 0.05, 0.0, 10, 0.01, ZeroRng{},
                  [&](int, const PathState& st, double) { S.push_back(st.S); });
    ASSERT_EQ(S.size(), 11u);
    for (int n = 0; n <= 10; ++n) EXPECT_NEAR(S[static_cast<std::size_t>(n)], 100.0 * std::exp(0.03 * 0.01 * n), 1e-12);
}

TEST(Pool, DeterministicAndShaped) {
    SimConfig cfg;
    cfg.n_paths = 30;
    cfg.n_seeds = 8;
    cfg.seed = 123;
    const LocalVolGrid lv = flat_local_vol(0.2, {3000, 4800, 6000}, {0.01, 0.2});
    const PathPanel a = simulate_pool(cfg, lv, CirParams{}, 4800, 0.02, 0.01);
    const PathPanel b = simulate_pool(cfg, lv, CirParams{}, 4800, 0.02, 0.01);
    EXPECT_EQ(a.n_steps, 42);
    EXPECT_EQ(a.S.size(), 8u * 30u * 43u);
    EXPECT_EQ(a.S, b.S);
    EXPECT_EQ(a.v, b.v);
    EXPECT_EQ(a.vix, b.vix);
    for (int s = 0; s < 8; ++s) EXPECT_EQ(a.S[a.index(s, 0, 0)], 4800.0);
    EXPECT_NE(a.S[a.index(0, 0, 42)], a.S[a.index(1, 0, 42)]);
}

TEST(Pool, OversizedPanelRejected) {
    SimConfig cfg;
    cfg.n_paths = 1'000'000;
    cfg.n_seeds = 100;
    EXPECT_THROW(simulate_pool(cfg, flat_local_vol(0.2, {1, 2}, {0.1, 0.2}), CirParams{}, 1, 0, 0), ResourceError);
    cfg.n_paths = 0;
    EXPECT_THROW(cfg.validate(), ParameterError);
}
