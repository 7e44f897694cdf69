#include "tailsafe/kappa_map.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace tailsafe;

namespace {

std::vector<double> strikes() {
    std::vector<double> k;
    for (int i = 0; i <= 60; ++i) k.push_back(3360.0 + 48.0 * i);
    return k;
}

VolSurface flat_world(double sigma) {
    std::vector<SsviSlice> s;
    for (double d : {1.0, 7.0, 14.0, 30.0, 60.0, 90.0}) s.push_back({d / 365.0, sigma * sigma * d / 365.0, 0.0, 0.0});
    return VolSurface(s, 4800.0, 0.02, 0.01);
}

VixSetup setup() { return {strikes(), 14 * 1440, 30 * 1440, 0.0}; }

}  // namespace

TEST(BumpAndInvert, ZeroNumeratorMass) {
    KappaOptions o;
    o.beta_rem = 0.0;
    EXPECT_EQ(bump_and_invert(flat_world(0.2), VolSource::surface, setup(), 14.0 / 365.0, o), 0.0);
}

TEST(BumpAndInvert, FlatWorldMatchesVegaRatio) {
    const double sig = 0.2;
    const VolSurface s = flat_world(sig);
    const VixSetup su = setup();
    const SharedGrids g = price_vix_grids(s, VolSource::surface, su);
    const VixResult v = vix_on(g, su);
    double agg = 0.0;
    const VarianceAudit* legs[2] = {&v.near, &v.next};
    const double lam[2] = {v.lambda1, v.lambda2};
    for (int i = 0; i < 2; ++i) {
        const VarianceAudit& a = *legs[i];
        const double T = a.maturity_T, df = std::exp(-s.rate() * T);
        double sum = 0.0;
        for (std::size_t j = 0; j < a.strikes.size(); ++j)
            sum += a.weights[j] / (a.strikes[j] * a.strikes[j]) / df * bs::vega(a.forward_F, a.strikes[j], T, sig, df);
        agg += lam[i] * 2.0 * sum * 365.0 / 30.0;
    }
    const double T1 = 14.0 / 365.0, F = s.forward(T1);
    const double oracle = bs::vega(F, F, T1, sig, std::exp(-s.rate() * T1)) / agg;
    const double k = bump_and_invert(s, VolSource::surface, su, g, T1);
    EXPECT_NEAR(k / oracle, 1.0, 1e-5);
}

TEST(BumpAndInvert, PositiveOnRandomSurfaces) {
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> vol(0.1, 0.5), rho(-0.7, 0.3), eta(0.1, 0.8);
    for (int n = 0; n < 100; ++n) {
        const double a = vol(gen), r = rho(gen), e = eta(gen);
        std::vector<SsviSlice> sl;
        for (double d : {7.0, 14.0, 30.0, 60.0}) {
            const double th = a * a * d / 365.0;
            sl.push_back({d / 365.0, th, r, e / std::pow(th, 0.3)});
        }
        const VolSurface s(sl, 4800.0, 0.02, 0.01);
        if (!validate_no_arbitrage(s).passed()) continue;
        EXPECT_GE(bump_and_invert(s, VolSource::surface, setup(), 20.0 / 365.0), 0.0);
    }
}

TEST(BumpAndInvert, RichardsonSymmetry) {
    const VolSurface s = flat_world(0.25);
    std::vector<double> k;
    for (double e : {1e-2, 5e-3, 2.5e-3}) {
        KappaOptions o;
        o.bump_eps = e;
        k.push_back(bump_and_invert(s, VolSource::surface, setup(), 21.0 / 365.0, o));
    }
    const double r = (k[0] - k[1]) / (k[1] - k[2]);
    EXPECT_NEAR(r, 4.0, 0.2);
}

TEST(BumpAndInvert, Errors) {
    KappaOptions o;
    o.beta_1 = o.beta_2 = 0.0;
    EXPECT_THROW(bump_and_invert(flat_world(0.2), VolSource::surface, setup(), 0.05, o), DegenerateError);
    o = {};
    o.bump_eps = 0.0;
    EXPECT_THROW(bump_and_invert(flat_world(0.2), VolSource::surface, setup(), 0.05, o), ParameterError);
    EXPECT_THROW(bump_and_invert(flat_world(0.2), VolSource::surface, setup(), 0.0), DomainError);
}

TEST(Smoothing, Examples) {
    const std::vector<double> x = {0.3, 1.2, -0.4, 2.0};
    EXPECT_EQ(smooth_curve(x, {1.0}), x);
    for (double v : smooth_curve({2.5, 2.5, 2.5, 2.5, 2.5}, {0.25, 0.5, 0.25})) EXPECT_DOUBLE_EQ(v, 2.5);
    EXPECT_DOUBLE_EQ(smooth_curve({0.0, 1.0, 0.0}, {0.25, 0.5, 0.25})[1], 0.5);
    EXPECT_THROW(smooth_curve(x, {0.5, 0.5}), ParameterError);
    EXPECT_THROW(smooth_curve(x, {-0.1, 1.2, -0.1}), ParameterError);
    EXPECT_THROW(smooth_curve(x, {0.2, 0.2, 0.2}), ParameterError);
}

TEST(Smoothing, PositiveAndNonExpansive) {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> x(12);
        for (auto& v : x) v = u(gen);
        const auto y = smooth_curve(x, {0.1, 0.2, 0.4, 0.2, 0.1});
        EXPECT_GE(*std::min_element(y.begin(), y.end()), 0.0);
        EXPECT_LE(*std::max_element(y.begin(), y.end()), *std::max_element(x.begin(), x.end()) + 1e-15);
    }
}

TEST(Shrink, Examples) {
    EXPECT_DOUBLE_EQ(shrink_expiry(2.0, 0.01, 0.1, 0.0), 2.0);
    EXPECT_DOUBLE_EQ(shrink_expiry(2.0, 0.1, 0.1, 3.0), 2.0);
    EXPECT_DOUBLE_EQ(shrink_expiry(1.0, 0.0, 0.1, 1.0), 0.5);
    EXPECT_THROW(shrink_expiry(1.0, 0.0, 0.1, -1.0), ParameterError);
    EXPECT_THROW(shrink_expiry(1.0, 0.0, 0.0, 1.0), ParameterError);
}

TEST(Curve, ContractionChain) {
    std::vector<double> T;
    for (int d = 1; d <= 60; d += 3) T.push_back(d / 365.0);
    const KappaCurve c = build_kappa_curve(flat_world(0.2), VolSource::surface, setup(), T);
    const double top = *std::max_element(c.kappa_raw.begin(), c.kappa_raw.end());
    for (std::size_t i = 0; i < T.size(); ++i) {
        EXPECT_GE(c.kappa_eff[i], 0.0);
        EXPECT_LE(c.kappa_eff[i], c.kappa_smoothed[i]);
        EXPECT_LE(c.kappa_smoothed[i], top + 1e-15);
    }
}

TEST(Curve, NearExpiryDecay) {
    const std::vector<double> T = {1 / 365.0, 2 / 365.0, 4 / 365.0, 8 / 365.0, 16 / 365.0};
    const KappaCurve c = build_kappa_curve(flat_world(0.2), VolSource::surface, setup(), T);
    for (std::size_t i = 1; i < T.size(); ++i) EXPECT_LT(c.kappa_eff[i - 1], c.kappa_eff[i]);
    double lo = 1e300, hi = 0.0;
    for (std::size_t i = 0; i < T.size(); ++i) {
        const double r = c.kappa_eff[i] / std::sqrt(T[i]);
        lo = std::min(lo, r);
        hi = std::max(hi, r);
    }
    EXPECT_LT(hi / lo, 3.0);
}

TEST(Curve, Interpolation) {
    KappaCurve c;
    c.maturities = {0.1, 0.2};
    c.kappa_eff = {1.0, 3.0};
    EXPECT_EQ(interp_kappa(c, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(interp_kappa(c, 0.05), 0.5);
    EXPECT_DOUBLE_EQ(interp_kappa(c, 0.15), 2.0);
    EXPECT_DOUBLE_EQ(interp_kappa(c, 0.5), 3.0);
}
