#include "tailsafe/localvol.hpp"

#include <gtest/gtest.h>

using namespace tailsafe;

namespace {

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
    return v;
}

template <class F>
CallPriceGrid analytic_grid(F&& f, std::vector<double> K, std::vector<double> T, double r = 0.0, double q = 0.0) {
    CallPriceGrid g;
    g.strikes = std::move(K);
    g.maturities = std::move(T);
    g.rate_r = r;
    g.div_q = q;
    g.spot_S0 = 100.0;
    g.prices.resize(static_cast<Eigen::Index>(g.nK()), static_cast<Eigen::Index>(g.nT()));
    for (std::size_t i = 0; i < g.nK(); ++i)
        for (std::size_t j = 0; j < g.nT(); ++j)
            g.prices(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f(g.strikes[i], g.maturities[j]);
    return g;
}

const std::vector<double> kUneven = {80, 84, 91, 95, 100, 103, 111, 120};
const std::vector<double> kMats = {0.05, 0.1, 0.18, 0.25, 0.5};

}  // namespace

TEST(Partials, AffineHasNoCurvature) {
    const auto g = analytic_grid([](double K, double T) { return 50.0 - 0.3 * K + 2.0 * T; }, kUneven, kMats);
    for (std::size_t i = 0; i < g.nK(); ++i)
        for (std::size_t j = 0; j < g.nT(); ++j) {
            const Partials p = fd_partials(g, i, j);
            EXPECT_NEAR(p.dKK, 0.0, 1e-12);
            EXPECT_NEAR(p.dK, -0.3, 1e-12);
            EXPECT_NEAR(p.dT, 2.0, 1e-10);
        }
}

TEST(Partials, QuadraticExactOnUnevenMesh) {
    const auto g = analytic_grid([](double K, double T) { return 0.01 * K * K + 3.0 * T * T; }, kUneven, kMats);
    for (std::size_t i = 0; i < g.nK(); ++i)
        for (std::size_t j = 0; j < g.nT(); ++j) {
            const Partials p = fd_partials(g, i, j);
            EXPECT_NEAR(p.dKK, 0.02, 1e-12);
            EXPECT_NEAR(p.dT, 6.0 * g.maturities[j], 1e-10);
            if (i == 0 || i + 1 == g.nK()) {
                EXPECT_NEAR(p.dK, 0.02 * g.strikes[i], 1e-10);
            }
        }
}

TEST(Partials, MatchBlackScholesGreeks) {
    const double S = 100, r = 0.02, q = 0.01, sig = 0.2;
    const auto g = make_call_grid([&](double, double) { return sig; }, linspace(80, 120, 401),
                                  linspace(0.2, 0.3, 21), S, r, q);
    const std::size_t j = 10;
    const double T = g.maturities[j], F = S * std::exp((r - q) * T), df = std::exp(-r * T);
    for (std::size_t i = 100; i <= 300; i += 50) {
        const double K = g.strikes[i];
        const double d2 = (std::log(F / K) - 0.5 * sig * sig * T) / (sig * std::sqrt(T));
        const double dK = -df * bs::norm_cdf(d2);
        const double dKK = df * bs::norm_pdf(d2) / (K * sig * std::sqrt(T));
        const Partials p = fd_partials(g, i, j);
        EXPECT_NEAR(p.dK / dK, 1.0, 1e-3);
        EXPECT_NEAR(p.dKK / dKK, 1.0, 1e-3);
    }
}

TEST(Partials, TooSmallGridRejected) {
    const auto g = analytic_grid([](double K, double) { return K; }, {90, 100}, kMats);
    EXPECT_THROW(dupire_local_variance(g), InsufficientGridError);
}

TEST(Dupire, FlatVolRecovered) {
    const auto g = make_call_grid([](double, double) { return 0.2; }, linspace(60, 160, 201),
                                  {0.19, 0.195, 0.2, 0.205, 0.21}, 100, 0.02, 0.01);
    const LocalVolGrid lv = dupire_local_variance(g);
    for (std::size_t i = 50; i < 150; ++i) EXPECT_NEAR(lv.vol(i, 2), 0.2, 2e-3);
}

TEST(Dupire, ZeroNumeratorGivesZero) {
    const auto g = analytic_grid([](double K, double) { return 0.01 * (K - 60.0) * (K - 60.0); }, kUneven, kMats);
    const LocalVolGrid lv = dupire_local_variance(g);
    EXPECT_EQ(lv.variance.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(lv.floored_count(), 0u);
    EXPECT_EQ(lv.clipped_count(), 0u);
}

TEST(Dupire, ThinCurvatureIsClipped) {
    const double chi = 1e-4;
    const auto g = analytic_grid([&](double K, double T) { return 0.25 * chi * K * K + T; }, kUneven, kMats);
    const LocalVolGrid lv = dupire_local_variance(g, chi);
    EXPECT_EQ(lv.clipped_count(), g.nK() * g.nT());
    for (std::size_t i = 0; i < g.nK(); ++i) {
        const double K = g.strikes[i];
        EXPECT_NEAR(lv.variance(static_cast<Eigen::Index>(i), 0), 1.0 / (0.5 * K * K * chi), 1e-8);
    }
}

TEST(Dupire, NegativeNumeratorFlagged) {
    const auto g = analytic_grid([](double K, double T) { return 0.01 * K * K - T; }, kUneven, kMats);
    const LocalVolGrid lv = dupire_local_variance(g);
    EXPECT_EQ(lv.floored_count(), g.nK() * g.nT());
    EXPECT_EQ(lv.variance.maxCoeff(), 0.0);
    EXPECT_THROW(dupire_local_variance(g, 0.0), ParameterError);
}

TEST(Dupire, ClipCountMonotoneInFloor) {
    const auto g = make_call_grid([](double K, double T) { return 0.2 + 0.1 * std::log(100.0 / K) + 0.1 * T; },
                                  linspace(40, 200, 81), {0.02, 0.05, 0.1, 0.2, 0.5}, 100, 0.01, 0.0);
    std::size_t prev = 0;
    for (double chi : {1e-9, 1e-7, 1e-5, 1e-4, 1e-3, 1e-2}) {
        const LocalVolGrid lv = dupire_local_variance(g, chi);
        EXPECT_GE(lv.clipped_count(), prev);
        prev = lv.clipped_count();
        EXPECT_GE(lv.variance.minCoeff(), 0.0);
        EXPECT_LE(lv.variance.maxCoeff(), lv.c_max);
    }
}

TEST(Interpolation, NodeMidpointAndClamp) {
    LocalVolGrid lv = flat_local_vol(0.2, {90, 100, 110}, {0.1, 0.2, 0.3});
    lv.variance(1, 1) = 0.09;
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 100, 0.2), 0.3);
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 95, 0.2), 0.25);
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 95, 0.15), 0.225);
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 10, 0.2), 0.2);
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 100, 5.0), 0.2);
    EXPECT_DOUBLE_EQ(interp_local_vol(lv, 100, 0.0), 0.2);
}

TEST(Output, CsvHasOneRowPerNode) {
    const LocalVolGrid lv = flat_local_vol(0.2, {90, 100, 110}, {0.1, 0.2});
    std::ostringstream os;
    lv.write_csv(os);
    const std::string s = os.str();
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 7);
    EXPECT_EQ(s.substr(0, s.find('\n')), "K,T,sigma_loc,clipped,floored");
}
