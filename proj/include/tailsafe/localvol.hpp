#pragma once

#include "black_scholes.hpp"
#include "errors.hpp"
#include "market_shell.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <vector>

namespace tailsafe {

struct CallPriceGrid {
    std::vector<double> strikes;
    std::vector<double> maturities;
    Eigen::MatrixXd prices;  // (strike, maturity)
    double rate_r = 0.0;
    double div_q = 0.0;
    double spot_S0 = 0.0;

    std::size_t nK() const { return strikes.size(); }
    std::size_t nT() const { return maturities.size(); }

    void validate() const {
        if (nK() < 3 || nT() < 3) throw InsufficientGridError("price grid needs at least 3 strikes and 3 maturities");
        if (static_cast<std::size_t>(prices.rows()) != nK() || static_cast<std::size_t>(prices.cols()) != nT())
            throw ValidationError("price matrix shape does not match axes");
        for (std::size_t i = 1; i < nK(); ++i)
            if (!(strikes[i] > strikes[i - 1])) throw ValidationError("strikes must be increasing");
        for (std::size_t j = 1; j < nT(); ++j)
            if (!(maturities[j] > maturities[j - 1])) throw ValidationError("maturities must be increasing");
        if ((prices.array() < 0.0).any()) throw ValidationError("call prices must be nonnegative");
    }
};

/// Discounted call prices C(K,T) from a vol function vol(K,T) (annualized implied vol).
template <class VolFn>
CallPriceGrid make_call_grid(VolFn&& vol, std::vector<double> strikes, std::vector<double> maturities, double spot,
                             double rate, double div) {
    CallPriceGrid g;
    g.strikes = std::move(strikes);
    g.maturities = std::move(maturities);
    g.rate_r = rate;
    g.div_q = div;
    g.spot_S0 = spot;
    g.prices.resize(static_cast<Eigen::Index>(g.nK()), static_cast<Eigen::Index>(g.nT()));
    for (std::size_t j = 0; j < g.nT(); ++j) {
        const double T = g.maturities[j];
        const double F = spot * std::exp((rate - div) * T), df = std::exp(-rate * T);
        for (std::size_t i = 0; i < g.nK(); ++i)
            g.prices(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                bs::price(F, g.strikes[i], T, vol(g.strikes[i], T), df, true);
    }
    return g;
}

inline CallPriceGrid make_call_grid(const VolSurface& s, VolSource src, std::vector<double> strikes,
                                    std::vector<double> maturities) {
    return make_call_grid(
        [&](double K, double T) { return s.vol(src, std::log(K / s.forward(T)), T); }, std::move(strikes),
        std::move(maturities), s.spot(), s.rate(), s.div());
}

namespace fd {

/// Derivative at x of the quadratic through (x0,f0),(x1,f1),(x2,f2).
inline double d1_quadratic(double x0, double x1, double x2, double f0, double f1, double f2, double x) {
    const double d01 = (f1 - f0) / (x1 - x0);
    const double d12 = (f2 - f1) / (x2 - x1);
    const double d012 = (d12 - d01) / (x2 - x0);
    return d01 + d012 * (2.0 * x - x0 - x1);
}

/// Second divided difference times two (exact on quadratics).
inline double d2_quadratic(double x0, double x1, double x2, double f0, double f1, double f2) {
    return 2.0 / (x2 - x0) * ((f2 - f1) / (x2 - x1) - (f1 - f0) / (x1 - x0));
}

}  // namespace fd

struct Partials {
    double dT = 0.0, dK = 0.0, dKK = 0.0;
};

/// Central stencils in the interior, one-sided three-point stencils on the boundary.
inline Partials fd_partials(const CallPriceGrid& g, std::size_t i, std::size_t j) {
    if (g.nK() < 3 || g.nT() < 3) throw InsufficientGridError("price grid needs at least 3 strikes and 3 maturities");
    const auto C = [&](std::size_t a, std::size_t b) {
        return g.prices(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    };
    const auto& K = g.strikes;
    const auto& T = g.maturities;
    Partials p;

    if (i > 0 && i + 1 < g.nK()) {
        p.dK = (C(i + 1, j) - C(i - 1, j)) / (K[i + 1] - K[i - 1]);
        p.dKK = fd::d2_quadratic(K[i - 1], K[i], K[i + 1], C(i - 1, j), C(i, j), C(i + 1, j));
    } else {
        const std::size_t a = i == 0 ? 0 : g.nK() - 3;
        p.dK = fd::d1_quadratic(K[a], K[a + 1], K[a + 2], C(a, j), C(a + 1, j), C(a + 2, j), K[i]);
        p.dKK = fd::d2_quadratic(K[a], K[a + 1], K[a + 2], C(a, j), C(a + 1, j), C(a + 2, j));
    }

    // three-point Lagrange stencil: second order on a nonuniform maturity mesh
    const std::size_t b = j == 0 ? 0 : (j + 1 == g.nT() ? g.nT() - 3 : j - 1);
    p.dT = fd::d1_quadratic(T[b], T[b + 1], T[b + 2], C(i, b), C(i, b + 1), C(i, b + 2), T[j]);
    return p;
}

inline constexpr double kDefaultChiFloor = 1e-7;

struct LocalVolGrid {
    std::vector<double> strikes;
    std::vector<double> maturities;
    Eigen::MatrixXd variance;  // sigma_loc^2
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> clip_mask;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> floored_mask;
    double clip_floor_chi = kDefaultChiFloor;
    double c_max = 0.0;

    std::size_t nK() const { return strikes.size(); }
    std::size_t nT() const { return maturities.size(); }
    bool interior(std::size_t i, std::size_t j) const { return i > 0 && j > 0 && i + 1 < nK() && j + 1 < nT(); }
    double vol(std::size_t i, std::size_t j) const {
        return std::sqrt(variance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    std::size_t clipped_count() const { return static_cast<std::size_t>(clip_mask.count()); }
    std::size_t floored_count() const { return static_cast<std::size_t>(floored_mask.count()); }

    /// Tabular dump: K, T, sigma_loc, clipped, floored.
    void write_csv(std::ostream& os) const {
        os << "K,T,sigma_loc,clipped,floored\n";
        for (std::size_t j = 0; j < nT(); ++j)
            for (std::size_t i = 0; i < nK(); ++i) {
                const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
                os << strikes[i] << ',' << maturities[j] << ',' << vol(i, j) << ',' << clip_mask(a, b) << ','
                   << floored_mask(a, b) << '\n';
            }
    }
};

/// Clipped Dupire quotient on every node; the numerator is floored at zero and flagged.
inline LocalVolGrid dupire_local_variance(const CallPriceGrid& g, double chi_floor = kDefaultChiFloor) {
    if (!(chi_floor > 0.0)) throw ParameterError("clip floor must be positive");
    g.validate();
    LocalVolGrid lv;
    lv.strikes = g.strikes;
    lv.maturities = g.maturities;
    lv.clip_floor_chi = chi_floor;
    const auto nK = static_cast<Eigen::Index>(g.nK()), nT = static_cast<Eigen::Index>(g.nT());
    lv.variance.resize(nK, nT);
    lv.clip_mask.setConstant(nK, nT, false);
    lv.floored_mask.setConstant(nK, nT, false);
    for (Eigen::Index j = 0; j < nT; ++j)
        for (Eigen::Index i = 0; i < nK; ++i) {
            const Partials p = fd_partials(g, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
            const double K = g.strikes[static_cast<std::size_t>(i)];
            double num = p.dT + (g.rate_r - g.div_q) * K * p.dK + g.div_q * g.prices(i, j);
            if (num < 0.0) {
                num = 0.0;
                lv.floored_mask(i, j) = true;
            }
            if (p.dKK < chi_floor) lv.clip_mask(i, j) = true;
            const double den = 0.5 * K * K * std::max(p.dKK, chi_floor);
            lv.variance(i, j) = num / den;
        }
    lv.c_max = lv.variance.maxCoeff();
    return lv;
}

namespace detail {
/// Bracketing index and weight on a sorted axis with edge clamping.
inline std::pair<std::size_t, double> bracket(const std::vector<double>& x, double v) {
    if (x.size() == 1 || v <= x.front()) return {0, 0.0};
    if (v >= x.back()) return {x.size() - 2, 1.0};
    const auto it = std::upper_bound(x.begin(), x.end(), v);
    const std::size_t a = static_cast<std::size_t>(it - x.begin()) - 1;
    return {a, (v - x[a]) / (x[a + 1] - x[a])};
}
}  // namespace detail

/// Bilinear interpolation of sigma_loc (vol, not variance); clamps to edge nodes outside the grid.
inline double interp_local_vol(const LocalVolGrid& lv, double S, double t) {
    auto [i, a] = detail::bracket(lv.strikes, S);
    auto [j, b] = detail::bracket(lv.maturities, t);
    const std::size_t i1 = std::min(i + 1, lv.nK() - 1), j1 = std::min(j + 1, lv.nT() - 1);
    return (1 - a) * (1 - b) * lv.vol(i, j) + a * (1 - b) * lv.vol(i1, j) + (1 - a) * b * lv.vol(i, j1) +
           a * b * lv.vol(i1, j1);
}

/// Constant-vol grid, handy for degenerate worlds and tests.
inline LocalVolGrid flat_local_vol(double sigma, std::vector<double> strikes, std::vector<double> maturities) {
    LocalVolGrid lv;
    lv.strikes = std::move(strikes);
    lv.maturities = std::move(maturities);
    const auto nK = static_cast<Eigen::Index>(lv.strikes.size()), nT = static_cast<Eigen::Index>(lv.maturities.size());
    lv.variance.setConstant(nK, nT, sigma * sigma);
    lv.clip_mask.setConstant(nK, nT, false);
    lv.floored_mask.setConstant(nK, nT, false);
    lv.c_max = sigma * sigma;
    return lv;
}

}  // namespace tailsafe
