#pragma once

#include "black_scholes.hpp"
#include "errors.hpp"
#include "market_shell.hpp"
#include "vix_engine.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <vector>

namespace tailsafe {

enum class KappaUnits { variance, vix_points };

struct KappaOptions {
    double bump_eps = 1e-3;
    double beta_rem = 1.0, beta_1 = 1.0, beta_2 = 1.0;
    KappaUnits units = KappaUnits::variance;
};

struct KappaCurve {
    std::vector<double> maturities;
    std::vector<double> kappa_raw, kappa_smoothed, kappa_eff;
    double mu_shrink = 1.0;
    double T0_ref = 60.0 / 365.0;
    KappaOptions options;

    void write_csv(std::ostream& os) const {
        os << "T_rem,raw,smoothed,eff\n";
        for (std::size_t i = 0; i < maturities.size(); ++i)
            os << maturities[i] << ',' << kappa_raw[i] << ',' << kappa_smoothed[i] << ',' << kappa_eff[i] << '\n';
    }
};

/// Index level (variance or points) of a shared grid pair priced with a parallel vol shift.
inline double shifted_index(const VolSurface& s, VolSource src, const VixSetup& setup, const SharedGrids& base,
                            double shift1, double shift2, KappaUnits units) {
    SharedGrids g = base;
    g.g1 = make_option_grid([&](double k) { return s.vol(src, k, base.g1.maturity_T) + shift1; }, setup.strikes,
                            base.g1.forward_F, base.g1.rate_r, base.g1.maturity_T, setup.half_spread);
    g.g2 = make_option_grid([&](double k) { return s.vol(src, k, base.g2.maturity_T) + shift2; }, setup.strikes,
                            base.g2.forward_F, base.g2.rate_r, base.g2.maturity_T, setup.half_spread);
    const VixResult v = vix_on(g, setup);
    return units == KappaUnits::variance ? v.sigma2_30 : v.vix_30;
}

/// Central bump-and-invert: dC_ATM(T_rem) / d(index) under uniform vol bumps on {T_rem, T1, T2}.
inline double bump_and_invert(const VolSurface& s, VolSource src, const VixSetup& setup, const SharedGrids& base,
                              double T_rem, const KappaOptions& opt = {}) {
    if (!(opt.bump_eps > 0.0)) throw ParameterError("bump size must be positive");
    if (!(T_rem > 0.0)) throw DomainError("remaining maturity must be positive");
    const double e = opt.bump_eps;
    const double F = s.forward(T_rem), df = std::exp(-s.rate() * T_rem);
    const double sig = s.vol(src, 0.0, T_rem);
    const double dC = bs::price(F, F, T_rem, sig + opt.beta_rem * e, df, true) -
                      bs::price(F, F, T_rem, sig - opt.beta_rem * e, df, true);
    const double dnu = shifted_index(s, src, setup, base, opt.beta_1 * e, opt.beta_2 * e, opt.units) -
                       shifted_index(s, src, setup, base, -opt.beta_1 * e, -opt.beta_2 * e, opt.units);
    if (std::abs(dnu) < 1e-14) throw DegenerateError("index bump response is degenerate");
    return dC / dnu;
}

inline double bump_and_invert(const VolSurface& s, VolSource src, const VixSetup& setup, double T_rem,
                              const KappaOptions& opt = {}) {
    return bump_and_invert(s, src, setup, price_vix_grids(s, src, setup), T_rem, opt);
}

/// Discrete convolution with a centered odd-length kernel; weights falling off the ends are renormalized away.
inline std::vector<double> smooth_curve(const std::vector<double>& raw, const std::vector<double>& kernel) {
    if (kernel.empty() || kernel.size() % 2 == 0) throw ParameterError("kernel must have odd length");
    double total = 0.0;
    for (double w : kernel) {
        if (!(w >= 0.0)) throw ParameterError("kernel weights must be nonnegative");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ParameterError("kernel weights must sum to one");
    const long n = static_cast<long>(raw.size()), half = static_cast<long>(kernel.size() / 2);
    std::vector<double> out(raw.size());
    for (long i = 0; i < n; ++i) {
        double acc = 0.0, mass = 0.0;
        for (long d = -half; d <= half; ++d) {
            const long j = i + d;
            if (j < 0 || j >= n) continue;
            const double w = kernel[static_cast<std::size_t>(d + half)];
            acc += w * raw[static_cast<std::size_t>(j)];
            mass += w;
        }
        out[static_cast<std::size_t>(i)] = mass > 0.0 ? acc / mass : raw[static_cast<std::size_t>(i)];
    }
    return out;
}

inline double shrink_expiry(double smoothed, double T_rem, double T0, double mu) {
    if (!(mu >= 0.0)) throw ParameterError("shrink strength must be nonnegative");
    if (!(T0 > 0.0)) throw ParameterError("shrink horizon must be positive");
    const double w = std::clamp(T_rem / T0, 0.0, 1.0);
    return smoothed / (1.0 + mu * (1.0 - w));
}

struct KappaBuild {
    std::vector<double> kernel = {0.25, 0.5, 0.25};
    double mu = 1.0;
    double T0 = 60.0 / 365.0;
    KappaOptions options;
};

inline KappaCurve build_kappa_curve(const VolSurface& s, VolSource src, const VixSetup& setup,
                                    std::vector<double> maturities, const KappaBuild& b = {}) {
    KappaCurve c;
    c.maturities = std::move(maturities);
    c.mu_shrink = b.mu;
    c.T0_ref = b.T0;
    c.options = b.options;
    const SharedGrids base = price_vix_grids(s, src, setup);
    for (double T : c.maturities) c.kappa_raw.push_back(bump_and_invert(s, src, setup, base, T, b.options));
    c.kappa_smoothed = smooth_curve(c.kappa_raw, b.kernel);
    for (std::size_t i = 0; i < c.maturities.size(); ++i)
        c.kappa_eff.push_back(shrink_expiry(c.kappa_smoothed[i], c.maturities[i], b.T0, b.mu));
    return c;
}

/// Linear interpolation of kappa_eff; zero at or below zero time to expiry, flat beyond the last node.
inline double interp_kappa(const KappaCurve& c, double T_rem) {
    if (c.maturities.empty() || T_rem <= 0.0) return 0.0;
    const auto& x = c.maturities;
    if (T_rem <= x.front()) return c.kappa_eff.front() * T_rem / x.front();
    if (T_rem >= x.back()) return c.kappa_eff.back();
    const auto it = std::upper_bound(x.begin(), x.end(), T_rem);
    const std::size_t j = static_cast<std::size_t>(it - x.begin());
    const double a = (T_rem - x[j - 1]) / (x[j] - x[j - 1]);
    return (1 - a) * c.kappa_eff[j - 1] + a * c.kappa_eff[j];
}

}  // namespace tailsafe
