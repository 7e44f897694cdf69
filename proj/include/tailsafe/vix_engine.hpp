#pragma once

#include "black_scholes.hpp"
#include "errors.hpp"
#include "market_shell.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace tailsafe {

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kMinutesPerYear = 365.0 * 1440.0;
inline constexpr long kMinutes30D = 30L * 1440L;

struct OptionQuote {
    double strike_K = 0.0;
    double bid = 0.0;
    double mid_price = 0.0;
    bool is_call = false;
};

/// One put and one call per strike; k0_index points at the largest strike not above the forward.
struct OptionGrid {
    double maturity_T = 0.0;
    double forward_F = 0.0;
    double rate_r = 0.0;
    std::vector<double> strikes;
    std::vector<OptionQuote> puts;
    std::vector<OptionQuote> calls;
    std::size_t k0_index = 0;

    double K0() const { return strikes.at(k0_index); }

    void validate() const {
        if (strikes.empty()) throw StructuralError("option grid has no strikes");
        if (puts.size() != strikes.size() || calls.size() != strikes.size())
            throw StructuralError("one put and one call per strike required");
        for (std::size_t i = 0; i < strikes.size(); ++i) {
            if (!(strikes[i] > 0.0)) throw StructuralError("strikes must be positive");
            if (i > 0 && !(strikes[i] > strikes[i - 1])) throw StructuralError("strikes must be strictly increasing");
        }
        if (k0_index >= strikes.size() || strikes[k0_index] > forward_F ||
            (k0_index + 1 < strikes.size() && strikes[k0_index + 1] <= forward_F))
            throw StructuralError("K0 must be the largest strike not above the forward");
    }
};

inline std::size_t locate_k0(const std::vector<double>& strikes, double forward) {
    const auto it = std::upper_bound(strikes.begin(), strikes.end(), forward);
    if (it == strikes.begin()) throw StructuralError("no strike at or below the forward");
    return static_cast<std::size_t>(it - strikes.begin()) - 1;
}

/// Prices a grid from a smile `vol(k)` with k = ln(K/F); bid = max(mid - half_spread, 0).
template <class VolFn>
OptionGrid make_option_grid(VolFn&& vol, const std::vector<double>& strikes, double forward, double rate,
                            double maturity, double half_spread = 0.0) {
    OptionGrid g;
    g.maturity_T = maturity;
    g.forward_F = forward;
    g.rate_r = rate;
    g.strikes = strikes;
    const double df = std::exp(-rate * maturity);
    for (double K : strikes) {
        const double s = vol(std::log(K / forward));
        const double p = bs::price(forward, K, maturity, s, df, false);
        const double c = bs::price(forward, K, maturity, s, df, true);
        g.puts.push_back({K, std::max(p - half_spread, 0.0), p, false});
        g.calls.push_back({K, std::max(c - half_spread, 0.0), c, true});
    }
    g.k0_index = locate_k0(g.strikes, forward);
    g.validate();
    return g;
}

inline OptionGrid make_option_grid(const VolSurface& s, VolSource src, const std::vector<double>& strikes,
                                   double maturity, double half_spread = 0.0) {
    return make_option_grid([&](double k) { return s.vol(src, k, maturity); }, strikes, s.forward(maturity),
                            s.rate(), maturity, half_spread);
}

/// Walks outward from K0 on each wing (puts below, calls above); stops at the first pair of
/// consecutive zero bids, dropping that pair and everything farther out. Returns sorted indices.
inline std::vector<std::size_t> prune_wings(const OptionGrid& g) {
    g.validate();
    const std::size_t n = g.strikes.size(), k0 = g.k0_index;
    std::vector<std::size_t> lower, upper;
    for (std::size_t i = k0; i-- > 0;) {
        if (g.puts[i].bid == 0.0 && i > 0 && g.puts[i - 1].bid == 0.0) break;
        lower.push_back(i);
    }
    for (std::size_t i = k0 + 1; i < n; ++i) {
        if (g.calls[i].bid == 0.0 && i + 1 < n && g.calls[i + 1].bid == 0.0) break;
        upper.push_back(i);
    }
    std::vector<std::size_t> out(lower.rbegin(), lower.rend());
    out.push_back(k0);
    out.insert(out.end(), upper.begin(), upper.end());
    return out;
}

inline std::vector<double> half_interval_weights(const std::vector<double>& K) {
    const std::size_t n = K.size();
    if (n < 2) throw InsufficientGridError("half-interval weights need at least two strikes");
    std::vector<double> w(n);
    w[0] = K[1] - K[0];
    w[n - 1] = K[n - 1] - K[n - 2];
    for (std::size_t i = 1; i + 1 < n; ++i) w[i] = 0.5 * (K[i + 1] - K[i - 1]);
    return w;
}

/// OTM aggregator: put below K0, call above, the average of both at K0.
inline double otm_price(const OptionGrid& g, std::size_t i) {
    if (i < g.k0_index) return g.puts[i].mid_price;
    if (i > g.k0_index) return g.calls[i].mid_price;
    return 0.5 * (g.puts[i].mid_price + g.calls[i].mid_price);
}

struct VarianceAudit {
    double maturity_T = 0.0;
    double forward_F = 0.0;
    double K0 = 0.0;
    std::vector<std::size_t> retained;
    std::vector<double> strikes;
    std::vector<double> weights;
    std::vector<double> q_prices;
    std::vector<double> contributions;  // (2/T) dK/K^2 e^{rT} Q
    double correction = 0.0;            // (1/T)(F/K0 - 1)^2
    double variance = 0.0;
};

inline VarianceAudit single_maturity_variance(const OptionGrid& g, const std::vector<std::size_t>& retained) {
    if (retained.empty()) throw InsufficientGridError("no retained strikes");
    VarianceAudit a;
    a.maturity_T = g.maturity_T;
    a.forward_F = g.forward_F;
    a.K0 = g.K0();
    a.retained = retained;
    for (std::size_t i : retained) a.strikes.push_back(g.strikes.at(i));
    a.weights = half_interval_weights(a.strikes);
    const double T = g.maturity_T, growth = std::exp(g.rate_r * T);
    double sum = 0.0;
    for (std::size_t j = 0; j < retained.size(); ++j) {
        const double Q = otm_price(g, retained[j]);
        const double K = a.strikes[j];
        a.q_prices.push_back(Q);
        const double c = (2.0 / T) * a.weights[j] / (K * K) * growth * Q;
        a.contributions.push_back(c);
        sum += c;
    }
    const double r = g.forward_F / a.K0 - 1.0;
    a.correction = r * r / T;
    a.variance = sum - a.correction;
    return a;
}

inline VarianceAudit single_maturity_variance(const OptionGrid& g) { return single_maturity_variance(g, prune_wings(g)); }

class BracketError : public ProtocolError {
public:
    using ProtocolError::ProtocolError;
};

struct VixResult {
    VarianceAudit near, next;
    double lambda1 = 0.0, lambda2 = 0.0;
    double w_star = 0.0;
    double sigma2_30 = 0.0;
    double vix_30 = 0.0;
    bool floored = false;
};

inline void check_minutes(const OptionGrid& g, long minutes) {
    const double T = static_cast<double>(minutes) / kMinutesPerYear;
    if (std::abs(g.maturity_T - T) > 1e-12 * std::max(1.0, T))
        throw ProtocolError("grid maturity does not match its minute count");
}

inline double vix_from_sigma2(double sigma2, double floor = kVarianceFloor) {
    return 100.0 * std::sqrt(std::max(sigma2, floor));
}

/// 30-day interpolation of two single-maturity estimates in year-fraction total variance.
inline VixResult vix_30d(const VarianceAudit& a1, const VarianceAudit& a2, long m1, long m2,
                         double floor = kVarianceFloor) {
    if (!(m1 < kMinutes30D && kMinutes30D <= m2))
        throw BracketError("expiries must bracket 30 days: m1 < 43200 <= m2");
    VixResult r;
    r.near = a1;
    r.next = a2;
    const double span = static_cast<double>(m2 - m1);
    r.lambda1 = static_cast<double>(m2 - kMinutes30D) / span;
    r.lambda2 = static_cast<double>(kMinutes30D - m1) / span;
    r.w_star = r.lambda1 * a1.maturity_T * a1.variance + r.lambda2 * a2.maturity_T * a2.variance;
    r.sigma2_30 = r.w_star * 365.0 / 30.0;
    r.floored = r.sigma2_30 < floor;
    r.vix_30 = vix_from_sigma2(r.sigma2_30, floor);
    return r;
}

inline VixResult vix_30d(const OptionGrid& g1, const OptionGrid& g2, long m1, long m2, double floor = kVarianceFloor) {
    if (!(m1 < kMinutes30D && kMinutes30D <= m2))
        throw BracketError("expiries must bracket 30 days: m1 < 43200 <= m2");
    check_minutes(g1, m1);
    check_minutes(g2, m2);
    return vix_30d(single_maturity_variance(g1), single_maturity_variance(g2), m1, m2, floor);
}

inline double minutes_to_years(long minutes) { return static_cast<double>(minutes) / kMinutesPerYear; }

/// Full index computation from a surface on a strike list; `retained` overrides pruning when given.
struct VixSetup {
    std::vector<double> strikes;
    long minutes1 = 14L * 1440L;
    long minutes2 = 30L * 1440L;
    double half_spread = 0.0;
};

struct SharedGrids {
    OptionGrid g1, g2;
    std::vector<std::size_t> r1, r2;
};

inline SharedGrids price_vix_grids(const VolSurface& s, VolSource src, const VixSetup& setup) {
    SharedGrids out;
    out.g1 = make_option_grid(s, src, setup.strikes, minutes_to_years(setup.minutes1), setup.half_spread);
    out.g2 = make_option_grid(s, src, setup.strikes, minutes_to_years(setup.minutes2), setup.half_spread);
    out.r1 = prune_wings(out.g1);
    out.r2 = prune_wings(out.g2);
    return out;
}

inline VixResult vix_on(const SharedGrids& g, const VixSetup& setup) {
    return vix_30d(single_maturity_variance(g.g1, g.r1), single_maturity_variance(g.g2, g.r2), setup.minutes1,
                   setup.minutes2);
}

inline VixResult compute_vix(const VolSurface& s, VolSource src, const VixSetup& setup) {
    return vix_on(price_vix_grids(s, src, setup), setup);
}

struct CoherenceReport {
    double vix_a = 0.0, vix_b = 0.0;
    double residual = 0.0;
    double eps_shape = 0.0;  // max |sigma_a - sigma_b| on retained strikes
    double c_coh = 0.0;      // uniform constant using the variance floor
    double c_coh_sharp = 0.0;
    double c_quad = 0.0;
    double max_dK = 0.0;
    double bound = 0.0;
    bool passed = false;
};

inline void require_same_layout(const OptionGrid& a, const OptionGrid& b) {
    if (a.strikes != b.strikes || a.maturity_T != b.maturity_T || a.forward_F != b.forward_F ||
        a.rate_r != b.rate_r || a.k0_index != b.k0_index)
        throw ProtocolError("coherence grids differ in strikes, maturity or forward");
}

/// Residual between two index computations on a shared retained set (taken from grid A), with the
/// first-order bound C_coh * eps_shape + C_quad * maxdK^2.
inline CoherenceReport coherence_residual(const SharedGrids& a, const SharedGrids& b, const VixSetup& setup,
                                          double spot, double div, double eps_shape, double c_quad) {
    if (a.g1.strikes.size() < 2) throw InsufficientGridError("coherence needs at least two strikes");
    require_same_layout(a.g1, b.g1);
    require_same_layout(a.g2, b.g2);
    SharedGrids bb = b;
    bb.r1 = a.r1;
    bb.r2 = a.r2;
    const VixResult va = vix_on(a, setup), vb = vix_on(bb, setup);
    CoherenceReport rep;
    rep.vix_a = va.vix_30;
    rep.vix_b = vb.vix_30;
    rep.residual = std::abs(va.vix_30 - vb.vix_30);
    rep.eps_shape = eps_shape;
    rep.c_quad = c_quad;

    double dvar = 0.0;
    const VarianceAudit* audits[2] = {&va.near, &va.next};
    const double lambdas[2] = {va.lambda1, va.lambda2};
    const double rates[2] = {a.g1.rate_r, a.g2.rate_r};
    for (int i = 0; i < 2; ++i) {
        const VarianceAudit& au = *audits[i];
        const double T = au.maturity_T;
        // uniform vega envelope: sup_K vega = S0 e^{-qT} sqrt(T) / sqrt(2 pi)
        const double vega_bar = spot * std::exp(-div * T) * std::sqrt(T) / std::sqrt(2.0 * std::numbers::pi);
        double s = 0.0;
        for (std::size_t j = 0; j < au.strikes.size(); ++j)
            s += au.weights[j] * std::exp(rates[i] * T) / (au.strikes[j] * au.strikes[j]);
        dvar += lambdas[i] * 2.0 * vega_bar * s;
        for (std::size_t j = 1; j < au.strikes.size(); ++j)
            rep.max_dK = std::max(rep.max_dK, au.strikes[j] - au.strikes[j - 1]);
    }
    const double scale = 365.0 / 30.0;
    rep.c_coh = 50.0 / std::sqrt(kVarianceFloor) * scale * dvar;
    rep.c_coh_sharp = 50.0 / std::sqrt(std::max(std::min(va.sigma2_30, vb.sigma2_30), kVarianceFloor)) * scale * dvar;
    rep.bound = rep.c_coh * eps_shape + c_quad * rep.max_dK * rep.max_dK;
    rep.passed = rep.residual <= rep.bound;
    return rep;
}

/// Max |sigma_a - sigma_b| over the retained strikes of both expiries.
inline double shape_gap(const VolSurface& sa, VolSource src_a, const VolSurface& sb, VolSource src_b,
                        const SharedGrids& g) {
    double eps = 0.0;
    for (const auto* pr : {&g.g1, &g.g2}) {
        const auto& idx = pr == &g.g1 ? g.r1 : g.r2;
        for (std::size_t i : idx) {
            const double k = std::log(pr->strikes[i] / pr->forward_F);
            eps = std::max(eps, std::abs(sa.vol(src_a, k, pr->maturity_T) - sb.vol(src_b, k, pr->maturity_T)));
        }
    }
    return eps;
}

/// Prices both sources on the same strikes; pruning is decided on source A and imposed on B.
inline CoherenceReport coherence_residual(const VolSurface& sa, VolSource src_a, const VolSurface& sb,
                                          VolSource src_b, const VixSetup& setup, double c_quad) {
    const SharedGrids ga = price_vix_grids(sa, src_a, setup);
    const SharedGrids gb = price_vix_grids(sb, src_b, setup);
    const double eps = shape_gap(sa, src_a, sb, src_b, ga);
    return coherence_residual(ga, gb, setup, sa.spot(), sa.div(), eps, c_quad);
}

}  // namespace tailsafe
