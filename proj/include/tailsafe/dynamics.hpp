#pragma once

#include "errors.hpp"
#include "localvol.hpp"
#include "rng.hpp"
#include "vix_engine.hpp"

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace tailsafe {

struct CirParams {
    double kappa_mr = 4.0;
    double theta_lr = 0.04;
    double xi_volvol = 0.5;
    double rho_sv = -0.6;
    double v0 = 0.04;

    bool feller() const { return 2.0 * kappa_mr * theta_lr >= xi_volvol * xi_volvol; }

    void validate() const {
        if (!(kappa_mr > 0.0)) throw ParameterError("CIR kappa must be positive");
        if (!(theta_lr > 0.0)) throw ParameterError("CIR theta must be positive");
        if (!(xi_volvol >= 0.0)) throw ParameterError("CIR vol-of-vol must be nonnegative");
        if (!(std::abs(rho_sv) <= 1.0)) throw ParameterError("CIR correlation must lie in [-1,1]");
        if (!(v0 > 0.0)) throw ParameterError("CIR v0 must be positive");
    }
};

struct PathState {
    double S = 0.0;
    double v = 0.0;
    double t = 0.0;
};

/// One log-Euler step with sigma = sigma_fn(S, t).
template <class SigmaFn>
PathState step_log_euler(const PathState& st, SigmaFn&& sigma_fn, double r, double q, double dt, double z) {
    const double s = sigma_fn(st.S, st.t);
    PathState out = st;
    out.S = st.S * std::exp((r - q - 0.5 * s * s) * dt + s * std::sqrt(dt) * z);
    out.t = st.t + dt;
    return out;
}

inline PathState step_log_euler(const PathState& st, const LocalVolGrid& lv, double r, double q, double dt, double z) {
    return step_log_euler(st, [&](double S, double t) { return interp_local_vol(lv, S, t); }, r, q, dt, z);
}

struct CirStep {
    double v = 0.0;
    bool truncated = false;
};

/// Full-truncation Euler.
inline CirStep step_cir(double v, const CirParams& p, double dt, double z) {
    const double vp = std::max(v, 0.0);
    const double nv = v + p.kappa_mr * (p.theta_lr - vp) * dt + p.xi_volvol * std::sqrt(vp) * std::sqrt(dt) * z;
    if (nv < 0.0) return {0.0, true};
    return {nv, false};
}

inline std::pair<double, double> correlate_draws(double z1, double z2, double rho) {
    if (!(std::abs(rho) <= 1.0)) throw ParameterError("correlation must lie in [-1,1]");
    return {z1, rho * z1 + std::sqrt(1.0 - rho * rho) * z2};
}

inline constexpr double kVixTau = 30.0 / 365.0;

struct VixProxy {
    double vix = 0.0;
    double B = 0.0;
    double lipschitz = 0.0;         // 50 B / sqrt(theta); a bound on v >= theta only
    double lipschitz_global = 0.0;  // 50 B / sqrt(min V^2 over v >= 0)
};

inline double cir_b_factor(double kappa, double tau) {
    const double x = kappa * tau;
    if (x < 1e-8) return 1.0 - 0.5 * x;
    return -std::expm1(-x) / x;
}

/// Closed-form 30D variance under CIR mapped to index points.
inline VixProxy vix_proxy(double v, const CirParams& p, double tau = kVixTau, double floor = kVarianceFloor) {
    VixProxy out;
    out.B = cir_b_factor(p.kappa_mr, tau);
    const double v2 = p.theta_lr + (v - p.theta_lr) * out.B;
    out.vix = 100.0 * std::sqrt(std::max(v2, floor));
    out.lipschitz = 50.0 * out.B / std::sqrt(p.theta_lr);
    out.lipschitz_global = 50.0 * out.B / std::sqrt(std::max(p.theta_lr * (1.0 - out.B), floor));
    return out;
}

struct SimConfig {
    int steps_per_year = 252;
    int horizon_days = 60;
    int n_paths = 1;
    int n_seeds = 1;
    std::uint64_t seed = 1;

    double horizon() const { return horizon_days / 365.0; }
    /// Enough steps to keep dt at most 1/steps_per_year over the horizon.
    int steps() const { return static_cast<int>(std::ceil(horizon() * steps_per_year - 1e-9)); }
    double dt() const { return horizon() / steps(); }

    void validate() const {
        if (steps_per_year < 1 || horizon_days < 1 || n_paths < 1 || n_seeds < 1)
            throw ParameterError("simulation counts must be at least 1");
    }
};

inline constexpr std::size_t kMaxPanelEntries = 50'000'000;

/// Panel laid out as [seed][path][step].
struct PathPanel {
    int n_seeds = 0, n_paths = 0, n_steps = 0;
    double dt = 0.0;
    std::vector<double> S, v, vix;
    std::size_t truncations = 0;

    std::size_t index(int s, int p, int n) const {
        return (static_cast<std::size_t>(s) * static_cast<std::size_t>(n_paths) + static_cast<std::size_t>(p)) *
                   static_cast<std::size_t>(n_steps + 1) +
               static_cast<std::size_t>(n);
    }
};

/// Stream channels for the two shocks of a step.
inline constexpr std::uint64_t kChannelSpot = 0, kChannelVar = 1;

inline std::uint64_t replicate_seed(std::uint64_t base, int s) { return derive_seed(base, static_cast<std::uint64_t>(s)); }

/// Simulates one path, writing steps+1 states through `emit(n, state, vix)`.
/// `rng.normal(step, channel)` supplies the shocks.
template <class SigmaFn, class Rng, class Emit>
std::size_t simulate_path(SigmaFn&& sigma_fn, const CirParams& cir, double S0, double r, double q, int steps, double dt,
                          const Rng& rng, Emit&& emit) {
    PathState st{S0, cir.v0, 0.0};
    std::size_t trunc = 0;
    emit(0, st, vix_proxy(st.v, cir).vix);
    for (int n = 0; n < steps; ++n) {
        const auto [zs, zv] = correlate_draws(rng.normal(static_cast<std::uint64_t>(n), kChannelSpot),
                                              rng.normal(static_cast<std::uint64_t>(n), kChannelVar), cir.rho_sv);
        const CirStep cs = step_cir(st.v, cir, dt, zv);
        st = step_log_euler(st, sigma_fn, r, q, dt, zs);
        st.v = cs.v;
        trunc += cs.truncated ? 1 : 0;
        emit(n + 1, st, vix_proxy(st.v, cir).vix);
    }
    return trunc;
}

inline PathPanel simulate_pool(const SimConfig& cfg, const LocalVolGrid& lv, const CirParams& cir, double S0, double r,
                               double q) {
    cfg.validate();
    cir.validate();
    PathPanel panel;
    panel.n_seeds = cfg.n_seeds;
    panel.n_paths = cfg.n_paths;
    panel.n_steps = cfg.steps();
    panel.dt = cfg.dt();
    const std::size_t total = static_cast<std::size_t>(cfg.n_seeds) * static_cast<std::size_t>(cfg.n_paths) *
                              static_cast<std::size_t>(panel.n_steps + 1);
    if (total > kMaxPanelEntries) throw ResourceError("path panel of " + std::to_string(total) + " entries exceeds limit");
    panel.S.resize(total);
    panel.v.resize(total);
    panel.vix.resize(total);
    const auto sigma = [&](double S, double t) { return interp_local_vol(lv, S, t); };
    for (int s = 0; s < cfg.n_seeds; ++s) {
        const CounterRng rng(replicate_seed(cfg.seed, s));
        for (int p = 0; p < cfg.n_paths; ++p) {
            panel.truncations += simulate_path(sigma, cir, S0, r, q, panel.n_steps, panel.dt,
                                               RngStream{rng, static_cast<std::uint64_t>(p)},
                                               [&](int n, const PathState& st, double vx) {
                                                   const std::size_t k = panel.index(s, p, n);
                                                   panel.S[k] = st.S;
                                                   panel.v[k] = st.v;
                                                   panel.vix[k] = vx;
                                               });
        }
    }
    return panel;
}

}  // namespace tailsafe
