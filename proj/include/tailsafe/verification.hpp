#pragma once

#include "controller.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "localvol.hpp"
#include "market_shell.hpp"
#include "rng.hpp"
#include "vix_engine.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace tailsafe {

/// Least-squares slope of y on x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ValidationError("slope fit needs matching vectors of length >= 2");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double den = n * sxx - sx * sx;
    if (std::abs(den) < 1e-300) throw DegenerateError("slope fit on identical abscissae");
    return (n * sxy - sx * sy) / den;
}

struct ConvergenceStudy {
    std::string name;
    std::vector<double> refinement_levels;
    std::vector<double> mesh_sizes;
    std::vector<double> errors;
    double fitted_slope = 0.0;
    double target_order = 0.0;
    double lo = 0.0, hi = 0.0;
    bool exact = false;
    bool passed = false;

    void write_csv(std::ostream& os) const {
        os << "level,mesh,error\n";
        for (std::size_t i = 0; i < errors.size(); ++i)
            os << refinement_levels[i] << ',' << mesh_sizes[i] << ',' << errors[i] << '\n';
        os << "# slope," << fitted_slope << ",band,[" << lo << ';' << hi << "],passed," << passed << '\n';
    }
};

inline std::vector<double> log_uniform_strikes(double spot, double lo, double hi, std::size_t n) {
    if (n < 2) throw InsufficientGridError("need at least two strikes");
    std::vector<double> K(n);
    const double a = std::log(lo), b = std::log(hi);
    for (std::size_t i = 0; i < n; ++i) K[i] = spot * std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
    return K;
}

/// Inserts f-1 points per interval, uniformly in the given coordinate map.
template <class Fwd, class Inv>
std::vector<double> refine_axis(const std::vector<double>& x, int f, Fwd&& fwd, Inv&& inv) {
    std::vector<double> out{x.front()};
    for (std::size_t i = 0; i + 1 < x.size(); ++i) {
        const double a = fwd(x[i]), b = fwd(x[i + 1]);
        for (int m = 1; m <= f; ++m) out.push_back(m == f ? x[i + 1] : inv(a + (b - a) * m / f));
    }
    return out;
}

inline std::vector<double> refine_linear(const std::vector<double>& x, int f) {
    return refine_axis(x, f, [](double v) { return v; }, [](double v) { return v; });
}

inline std::vector<double> refine_log(const std::vector<double>& x, int f) {
    return refine_axis(x, f, [](double v) { return std::log(v); }, [](double v) { return std::exp(v); });
}

inline constexpr std::size_t kMinQuadStrikes = 9;

/// Single-maturity variance on refined strike grids against a x16 reference on the same corridor;
/// the slope is fitted against log(refinement factor), so second order shows up as -2.
template <class VolFn>
ConvergenceStudy quadrature_convergence(VolFn&& vol, double spot, double rate, double div, double T,
                                        const std::vector<double>& base_strikes, std::vector<int> factors = {1, 2, 4},
                                        int ref_factor = 16) {
    if (base_strikes.size() < kMinQuadStrikes)
        throw InsufficientGridError("quadrature study needs at least " + std::to_string(kMinQuadStrikes) + " strikes");
    std::sort(factors.begin(), factors.end());
    factors.erase(std::unique(factors.begin(), factors.end()), factors.end());
    if (factors.size() < 3) throw ValidationError("convergence study needs three distinct refinement levels");
    const double F = spot * std::exp((rate - div) * T);
    const auto variance = [&](int f) {
        const auto K = refine_log(base_strikes, f);
        const OptionGrid g = make_option_grid(vol, K, F, rate, T);
        return std::pair{single_maturity_variance(g).variance, g};
    };
    const double ref = variance(ref_factor).first;
    ConvergenceStudy st;
    st.name = "quadrature";
    st.target_order = -2.0;
    st.lo = -2.3;
    st.hi = -1.7;
    std::vector<double> lx, ly;
    for (int f : factors) {
        auto [v, g] = variance(f);
        double mdk = 0.0;
        for (std::size_t i = 1; i < g.strikes.size(); ++i) mdk = std::max(mdk, g.strikes[i] - g.strikes[i - 1]);
        st.refinement_levels.push_back(f);
        st.mesh_sizes.push_back(mdk);
        st.errors.push_back(std::abs(v - ref));
        lx.push_back(std::log(static_cast<double>(f)));
        ly.push_back(std::log(std::max(std::abs(v - ref), 1e-300)));
    }
    st.fitted_slope = fit_slope(lx, ly);
    st.passed = st.fitted_slope >= st.lo && st.fitted_slope <= st.hi;
    return st;
}

/// RMS terminal error of log-Euler at dt, dt/2, dt/4 against dt/16 driven by common increments.
template <class SigmaFn>
ConvergenceStudy strong_order_study(SigmaFn&& sigma, double S0, double r, double q, double T, int base_steps, int n_paths,
                                    std::uint64_t seed, std::vector<int> factors = {1, 2, 4}) {
    std::sort(factors.begin(), factors.end());
    const int ref_factor = factors.back() * 4;
    const int n_fine = base_steps * ref_factor;
    const double dt_f = T / n_fine;
    const CounterRng rng(seed);
    std::vector<double> sq(factors.size(), 0.0);
    std::vector<double> dW(static_cast<std::size_t>(n_fine));
    for (int p = 0; p < n_paths; ++p) {
        for (int n = 0; n < n_fine; ++n)
            dW[static_cast<std::size_t>(n)] = std::sqrt(dt_f) * rng.normal(static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(n), 0);
        const auto run = [&](int f) {
            const int m = ref_factor / f;  // fine increments per coarse step
            const int steps = n_fine / m;
            const double dt = T / steps;
            PathState st{S0, 0.0, 0.0};
            for (int k = 0; k < steps; ++k) {
                double w = 0.0;
                for (int j = 0; j < m; ++j) w += dW[static_cast<std::size_t>(k * m + j)];
                st = step_log_euler(st, sigma, r, q, dt, w / std::sqrt(dt));
            }
            return st.S;
        };
        const double ref = run(ref_factor);
        for (std::size_t i = 0; i < factors.size(); ++i) {
            const double d = run(factors[i]) - ref;
            sq[i] += d * d;
        }
    }
    ConvergenceStudy st;
    st.name = "strong_order";
    st.target_order = 0.5;
    st.lo = 0.4;
    st.hi = 0.75;
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < factors.size(); ++i) {
        const double dt = T / (base_steps * factors[i]);
        const double e = std::sqrt(sq[i] / n_paths);
        st.refinement_levels.push_back(factors[i]);
        st.mesh_sizes.push_back(dt);
        st.errors.push_back(e);
        lx.push_back(std::log(dt));
        ly.push_back(std::log(std::max(e, 1e-300)));
    }
    st.exact = *std::max_element(st.errors.begin(), st.errors.end()) < 1e-10 * S0;
    st.fitted_slope = st.exact ? 0.0 : fit_slope(lx, ly);
    st.passed = st.exact || (st.fitted_slope >= st.lo && st.fitted_slope <= st.hi);
    return st;
}

struct DupireStudy {
    ConvergenceStudy order;            // variance errors vs refinement
    std::vector<double> max_vol_error;  // per level, interior non-clipped coarse nodes
    std::vector<std::size_t> clipped;
    std::vector<std::size_t> floored;
    double vol_tol = 1e-2;
    double order_min = 1.7;
    bool level_ok = false;
    bool passed = false;
};

/// Flat-vol Dupire recovery on a strike x maturity tensor refined by each factor; errors are read
/// at the coarse nodes that are interior and unclipped.
inline DupireStudy dupire_flat_study(double sigma, double spot, double rate, double div, const std::vector<double>& strikes,
                                     const std::vector<double>& maturities, std::vector<int> factors = {1, 2, 4},
                                     double chi = kDefaultChiFloor) {
    DupireStudy ds;
    ds.order.name = "dupire_flat";
    ds.order.target_order = 2.0;
    ds.order.lo = ds.order_min;
    ds.order.hi = 1e9;
    std::vector<double> lx, ly;
    const auto flat = [sigma](double, double) { return sigma; };
    for (int f : factors) {
        const auto K = refine_log(strikes, f);
        const auto T = refine_linear(maturities, f);
        const LocalVolGrid lv = dupire_local_variance(make_call_grid(flat, K, T, spot, rate, div), chi);
        double evar = 0.0, evol = 0.0;
        for (std::size_t i = 1; i + 1 < strikes.size(); ++i)
            for (std::size_t j = 1; j + 1 < maturities.size(); ++j) {
                const auto a = static_cast<Eigen::Index>(i * static_cast<std::size_t>(f));
                const auto b = static_cast<Eigen::Index>(j * static_cast<std::size_t>(f));
                if (lv.clip_mask(a, b)) continue;
                evar = std::max(evar, std::abs(lv.variance(a, b) - sigma * sigma));
                evol = std::max(evol, std::abs(std::sqrt(lv.variance(a, b)) - sigma));
            }
        ds.order.refinement_levels.push_back(f);
        double h = 0.0;
        for (std::size_t i = 1; i < K.size(); ++i) h = std::max(h, K[i] - K[i - 1]);
        ds.order.mesh_sizes.push_back(h);
        ds.order.errors.push_back(evar);
        ds.max_vol_error.push_back(evol);
        ds.clipped.push_back(lv.clipped_count());
        ds.floored.push_back(lv.floored_count());
        lx.push_back(std::log(static_cast<double>(f)));
        ly.push_back(std::log(std::max(evar, 1e-300)));
    }
    ds.order.fitted_slope = -fit_slope(lx, ly);
    ds.order.passed = ds.order.fitted_slope >= ds.order_min;
    ds.level_ok = !ds.max_vol_error.empty() && ds.max_vol_error.front() <= ds.vol_tol;
    ds.passed = ds.level_ok && ds.order.passed;
    return ds;
}

struct ConstantsTable {
    // envelopes
    double M_TTT = 0, M_KKK = 0, M_KKKK = 0, M_KK = 0, M_TT = 0, M_N = 0;
    // floors
    double chi = 0, D_floor = 0, w_floor = kVarianceFloor;
    // mesh
    double h = 0, tau = 0, rho_K = 0, rho_T = 0;
    double c_T = 0, c_1 = 0, c_2 = 0;
    // derived
    double C_NT = 0, C_NK = 0, C_DK = 0;
    double C_T = 0, C_K = 0, C_clip = 0, C_max = 0;
    double L_VIX = 0;
    std::map<double, double> C_quad;  // per maturity

    void write_csv(std::ostream& os) const {
        os << "name,value\n";
        const std::pair<const char*, double> rows[] = {
            {"M_TTT", M_TTT}, {"M_KKK", M_KKK}, {"M_KKKK", M_KKKK}, {"M_KK", M_KK}, {"M_TT", M_TT}, {"M_N", M_N},
            {"chi", chi},     {"D_floor", D_floor}, {"w_floor", w_floor}, {"h", h}, {"tau", tau},
            {"rho_K", rho_K}, {"rho_T", rho_T}, {"C_N_T", C_NT}, {"C_N_K", C_NK}, {"C_D_K", C_DK},
            {"C_T", C_T},     {"C_K", C_K}, {"C_clip", C_clip}, {"C_max", C_max}, {"L_VIX", L_VIX}};
        for (const auto& [n, v] : rows) os << n << ',' << v << '\n';
        for (const auto& [T, c] : C_quad) os << "C_quad(T=" << T << ")," << c << '\n';
    }
};

namespace detail {

/// Derivative along one axis of every row/column using the grid's three-point stencils.
inline Eigen::MatrixXd diff_axis(const Eigen::MatrixXd& M, const std::vector<double>& x, int axis) {
    Eigen::MatrixXd out(M.rows(), M.cols());
    const auto n = static_cast<std::size_t>(axis == 0 ? M.rows() : M.cols());
    const auto other = axis == 0 ? M.cols() : M.rows();
    for (Eigen::Index o = 0; o < other; ++o)
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = i == 0 ? 0 : (i + 1 == n ? n - 3 : i - 1);
            const auto at = [&](std::size_t k) {
                return axis == 0 ? M(static_cast<Eigen::Index>(k), o) : M(o, static_cast<Eigen::Index>(k));
            };
            const double d = fd::d1_quadratic(x[a], x[a + 1], x[a + 2], at(a), at(a + 1), at(a + 2), x[i]);
            if (axis == 0)
                out(static_cast<Eigen::Index>(i), o) = d;
            else
                out(o, static_cast<Eigen::Index>(i)) = d;
        }
    return out;
}

inline double sup_abs(const Eigen::MatrixXd& M) { return M.cwiseAbs().maxCoeff(); }

inline double pct_abs(const Eigen::MatrixXd& M, double p) {
    std::vector<double> v(static_cast<std::size_t>(M.size()));
    for (Eigen::Index i = 0; i < M.size(); ++i) v[static_cast<std::size_t>(i)] = std::abs(M.data()[i]);
    std::sort(v.begin(), v.end());
    const auto k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) - 1;
    return v[std::min(k, v.size() - 1)];
}

inline std::pair<double, double> mesh_stats(const std::vector<double>& x) {
    double hmax = 0.0, hmin = 1e300;
    for (std::size_t i = 1; i < x.size(); ++i) {
        hmax = std::max(hmax, x[i] - x[i - 1]);
        hmin = std::min(hmin, x[i] - x[i - 1]);
    }
    return {hmax, hmax / hmin};
}

}  // namespace detail

/// Derivative envelopes by repeated three-point differencing; third/fourth-order envelopes use the
/// 99th percentile of |.| so a single noisy node cannot dominate.
inline ConstantsTable measure_envelopes(const CallPriceGrid& g, double chi = kDefaultChiFloor) {
    if (g.nK() < 5 || g.nT() < 4) throw InsufficientGridError("envelope cascade needs at least 5 strikes and 4 maturities");
    g.validate();
    ConstantsTable c;
    const auto& K = g.strikes;
    const auto& T = g.maturities;
    const Eigen::MatrixXd& C = g.prices;
    const Eigen::MatrixXd CK = detail::diff_axis(C, K, 0);
    const Eigen::MatrixXd CKK = detail::diff_axis(CK, K, 0);
    const Eigen::MatrixXd CKKK = detail::diff_axis(CKK, K, 0);
    const Eigen::MatrixXd CKKKK = detail::diff_axis(CKKK, K, 0);
    const Eigen::MatrixXd CT = detail::diff_axis(C, T, 1);
    const Eigen::MatrixXd CTT = detail::diff_axis(CT, T, 1);
    const Eigen::MatrixXd CTTT = detail::diff_axis(CTT, T, 1);
    c.M_KK = detail::sup_abs(CKK);
    c.M_TT = detail::sup_abs(CTT);
    c.M_KKK = detail::pct_abs(CKKK, 0.99);
    c.M_KKKK = detail::pct_abs(CKKKK, 0.99);
    c.M_TTT = detail::pct_abs(CTTT, 0.99);
    const double Kmax = K.back(), Kmin = K.front();
    const double rq = std::abs(g.rate_r - g.div_q), q = g.div_q;
    c.M_N = detail::sup_abs(CT) + rq * Kmax * detail::sup_abs(CK) + q * detail::sup_abs(C);
    c.chi = chi;
    c.D_floor = 0.5 * Kmin * Kmin * chi;
    std::tie(c.h, c.rho_K) = detail::mesh_stats(K);
    std::tie(c.tau, c.rho_T) = detail::mesh_stats(T);
    // mesh constants: 1/6 centered, 1/3 one-sided; stretched by the mesh ratio on nonuniform grids
    c.c_T = c.rho_T / 3.0;
    c.c_1 = c.rho_K / 3.0;
    c.c_2 = c.rho_K / 3.0;
    c.C_NT = c.c_T * c.M_TTT + q / 8.0 * c.M_TT;
    c.C_NK = rq * Kmax * c.c_1 * c.M_KKK + q / 8.0 * c.M_KK;
    c.C_DK = 0.5 * Kmax * Kmax * c.c_2 * c.M_KKKK;
    c.C_T = c.C_NT / c.D_floor;
    c.C_K = c.C_NK / c.D_floor + c.M_N / (c.D_floor * c.D_floor) * c.C_DK;
    c.C_clip = c.M_N / (c.D_floor * c.D_floor) * 0.5 * Kmax * Kmax;
    c.C_max = (c.M_N + c.C_NT * c.tau * c.tau + c.C_NK * c.h * c.h) / c.D_floor;
    return c;
}

/// Trapezoid constant of the index integrand f(K) = e^{rT} Q(K) / K^2 on the retained corridor,
/// scaled to index points: (50/sqrt(w)) (2/T) |I|/12 sup|f''|.
inline double quadrature_constant(const OptionGrid& g, const std::vector<std::size_t>& retained,
                                  double w_floor = kVarianceFloor) {
    if (retained.size() < 3) throw InsufficientGridError("quadrature constant needs three retained strikes");
    const double T = g.maturity_T, growth = std::exp(g.rate_r * T);
    std::vector<double> K, f;
    for (std::size_t i : retained) {
        K.push_back(g.strikes[i]);
        f.push_back(growth * otm_price(g, i) / (g.strikes[i] * g.strikes[i]));
    }
    double f2 = 0.0;
    for (std::size_t i = 1; i + 1 < K.size(); ++i)
        f2 = std::max(f2, std::abs(fd::d2_quadratic(K[i - 1], K[i], K[i + 1], f[i - 1], f[i], f[i + 1])));
    const double width = K.back() - K.front();
    return 50.0 / std::sqrt(w_floor) * (2.0 / T) * width / 12.0 * f2;
}

/// Robust invariance margin delta_i = (sigma_i + L_h |D| w_bar) / alpha_i.
inline double robust_margin(double sigma_i, double L_h, double D_norm, double w_bar, double alpha_i) {
    if (!(alpha_i > 0.0)) throw ParameterError("barrier rate must be positive");
    return (sigma_i + L_h * D_norm * w_bar) / alpha_i;
}

// ---------------------------------------------------------------- telemetry audits

struct PathTelemetry {
    int seed = 0;
    int path = 0;
    std::vector<TelemetryRecord> records;
};

struct AuditViolation {
    int seed, path, step;
    std::string invariant;
    std::string detail;
};

struct AuditReport {
    std::size_t paths = 0;
    std::size_t steps = 0;
    std::map<std::string, std::size_t> counts = {
        {"descent", 0}, {"barrier", 0}, {"dwell", 0}, {"turnover", 0}, {"rate_cap", 0}};
    std::vector<AuditViolation> violations;
    double max_turnover_ratio = 0.0;  // spent / budget, worst path

    bool passed() const { return violations.empty(); }
    std::size_t count(const std::string& k) const { return counts.at(k); }
};

struct AuditOptions {
    double descent_tol = 1e-10;
    double barrier_tol = 1e-9;
    double rate_tol = 1e-9;
    int expected_steps = -1;  // when >= 0 every path must carry exactly this many records
    bool check_dwell = true;
};

inline AuditReport audit_run(const std::vector<PathTelemetry>& stream, const ControllerParams& p,
                             const AuditOptions& opt = {}) {
    AuditReport rep;
    const auto flag = [&](const PathTelemetry& pt, int step, const std::string& inv, const std::string& d) {
        ++rep.counts[inv];
        rep.violations.push_back({pt.seed, pt.path, step, inv, d});
    };
    const double rate_cap = std::max(p.rate_s, p.rate_v);
    for (const auto& pt : stream) {
        ++rep.paths;
        if (opt.expected_steps >= 0 && static_cast<int>(pt.records.size()) != opt.expected_steps)
            throw AuditError("truncated telemetry for seed " + std::to_string(pt.seed) + " path " + std::to_string(pt.path));
        int last_dv = -1;
        double spent = 0.0, budget = 0.0, prev_after = 0.0;
        for (std::size_t k = 0; k < pt.records.size(); ++k) {
            const auto& r = pt.records[k];
            if (r.step_index != static_cast<int>(k))
                throw AuditError("non-contiguous telemetry for seed " + std::to_string(pt.seed) + " path " +
                                 std::to_string(pt.path));
            ++rep.steps;
            const bool traded = r.decision == Decision::traded;
            if (traded && !(r.risk_after <= r.risk_before - (r.tau_w - p.lambda_c) * r.cost + opt.descent_tol))
                flag(pt, r.step_index, "descent",
                     "risk_after " + std::to_string(r.risk_after) + " vs risk_before " + std::to_string(r.risk_before));
            if (traded && !(r.risk_after < r.risk_before)) flag(pt, r.step_index, "descent", "no strict decrease");
            if (std::abs(r.h_s) > p.inv_box_s + opt.barrier_tol || std::abs(r.h_v) > p.inv_box_v + opt.barrier_tol)
                flag(pt, r.step_index, "barrier", "inventory outside its box");
            if (r.trade.lpNorm<Eigen::Infinity>() > rate_cap + opt.rate_tol ||
                std::abs(r.trade(0)) > p.rate_s + opt.rate_tol || std::abs(r.trade(1)) > p.rate_v + opt.rate_tol)
                flag(pt, r.step_index, "rate_cap", "trade exceeds rate box");
            if (r.trade(1) != 0.0) {
                if (opt.check_dwell && last_dv >= 0 && r.step_index - last_dv < p.cooldown_steps + 1)
                    flag(pt, r.step_index, "dwell",
                         "VIX trades at steps " + std::to_string(last_dv) + " and " + std::to_string(r.step_index));
                last_dv = r.step_index;
            }
            // telescoped budget: initial risk plus every upward jump of the target between steps
            budget += k == 0 ? r.risk_before : std::max(0.0, r.risk_before - prev_after);
            prev_after = r.risk_after;
            if (traded) spent += r.cost;
        }
        const double cap = budget / (p.tau0 - p.lambda_c);
        if (spent > cap * (1.0 + 1e-12) + 1e-12)
            flag(pt, static_cast<int>(pt.records.size()) - 1, "turnover",
                 "spent " + std::to_string(spent) + " > budget " + std::to_string(cap));
        if (cap > 0.0) rep.max_turnover_ratio = std::max(rep.max_turnover_ratio, spent / cap);
    }
    return rep;
}

}  // namespace tailsafe
