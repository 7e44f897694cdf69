#pragma once

#include "black_scholes.hpp"
#include "controller.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "kappa_map.hpp"
#include "localvol.hpp"
#include "market_shell.hpp"
#include "risk_metrics.hpp"
#include "verification.hpp"
#include "vix_engine.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tailsafe {

// ---------------------------------------------------------------- configuration

struct MarketConfig {
    double spot = 4800.0, rate = 0.02, div = 0.015;
};

struct SliceConfig {
    double T_days = 0.0, theta = 0.0, rho = 0.0, phi = 0.0;
};

/// Either explicit slices, or the parametric family theta = atm_vol^2 T, phi = eta / theta^gamma.
struct SurfaceConfig {
    std::vector<double> maturities_days = {7, 14, 30, 60, 90, 180};
    double atm_vol = 0.2, rho = -0.5, eta = 0.5, gamma = 0.3;
    std::vector<SliceConfig> slices;
    double jet_step = 0.01;
};

struct StrikeConfig {
    int count = 41;
    double lo = 0.7, hi = 1.3;
    double half_spread = 0.0;
};

struct VixConfig {
    int near_days = 14, next_days = 30;
};

struct LocalVolConfig {
    double chi_floor = kDefaultChiFloor;
    int refine = 4;         // strike/maturity refinement of the simulation grid
    double flat_vol = 0.0;  // > 0 replaces the Dupire grid by a flat one
};

struct HedgeConfig {
    double moneyness = 1.0;   // strike / spot of the short call
    bool vix_marking = true;  // option marked at teacher vol + index change
};

struct KappaConfig {
    double bump_eps = 1e-3, mu = 1.0;
    double beta_rem = 1.0, beta_1 = 1.0, beta_2 = 1.0;
    std::vector<double> kernel = {0.25, 0.5, 0.25};
    std::string units = "vix_points";
};

struct MetricsConfig {
    double alpha = 0.975;
    int bootstrap_resamples = 500;
    int paired_resamples = 2000;
    std::uint64_t bootstrap_seed = 7;
};

struct GridConfig {
    std::vector<double> xi_values = {0.40, 0.45, 0.50};
    std::vector<double> rho_values = {-0.6, -0.5, -0.4};
    int seeds_per_cell = 4, paths_per_seed = 220;
};

struct AblationConfig {
    std::vector<std::string> toggles = {"fix_w_vix", "remove_guards", "no_micro_thresholds", "no_cooldown",
                                        "zero_cross_term"};
    double xi = 0.5, rho = -0.6;
};

struct VerifyConfig {
    int strong_paths = 10000;
    int audit_seeds = 10, audit_paths = 100;
    int cir_paths = 100000;
    int lipschitz_pairs = 10000;
    double dupire_vol = 0.2;
};

struct WorldConfig {
    int schema_version = 1;
    MarketConfig market;
    SurfaceConfig surface;
    StrikeConfig strikes;
    VixConfig vix;
    LocalVolConfig localvol;
    CirParams cir;
    SimConfig simulation{252, 60, 300, 8, 20240601};
    HedgeConfig hedge;
    KappaConfig kappa;
    ControllerParams controller;
    MetricsConfig metrics;
    GridConfig grid;
    AblationConfig ablation;
    VerifyConfig verify;
};

template <class V> void visit(V& v, MarketConfig& c) {
    v("spot", c.spot);
    v("rate", c.rate);
    v("div", c.div);
}
template <class V> void visit(V& v, SliceConfig& c) {
    v("T_days", c.T_days);
    v("theta", c.theta);
    v("rho", c.rho);
    v("phi", c.phi);
}
template <class V> void visit(V& v, SurfaceConfig& c) {
    v("maturities_days", c.maturities_days);
    v("atm_vol", c.atm_vol);
    v("rho", c.rho);
    v("eta", c.eta);
    v("gamma", c.gamma);
    v("slices", c.slices);
    v("jet_step", c.jet_step);
}
template <class V> void visit(V& v, StrikeConfig& c) {
    v("count", c.count);
    v("lo", c.lo);
    v("hi", c.hi);
    v("half_spread", c.half_spread);
}
template <class V> void visit(V& v, VixConfig& c) {
    v("near_days", c.near_days);
    v("next_days", c.next_days);
}
template <class V> void visit(V& v, LocalVolConfig& c) {
    v("chi_floor", c.chi_floor);
    v("refine", c.refine);
    v("flat_vol", c.flat_vol);
}
template <class V> void visit(V& v, CirParams& c) {
    v("kappa", c.kappa_mr);
    v("theta", c.theta_lr);
    v("xi", c.xi_volvol);
    v("rho", c.rho_sv);
    v("v0", c.v0);
}
template <class V> void visit(V& v, SimConfig& c) {
    v("steps_per_year", c.steps_per_year);
    v("horizon_days", c.horizon_days);
    v("paths", c.n_paths);
    v("seeds", c.n_seeds);
    v("seed", c.seed);
}
template <class V> void visit(V& v, HedgeConfig& c) {
    v("moneyness", c.moneyness);
    v("vix_marking", c.vix_marking);
}
template <class V> void visit(V& v, KappaConfig& c) {
    v("bump_eps", c.bump_eps);
    v("mu", c.mu);
    v("beta_rem", c.beta_rem);
    v("beta_1", c.beta_1);
    v("beta_2", c.beta_2);
    v("kernel", c.kernel);
    v("units", c.units);
}
template <class V> void visit(V& v, ControllerParams& c) {
    v("alpha_delta", c.alpha_delta);
    v("alpha_v", c.alpha_v);
    v("alpha_cross", c.alpha_cross);
    v("eta_s", c.eta_s);
    v("eta_v", c.eta_v);
    v("gamma", c.gamma_smooth);
    v("w_vix_base", c.w_vix_base);
    v("lambda_rho", c.lambda_rho);
    v("b_delta", c.b_delta);
    v("b_v", c.b_v);
    v("tau_tail", c.tau_tail);
    v("tau_rho", c.tau_rho);
    v("tau_pred", c.tau_pred);
    v("tau0", c.tau0);
    v("tau1", c.tau1);
    v("lambda_c", c.lambda_c);
    v("err_box_s", c.err_box_s);
    v("err_box_v", c.err_box_v);
    v("inv_box_s", c.inv_box_s);
    v("inv_box_v", c.inv_box_v);
    v("rate_s", c.rate_s);
    v("rate_v", c.rate_v);
    v("cvar_box_s", c.cvar_box_s);
    v("cvar_box_v", c.cvar_box_v);
    v("rho_soft", c.rho_soft);
    v("cbf_alpha", c.cbf_alpha);
    v("s_min0", c.s_min0);
    v("v_min0", c.v_min0);
    v("cooldown_steps", c.cooldown_steps);
    v("ewma_lambda", c.ewma_lambda);
    v("T0_days", c.T0);
    v("use_guards", c.use_guards);
    v("dynamic_weight", c.dynamic_weight);
    v("micro_thresholds", c.micro_thresholds);
    v("cooldown", c.cooldown);
}
template <class V> void visit(V& v, MetricsConfig& c) {
    v("alpha", c.alpha);
    v("bootstrap_resamples", c.bootstrap_resamples);
    v("paired_resamples", c.paired_resamples);
    v("bootstrap_seed", c.bootstrap_seed);
}
template <class V> void visit(V& v, GridConfig& c) {
    v("xi_values", c.xi_values);
    v("rho_values", c.rho_values);
    v("seeds_per_cell", c.seeds_per_cell);
    v("paths_per_seed", c.paths_per_seed);
}
template <class V> void visit(V& v, AblationConfig& c) {
    v("toggles", c.toggles);
    v("xi", c.xi);
    v("rho", c.rho);
}
template <class V> void visit(V& v, VerifyConfig& c) {
    v("strong_paths", c.strong_paths);
    v("audit_seeds", c.audit_seeds);
    v("audit_paths", c.audit_paths);
    v("cir_paths", c.cir_paths);
    v("lipschitz_pairs", c.lipschitz_pairs);
    v("dupire_vol", c.dupire_vol);
}
template <class V> void visit(V& v, WorldConfig& c) {
    v("schema_version", c.schema_version);
    v("market", c.market);
    v("surface", c.surface);
    v("strikes", c.strikes);
    v("vix", c.vix);
    v("localvol", c.localvol);
    v("cir", c.cir);
    v("simulation", c.simulation);
    v("hedge", c.hedge);
    v("kappa", c.kappa);
    v("controller", c.controller);
    v("metrics", c.metrics);
    v("grid", c.grid);
    v("ablation", c.ablation);
    v("verify", c.verify);
}

namespace cfgio {

using nlohmann::json;

struct Reader;
struct Writer;

inline void read_value(const json& x, const std::string& p, double& out) {
    if (!x.is_number()) throw ConfigError(p, "expected a number");
    out = x.get<double>();
}
inline void read_value(const json& x, const std::string& p, int& out) {
    if (!x.is_number_integer()) throw ConfigError(p, "expected an integer");
    const auto v = x.get<std::int64_t>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) throw ConfigError(p, "integer out of range");
    out = static_cast<int>(v);
}
inline void read_value(const json& x, const std::string& p, std::uint64_t& out) {
    if (!x.is_number_unsigned()) throw ConfigError(p, "expected a nonnegative integer");
    out = x.get<std::uint64_t>();
}
inline void read_value(const json& x, const std::string& p, bool& out) {
    if (!x.is_boolean()) throw ConfigError(p, "expected true or false");
    out = x.get<bool>();
}
inline void read_value(const json& x, const std::string& p, std::string& out) {
    if (!x.is_string()) throw ConfigError(p, "expected a string");
    out = x.get<std::string>();
}
template <class T> void read_value(const json& x, const std::string& p, std::vector<T>& out);
template <class T> void read_value(const json& x, const std::string& p, T& out);

struct Reader {
    const json& j;
    std::string path;
    std::set<std::string> known;

    template <class T> void operator()(const char* key, T& out) {
        known.insert(key);
        if (!j.contains(key)) return;
        read_value(j.at(key), path.empty() ? std::string(key) : path + "." + key, out);
    }

    void finish() const {
        for (const auto& [k, v] : j.items())
            if (!known.count(k)) throw ConfigError(path.empty() ? k : path + "." + k, "unknown key");
    }
};

template <class T> void read_value(const json& x, const std::string& p, std::vector<T>& out) {
    if (!x.is_array()) throw ConfigError(p, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < x.size(); ++i) {
        T v{};
        read_value(x[i], p + "[" + std::to_string(i) + "]", v);
        out.push_back(std::move(v));
    }
}

template <class T> void read_value(const json& x, const std::string& p, T& out) {
    if (!x.is_object()) throw ConfigError(p, "expected an object");
    Reader r{x, p, {}};
    visit(r, out);
    r.finish();
}

inline json write_value(double v) { return v; }
inline json write_value(int v) { return v; }
inline json write_value(std::uint64_t v) { return v; }
inline json write_value(bool v) { return v; }
inline json write_value(const std::string& v) { return v; }
template <class T> json write_value(const std::vector<T>& v);
template <class T> json write_value(const T& v);

struct Writer {
    json j = json::object();
    template <class T> void operator()(const char* key, T& v) { j[key] = write_value(v); }
};

template <class T> json write_value(const std::vector<T>& v) {
    json a = json::array();
    for (const auto& x : v) a.push_back(write_value(x));
    return a;
}

template <class T> json write_value(const T& v) {
    Writer w;
    T copy = v;
    visit(w, copy);
    return w.j;
}

}  // namespace cfgio

inline nlohmann::json to_json(const WorldConfig& c) { return cfgio::write_value(c); }

/// Semantic checks; failures carry the dotted path of the offending config block.
inline void validate_config(WorldConfig& c) {
    const auto wrap = [](const char* path, auto&& fn) {
        try {
            fn();
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(path, e.what());
        }
    };
    if (c.schema_version != 1) throw ConfigError("schema_version", "unsupported schema version");
    wrap("market", [&] {
        if (!(c.market.spot > 0.0)) throw ValidationError("spot must be positive");
    });
    wrap("surface", [&] {
        if (c.surface.slices.empty() && c.surface.maturities_days.empty()) throw ValidationError("no maturities");
        if (!(c.surface.atm_vol > 0.0)) throw ValidationError("atm_vol must be positive");
        if (!(c.surface.jet_step > 0.0)) throw ValidationError("jet_step must be positive");
    });
    wrap("strikes", [&] {
        if (c.strikes.count < 3) throw InsufficientGridError("need at least 3 strikes");
        if (!(c.strikes.lo > 0.0 && c.strikes.lo < 1.0 && c.strikes.hi > 1.0))
            throw ValidationError("moneyness band must bracket 1");
        if (c.strikes.half_spread < 0.0) throw ValidationError("half_spread must be nonnegative");
    });
    wrap("vix", [&] {
        if (!(c.vix.near_days > 0 && c.vix.near_days <= 30 && c.vix.next_days >= 30 && c.vix.next_days > c.vix.near_days))
            throw ValidationError("near/next maturities must bracket 30 days");
    });
    wrap("localvol", [&] {
        if (!(c.localvol.chi_floor > 0.0)) throw ValidationError("chi_floor must be positive");
        if (c.localvol.refine < 1) throw ValidationError("refine must be at least 1");
        if (c.localvol.flat_vol < 0.0) throw ValidationError("flat_vol must be nonnegative");
    });
    wrap("cir", [&] { c.cir.validate(); });
    wrap("simulation", [&] { c.simulation.validate(); });
    wrap("hedge", [&] {
        if (!(c.hedge.moneyness > 0.0)) throw ValidationError("moneyness must be positive");
    });
    wrap("kappa", [&] {
        if (c.kappa.units != "variance" && c.kappa.units != "vix_points")
            throw ValidationError("units must be 'variance' or 'vix_points'");
        smooth_curve({1.0}, c.kappa.kernel);
    });
    wrap("controller", [&] { c.controller.validate(); });
    wrap("metrics", [&] {
        if (!(c.metrics.alpha > 0.0 && c.metrics.alpha < 1.0)) throw ParameterError("alpha must lie in (0,1)");
        if (c.metrics.bootstrap_resamples < 100 || c.metrics.paired_resamples < 100)
            throw ParameterError("bootstrap needs at least 100 resamples");
    });
    wrap("grid", [&] {
        if (c.grid.xi_values.empty() || c.grid.rho_values.empty()) throw ValidationError("grid axes must be nonempty");
        if (c.grid.seeds_per_cell < 1 || c.grid.paths_per_seed < 2) throw ValidationError("grid sample sizes too small");
    });
    wrap("ablation", [&] {
        static const std::set<std::string> ok = {"fix_w_vix", "remove_guards", "no_micro_thresholds", "no_cooldown",
                                                 "zero_cross_term"};
        for (const auto& t : c.ablation.toggles)
            if (!ok.count(t)) throw ValidationError("unknown toggle '" + t + "'");
    });
}

/// Config file stores the controller horizon in days; internally it is a year fraction.
inline WorldConfig parse_config(const nlohmann::json& j) {
    WorldConfig c;
    c.controller.T0 = 60.0;
    cfgio::read_value(j, "", c);
    c.controller.T0 /= 365.0;
    validate_config(c);
    return c;
}

inline WorldConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, "cannot open config file");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path, std::string("malformed config: ") + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json config_json(const WorldConfig& c) {
    WorldConfig copy = c;
    copy.controller.T0 *= 365.0;
    return to_json(copy);
}

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string config_hash(const WorldConfig& c) {
    const std::string s = config_json(c).dump();
    return hex64(fnv1a(s.data(), s.size()));
}

// ---------------------------------------------------------------- world

struct World {
    WorldConfig cfg;
    VolSurface surface;  // SSVI shell with teacher attached
    VixSetup setup;
    std::vector<double> maturities;
    CallPriceGrid prices;
    LocalVolGrid lv;
    KappaCurve kappa;
    SimConfig sim;
    double strike = 0.0;
    double expiry = 0.0;
    double premium = 0.0;
    double vix0 = 0.0;  // index level of the variance proxy at t = 0
};

inline std::vector<SsviSlice> world_slices(const WorldConfig& c) {
    std::vector<SsviSlice> out;
    if (!c.surface.slices.empty()) {
        for (const auto& s : c.surface.slices) out.push_back({s.T_days / 365.0, s.theta, s.rho, s.phi});
        return out;
    }
    for (double d : c.surface.maturities_days) {
        const double T = d / 365.0;
        const double theta = c.surface.atm_vol * c.surface.atm_vol * T;
        out.push_back({T, theta, c.surface.rho, c.surface.eta / std::pow(theta, c.surface.gamma)});
    }
    return out;
}

inline VolSurface build_surface(const WorldConfig& c) {
    VolSurface s(world_slices(c), c.market.spot, c.market.rate, c.market.div);
    return build_teacher(enforce_calendar_monotone(s), c.surface.jet_step);
}

inline VixSetup world_vix_setup(const WorldConfig& c) {
    VixSetup v;
    v.strikes = log_uniform_strikes(c.market.spot, c.strikes.lo, c.strikes.hi, static_cast<std::size_t>(c.strikes.count));
    v.minutes1 = static_cast<long>(c.vix.near_days) * 1440L;
    v.minutes2 = static_cast<long>(c.vix.next_days) * 1440L;
    v.half_spread = c.strikes.half_spread;
    return v;
}

/// Option mark: teacher vol at the current forward moneyness, moved one-for-one with the index.
inline double mark_vol(const World& w, double S, double T_rem, double vix) {
    const double F = S * std::exp((w.cfg.market.rate - w.cfg.market.div) * T_rem);
    double v = w.surface.vol(VolSource::teacher, std::log(w.strike / F), T_rem);
    if (w.cfg.hedge.vix_marking) v += (vix - w.vix0) / 100.0;
    return std::max(v, kTeacherVolFloor);
}

inline double option_value(const World& w, double S, double T_rem, double vol) {
    const double r = w.cfg.market.rate, q = w.cfg.market.div;
    return bs::price(S * std::exp((r - q) * T_rem), w.strike, T_rem, vol, std::exp(-r * T_rem), true);
}

inline World build_world(const WorldConfig& c) {
    World w;
    w.cfg = c;
    w.surface = build_surface(c);
    w.setup = world_vix_setup(c);
    for (const auto& s : w.surface.slices()) w.maturities.push_back(s.maturity_T);
    w.prices = make_call_grid(w.surface, VolSource::teacher, w.setup.strikes, w.maturities);
    if (c.localvol.flat_vol > 0.0) {
        w.lv = flat_local_vol(c.localvol.flat_vol, w.setup.strikes, w.maturities);
    } else if (c.localvol.refine > 1) {
        w.lv = dupire_local_variance(make_call_grid(w.surface, VolSource::teacher, refine_log(w.setup.strikes, c.localvol.refine),
                                                    refine_linear(w.maturities, c.localvol.refine)),
                                     c.localvol.chi_floor);
    } else {
        w.lv = dupire_local_variance(w.prices, c.localvol.chi_floor);
    }
    w.sim = c.simulation;
    w.expiry = w.sim.horizon();
    w.strike = c.market.spot * c.hedge.moneyness;
    w.vix0 = vix_proxy(c.cir.v0, c.cir).vix;

    KappaBuild kb;
    kb.kernel = c.kappa.kernel;
    kb.mu = c.kappa.mu;
    kb.T0 = c.controller.T0;
    kb.options.bump_eps = c.kappa.bump_eps;
    kb.options.beta_rem = c.kappa.beta_rem;
    kb.options.beta_1 = c.kappa.beta_1;
    kb.options.beta_2 = c.kappa.beta_2;
    kb.options.units = c.kappa.units == "variance" ? KappaUnits::variance : KappaUnits::vix_points;
    std::vector<double> nodes;
    const int N = w.sim.steps();
    for (int n = N; n >= 1; --n) nodes.push_back(n * w.sim.dt());
    w.kappa = build_kappa_curve(w.surface, VolSource::teacher, w.setup, nodes, kb);

    w.premium = option_value(w, c.market.spot, w.expiry, mark_vol(w, c.market.spot, w.expiry, w.vix0));
    return w;
}

// ---------------------------------------------------------------- hedging

struct PathOutcome {
    double pnl = 0.0;
    std::vector<TelemetryRecord> telemetry;
};

/// Short one call, hedge with spot and an index future; cash accrues at r, the spot leg earns q.
inline PathOutcome hedge_path(const World& w, const ControllerParams& p, const double* S, const double* vix,
                              bool keep_telemetry) {
    const double r = w.cfg.market.rate, q = w.cfg.market.div;
    const int N = w.sim.steps();
    const double dt = w.sim.dt();
    ControllerState st;
    PathOutcome out;
    if (keep_telemetry) out.telemetry.reserve(static_cast<std::size_t>(N));
    double cash = w.premium;
    for (int n = 0; n < N; ++n) {
        const double T_rem = w.expiry - n * dt;
        const double vol = mark_vol(w, S[n], T_rem, vix[n]);
        StepTargets tgt;
        tgt.delta_star = bs::call_delta(S[n], w.strike, T_rem, vol, r, q);
        tgt.kappa_eff = interp_kappa(w.kappa, T_rem);
        StepMarket mkt;
        if (n > 0) {
            mkt.d_s = S[n] / S[n - 1] - 1.0;
            mkt.d_v = vix[n] - vix[n - 1];
        }
        StepResult res = controller_step(st, tgt, mkt, p, T_rem, n);
        cash -= res.trade(0) * S[n] + res.telemetry.cost;
        cash = cash * std::exp(r * dt) + st.h_s * S[n] * q * dt;
        cash += st.h_v * (vix[n + 1] - vix[n]);
        if (keep_telemetry) out.telemetry.push_back(std::move(res.telemetry));
    }
    cash += st.h_s * S[N] - std::max(S[N] - w.strike, 0.0);
    out.pnl = cash;
    return out;
}

struct ControllerRun {
    std::string name;
    ControllerParams params;
};

struct DecisionCounts {
    std::size_t steps = 0, ntb = 0, blocked = 0, traded = 0, hold = 0, vetoes = 0;
    double ntb_ratio() const { return steps ? static_cast<double>(ntb) / static_cast<double>(steps) : 0.0; }
    double block_ratio() const {
        const std::size_t cand = steps - ntb;
        return cand ? static_cast<double>(blocked) / static_cast<double>(cand) : 0.0;
    }
};

struct PoolResult {
    std::string name;
    ControllerParams params;
    LossSample losses;
    std::vector<double> pnl;
    DecisionCounts counts;
    double spx_turnover = 0.0, vix_turnover = 0.0;
    std::size_t small_dv = 0;  // nonzero |dV| below twice the VIX micro-threshold
    int min_dv_gap = std::numeric_limits<int>::max();
    std::vector<PathTelemetry> telemetry;
};

/// Hash of the simulated state sequences; equal hashes certify that two runs consumed identical draws.
inline std::uint64_t panel_hash(const PathPanel& panel) {
    std::uint64_t h = fnv1a(panel.S.data(), panel.S.size() * sizeof(double));
    return fnv1a(panel.vix.data(), panel.vix.size() * sizeof(double), h);
}

inline std::vector<PoolResult> run_controllers(const World& w, const PathPanel& panel,
                                               const std::vector<ControllerRun>& runs, bool keep_telemetry) {
    std::vector<PoolResult> out;
    for (const auto& run : runs) {
        run.params.validate();
        PoolResult pr;
        pr.name = run.name;
        pr.params = run.params;
        for (int s = 0; s < panel.n_seeds; ++s)
            for (int p = 0; p < panel.n_paths; ++p) {
                const std::size_t base = panel.index(s, p, 0);
                PathOutcome po = hedge_path(w, run.params, &panel.S[base], &panel.vix[base], true);
                pr.pnl.push_back(po.pnl);
                pr.losses.losses.push_back(-po.pnl);
                pr.losses.labels.push_back({s, p});
                int last_dv = -1;
                for (const auto& t : po.telemetry) {
                    ++pr.counts.steps;
                    switch (t.decision) {
                        case Decision::ntb_inaction: ++pr.counts.ntb; break;
                        case Decision::gate_blocked: ++pr.counts.blocked; break;
                        case Decision::traded: ++pr.counts.traded; break;
                        case Decision::cooldown_hold: ++pr.counts.hold; break;
                    }
                    if (t.descent_veto) ++pr.counts.vetoes;
                    pr.spx_turnover += std::abs(t.trade(0));
                    pr.vix_turnover += std::abs(t.trade(1));
                    if (t.trade(1) != 0.0) {
                        if (std::abs(t.trade(1)) < 2.0 * run.params.v_min(t.w)) ++pr.small_dv;
                        if (last_dv >= 0) pr.min_dv_gap = std::min(pr.min_dv_gap, t.step_index - last_dv);
                        last_dv = t.step_index;
                    }
                }
                if (keep_telemetry) pr.telemetry.push_back({s, p, std::move(po.telemetry)});
            }
        out.push_back(std::move(pr));
    }
    return out;
}

inline PathPanel simulate_world(const World& w, const CirParams& cir, int seeds, int paths) {
    SimConfig sc = w.sim;
    sc.n_seeds = seeds;
    sc.n_paths = paths;
    return simulate_pool(sc, w.lv, cir, w.cfg.market.spot, w.cfg.market.rate, w.cfg.market.div);
}

inline ControllerParams baseline_params(ControllerParams p) {
    p.use_guards = false;
    p.dynamic_weight = false;
    p.micro_thresholds = false;
    p.cooldown = false;
    return p;
}

inline ControllerParams apply_toggle(ControllerParams p, const std::string& t) {
    if (t == "fix_w_vix")
        p.dynamic_weight = false;
    else if (t == "remove_guards")
        p.use_guards = false;
    else if (t == "no_micro_thresholds")
        p.micro_thresholds = false;
    else if (t == "no_cooldown")
        p.cooldown = false;
    else if (t == "zero_cross_term")
        p.alpha_cross = 0.0;
    else
        throw ValidationError("unknown toggle '" + t + "'");
    return p;
}

// ---------------------------------------------------------------- reports

struct MetricRow {
    std::string metric;
    double point = 0.0, ci_low = 0.0, ci_high = 0.0;
    std::size_t n = 0;
    int resamples = 0;
    std::uint64_t seed = 0;
};

struct PoolReport {
    std::string config_hash;
    std::string draw_hash;
    std::vector<MetricRow> rows;
    PoolResult result;

    const MetricRow& row(const std::string& m) const {
        for (const auto& r : rows)
            if (r.metric == m) return r;
        throw ValidationError("no metric '" + m + "'");
    }
};

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline void write_rows_csv(std::ostream& os, const std::string& hash, const std::vector<MetricRow>& rows) {
    os << "# config_hash=" << hash << '\n';
    os << "metric,point,ci_low,ci_high,n,resamples,seed\n";
    for (const auto& r : rows)
        os << r.metric << ',' << format_double(r.point) << ',' << format_double(r.ci_low) << ','
           << format_double(r.ci_high) << ',' << r.n << ',' << r.resamples << ',' << r.seed << '\n';
}

inline std::string level_tag(double alpha) {
    std::ostringstream os;
    os << alpha * 100.0;
    return os.str();
}

inline std::vector<MetricRow> pool_metrics(const PoolResult& pr, const MetricsConfig& m) {
    std::vector<MetricRow> rows;
    const std::size_t n = pr.pnl.size();
    const double a = m.alpha;
    const auto add_ci = [&](const std::string& name, const std::vector<double>& x, const Statistic& f, std::uint64_t salt) {
        const IntervalEstimate ie = bootstrap_ci(x, f, m.bootstrap_resamples, derive_seed(m.bootstrap_seed, salt));
        rows.push_back({name, ie.point, ie.ci_low, ie.ci_high, n, ie.resamples, ie.seed});
    };
    add_ci("mean_pnl", pr.pnl, mean_of, 1);
    add_ci("std_pnl", pr.pnl,
           [](const std::vector<double>& x) {
               const double mu = mean_of(x);
               double s = 0.0;
               for (double v : x) s += (v - mu) * (v - mu);
               return std::sqrt(s / static_cast<double>(std::max<std::size_t>(x.size() - 1, 1)));
           },
           2);
    add_ci("VaR_" + level_tag(a), pr.losses.losses, [a](const std::vector<double>& x) { return var_es(x, a).var; }, 3);
    add_ci("ES_" + level_tag(a), pr.losses.losses, [a](const std::vector<double>& x) { return var_es(x, a).es; }, 4);
    const auto plain = [&](const std::string& name, double v) { rows.push_back({name, v, v, v, n, 0, 0}); };
    plain("ntb_ratio", pr.counts.ntb_ratio());
    plain("gate_block_ratio", pr.counts.block_ratio());
    plain("trade_ratio", pr.counts.steps ? static_cast<double>(pr.counts.traded) / static_cast<double>(pr.counts.steps) : 0.0);
    plain("descent_vetoes", static_cast<double>(pr.counts.vetoes));
    plain("spx_turnover_per_path", n ? pr.spx_turnover / static_cast<double>(n) : 0.0);
    plain("vix_turnover_per_path", n ? pr.vix_turnover / static_cast<double>(n) : 0.0);
    return rows;
}

inline PoolReport run_pool(const WorldConfig& c, bool keep_telemetry = true) {
    const World w = build_world(c);
    const PathPanel panel = simulate_world(w, c.cir, c.simulation.n_seeds, c.simulation.n_paths);
    PoolReport rep;
    rep.config_hash = config_hash(c);
    rep.draw_hash = hex64(panel_hash(panel));
    rep.result = std::move(run_controllers(w, panel, {{"tail_safe", c.controller}}, keep_telemetry).front());
    rep.rows = pool_metrics(rep.result, c.metrics);
    return rep;
}

inline void write_telemetry_jsonl(std::ostream& os, const std::vector<PathTelemetry>& tel) {
    for (const auto& pt : tel)
        for (const auto& r : pt.records) {
            nlohmann::json j = r.to_json();
            j["seed"] = pt.seed;
            j["path"] = pt.path;
            os << j.dump() << '\n';
        }
}

/// Parses a telemetry stream back into per-path records, in file order.
inline std::vector<PathTelemetry> read_telemetry_jsonl(std::istream& in) {
    std::vector<PathTelemetry> out;
    std::map<std::pair<int, int>, std::size_t> idx;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const int s = j.at("seed").get<int>(), p = j.at("path").get<int>();
            auto it = idx.find({s, p});
            if (it == idx.end()) {
                it = idx.emplace(std::pair{s, p}, out.size()).first;
                out.push_back({s, p, {}});
            }
            out[it->second].records.push_back(TelemetryRecord::from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw AuditError("corrupted telemetry at line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw AuditError("corrupted telemetry at line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

struct GridCell {
    double xi = 0.0, rho = 0.0;
    IntervalEstimate delta_es;
    double es_safe = 0.0, es_base = 0.0;
    std::size_t n = 0;
    std::string draw_hash;
};

inline IntervalEstimate paired_delta(const PoolResult& a, const PoolResult& b, const MetricsConfig& m, std::uint64_t salt) {
    return paired_bootstrap_delta_es(a.losses, b.losses, m.alpha, m.paired_resamples, derive_seed(m.bootstrap_seed, salt));
}

inline std::vector<GridCell> run_scenario_grid(const WorldConfig& c) {
    const World w = build_world(c);
    std::vector<GridCell> out;
    std::uint64_t salt = 100;
    for (double xi : c.grid.xi_values)
        for (double rho : c.grid.rho_values) {
            CirParams cir = c.cir;
            cir.xi_volvol = xi;
            cir.rho_sv = rho;
            const PathPanel panel = simulate_world(w, cir, c.grid.seeds_per_cell, c.grid.paths_per_seed);
            const auto res = run_controllers(w, panel, {{"tail_safe", c.controller}, {"baseline", baseline_params(c.controller)}},
                                             false);
            GridCell cell;
            cell.xi = xi;
            cell.rho = rho;
            cell.delta_es = paired_delta(res[0], res[1], c.metrics, salt++);
            cell.es_safe = var_es(res[0].losses.losses, c.metrics.alpha).es;
            cell.es_base = var_es(res[1].losses.losses, c.metrics.alpha).es;
            cell.n = res[0].pnl.size();
            cell.draw_hash = hex64(panel_hash(panel));
            out.push_back(cell);
        }
    return out;
}

inline void write_grid_csv(std::ostream& os, const std::string& hash, const std::vector<GridCell>& cells) {
    os << "# config_hash=" << hash << '\n';
    os << "xi,rho,delta_es,ci_low,ci_high,excludes_zero,es_safe,es_base,n,resamples,seed\n";
    for (const auto& c : cells)
        os << c.xi << ',' << c.rho << ',' << format_double(c.delta_es.point) << ',' << format_double(c.delta_es.ci_low) << ','
           << format_double(c.delta_es.ci_high) << ',' << c.delta_es.excludes_zero() << ',' << format_double(c.es_safe) << ','
           << format_double(c.es_base) << ',' << c.n << ',' << c.delta_es.resamples << ',' << c.delta_es.seed << '\n';
}

struct AblationRow {
    std::string toggle;  // "full" for the reference controller
    IntervalEstimate delta_es;  // variant minus full
    std::size_t small_dv = 0;
    double block_ratio = 0.0, ntb_ratio = 0.0;
    double vix_turnover = 0.0;
    int min_dv_gap = 0;  // 0 when fewer than two VIX trades occurred
};

inline std::vector<AblationRow> run_ablation(const WorldConfig& c) {
    const World w = build_world(c);
    CirParams cir = c.cir;
    cir.xi_volvol = c.ablation.xi;
    cir.rho_sv = c.ablation.rho;
    const PathPanel panel = simulate_world(w, cir, c.grid.seeds_per_cell, c.grid.paths_per_seed);
    std::vector<ControllerRun> runs{{"full", c.controller}};
    for (const auto& t : c.ablation.toggles) runs.push_back({t, apply_toggle(c.controller, t)});
    const auto res = run_controllers(w, panel, runs, false);
    std::vector<AblationRow> out;
    for (std::size_t i = 0; i < res.size(); ++i) {
        AblationRow row;
        row.toggle = res[i].name;
        row.delta_es = paired_delta(res[i], res[0], c.metrics, 200 + i);
        row.small_dv = res[i].small_dv;
        row.block_ratio = res[i].counts.block_ratio();
        row.ntb_ratio = res[i].counts.ntb_ratio();
        row.vix_turnover = res[i].vix_turnover;
        row.min_dv_gap = res[i].min_dv_gap == std::numeric_limits<int>::max() ? 0 : res[i].min_dv_gap;
        out.push_back(row);
    }
    return out;
}

inline void write_ablation_csv(std::ostream& os, const std::string& hash, const std::vector<AblationRow>& rows) {
    os << "# config_hash=" << hash << '\n';
    os << "toggle,delta_es,ci_low,ci_high,es_direction,small_dv,small_dv_direction,block_ratio,ntb_ratio,vix_turnover,min_dv_gap\n";
    const auto arrow = [](double d) { return d > 0 ? "up" : (d < 0 ? "down" : "flat"); };
    for (const auto& r : rows)
        os << r.toggle << ',' << format_double(r.delta_es.point) << ',' << format_double(r.delta_es.ci_low) << ','
           << format_double(r.delta_es.ci_high) << ',' << arrow(r.delta_es.point) << ',' << r.small_dv << ','
           << arrow(static_cast<double>(r.small_dv) - static_cast<double>(rows.front().small_dv)) << ','
           << format_double(r.block_ratio) << ',' << format_double(r.ntb_ratio) << ',' << format_double(r.vix_turnover)
           << ',' << r.min_dv_gap << '\n';
}

// ---------------------------------------------------------------- verification suite

struct StudyResult {
    std::string name;
    bool passed = false;
    double metric = 0.0;
    std::string detail;
};

struct VerifySummary {
    std::vector<StudyResult> studies;
    bool passed() const {
        return std::all_of(studies.begin(), studies.end(), [](const StudyResult& s) { return s.passed; });
    }
    void write_csv(std::ostream& os) const {
        os << "study,passed,metric,detail\n";
        for (const auto& s : studies) os << s.name << ',' << s.passed << ',' << format_double(s.metric) << ",\"" << s.detail << "\"\n";
    }
};

inline double smooth_test_vol(double S, double) { return 0.2 * (1.0 + 0.1 * std::sin(std::log(S))); }

struct CirMeanCheck {
    double mc = 0.0, closed = 0.0, se = 0.0, z = 0.0;
    std::size_t lipschitz_violations = 0;         // against 50 B / sqrt(theta)
    std::size_t global_lipschitz_violations = 0;  // against the bound valid on all v >= 0
    bool passed = false;
};

/// Monte Carlo of (1/tau) int_0^tau E[v] by trapezoid over a fine full-truncation grid, against
/// theta + (v0 - theta) B; Lipschitz bound of the index proxy on random variance pairs.
inline CirMeanCheck cir_mean_check(const CirParams& p, int paths, int pairs, std::uint64_t seed, int steps = 1000) {
    p.validate();
    const double tau = kVixTau, dt = tau / steps;
    const CounterRng rng(seed);
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < paths; ++i) {
        double v = p.v0, acc = 0.5 * v;
        for (int n = 0; n < steps; ++n) {
            v = step_cir(v, p, dt, rng.normal(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(n), kChannelVar)).v;
            acc += (n + 1 == steps ? 0.5 : 1.0) * v;
        }
        const double avg = acc / steps;
        sum += avg;
        sum2 += avg * avg;
    }
    CirMeanCheck out;
    out.mc = sum / paths;
    out.se = std::sqrt(std::max(sum2 / paths - out.mc * out.mc, 0.0) / paths);
    out.closed = p.theta_lr + (p.v0 - p.theta_lr) * cir_b_factor(p.kappa_mr, tau);
    out.z = out.se > 0.0 ? std::abs(out.mc - out.closed) / out.se : 0.0;
    const CounterRng pr(derive_seed(seed, 1));
    for (int i = 0; i < pairs; ++i) {
        const double v1 = 0.5 * pr.uniform(static_cast<std::uint64_t>(i), 0, 0);
        const double v2 = 0.5 * pr.uniform(static_cast<std::uint64_t>(i), 0, 1);
        const VixProxy a = vix_proxy(v1, p), b = vix_proxy(v2, p);
        if (std::abs(a.vix - b.vix) > a.lipschitz * std::abs(v1 - v2) + 1e-12) ++out.lipschitz_violations;
        if (std::abs(a.vix - b.vix) > a.lipschitz_global * std::abs(v1 - v2) + 1e-12) ++out.global_lipschitz_violations;
    }
    out.passed = out.z <= 3.0 && out.lipschitz_violations == 0;
    return out;
}

/// Bound dominance of the flat-vol Dupire quotient at every non-clipped interior node.
inline std::pair<bool, double> dupire_bound_dominance(double sigma, const World& w) {
    const auto& c = w.cfg;
    const CallPriceGrid g = make_call_grid([sigma](double, double) { return sigma; }, w.setup.strikes, w.maturities,
                                           c.market.spot, c.market.rate, c.market.div);
    const LocalVolGrid lv = dupire_local_variance(g, c.localvol.chi_floor);
    const ConstantsTable ct = measure_envelopes(g, c.localvol.chi_floor);
    const double bound = ct.C_T * ct.tau * ct.tau + ct.C_K * ct.h * ct.h;
    double worst = 0.0;
    for (std::size_t i = 1; i + 1 < g.nK(); ++i)
        for (std::size_t j = 1; j + 1 < g.nT(); ++j) {
            const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
            if (lv.clip_mask(a, b)) continue;
            worst = std::max(worst, std::abs(lv.variance(a, b) - sigma * sigma) / bound);
        }
    return {worst <= 1.0, worst};
}

inline void write_file(const std::filesystem::path& p, const std::string& s) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw ResourceError("cannot write " + p.string());
    os << s;
}

template <class T> std::string to_csv(const T& obj) {
    std::ostringstream os;
    obj.write_csv(os);
    return os.str();
}

inline VerifySummary verify_all(const WorldConfig& c, const std::optional<std::filesystem::path>& out = std::nullopt) {
    VerifySummary sum;
    const World w = build_world(c);
    const auto save = [&](const std::string& name, const std::string& body) {
        if (out) write_file(*out / "studies" / (name + ".csv"), body);
    };
    const auto record = [&](std::string name, auto&& fn) {
        StudyResult r;
        r.name = std::move(name);
        try {
            fn(r);
        } catch (const Error& e) {
            r.passed = false;
            r.detail = e.what();
        }
        sum.studies.push_back(r);
    };

    record("coherence", [&](StudyResult& r) {
        const SharedGrids g = price_vix_grids(w.surface, VolSource::surface, w.setup);
        const double cq = std::max(quadrature_constant(g.g1, g.r1), quadrature_constant(g.g2, g.r2));
        const CoherenceReport cr =
            coherence_residual(w.surface, VolSource::surface, w.surface, VolSource::teacher, w.setup, cq);
        r.metric = cr.residual;
        r.passed = cr.residual <= 1e-2 && cr.residual <= cr.bound;
        r.detail = "vix_surface=" + format_double(cr.vix_a) + " vix_teacher=" + format_double(cr.vix_b) +
                   " bound=" + format_double(cr.bound);
        std::ostringstream os;
        os << "vix_surface,vix_teacher,residual,eps_shape,c_coh,c_coh_sharp,c_quad,bound\n"
           << format_double(cr.vix_a) << ',' << format_double(cr.vix_b) << ',' << format_double(cr.residual) << ','
           << format_double(cr.eps_shape) << ',' << format_double(cr.c_coh) << ',' << format_double(cr.c_coh_sharp) << ','
           << format_double(cr.c_quad) << ',' << format_double(cr.bound) << '\n';
        save("coherence", os.str());
    });

    record("quadrature", [&](StudyResult& r) {
        const double T = minutes_to_years(kMinutes30D);
        const auto vol = [&](double k) { return w.surface.vol(VolSource::surface, k, T); };
        const ConvergenceStudy st =
            quadrature_convergence(vol, c.market.spot, c.market.rate, c.market.div, T, w.setup.strikes);
        r.metric = st.fitted_slope;
        r.passed = st.passed;
        r.detail = "slope in [" + format_double(st.lo) + "," + format_double(st.hi) + "]";
        save("quadrature", to_csv(st));
    });

    record("strong_order", [&](StudyResult& r) {
        const ConvergenceStudy st = strong_order_study(smooth_test_vol, c.market.spot, c.market.rate, c.market.div,
                                                       w.expiry, w.sim.steps(), c.verify.strong_paths, c.simulation.seed);
        r.metric = st.fitted_slope;
        r.passed = st.passed;
        r.detail = "order in [" + format_double(st.lo) + "," + format_double(st.hi) + "]";
        save("strong_order", to_csv(st));
    });

    record("dupire_flat", [&](StudyResult& r) {
        const DupireStudy ds = dupire_flat_study(c.verify.dupire_vol, c.market.spot, c.market.rate, c.market.div,
                                                 w.setup.strikes, w.maturities, {1, 2, 4}, c.localvol.chi_floor);
        const auto [dominated, ratio] = dupire_bound_dominance(c.verify.dupire_vol, w);
        r.metric = ds.max_vol_error.front();
        r.passed = ds.passed && dominated;
        r.detail = "max vol error " + format_double(ds.max_vol_error.front()) + " (tol " + format_double(ds.vol_tol) +
                   "), order " + format_double(ds.order.fitted_slope) + " (min " + format_double(ds.order_min) +
                   "), bound ratio " + format_double(ratio);
        std::ostringstream os;
        os << "level,mesh,var_error,vol_error,clipped,floored\n";
        for (std::size_t i = 0; i < ds.max_vol_error.size(); ++i)
            os << ds.order.refinement_levels[i] << ',' << ds.order.mesh_sizes[i] << ',' << ds.order.errors[i] << ','
               << ds.max_vol_error[i] << ',' << ds.clipped[i] << ',' << ds.floored[i] << '\n';
        save("dupire_flat", os.str());
        if (out) write_file(*out / "constants.csv", to_csv(measure_envelopes(w.prices, c.localvol.chi_floor)));
    });

    record("cir_proxy", [&](StudyResult& r) {
        const CirMeanCheck cm = cir_mean_check(c.cir, c.verify.cir_paths, c.verify.lipschitz_pairs, c.simulation.seed);
        r.metric = cm.z;
        r.passed = cm.passed;
        r.detail = "mc=" + format_double(cm.mc) + " closed=" + format_double(cm.closed) +
                   " lipschitz_violations=" + std::to_string(cm.lipschitz_violations) +
                   " global_bound_violations=" + std::to_string(cm.global_lipschitz_violations);
    });

    record("audits", [&](StudyResult& r) {
        const PathPanel panel = simulate_world(w, c.cir, c.verify.audit_seeds, c.verify.audit_paths);
        const auto res = run_controllers(w, panel, {{"tail_safe", c.controller}}, true);
        AuditOptions ao;
        ao.expected_steps = w.sim.steps();
        ao.check_dwell = c.controller.cooldown;
        const AuditReport ar = audit_run(res.front().telemetry, c.controller, ao);
        r.metric = static_cast<double>(ar.violations.size());
        r.passed = ar.passed();
        std::ostringstream os;
        os << "invariant,violations\n";
        for (const auto& [k, v] : ar.counts) os << k << ',' << v << '\n';
        save("audits", os.str());
        r.detail = "paths=" + std::to_string(ar.paths) + " max_turnover_ratio=" + format_double(ar.max_turnover_ratio);
        if (!ar.violations.empty()) {
            const auto& v = ar.violations.front();
            r.detail += " first: seed " + std::to_string(v.seed) + " path " + std::to_string(v.path) + " step " +
                        std::to_string(v.step) + " " + v.invariant;
        }
    });

    if (out) write_file(*out / "studies" / "summary.csv", to_csv(sum));
    return sum;
}

/// out/<hash>-<UTC timestamp>
inline std::string make_run_id(const WorldConfig& c) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << config_hash(c) << '-' << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
    return os.str();
}

}  // namespace tailsafe
