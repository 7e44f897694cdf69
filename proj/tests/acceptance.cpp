#include "tailsafe/harness.hpp"

#include <chrono>
#include <cstdio>
#include <random>
#include <string>

using namespace tailsafe;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& name, bool ok, double secs, const std::string& detail) {
    if (!ok) ++failures;
    std::printf("%s %d %s (%.2fs) %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), secs, detail.c_str());
    std::fflush(stdout);
}

template <class F> void criterion(int id, const std::string& name, F&& fn) {
    const auto t0 = Clock::now();
    std::string detail;
    bool ok = false;
    try {
        ok = fn(detail);
    } catch (const std::exception& e) {
        detail = std::string("error: ") + e.what();
    }
    report(id, name, ok, std::chrono::duration<double>(Clock::now() - t0).count(), detail);
}

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) { return format_double(v); }

}  // namespace

int main() {
    const WorldConfig cfg = load_config(std::string(TAILSAFE_SOURCE_DIR) + "/configs/desk.json");

    criterion(1, "vix_coherence", [&](std::string& d) {
        const auto t0 = Clock::now();
        const VolSurface s = build_surface(cfg);
        const VixSetup setup = world_vix_setup(cfg);
        const SharedGrids g = price_vix_grids(s, VolSource::surface, setup);
        const double cq = std::max(quadrature_constant(g.g1, g.r1), quadrature_constant(g.g2, g.r2));
        const CoherenceReport cr = coherence_residual(s, VolSource::surface, s, VolSource::teacher, setup, cq);
        const double t = elapsed(t0);
        d = "residual=" + num(cr.residual) + " bound=" + num(cr.bound) + " runtime=" + num(t);
        return cr.residual <= 1e-2 && t < 10.0;
    });

    criterion(2, "quadrature_order", [&](std::string& d) {
        const auto t0 = Clock::now();
        const VolSurface s = build_surface(cfg);
        const double T = minutes_to_years(kMinutes30D);
        const auto vol = [&](double k) { return s.vol(VolSource::surface, k, T); };
        const ConvergenceStudy st = quadrature_convergence(vol, cfg.market.spot, cfg.market.rate, cfg.market.div, T,
                                                           world_vix_setup(cfg).strikes);
        const double t = elapsed(t0);
        d = "slope=" + num(st.fitted_slope) + " runtime=" + num(t);
        return st.fitted_slope >= -2.3 && st.fitted_slope <= -1.7 && t < 30.0;
    });

    criterion(3, "dupire_flat_recovery", [&](std::string& d) {
        const auto t0 = Clock::now();
        const VolSurface s = build_surface(cfg);
        std::vector<double> mats;
        for (const auto& sl : s.slices()) mats.push_back(sl.maturity_T);
        const DupireStudy ds = dupire_flat_study(0.2, cfg.market.spot, cfg.market.rate, cfg.market.div,
                                                 world_vix_setup(cfg).strikes, mats, {1, 2, 4}, cfg.localvol.chi_floor);
        const double t = elapsed(t0);
        d = "max_vol_error=" + num(ds.max_vol_error.front()) + " order=" + num(ds.order.fitted_slope) +
            " grid=" + std::to_string(world_vix_setup(cfg).strikes.size()) + "x" + std::to_string(mats.size()) +
            " runtime=" + num(t);
        return ds.max_vol_error.front() <= 1e-2 && ds.order.fitted_slope >= 1.7 && t < 60.0;
    });

    criterion(4, "strong_order", [&](std::string& d) {
        const auto t0 = Clock::now();
        const SimConfig sim = cfg.simulation;
        const ConvergenceStudy st = strong_order_study(smooth_test_vol, cfg.market.spot, cfg.market.rate, cfg.market.div,
                                                       sim.horizon(), sim.steps(), 10000, cfg.simulation.seed);
        const double t = elapsed(t0);
        d = "order=" + num(st.fitted_slope) + " paths=10000 runtime=" + num(t);
        return st.fitted_slope >= 0.4 && st.fitted_slope <= 0.75 && t < 120.0;
    });

    criterion(5, "cir_proxy", [&](std::string& d) {
        const CirMeanCheck cm = cir_mean_check(cfg.cir, 100000, 10000, cfg.simulation.seed);
        d = "mc=" + num(cm.mc) + " closed=" + num(cm.closed) + " z=" + num(cm.z) +
            " lipschitz_violations=" + std::to_string(cm.lipschitz_violations) +
            " global_bound_violations=" + std::to_string(cm.global_lipschitz_violations);
        return cm.z <= 3.0 && cm.lipschitz_violations == 0;
    });

    criterion(6, "qp_certificates", [&](std::string& d) {
        std::mt19937_64 gen(cfg.simulation.seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const ControllerParams& p = cfg.controller;
        std::size_t infeasible_origin = 0, not_optimal = 0;
        double worst_kkt = 0.0, worst_perm = 0.0;
        for (int t = 0; t < 10000; ++t) {
            ControllerState st;
            st.h_s = 1.5 * p.inv_box_s * u(gen);
            st.h_v = 1.5 * p.inv_box_v * u(gen);
            st.cooldown_v = t % 3;
            const Eigen::Vector2d e(3.0 * u(gen), 60.0 * u(gen));
            const double rho = u(gen);
            QpProblem qp = build_step_qp(st, e, p, rho, dynamic_vix_weight(p, 0.5 + 0.5 * u(gen), rho));
            if (!qp.feasible(origin_completion(qp, e, p))) ++infeasible_origin;
            const QpSolution s = solve(qp);
            if (s.status != QpStatus::optimal) {
                ++not_optimal;
                continue;
            }
            worst_kkt = std::max(worst_kkt, verify_kkt(qp, s).max());
            std::shuffle(qp.rows.begin(), qp.rows.end(), gen);
            const QpSolution s2 = solve(qp);
            worst_perm = std::max(worst_perm, (s2.x_star - s.x_star).lpNorm<Eigen::Infinity>());
        }
        d = "max_kkt=" + num(worst_kkt) + " max_perm=" + num(worst_perm) + " origin_infeasible=" +
            std::to_string(infeasible_origin) + " not_optimal=" + std::to_string(not_optimal);
        return not_optimal == 0 && infeasible_origin == 0 && worst_kkt <= 1e-8 && worst_perm <= 1e-8;
    });

    criterion(7, "controller_audits", [&](std::string& d) {
        const auto t0 = Clock::now();
        const World w = build_world(cfg);
        const PathPanel panel = simulate_world(w, cfg.cir, 10, 100);
        const auto res = run_controllers(w, panel, {{"tail_safe", cfg.controller}}, true);
        AuditOptions ao;
        ao.descent_tol = 1e-10;
        ao.expected_steps = w.sim.steps();
        ao.check_dwell = true;
        const AuditReport ar = audit_run(res.front().telemetry, cfg.controller, ao);
        const double t = elapsed(t0);
        d = "paths=" + std::to_string(ar.paths) + " descent=" + std::to_string(ar.count("descent")) +
            " barrier=" + std::to_string(ar.count("barrier")) + " dwell=" + std::to_string(ar.count("dwell")) +
            " turnover=" + std::to_string(ar.count("turnover")) + " runtime=" + num(t);
        return ar.paths == 1000 && ar.count("descent") == 0 && ar.count("barrier") == 0 && ar.count("dwell") == 0 &&
               ar.count("turnover") == 0 && t < 300.0;
    });

    criterion(8, "bootstrap_calibration", [&](std::string& d) {
        // common factor plus exchangeable noise: population ES(a) - ES(b) = -1 exactly
        int covered = 0;
        const int n = 2000;
        for (int rep = 0; rep < 100; ++rep) {
            std::mt19937_64 gen(derive_seed(cfg.metrics.bootstrap_seed, 1000 + static_cast<std::uint64_t>(rep)));
            std::normal_distribution<double> z(0.0, 1.0);
            LossSample a, b;
            for (int i = 0; i < n; ++i) {
                const double c = z(gen);
                a.losses.push_back(c + 0.5 * z(gen));
                b.losses.push_back(c + 0.5 * z(gen) + 1.0);
                a.labels.push_back({0, i});
            }
            b.labels = a.labels;
            const IntervalEstimate ie = paired_bootstrap_delta_es(a, b, cfg.metrics.alpha, 1000,
                                                                  derive_seed(cfg.metrics.bootstrap_seed, 5000 + rep));
            if (ie.covers(-1.0)) ++covered;
        }
        d = "covered=" + std::to_string(covered) + "/100";
        return covered >= 90;
    });

    criterion(9, "directional_checks", [&](std::string& d) {
        WorldConfig c = cfg;
        c.grid.xi_values = {0.5};
        c.grid.rho_values = {-0.6};
        const GridCell cell = run_scenario_grid(c).front();
        const auto rows = run_ablation(c);
        std::size_t full = 0, no_cd = 0, no_micro = 0;
        for (const auto& r : rows) {
            if (r.toggle == "full") full = r.small_dv;
            if (r.toggle == "no_cooldown") no_cd = r.small_dv;
            if (r.toggle == "no_micro_thresholds") no_micro = r.small_dv;
        }
        d = "delta_es=" + num(cell.delta_es.point) + " [" + num(cell.delta_es.ci_low) + "," + num(cell.delta_es.ci_high) +
            "] small_dv full=" + std::to_string(full) + " no_cooldown=" + std::to_string(no_cd) +
            " no_micro_thresholds=" + std::to_string(no_micro);
        return cell.delta_es.point <= 0.0 && no_cd > full && no_micro > full;
    });

    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
