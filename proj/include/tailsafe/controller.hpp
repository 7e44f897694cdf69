#pragma once

#include "errors.hpp"
#include "qp.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace tailsafe {

struct ControllerParams {
    double alpha_delta = 3600.0;
    double alpha_v = 2.0;
    double alpha_cross = -1.0;  // negative: 0.1 * sqrt(alpha_delta * alpha_v)
    double eta_s = 5.0;
    double eta_v = 0.1;
    double gamma_smooth = 0.0;
    double w_vix_base = 2.0;
    double lambda_rho = 1.5;
    double b_delta = 0.03;
    double b_v = 0.5;
    double tau_tail = 0.5;
    double tau_rho = 0.25;
    double tau_pred = 0.3;
    double tau0 = 1.0;
    double tau1 = 4.0;
    double lambda_c = 0.5;
    double err_box_s = 2.0, err_box_v = 40.0;
    double inv_box_s = 2.0, inv_box_v = 40.0;
    double rate_s = 1.0, rate_v = 15.0;
    double cvar_box_s = 0.5, cvar_box_v = 10.0;
    double rho_soft = 1e4;
    double cbf_alpha = 0.5;  // decay rate of the hard error/inventory barriers
    double s_min0 = 0.005;
    double v_min0 = 0.25;
    int cooldown_steps = 2;
    double ewma_lambda = 0.94;
    double T0 = 60.0 / 365.0;

    // pipeline toggles (the baseline controller switches the first four off)
    bool use_guards = true;
    bool dynamic_weight = true;
    bool micro_thresholds = true;
    bool cooldown = true;

    double cross() const { return alpha_cross < 0.0 ? 0.1 * std::sqrt(alpha_delta * alpha_v) : alpha_cross; }
    double tau_w(double w) const { return tau0 + tau1 * (1.0 - w); }
    double s_min(double w) const { return s_min0 * (1.0 + (1.0 - w)); }
    double v_min(double w) const { return v_min0 * (1.0 + (1.0 - w)); }

    void validate() const {
        const auto pos = [](double v, const char* n) {
            if (!(v > 0.0)) throw ParameterError(std::string(n) + " must be positive");
        };
        pos(alpha_delta, "alpha_delta");
        pos(alpha_v, "alpha_v");
        pos(eta_s, "eta_s");
        pos(eta_v, "eta_v");
        pos(w_vix_base, "w_vix_base");
        pos(lambda_rho, "lambda_rho");
        pos(b_delta, "b_delta");
        pos(b_v, "b_v");
        pos(tau0, "tau0");
        pos(lambda_c, "lambda_c");
        pos(err_box_s, "err_box_s");
        pos(err_box_v, "err_box_v");
        pos(inv_box_s, "inv_box_s");
        pos(inv_box_v, "inv_box_v");
        pos(rate_s, "rate_s");
        pos(rate_v, "rate_v");
        pos(cvar_box_s, "cvar_box_s");
        pos(cvar_box_v, "cvar_box_v");
        pos(rho_soft, "rho_soft");
        pos(s_min0, "s_min0");
        pos(v_min0, "v_min0");
        pos(T0, "T0");
        if (gamma_smooth < 0.0 || tau_tail < 0.0 || tau_rho < 0.0 || tau_pred < 0.0 || tau1 < 0.0)
            throw ParameterError("guard gains, tau1 and gamma must be nonnegative");
        if (!(lambda_c < tau0)) throw ParameterError("lambda_c must be below tau0");
        if (!(cbf_alpha >= 0.0 && cbf_alpha < 1.0)) throw ParameterError("cbf_alpha must lie in [0,1)");
        if (cooldown_steps < 1) throw ParameterError("cooldown_steps must be at least 1");
        if (!(ewma_lambda > 0.0 && ewma_lambda < 1.0)) throw ParameterError("ewma_lambda must lie in (0,1)");
        const double c = cross();
        if (c * c > alpha_delta * alpha_v) throw ParameterError("risk matrix not PSD: alpha_cross^2 > alpha_delta*alpha_v");
    }
};

struct EwmaState {
    double cov = 0.0, var_s = 0.0, var_v = 0.0;
};

struct ControllerState {
    double h_s = 0.0, h_v = 0.0;
    Eigen::Vector2d prev_trade = Eigen::Vector2d::Zero();
    int cooldown_v = 0;
    EwmaState ewma;
    double rho_hat = 0.0;
    double kappa_eff_prev = 0.0;
    bool has_kappa_prev = false;
};

/// Discrete-time barrier: h(next) >= (1 - alpha_eff) h(now) + sigma with h(next) = h + grad.x.
/// alpha_eff drops to 0 outside the safe set so the origin stays feasible.
struct CbfChannel {
    std::string label;
    double h = 0.0;
    Eigen::Vector2d grad = Eigen::Vector2d::Zero();
    double alpha = 0.5;
    double sigma = 0.0;

    double alpha_eff() const { return h >= 0.0 ? alpha : 0.0; }
    /// Row form: -grad.x <= alpha_eff h - sigma.
    double rhs() const { return alpha_eff() * h - sigma; }
};

enum class Decision { ntb_inaction, gate_blocked, traded, cooldown_hold };

inline const char* to_string(Decision d) {
    switch (d) {
        case Decision::ntb_inaction: return "ntb_inaction";
        case Decision::gate_blocked: return "gate_blocked";
        case Decision::traded: return "traded";
        default: return "cooldown_hold";
    }
}

struct TelemetryRecord {
    int step_index = 0;
    Decision decision = Decision::ntb_inaction;
    Eigen::Vector2d trade = Eigen::Vector2d::Zero();
    double risk_before = 0.0, risk_after = 0.0;
    double cost = 0.0;
    std::vector<std::string> active_set;
    std::string tightest_label;
    double rate_util = 0.0;
    double slack_sum = 0.0;
    std::string solver_status = "not_run";
    double solve_time = 0.0;
    // audit context
    double w = 1.0, tau_w = 0.0, w_vix_eff = 0.0, b_v_eff = 0.0, rho_hat = 0.0;
    double e_delta = 0.0, e_v = 0.0;
    double h_s = 0.0, h_v = 0.0;  // after the trade
    double risk_qp = 0.0, cost_qp = 0.0;  // pre-threshold QP trade
    bool descent_veto = false;
    int cooldown_v = 0;

    nlohmann::json to_json() const {
        return {{"step_index", step_index},
                {"decision", to_string(decision)},
                {"trade", {trade(0), trade(1)}},
                {"risk_before", risk_before},
                {"risk_after", risk_after},
                {"cost", cost},
                {"active_set", active_set},
                {"tightest_label", tightest_label},
                {"rate_util", rate_util},
                {"slack_sum", slack_sum},
                {"solver_status", solver_status},
                {"solve_time", solve_time},
                {"w", w},
                {"tau_w", tau_w},
                {"w_vix_eff", w_vix_eff},
                {"b_v_eff", b_v_eff},
                {"rho_hat", rho_hat},
                {"e_delta", e_delta},
                {"e_v", e_v},
                {"h_s", h_s},
                {"h_v", h_v},
                {"risk_qp", risk_qp},
                {"cost_qp", cost_qp},
                {"descent_veto", descent_veto},
                {"cooldown_v", cooldown_v}};
    }

    static TelemetryRecord from_json(const nlohmann::json& j) {
        TelemetryRecord r;
        r.step_index = j.at("step_index").get<int>();
        const std::string d = j.at("decision").get<std::string>();
        if (d == "ntb_inaction") r.decision = Decision::ntb_inaction;
        else if (d == "gate_blocked") r.decision = Decision::gate_blocked;
        else if (d == "traded") r.decision = Decision::traded;
        else if (d == "cooldown_hold") r.decision = Decision::cooldown_hold;
        else throw ValidationError("unknown decision '" + d + "'");
        r.trade = {j.at("trade").at(0).get<double>(), j.at("trade").at(1).get<double>()};
        r.risk_before = j.at("risk_before").get<double>();
        r.risk_after = j.at("risk_after").get<double>();
        r.cost = j.at("cost").get<double>();
        r.active_set = j.at("active_set").get<std::vector<std::string>>();
        r.tightest_label = j.at("tightest_label").get<std::string>();
        r.rate_util = j.at("rate_util").get<double>();
        r.slack_sum = j.at("slack_sum").get<double>();
        r.solver_status = j.at("solver_status").get<std::string>();
        r.solve_time = j.at("solve_time").get<double>();
        r.w = j.at("w").get<double>();
        r.tau_w = j.at("tau_w").get<double>();
        r.w_vix_eff = j.at("w_vix_eff").get<double>();
        r.b_v_eff = j.at("b_v_eff").get<double>();
        r.rho_hat = j.at("rho_hat").get<double>();
        r.e_delta = j.at("e_delta").get<double>();
        r.e_v = j.at("e_v").get<double>();
        r.h_s = j.at("h_s").get<double>();
        r.h_v = j.at("h_v").get<double>();
        r.risk_qp = j.at("risk_qp").get<double>();
        r.cost_qp = j.at("cost_qp").get<double>();
        r.descent_veto = j.at("descent_veto").get<bool>();
        r.cooldown_v = j.at("cooldown_v").get<int>();
        return r;
    }
};

inline void update_ewma(ControllerState& st, double d_s, double d_v, double lambda) {
    if (!(lambda > 0.0 && lambda < 1.0)) throw ParameterError("ewma lambda must lie in (0,1)");
    auto& e = st.ewma;
    e.cov = lambda * e.cov + (1.0 - lambda) * d_s * d_v;
    e.var_s = lambda * e.var_s + (1.0 - lambda) * d_s * d_s;
    e.var_v = lambda * e.var_v + (1.0 - lambda) * d_v * d_v;
    if (e.var_s < 1e-16 || e.var_v < 1e-16) {
        st.rho_hat = 0.0;
        return;
    }
    st.rho_hat = std::clamp(e.cov / std::sqrt(e.var_s * e.var_v), -1.0, 1.0);
}

inline double dynamic_vix_weight(const ControllerParams& p, double w, double rho_hat) {
    return p.w_vix_base / (1.0 + p.lambda_rho * (1.0 - w) * std::abs(rho_hat));
}

/// R(e) = 1/2 [a_D e_D^2 + a_V e_V^2 + 2 a_x rho e_D e_V].
inline double risk(const ControllerParams& p, double rho_hat, const Eigen::Vector2d& e) {
    return 0.5 * (p.alpha_delta * e(0) * e(0) + p.alpha_v * e(1) * e(1) + 2.0 * p.cross() * rho_hat * e(0) * e(1));
}

/// C(x) = x' diag(eta) x + gamma |x - x_prev|^2.
inline double exec_cost(const ControllerParams& p, const Eigen::Vector2d& x, const Eigen::Vector2d& x_prev) {
    return p.eta_s * x(0) * x(0) + p.eta_v * x(1) * x(1) + p.gamma_smooth * (x - x_prev).squaredNorm();
}

struct NtbResult {
    bool inside = true;
    double b_v_eff = 0.0;
};

inline double sgn(double x) { return (x > 0.0) - (x < 0.0); }

inline NtbResult ntb_check(const Eigen::Vector2d& e, const ControllerParams& p, double w, double rho_hat, double dkappa) {
    NtbResult r;
    r.b_v_eff = p.b_v;
    if (p.use_guards) {
        r.b_v_eff *= (1.0 + p.tau_tail * (1.0 - w)) * (1.0 + p.tau_rho * std::abs(rho_hat));
        if (dkappa != 0.0 && sgn(e(1)) != sgn(dkappa)) r.b_v_eff *= 1.0 + p.tau_pred;
    }
    const double a = e(0) / p.b_delta, b = e(1) / r.b_v_eff;
    r.inside = a * a + b * b <= 1.0;
    return r;
}

/// Radial projection of e onto the band boundary; returns the trade e - p.
inline Eigen::Vector2d project_to_band(const Eigen::Vector2d& e, double b_delta, double b_v_eff) {
    const double a = e(0) / b_delta, b = e(1) / b_v_eff;
    const double r = std::sqrt(a * a + b * b);
    if (r <= 1.0) throw ValidationError("project_to_band called inside the band");
    return e * (1.0 - 1.0 / r);
}

struct GateResult {
    bool accept = false;
    double risk_drop = 0.0;
    double cost = 0.0;
    double tau_w = 0.0;
};

inline GateResult gate_check(const Eigen::Vector2d& e, const Eigen::Vector2d& cand, const ControllerParams& p, double w,
                             double rho_hat, const Eigen::Vector2d& x_prev = Eigen::Vector2d::Zero()) {
    GateResult g;
    g.risk_drop = risk(p, rho_hat, e) - risk(p, rho_hat, e - cand);
    g.cost = exec_cost(p, cand, x_prev);
    g.tau_w = p.tau_w(w);
    g.accept = g.risk_drop > g.tau_w * g.cost;
    return g;
}

inline std::vector<CbfChannel> barrier_channels(const ControllerState& st, const Eigen::Vector2d& e,
                                                const ControllerParams& p) {
    const double a = p.cbf_alpha;
    return {
        {"errS_lower", p.err_box_s + e(0), {-1.0, 0.0}, a, 0.0},
        {"errS_upper", p.err_box_s - e(0), {1.0, 0.0}, a, 0.0},
        {"errV_lower", p.err_box_v + e(1), {0.0, -1.0}, a, 0.0},
        {"errV_upper", p.err_box_v - e(1), {0.0, 1.0}, a, 0.0},
        {"invS_lower", p.inv_box_s + st.h_s, {1.0, 0.0}, a, 0.0},
        {"invS_upper", p.inv_box_s - st.h_s, {-1.0, 0.0}, a, 0.0},
        {"invV_lower", p.inv_box_v + st.h_v, {0.0, 1.0}, a, 0.0},
        {"invV_upper", p.inv_box_v - st.h_v, {0.0, -1.0}, a, 0.0},
    };
}

/// Assembles the per-step QP over z = (dS, dV, s1, s2).
inline QpProblem build_step_qp(const ControllerState& st, const Eigen::Vector2d& e, const ControllerParams& p,
                               double rho_hat, double w_vix_eff) {
    const double c = p.cross() * rho_hat;
    if (c * c > p.alpha_delta * w_vix_eff) throw ParameterError("risk matrix W(rho) is not positive semidefinite");
    Eigen::Matrix2d W;
    W << p.alpha_delta, c, c, w_vix_eff;
    Eigen::Matrix2d H = W;
    H(0, 0) += p.eta_s + p.gamma_smooth;
    H(1, 1) += p.eta_v + p.gamma_smooth;
    const Eigen::Vector2d f = -W * e - p.gamma_smooth * st.prev_trade;
    QpProblem qp = QpProblem::make(H, f, p.rho_soft, 2);

    for (const auto& ch : barrier_channels(st, e, p)) {
        Eigen::VectorXd a = qp.zero_row();
        a.head<2>() = -ch.grad;
        qp.add_row(ch.label, a, ch.rhs());
    }
    Eigen::VectorXd ux = qp.zero_row(), uv = qp.zero_row();
    ux(0) = 1.0;
    uv(1) = 1.0;
    qp.add_abs_box("rate_S", ux, 0.0, p.rate_s);
    qp.add_abs_box("rate_V", uv, 0.0, p.rate_v);
    // soft boxes |e - x| <= b + s
    Eigen::VectorXd a;
    a = qp.zero_row();
    a(0) = -1.0;
    a(2) = -1.0;
    qp.add_row("cvarS_upper", a, p.cvar_box_s - e(0));
    a = qp.zero_row();
    a(0) = 1.0;
    a(2) = -1.0;
    qp.add_row("cvarS_lower", a, p.cvar_box_s + e(0));
    a = qp.zero_row();
    a(1) = -1.0;
    a(3) = -1.0;
    qp.add_row("cvarV_upper", a, p.cvar_box_v - e(1));
    a = qp.zero_row();
    a(1) = 1.0;
    a(3) = -1.0;
    qp.add_row("cvarV_lower", a, p.cvar_box_v + e(1));
    if (p.cooldown && st.cooldown_v > 0) qp.add_row("cooldown_V", uv, 0.0, true);
    return qp;
}

/// Origin with the smallest slacks that make the soft boxes hold.
inline Eigen::VectorXd origin_completion(const QpProblem& qp, const Eigen::Vector2d& e, const ControllerParams& p) {
    Eigen::VectorXd z = qp.zero_row();
    z(2) = std::max(0.0, std::abs(e(0)) - p.cvar_box_s);
    z(3) = std::max(0.0, std::abs(e(1)) - p.cvar_box_v);
    return z;
}

inline Eigen::Vector2d apply_micro_thresholds(const Eigen::Vector2d& x, double w, const ControllerParams& p) {
    Eigen::Vector2d out = x;
    if (std::abs(out(0)) < p.s_min(w)) out(0) = 0.0;
    if (std::abs(out(1)) < p.v_min(w)) out(1) = 0.0;
    return out;
}

struct StepTargets {
    double delta_star = 0.0;
    double kappa_eff = 0.0;
};

struct StepMarket {
    double d_s = 0.0;  // spot return for the correlation estimate
    double d_v = 0.0;  // index change
};

struct StepResult {
    Eigen::Vector2d trade = Eigen::Vector2d::Zero();
    TelemetryRecord telemetry;
};

/// Full per-step pipeline; mutates `st` (EWMA, inventories, cooldown, previous trade).
inline StepResult controller_step(ControllerState& st, const StepTargets& tgt, const StepMarket& mkt,
                                  const ControllerParams& p, double T_rem, int step_index = 0) {
    if (!(T_rem >= 0.0)) throw DomainError("remaining maturity must be nonnegative");
    StepResult out;
    TelemetryRecord& tel = out.telemetry;
    tel.step_index = step_index;

    update_ewma(st, mkt.d_s, mkt.d_v, p.ewma_lambda);
    const double rho = st.rho_hat;
    const Eigen::Vector2d e(tgt.delta_star - st.h_s, tgt.kappa_eff - st.h_v);
    const double w = std::clamp(T_rem / p.T0, 0.0, 1.0);
    const double w_eff = p.dynamic_weight ? dynamic_vix_weight(p, w, rho) : p.w_vix_base;
    const double dkappa = st.has_kappa_prev ? tgt.kappa_eff - st.kappa_eff_prev : 0.0;
    st.kappa_eff_prev = tgt.kappa_eff;
    st.has_kappa_prev = true;

    tel.w = w;
    tel.tau_w = p.tau_w(w);
    tel.w_vix_eff = w_eff;
    tel.rho_hat = rho;
    tel.e_delta = e(0);
    tel.e_v = e(1);
    tel.risk_before = risk(p, rho, e);

    const bool cooling = p.cooldown && st.cooldown_v > 0;
    Eigen::Vector2d x = Eigen::Vector2d::Zero();

    const NtbResult ntb = ntb_check(e, p, w, rho, dkappa);
    tel.b_v_eff = ntb.b_v_eff;
    if (ntb.inside) {
        tel.decision = Decision::ntb_inaction;
    } else {
        Eigen::Vector2d cand = project_to_band(e, p.b_delta, ntb.b_v_eff);
        if (cooling) cand(1) = 0.0;
        const GateResult gate = gate_check(e, cand, p, w, rho, st.prev_trade);
        if (!gate.accept) {
            tel.decision = Decision::gate_blocked;
        } else {
            const QpProblem qp = build_step_qp(st, e, p, rho, w_eff);
            const QpSolution sol = solve(qp);
            tel.solver_status = to_string(sol.status);
            tel.solve_time = sol.solve_time;
            if (sol.status != QpStatus::optimal) {
                tel.decision = Decision::gate_blocked;
            } else {
                tel.active_set = sol.active_set;
                double best = -1.0;
                for (std::size_t i = 0; i < qp.rows.size(); ++i)
                    if (sol.multipliers[i] > best && (qp.rows[i].equality || sol.multipliers[i] > 1e-10)) {
                        best = sol.multipliers[i];
                        tel.tightest_label = qp.rows[i].label;
                    }
                tel.slack_sum = sol.s_star.lpNorm<1>();
                const Eigen::Vector2d xq = sol.x_star;
                tel.risk_qp = risk(p, rho, e - xq);
                tel.cost_qp = exec_cost(p, xq, st.prev_trade);
                const double slack_tau = p.tau_w(w) - p.lambda_c;
                const bool qp_descent = tel.risk_qp <= tel.risk_before - slack_tau * tel.cost_qp + 1e-10;
                Eigen::Vector2d xf = p.micro_thresholds ? apply_micro_thresholds(xq, w, p) : xq;
                if (cooling) xf(1) = 0.0;
                const double r_f = risk(p, rho, e - xf);
                const double c_f = exec_cost(p, xf, st.prev_trade);
                const bool final_descent = xf.isZero() || r_f <= tel.risk_before - slack_tau * c_f + 1e-10;
                if (!qp_descent || !final_descent) {
                    tel.decision = Decision::gate_blocked;
                    tel.descent_veto = true;
                } else if (xf.isZero()) {
                    tel.decision = Decision::cooldown_hold;
                } else {
                    tel.decision = Decision::traded;
                    x = xf;
                }
            }
        }
    }

    if (x(1) != 0.0 && p.cooldown)
        st.cooldown_v = p.cooldown_steps;
    else if (st.cooldown_v > 0)
        --st.cooldown_v;

    st.h_s += x(0);
    st.h_v += x(1);
    tel.trade = x;
    tel.risk_after = risk(p, rho, e - x);
    tel.cost = x.isZero() ? 0.0 : exec_cost(p, x, st.prev_trade);
    tel.rate_util = (x - st.prev_trade).norm() / std::max(p.rate_s, p.rate_v);
    tel.h_s = st.h_s;
    tel.h_v = st.h_v;
    tel.cooldown_v = st.cooldown_v;
    st.prev_trade = x;
    out.trade = x;
    return out;
}

}  // namespace tailsafe
