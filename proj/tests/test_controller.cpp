#include "tailsafe/controller.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace tailsafe;

namespace {

ControllerParams unit_params() {
    ControllerParams p;
    p.alpha_delta = p.alpha_v = 1.0;
    p.alpha_cross = 0.0;
    p.eta_s = p.eta_v = 0.1;
    p.gamma_smooth = 0.0;
    p.tau0 = 1.0;
    p.tau1 = 0.0;
    p.lambda_c = 0.5;
    return p;
}

ControllerParams huge_boxes(ControllerParams p) {
    p.err_box_s = p.err_box_v = p.inv_box_s = p.inv_box_v = 1e6;
    p.rate_s = p.rate_v = p.cvar_box_s = p.cvar_box_v = 1e6;
    return p;
}

}  // namespace

TEST(Ewma, PerfectCorrelationLimit) {
    ControllerState st;
    std::mt19937_64 gen(1);
    std::normal_distribution<double> z;
    for (int i = 0; i < 500; ++i) {
        const double x = z(gen);
        update_ewma(st, x, x, 0.94);
    }
    EXPECT_NEAR(st.rho_hat, 1.0, 1e-12);
}

TEST(Ewma, DegenerateVarianceGivesZero) {
    ControllerState st;
    for (int i = 0; i < 50; ++i) update_ewma(st, 0.01 * (i % 3 - 1), 0.0, 0.94);
    EXPECT_EQ(st.rho_hat, 0.0);
    EXPECT_THROW(update_ewma(st, 0, 0, 1.0), ParameterError);
}

TEST(Ewma, IndependentDrawsCentreOnZero) {
    ControllerState st;
    std::mt19937_64 gen(3);
    std::normal_distribution<double> z;
    double acc = 0.0;
    for (int i = 0; i < 10'000; ++i) {
        update_ewma(st, z(gen), z(gen), 0.94);
        acc += st.rho_hat;
        EXPECT_LE(std::abs(st.rho_hat), 1.0);
    }
    EXPECT_LT(std::abs(acc / 10'000), 0.1);
}

TEST(DynamicWeight, Examples) {
    ControllerParams p;
    p.w_vix_base = 0.8;
    p.lambda_rho = 1.5;
    EXPECT_DOUBLE_EQ(dynamic_vix_weight(p, 1.0, 0.9), 0.8);
    EXPECT_DOUBLE_EQ(dynamic_vix_weight(p, 0.3, 0.0), 0.8);
    EXPECT_NEAR(dynamic_vix_weight(p, 0.25, 0.8), 0.8 / 1.9, 1e-15);
}

TEST(Ntb, Examples) {
    ControllerParams p;
    p.b_v = 1.0;
    p.tau_tail = 0.5;
    p.tau_rho = 0.25;
    p.tau_pred = 0.3;
    EXPECT_TRUE(ntb_check({0.0, 0.0}, p, 0.5, 0.2, 0.0).inside);
    EXPECT_NEAR(ntb_check({0.0, 0.1}, p, 0.0, -0.4, -1.0).b_v_eff, 2.145, 1e-14);
    EXPECT_NEAR(ntb_check({0.0, 0.1}, p, 0.0, -0.4, 1.0).b_v_eff, 1.65, 1e-14);
    EXPECT_TRUE(ntb_check({p.b_delta, 0.0}, p, 1.0, 0.0, 0.0).inside);
    EXPECT_FALSE(ntb_check({1.0001 * p.b_delta, 0.0}, p, 1.0, 0.0, 0.0).inside);
    p.use_guards = false;
    EXPECT_DOUBLE_EQ(ntb_check({0.0, 0.1}, p, 0.0, -0.4, -1.0).b_v_eff, 1.0);
}

TEST(Gate, Examples) {
    ControllerParams p = unit_params();
    const GateResult a = gate_check({2.0, 0.0}, {2.0, 0.0}, p, 1.0, 0.0);
    EXPECT_DOUBLE_EQ(a.risk_drop, 2.0);
    EXPECT_DOUBLE_EQ(a.cost, 0.4);
    EXPECT_TRUE(a.accept);
    p.tau0 = 6.0;
    EXPECT_FALSE(gate_check({2.0, 0.0}, {2.0, 0.0}, p, 1.0, 0.0).accept);
    const GateResult z = gate_check({2.0, 0.0}, {0.0, 0.0}, unit_params(), 1.0, 0.0);
    EXPECT_EQ(z.risk_drop, 0.0);
    EXPECT_EQ(z.cost, 0.0);
    EXPECT_FALSE(z.accept);
}

TEST(Projection, AxisAndDiagonal) {
    const double bd = 0.03, bv = 0.7;
    EXPECT_TRUE(project_to_band({2 * bd, 0}, bd, bv).isApprox(Eigen::Vector2d(bd, 0)));
    EXPECT_TRUE(project_to_band({0, 3 * bv}, bd, bv).isApprox(Eigen::Vector2d(0, 2 * bv)));
    const Eigen::Vector2d e(std::sqrt(2.0), std::sqrt(2.0));
    EXPECT_TRUE(project_to_band(e, 1, 1).isApprox(e / 2));
    const Eigen::Vector2d x = project_to_band({0.1, -2.0}, bd, bv), p = Eigen::Vector2d(0.1, -2.0) - x;
    EXPECT_NEAR(std::pow(p(0) / bd, 2) + std::pow(p(1) / bv, 2), 1.0, 1e-12);
    EXPECT_THROW(project_to_band({0.0, 0.1}, bd, bv), ValidationError);
}

TEST(StepQp, CooldownPinsVixLeg) {
    ControllerState st;
    st.cooldown_v = 2;
    const QpProblem qp = build_step_qp(st, {0.5, 5.0}, ControllerParams{}, 0.3, 1.5);
    EXPECT_EQ(qp.rows.back().label, "cooldown_V");
    EXPECT_TRUE(qp.rows.back().equality);
    const QpSolution s = solve(qp);
    EXPECT_EQ(s.x_star(1), 0.0);
}

TEST(StepQp, SeparableRidgeTracking) {
    const ControllerParams p = huge_boxes(unit_params());
    const Eigen::Vector2d e(0.8, -3.0);
    const double wv = 2.5;
    const QpSolution s = solve(build_step_qp(ControllerState{}, e, p, 0.4, wv));
    EXPECT_NEAR(s.x_star(0), 1.0 * e(0) / 1.1, 1e-12);
    EXPECT_NEAR(s.x_star(1), wv * e(1) / (wv + 0.1), 1e-12);
}

TEST(StepQp, ZeroErrorZeroTrade) {
    const QpSolution s = solve(build_step_qp(ControllerState{}, {0.0, 0.0}, ControllerParams{}, 0.2, 1.0));
    EXPECT_EQ(s.x_star.norm(), 0.0);
}

TEST(StepQp, LabelsAndPsdCheck) {
    const QpProblem qp = build_step_qp(ControllerState{}, {0.1, 1.0}, ControllerParams{}, 0.0, 1.0);
    std::vector<std::string> labels;
    for (const auto& r : qp.rows) labels.push_back(r.label);
    for (const char* l : {"errS_lower", "errV_upper", "invS_upper", "invV_lower", "rate_S_upper", "rate_V_lower",
                          "cvarS_upper", "cvarV_lower", "slack1_nonneg"})
        EXPECT_NE(std::find(labels.begin(), labels.end(), l), labels.end()) << l;
    ControllerParams p;
    p.alpha_cross = 100.0;
    EXPECT_THROW(build_step_qp(ControllerState{}, {0.1, 1.0}, p, 1.0, 1.0), ParameterError);
}

TEST(StepQp, OriginFeasibleForControllerProblems) {
    std::mt19937_64 gen(12);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const ControllerParams p;
    for (int t = 0; t < 2000; ++t) {
        ControllerState st;
        st.h_s = 1.5 * p.inv_box_s * u(gen);  // may start outside the safe set
        st.h_v = 1.5 * p.inv_box_v * u(gen);
        st.cooldown_v = t % 3;
        const Eigen::Vector2d e(3.0 * u(gen), 60.0 * u(gen));
        const double rho = u(gen);
        const QpProblem qp = build_step_qp(st, e, p, rho, dynamic_vix_weight(p, 0.5, rho));
        EXPECT_TRUE(qp.feasible(origin_completion(qp, e, p)));
        const QpSolution s = solve(qp);
        ASSERT_EQ(s.status, QpStatus::optimal);
        EXPECT_TRUE(verify_kkt(qp, s).pass());
    }
}

TEST(MicroThresholds, Examples) {
    const ControllerParams p;
    const double w = 0.4;
    EXPECT_EQ(apply_micro_thresholds({0.5 * p.s_min(w), 1.0}, w, p)(0), 0.0);
    const Eigen::Vector2d big(1.0, 5.0);
    EXPECT_EQ(apply_micro_thresholds(big, w, p), big);
    const Eigen::Vector2d edge(p.s_min(w), -p.v_min(w));
    EXPECT_EQ(apply_micro_thresholds(edge, w, p), edge);
}

TEST(Step, OriginIsInaction) {
    ControllerState st;
    st.cooldown_v = 2;
    const StepResult r = controller_step(st, {0.0, 0.0}, {0.01, 0.3}, ControllerParams{}, 0.1);
    EXPECT_EQ(r.telemetry.decision, Decision::ntb_inaction);
    EXPECT_EQ(r.trade.norm(), 0.0);
    EXPECT_EQ(st.h_s, 0.0);
    EXPECT_EQ(st.cooldown_v, 1);
    EXPECT_NE(st.ewma.var_s, 0.0);
    EXPECT_THROW(controller_step(st, {}, {}, ControllerParams{}, -1.0), DomainError);
}

TEST(Step, CooldownBlocksVixLeg) {
    ControllerParams p;
    ControllerState st;
    const StepResult a = controller_step(st, {0.0, 20.0}, {}, p, 0.1, 0);
    ASSERT_EQ(a.telemetry.decision, Decision::traded);
    ASSERT_NE(a.trade(1), 0.0);
    EXPECT_EQ(st.cooldown_v, p.cooldown_steps);
    for (int n = 1; n <= p.cooldown_steps; ++n) {
        const StepResult b = controller_step(st, {0.5, 40.0}, {}, p, 0.1, n);
        EXPECT_EQ(b.trade(1), 0.0);
    }
    EXPECT_EQ(st.cooldown_v, 0);
    EXPECT_NE(controller_step(st, {0.5, 40.0}, {}, p, 0.1, 3).trade(1), 0.0);
}

TEST(Step, RandomRunsKeepDescentBarrierAndDwell) {
    std::mt19937_64 gen(77);
    std::normal_distribution<double> z;
    ControllerParams p;
    for (int run = 0; run < 4; ++run) {
        ControllerState st;
        double ds = 0.5, kv = 10.0;
        int last_dv = -1000;
        for (int n = 0; n < 2500; ++n) {
            ds = std::clamp(ds + 0.05 * z(gen), -3.0, 3.0);
            kv = std::clamp(kv + 2.0 * z(gen), -80.0, 80.0);
            const double T = 0.2 * (1.0 - (n % 250) / 250.0);
            const StepResult r = controller_step(st, {ds, kv}, {0.01 * z(gen), z(gen)}, p, T, n);
            const TelemetryRecord& t = r.telemetry;
            if (t.decision == Decision::traded) {
                EXPECT_LE(t.risk_qp, t.risk_before - (t.tau_w - p.lambda_c) * t.cost_qp + 1e-10);
                EXPECT_LT(t.risk_after, t.risk_before);
            }
            EXPECT_LE(std::abs(st.h_s), p.inv_box_s + 1e-9);
            EXPECT_LE(std::abs(st.h_v), p.inv_box_v + 1e-9);
            if (r.trade(1) != 0.0) {
                EXPECT_GE(n - last_dv, p.cooldown_steps + 1);
                last_dv = n;
            }
        }
    }
}

TEST(Telemetry, JsonRoundTrip) {
    ControllerState st;
    const StepResult r = controller_step(st, {0.4, 15.0}, {0.01, 0.2}, ControllerParams{}, 0.1, 7);
    const TelemetryRecord b = TelemetryRecord::from_json(r.telemetry.to_json());
    EXPECT_EQ(b.to_json(), r.telemetry.to_json());
    auto j = r.telemetry.to_json();
    j["decision"] = "bogus";
    EXPECT_THROW(TelemetryRecord::from_json(j), ValidationError);
}

TEST(Params, Validation) {
    ControllerParams p;
    EXPECT_NO_THROW(p.validate());
    p.lambda_c = p.tau0;
    EXPECT_THROW(p.validate(), ParameterError);
    p = ControllerParams{};
    p.alpha_cross = 1e3;
    EXPECT_THROW(p.validate(), ParameterError);
    p = ControllerParams{};
    p.cooldown_steps = 0;
    EXPECT_THROW(p.validate(), ParameterError);
}
