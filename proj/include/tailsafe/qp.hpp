#pragma once

#include "errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace tailsafe {

/// Affine row a.z <= b (or a.z == b when `equality`).
struct QpRow {
    std::string label;
    Eigen::VectorXd a;
    double b = 0.0;
    bool equality = false;
};

/// min 1/2 z'Hz + f'z  s.t. rows, over z = (trade, slack). H already contains the 2*rho_soft*I slack block.
struct QpProblem {
    Eigen::MatrixXd H;
    Eigen::VectorXd f;
    std::vector<QpRow> rows;
    double rho_soft = 0.0;
    int n_slack = 0;

    int dim() const { return static_cast<int>(f.size()); }
    int n_trade() const { return dim() - n_slack; }

    /// Trade block `Ht`, linear term `ft`; appends `n_slack` penalized slacks with s >= 0 rows.
    static QpProblem make(const Eigen::MatrixXd& Ht, const Eigen::VectorXd& ft, double rho_soft, int n_slack) {
        if (!(rho_soft > 0.0) && n_slack > 0) throw ParameterError("slack penalty must be positive");
        const int nt = static_cast<int>(ft.size()), n = nt + n_slack;
        QpProblem p;
        p.rho_soft = rho_soft;
        p.n_slack = n_slack;
        p.H = Eigen::MatrixXd::Zero(n, n);
        p.H.topLeftCorner(nt, nt) = Ht;
        for (int j = nt; j < n; ++j) p.H(j, j) = 2.0 * rho_soft;
        p.f = Eigen::VectorXd::Zero(n);
        p.f.head(nt) = ft;
        for (int j = 0; j < n_slack; ++j) {
            Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
            a(nt + j) = -1.0;
            p.rows.push_back({"slack" + std::to_string(j + 1) + "_nonneg", a, 0.0, false});
        }
        return p;
    }

    Eigen::VectorXd zero_row() const { return Eigen::VectorXd::Zero(dim()); }

    void add_row(std::string label, Eigen::VectorXd a, double b, bool equality = false) {
        rows.push_back({std::move(label), std::move(a), b, equality});
    }

    /// |c - a.z| <= b  as two rows `<base>_lower` / `<base>_upper`.
    void add_abs_box(const std::string& base, const Eigen::VectorXd& a, double c, double b) {
        add_row(base + "_lower", -a, b - c);
        add_row(base + "_upper", a, b + c);
    }

    bool feasible(const Eigen::VectorXd& z, double tol = 1e-10) const {
        for (const auto& r : rows) {
            const double g = r.a.dot(z) - r.b;
            if (r.equality ? std::abs(g) > tol : g > tol) return false;
        }
        return true;
    }

    double objective(const Eigen::VectorXd& z) const { return 0.5 * z.dot(H * z) + f.dot(z); }
};

enum class QpStatus { optimal, infeasible, numerical_failure };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::infeasible: return "infeasible";
        default: return "numerical_failure";
    }
}

struct QpSolution {
    Eigen::VectorXd z;
    Eigen::VectorXd x_star;
    Eigen::VectorXd s_star;
    std::vector<double> multipliers;  // aligned with problem rows
    std::vector<std::string> active_set;
    double kkt_residual = 0.0;
    QpStatus status = QpStatus::numerical_failure;
    double solve_time = 0.0;  // seconds
    int iterations = 0;
};

struct KktReport {
    double stationarity = 0.0;
    double primal = 0.0;
    double dual = 0.0;
    double complementarity = 0.0;

    double max() const { return std::max({stationarity, primal, dual, complementarity}); }
    bool pass(double tol = 1e-8) const { return max() <= tol; }
};

inline KktReport verify_kkt(const QpProblem& p, const Eigen::VectorXd& z, const std::vector<double>& lam) {
    KktReport r;
    Eigen::VectorXd grad = p.H * z + p.f;
    for (std::size_t i = 0; i < p.rows.size(); ++i) {
        const auto& row = p.rows[i];
        const double l = i < lam.size() ? lam[i] : 0.0;
        grad += l * row.a;
        const double g = row.a.dot(z) - row.b;
        if (row.equality) {
            r.primal = std::max(r.primal, std::abs(g));
        } else {
            r.primal = std::max(r.primal, std::max(g, 0.0));
            r.dual = std::max(r.dual, std::max(-l, 0.0));
            r.complementarity = std::max(r.complementarity, std::abs(l * g));
        }
    }
    r.stationarity = grad.lpNorm<Eigen::Infinity>();
    return r;
}

inline KktReport verify_kkt(const QpProblem& p, const QpSolution& s) { return verify_kkt(p, s.z, s.multipliers); }

namespace detail {

/// Equality-constrained solve on the working set: min 1/2 z'Hz + g'z s.t. A z = b, through the full KKT
/// matrix with iterative refinement (residuals in long double).
struct WorkingSetSolver {
    const Eigen::MatrixXd& H;

    /// Returns false when the working rows are numerically dependent.
    bool solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& rhs_b, const Eigen::VectorXd& g, Eigen::VectorXd& z,
               Eigen::VectorXd& lam) const {
        const Eigen::Index n = H.rows(), w = A.rows();
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + w, n + w);
        K.topLeftCorner(n, n) = H;
        K.topRightCorner(n, w) = A.transpose();
        K.bottomLeftCorner(w, n) = A;
        Eigen::VectorXd rhs(n + w);
        rhs << -g, rhs_b;
        Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
        lu.setThreshold(1e-13);
        if (!lu.isInvertible()) return false;
        Eigen::VectorXd x = lu.solve(rhs);
        using LD = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
        const auto Kl = K.cast<long double>();
        const LD rl = rhs.cast<long double>();
        for (int it = 0; it < 2; ++it) {
            const LD r = rl - Kl * x.cast<long double>();
            x += lu.solve(r.cast<double>());
        }
        z = x.head(n);
        lam = x.tail(w);
        return true;
    }
};

}  // namespace detail

struct QpOptions {
    double tol = 1e-10;
    int max_iter = 500;
};

/// Dual active-set (Goldfarb-Idnani) solver for strictly convex QPs. Equality rows are always
/// in the working set; among equally violated rows the lexicographically lowest label enters first.
inline QpSolution solve(const QpProblem& p, const QpOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = p.dim(), m = static_cast<int>(p.rows.size());
    if (p.H.rows() != n || p.H.cols() != n) throw ValidationError("Hessian shape mismatch");
    for (const auto& r : p.rows)
        if (r.a.size() != n) throw ValidationError("constraint row '" + r.label + "' has wrong width");

    QpSolution sol;
    sol.multipliers.assign(static_cast<std::size_t>(m), 0.0);
    const Eigen::LDLT<Eigen::MatrixXd> Hf(p.H);
    if (Hf.info() != Eigen::Success || !Hf.isPositive() || (Hf.vectorD().array() <= 0.0).any())
        throw ValidationError("Hessian must be positive definite");
    const detail::WorkingSetSolver ws{p.H};

    std::vector<int> work;  // indices into p.rows
    for (int i = 0; i < m; ++i)
        if (p.rows[static_cast<std::size_t>(i)].equality) work.push_back(i);

    const auto gather = [&](const std::vector<int>& idx, Eigen::MatrixXd& A, Eigen::VectorXd& b) {
        A.resize(static_cast<Eigen::Index>(idx.size()), n);
        b.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            A.row(static_cast<Eigen::Index>(k)) = p.rows[static_cast<std::size_t>(idx[k])].a.transpose();
            b(static_cast<Eigen::Index>(k)) = p.rows[static_cast<std::size_t>(idx[k])].b;
        }
    };

    Eigen::VectorXd z, lamW;
    Eigen::MatrixXd A;
    Eigen::VectorXd bw;
    gather(work, A, bw);
    if (!ws.solve(A, bw, p.f, z, lamW)) {
        sol.status = QpStatus::infeasible;
        sol.z = Eigen::VectorXd::Zero(n);
    }

    std::vector<double> lam(static_cast<std::size_t>(m), 0.0);
    const auto sync_lambda = [&] {
        std::fill(lam.begin(), lam.end(), 0.0);
        for (std::size_t k = 0; k < work.size(); ++k) lam[static_cast<std::size_t>(work[k])] = lamW(static_cast<Eigen::Index>(k));
    };
    if (sol.status != QpStatus::infeasible) sync_lambda();

    const auto scale = [&](int i) { return 1.0 + std::abs(p.rows[static_cast<std::size_t>(i)].b); };
    int iter = 0;
    bool done = sol.status == QpStatus::infeasible;
    while (!done) {
        if (++iter > opt.max_iter) {
            sol.status = QpStatus::numerical_failure;
            break;
        }
        // most violated inactive inequality, ties to lowest label
        int q = -1;
        double worst = 0.0;
        for (int i = 0; i < m; ++i) {
            const auto& r = p.rows[static_cast<std::size_t>(i)];
            if (r.equality || std::find(work.begin(), work.end(), i) != work.end()) continue;
            const double v = (r.a.dot(z) - r.b) / scale(i);
            if (v <= opt.tol) continue;
            if (q < 0 || v > worst + 1e-14 ||
                (std::abs(v - worst) <= 1e-14 && r.label < p.rows[static_cast<std::size_t>(q)].label)) {
                q = i;
                worst = v;
            }
        }
        if (q < 0) {
            sol.status = QpStatus::optimal;
            break;
        }

        const Eigen::VectorXd& aq = p.rows[static_cast<std::size_t>(q)].a;
        double lam_q = 0.0;
        for (;;) {
            if (++iter > opt.max_iter) break;
            gather(work, A, bw);
            // direction for a unit increase of lambda_q
            Eigen::VectorXd dz, du;
            if (!ws.solve(A, Eigen::VectorXd::Zero(A.rows()), aq, dz, du)) {
                sol.status = QpStatus::numerical_failure;
                done = true;
                break;
            }
            const double curv = -aq.dot(dz);  // = dz' H dz >= 0
            const double viol = aq.dot(z) - p.rows[static_cast<std::size_t>(q)].b;
            const double t1 = curv > 1e-14 * (1.0 + aq.squaredNorm()) ? viol / curv
                                                                      : std::numeric_limits<double>::infinity();
            double t2 = std::numeric_limits<double>::infinity();
            int drop = -1;
            for (std::size_t k = 0; k < work.size(); ++k) {
                const int i = work[k];
                if (p.rows[static_cast<std::size_t>(i)].equality) continue;
                const double u = du(static_cast<Eigen::Index>(k));
                if (u < -1e-14) {
                    const double t = lam[static_cast<std::size_t>(i)] / (-u);
                    if (t < t2 || (t == t2 && p.rows[static_cast<std::size_t>(i)].label <
                                                  p.rows[static_cast<std::size_t>(drop)].label)) {
                        t2 = t;
                        drop = i;
                    }
                }
            }
            if (!std::isfinite(t1) && !std::isfinite(t2)) {
                sol.status = QpStatus::infeasible;
                done = true;
                break;
            }
            const double t = std::min(t1, t2);
            z += t * dz;
            for (std::size_t k = 0; k < work.size(); ++k)
                lam[static_cast<std::size_t>(work[k])] += t * du(static_cast<Eigen::Index>(k));
            lam_q += t;
            if (t1 <= t2) {
                work.push_back(q);
                gather(work, A, bw);
                // recompute the primal-dual pair on the new working set
                if (!ws.solve(A, bw, p.f, z, lamW)) {
                    sol.status = QpStatus::numerical_failure;
                    done = true;
                    break;
                }
                sync_lambda();
                break;
            }
            lam[static_cast<std::size_t>(drop)] = 0.0;
            work.erase(std::find(work.begin(), work.end(), drop));
        }
        if (iter > opt.max_iter && !done) {
            sol.status = QpStatus::numerical_failure;
            break;
        }
    }

    sol.iterations = iter;
    if (sol.z.size() == 0) sol.z = z;
    if (sol.status != QpStatus::infeasible) {
        sol.z = z;
        sol.multipliers = lam;
    }
    for (int i = 0; i < m; ++i) {
        const auto& r = p.rows[static_cast<std::size_t>(i)];
        if (r.equality || sol.multipliers[static_cast<std::size_t>(i)] > opt.tol) sol.active_set.push_back(r.label);
    }
    std::sort(sol.active_set.begin(), sol.active_set.end());
    const int nt = p.n_trade();
    sol.x_star = sol.z.head(nt);
    sol.s_star = sol.z.tail(p.n_slack);
    sol.kkt_residual = verify_kkt(p, sol).max();
    if (sol.status == QpStatus::optimal && !verify_kkt(p, sol).pass()) sol.status = QpStatus::numerical_failure;
    sol.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return sol;
}

}  // namespace tailsafe
