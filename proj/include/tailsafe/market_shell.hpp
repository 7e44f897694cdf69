#pragma once

#include "errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace tailsafe {

/// Log-moneyness window on which shape checks and the teacher are defined.
struct Corridor {
    double k_min = std::log(0.7);
    double k_max = std::log(1.3);

    bool contains(double k) const { return k >= k_min && k <= k_max; }
};

struct SsviSlice {
    double maturity_T = 0.0;
    double theta = 0.0;
    double rho_skew = 0.0;
    double phi_wing = 0.0;

    double g1() const { return 4.0 - phi_wing * theta; }
    double g2() const { return 4.0 * (1.0 - rho_skew * rho_skew) - phi_wing * phi_wing * theta; }
    bool butterfly_ok() const { return g1() >= 0.0 && g2() >= 0.0; }

    void validate() const {
        if (!(maturity_T > 0.0)) throw ValidationError("slice maturity must be positive");
        if (!(theta > 0.0)) throw ValidationError("slice theta must be positive");
        if (!(std::abs(rho_skew) < 1.0)) throw ValidationError("slice rho must lie in (-1,1)");
        if (!(phi_wing >= 0.0)) throw ValidationError("slice phi must be nonnegative");
    }

    double total_variance(double k) const {
        const double pk = phi_wing * k;
        return 0.5 * theta *
               (1.0 + rho_skew * pk + std::sqrt((pk + rho_skew) * (pk + rho_skew) + 1.0 - rho_skew * rho_skew));
    }
};

struct AtmJet {
    double level_L = 0.0;
    double slope_S = 0.0;
    double curvature_C = 0.0;
    double fd_step_h = 0.0;
};

/// Value and first two k-derivatives of a basis function.
struct Jet3 {
    double v = 0.0, d1 = 0.0, d2 = 0.0;
};

using BasisFn = std::function<Jet3(double k, double T)>;

/// Auxiliary teacher term. `fn` is always the jet-orthogonalized form.
struct AuxBasis {
    std::string name;
    BasisFn fn;

    double operator()(double k, double T) const { return fn(k, T).v; }

    /// k^p, p >= 3: already flat to second order at the money.
    static AuxBasis monomial(int p) {
        if (p < 3) throw ParameterError("monomial basis needs p >= 3");
        return {"k^" + std::to_string(p), [p](double k, double) {
                    return Jet3{std::pow(k, p), p * std::pow(k, p - 1), p * (p - 1.0) * std::pow(k, p - 2)};
                }};
    }

    /// Subtracts the second-order Taylor polynomial at k=0 so value, slope and curvature vanish there.
    static AuxBasis orthogonalize(std::string name, BasisFn raw) {
        return {std::move(name), [raw = std::move(raw)](double k, double T) {
                    const Jet3 z = raw(0.0, T);
                    const Jet3 a = raw(k, T);
                    return Jet3{a.v - z.v - z.d1 * k - 0.5 * z.d2 * k * k, a.d1 - z.d1 - z.d2 * k, a.d2 - z.d2};
                }};
    }
};

struct TeacherVol {
    double vol = 0.0;
    bool clamped = false;
};

inline constexpr double kTeacherVolFloor = 1e-4;

/// Shape-preserving closure: ATM jet plus low-rank terms that cannot disturb the jet.
struct AslClosure {
    double maturity_T = 0.0;
    AtmJet jet;
    std::vector<double> aux_coeffs;
    std::vector<AuxBasis> aux_basis;
    double vol_floor = kTeacherVolFloor;
};

inline TeacherVol teacher_vol(const AslClosure& c, double k, double T) {
    double s = c.jet.level_L + c.jet.slope_S * k + 0.5 * c.jet.curvature_C * k * k;
    for (std::size_t j = 0; j < c.aux_coeffs.size(); ++j) s += c.aux_coeffs[j] * c.aux_basis[j](k, T);
    if (s < c.vol_floor) return {c.vol_floor, true};
    return {s, false};
}

inline TeacherVol teacher_vol(const AslClosure& c, double k) { return teacher_vol(c, k, c.maturity_T); }

enum class VolSource { surface, teacher };

class VolSurface {
public:
    VolSurface() = default;
    VolSurface(std::vector<SsviSlice> slices, double spot, double rate, double div, Corridor corridor = {})
        : slices_(std::move(slices)), spot_(spot), rate_(rate), div_(div), corridor_(corridor) {
        if (slices_.empty()) throw ValidationError("surface needs at least one slice");
        if (!(spot_ > 0.0)) throw ValidationError("spot must be positive");
        for (std::size_t i = 0; i < slices_.size(); ++i) {
            slices_[i].validate();
            if (i > 0 && !(slices_[i].maturity_T > slices_[i - 1].maturity_T))
                throw ValidationError("slice maturities must be strictly increasing");
        }
    }

    const std::vector<SsviSlice>& slices() const { return slices_; }
    double spot() const { return spot_; }
    double rate() const { return rate_; }
    double div() const { return div_; }
    const Corridor& corridor() const { return corridor_; }
    double t_min() const { return slices_.front().maturity_T; }
    double t_max() const { return slices_.back().maturity_T; }

    double forward(double T) const { return spot_ * std::exp((rate_ - div_) * T); }

    /// Strict evaluation; throws outside the calibrated maturity range.
    double total_variance(double k, double T) const {
        return interp_in_t(T, [&](std::size_t j) { return slices_[j].total_variance(k); });
    }

    double implied_vol(double k, double T) const { return std::sqrt(total_variance(k, T) / T); }

    /// Flat implied-vol extrapolation outside [t_min, t_max]; used by the dynamics as T_rem shrinks.
    double implied_vol_clamped(double k, double T) const {
        const double Tc = std::clamp(T, t_min(), t_max());
        return implied_vol(k, Tc);
    }

    bool has_teacher() const { return !teacher_.empty(); }
    const std::vector<AslClosure>& teacher() const { return teacher_; }

    void set_teacher(std::vector<AslClosure> closures) {
        if (closures.size() != slices_.size()) throw ValidationError("teacher needs one closure per slice");
        for (std::size_t j = 0; j < closures.size(); ++j) {
            if (std::abs(closures[j].maturity_T - slices_[j].maturity_T) > 1e-14)
                throw ValidationError("teacher closure maturity mismatch");
            if (closures[j].aux_coeffs.size() != closures[j].aux_basis.size())
                throw ValidationError("teacher coefficient/basis size mismatch");
        }
        teacher_ = std::move(closures);
    }

    /// Teacher vol with linear-in-T interpolation of teacher total variance between slices.
    TeacherVol teacher_vol(double k, double T) const {
        if (!has_teacher()) throw ValidationError("surface has no teacher closure");
        bool clamped = false;
        const double w = interp_in_t(T, [&](std::size_t j) {
            const TeacherVol tv = tailsafe::teacher_vol(teacher_[j], k);
            clamped = clamped || tv.clamped;
            return tv.vol * tv.vol * slices_[j].maturity_T;
        });
        return {std::sqrt(w / T), clamped};
    }

    TeacherVol teacher_vol_clamped(double k, double T) const {
        return teacher_vol(k, std::clamp(T, t_min(), t_max()));
    }

    /// Single entry point used by pricing code.
    double vol(VolSource src, double k, double T) const {
        return src == VolSource::surface ? implied_vol_clamped(k, T) : teacher_vol_clamped(k, T).vol;
    }

private:
    template <class F>
    double interp_in_t(double T, F&& w_at) const {
        if (!(T >= t_min() && T <= t_max()))
            throw DomainError("maturity " + std::to_string(T) + " outside calibrated range");
        const auto it = std::lower_bound(slices_.begin(), slices_.end(), T,
                                         [](const SsviSlice& s, double t) { return s.maturity_T < t; });
        const std::size_t j = static_cast<std::size_t>(it - slices_.begin());
        if (it->maturity_T == T) return w_at(j);
        const double Ta = slices_[j - 1].maturity_T, Tb = slices_[j].maturity_T;
        const double lam = (T - Ta) / (Tb - Ta);
        return (1.0 - lam) * w_at(j - 1) + lam * w_at(j);
    }

    std::vector<SsviSlice> slices_;
    double spot_ = 0.0, rate_ = 0.0, div_ = 0.0;
    Corridor corridor_;
    std::vector<AslClosure> teacher_;
};

struct SliceCheck {
    double maturity_T, g1, g2;
    bool butterfly_ok;
};

struct CalendarViolation {
    double k, T_a, T_b, w_a, w_b;
};

struct NoArbReport {
    std::vector<SliceCheck> slices;
    std::vector<CalendarViolation> calendar;
    std::size_t teacher_clamps = 0;

    bool butterfly_ok() const {
        return std::all_of(slices.begin(), slices.end(), [](const SliceCheck& s) { return s.butterfly_ok; });
    }
    bool calendar_ok() const { return calendar.empty(); }
    bool passed() const { return butterfly_ok() && calendar_ok(); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["passed"] = passed();
        j["teacher_clamps"] = teacher_clamps;
        for (const auto& s : slices)
            j["slices"].push_back({{"T", s.maturity_T}, {"g1", s.g1}, {"g2", s.g2}, {"butterfly_ok", s.butterfly_ok}});
        j["calendar_violations"] = nlohmann::json::array();
        for (const auto& c : calendar)
            j["calendar_violations"].push_back({{"k", c.k}, {"T_a", c.T_a}, {"T_b", c.T_b}, {"w_a", c.w_a}, {"w_b", c.w_b}});
        return j;
    }
};

inline std::vector<double> corridor_nodes(const Corridor& c, std::size_t n) {
    std::vector<double> ks(n);
    for (std::size_t i = 0; i < n; ++i)
        ks[i] = c.k_min + (c.k_max - c.k_min) * static_cast<double>(i) / static_cast<double>(n - 1);
    return ks;
}

/// Report-only: per-slice g1/g2, calendar violations on the corridor, teacher vol-floor hits.
inline NoArbReport validate_no_arbitrage(const VolSurface& s, std::size_t n_k = 121) {
    NoArbReport rep;
    for (const auto& sl : s.slices()) rep.slices.push_back({sl.maturity_T, sl.g1(), sl.g2(), sl.butterfly_ok()});
    const auto ks = corridor_nodes(s.corridor(), n_k);
    const auto& sl = s.slices();
    for (std::size_t j = 0; j + 1 < sl.size(); ++j)
        for (double k : ks) {
            const double wa = sl[j].total_variance(k), wb = sl[j + 1].total_variance(k);
            if (wa > wb) rep.calendar.push_back({k, sl[j].maturity_T, sl[j + 1].maturity_T, wa, wb});
        }
    if (s.has_teacher())
        for (const auto& c : s.teacher())
            for (double k : ks)
                if (teacher_vol(c, k).clamped) ++rep.teacher_clamps;
    return rep;
}

/// Replaces theta by its running maximum across maturities, then re-validates every condition.
inline VolSurface enforce_calendar_monotone(const VolSurface& s) {
    auto slices = s.slices();
    double run = 0.0;
    for (auto& sl : slices) {
        run = std::max(run, sl.theta);
        sl.theta = run;
    }
    for (const auto& sl : slices)
        if (!sl.butterfly_ok())
            throw AdjustmentError("slice T=" + std::to_string(sl.maturity_T) +
                                  " fails butterfly after monotone adjustment (g1=" + std::to_string(sl.g1()) +
                                  ", g2=" + std::to_string(sl.g2()) + ")");
    VolSurface out(std::move(slices), s.spot(), s.rate(), s.div(), s.corridor());
    const auto rep = validate_no_arbitrage(out);
    if (!rep.calendar_ok())
        throw AdjustmentError("calendar violation persists between T=" + std::to_string(rep.calendar.front().T_a) +
                              " and T=" + std::to_string(rep.calendar.front().T_b));
    if (s.has_teacher()) {
        auto t = s.teacher();
        out.set_teacher(std::move(t));
    }
    return out;
}

/// Central-difference jet of a smile function of k.
template <class VolFn>
AtmJet extract_atm_jet(VolFn&& vol, const Corridor& c, double h) {
    if (!(h > 0.0)) throw DomainError("jet step must be positive");
    if (!c.contains(3.0 * h) || !c.contains(-3.0 * h)) throw DomainError("jet stencil exceeds corridor");
    const double s0 = vol(0.0), sp = vol(h), sm = vol(-h);
    return {s0, (sp - sm) / (2.0 * h), (sp - 2.0 * s0 + sm) / (h * h), h};
}

inline AtmJet extract_atm_jet(const VolSurface& s, double T, double h) {
    return extract_atm_jet([&](double k) { return s.implied_vol(k, T); }, s.corridor(), h);
}

/// Builds one closure per slice from the SSVI jet; `alphas` pairs with `basis` on every slice.
inline VolSurface build_teacher(const VolSurface& s, double h = 0.01, std::vector<AuxBasis> basis = {},
                                std::vector<double> alphas = {}) {
    if (basis.size() != alphas.size()) throw ValidationError("teacher coefficient/basis size mismatch");
    std::vector<AslClosure> cl;
    for (const auto& sl : s.slices()) {
        const AtmJet jet = extract_atm_jet(s, sl.maturity_T, h);
        if (!(jet.level_L > 0.0)) throw ValidationError("ATM level must be positive");
        cl.push_back({sl.maturity_T, jet, alphas, basis, kTeacherVolFloor});
    }
    VolSurface out = s;
    out.set_teacher(std::move(cl));
    return out;
}

}  // namespace tailsafe
