#pragma once

#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <numbers>

namespace tailsafe::bs {

inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Inverse of the standard normal cdf; u must lie in (0,1).
inline double norm_inv(double u) { return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * u); }

/// Forward-measure Black-Scholes price. `df` is the discount factor e^{-rT}.
inline double price(double forward, double strike, double maturity, double vol, double df, bool is_call) {
    const double sd = vol * std::sqrt(maturity);
    if (sd <= 0.0) {
        const double intrinsic = is_call ? forward - strike : strike - forward;
        return df * std::max(intrinsic, 0.0);
    }
    const double d1 = (std::log(forward / strike) + 0.5 * sd * sd) / sd;
    const double d2 = d1 - sd;
    if (is_call) return df * (forward * norm_cdf(d1) - strike * norm_cdf(d2));
    return df * (strike * norm_cdf(-d2) - forward * norm_cdf(-d1));
}

/// Vega with respect to sigma, forward form: df * F * sqrt(T) * phi(d1).
inline double vega(double forward, double strike, double maturity, double vol, double df) {
    const double sd = vol * std::sqrt(maturity);
    if (sd <= 0.0) return 0.0;
    const double d1 = (std::log(forward / strike) + 0.5 * sd * sd) / sd;
    return df * forward * std::sqrt(maturity) * norm_pdf(d1);
}

/// Spot delta of a call: e^{-qT} N(d1).
inline double call_delta(double spot, double strike, double maturity, double vol, double rate, double div) {
    const double fwd = spot * std::exp((rate - div) * maturity);
    const double sd = vol * std::sqrt(maturity);
    if (sd <= 0.0) return fwd > strike ? std::exp(-div * maturity) : 0.0;
    const double d1 = (std::log(fwd / strike) + 0.5 * sd * sd) / sd;
    return std::exp(-div * maturity) * norm_cdf(d1);
}

}  // namespace tailsafe::bs
