#pragma once

#include "errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

namespace tailsafe {

/// (seed, path) provenance of a loss entry.
struct PoolLabel {
    int seed = 0;
    int path = 0;
    bool operator==(const PoolLabel&) const = default;
};

struct LossSample {
    std::vector<double> losses;  // loss-positive
    std::vector<PoolLabel> labels;

    std::size_t size() const { return losses.size(); }

    void validate() const {
        for (double x : losses)
            if (!std::isfinite(x)) throw ValidationError("loss sample contains non-finite entries");
        if (!labels.empty() && labels.size() != losses.size()) throw ValidationError("label count mismatch");
    }
};

struct IntervalEstimate {
    double point = 0.0;
    double ci_low = 0.0, ci_high = 0.0;
    int resamples = 0;
    std::uint64_t seed = 0;

    bool excludes_zero() const { return ci_high < 0.0 || ci_low > 0.0; }
    bool covers(double v) const { return ci_low <= v && v <= ci_high; }
};

struct VarEs {
    double var = 0.0;
    double es = 0.0;
};

/// VaR = ceil(alpha n)-th order statistic (1-indexed); ES = mean of losses >= VaR.
inline VarEs var_es(std::vector<double> losses, double alpha) {
    if (losses.empty()) throw ValidationError("empty loss sample");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("alpha must lie in (0,1)");
    std::sort(losses.begin(), losses.end());
    const std::size_t n = losses.size();
    const auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(n) - 1e-12));
    const std::size_t idx = std::clamp<std::size_t>(k, 1, n) - 1;
    VarEs r;
    r.var = losses[idx];
    // first element equal to VaR so ties below idx are included
    const auto first = std::lower_bound(losses.begin(), losses.end(), r.var);
    double s = 0.0;
    for (auto it = first; it != losses.end(); ++it) s += *it;
    r.es = s / static_cast<double>(losses.end() - first);
    return r;
}

inline VarEs var_es(const LossSample& s, double alpha) {
    s.validate();
    if (s.size() < 2) throw ValidationError("loss sample needs at least 2 entries");
    return var_es(s.losses, alpha);
}

/// Percentile of a sorted vector by linear interpolation (type 7).
inline double percentile_sorted(const std::vector<double>& v, double p) {
    if (v.empty()) throw ValidationError("percentile of empty vector");
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

using Statistic = std::function<double(const std::vector<double>&)>;

inline double mean_of(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

/// Percentile 95% bootstrap CI; resampling stream independent of the simulation streams.
inline IntervalEstimate bootstrap_ci(const std::vector<double>& sample, const Statistic& stat, int resamples,
                                     std::uint64_t seed, double level = 0.95) {
    if (resamples < 100) throw ParameterError("bootstrap needs at least 100 resamples");
    if (sample.empty()) throw ValidationError("empty sample");
    IntervalEstimate out;
    out.point = stat(sample);
    out.resamples = resamples;
    out.seed = seed;
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<std::size_t> pick(0, sample.size() - 1);
    std::vector<double> reps(static_cast<std::size_t>(resamples)), buf(sample.size());
    for (auto& r : reps) {
        for (auto& b : buf) b = sample[pick(gen)];
        r = stat(buf);
    }
    std::sort(reps.begin(), reps.end());
    out.ci_low = percentile_sorted(reps, 0.5 * (1.0 - level));
    out.ci_high = percentile_sorted(reps, 1.0 - 0.5 * (1.0 - level));
    return out;
}

class PairingError : public ProtocolError {
public:
    using ProtocolError::ProtocolError;
};

/// CI for ES_a - ES_b resampling aligned (seed, path) indices jointly.
inline IntervalEstimate paired_bootstrap_delta_es(const LossSample& a, const LossSample& b, double alpha, int resamples,
                                                  std::uint64_t seed, double level = 0.95) {
    if (a.size() != b.size()) throw PairingError("paired samples differ in size");
    if (a.labels != b.labels) throw PairingError("paired samples differ in (seed, path) labels");
    if (resamples < 100) throw ParameterError("bootstrap needs at least 100 resamples");
    a.validate();
    b.validate();
    IntervalEstimate out;
    out.point = var_es(a.losses, alpha).es - var_es(b.losses, alpha).es;
    out.resamples = resamples;
    out.seed = seed;
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<std::size_t> pick(0, a.size() - 1);
    std::vector<double> reps(static_cast<std::size_t>(resamples)), ba(a.size()), bb(a.size());
    for (auto& r : reps) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::size_t j = pick(gen);
            ba[i] = a.losses[j];
            bb[i] = b.losses[j];
        }
        r = var_es(ba, alpha).es - var_es(bb, alpha).es;
    }
    std::sort(reps.begin(), reps.end());
    out.ci_low = percentile_sorted(reps, 0.5 * (1.0 - level));
    out.ci_high = percentile_sorted(reps, 1.0 - 0.5 * (1.0 - level));
    return out;
}

}  // namespace tailsafe
