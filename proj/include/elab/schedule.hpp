#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/tensor.hpp"

namespace elab {

enum class ScheduleKind { Linear, Cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

inline std::string to_string(ScheduleKind k) {
    return k == ScheduleKind::Linear ? "linear" : "cosine";
}

/// Diffusion variance schedule. betas[t-1] is beta_t for t in [1, T];
/// alpha_bars[t-1] is the running product of (1 - beta_s), s <= t.
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::Linear;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }
    /// alpha_bar extended with the t=0 convention (identity, no noising).
    double alpha_bar0(int t) const { return t == 0 ? 1.0 : alpha_bar(t); }
};

inline NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_min, double beta_max) {
    if (T < 1) throw std::invalid_argument("schedule requires T >= 1");
    if (!(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max))
        throw std::invalid_argument("schedule requires 0 < beta_min <= beta_max < 1");

    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.betas.resize(static_cast<std::size_t>(T));
    s.alpha_bars.resize(static_cast<std::size_t>(T));

    if (kind == ScheduleKind::Linear) {
        for (int t = 0; t < T; ++t) {
            const double f = (T == 1) ? 0.0 : static_cast<double>(t) / (T - 1);
            s.betas[static_cast<std::size_t>(t)] = beta_min + (beta_max - beta_min) * f;
        }
    } else {
        // Nichol & Dhariwal style cosine alpha_bar, betas clamped into [beta_min, beta_max].
        const double eps = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + eps) / (1.0 + eps) * 1.5707963267948966);
            return c * c;
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double ab = f(static_cast<double>(t) / T) / f(0.0);
            double beta = 1.0 - ab / prev;
            beta = std::min(std::max(beta, beta_min), beta_max);
            s.betas[static_cast<std::size_t>(t - 1)] = beta;
            prev = ab;
        }
    }

    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        prod *= (1.0 - s.betas[static_cast<std::size_t>(t)]);
        s.alpha_bars[static_cast<std::size_t>(t)] = prod;
    }
    return s;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, elementwise.
template <class T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) throw std::out_of_range("forward_diffuse: t out of range");
    if (!x0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: shape mismatch");
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
    const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
    Tensor<T> out(x0.shape);
    for (std::size_t i = 0; i < x0.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

}  // namespace elab
