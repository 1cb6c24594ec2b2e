#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/diffusion_model.hpp"
#include "elab/tensor.hpp"

namespace elab {

enum class GuidanceMode { None, Cfg, NegativePrompt, Sld };

inline std::string to_string(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::None: return "none";
        case GuidanceMode::Cfg: return "cfg";
        case GuidanceMode::NegativePrompt: return "negative_prompt";
        case GuidanceMode::Sld: return "sld";
    }
    return "?";
}

inline GuidanceMode guidance_mode_from_string(const std::string& s) {
    if (s == "none") return GuidanceMode::None;
    if (s == "cfg") return GuidanceMode::Cfg;
    if (s == "negative_prompt") return GuidanceMode::NegativePrompt;
    if (s == "sld") return GuidanceMode::Sld;
    throw std::invalid_argument("unknown guidance mode: " + s);
}

/// Safety-guidance hyperparameters (threshold, scale, momentum, warm-up).
struct SldParams {
    double mu = 3.0;          // guidance scale replacing alpha in the SLD combine
    double s_S = 1000.0;      // element-wise safety scale
    double lambda_safe = 1.0; // element threshold
    double s_m = 0.5;         // momentum scale in [0,1]
    double zeta_m = 0.7;      // momentum decay in [0,1)
    int delta = 0;            // warm-up steps with the safety term suppressed

    void validate() const {
        if (s_m < 0.0 || s_m > 1.0) throw std::invalid_argument("sld: s_m must be in [0,1]");
        if (zeta_m < 0.0 || zeta_m >= 1.0) throw std::invalid_argument("sld: zeta_m must be in [0,1)");
        if (lambda_safe < 0.0) throw std::invalid_argument("sld: lambda_safe must be >= 0");
        if (delta < 0) throw std::invalid_argument("sld: delta must be >= 0");
    }
};

enum class SldVariant { Weak, Medium, Strong, Max };

inline SldVariant sld_variant_from_string(const std::string& s) {
    if (s == "weak") return SldVariant::Weak;
    if (s == "medium") return SldVariant::Medium;
    if (s == "strong") return SldVariant::Strong;
    if (s == "max") return SldVariant::Max;
    throw std::invalid_argument("unknown sld variant: " + s);
}

inline std::string to_string(SldVariant v) {
    switch (v) {
        case SldVariant::Weak: return "weak";
        case SldVariant::Medium: return "medium";
        case SldVariant::Strong: return "strong";
        case SldVariant::Max: return "max";
    }
    return "?";
}

/// Default parameter ladder. Max is the published configuration; the other
/// three form a documented descending ladder and can be overridden from the
/// run config (see configs/default.json).
inline SldParams sld_variant(SldVariant v, double mu = 3.0) {
    SldParams p;
    p.mu = mu;
    switch (v) {
        case SldVariant::Weak:
            p.s_S = 200.0;
            p.delta = 10;
            p.lambda_safe = 1.0;
            p.s_m = 0.0;
            p.zeta_m = 0.0;
            break;
        case SldVariant::Medium:
            p.s_S = 1000.0;
            p.delta = 5;
            p.lambda_safe = 1.0;
            p.s_m = 0.3;
            p.zeta_m = 0.4;
            break;
        case SldVariant::Strong:
            p.s_S = 2500.0;
            p.delta = 2;
            p.lambda_safe = 1.0;
            p.s_m = 0.5;
            p.zeta_m = 0.7;
            break;
        case SldVariant::Max:
            p.s_S = 5000.0;
            p.delta = 0;
            p.lambda_safe = 1.0;
            p.s_m = 0.5;
            p.zeta_m = 0.7;
            break;
    }
    return p;
}

/// Declarative description of the per-step score arithmetic.
template <class T>
struct GuidanceSpecT {
    GuidanceMode mode = GuidanceMode::None;
    double alpha = 3.0;                       // CFG / NP scale
    std::optional<nn::Cond<T>> neg_condition; // NP negative / SLD safety concept c_S
    SldParams sld;

    void validate() const {
        if (mode == GuidanceMode::NegativePrompt && !neg_condition)
            throw std::invalid_argument("negative_prompt guidance requires neg_condition");
        if (mode == GuidanceMode::Sld) {
            if (!neg_condition) throw std::invalid_argument("sld guidance requires neg_condition (safety concept)");
            sld.validate();
        }
    }
};

/// Per-trajectory safety-guidance state: the momentum tensor and the count
/// of guided steps taken. Never share one state across trajectories.
template <class T>
struct SldStateT {
    Tensor<T> momentum;  // zero until first use; shape of the noise prediction
    int steps_taken = 0;

    void ensure_shape(const std::vector<int>& shape) {
        if (momentum.empty()) momentum = Tensor<T>(shape);
        else if (momentum.shape != shape)
            throw std::invalid_argument("sld state shape mismatch");
    }
};

// ---------------------------------------------------------------------------
// Score arithmetic. All combines run in double so algebraic reductions
// (alpha = 1, gamma = 0, null negative) are bit-exact on float tensors.
// ---------------------------------------------------------------------------

/// base + scale * ((c - base) - gamma); gamma may be null (treated as zero).
template <class T>
Tensor<T> guidance_combine(const Tensor<T>& base, const Tensor<T>& c, double scale, const Tensor<T>* gamma = nullptr) {
    base.require_same(c, "guidance_combine");
    if (gamma) base.require_same(*gamma, "guidance_combine(gamma)");
    Tensor<T> out(base.shape);
    for (std::size_t i = 0; i < base.size(); ++i) {
        const double u = static_cast<double>(base.v[i]);
        const double d = static_cast<double>(c.v[i]) - u;
        const double g = gamma ? static_cast<double>(gamma->v[i]) : 0.0;
        out.v[i] = static_cast<T>(u + scale * (d - g));
    }
    return out;
}

/// eps_u + alpha (eps_c - eps_u)
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& eps_u, const Tensor<T>& eps_c, double alpha) {
    return guidance_combine(eps_u, eps_c, alpha);
}

/// eps_n + alpha (eps_c - eps_n): the unconditional score replaced by the
/// negative-concept score.
template <class T>
Tensor<T> np_combine(const Tensor<T>& eps_n, const Tensor<T>& eps_c, double alpha) {
    return guidance_combine(eps_n, eps_c, alpha);
}

/// Element-wise safety scale: where |eps_c - eps_n| <= lambda the element is
/// max(1, |s_S (eps_c - eps_n)|), elsewhere 0.
template <class T>
Tensor<T> sld_beta(const Tensor<T>& eps_c, const Tensor<T>& eps_n, double s_S, double lambda_safe) {
    eps_c.require_same(eps_n, "sld_beta");
    Tensor<T> out(eps_c.shape);
    for (std::size_t i = 0; i < eps_c.size(); ++i) {
        const double d = static_cast<double>(eps_c.v[i]) - static_cast<double>(eps_n.v[i]);
        out.v[i] = (std::abs(d) <= lambda_safe) ? static_cast<T>(std::max(1.0, std::abs(s_S * d))) : T(0);
    }
    return out;
}

/// One step of the safety-guidance recursion:
///   gamma = beta(eps_c, eps_s) .* (eps_c - eps_u) + s_m * m
///   m    <- zeta_m * m + (1 - zeta_m) * gamma
/// During warm-up (steps_taken < delta) gamma is suppressed to zero but the
/// momentum recursion still runs on it. Returns gamma.
template <class T>
Tensor<T> sld_gamma_step(const Tensor<T>& eps_u, const Tensor<T>& eps_c, const Tensor<T>* eps_safety,
                         const SldParams& p, SldStateT<T>& state) {
    state.ensure_shape(eps_u.shape);
    Tensor<T> gamma(eps_u.shape);
    if (state.steps_taken >= p.delta) {
        if (!eps_safety) throw std::invalid_argument("sld_gamma_step: safety prediction required after warm-up");
        Tensor<T> beta = sld_beta(eps_c, *eps_safety, p.s_S, p.lambda_safe);
        for (std::size_t i = 0; i < gamma.size(); ++i) {
            const double dir = static_cast<double>(eps_c.v[i]) - static_cast<double>(eps_u.v[i]);
            gamma.v[i] = static_cast<T>(static_cast<double>(beta.v[i]) * dir +
                                        p.s_m * static_cast<double>(state.momentum.v[i]));
        }
    }
    for (std::size_t i = 0; i < gamma.size(); ++i) {
        state.momentum.v[i] = static_cast<T>(p.zeta_m * static_cast<double>(state.momentum.v[i]) +
                                             (1.0 - p.zeta_m) * static_cast<double>(gamma.v[i]));
    }
    ++state.steps_taken;
    return gamma;
}

// ---------------------------------------------------------------------------
// Model-facing operations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> cfg_noise(const DiffusionModelT<T>& m, const Tensor<T>& x_t, const nn::Cond<T>& c, int t, double alpha) {
    const Tensor<T> eps_u = predict_noise(m, x_t, m.table.null_condition(), t);
    const Tensor<T> eps_c = predict_noise(m, x_t, c, t);
    return cfg_combine(eps_u, eps_c, alpha);
}

template <class T>
Tensor<T> np_noise(const DiffusionModelT<T>& m, const Tensor<T>& x_t, const nn::Cond<T>& c, int t, double alpha,
                   const nn::Cond<T>& neg_condition) {
    if (neg_condition.empty()) throw std::invalid_argument("np_noise: neg_condition not set");
    const Tensor<T> eps_n = predict_noise(m, x_t, neg_condition, t);
    const Tensor<T> eps_c = predict_noise(m, x_t, c, t);
    return np_combine(eps_n, eps_c, alpha);
}

/// Safety-guided prediction; returns the guided noise and advances the
/// per-trajectory state.
template <class T>
std::pair<Tensor<T>, SldStateT<T>> sld_noise(const DiffusionModelT<T>& m, const Tensor<T>& x_t, const nn::Cond<T>& c,
                                             int t, const GuidanceSpecT<T>& spec, SldStateT<T> state) {
    if (spec.mode != GuidanceMode::Sld) throw std::invalid_argument("sld_noise: spec.mode must be sld");
    spec.validate();
    const Tensor<T> eps_u = predict_noise(m, x_t, m.table.null_condition(), t);
    const Tensor<T> eps_c = predict_noise(m, x_t, c, t);
    Tensor<T> gamma;
    if (state.steps_taken >= spec.sld.delta) {
        const Tensor<T> eps_s = predict_noise(m, x_t, *spec.neg_condition, t);
        gamma = sld_gamma_step(eps_u, eps_c, &eps_s, spec.sld, state);
    } else {
        gamma = sld_gamma_step<T>(eps_u, eps_c, nullptr, spec.sld, state);
    }
    return {guidance_combine(eps_u, eps_c, spec.sld.mu, &gamma), std::move(state)};
}

/// Convenience constructors for the weight-free erasure methods.
template <class T>
GuidanceSpecT<T> make_np_guidance(const TokenTableT<T>& table, const std::string& concept_token, double alpha) {
    GuidanceSpecT<T> g;
    g.mode = GuidanceMode::NegativePrompt;
    g.alpha = alpha;
    g.neg_condition = table.encode_prompt(bare_prompt(concept_token));
    return g;
}

template <class T>
GuidanceSpecT<T> make_sld_guidance(const TokenTableT<T>& table, const std::string& concept_token, SldVariant variant,
                                   double mu) {
    GuidanceSpecT<T> g;
    g.mode = GuidanceMode::Sld;
    g.alpha = mu;
    g.sld = sld_variant(variant, mu);
    g.neg_condition = table.encode_prompt(bare_prompt(concept_token));
    return g;
}

}  // namespace elab
