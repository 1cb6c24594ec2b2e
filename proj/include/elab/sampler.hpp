#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "elab/guidance.hpp"
#include "elab/rng.hpp"

namespace elab {

/// Batched ancestral reverse process. Every trajectory draws its own noise
/// stream from its own seed, so results are independent of how a set of
/// samples is chunked into batches. All trajectories share one prompt.
/// clip_denoised applies the usual [-1,1] clamp to the implied x0 before
/// computing the posterior mean.
template <class T>
Tensor<T> sample_batch(const DiffusionModelT<T>& m, const GuidanceSpecT<T>& spec, const nn::Cond<T>& prompt,
                       std::span<const std::uint64_t> seeds, int n_steps, bool clip_denoised = true) {
    spec.validate();
    if (n_steps < 1 || n_steps > m.sched.T) throw std::invalid_argument("sample: n_steps must be in [1, T]");
    const int B = static_cast<int>(seeds.size());
    const int S = m.net.arch.image_size;

    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(B));
    for (auto s : seeds) streams.emplace_back(s);

    Tensor<T> x({B, S, S, 1});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) x.at4(b, i, j, 0) = static_cast<T>(streams[static_cast<std::size_t>(b)].normal());

    const std::vector<nn::Cond<T>> conds(static_cast<std::size_t>(B), prompt);
    const std::vector<nn::Cond<T>> nulls(static_cast<std::size_t>(B), m.table.null_condition());
    std::vector<nn::Cond<T>> negs;
    if (spec.neg_condition) negs.assign(static_cast<std::size_t>(B), *spec.neg_condition);

    SldStateT<T> sld_state;  // fresh per call; batched elementwise over trajectories
    typename DenoiserT<T>::Cache cache;

    for (int t = n_steps; t >= 1; --t) {
        const std::vector<int> ts(static_cast<std::size_t>(B), t);
        Tensor<T> eps;
        switch (spec.mode) {
            case GuidanceMode::None:
                eps = m.net.forward(x, conds, ts, cache);
                break;
            case GuidanceMode::Cfg: {
                Tensor<T> eu = m.net.forward(x, nulls, ts, cache);
                Tensor<T> ec = m.net.forward(x, conds, ts, cache);
                eps = cfg_combine(eu, ec, spec.alpha);
                break;
            }
            case GuidanceMode::NegativePrompt: {
                Tensor<T> en = m.net.forward(x, negs, ts, cache);
                Tensor<T> ec = m.net.forward(x, conds, ts, cache);
                eps = np_combine(en, ec, spec.alpha);
                break;
            }
            case GuidanceMode::Sld: {
                Tensor<T> eu = m.net.forward(x, nulls, ts, cache);
                Tensor<T> ec = m.net.forward(x, conds, ts, cache);
                Tensor<T> gamma;
                if (sld_state.steps_taken >= spec.sld.delta) {
                    Tensor<T> es = m.net.forward(x, negs, ts, cache);
                    gamma = sld_gamma_step(eu, ec, &es, spec.sld, sld_state);
                } else {
                    gamma = sld_gamma_step<T>(eu, ec, nullptr, spec.sld, sld_state);
                }
                eps = guidance_combine(eu, ec, spec.sld.mu, &gamma);
                break;
            }
        }

        const double beta = m.sched.beta(t);
        const double ab = m.sched.alpha_bar(t);
        const double ab_prev = m.sched.alpha_bar0(t - 1);
        const double inv_sqrt_a = 1.0 / std::sqrt(1.0 - beta);
        const double eps_coef = beta / std::sqrt(1.0 - ab);
        const double sigma = (t > 1) ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
        // posterior mean coefficients on (x0, x_t)
        const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        const double x0_xt = 1.0 / std::sqrt(ab);
        const double x0_eps = std::sqrt(1.0 - ab) / std::sqrt(ab);

        for (int b = 0; b < B; ++b) {
            Rng& rb = streams[static_cast<std::size_t>(b)];
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    const double xt = static_cast<double>(x.at4(b, i, j, 0));
                    const double e = static_cast<double>(eps.at4(b, i, j, 0));
                    double mean;
                    if (clip_denoised) {
                        double x0 = x0_xt * xt - x0_eps * e;
                        x0 = std::min(1.0, std::max(-1.0, x0));
                        mean = c0 * x0 + ct * xt;
                    } else {
                        mean = inv_sqrt_a * (xt - eps_coef * e);
                    }
                    const double z = (t > 1) ? rb.normal() : 0.0;
                    x.at4(b, i, j, 0) = static_cast<T>(mean + sigma * z);
                }
        }
    }
    return x;
}

/// Single-trajectory sampling; returns the final image (unclamped).
template <class T>
Tensor<T> sample(const DiffusionModelT<T>& m, const GuidanceSpecT<T>& spec, const nn::Cond<T>& prompt,
                 std::uint64_t seed, int n_steps, bool clip_denoised = true) {
    const std::uint64_t seeds[1] = {seed};
    Tensor<T> out = sample_batch(m, spec, prompt, std::span<const std::uint64_t>(seeds, 1), n_steps, clip_denoised);
    const int S = m.net.arch.image_size;
    Tensor<T> img({S, S, 1});
    img.v = out.v;
    return img;
}

template <class T>
void clamp_unit(Tensor<T>& x) {
    for (auto& v : x.v) v = std::min(T(1), std::max(T(-1), v));
}

}  // namespace elab
