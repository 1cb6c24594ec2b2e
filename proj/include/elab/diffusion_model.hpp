#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elab/conditioning.hpp"
#include "elab/denoiser.hpp"
#include "elab/schedule.hpp"

namespace elab {

/// Echo of the configuration a denoiser was trained with; persisted in the
/// checkpoint for provenance.
struct TrainConfig {
    int epochs = 25;
    int batch = 16;
    double lr = 2e-3;
    double lr_final_frac = 0.1;  // cosine decay floor as a fraction of lr
    double ema_decay = 0.999;    // 0 disables the weight average
    double p_uncond = 0.1;       // condition-dropout probability
    double p_bare = 0.2;         // probability of conditioning on the bare class token
    std::uint64_t seed = 0;
};

/// The unit every pipeline stage consumes and produces: denoiser weights,
/// token embedding table and the noise schedule, plus training provenance.
template <class T>
struct DiffusionModelT {
    DenoiserT<T> net;
    TokenTableT<T> table;
    NoiseSchedule sched;
    TrainConfig train_echo;
    std::uint64_t seed = 0;

    DiffusionModelT() = default;
    DiffusionModelT(const Arch& arch, TokenTableT<T> tab, NoiseSchedule s)
        : net(arch), table(std::move(tab)), sched(std::move(s)) {}

    /// Combined hash of denoiser parameters and non-placeholder embeddings;
    /// the quantity the threat-model invariant pins down.
    std::uint64_t weights_hash() {
        std::uint64_t h = net.param_hash();
        h ^= table.non_placeholder_hash();
        return h;
    }
};

/// Deterministic forward evaluation (batched). ts are 1-based.
template <class T>
Tensor<T> predict_noise(const DiffusionModelT<T>& m, const Tensor<T>& x, const std::vector<nn::Cond<T>>& conds,
                        const std::vector<int>& ts) {
    for (int t : ts)
        if (t < 1 || t > m.sched.T) throw std::out_of_range("predict_noise: t out of range");
    typename DenoiserT<T>::Cache cache;
    return m.net.forward(x, conds, ts, cache);
}

/// Single-sample convenience: eps_theta(x_t, c, t).
template <class T>
Tensor<T> predict_noise(const DiffusionModelT<T>& m, const Tensor<T>& x_t, const nn::Cond<T>& c, int t) {
    Tensor<T> xb({1, x_t.dim(0), x_t.dim(1), x_t.dim(2)});
    xb.v = x_t.v;
    Tensor<T> out = predict_noise(m, xb, std::vector<nn::Cond<T>>{c}, std::vector<int>{t});
    Tensor<T> r(x_t.shape);
    r.v = out.v;
    return r;
}

}  // namespace elab
