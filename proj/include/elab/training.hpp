#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/dataset.hpp"
#include "elab/diffusion_model.hpp"
#include "elab/guidance.hpp"
#include "elab/rng.hpp"
#include "elab/schedule.hpp"

namespace elab {

template <class T>
Tensor<T> to_scalar(const Tensor<float>& x) {
    Tensor<T> out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.v[i] = static_cast<T>(x.v[i]);
    return out;
}

template <>
inline Tensor<float> to_scalar<float>(const Tensor<float>& x) {
    return x;
}

/// One denoising batch: x_t, conditions and the target noise, plus which
/// table tokens each condition row came from (for scattering embedding
/// gradients back).
template <class T>
struct DenoiseBatch {
    Tensor<T> x;                                      // [B, S, S, 1]
    std::vector<nn::Cond<T>> conds;
    std::vector<int> ts;
    Tensor<T> eps;                                    // target noise
    std::vector<std::vector<std::string>> prompt_tokens;
};

/// Assembles a training batch: per sample draw t, noise, and a prompt form
/// (null with probability p_uncond, bare class token with p_bare, template
/// otherwise), then noise the image.
template <class T>
DenoiseBatch<T> make_denoise_batch(const LabeledImages& data, const std::vector<std::size_t>& idx,
                                   const TokenTableT<T>& table, const NoiseSchedule& sched, const TrainConfig& cfg,
                                   Rng& rng) {
    const int B = static_cast<int>(idx.size());
    const int S = data.image_size;
    DenoiseBatch<T> b;
    b.x = Tensor<T>({B, S, S, 1});
    b.eps = Tensor<T>({B, S, S, 1});
    b.ts.resize(static_cast<std::size_t>(B));
    b.conds.reserve(static_cast<std::size_t>(B));
    b.prompt_tokens.reserve(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
        const auto& img = data.images[idx[static_cast<std::size_t>(i)]];
        const int label = data.labels[idx[static_cast<std::size_t>(i)]];
        const int t = rng.uniform_int(1, sched.T);
        b.ts[static_cast<std::size_t>(i)] = t;

        const double a = std::sqrt(sched.alpha_bar(t));
        const double s = std::sqrt(1.0 - sched.alpha_bar(t));
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double e = rng.normal();
                b.eps.at4(i, y, x, 0) = static_cast<T>(e);
                b.x.at4(i, y, x, 0) =
                    static_cast<T>(a * static_cast<double>(img.v[static_cast<std::size_t>(y) * S + x]) + s * e);
            }

        const double u = rng.uniform();
        std::vector<std::string> toks;
        if (u < cfg.p_uncond)
            toks = {kNullToken};
        else if (u < cfg.p_uncond + cfg.p_bare)
            toks = bare_prompt(data.class_tokens[static_cast<std::size_t>(label)]);
        else
            toks = template_prompt(data.class_tokens[static_cast<std::size_t>(label)]);
        b.conds.push_back(table.encode_prompt(toks));
        b.prompt_tokens.push_back(std::move(toks));
    }
    return b;
}

/// MSE between predicted and target noise; fills the upstream gradient.
template <class T>
T denoise_loss(const Tensor<T>& pred, const Tensor<T>& eps, Tensor<T>* gy) {
    T acc = 0;
    const T n = static_cast<T>(pred.size());
    if (gy && gy->shape != pred.shape) *gy = Tensor<T>(pred.shape);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred.v[i] - eps.v[i];
        acc += d * d;
        if (gy) gy->v[i] = T(2) * d / n;
    }
    return acc / n;
}

/// Scatters per-sample condition gradients back onto table rows.
template <class T>
void scatter_cond_grads(TokenTableT<T>& table, const std::vector<std::vector<std::string>>& prompt_tokens,
                        const std::vector<Tensor<T>>& cond_grads) {
    for (std::size_t b = 0; b < prompt_tokens.size(); ++b) {
        if (cond_grads[b].empty()) continue;
        for (std::size_t l = 0; l < prompt_tokens[b].size(); ++l) {
            Tensor<T>& g = table.grad(prompt_tokens[b][l]);
            for (int j = 0; j < table.d; ++j)
                g.v[static_cast<std::size_t>(j)] += cond_grads[b].at2(static_cast<int>(l), j);
        }
    }
}

template <class T>
std::vector<ParamRef<T>> trainable_table_refs(TokenTableT<T>& table) {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < table.names.size(); ++i) {
        if (table.is_frozen(table.names[i])) continue;
        out.push_back({"embedding." + table.names[i], &table.rows[i], &table.grads[i]});
    }
    return out;
}

template <class T>
std::vector<ParamRef<T>> net_param_refs(DenoiserT<T>& net) {
    std::vector<ParamRef<T>> out;
    net.visit_params([&](const std::string& n, Tensor<T>& w, Tensor<T>& g) { out.push_back({n, &w, &g}); });
    return out;
}

/// Trains a conditional denoiser from scratch. The seed fully determines
/// initialization, data order and every noise draw. Returns the trained
/// bundle; per-batch losses go to `curve` when provided.
template <class T>
DiffusionModelT<T> train_denoiser(const LabeledImages& data, const TokenTableT<T>& table, const Arch& arch,
                                  const NoiseSchedule& sched, const TrainConfig& cfg,
                                  std::vector<double>* curve = nullptr) {
    if (data.images.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
    for (int l : data.labels)
        if (l < 0 || l >= static_cast<int>(data.class_tokens.size()) ||
            !table.has(data.class_tokens[static_cast<std::size_t>(l)]))
            throw std::invalid_argument("train_denoiser: label has no token in the table");
    if (cfg.p_uncond < 0.0 || cfg.p_uncond > 1.0) throw std::invalid_argument("p_uncond must be in [0,1]");

    DiffusionModelT<T> m(arch, table, sched);
    m.seed = cfg.seed;
    m.train_echo = cfg;
    m.net.init(derive_seed(cfg.seed, "net-init"));

    Rng rng(derive_seed(cfg.seed, "train"));
    Adam<T> opt(cfg.lr);
    auto params = net_param_refs(m.net);
    auto trows = trainable_table_refs(m.table);
    params.insert(params.end(), trows.begin(), trows.end());

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    // EMA shadows follow every trainable tensor; they become the final weights.
    std::vector<Tensor<T>> shadows;
    if (cfg.ema_decay > 0.0)
        for (const auto& p : params) shadows.push_back(*p.w);

    const std::size_t batches_per_epoch = order.size() / static_cast<std::size_t>(cfg.batch);
    const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(cfg.epochs);
    std::size_t step_idx = 0;

    Tensor<T> gy;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates from the run stream
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start + cfg.batch <= order.size(); start += cfg.batch) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + cfg.batch));
            DenoiseBatch<T> batch = make_denoise_batch(data, idx, m.table, sched, cfg, rng);

            typename DenoiserT<T>::Cache cache;
            Tensor<T> pred = m.net.forward(batch.x, batch.conds, batch.ts, cache);
            const T loss = denoise_loss(pred, batch.eps, &gy);
            if (curve) curve->push_back(static_cast<double>(loss));

            m.net.zero_grads();
            m.table.zero_grads();
            std::vector<Tensor<T>> cgrads(batch.conds.size());
            typename DenoiserT<T>::BackwardOpts opts;
            opts.cond_grads = &cgrads;
            m.net.backward(cache, gy, opts);
            scatter_cond_grads(m.table, batch.prompt_tokens, cgrads);

            // cosine decay from lr to lr * lr_final_frac
            const double frac = total_steps > 1 ? static_cast<double>(step_idx) / (total_steps - 1) : 0.0;
            const double floor = cfg.lr * cfg.lr_final_frac;
            opt.set_lr(floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979324 * frac)));
            opt.step(params);
            ++step_idx;

            if (cfg.ema_decay > 0.0)
                for (std::size_t pi = 0; pi < params.size(); ++pi)
                    for (std::size_t i = 0; i < shadows[pi].size(); ++i)
                        shadows[pi].v[i] = static_cast<T>(cfg.ema_decay * static_cast<double>(shadows[pi].v[i]) +
                                                          (1.0 - cfg.ema_decay) * static_cast<double>(params[pi].w->v[i]));
        }
    }
    if (cfg.ema_decay > 0.0)
        for (std::size_t pi = 0; pi < params.size(); ++pi) *params[pi].w = shadows[pi];
    return m;
}

}  // namespace elab
