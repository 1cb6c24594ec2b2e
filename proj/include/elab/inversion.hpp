#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/diffusion_model.hpp"
#include "elab/guidance.hpp"
#include "elab/training.hpp"

namespace elab {

enum class AttackKind { Ti, NpCi, SldCi };

inline AttackKind attack_from_string(const std::string& s) {
    if (s == "ti") return AttackKind::Ti;
    if (s == "np-ci") return AttackKind::NpCi;
    if (s == "sld-ci") return AttackKind::SldCi;
    throw std::invalid_argument("unknown attack: " + s);
}

inline std::string to_string(AttackKind a) {
    switch (a) {
        case AttackKind::Ti: return "ti";
        case AttackKind::NpCi: return "np-ci";
        case AttackKind::SldCi: return "sld-ci";
    }
    return "?";
}

struct InversionConfig {
    int steps = 1000;
    double lr = 5e-3;
    int batch = 4;
    std::string placeholder = "<ci:attack>";
    // sld-ci window: timesteps m, m+k, ..., <= n
    int window_m = 10;
    int window_n = 370;
    int window_k = 45;
    int memory_cap = 0;  // 0 => ceil((n-m)/k) + 1
    std::uint64_t seed = 0;

    void validate(int T) const {
        if (steps < 1) throw std::invalid_argument("inversion: steps must be >= 1");
        if (batch < 1) throw std::invalid_argument("inversion: batch must be >= 1");
        if (window_m < 1 || window_n < window_m || window_n > T || window_k < 1)
            throw std::invalid_argument("inversion: invalid (m, n, k) window");
    }

    int window_count() const { return (window_n - window_m) / window_k + 1; }
    int cap() const { return memory_cap > 0 ? memory_cap : (window_n - window_m + window_k - 1) / window_k + 1; }
};

template <class T>
struct InversionResultT {
    Tensor<T> embedding;
    std::vector<double> curve;
    std::string attack;
    InversionConfig config_echo;
    std::uint64_t source_checkpoint = 0;
    int peak_stored_terms = 0;  // sld-ci memory diagnostic
};

using InversionResult = InversionResultT<float>;

namespace detail {

/// Working copy + placeholder bookkeeping shared by the three attacks.
template <class T>
struct AttackRun {
    DiffusionModelT<T> model;  // private copy; weights asserted unchanged
    std::uint64_t pre_hash = 0;
    std::string placeholder;
    std::vector<std::string> prompt;  // template with the placeholder slotted in
    std::vector<ParamRef<T>> trainable;

    AttackRun(const DiffusionModelT<T>& frozen, const InversionConfig& cfg) : model(frozen) {
        placeholder = cfg.placeholder;
        model.table.add_placeholder(placeholder, TokenTableT<T>::PlaceholderInit::Random,
                                    derive_seed(cfg.seed, "placeholder-init"));
        model.table.freeze_all_except({placeholder});
        pre_hash = model.weights_hash();
        prompt = template_prompt(placeholder);
        const int i = model.table.idx(placeholder);
        trainable.push_back({"embedding." + placeholder, &model.table.rows[static_cast<std::size_t>(i)],
                             &model.table.grads[static_cast<std::size_t>(i)]});
    }

    void check_frozen() const {
        auto copy = model;
        if (copy.weights_hash() != pre_hash)
            throw std::runtime_error("inversion: frozen weights changed during the attack");
    }
};

template <class T>
Tensor<T> noised_example(const Tensor<float>& img, int t, const NoiseSchedule& sched, Rng& rng, int S,
                         Tensor<T>* eps_out) {
    Tensor<T> xt({1, S, S, 1});
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = std::sqrt(1.0 - sched.alpha_bar(t));
    for (int p = 0; p < S * S; ++p) {
        const double e = rng.normal();
        if (eps_out) eps_out->v[static_cast<std::size_t>(p)] = static_cast<T>(e);
        xt.v[static_cast<std::size_t>(p)] =
            static_cast<T>(a * static_cast<double>(img.v[static_cast<std::size_t>(p)]) + s * e);
    }
    return xt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Textual Inversion
// ---------------------------------------------------------------------------

/// Optimizes only the placeholder embedding so the frozen model denoises the
/// example images when conditioned on it.
template <class T>
InversionResultT<T> invert_ti(const DiffusionModelT<T>& frozen, const std::vector<Tensor<float>>& example_images,
                              InversionConfig cfg) {
    if (example_images.empty()) throw std::invalid_argument("ti: example image set is empty");
    cfg.validate(frozen.sched.T);
    detail::AttackRun<T> run(frozen, cfg);
    const int S = frozen.net.arch.image_size;
    Rng rng(derive_seed(cfg.seed, "ti"));
    Adam<T> opt(cfg.lr);

    InversionResultT<T> res;
    res.attack = "ti";
    res.config_echo = cfg;

    Tensor<T> gy;
    for (int step = 0; step < cfg.steps; ++step) {
        const int B = cfg.batch;
        Tensor<T> xt({B, S, S, 1});
        Tensor<T> eps({B, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(example_images.size()) - 1));
            const int t = rng.uniform_int(1, frozen.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(frozen.sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - frozen.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p) {
                const double e = rng.normal();
                eps.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(e);
                xt.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(
                    a * static_cast<double>(example_images[pick].v[static_cast<std::size_t>(p)]) + s * e);
            }
        }
        std::vector<nn::Cond<T>> conds(static_cast<std::size_t>(B), run.model.table.encode_prompt(run.prompt));

        typename DenoiserT<T>::Cache cache;
        Tensor<T> pred = run.model.net.forward(xt, conds, ts, cache);
        const T loss = denoise_loss(pred, eps, &gy);
        res.curve.push_back(static_cast<double>(loss));

        run.model.net.zero_grads();
        run.model.table.zero_grads();
        std::vector<Tensor<T>> cgrads(static_cast<std::size_t>(B));
        typename DenoiserT<T>::BackwardOpts opts;
        opts.cond_grads = &cgrads;
        run.model.net.backward(cache, gy, opts);
        scatter_cond_grads(run.model.table, std::vector<std::vector<std::string>>(static_cast<std::size_t>(B), run.prompt),
                           cgrads);
        opt.step(run.trainable);
    }
    run.check_frozen();
    res.embedding = run.model.table.row(cfg.placeholder);
    return res;
}

// ---------------------------------------------------------------------------
// NP-CI: match the negative-prompt-guided prediction to the true CFG one
// ---------------------------------------------------------------------------

/// Loss per draw: || (eps_u + a(eps_c - eps_u)) - (eps_c + a(eps_* - eps_c)) ||^2,
/// c being the erased concept used as the NP negative.
template <class T>
InversionResultT<T> invert_np(const DiffusionModelT<T>& frozen, const std::string& concept_token,
                              const std::vector<Tensor<float>>& example_images, double alpha, InversionConfig cfg) {
    if (example_images.empty()) throw std::invalid_argument("np-ci: example image set is empty");
    if (!frozen.table.has(concept_token)) throw std::invalid_argument("np-ci: unknown token " + concept_token);
    cfg.validate(frozen.sched.T);
    detail::AttackRun<T> run(frozen, cfg);
    const int S = frozen.net.arch.image_size;
    Rng rng(derive_seed(cfg.seed, "np-ci"));
    Adam<T> opt(cfg.lr);

    const nn::Cond<T> c_cond = frozen.table.encode_prompt(bare_prompt(concept_token));
    const nn::Cond<T> null_cond = frozen.table.null_condition();

    InversionResultT<T> res;
    res.attack = "np-ci";
    res.config_echo = cfg;

    for (int step = 0; step < cfg.steps; ++step) {
        const int B = cfg.batch;
        Tensor<T> xt({B, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(example_images.size()) - 1));
            const int t = rng.uniform_int(1, frozen.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(frozen.sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - frozen.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p)
                xt.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(
                    a * static_cast<double>(example_images[pick].v[static_cast<std::size_t>(p)]) + s * rng.normal());
        }
        const std::vector<nn::Cond<T>> nulls(static_cast<std::size_t>(B), null_cond);
        const std::vector<nn::Cond<T>> cs(static_cast<std::size_t>(B), c_cond);
        std::vector<nn::Cond<T>> stars(static_cast<std::size_t>(B), run.model.table.encode_prompt(run.prompt));

        typename DenoiserT<T>::Cache cc;
        Tensor<T> eps_u = run.model.net.forward(xt, nulls, ts, cc);
        Tensor<T> eps_c = run.model.net.forward(xt, cs, ts, cc);
        typename DenoiserT<T>::Cache cstar;
        Tensor<T> eps_s = run.model.net.forward(xt, stars, ts, cstar);

        Tensor<T> target = cfg_combine(eps_u, eps_c, alpha);       // true CFG for the concept
        Tensor<T> guided = np_combine(eps_c, eps_s, alpha);        // NP with negative = concept, prompt = c_*
        Tensor<T> gy;
        const T loss = denoise_loss(guided, target, &gy);
        res.curve.push_back(static_cast<double>(loss));
        for (auto& g : gy.v) g *= static_cast<T>(alpha);  // dGuided/dEps_* = alpha

        run.model.net.zero_grads();
        run.model.table.zero_grads();
        std::vector<Tensor<T>> cgrads(static_cast<std::size_t>(B));
        typename DenoiserT<T>::BackwardOpts opts;
        opts.cond_grads = &cgrads;
        run.model.net.backward(cstar, gy, opts);
        scatter_cond_grads(run.model.table, std::vector<std::vector<std::string>>(static_cast<std::size_t>(B), run.prompt),
                           cgrads);
        opt.step(run.trainable);
    }
    run.check_frozen();
    res.embedding = run.model.table.row(cfg.placeholder);
    return res;
}

// ---------------------------------------------------------------------------
// SLD-CI: counteract the safety-guidance term over a timestep window
// ---------------------------------------------------------------------------

/// Per-visit record kept alive for the deferred backward pass; the number of
/// simultaneously stored records is the attack's memory footprint.
template <class T>
struct SldCiVisit {
    typename DenoiserT<T>::Cache star_cache;  // forward graph of the c_* branch
    Tensor<T> q;                              // dLoss/dGuided at this visit
    Tensor<T> beta, dbeta;                    // gate and its derivative wrt eps_*
    Tensor<T> dir;                            // eps_* - eps_u
};

/// Evaluates the windowed SLD-CI loss for one example image with the current
/// placeholder embedding, accumulating dLoss/dRow into `grad_row` via the
/// full gamma/momentum recursion. Returns the mean per-visit loss.
/// The caller's x0 / eps pair is fixed for the whole window (Algorithm-2
/// style re-noising at each visited timestep).
template <class T>
double sld_ci_window_loss(DiffusionModelT<T>& model, const std::vector<std::string>& star_prompt,
                          const nn::Cond<T>& concept_cond, const nn::Cond<T>& null_cond, const Tensor<float>& x0,
                          const Tensor<T>& eps_draw, double alpha, const GuidanceSpecT<T>& sld_spec,
                          const InversionConfig& cfg, Tensor<T>* grad_row, int* peak_stored = nullptr,
                          std::vector<Tensor<T>>* gamma_trace = nullptr) {
    const int S = model.net.arch.image_size;
    const SldParams& sp = sld_spec.sld;
    const double mu = sp.mu;

    std::vector<SldCiVisit<T>> visits;
    const int J = cfg.window_count();
    if (J > cfg.cap()) throw std::invalid_argument("sld-ci: window exceeds the stored-term memory cap");
    visits.reserve(static_cast<std::size_t>(J));

    SldStateT<T> state;
    Tensor<T> gamma_cur({1, S, S, 1});  // gamma entering the loss; zero at the first visit
    double total = 0;

    for (int t = cfg.window_m; t <= cfg.window_n; t += cfg.window_k) {
        Tensor<T> xt({1, S, S, 1});
        const double a = std::sqrt(model.sched.alpha_bar(t));
        const double s = std::sqrt(1.0 - model.sched.alpha_bar(t));
        for (int p = 0; p < S * S; ++p)
            xt.v[static_cast<std::size_t>(p)] =
                static_cast<T>(a * static_cast<double>(x0.v[static_cast<std::size_t>(p)]) +
                               s * static_cast<double>(eps_draw.v[static_cast<std::size_t>(p)]));

        typename DenoiserT<T>::Cache cc;
        Tensor<T> eps_u = model.net.forward(xt, {null_cond}, {t}, cc);
        Tensor<T> eps_c = model.net.forward(xt, {concept_cond}, {t}, cc);

        SldCiVisit<T> vis;
        Tensor<T> eps_star = model.net.forward(xt, {model.table.encode_prompt(star_prompt)}, {t}, vis.star_cache);

        // loss at this visit uses the gamma produced by the previous one
        Tensor<T> target = cfg_combine(eps_u, eps_c, alpha);
        Tensor<T> guided = guidance_combine(eps_u, eps_star, mu, &gamma_cur);
        Tensor<T> gy;
        const T l = denoise_loss(guided, target, &gy);
        total += static_cast<double>(l) / J;
        vis.q = gy;  // dLoss_visit/dGuided (unnormalized by J yet)

        // recursion: gamma_next from this visit's predictions and momentum
        state.ensure_shape(eps_u.shape);
        vis.beta = Tensor<T>(eps_u.shape);
        vis.dbeta = Tensor<T>(eps_u.shape);
        vis.dir = Tensor<T>(eps_u.shape);
        Tensor<T> gamma_next(eps_u.shape);
        const bool active = state.steps_taken >= sp.delta;
        for (std::size_t i = 0; i < gamma_next.size(); ++i) {
            const double d = static_cast<double>(eps_star.v[i]) - static_cast<double>(eps_c.v[i]);
            double beta = 0, dbeta = 0;
            if (active && std::abs(d) <= sp.lambda_safe) {
                const double sd = std::abs(sp.s_S * d);
                beta = std::max(1.0, sd);
                dbeta = (sd > 1.0) ? sp.s_S * (d >= 0 ? 1.0 : -1.0) : 0.0;
            }
            const double dir = static_cast<double>(eps_star.v[i]) - static_cast<double>(eps_u.v[i]);
            vis.beta.v[i] = static_cast<T>(beta);
            vis.dbeta.v[i] = static_cast<T>(dbeta);
            vis.dir.v[i] = static_cast<T>(dir);
            gamma_next.v[i] = active ? static_cast<T>(beta * dir + sp.s_m * static_cast<double>(state.momentum.v[i]))
                                     : T(0);
            state.momentum.v[i] = static_cast<T>(sp.zeta_m * static_cast<double>(state.momentum.v[i]) +
                                                 (1.0 - sp.zeta_m) * static_cast<double>(gamma_next.v[i]));
        }
        ++state.steps_taken;
        gamma_cur = gamma_next;
        if (gamma_trace) gamma_trace->push_back(gamma_next);

        visits.push_back(std::move(vis));
        if (peak_stored) *peak_stored = std::max(*peak_stored, static_cast<int>(visits.size()));
    }

    if (!grad_row) return total;

    // Deferred backward through the stored recursion, newest visit first.
    // Adjoints: gm for the momentum entering a visit's update, gg for the
    // gamma that visit produced (used by the next visit's loss).
    const double invJ = 1.0 / J;
    Tensor<T> gm({1, S, S, 1});
    Tensor<T> gg({1, S, S, 1});  // adjoint of gamma produced at visit j (from loss at j+1)
    std::vector<Tensor<T>> cgrads(1);
    const int d = model.table.d;
    if (grad_row->empty()) *grad_row = Tensor<T>({d});

    // was the recursion active at visit j? replay the warm-up counter
    auto active_at = [&](int j) { return j >= sp.delta; };

    for (int j = J - 1; j >= 0; --j) {
        SldCiVisit<T>& vis = visits[static_cast<std::size_t>(j)];
        Tensor<T> ge(vis.q.shape);  // dLoss/dEps_*(j)

        // direct loss path at this visit: guided = eps_u + mu (eps_* - eps_u - gamma_j)
        for (std::size_t i = 0; i < ge.size(); ++i)
            ge.v[i] = static_cast<T>(mu * invJ * static_cast<double>(vis.q.v[i]));

        // gamma produced here feeds loss j+1 (gg) and momentum (gm):
        // a = gg + (1 - zeta) gm ; gamma = beta .* dir + s_m m_prev
        if (active_at(j)) {
            for (std::size_t i = 0; i < ge.size(); ++i) {
                const double a = static_cast<double>(gg.v[i]) + (1.0 - sp.zeta_m) * static_cast<double>(gm.v[i]);
                ge.v[i] += static_cast<T>(a * (static_cast<double>(vis.beta.v[i]) +
                                               static_cast<double>(vis.dir.v[i]) * static_cast<double>(vis.dbeta.v[i])));
            }
        }
        // momentum adjoint flowing to the previous visit
        Tensor<T> gm_prev(gm.shape);
        for (std::size_t i = 0; i < gm.size(); ++i) {
            const double a = static_cast<double>(gg.v[i]) + (1.0 - sp.zeta_m) * static_cast<double>(gm.v[i]);
            gm_prev.v[i] = static_cast<T>(sp.zeta_m * static_cast<double>(gm.v[i]) + (active_at(j) ? sp.s_m * a : 0.0));
        }
        gm = std::move(gm_prev);
        // gamma entering loss j was produced at j-1: its adjoint is -mu dL_j/dGuided
        for (std::size_t i = 0; i < gg.size(); ++i)
            gg.v[i] = static_cast<T>(-mu * invJ * static_cast<double>(vis.q.v[i]));

        cgrads[0] = Tensor<T>();
        typename DenoiserT<T>::BackwardOpts opts;
        opts.cond_grads = &cgrads;
        model.net.backward(vis.star_cache, ge, opts);
        // placeholder sits at the last template position
        const int pos = static_cast<int>(star_prompt.size()) - 1;
        for (int jj = 0; jj < d; ++jj) grad_row->v[static_cast<std::size_t>(jj)] += cgrads[0].at2(pos, jj);
    }
    return total;
}

/// Concept Inversion against safety-guided sampling: learns the placeholder
/// so the SLD-guided prediction (prompt c_*, safety concept = erased
/// concept) matches the plain CFG prediction for the erased concept, over an
/// evenly spaced timestep window with the gamma/momentum recursion carried
/// across the inner loop.
template <class T>
InversionResultT<T> invert_sld(const DiffusionModelT<T>& frozen, const GuidanceSpecT<T>& sld_spec,
                               const std::string& concept_token, const std::vector<Tensor<float>>& example_images,
                               double alpha, InversionConfig cfg) {
    if (sld_spec.mode != GuidanceMode::Sld) throw std::invalid_argument("sld-ci: guidance spec is not sld");
    if (example_images.empty()) throw std::invalid_argument("sld-ci: example image set is empty");
    cfg.validate(frozen.sched.T);
    detail::AttackRun<T> run(frozen, cfg);
    const int S = frozen.net.arch.image_size;
    Rng rng(derive_seed(cfg.seed, "sld-ci"));
    Adam<T> opt(cfg.lr);

    const nn::Cond<T> concept_cond = frozen.table.encode_prompt(bare_prompt(concept_token));
    const nn::Cond<T> null_cond = frozen.table.null_condition();

    InversionResultT<T> res;
    res.attack = "sld-ci";
    res.config_echo = cfg;

    const int i = run.model.table.idx(cfg.placeholder);
    Tensor<T>& row_grad = run.model.table.grads[static_cast<std::size_t>(i)];

    for (int step = 0; step < cfg.steps; ++step) {
        run.model.table.zero_grads();
        run.model.net.zero_grads();
        double loss = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(example_images.size()) - 1));
            Tensor<T> eps_draw({1, S, S, 1});
            for (auto& e : eps_draw.v) e = static_cast<T>(rng.normal());
            Tensor<T> grad_row({run.model.table.d});
            loss += sld_ci_window_loss(run.model, run.prompt, concept_cond, null_cond, example_images[pick], eps_draw,
                                       alpha, sld_spec, cfg, &grad_row, &res.peak_stored_terms) /
                    cfg.batch;
            for (std::size_t jj = 0; jj < grad_row.size(); ++jj) row_grad.v[jj] += grad_row.v[jj] / cfg.batch;
        }
        res.curve.push_back(loss);
        opt.step(run.trainable);
    }
    run.check_frozen();
    res.embedding = run.model.table.row(cfg.placeholder);
    return res;
}

// ---------------------------------------------------------------------------
// Transfer: install a learned embedding into another model's table
// ---------------------------------------------------------------------------

template <class T>
DiffusionModelT<T> install_embedding(const DiffusionModelT<T>& base, const std::string& token,
                                     const Tensor<T>& embedding) {
    if (embedding.rank() != 1 || embedding.dim(0) != base.table.d)
        throw std::invalid_argument("install_embedding: dimension mismatch");
    DiffusionModelT<T> m = base;
    if (!m.table.has(token)) {
        m.table.add_placeholder(token, TokenTableT<T>::PlaceholderInit::Random, 0);
    }
    m.table.row(token) = embedding;
    m.table.set_frozen(token, true);
    return m;
}

}  // namespace elab
