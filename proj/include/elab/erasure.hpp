#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "elab/adam.hpp"
#include "elab/dataset.hpp"
#include "elab/diffusion_model.hpp"
#include "elab/guidance.hpp"
#include "elab/sampler.hpp"
#include "elab/training.hpp"

namespace elab {

// ---------------------------------------------------------------------------
// ESD: steer the conditional prediction away from the concept
// ---------------------------------------------------------------------------

enum class EsdVariant { CrossAttention, NonCrossAttention };

inline EsdVariant esd_variant_from_string(const std::string& s) {
    if (s == "x") return EsdVariant::CrossAttention;
    if (s == "u") return EsdVariant::NonCrossAttention;
    throw std::invalid_argument("esd variant must be 'x' or 'u'");
}

struct EsdConfig {
    double eta = 1.0;
    EsdVariant variant = EsdVariant::CrossAttention;
    int steps = 400;
    double lr = 1e-4;
    int batch = 8;
    int pool = 64;          // concept samples drawn from the frozen model
    double pool_alpha = 3.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (eta < 0.0) throw std::invalid_argument("esd: eta must be >= 0");
        if (steps < 1 || batch < 1 || pool < 1) throw std::invalid_argument("esd: bad steps/batch/pool");
    }
};

template <class T>
std::vector<ParamRef<T>> esd_param_subset(DenoiserT<T>& net, EsdVariant v) {
    std::vector<ParamRef<T>> out;
    net.visit_params([&](const std::string& n, Tensor<T>& w, Tensor<T>& g) {
        const bool xa = is_cross_attention_param(n);
        if ((v == EsdVariant::CrossAttention) == xa) out.push_back({n, &w, &g});
    });
    if (out.empty()) throw std::invalid_argument("esd: empty parameter subset");
    return out;
}

/// Fine-tunes a copy of the model so its conditional prediction matches the
/// frozen teacher's steered target eps_u - eta (eps_c - eps_u). Inputs are
/// noised samples of the concept generated by the frozen model itself.
template <class T>
DiffusionModelT<T> erase_esd(const DiffusionModelT<T>& base, const std::string& concept_token, const EsdConfig& cfg,
                             std::vector<double>* curve = nullptr) {
    cfg.validate();
    if (!base.table.has(concept_token)) throw std::invalid_argument("esd: unknown token " + concept_token);

    DiffusionModelT<T> student = base;
    const nn::Cond<T> cond = base.table.encode_prompt(template_prompt(concept_token));
    const nn::Cond<T> null_cond = base.table.null_condition();

    // pool of concept images from the frozen teacher
    GuidanceSpecT<T> pg;
    pg.mode = GuidanceMode::Cfg;
    pg.alpha = cfg.pool_alpha;
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(cfg.pool));
    for (int i = 0; i < cfg.pool; ++i) seeds[static_cast<std::size_t>(i)] = derive_seed(cfg.seed, "esd-pool", i);
    Tensor<T> pool = sample_batch(base, pg, cond, seeds, base.sched.T);
    clamp_unit(pool);

    Rng rng(derive_seed(cfg.seed, "esd-train"));
    Adam<T> opt(cfg.lr);
    auto params = esd_param_subset(student.net, cfg.variant);
    const int S = base.net.arch.image_size;

    Tensor<T> gy;
    for (int step = 0; step < cfg.steps; ++step) {
        const int B = cfg.batch;
        Tensor<T> xt({B, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const int pick = rng.uniform_int(0, cfg.pool - 1);
            const int t = rng.uniform_int(1, base.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(base.sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - base.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p)
                xt.v[static_cast<std::size_t>(b) * S * S + p] =
                    static_cast<T>(a * static_cast<double>(pool.v[static_cast<std::size_t>(pick) * S * S + p]) +
                                   s * rng.normal());
        }
        const std::vector<nn::Cond<T>> conds(static_cast<std::size_t>(B), cond);
        const std::vector<nn::Cond<T>> nulls(static_cast<std::size_t>(B), null_cond);

        // frozen teacher target: eps_u - eta (eps_c - eps_u)
        typename DenoiserT<T>::Cache tc;
        Tensor<T> eps_u = base.net.forward(xt, nulls, ts, tc);
        Tensor<T> eps_c = base.net.forward(xt, conds, ts, tc);
        Tensor<T> target = guidance_combine(eps_u, eps_c, -cfg.eta);

        typename DenoiserT<T>::Cache sc;
        Tensor<T> pred = student.net.forward(xt, conds, ts, sc);
        const T loss = denoise_loss(pred, target, &gy);
        if (curve) curve->push_back(static_cast<double>(loss));
        student.net.zero_grads();
        student.net.backward(sc, gy);
        opt.step(params);
    }
    return student;
}

// ---------------------------------------------------------------------------
// UCE: closed-form edit of the cross-attention key/value projections
// ---------------------------------------------------------------------------

/// Edit request against a single projection matrix W (shape [d, A],
/// applied as e^T W): route each source embedding to a target output while
/// keeping the preserve-set outputs and staying near W.
template <class T>
struct UceEdit {
    std::vector<std::pair<Tensor<T>, Tensor<T>>> pairs;  // (source c [d], target v* [A])
    std::vector<Tensor<T>> preserve;                     // embeddings [d] whose outputs stay fixed
    double ridge = 1e-4;
};

/// Minimizer of sum_e ||W'^T c - v*||^2 + sum_p ||W'^T c - W^T c||^2 +
/// ridge ||W' - W||_F^2, solved in closed form (normal equations, double
/// precision). Throws if the system is singular (ridge 0 and deficient).
template <class T>
Tensor<T> uce_solve(const Tensor<T>& W, const UceEdit<T>& edit) {
    if (edit.pairs.empty()) throw std::invalid_argument("uce: at least one edit pair required");
    if (edit.ridge < 0.0) throw std::invalid_argument("uce: ridge must be >= 0");
    const int d = W.dim(0), A = W.dim(1);

    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(d, d) * edit.ridge;
    Eigen::MatrixXd Wd(d, A);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < A; ++j) Wd(i, j) = static_cast<double>(W.at2(i, j));
    Eigen::MatrixXd B = edit.ridge * Wd;

    auto add_outer = [&](const Tensor<T>& c) {
        Eigen::VectorXd cv(d);
        for (int i = 0; i < d; ++i) cv(i) = static_cast<double>(c.v[static_cast<std::size_t>(i)]);
        M.noalias() += cv * cv.transpose();
        return cv;
    };
    for (const auto& [c, v] : edit.pairs) {
        if (c.dim(0) != d || v.dim(0) != A) throw std::invalid_argument("uce: edit pair dimension mismatch");
        Eigen::VectorXd cv = add_outer(c);
        Eigen::VectorXd vv(A);
        for (int j = 0; j < A; ++j) vv(j) = static_cast<double>(v.v[static_cast<std::size_t>(j)]);
        B.noalias() += cv * vv.transpose();
    }
    for (const auto& c : edit.preserve) {
        if (c.dim(0) != d) throw std::invalid_argument("uce: preserve dimension mismatch");
        Eigen::VectorXd cv = add_outer(c);
        B.noalias() += cv * (cv.transpose() * Wd);
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (!lu.isInvertible()) throw std::runtime_error("uce: singular normal matrix (increase ridge)");
    Eigen::MatrixXd Wp = lu.solve(B);

    Tensor<T> out(W.shape);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < A; ++j) out.at2(i, j) = static_cast<T>(Wp(i, j));
    return out;
}

struct UceConfig {
    std::string anchor_token = kNullToken;  // concept keys/values are routed to this token's outputs
    double ridge = 1e-4;
};

/// Applies the closed-form edit to every cross-attention K and V projection:
/// the concept embedding now produces the anchor token's keys/values, while
/// every other vocabulary row is preserved.
template <class T>
DiffusionModelT<T> erase_uce(const DiffusionModelT<T>& base, const std::string& concept_token, const UceConfig& cfg,
                             std::vector<double>* = nullptr) {
    if (!base.table.has(concept_token)) throw std::invalid_argument("uce: unknown token " + concept_token);
    if (!base.table.has(cfg.anchor_token)) throw std::invalid_argument("uce: unknown anchor " + cfg.anchor_token);
    DiffusionModelT<T> m = base;

    const Tensor<T>& src = base.table.row(concept_token);
    const Tensor<T>& anchor = base.table.row(cfg.anchor_token);
    std::vector<Tensor<T>> preserve;
    for (const auto& name : base.table.names)
        if (name != concept_token) preserve.push_back(base.table.row(name));

    auto edit_matrix = [&](Tensor<T>& W) {
        const int d = W.dim(0), A = W.dim(1);
        Tensor<T> target({A});
        for (int j = 0; j < A; ++j) {
            double acc = 0;
            for (int i = 0; i < d; ++i)
                acc += static_cast<double>(anchor.v[static_cast<std::size_t>(i)]) * static_cast<double>(W.at2(i, j));
            target.v[static_cast<std::size_t>(j)] = static_cast<T>(acc);
        }
        UceEdit<T> e;
        e.ridge = cfg.ridge;
        e.pairs.emplace_back(src, target);
        e.preserve = preserve;
        W = uce_solve(W, e);
    };

    if (m.net.arch.attn_full_res) {
        edit_matrix(m.net.xa0.Wk);
        edit_matrix(m.net.xa0.Wv);
    }
    edit_matrix(m.net.xa1.Wk);
    edit_matrix(m.net.xa1.Wv);
    return m;
}

// ---------------------------------------------------------------------------
// Selective Amnesia: surrogate retargeting + diagonal-Fisher EWC + replay
// ---------------------------------------------------------------------------

struct SaConfig {
    double lambda_ewc = 10.0;
    int fisher_samples = 200;
    int steps = 400;
    double lr = 1e-4;
    int batch = 4;
    int replay_batch = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (lambda_ewc < 0.0) throw std::invalid_argument("sa: lambda_ewc must be >= 0");
        if (lambda_ewc > 0.0 && fisher_samples < 1)
            throw std::invalid_argument("sa: fisher_samples must be >= 1 when lambda_ewc > 0");
    }
};

template <class T>
using NamedTensors = std::map<std::string, Tensor<T>>;

/// Running mean of squared per-sample gradients (the diagonal Fisher
/// estimate used by the EWC penalty).
template <class T>
struct FisherAccumulator {
    NamedTensors<T> sumsq;
    int n = 0;

    void add(const std::vector<ParamRef<T>>& refs) {
        for (const auto& r : refs) {
            auto it = sumsq.find(r.name);
            if (it == sumsq.end()) it = sumsq.emplace(r.name, Tensor<T>(r.w->shape)).first;
            for (std::size_t i = 0; i < r.g->size(); ++i) it->second.v[i] += r.g->v[i] * r.g->v[i];
        }
        ++n;
    }

    NamedTensors<T> mean() const {
        if (n == 0) throw std::runtime_error("fisher: no samples accumulated");
        NamedTensors<T> out = sumsq;
        for (auto& [k, t] : out)
            for (auto& v : t.v) v /= static_cast<T>(n);
        return out;
    }
};

/// Diagonal Fisher of the denoising loss at the model's current weights,
/// estimated from single-sample gradients on the remember set.
template <class T>
NamedTensors<T> estimate_fisher_diag(const DiffusionModelT<T>& model, const LabeledImages& remember, int n_samples,
                                     std::uint64_t seed) {
    DiffusionModelT<T> work = model;  // gradient buffers live in the copy
    Rng rng(seed);
    FisherAccumulator<T> acc;
    auto refs = net_param_refs(work.net);
    const int S = remember.image_size;
    Tensor<T> gy;
    for (int i = 0; i < n_samples; ++i) {
        const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(remember.size()) - 1));
        const int t = rng.uniform_int(1, work.sched.T);
        Tensor<T> xt({1, S, S, 1});
        Tensor<T> eps({1, S, S, 1});
        const double a = std::sqrt(work.sched.alpha_bar(t));
        const double s = std::sqrt(1.0 - work.sched.alpha_bar(t));
        for (int p = 0; p < S * S; ++p) {
            const double e = rng.normal();
            eps.v[static_cast<std::size_t>(p)] = static_cast<T>(e);
            xt.v[static_cast<std::size_t>(p)] =
                static_cast<T>(a * static_cast<double>(remember.images[pick].v[static_cast<std::size_t>(p)]) + s * e);
        }
        const auto tok = remember.class_tokens[static_cast<std::size_t>(remember.labels[pick])];
        const std::vector<nn::Cond<T>> conds{work.table.encode_prompt(template_prompt(tok))};
        typename DenoiserT<T>::Cache cache;
        Tensor<T> pred = work.net.forward(xt, conds, {t}, cache);
        denoise_loss(pred, eps, &gy);
        work.net.zero_grads();
        work.net.backward(cache, gy);
        acc.add(refs);
    }
    return acc.mean();
}

/// Maximizes the surrogate likelihood under the forgotten condition while
/// anchoring parameters with the EWC penalty and replaying the remember set.
template <class T>
DiffusionModelT<T> erase_sa(const DiffusionModelT<T>& base, const std::string& forget_token,
                            const LabeledImages& surrogate, const LabeledImages& remember, const SaConfig& cfg,
                            std::vector<double>* curve = nullptr) {
    cfg.validate();
    if (surrogate.images.empty()) throw std::invalid_argument("sa: surrogate set is empty");
    if (remember.images.empty()) throw std::invalid_argument("sa: remember set is empty");
    if (!base.table.has(forget_token)) throw std::invalid_argument("sa: unknown token " + forget_token);

    NamedTensors<T> fisher;
    if (cfg.lambda_ewc > 0.0)
        fisher = estimate_fisher_diag(base, remember, cfg.fisher_samples, derive_seed(cfg.seed, "sa-fisher"));

    DiffusionModelT<T> m = base;
    // reference weights theta* for the penalty
    NamedTensors<T> ref;
    m.net.visit_params([&](const std::string& n, Tensor<T>& w, Tensor<T>&) { ref.emplace(n, w); });

    Rng rng(derive_seed(cfg.seed, "sa-train"));
    Adam<T> opt(cfg.lr);
    auto refs = net_param_refs(m.net);
    const int S = base.net.arch.image_size;
    const nn::Cond<T> forget_cond = base.table.encode_prompt(template_prompt(forget_token));

    auto draw_batch = [&](const LabeledImages& src, int B, bool forget_prompt, Tensor<T>& xt,
                          std::vector<nn::Cond<T>>& conds, std::vector<int>& ts, Tensor<T>& eps) {
        xt = Tensor<T>({B, S, S, 1});
        eps = Tensor<T>({B, S, S, 1});
        ts.assign(static_cast<std::size_t>(B), 0);
        conds.clear();
        for (int b = 0; b < B; ++b) {
            const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(src.size()) - 1));
            const int t = rng.uniform_int(1, base.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(base.sched.alpha_bar(t));
            const double sd = std::sqrt(1.0 - base.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p) {
                const double e = rng.normal();
                eps.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(e);
                xt.v[static_cast<std::size_t>(b) * S * S + p] =
                    static_cast<T>(a * static_cast<double>(src.images[pick].v[static_cast<std::size_t>(p)]) + sd * e);
            }
            if (forget_prompt)
                conds.push_back(forget_cond);
            else
                conds.push_back(
                    base.table.encode_prompt(template_prompt(src.class_tokens[static_cast<std::size_t>(src.labels[pick])])));
        }
    };

    Tensor<T> gy;
    for (int step = 0; step < cfg.steps; ++step) {
        m.net.zero_grads();
        double loss_total = 0;

        // surrogate term: q-images under the forgotten condition
        {
            Tensor<T> xt, eps;
            std::vector<nn::Cond<T>> conds;
            std::vector<int> ts;
            draw_batch(surrogate, cfg.batch, true, xt, conds, ts, eps);
            typename DenoiserT<T>::Cache cache;
            Tensor<T> pred = m.net.forward(xt, conds, ts, cache);
            loss_total += static_cast<double>(denoise_loss(pred, eps, &gy));
            m.net.backward(cache, gy);
        }
        // replay term on the remember set
        if (cfg.replay_batch > 0) {
            Tensor<T> xt, eps;
            std::vector<nn::Cond<T>> conds;
            std::vector<int> ts;
            draw_batch(remember, cfg.replay_batch, false, xt, conds, ts, eps);
            typename DenoiserT<T>::Cache cache;
            Tensor<T> pred = m.net.forward(xt, conds, ts, cache);
            loss_total += static_cast<double>(denoise_loss(pred, eps, &gy));
            m.net.backward(cache, gy);
        }
        // EWC penalty: lambda * F_i (theta_i - theta*_i) added to gradients
        if (cfg.lambda_ewc > 0.0) {
            double pen = 0;
            for (auto& r : refs) {
                const Tensor<T>& F = fisher.at(r.name);
                const Tensor<T>& w0 = ref.at(r.name);
                for (std::size_t i = 0; i < r.w->size(); ++i) {
                    const double dtheta = static_cast<double>(r.w->v[i]) - static_cast<double>(w0.v[i]);
                    r.g->v[i] += static_cast<T>(cfg.lambda_ewc * static_cast<double>(F.v[i]) * dtheta);
                    pen += 0.5 * cfg.lambda_ewc * static_cast<double>(F.v[i]) * dtheta * dtheta;
                }
            }
            loss_total += pen;
        }
        if (curve) curve->push_back(loss_total);
        opt.step(refs);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forget-Me-Not: attention resteering
// ---------------------------------------------------------------------------

struct FmnConfig {
    std::vector<std::string> forget_tokens;
    std::vector<std::string> prompt_template;  // must contain every forget token
    int steps = 150;
    double lr = 5e-4;
    int batch = 4;
    std::uint64_t seed = 0;

    std::vector<int> forget_positions() const {
        std::vector<int> pos;
        for (std::size_t i = 0; i < prompt_template.size(); ++i)
            for (const auto& tok : forget_tokens)
                if (prompt_template[i] == tok) pos.push_back(static_cast<int>(i));
        if (pos.empty()) throw std::invalid_argument("fmn: forget token absent from prompt template");
        return pos;
    }
};

/// Attention resteering loss: the summed squared attention mass at the
/// forget-token positions, over all provided maps. grads (when non-null)
/// receives dLoss/dMap alongside.
template <class T>
T fmn_attention_loss(const std::vector<const Tensor<T>*>& maps, const std::vector<int>& positions,
                     std::vector<Tensor<T>>* grads = nullptr) {
    T loss = 0;
    if (grads) grads->assign(maps.size(), {});
    for (std::size_t mi = 0; mi < maps.size(); ++mi) {
        const Tensor<T>& P = *maps[mi];
        Tensor<T>* g = nullptr;
        if (grads) {
            (*grads)[mi] = Tensor<T>(P.shape);
            g = &(*grads)[mi];
        }
        for (int r = 0; r < P.dim(0); ++r)
            for (int pos : positions) {
                const T a = P.at2(r, pos);
                loss += a * a;
                if (g) g->at2(r, pos) += T(2) * a;
            }
    }
    return loss;
}

/// Minimizes cross-attention mass at the forget-token positions over noised
/// reference images; updates cross-attention parameters only.
template <class T>
DiffusionModelT<T> erase_fmn(const DiffusionModelT<T>& base, const std::vector<Tensor<float>>& reference_images,
                             const FmnConfig& cfg, std::vector<double>* curve = nullptr) {
    if (reference_images.empty()) throw std::invalid_argument("fmn: reference images are empty");
    const std::vector<int> positions = cfg.forget_positions();
    for (const auto& tok : cfg.prompt_template)
        if (!base.table.has(tok)) throw std::invalid_argument("fmn: unknown token " + tok);

    DiffusionModelT<T> m = base;
    Rng rng(derive_seed(cfg.seed, "fmn-train"));
    Adam<T> opt(cfg.lr);
    auto params = esd_param_subset(m.net, EsdVariant::CrossAttention);
    const int S = base.net.arch.image_size;
    const nn::Cond<T> cond = base.table.encode_prompt(cfg.prompt_template);

    for (int step = 0; step < cfg.steps; ++step) {
        const int B = cfg.batch;
        Tensor<T> xt({B, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(reference_images.size()) - 1));
            const int t = rng.uniform_int(1, base.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(base.sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - base.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p)
                xt.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(
                    a * static_cast<double>(reference_images[pick].v[static_cast<std::size_t>(p)]) + s * rng.normal());
        }
        const std::vector<nn::Cond<T>> conds(static_cast<std::size_t>(B), cond);

        typename DenoiserT<T>::Cache cache;
        m.net.forward(xt, conds, ts, cache);

        double loss = 0;
        std::vector<Tensor<T>> inj_full(static_cast<std::size_t>(B)), inj_mid(static_cast<std::size_t>(B));
        const T scale = T(1) / static_cast<T>(B);
        for (int b = 0; b < B; ++b) {
            std::vector<const Tensor<T>*> maps;
            if (m.net.arch.attn_full_res) maps.push_back(&cache.cxa0.attn[static_cast<std::size_t>(b)]);
            maps.push_back(&cache.cxa1.attn[static_cast<std::size_t>(b)]);
            std::vector<Tensor<T>> gmaps;
            loss += static_cast<double>(fmn_attention_loss(maps, positions, &gmaps)) / B;
            std::size_t gi = 0;
            if (m.net.arch.attn_full_res) {
                inj_full[static_cast<std::size_t>(b)] = gmaps[gi++];
                inj_full[static_cast<std::size_t>(b)] *= scale;
            }
            inj_mid[static_cast<std::size_t>(b)] = gmaps[gi];
            inj_mid[static_cast<std::size_t>(b)] *= scale;
        }
        if (curve) curve->push_back(loss);

        Tensor<T> gy_zero({B, S, S, 1});
        typename DenoiserT<T>::BackwardOpts opts;
        if (m.net.arch.attn_full_res) opts.attn_inject_full = &inj_full;
        opts.attn_inject_mid = &inj_mid;
        m.net.zero_grads();
        m.net.backward(cache, gy_zero, opts);
        opt.step(params);
    }
    return m;
}

/// Mean attention mass at a token position while sampling; the before/after
/// diagnostic for attention resteering.
template <class T>
double mean_attention_mass(const DiffusionModelT<T>& m, const std::vector<std::string>& prompt, int position,
                           int n_trajectories, std::uint64_t seed) {
    const nn::Cond<T> cond = m.table.encode_prompt(prompt);
    const int S = m.net.arch.image_size;
    double total = 0;
    long long count = 0;
    for (int i = 0; i < n_trajectories; ++i) {
        Rng rng(derive_seed(seed, "attn-mass", i));
        Tensor<T> x({1, S, S, 1});
        for (auto& v : x.v) v = static_cast<T>(rng.normal());
        for (int t = m.sched.T; t >= 1; t -= 1) {
            typename DenoiserT<T>::Cache cache;
            Tensor<T> eps = m.net.forward(x, {cond}, {t}, cache);
            const auto& P = m.net.arch.attn_full_res ? cache.cxa0.attn[0] : cache.cxa1.attn[0];
            for (int r = 0; r < P.dim(0); ++r) {
                total += static_cast<double>(P.at2(r, position));
                ++count;
            }
            if (m.net.arch.attn_full_res) {
                const auto& P1 = cache.cxa1.attn[0];
                for (int r = 0; r < P1.dim(0); ++r) {
                    total += static_cast<double>(P1.at2(r, position));
                    ++count;
                }
            }
            // plain ancestral step, no guidance
            const double beta = m.sched.beta(t);
            const double ab = m.sched.alpha_bar(t);
            const double ab_prev = m.sched.alpha_bar0(t - 1);
            const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
            const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
            const double sigma = (t > 1) ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
            for (int p = 0; p < S * S; ++p) {
                double x0 = (static_cast<double>(x.v[static_cast<std::size_t>(p)]) -
                             std::sqrt(1.0 - ab) * static_cast<double>(eps.v[static_cast<std::size_t>(p)])) /
                            std::sqrt(ab);
                x0 = std::min(1.0, std::max(-1.0, x0));
                const double z = (t > 1) ? rng.normal() : 0.0;
                x.v[static_cast<std::size_t>(p)] = static_cast<T>(
                    c0 * x0 + ct * static_cast<double>(x.v[static_cast<std::size_t>(p)]) + sigma * z);
            }
        }
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Ablating Concepts
// ---------------------------------------------------------------------------

enum class AcVariant { ModelBased, NoiseBased };
enum class AcScope { CrossAttention, Embedding, Full };

inline AcVariant ac_variant_from_string(const std::string& s) {
    if (s == "model_based") return AcVariant::ModelBased;
    if (s == "noise_based") return AcVariant::NoiseBased;
    throw std::invalid_argument("ac variant must be 'model_based' or 'noise_based'");
}

inline AcScope ac_scope_from_string(const std::string& s) {
    if (s == "cross_attention") return AcScope::CrossAttention;
    if (s == "embedding") return AcScope::Embedding;
    if (s == "full") return AcScope::Full;
    throw std::invalid_argument("ac scope must be 'cross_attention', 'embedding' or 'full'");
}

struct AcConfig {
    AcVariant variant = AcVariant::NoiseBased;
    std::string anchor_token;
    std::string target_token;
    double w_t = 1.0;  // constant time weight
    bool regularize_anchor = true;
    AcScope scope = AcScope::CrossAttention;
    int steps = 400;
    double lr = 1e-4;
    int batch = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (anchor_token == target_token) throw std::invalid_argument("ac: anchor must differ from target");
    }
};

/// Overwrites the target concept with the anchor concept. noise_based trains
/// the standard denoising loss on (target prompt, anchor image) pairs (plus
/// optional anchor regularization); model_based pulls the anchor-conditioned
/// prediction toward the stop-gradient target-conditioned prediction on
/// anchor images, weighted by w_t.
template <class T>
DiffusionModelT<T> erase_ac(const DiffusionModelT<T>& base, const LabeledImages& anchor_images, const AcConfig& cfg,
                            std::vector<double>* curve = nullptr) {
    cfg.validate();
    if (anchor_images.images.empty()) throw std::invalid_argument("ac: anchor image set is empty");
    if (!base.table.has(cfg.anchor_token) || !base.table.has(cfg.target_token))
        throw std::invalid_argument("ac: unknown token");

    DiffusionModelT<T> m = base;
    Rng rng(derive_seed(cfg.seed, "ac-train"));
    Adam<T> opt(cfg.lr);

    std::vector<ParamRef<T>> params;
    switch (cfg.scope) {
        case AcScope::CrossAttention:
            params = esd_param_subset(m.net, EsdVariant::CrossAttention);
            break;
        case AcScope::Full:
            params = net_param_refs(m.net);
            break;
        case AcScope::Embedding: {
            const int i = m.table.idx(cfg.target_token);
            params.push_back({"embedding." + cfg.target_token, &m.table.rows[static_cast<std::size_t>(i)],
                              &m.table.grads[static_cast<std::size_t>(i)]});
            break;
        }
    }

    const int S = base.net.arch.image_size;
    const std::vector<std::string> target_tokens = template_prompt(cfg.target_token);
    const std::vector<std::string> anchor_tokens = template_prompt(cfg.anchor_token);

    Tensor<T> gy;
    for (int step = 0; step < cfg.steps; ++step) {
        const int B = cfg.batch;
        Tensor<T> xt({B, S, S, 1});
        Tensor<T> eps({B, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            const std::size_t pick =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(anchor_images.size()) - 1));
            const int t = rng.uniform_int(1, base.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(base.sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - base.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p) {
                const double e = rng.normal();
                eps.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(e);
                xt.v[static_cast<std::size_t>(b) * S * S + p] = static_cast<T>(
                    a * static_cast<double>(anchor_images.images[pick].v[static_cast<std::size_t>(p)]) + s * e);
            }
        }

        m.net.zero_grads();
        m.table.zero_grads();
        double loss = 0;
        std::vector<Tensor<T>> cgrads;
        typename DenoiserT<T>::BackwardOpts opts;
        if (cfg.scope == AcScope::Embedding) opts.cond_grads = &cgrads;

        if (cfg.variant == AcVariant::NoiseBased) {
            // (target prompt, anchor image) with the standard loss
            std::vector<nn::Cond<T>> conds(static_cast<std::size_t>(B), m.table.encode_prompt(target_tokens));
            typename DenoiserT<T>::Cache cache;
            Tensor<T> pred = m.net.forward(xt, conds, ts, cache);
            loss += static_cast<double>(denoise_loss(pred, eps, &gy));
            cgrads.assign(static_cast<std::size_t>(B), {});
            m.net.backward(cache, gy, opts);
            if (cfg.scope == AcScope::Embedding)
                scatter_cond_grads(m.table, std::vector<std::vector<std::string>>(static_cast<std::size_t>(B), target_tokens),
                                   cgrads);
            if (cfg.regularize_anchor) {
                std::vector<nn::Cond<T>> aconds(static_cast<std::size_t>(B), m.table.encode_prompt(anchor_tokens));
                typename DenoiserT<T>::Cache c2;
                Tensor<T> pred2 = m.net.forward(xt, aconds, ts, c2);
                loss += static_cast<double>(denoise_loss(pred2, eps, &gy));
                std::vector<Tensor<T>> cg2(static_cast<std::size_t>(B));
                typename DenoiserT<T>::BackwardOpts o2;
                if (cfg.scope == AcScope::Embedding) o2.cond_grads = &cg2;
                m.net.backward(c2, gy, o2);
                // anchor rows are not trainable in embedding scope; grads discarded there
            }
        } else {
            // model_based: stop-gradient target-conditioned branch is the
            // pull target for the anchor-conditioned branch
            std::vector<nn::Cond<T>> tconds(static_cast<std::size_t>(B), m.table.encode_prompt(target_tokens));
            typename DenoiserT<T>::Cache ct_cache;
            Tensor<T> target_pred = m.net.forward(xt, tconds, ts, ct_cache);  // .sg()

            std::vector<nn::Cond<T>> aconds(static_cast<std::size_t>(B), m.table.encode_prompt(anchor_tokens));
            typename DenoiserT<T>::Cache ca_cache;
            Tensor<T> anchor_pred = m.net.forward(xt, aconds, ts, ca_cache);

            const T raw = denoise_loss(anchor_pred, target_pred, &gy);
            loss += cfg.w_t * static_cast<double>(raw);
            for (auto& g : gy.v) g *= static_cast<T>(cfg.w_t);
            cgrads.assign(static_cast<std::size_t>(B), {});
            m.net.backward(ca_cache, gy, opts);
            if (cfg.scope == AcScope::Embedding)
                scatter_cond_grads(m.table, std::vector<std::vector<std::string>>(static_cast<std::size_t>(B), anchor_tokens),
                                   cgrads);
        }
        if (curve) curve->push_back(loss);
        opt.step(params);
    }
    return m;
}

}  // namespace elab
