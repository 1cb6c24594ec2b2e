#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "elab/nn_layers.hpp"
#include "elab/tensor.hpp"

namespace elab::nn {

/// A condition is a sequence of token embedding vectors, shape [L, d].
template <class T>
using Cond = Tensor<T>;

/// Single-head cross-attention over condition tokens, with a residual
/// connection. Queries come from image pixels (channels-last), keys and
/// values from the condition sequence. Attention probabilities are kept in
/// the cache so callers can inspect them (and losses can differentiate
/// through them directly).
template <class T>
struct CrossAttention {
    int C = 0;  // image channels
    int d = 0;  // condition embedding dimension
    int A = 0;  // attention dimension
    Tensor<T> Wq, Wk, Wv, Wo;
    Tensor<T> gWq, gWk, gWv, gWo;

    CrossAttention() = default;
    CrossAttention(int C_, int d_, int A_) : C(C_), d(d_), A(A_) {
        Wq = Tensor<T>({C, A});
        Wk = Tensor<T>({d, A});
        Wv = Tensor<T>({d, A});
        Wo = Tensor<T>({A, C});
        gWq = Tensor<T>({C, A});
        gWk = Tensor<T>({d, A});
        gWv = Tensor<T>({d, A});
        gWo = Tensor<T>({A, C});
    }

    void init(Rng& rng) {
        auto gauss = [&](Tensor<T>& W, int fan_in) {
            const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& w : W.v) w = static_cast<T>(rng.normal() * s);
        };
        gauss(Wq, C);
        gauss(Wk, d);
        gauss(Wv, d);
        gauss(Wo, A);
    }

    struct Cache {
        Tensor<T> x;                   // input [B, H, W, C] (pre-residual)
        Tensor<T> Q;                   // [B*HW, A]
        std::vector<Tensor<T>> K, V;   // per sample [L, A]
        std::vector<Tensor<T>> attn;   // per sample [HW, L] softmax probabilities
        std::vector<Tensor<T>> O;      // per sample [HW, A]
        std::vector<Tensor<T>> conds;  // copies; callers may pass temporaries
        int B = 0, HW = 0;
    };

    Tensor<T> forward(const Tensor<T>& x, const std::vector<Cond<T>>& conds, Cache& c) const {
        const int B = x.dim(0), H = x.dim(1), Wi = x.dim(2);
        if (static_cast<int>(conds.size()) != B) throw std::invalid_argument("cross-attention: condition count != batch");
        const int HW = H * Wi;
        c.x = x;
        c.B = B;
        c.HW = HW;
        c.K.assign(B, {});
        c.V.assign(B, {});
        c.attn.assign(B, {});
        c.O.assign(B, {});
        c.conds.assign(B, {});

        c.Q = Tensor<T>({B * HW, A});
        c.Q.mat(B * HW, A).noalias() = x.mat(B * HW, C) * Wq.mat(C, A);

        const T scale = T(1) / std::sqrt(static_cast<T>(A));
        Tensor<T> y(x.shape);
        for (int bb = 0; bb < B; ++bb) {
            const Tensor<T>& e = conds[static_cast<std::size_t>(bb)];
            if (e.rank() != 2 || e.dim(1) != d) throw std::invalid_argument("cross-attention: bad condition shape");
            const int L = e.dim(0);
            c.conds[static_cast<std::size_t>(bb)] = e;
            Tensor<T>& K = c.K[static_cast<std::size_t>(bb)];
            Tensor<T>& V = c.V[static_cast<std::size_t>(bb)];
            K = Tensor<T>({L, A});
            V = Tensor<T>({L, A});
            K.mat(L, A).noalias() = e.mat(L, d) * Wk.mat(d, A);
            V.mat(L, A).noalias() = e.mat(L, d) * Wv.mat(d, A);

            Tensor<T>& P = c.attn[static_cast<std::size_t>(bb)];
            P = Tensor<T>({HW, L});
            {
                auto Qb = typename Tensor<T>::CMapMat(c.Q.data() + static_cast<std::size_t>(bb) * HW * A, HW, A);
                P.mat(HW, L).noalias() = Qb * K.mat(L, A).transpose() * scale;
            }
            // row-wise softmax
            for (int r = 0; r < HW; ++r) {
                T mx = P.at2(r, 0);
                for (int l = 1; l < L; ++l) mx = std::max(mx, P.at2(r, l));
                T sum = 0;
                for (int l = 0; l < L; ++l) {
                    const T ex = std::exp(P.at2(r, l) - mx);
                    P.at2(r, l) = ex;
                    sum += ex;
                }
                for (int l = 0; l < L; ++l) P.at2(r, l) /= sum;
            }

            Tensor<T>& O = c.O[static_cast<std::size_t>(bb)];
            O = Tensor<T>({HW, A});
            O.mat(HW, A).noalias() = P.mat(HW, L) * V.mat(L, A);

            auto yb = typename Tensor<T>::MapMat(y.data() + static_cast<std::size_t>(bb) * HW * C, HW, C);
            auto xb = typename Tensor<T>::CMapMat(x.data() + static_cast<std::size_t>(bb) * HW * C, HW, C);
            yb.noalias() = xb + O.mat(HW, A) * Wo.mat(A, C);
        }
        return y;
    }

    /// Backward pass. `attn_grad_inject`, when non-null, holds an extra
    /// dLoss/dP per sample (shape [HW, L]) added on top of the upstream
    /// path; this is how attention-map losses reach the parameters.
    /// `cond_grads`, when non-null, accumulates dLoss/dE per sample.
    Tensor<T> backward(const Tensor<T>& gy, const Cache& c,
                       std::vector<Tensor<T>>* cond_grads = nullptr,
                       const std::vector<Tensor<T>>* attn_grad_inject = nullptr) {
        const int B = c.B, HW = c.HW;
        Tensor<T> gx(c.x.shape);
        const T scale = T(1) / std::sqrt(static_cast<T>(A));

        Tensor<T> gQ({B * HW, A});
        for (int bb = 0; bb < B; ++bb) {
            const Tensor<T>& e = c.conds[static_cast<std::size_t>(bb)];
            const int L = e.dim(0);
            const Tensor<T>& K = c.K[static_cast<std::size_t>(bb)];
            const Tensor<T>& V = c.V[static_cast<std::size_t>(bb)];
            const Tensor<T>& P = c.attn[static_cast<std::size_t>(bb)];
            const Tensor<T>& O = c.O[static_cast<std::size_t>(bb)];

            auto gyb = typename Tensor<T>::CMapMat(gy.data() + static_cast<std::size_t>(bb) * HW * C, HW, C);

            // y = x + O Wo
            Tensor<T> gO({HW, A});
            gO.mat(HW, A).noalias() = gyb * Wo.mat(A, C).transpose();
            gWo.mat(A, C).noalias() += O.mat(HW, A).transpose() * gyb;

            Tensor<T> gP({HW, L});
            gP.mat(HW, L).noalias() = gO.mat(HW, A) * V.mat(L, A).transpose();
            if (attn_grad_inject) {
                const Tensor<T>& inj = (*attn_grad_inject)[static_cast<std::size_t>(bb)];
                if (!inj.empty()) {
                    if (inj.shape != P.shape) throw std::invalid_argument("attention grad inject shape mismatch");
                    gP += inj;
                }
            }

            Tensor<T> gV({L, A});
            gV.mat(L, A).noalias() = P.mat(HW, L).transpose() * gO.mat(HW, A);

            // softmax backward: gS = P .* (gP - rowsum(gP .* P))
            Tensor<T> gS({HW, L});
            for (int r = 0; r < HW; ++r) {
                T dot = 0;
                for (int l = 0; l < L; ++l) dot += gP.at2(r, l) * P.at2(r, l);
                for (int l = 0; l < L; ++l) gS.at2(r, l) = P.at2(r, l) * (gP.at2(r, l) - dot);
            }

            auto gQb = typename Tensor<T>::MapMat(gQ.data() + static_cast<std::size_t>(bb) * HW * A, HW, A);
            gQb.noalias() = gS.mat(HW, L) * K.mat(L, A) * scale;

            Tensor<T> gK({L, A});
            {
                auto Qb = typename Tensor<T>::CMapMat(c.Q.data() + static_cast<std::size_t>(bb) * HW * A, HW, A);
                gK.mat(L, A).noalias() = gS.mat(HW, L).transpose() * Qb * scale;
            }

            gWk.mat(d, A).noalias() += e.mat(L, d).transpose() * gK.mat(L, A);
            gWv.mat(d, A).noalias() += e.mat(L, d).transpose() * gV.mat(L, A);
            if (cond_grads) {
                Tensor<T>& ge = (*cond_grads)[static_cast<std::size_t>(bb)];
                if (ge.empty()) ge = Tensor<T>({L, d});
                ge.mat(L, d).noalias() += gK.mat(L, A) * Wk.mat(d, A).transpose() + gV.mat(L, A) * Wv.mat(d, A).transpose();
            }
        }

        gWq.mat(C, A).noalias() += c.x.mat(B * HW, C).transpose() * gQ.mat(B * HW, A);
        gx.mat(B * HW, C).noalias() = gy.mat(B * HW, C) + gQ.mat(B * HW, A) * Wq.mat(C, A).transpose();
        return gx;
    }

    void visit(const std::string& prefix, const ParamFn<T>& fn) {
        fn(prefix + ".Wq", Wq, gWq);
        fn(prefix + ".Wk", Wk, gWk);
        fn(prefix + ".Wv", Wv, gWv);
        fn(prefix + ".Wo", Wo, gWo);
    }
};

}  // namespace elab::nn
