#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "elab/tensor.hpp"

namespace elab {

template <class T>
struct ParamRef {
    std::string name;
    Tensor<T>* w = nullptr;
    Tensor<T>* g = nullptr;
};

/// Adam with bias correction. State is keyed by canonical parameter name so
/// the set of updated parameters may vary between calls (frozen subsets).
template <class T>
class Adam {
   public:
    explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(const std::vector<ParamRef<T>>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (const auto& p : params) {
            Tensor<T>& m = state(m_, p);
            Tensor<T>& v = state(v_, p);
            for (std::size_t i = 0; i < p.w->size(); ++i) {
                const double g = static_cast<double>(p.g->v[i]);
                const double mi = b1_ * static_cast<double>(m.v[i]) + (1.0 - b1_) * g;
                const double vi = b2_ * static_cast<double>(v.v[i]) + (1.0 - b2_) * g * g;
                m.v[i] = static_cast<T>(mi);
                v.v[i] = static_cast<T>(vi);
                p.w->v[i] -= static_cast<T>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
            }
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

   private:
    Tensor<T>& state(std::map<std::string, Tensor<T>>& store, const ParamRef<T>& p) {
        auto it = store.find(p.name);
        if (it == store.end()) it = store.emplace(p.name, Tensor<T>(p.w->shape)).first;
        return it->second;
    }

    double lr_, b1_, b2_, eps_;
    long long t_ = 0;
    std::map<std::string, Tensor<T>> m_, v_;
};

}  // namespace elab
