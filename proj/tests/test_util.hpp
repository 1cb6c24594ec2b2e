#pragma once

#include <functional>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/denoiser.hpp"
#include "elab/rng.hpp"
#include "elab/tensor.hpp"

namespace elab::test {

inline Arch tiny_arch() {
    Arch a;
    a.image_size = 8;
    a.base_channels = 4;
    a.mid_channels = 8;
    a.cond_dim = 12;
    a.time_dim = 16;
    a.attn_dim = 8;
    a.gn_groups = 2;
    a.attn_full_res = true;
    return a;
}

template <class T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * scale);
    return t;
}

template <class T>
std::vector<ParamRef<T>> collect_params(DenoiserT<T>& m) {
    std::vector<ParamRef<T>> out;
    m.visit_params([&](const std::string& n, Tensor<T>& w, Tensor<T>& g) { out.push_back({n, &w, &g}); });
    return out;
}

/// Central finite difference of a scalar function at one coordinate.
inline double central_diff(const std::function<double()>& f, double* coord, double h) {
    const double saved = *coord;
    *coord = saved + h;
    const double fp = f();
    *coord = saved - h;
    const double fm = f();
    *coord = saved;
    return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-10});
    return std::abs(a - b) / denom;
}

}  // namespace elab::test
