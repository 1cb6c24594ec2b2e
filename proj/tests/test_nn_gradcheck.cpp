#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elab/conditioning.hpp"
#include "elab/denoiser.hpp"
#include "test_util.hpp"

using namespace elab;
using namespace elab::test;

namespace {

struct Fixture {
    Arch arch = tiny_arch();
    DenoiserT<double> model{arch};
    std::vector<nn::Cond<double>> conds;
    std::vector<int> ts;
    Tensor<double> x, target;

    Fixture() {
        model.init(7);
        // zero-initialized attention outputs would hide the attention path
        // from the gradient check, so perturb them
        Rng r(11);
        for (auto& w : model.xa0.Wo.v) w = r.normal() * 0.2;
        for (auto& w : model.xa1.Wo.v) w = r.normal() * 0.2;

        Rng rng(3);
        const int B = 2;
        x = random_tensor<double>({B, arch.image_size, arch.image_size, 1}, rng);
        target = random_tensor<double>({B, arch.image_size, arch.image_size, 1}, rng);
        conds.push_back(random_tensor<double>({3, arch.cond_dim}, rng));
        conds.push_back(random_tensor<double>({1, arch.cond_dim}, rng));
        ts = {2, 5};
    }

    double loss() {
        typename DenoiserT<double>::Cache c;
        return mse(model.forward(x, conds, ts, c), target);
    }
};

}  // namespace

TEST_CASE("denoiser parameter gradients match central finite differences") {
    Fixture f;

    typename DenoiserT<double>::Cache cache;
    Tensor<double> pred = f.model.forward(f.x, f.conds, f.ts, cache);
    Tensor<double> gy(pred.shape);
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) gy.v[i] = 2.0 * (pred.v[i] - f.target.v[i]) / n;
    f.model.zero_grads();
    f.model.backward(cache, gy);

    auto params = collect_params(f.model);
    Rng pick(99);
    int checked = 0;
    for (const auto& p : params) {
        // every tensor is probed at a few random coordinates
        const int probes = std::min<int>(3, static_cast<int>(p.w->size()));
        for (int q = 0; q < probes; ++q) {
            const std::size_t i = pick.next_u64() % p.w->size();
            const double fd = central_diff([&] { return f.loss(); }, &p.w->v[i], 1e-5);
            const double an = p.g->v[i];
            INFO(p.name, "[", i, "] analytic=", an, " fd=", fd);
            if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) continue;
            CHECK(rel_err(an, fd) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 40);
}

TEST_CASE("condition-embedding gradients match finite differences") {
    Fixture f;

    typename DenoiserT<double>::Cache cache;
    Tensor<double> pred = f.model.forward(f.x, f.conds, f.ts, cache);
    Tensor<double> gy(pred.shape);
    const double n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) gy.v[i] = 2.0 * (pred.v[i] - f.target.v[i]) / n;

    std::vector<Tensor<double>> cgrads(2);
    typename DenoiserT<double>::BackwardOpts opts;
    opts.cond_grads = &cgrads;
    f.model.zero_grads();
    f.model.backward(cache, gy, opts);

    Rng pick(123);
    for (int b = 0; b < 2; ++b) {
        for (int q = 0; q < 6; ++q) {
            const std::size_t i = pick.next_u64() % f.conds[b].size();
            const double fd = central_diff([&] { return f.loss(); }, &f.conds[b].v[i], 1e-5);
            CHECK(rel_err(cgrads[b].v[i], fd) < 1e-4);
        }
    }
}

TEST_CASE("attention-map losses reach parameters through the inject path") {
    Fixture f;

    // loss = sum of squared attention probabilities at token position 0,
    // over both attention blocks (the resteering loss shape)
    auto attn_loss = [&]() {
        typename DenoiserT<double>::Cache c;
        f.model.forward(f.x, f.conds, f.ts, c);
        double acc = 0;
        for (int b = 0; b < 2; ++b) {
            const auto& p0 = c.cxa0.attn[b];
            const auto& p1 = c.cxa1.attn[b];
            for (int r = 0; r < p0.dim(0); ++r) acc += p0.at2(r, 0) * p0.at2(r, 0);
            for (int r = 0; r < p1.dim(0); ++r) acc += p1.at2(r, 0) * p1.at2(r, 0);
        }
        return acc;
    };

    typename DenoiserT<double>::Cache cache;
    f.model.forward(f.x, f.conds, f.ts, cache);
    std::vector<Tensor<double>> inj0(2), inj1(2);
    for (int b = 0; b < 2; ++b) {
        inj0[b] = Tensor<double>(cache.cxa0.attn[b].shape);
        inj1[b] = Tensor<double>(cache.cxa1.attn[b].shape);
        for (int r = 0; r < inj0[b].dim(0); ++r) inj0[b].at2(r, 0) = 2.0 * cache.cxa0.attn[b].at2(r, 0);
        for (int r = 0; r < inj1[b].dim(0); ++r) inj1[b].at2(r, 0) = 2.0 * cache.cxa1.attn[b].at2(r, 0);
    }
    Tensor<double> gy_zero(std::vector<int>{2, f.arch.image_size, f.arch.image_size, 1});
    typename DenoiserT<double>::BackwardOpts opts;
    opts.attn_inject_full = &inj0;
    opts.attn_inject_mid = &inj1;
    f.model.zero_grads();
    f.model.backward(cache, gy_zero, opts);

    auto params = collect_params(f.model);
    Rng pick(5);
    int checked = 0;
    for (const auto& p : params) {
        if (!is_cross_attention_param(p.name) && p.name.rfind("stem", 0) != 0) continue;
        for (int q = 0; q < 3; ++q) {
            const std::size_t i = pick.next_u64() % p.w->size();
            const double fd = central_diff(attn_loss, &p.w->v[i], 1e-5);
            const double an = p.g->v[i];
            if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) continue;
            CHECK(rel_err(an, fd) < 1e-4);
            ++checked;
        }
    }
    CHECK(checked > 10);
}

TEST_CASE("forward is deterministic and shape-preserving") {
    Fixture f;
    typename DenoiserT<double>::Cache c1, c2;
    Tensor<double> a = f.model.forward(f.x, f.conds, f.ts, c1);
    Tensor<double> b = f.model.forward(f.x, f.conds, f.ts, c2);
    CHECK(bit_equal(a, b));
    CHECK(a.shape == f.x.shape);
}
