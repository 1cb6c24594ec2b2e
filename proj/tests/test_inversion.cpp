#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elab/inversion.hpp"
#include "test_util.hpp"

using namespace elab;
using namespace elab::test;

namespace {

DiffusionModelT<double> tiny_model(std::uint64_t seed = 77) {
    Arch a = tiny_arch();
    auto table = make_vocab<double>({"<digit-0>", "<digit-1>"}, a.cond_dim, 21);
    auto sched = make_schedule(8, ScheduleKind::Linear, 1e-3, 0.05);
    DiffusionModelT<double> m(a, table, sched);
    m.net.init(seed);
    Rng r(5);
    for (auto& w : m.net.xa0.Wo.v) w = r.normal() * 0.3;
    for (auto& w : m.net.xa1.Wo.v) w = r.normal() * 0.3;
    return m;
}

std::vector<Tensor<float>> tiny_examples(int n, std::uint64_t seed) {
    auto d = render_digits(2, 8, seed).only_class(0, static_cast<std::size_t>(n));
    return d.images;
}

/// dLoss/dPlaceholderRow via the model's backward + scatter, for an
/// arbitrary loss described by its upstream gradient on the c_* branch.
Tensor<double> row_grad_from_backward(DiffusionModelT<double>& m, typename DenoiserT<double>::Cache& cache,
                                      const Tensor<double>& gy, const std::vector<std::string>& prompt,
                                      const std::string& placeholder) {
    std::vector<Tensor<double>> cgrads(1);
    typename DenoiserT<double>::BackwardOpts opts;
    opts.cond_grads = &cgrads;
    m.net.zero_grads();
    m.table.zero_grads();
    m.net.backward(cache, gy, opts);
    scatter_cond_grads(m.table, {prompt}, cgrads);
    return m.table.grad(placeholder);
}

}  // namespace

TEST_CASE("ti loss gradient wrt the placeholder embedding matches finite differences") {
    auto m = tiny_model();
    m.table.add_placeholder("<ci:v>", TokenTableT<double>::PlaceholderInit::Random, 3);
    const auto prompt = template_prompt("<ci:v>");
    const int S = m.net.arch.image_size;

    Rng rng(9);
    Tensor<double> xt({1, S, S, 1}), eps({1, S, S, 1});
    for (auto& v : xt.v) v = rng.normal();
    for (auto& v : eps.v) v = rng.normal();
    const int t = 5;

    auto loss = [&]() {
        typename DenoiserT<double>::Cache c;
        auto pred = m.net.forward(xt, {m.table.encode_prompt(prompt)}, {t}, c);
        return static_cast<double>(denoise_loss<double>(pred, eps, nullptr));
    };

    typename DenoiserT<double>::Cache cache;
    auto pred = m.net.forward(xt, {m.table.encode_prompt(prompt)}, {t}, cache);
    Tensor<double> gy;
    denoise_loss(pred, eps, &gy);
    auto grad = row_grad_from_backward(m, cache, gy, prompt, "<ci:v>");

    auto& row = m.table.row("<ci:v>");
    double max_rel = 0;
    for (int i = 0; i < m.table.d; ++i) {
        const double fd = central_diff(loss, &row.v[static_cast<std::size_t>(i)], 1e-5);
        max_rel = std::max(max_rel, rel_err(grad.v[static_cast<std::size_t>(i)], fd));
    }
    CHECK(max_rel <= 1e-4);
}

TEST_CASE("np-ci objective: gradient and the naive-copy identity") {
    auto m = tiny_model();
    m.table.add_placeholder("<ci:v>", TokenTableT<double>::PlaceholderInit::Random, 4);
    const int S = m.net.arch.image_size;
    const double alpha = 2.5;
    const auto star_prompt = template_prompt("<ci:v>");
    const auto c_prompt = template_prompt("<digit-1>");

    Rng rng(11);
    Tensor<double> xt({1, S, S, 1});
    for (auto& v : xt.v) v = rng.normal();
    const int t = 4;

    const auto eps_u = predict_noise(m, xt, std::vector<nn::Cond<double>>{m.table.null_condition()}, {t});
    const auto eps_c = predict_noise(m, xt, std::vector<nn::Cond<double>>{m.table.encode_prompt(c_prompt)}, {t});

    auto loss = [&]() {
        typename DenoiserT<double>::Cache c;
        auto eps_s = m.net.forward(xt, {m.table.encode_prompt(star_prompt)}, {t}, c);
        auto target = cfg_combine(eps_u, eps_c, alpha);
        auto guided = np_combine(eps_c, eps_s, alpha);
        return static_cast<double>(denoise_loss<double>(guided, target, nullptr));
    };

    SUBCASE("gradient matches finite differences") {
        typename DenoiserT<double>::Cache cache;
        auto eps_s = m.net.forward(xt, {m.table.encode_prompt(star_prompt)}, {t}, cache);
        auto target = cfg_combine(eps_u, eps_c, alpha);
        auto guided = np_combine(eps_c, eps_s, alpha);
        Tensor<double> gy;
        denoise_loss(guided, target, &gy);
        for (auto& g : gy.v) g *= alpha;
        auto grad = row_grad_from_backward(m, cache, gy, star_prompt, "<ci:v>");

        auto& row = m.table.row("<ci:v>");
        double max_rel = 0;
        for (int i = 0; i < m.table.d; ++i) {
            const double fd = central_diff(loss, &row.v[static_cast<std::size_t>(i)], 1e-5);
            max_rel = std::max(max_rel, rel_err(grad.v[static_cast<std::size_t>(i)], fd));
        }
        CHECK(max_rel <= 1e-4);
    }

    SUBCASE("v_* = v_c gives loss (1-alpha)^2 ||eps_u - eps_c||^2 / N, not zero") {
        m.table.row("<ci:v>") = m.table.row("<digit-1>");
        const double got = loss();
        const double expect = (1 - alpha) * (1 - alpha) * static_cast<double>(mse(eps_u, eps_c));
        CHECK(got == doctest::Approx(expect).epsilon(1e-10));
        CHECK(got > 1e-12);  // the naive copy is not the minimizer for alpha != 1
    }
}

TEST_CASE("sld-ci window: degeneration, gamma-trace oracle, gradient, memory cap") {
    auto m = tiny_model();
    m.table.add_placeholder("<ci:v>", TokenTableT<double>::PlaceholderInit::Random, 6);
    const int S = m.net.arch.image_size;
    const auto star_prompt = template_prompt("<ci:v>");
    const auto concept_cond = m.table.encode_prompt(bare_prompt("<digit-1>"));
    const auto null_cond = m.table.null_condition();
    const double alpha = 3.0;

    GuidanceSpecT<double> spec;
    spec.mode = GuidanceMode::Sld;
    spec.neg_condition = concept_cond;
    spec.sld.mu = 2.0;
    spec.sld.s_S = 10.0;
    spec.sld.lambda_safe = 1.0;
    spec.sld.s_m = 0.5;
    spec.sld.zeta_m = 0.7;
    spec.sld.delta = 0;

    auto x0 = render_digits(1, 8, 5).only_class(1, 1).images[0];
    Rng rng(13);
    Tensor<double> eps_draw({1, S, S, 1});
    for (auto& e : eps_draw.v) e = rng.normal();

    SUBCASE("single visited timestep degenerates to the gamma-free mismatch") {
        InversionConfig cfg;
        cfg.window_m = 4;
        cfg.window_n = 4;
        cfg.window_k = 1;
        cfg.seed = 2;
        const double got =
            sld_ci_window_loss<double>(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg, nullptr);

        Tensor<double> xt({1, S, S, 1});
        const double a = std::sqrt(m.sched.alpha_bar(4)), sd = std::sqrt(1 - m.sched.alpha_bar(4));
        for (std::size_t p = 0; p < xt.size(); ++p)
            xt.v[p] = a * static_cast<double>(x0.v[p]) + sd * eps_draw.v[p];
        typename DenoiserT<double>::Cache c;
        auto eps_u = m.net.forward(xt, {null_cond}, {4}, c);
        auto eps_c = m.net.forward(xt, {concept_cond}, {4}, c);
        auto eps_s = m.net.forward(xt, {m.table.encode_prompt(star_prompt)}, {4}, c);
        auto target = cfg_combine(eps_u, eps_c, alpha);
        auto guided = cfg_combine(eps_u, eps_s, spec.sld.mu);  // gamma = 0
        const double expect = static_cast<double>(denoise_loss<double>(guided, target, nullptr));
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    }

    SUBCASE("full-stride gamma sequence equals an independent recursion oracle") {
        InversionConfig cfg;
        cfg.window_m = 1;
        cfg.window_n = m.sched.T;
        cfg.window_k = 1;
        cfg.seed = 2;
        std::vector<Tensor<double>> trace;
        sld_ci_window_loss<double>(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg, nullptr,
                                   nullptr, &trace);
        REQUIRE(static_cast<int>(trace.size()) == m.sched.T);

        // oracle: direct recursion with fresh forward passes
        Tensor<double> mom({1, S, S, 1});
        for (int t = 1; t <= m.sched.T; ++t) {
            Tensor<double> xt({1, S, S, 1});
            const double a = std::sqrt(m.sched.alpha_bar(t)), sd = std::sqrt(1 - m.sched.alpha_bar(t));
            for (std::size_t p = 0; p < xt.size(); ++p)
                xt.v[p] = a * static_cast<double>(x0.v[p]) + sd * eps_draw.v[p];
            typename DenoiserT<double>::Cache c;
            auto eps_u = m.net.forward(xt, {null_cond}, {t}, c);
            auto eps_c = m.net.forward(xt, {concept_cond}, {t}, c);
            auto eps_s = m.net.forward(xt, {m.table.encode_prompt(star_prompt)}, {t}, c);
            Tensor<double> gamma(eps_u.shape);
            for (std::size_t i = 0; i < gamma.size(); ++i) {
                const double d = eps_s.v[i] - eps_c.v[i];
                const double beta = std::abs(d) <= spec.sld.lambda_safe
                                        ? std::max(1.0, std::abs(spec.sld.s_S * d))
                                        : 0.0;
                gamma.v[i] = beta * (eps_s.v[i] - eps_u.v[i]) + spec.sld.s_m * mom.v[i];
                mom.v[i] = spec.sld.zeta_m * mom.v[i] + (1 - spec.sld.zeta_m) * gamma.v[i];
            }
            CHECK(max_abs_diff(gamma, trace[static_cast<std::size_t>(t - 1)]) <= 1e-10);
        }
    }

    SUBCASE("windowed loss gradient matches finite differences through the recursion") {
        InversionConfig cfg;
        cfg.window_m = 2;
        cfg.window_n = 8;
        cfg.window_k = 2;  // visits 2, 4, 6, 8
        cfg.seed = 2;
        spec.sld.delta = 1;  // exercise the warm-up branch too

        Tensor<double> grad({m.table.d});
        sld_ci_window_loss(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg, &grad);

        std::function<double()> loss = [&]() {
            return sld_ci_window_loss<double>(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg,
                                              nullptr);
        };
        auto& row = m.table.row("<ci:v>");
        double max_rel = 0;
        for (int i = 0; i < m.table.d; ++i) {
            const double fd = central_diff(loss, &row.v[static_cast<std::size_t>(i)], 1e-6);
            max_rel = std::max(max_rel, rel_err(grad.v[static_cast<std::size_t>(i)], fd));
        }
        CHECK(max_rel <= 1e-4);
    }

    SUBCASE("stored terms respect the memory cap") {
        InversionConfig cfg;
        cfg.window_m = 1;
        cfg.window_n = 8;
        cfg.window_k = 2;  // 4 visits
        cfg.seed = 2;
        CHECK(cfg.cap() == 5);  // ceil(7/2) + 1
        int peak = 0;
        Tensor<double> grad({m.table.d});
        sld_ci_window_loss(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg, &grad, &peak);
        CHECK(peak == 4);
        CHECK(peak <= cfg.cap());

        cfg.memory_cap = 3;  // tighter than the window needs
        CHECK_THROWS(
            sld_ci_window_loss(m, star_prompt, concept_cond, null_cond, x0, eps_draw, alpha, spec, cfg, &grad, &peak));
    }

    SUBCASE("window validation") {
        InversionConfig cfg;
        cfg.window_m = 0;
        CHECK_THROWS(cfg.validate(m.sched.T));
        cfg.window_m = 3;
        cfg.window_n = 2;
        CHECK_THROWS(cfg.validate(m.sched.T));
        cfg.window_n = 100;
        CHECK_THROWS(cfg.validate(m.sched.T));
    }
}

TEST_CASE("attacks leave the frozen weights and non-placeholder rows bit-identical") {
    auto m = tiny_model();
    const auto h_net = m.net.param_hash();
    const auto h_rows = m.table.non_placeholder_hash();
    auto examples = tiny_examples(2, 31);

    InversionConfig cfg;
    cfg.steps = 3;
    cfg.batch = 1;
    cfg.lr = 5e-3;
    cfg.seed = 12;
    cfg.window_m = 2;
    cfg.window_n = 6;
    cfg.window_k = 2;

    auto r1 = invert_ti(m, examples, cfg);
    CHECK(m.net.param_hash() == h_net);
    auto r2 = invert_np(m, "<digit-0>", examples, 3.0, cfg);
    GuidanceSpecT<double> spec;
    spec.mode = GuidanceMode::Sld;
    spec.neg_condition = m.table.encode_prompt(bare_prompt("<digit-0>"));
    spec.sld = sld_variant(SldVariant::Medium, 3.0);
    auto r3 = invert_sld(m, spec, "<digit-0>", examples, 3.0, cfg);
    CHECK(m.net.param_hash() == h_net);
    CHECK(m.table.non_placeholder_hash() == h_rows);

    CHECK(r1.embedding.dim(0) == m.table.d);
    CHECK(r2.curve.size() == 3);
    CHECK(r3.peak_stored_terms == 3);

    SUBCASE("empty example set rejected") {
        std::vector<Tensor<float>> none;
        CHECK_THROWS(invert_ti(m, none, cfg));
        CHECK_THROWS(invert_np(m, "<digit-0>", none, 3.0, cfg));
        CHECK_THROWS(invert_sld(m, spec, "<digit-0>", none, 3.0, cfg));
    }
    SUBCASE("sld-ci requires an sld spec") {
        GuidanceSpecT<double> bad;
        bad.mode = GuidanceMode::Cfg;
        CHECK_THROWS(invert_sld(m, bad, "<digit-0>", examples, 3.0, cfg));
    }
}

TEST_CASE("install_embedding validates dimensions and freezes the row") {
    auto m = tiny_model();
    Tensor<double> good({m.table.d});
    good.v[0] = 1.0;
    auto m2 = install_embedding(m, "<ci:x>", good);
    CHECK(m2.table.has("<ci:x>"));
    CHECK(m2.table.is_frozen("<ci:x>"));
    CHECK(m2.table.row("<ci:x>").v[0] == 1.0);
    Tensor<double> bad({m.table.d + 1});
    CHECK_THROWS(install_embedding(m, "<ci:y>", bad));
}
