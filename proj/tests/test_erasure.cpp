#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include "elab/erasure.hpp"
#include "test_util.hpp"

using namespace elab;
using namespace elab::test;

namespace {

DiffusionModelT<double> tiny_model(std::uint64_t seed = 77) {
    Arch a = tiny_arch();
    auto table = make_vocab<double>({"<digit-0>", "<digit-1>", "<digit-2>"}, a.cond_dim, 21);
    auto sched = make_schedule(8, ScheduleKind::Linear, 1e-3, 0.05);
    DiffusionModelT<double> m(a, table, sched);
    m.net.init(seed);
    Rng r(5);
    for (auto& w : m.net.xa0.Wo.v) w = r.normal() * 0.3;
    for (auto& w : m.net.xa1.Wo.v) w = r.normal() * 0.3;
    return m;
}

LabeledImages tiny_images(int per_class, std::uint64_t seed) {
    LabeledImages d = render_digits(per_class, 8, seed);
    return d;
}

template <class T>
std::map<std::string, Tensor<T>> snapshot(DiffusionModelT<T>& m) {
    std::map<std::string, Tensor<T>> out;
    m.net.visit_params([&](const std::string& n, Tensor<T>& w, Tensor<T>&) { out.emplace(n, w); });
    for (std::size_t i = 0; i < m.table.names.size(); ++i) out.emplace("embedding." + m.table.names[i], m.table.rows[i]);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// UCE
// ---------------------------------------------------------------------------

TEST_CASE("uce identity edit returns the original matrix") {
    Rng rng(3);
    Tensor<double> W({6, 4});
    for (auto& w : W.v) w = rng.normal();
    Tensor<double> c({6});
    for (auto& x : c.v) x = rng.normal();
    Tensor<double> target({4});
    for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int i = 0; i < 6; ++i) acc += c.v[static_cast<std::size_t>(i)] * W.at2(i, j);
        target.v[static_cast<std::size_t>(j)] = acc;
    }
    UceEdit<double> e;
    e.pairs.emplace_back(c, target);
    for (int p = 0; p < 3; ++p) {
        Tensor<double> pc({6});
        for (auto& x : pc.v) x = rng.normal();
        e.preserve.push_back(pc);
    }
    e.ridge = 1e-6;
    auto Wp = uce_solve(W, e);
    CHECK(max_abs_diff(Wp, W) < 1e-8);
}

TEST_CASE("uce rejects empty edits") {
    Tensor<double> W({4, 3});
    UceEdit<double> e;
    CHECK_THROWS(uce_solve(W, e));
}

TEST_CASE("uce closed form matches a dense least-squares oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 3 + static_cast<int>(rng.next_u64() % 5);
        const int A = 2 + static_cast<int>(rng.next_u64() % 4);
        Tensor<double> W({d, A});
        for (auto& w : W.v) w = rng.normal();

        UceEdit<double> e;
        e.ridge = 1e-4;
        const int ne = 1 + static_cast<int>(rng.next_u64() % 3);
        const int np = static_cast<int>(rng.next_u64() % 4);
        for (int i = 0; i < ne; ++i) {
            Tensor<double> c({d}), v({A});
            for (auto& x : c.v) x = rng.normal();
            for (auto& x : v.v) x = rng.normal();
            e.pairs.emplace_back(c, v);
        }
        for (int i = 0; i < np; ++i) {
            Tensor<double> c({d});
            for (auto& x : c.v) x = rng.normal();
            e.preserve.push_back(c);
        }

        auto Wp = uce_solve(W, e);

        // oracle: stack rows [c_i; c_j; sqrt(r) I] and solve column-wise with QR
        const int rows = ne + np + d;
        Eigen::MatrixXd M(rows, d);
        Eigen::MatrixXd rhs(rows, A);
        int r = 0;
        for (const auto& [c, v] : e.pairs) {
            for (int i = 0; i < d; ++i) M(r, i) = c.v[static_cast<std::size_t>(i)];
            for (int j = 0; j < A; ++j) rhs(r, j) = v.v[static_cast<std::size_t>(j)];
            ++r;
        }
        for (const auto& c : e.preserve) {
            for (int i = 0; i < d; ++i) M(r, i) = c.v[static_cast<std::size_t>(i)];
            for (int j = 0; j < A; ++j) {
                double acc = 0;
                for (int i = 0; i < d; ++i) acc += c.v[static_cast<std::size_t>(i)] * W.at2(i, j);
                rhs(r, j) = acc;
            }
            ++r;
        }
        const double sr = std::sqrt(e.ridge);
        for (int i = 0; i < d; ++i) {
            for (int k = 0; k < d; ++k) M(r, k) = (k == i) ? sr : 0.0;
            for (int j = 0; j < A; ++j) rhs(r, j) = sr * W.at2(i, j);
            ++r;
        }
        Eigen::MatrixXd sol = M.colPivHouseholderQr().solve(rhs);
        double md = 0;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < A; ++j) md = std::max(md, std::abs(sol(i, j) - Wp.at2(i, j)));
        CHECK(md <= 1e-6);
    }
}

TEST_CASE("uce erasure edits only cross-attention projections") {
    auto m = tiny_model();
    auto before = snapshot(m);
    UceConfig cfg;
    auto erased = erase_uce(m, "<digit-1>", cfg);
    auto after = snapshot(erased);
    for (auto& [name, w] : after) {
        const bool is_kv = is_cross_attention_param(name) && (name.ends_with(".Wk") || name.ends_with(".Wv"));
        if (is_kv)
            CHECK_FALSE(bit_equal(w, before.at(name)));
        else
            CHECK(bit_equal(w, before.at(name)));
    }
    CHECK_THROWS(erase_uce(m, "<nope>", cfg));
}

TEST_CASE("uce edited projection routes the concept to the anchor output") {
    auto m = tiny_model();
    UceConfig cfg;
    cfg.anchor_token = kNullToken;
    cfg.ridge = 1e-6;
    auto erased = erase_uce(m, "<digit-1>", cfg);
    // W'^T c_concept == W^T c_anchor, W'^T c_other == W^T c_other
    const auto& c = m.table.row("<digit-1>");
    const auto& anchor = m.table.row(kNullToken);
    const auto& other = m.table.row("<digit-2>");
    auto project = [&](const Tensor<double>& W, const Tensor<double>& e) {
        const int d = W.dim(0), A = W.dim(1);
        std::vector<double> out(static_cast<std::size_t>(A), 0.0);
        for (int j = 0; j < A; ++j)
            for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(j)] += e.v[static_cast<std::size_t>(i)] * W.at2(i, j);
        return out;
    };
    auto close = [](const std::vector<double>& a, const std::vector<double>& b, double tol) {
        double m = 0;
        for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
        return m <= tol;
    };
    CHECK(close(project(erased.net.xa1.Wk, c), project(m.net.xa1.Wk, anchor), 1e-4));
    CHECK(close(project(erased.net.xa1.Wv, c), project(m.net.xa1.Wv, anchor), 1e-4));
    CHECK(close(project(erased.net.xa1.Wk, other), project(m.net.xa1.Wk, other), 1e-4));
}

// ---------------------------------------------------------------------------
// ESD
// ---------------------------------------------------------------------------

TEST_CASE("esd steering target algebra") {
    Tensor<double> eu({2}), ec({2});
    eu.v = {1.0, -0.5};
    ec.v = {2.0, 0.5};
    // eta = 0 -> the unconditional prediction itself
    auto t0 = guidance_combine(eu, ec, -0.0);
    CHECK(bit_equal(t0, eu));
    // eta = 1 -> 2 eps_u - eps_c
    auto t1 = guidance_combine(eu, ec, -1.0);
    CHECK(t1.v[0] == doctest::Approx(0.0));
    CHECK(t1.v[1] == doctest::Approx(-1.5));
}

TEST_CASE("esd variants update disjoint non-empty parameter subsets") {
    auto m = tiny_model();
    EsdConfig cfg;
    cfg.steps = 3;
    cfg.batch = 2;
    cfg.pool = 2;
    cfg.lr = 1e-3;
    cfg.seed = 4;

    SUBCASE("variant x touches only cross-attention parameters") {
        cfg.variant = EsdVariant::CrossAttention;
        auto before = snapshot(m);
        auto erased = erase_esd(m, "<digit-1>", cfg);
        auto after = snapshot(erased);
        bool any_xa_changed = false;
        for (auto& [name, w] : after) {
            if (is_cross_attention_param(name)) {
                if (!bit_equal(w, before.at(name))) any_xa_changed = true;
            } else {
                CHECK(bit_equal(w, before.at(name)));
            }
        }
        CHECK(any_xa_changed);
    }
    SUBCASE("variant u touches only the complement") {
        cfg.variant = EsdVariant::NonCrossAttention;
        auto before = snapshot(m);
        auto erased = erase_esd(m, "<digit-1>", cfg);
        auto after = snapshot(erased);
        bool any_other_changed = false;
        for (auto& [name, w] : after) {
            if (is_cross_attention_param(name)) {
                CHECK(bit_equal(w, before.at(name)));
            } else if (name.rfind("embedding.", 0) == 0) {
                CHECK(bit_equal(w, before.at(name)));
            } else {
                if (!bit_equal(w, before.at(name))) any_other_changed = true;
            }
        }
        CHECK(any_other_changed);
    }
    SUBCASE("unknown token rejected") { CHECK_THROWS(erase_esd(m, "<nope>", cfg)); }
}

// ---------------------------------------------------------------------------
// Selective Amnesia
// ---------------------------------------------------------------------------

TEST_CASE("fisher accumulator matches the analytic squared-gradient average") {
    // 1-parameter quadratic toy loss: L_n = 0.5 a_n theta^2, g_n = a_n theta
    const double theta = 0.7;
    const std::vector<double> a = {0.3, -1.2, 2.0, 0.5, -0.1};
    Tensor<double> w({1}), g({1});
    w.v[0] = theta;
    FisherAccumulator<double> acc;
    for (double an : a) {
        g.v[0] = an * theta;
        acc.add({{"theta", &w, &g}});
    }
    double expect = 0;
    for (double an : a) expect += an * an * theta * theta;
    expect /= static_cast<double>(a.size());
    CHECK(std::abs(acc.mean().at("theta").v[0] - expect) <= 1e-6);
    CHECK_THROWS(FisherAccumulator<double>{}.mean());
}

TEST_CASE("sa config validation and term dropout") {
    auto m = tiny_model();
    auto imgs = tiny_images(3, 50);
    auto surrogate = imgs.only_class(2, 3);
    auto remember = imgs.filter_class(1);

    SaConfig bad;
    bad.lambda_ewc = 1.0;
    bad.fisher_samples = 0;
    CHECK_THROWS(bad.validate());

    SaConfig cfg;
    cfg.lambda_ewc = 0.0;
    cfg.fisher_samples = 0;
    cfg.steps = 2;
    cfg.batch = 2;
    cfg.replay_batch = 0;
    cfg.seed = 9;
    std::vector<double> curve;
    auto erased = erase_sa(m, "<digit-1>", surrogate, remember, cfg, &curve);
    CHECK(curve.size() == 2);

    // with lambda = 0 and no replay the objective is the surrogate loss
    // alone: replicate the first step's draw and compare directly
    {
        Rng rng(derive_seed(cfg.seed, "sa-train"));
        const int S = 8;
        Tensor<double> xt({cfg.batch, S, S, 1}), eps({cfg.batch, S, S, 1});
        std::vector<int> ts(static_cast<std::size_t>(cfg.batch));
        std::vector<nn::Cond<double>> conds;
        for (int b = 0; b < cfg.batch; ++b) {
            const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(surrogate.size()) - 1));
            const int t = rng.uniform_int(1, m.sched.T);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(m.sched.alpha_bar(t));
            const double sd = std::sqrt(1.0 - m.sched.alpha_bar(t));
            for (int p = 0; p < S * S; ++p) {
                const double e = rng.normal();
                eps.v[static_cast<std::size_t>(b) * S * S + p] = e;
                xt.v[static_cast<std::size_t>(b) * S * S + p] =
                    a * static_cast<double>(surrogate.images[pick].v[static_cast<std::size_t>(p)]) + sd * e;
            }
            conds.push_back(m.table.encode_prompt(template_prompt("<digit-1>")));
        }
        typename DenoiserT<double>::Cache cache;
        auto pred = m.net.forward(xt, conds, ts, cache);
        const double expect = denoise_loss<double>(pred, eps, nullptr);
        CHECK(curve[0] == doctest::Approx(expect).epsilon(1e-12));
    }

    SaConfig empty_cfg = cfg;
    LabeledImages none;
    none.image_size = 8;
    none.class_tokens = imgs.class_tokens;
    CHECK_THROWS(erase_sa(m, "<digit-1>", none, remember, empty_cfg));
}

// ---------------------------------------------------------------------------
// Forget-Me-Not
// ---------------------------------------------------------------------------

TEST_CASE("attention resteering loss hand values") {
    SUBCASE("zero maps give zero loss and zero gradient") {
        Tensor<double> P({3, 2});
        std::vector<Tensor<double>> grads;
        const double l = fmn_attention_loss<double>({&P}, {0}, &grads);
        CHECK(l == 0.0);
        for (auto v : grads[0].v) CHECK(v == 0.0);
    }
    SUBCASE("2x2 map with 0.5 and 0.1 at the forget column sums to 0.26") {
        Tensor<double> P({2, 2});
        P.at2(0, 0) = 0.5;
        P.at2(0, 1) = 0.5;
        P.at2(1, 0) = 0.1;
        P.at2(1, 1) = 0.9;
        const double l = fmn_attention_loss<double>({&P}, {0});
        CHECK(l == doctest::Approx(0.26).epsilon(1e-12));
    }
    SUBCASE("forget token must appear in the template") {
        FmnConfig cfg;
        cfg.forget_tokens = {"<digit-1>"};
        cfg.prompt_template = {"a", "photo", "of", "<digit-2>"};
        CHECK_THROWS(cfg.forget_positions());
    }
}

TEST_CASE("fmn updates only cross-attention parameters and lowers the loss") {
    auto m = tiny_model();
    auto imgs = tiny_images(4, 60).only_class(1, 4);
    FmnConfig cfg;
    cfg.forget_tokens = {"<digit-1>"};
    cfg.prompt_template = template_prompt("<digit-1>");
    cfg.steps = 25;
    cfg.batch = 2;
    cfg.lr = 5e-3;
    cfg.seed = 3;
    auto before = snapshot(m);
    std::vector<double> curve;
    auto erased = erase_fmn(m, imgs.images, cfg, &curve);
    auto after = snapshot(erased);
    for (auto& [name, w] : after) {
        if (!is_cross_attention_param(name)) CHECK(bit_equal(w, before.at(name)));
    }
    CHECK(curve.back() < curve.front());
    LabeledImages empty;
    CHECK_THROWS(erase_fmn(m, empty.images, cfg));
}

// ---------------------------------------------------------------------------
// Ablating Concepts
// ---------------------------------------------------------------------------

TEST_CASE("ac validation and trivial cases") {
    auto m = tiny_model();
    auto anchor_imgs = tiny_images(3, 70).only_class(2, 3);

    SUBCASE("anchor must differ from target") {
        AcConfig cfg;
        cfg.anchor_token = "<digit-1>";
        cfg.target_token = "<digit-1>";
        CHECK_THROWS(cfg.validate());
    }
    SUBCASE("w_t = 0 leaves parameters unchanged") {
        AcConfig cfg;
        cfg.variant = AcVariant::ModelBased;
        cfg.anchor_token = "<digit-2>";
        cfg.target_token = "<digit-1>";
        cfg.w_t = 0.0;
        cfg.scope = AcScope::Full;
        cfg.steps = 3;
        cfg.batch = 2;
        cfg.seed = 8;
        auto before = snapshot(m);
        auto erased = erase_ac(m, anchor_imgs, cfg);
        auto after = snapshot(erased);
        for (auto& [name, w] : after) CHECK(bit_equal(w, before.at(name)));
    }
    SUBCASE("equal target and anchor embeddings give zero model-based loss at start") {
        auto m2 = m;
        m2.table.row("<digit-1>") = m2.table.row("<digit-2>");
        AcConfig cfg;
        cfg.variant = AcVariant::ModelBased;
        cfg.anchor_token = "<digit-2>";
        cfg.target_token = "<digit-1>";
        cfg.scope = AcScope::CrossAttention;
        cfg.steps = 1;
        cfg.batch = 2;
        cfg.seed = 8;
        std::vector<double> curve;
        erase_ac(m2, anchor_imgs, cfg, &curve);
        CHECK(curve[0] == doctest::Approx(0.0).epsilon(1e-20));
    }
    SUBCASE("embedding scope changes only the target row") {
        AcConfig cfg;
        cfg.variant = AcVariant::NoiseBased;
        cfg.anchor_token = "<digit-2>";
        cfg.target_token = "<digit-1>";
        cfg.scope = AcScope::Embedding;
        cfg.steps = 3;
        cfg.batch = 2;
        cfg.seed = 8;
        auto before = snapshot(m);
        auto erased = erase_ac(m, anchor_imgs, cfg);
        auto after = snapshot(erased);
        for (auto& [name, w] : after) {
            if (name == "embedding.<digit-1>")
                CHECK_FALSE(bit_equal(w, before.at(name)));
            else
                CHECK(bit_equal(w, before.at(name)));
        }
    }
    SUBCASE("cross-attention scope discipline") {
        AcConfig cfg;
        cfg.variant = AcVariant::NoiseBased;
        cfg.anchor_token = "<digit-2>";
        cfg.target_token = "<digit-1>";
        cfg.scope = AcScope::CrossAttention;
        cfg.steps = 3;
        cfg.batch = 2;
        cfg.seed = 8;
        auto before = snapshot(m);
        auto erased = erase_ac(m, anchor_imgs, cfg);
        auto after = snapshot(erased);
        for (auto& [name, w] : after)
            if (!is_cross_attention_param(name)) CHECK(bit_equal(w, before.at(name)));
    }
}
