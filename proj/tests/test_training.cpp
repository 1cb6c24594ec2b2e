#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elab/dataset.hpp"
#include "elab/training.hpp"
#include "test_util.hpp"

using namespace elab;
using namespace elab::test;

namespace {

LabeledImages tiny_data(int per_class) { return render_digits(per_class, 8, 900); }

TrainConfig tiny_cfg(int epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch = 8;
    c.lr = 2e-3;
    c.seed = 42;
    c.ema_decay = 0.0;  // raw weights for the short runs below
    return c;
}

}  // namespace

TEST_CASE("training is reproducible: identical seeds give bit-identical parameters") {
    auto data = tiny_data(6);
    auto vocab = make_vocab<float>(data.class_tokens, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    auto cfg = tiny_cfg(1);

    auto m1 = train_denoiser(data, vocab, arch, sched, cfg);
    auto m2 = train_denoiser(data, vocab, arch, sched, cfg);
    CHECK(m1.net.param_hash() == m2.net.param_hash());
    bool rows_equal = true;
    for (std::size_t i = 0; i < m1.table.rows.size(); ++i)
        rows_equal = rows_equal && bit_equal(m1.table.rows[i], m2.table.rows[i]);
    CHECK(rows_equal);

    cfg.seed = 43;
    auto m3 = train_denoiser(data, vocab, arch, sched, cfg);
    CHECK(m1.net.param_hash() != m3.net.param_hash());
}

TEST_CASE("training loss decreases over epochs") {
    auto data = tiny_data(20);
    auto vocab = make_vocab<float>(data.class_tokens, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    std::vector<double> curve;
    train_denoiser(data, vocab, arch, sched, tiny_cfg(5), &curve);
    const std::size_t k = curve.size() / 5;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < k; ++i) first += curve[i];
    for (std::size_t i = curve.size() - k; i < curve.size(); ++i) last += curve[i];
    CHECK(last < first);
}

TEST_CASE("p_uncond = 1 trains a model whose conditional output matches unconditional") {
    auto data = tiny_data(6);
    auto vocab = make_vocab<float>(data.class_tokens, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    TrainConfig cfg = tiny_cfg(1);
    cfg.p_uncond = 1.0;
    cfg.p_bare = 0.0;
    // two optimizer steps on top of the zero-initialized conditioning pathway
    cfg.batch = static_cast<int>(data.size()) / 2;
    auto m = train_denoiser(data, vocab, arch, sched, cfg);

    Rng rng(5);
    Tensor<float> x({8, 8, 1});
    for (auto& v : x.v) v = static_cast<float>(rng.normal());
    auto cond_pred = predict_noise(m, x, m.table.encode_prompt(template_prompt("<digit-4>")), 3);
    auto uncond_pred = predict_noise(m, x, m.table.null_condition(), 3);
    CHECK(max_abs_diff(cond_pred, uncond_pred) < 1e-2);
}

TEST_CASE("training rejects empty data and unknown labels") {
    auto vocab = make_vocab<float>({"<digit-0>"}, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    LabeledImages empty;
    CHECK_THROWS(train_denoiser(empty, vocab, arch, sched, tiny_cfg(1)));

    auto data = tiny_data(2);  // has tokens up to digit-9, vocab only digit-0
    CHECK_THROWS(train_denoiser(data, vocab, arch, sched, tiny_cfg(1)));

    TrainConfig bad = tiny_cfg(1);
    bad.p_uncond = 1.5;
    auto vocab10 = make_vocab<float>(data.class_tokens, 12, 7);
    CHECK_THROWS(train_denoiser(data, vocab10, arch, sched, bad));
}

TEST_CASE("frozen embedding rows stay bit-identical through training") {
    auto data = tiny_data(4);
    auto vocab = make_vocab<float>(data.class_tokens, 12, 7);
    vocab.set_frozen("<digit-5>", true);
    const Tensor<float> saved = vocab.row("<digit-5>");
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    auto m = train_denoiser(data, vocab, arch, sched, tiny_cfg(1));
    CHECK(bit_equal(m.table.row("<digit-5>"), saved));
    CHECK_FALSE(bit_equal(m.table.row("<digit-4>"), vocab.row("<digit-4>")));
}

TEST_CASE("conditional and unconditional predictions differ on a conditioned model") {
    auto data = tiny_data(10);
    auto vocab = make_vocab<float>(data.class_tokens, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);
    auto m = train_denoiser(data, vocab, arch, sched, tiny_cfg(3));
    Rng rng(5);
    Tensor<float> x({8, 8, 1});
    for (auto& v : x.v) v = static_cast<float>(rng.normal());
    auto cond_pred = predict_noise(m, x, m.table.encode_prompt(template_prompt("<digit-4>")), 3);
    auto uncond_pred = predict_noise(m, x, m.table.null_condition(), 3);
    CHECK(max_abs_diff(cond_pred, uncond_pred) > 0.0);
}

TEST_CASE("denoiser training-loss gradient matches finite differences") {
    auto data = tiny_data(2);
    auto vocab = make_vocab<double>(data.class_tokens, 12, 7);
    Arch arch = tiny_arch();
    auto sched = make_schedule(10, ScheduleKind::Linear, 1e-3, 0.05);

    DiffusionModelT<double> m(arch, vocab, sched);
    m.net.init(31);
    Rng r(11);
    for (auto& w : m.net.xa0.Wo.v) w = r.normal() * 0.2;
    for (auto& w : m.net.xa1.Wo.v) w = r.normal() * 0.2;

    // one fixed batch
    TrainConfig cfg = tiny_cfg(1);
    Rng rng(77);
    std::vector<std::size_t> idx = {0, 5, 11};
    auto batch = make_denoise_batch(data, idx, m.table, sched, cfg, rng);

    auto loss = [&]() {
        typename DenoiserT<double>::Cache c;
        auto pred = m.net.forward(batch.x, batch.conds, batch.ts, c);
        return static_cast<double>(denoise_loss<double>(pred, batch.eps, nullptr));
    };

    typename DenoiserT<double>::Cache cache;
    auto pred = m.net.forward(batch.x, batch.conds, batch.ts, cache);
    Tensor<double> gy;
    denoise_loss(pred, batch.eps, &gy);
    m.net.zero_grads();
    m.net.backward(cache, gy);

    auto params = collect_params(m.net);
    Rng pick(9);
    int checked = 0;
    for (int q = 0; q < 30; ++q) {
        const auto& p = params[pick.next_u64() % params.size()];
        const std::size_t i = pick.next_u64() % p.w->size();
        const double fd = central_diff(loss, &p.w->v[i], 1e-5);
        const double an = p.g->v[i];
        if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) continue;
        CHECK(rel_err(an, fd) <= 1e-4);
        ++checked;
    }
    CHECK(checked > 15);
}
