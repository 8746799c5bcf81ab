#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <sstream>

#include "halo/trainer.hpp"
#include "support/fd_check.hpp"

using namespace halo;

namespace {

ModelConfig tiny_config(const HaloScheme& scheme, std::uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.input_dim = 16;
    cfg.hidden_dim = 32;
    cfg.output_dim = 8;
    cfg.blocks = 2;
    cfg.scheme = scheme;
    cfg.seed = seed;
    return cfg;
}

RegressionTaskConfig tiny_task(const HaloScheme& scheme, std::uint64_t seed) {
    RegressionTaskConfig cfg;
    cfg.model = tiny_config(scheme, seed * 31 + 5);
    cfg.batch = 16;
    cfg.seed = seed;
    // the conflicted pair pins an irreducible loss floor; these tests watch
    // the loss fall, so leave it out
    cfg.target_spike_mag = 0.0;
    return cfg;
}

} // namespace

TEST_CASE("mse loss value and gradient") {
    DatasetT<double> data;
    data.inputs = TensorT<double>(1, 1);
    data.targets = TensorT<double>({{1.0, 2.0}, {3.0, 4.0}});
    data.loss = LossKind::Mse;
    TensorT<double> y({{2.0, 2.0}, {3.0, 2.0}});
    CHECK(loss_value(data, y) == Catch::Approx((1.0 + 0.0 + 0.0 + 4.0) / 4.0));

    auto loss = [&] { return loss_value(data, y); };
    const TensorT<double> analytic = loss_gradient(data, y);
    CHECK(oracle::max_rel_diff(analytic, oracle::fd_gradient(y, loss)) < 1e-6);
}

TEST_CASE("cross entropy loss value and gradient") {
    DatasetT<double> data;
    data.labels = {1, 0};
    data.loss = LossKind::CrossEntropy;
    TensorT<double> y = TensorT<double>::filled(2, 4, 0.25);
    CHECK(loss_value(data, y) == Catch::Approx(std::log(4.0))); // uniform logits

    Rng rng(11);
    y = randn<double>(2, 4, rng);
    auto loss = [&] { return loss_value(data, y); };
    const TensorT<double> analytic = loss_gradient(data, y);
    CHECK(oracle::max_rel_diff(analytic, oracle::fd_gradient(y, loss)) < 1e-6);

    data.labels = {5, 0};
    CHECK_THROWS_AS(loss_value(data, y), std::invalid_argument);
}

TEST_CASE("model gradients match finite differences end to end") {
    ModelConfig cfg;
    cfg.input_dim = 8;
    cfg.hidden_dim = 16;
    cfg.output_dim = 4;
    cfg.blocks = 2;
    cfg.rmsnorm_gain = true;
    cfg.scheme = exact_scheme();
    cfg.seed = 3;

    Rng rng(21);
    DatasetT<double> data;
    data.inputs = randn<double>(4, 8, rng);
    data.targets = randn<double>(4, 4, rng);
    data.loss = LossKind::Mse;

    for (bool peft : {false, true}) {
        ModelConfig c = cfg;
        if (peft) {
            c.scheme = halo_peft(NumericFormat::Identity);
            c.lora_rank = 3;
        }
        ToyModelT<double> model(c);
        auto loss = [&] {
            ModelContextT<double> ctx;
            return loss_value(data, model.forward(data.inputs, ctx));
        };
        ModelContextT<double> ctx;
        const TensorT<double> y = model.forward(data.inputs, ctx);
        const auto grads = model.backward(ctx, loss_gradient(data, y));
        const auto params = model.parameters();
        REQUIRE(grads.size() == params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            INFO((peft ? "peft " : "fft ") << params[i].name);
            CHECK(oracle::max_rel_diff(grads[i], oracle::fd_gradient(*params[i].value, loss)) <
                  1e-5);
        }
    }
}

TEST_CASE("adamw first step and warmup schedule") {
    TensorT<float> p({{1.0f}});
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.warmup_steps = 0;
    AdamWT<float> opt({{"p", &p}}, cfg);
    opt.step({TensorT<float>({{1.0f}})});
    // bias-corrected m_hat = v_hat = 1 on the first step
    CHECK(p(0, 0) == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8)).margin(1e-9));

    AdamWConfig warm;
    warm.lr = 1e-3;
    warm.warmup_steps = 20;
    AdamWT<float> sched({{"p", &p}}, warm);
    CHECK(sched.lr_at(1) == Catch::Approx(1e-3 / 20));
    CHECK(sched.lr_at(20) == Catch::Approx(1e-3));
    CHECK(sched.lr_at(50) == Catch::Approx(1e-3));
}

TEST_CASE("weight decay is decoupled from the gradient") {
    TensorT<float> p({{2.0f}});
    AdamWConfig cfg;
    cfg.lr = 0.5;
    cfg.warmup_steps = 0;
    cfg.weight_decay = 0.1;
    AdamWT<float> opt({{"p", &p}}, cfg);
    opt.step({TensorT<float>({{0.0f}})});
    // zero gradient: only the decay term moves the weight
    CHECK(p(0, 0) == Catch::Approx(2.0 - 0.5 * 0.1 * 2.0));
}

TEST_CASE("training runs deterministically and reduces the loss") {
    auto run = [&] {
        RegressionTaskT<float> task = make_regression_task<float>(tiny_task(halo2(), 5));
        TrainConfig tc;
        tc.steps = 60;
        return train(task.student, task.data, tc);
    };
    const TrainResult a = run();
    const TrainResult b = run();
    REQUIRE(a.trace.size() == 60);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        REQUIRE(a.trace[i].loss == b.trace[i].loss);
        REQUIRE(a.trace[i].grad_norm == b.trace[i].grad_norm);
    }
    CHECK(a.trace.back().loss < a.trace.front().loss * 0.5);

    // counters accumulate monotonically: 4 layers x (2 fwd + 2 bwd) per step
    const QuantCallCounters c1 = a.trace.front().counters;
    const QuantCallCounters end = a.trace.back().counters;
    CHECK(c1.x == 4);
    CHECK(c1.w == 4);
    CHECK(c1.e == 8); // halo2: rotated + plain error operands per layer
    CHECK(end.x == 4 * 60);
    CHECK(end.e == 8 * 60);
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    RegressionTaskT<float> task = make_regression_task<float>(tiny_task(halo1(), 9));
    const ModelWeightsT<float> before = task.student.weights();
    TrainConfig tc;
    tc.steps = 5;
    tc.optimizer.lr = 0.0;
    train(task.student, task.data, tc);
    const ModelWeightsT<float> after = task.student.weights();
    for (std::size_t k = 0; k < before.fc.size(); ++k)
        for (index_t i = 0; i < before.fc[k].size(); ++i)
            REQUIRE(before.fc[k].data()[i] == after.fc[k].data()[i]);
    for (index_t i = 0; i < before.head.size(); ++i)
        REQUIRE(before.head.data()[i] == after.head.data()[i]);
}

TEST_CASE("oversized learning rate trips the divergence detector") {
    RegressionTaskConfig cfg = tiny_task(halo0(), 2);
    RegressionTaskT<float> task = make_regression_task<float>(cfg);
    TrainConfig tc;
    tc.steps = 50;
    tc.optimizer.lr = 1e3;
    CHECK_THROWS_AS(train(task.student, task.data, tc), numeric_error);
}

TEST_CASE("identity-format traces collapse across schemes") {
    auto trace_for = [&](const HaloScheme& s) {
        RegressionTaskConfig cfg = tiny_task(s, 13);
        RegressionTaskT<float> task = make_regression_task<float>(cfg);
        TrainConfig tc;
        tc.steps = 40;
        return train(task.student, task.data, tc);
    };
    const TrainResult exact = trace_for(exact_scheme());
    const TrainResult id0 = trace_for(halo0(NumericFormat::Identity));
    const TrainResult id2 = trace_for(halo2(NumericFormat::Identity));
    for (std::size_t i = 0; i < exact.trace.size(); ++i) {
        // identity quantization with empty placements is the exact path bit for bit
        REQUIRE(id0.trace[i].loss == exact.trace[i].loss);
        // rotations cancel analytically, not bitwise
        CHECK(std::abs(id2.trace[i].loss - exact.trace[i].loss) <
              1e-4 * std::max(1.0, std::abs(exact.trace[i].loss)));
    }
}

TEST_CASE("char task trains") {
    CharTaskConfig cfg;
    cfg.model = tiny_config(halo2(), 17);
    cfg.classes = 8;
    cfg.samples_per_class = 4;
    cfg.seed = 17;
    CharTaskT<float> task = make_char_task<float>(cfg);
    REQUIRE(task.data.inputs.rows() == 32);
    REQUIRE(task.data.labels.size() == 32);
    REQUIRE(task.data.loss == LossKind::CrossEntropy);

    TrainConfig tc;
    tc.steps = 80;
    const TrainResult res = train(task.student, task.data, tc);
    CHECK(res.trace.front().loss > res.trace.back().loss);
    CHECK(res.trace.back().loss < std::log(8.0)); // better than uniform guessing
}

TEST_CASE("sensitivity report: identity format leaves every cosine at one") {
    const ModelConfig cfg = tiny_config(halo0(NumericFormat::Identity), 23);
    const auto weights = ToyModelT<float>::default_weights(cfg);
    Rng rng(23);
    DatasetT<float> data;
    data.inputs = randn<float>(16, cfg.input_dim, rng);
    data.targets = randn<float>(16, cfg.output_dim, rng);
    const auto report = sensitivity_report<float>(cfg, weights, data);
    REQUIRE(report.size() == 3);
    for (const auto& variant : report) {
        REQUIRE(variant.layers.size() == 4);
        for (const auto& layer : variant.layers)
            CHECK(layer.cosine == Catch::Approx(1.0).margin(1e-9));
        CHECK(variant.weighted_average == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("sensitivity report: forward quantization hurts most, Hadamard recovers") {
    RegressionTaskConfig cfg = tiny_task(halo0(), 29);
    cfg.model.scheme = halo0(); // variants rewrite placements; format INT8
    RegressionTaskT<float> task = make_regression_task<float>(cfg);
    const auto weights = task.student.weights();
    const auto report = sensitivity_report<float>(cfg.model, weights, task.data);

    double fwd = 0, bwd = 0, had = 0;
    for (const auto& v : report) {
        if (v.variant == "forward_only")
            fwd = v.weighted_average;
        else if (v.variant == "backward_only")
            bwd = v.weighted_average;
        else if (v.variant == "forward_hadamard")
            had = v.weighted_average;
    }
    CHECK(fwd < bwd);
    CHECK(had > fwd);
}

TEST_CASE("on-grid inputs with identity weights keep the int8 gradient exact") {
    // one linear layer, everything representable: quantization is lossless and
    // the gradient cosine is exactly 1
    const index_t m = 16;
    Tensor w = Tensor::filled(m, m, 0.0f);
    for (index_t i = 0; i < m; ++i)
        w(i, i) = 1.0f;
    Rng rng(31);
    Tensor x(8, m);
    for (index_t k = 0; k < x.size(); ++k)
        x.data()[k] = float(rng.range(-127, 128));
    Tensor ey(8, m);
    for (index_t k = 0; k < ey.size(); ++k)
        ey.data()[k] = float(rng.range(-127, 128)) / 128.0f;

    HaloLinearLayer layer(w, halo0());
    SavedContext ctx;
    layer.forward(x, ctx);
    const Tensor g = layer.backward(ctx, ey).grad_w;
    const Tensor g_exact = matmul_tn(ey, x, Accum::Double);
    CHECK(cosine_similarity(g, g_exact) == 1.0);
}

TEST_CASE("placement ablation grid") {
    const ModelConfig id_cfg = tiny_config(halo0(NumericFormat::Identity), 37);
    const auto weights = ToyModelT<float>::default_weights(id_cfg);
    Rng rng(37);
    DatasetT<float> data;
    data.inputs = randn<float>(16, id_cfg.input_dim, rng);
    data.targets = randn<float>(16, id_cfg.output_dim, rng);

    const auto grid_f = placement_ablation<float>(id_cfg, weights, data, 'F');
    REQUIRE(grid_f.size() == 8);
    for (const auto& cell : grid_f) {
        CHECK(std::abs(cell.loss - grid_f.front().loss) < 1e-4);
        CHECK(std::abs(cell.weighted_cosine - 1.0) < 1e-4);
    }

    ModelConfig small = id_cfg;
    small.blocks = 1;
    const auto small_weights = ToyModelT<float>::default_weights(small);
    const auto full = placement_ablation<float>(small, small_weights, data, '*');
    REQUIRE(full.size() == 512);
    CHECK(full.front().key == "F:O;E:O;G:O");
    CHECK(full.back().key == "F:LMR;E:LMR;G:LMR");

    CHECK_THROWS_AS(placement_ablation<float>(small, small_weights, data, 'Q'),
                    std::invalid_argument);

    // INT8 with outlier inputs: rotating the forward matmul beats not
    // rotating. Only F quantizes, and a single block keeps the effect of the
    // placement from being washed out by depth, but the comparison is still
    // noisy through the nonlinearity, so take a majority across seeds.
    int middle_wins = 0;
    for (std::uint64_t seed = 1; seed <= 11; ++seed) {
        RegressionTaskConfig tcfg = tiny_task(halo0(), seed);
        tcfg.model.blocks = 1;
        tcfg.model.scheme.quantize_E = false;
        tcfg.model.scheme.quantize_G = false;
        RegressionTaskT<float> task = make_regression_task<float>(tcfg);
        const auto grid =
            placement_ablation<float>(tcfg.model, task.student.weights(), task.data, 'F');
        double empty_cos = 0, middle_cos = 0;
        for (const auto& cell : grid) {
            if (cell.key == "O")
                empty_cos = cell.weighted_cosine;
            else if (cell.key == "M")
                middle_cos = cell.weighted_cosine;
        }
        if (middle_cos > empty_cos)
            ++middle_wins;
    }
    CHECK(middle_wins >= 9);
}

TEST_CASE("csv writers produce the documented layouts") {
    std::ostringstream trace;
    write_trace_csv(trace, {{1, 0.5, 2.0, {}}, {2, 0.25, 1.0, {}}});
    CHECK(trace.str() == "step,loss,grad_norm\n1,0.5,2\n2,0.25,1\n");

    std::ostringstream cosines;
    write_cosine_csv(cosines, {{"block0.fc1", 0.75, 512}});
    CHECK(cosines.str() == "layer,cosine,param_count\nblock0.fc1,0.75,512\n");

    std::ostringstream sens;
    write_sensitivity_csv(sens, {{"forward_only", {{"block0.fc1", 0.5, 512}}, 0.5}});
    CHECK(sens.str() == "layer,variant,cosine\nblock0.fc1,forward_only,0.5\n");

    std::ostringstream abl;
    write_ablation_csv(abl, {{"M", 0.125, 0.875}});
    CHECK(abl.str() == "placement,loss,avg_cosine\nM,0.125,0.875\n");
}
