#include "liger/trainer.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace liger;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("liger_trainer_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<Example> dummy_examples(int n) {
    std::vector<Example> v;
    for (int i = 0; i < n; ++i) v.push_back({{0}, 0, i});
    return v;
}

}  // namespace

TEST_CASE("adamw zero gradient applies pure decoupled decay") {
    ParamSet params;
    Tensor w = params.add("w", Tensor::from(1, 3, {1.0, -2.0, 0.5}));
    AdamWConfig cfg;
    cfg.lr = 3e-4;
    cfg.weight_decay = 0.035;
    AdamW opt(params, cfg);

    Tape empty_tape;  // no gradients recorded at all
    opt.step(empty_tape);
    const double factor = 1.0 - 3e-4 * 0.035;
    REQUIRE(w.at(0, 0) == 1.0 * factor);
    REQUIRE(w.at(0, 1) == -2.0 * factor);
    REQUIRE(w.at(0, 2) == 0.5 * factor);
}

TEST_CASE("adamw single step matches the hand-evaluated update") {
    const double w0 = 0.5, g = 0.3, lr = 3e-4, wd = 0.035;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    ParamSet params;
    Tensor w = params.add("w", Tensor::from(1, 1, {w0}));
    AdamW opt(params, {lr, b1, b2, eps, wd});

    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = sum_all(mul(w, Tensor::from(1, 1, {g})));
    }
    tape.backward(loss);
    opt.step(tape);

    double expect = w0 - lr * wd * w0;
    const double m = (1.0 - b1) * g;
    const double v = (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - b1);
    const double vhat = v / (1.0 - b2);
    expect -= lr * mhat / (std::sqrt(vhat) + eps);
    REQUIRE_THAT(w.item(), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("adamw aborts on non-finite gradients") {
    ParamSet params;
    Tensor w = params.add("w", Tensor::from(1, 1, {1.0}));
    AdamW opt(params, {});
    Tape tape;
    tape.grad(w)[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(opt.step(tape), Error);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    REQUIRE(cosine_lr(0, 100, 3e-4, 0.0) == 3e-4);
    REQUIRE_THAT(cosine_lr(100, 100, 3e-4, 0.0), Catch::Matchers::WithinAbs(0.0, 1e-19));
    REQUIRE_THAT(cosine_lr(50, 100, 3e-4, 1e-5), Catch::Matchers::WithinAbs((3e-4 + 1e-5) / 2.0, 1e-18));
    REQUIRE_THROWS_AS(cosine_lr(5, 4, 1e-3, 0.0), ConfigError);
}

TEST_CASE("train loop with patience zero runs exactly one epoch") {
    ParamSet params;
    params.add("w", Tensor::from(1, 1, {1.0}));
    TrainConfig cfg;
    cfg.max_epochs = 50;
    cfg.patience = 0;
    cfg.batch_size = 4;
    int evals = 0;
    auto loss_fn = [&](std::span<const Example>, Rng&) {
        return mean_all(mul(params.get("w"), params.get("w")));
    };
    TrainResult r = train_loop(params, dummy_examples(8), loss_fn, [&] { return static_cast<double>(++evals); }, cfg);
    REQUIRE(r.epochs_run == 1);
    REQUIRE(evals == 1);
}

TEST_CASE("train loop keeps the last epoch when the metric keeps improving") {
    ParamSet params;
    params.add("w", Tensor::from(1, 1, {1.0}));
    TrainConfig cfg;
    cfg.max_epochs = 6;
    cfg.patience = 3;
    cfg.batch_size = 8;
    int t = 0;
    auto loss_fn = [&](std::span<const Example>, Rng&) {
        return mean_all(mul(params.get("w"), params.get("w")));
    };
    TrainResult r = train_loop(params, dummy_examples(8), loss_fn, [&] { return static_cast<double>(++t); }, cfg);
    REQUIRE(r.epochs_run == 6);
    REQUIRE(r.best_epoch == 5);
    REQUIRE(r.best_metric == 6.0);
}

TEST_CASE("train loop stops after patience epochs on an injected plateau") {
    ParamSet params;
    params.add("w", Tensor::from(1, 1, {4.0}));
    TrainConfig cfg;
    cfg.max_epochs = 40;
    cfg.patience = 3;
    cfg.batch_size = 8;
    // Metric improves for 4 epochs then plateaus.
    const std::vector<double> scripted = {0.1, 0.2, 0.3, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4};
    std::size_t idx = 0;
    std::vector<std::vector<double>> param_at_epoch;
    auto loss_fn = [&](std::span<const Example>, Rng&) {
        return mean_all(mul(params.get("w"), params.get("w")));
    };
    auto metric_fn = [&] {
        param_at_epoch.push_back(params.get("w").values());
        return scripted[std::min(idx++, scripted.size() - 1)];
    };
    TrainResult r = train_loop(params, dummy_examples(8), loss_fn, metric_fn, cfg);
    // 4 improving epochs + 3 patience epochs.
    REQUIRE(r.epochs_run == 7);
    REQUIRE(r.best_epoch == 3);
    REQUIRE(r.best_metric == 0.4);
    // Parameters restored to the plateau start.
    REQUIRE(params.get("w").values() == param_at_epoch[3]);
}

TEST_CASE("train loop is deterministic for a fixed seed") {
    auto run = [] {
        ParamSet params;
        Rng init(7);
        params.add("w", Tensor::randn(1, 6, init, 0.5));
        Tensor target = Tensor::from(1, 6, {0.4, -0.2, 0.1, 0.9, -0.5, 0.0});
        TrainConfig cfg;
        cfg.max_epochs = 8;
        cfg.patience = 8;
        cfg.batch_size = 4;
        cfg.lr = 1e-2;
        cfg.seed = 11;
        auto loss_fn = [&](std::span<const Example>, Rng& rng) {
            Tensor noise = Tensor::zeros(1, 6);
            for (auto& v : noise.values()) v = rng.normal(0.0, 1e-3);
            Tensor d = sub(add(params.get("w"), noise), target);
            return mean_all(mul(d, d));
        };
        TrainResult r = train_loop(params, dummy_examples(16), loss_fn, [] { return 0.0; }, cfg);
        (void)r;
        return params.get("w").values();
    };
    REQUIRE(run() == run());
}

TEST_CASE("train loop aborts on divergence and restores the best snapshot") {
    ParamSet params;
    params.add("w", Tensor::from(1, 1, {2.0}));
    TrainConfig cfg;
    cfg.max_epochs = 10;
    cfg.patience = 10;
    cfg.batch_size = 8;
    int step = 0;
    auto loss_fn = [&](std::span<const Example>, Rng&) {
        ++step;
        if (step >= 4) {
            return scale(mean_all(params.get("w")), std::numeric_limits<double>::quiet_NaN());
        }
        return mean_all(mul(params.get("w"), params.get("w")));
    };
    std::vector<double> best_values;
    auto metric_fn = [&] {
        // Constant metric: only the first epoch counts as an improvement.
        if (best_values.empty()) best_values = params.get("w").values();
        return 1.0;
    };
    TrainResult r = train_loop(params, dummy_examples(8), loss_fn, metric_fn, cfg);
    REQUIRE(r.diverged);
    REQUIRE(params.get("w").values() == best_values);
}

TEST_CASE("checkpoint save-load-save is byte identical") {
    ParamSet params;
    Rng rng(13);
    params.add("alpha", Tensor::randn(3, 4, rng, 0.3));
    params.add("beta", Tensor::randn(1, 5, rng, 0.3));
    AdamW opt(params, {});
    // Produce non-trivial optimizer state.
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = mean_all(mul(params.get("alpha"), params.get("alpha")));
    }
    tape.backward(loss);
    opt.step(tape);

    json meta;
    meta["sid_table_hash"] = "00ff";
    meta["note"] = "unit";
    const std::string p1 = tmp_path("a.ckpt");
    const std::string p2 = tmp_path("b.ckpt");
    save_checkpoint(p1, params, &opt, &rng, meta);

    // Fresh model with matching shapes.
    ParamSet fresh;
    Rng rng2(99);
    fresh.add("alpha", Tensor::zeros(3, 4));
    fresh.add("beta", Tensor::zeros(1, 5));
    AdamW opt2(fresh, {});
    json loaded_meta = load_checkpoint_into(p1, fresh, &opt2, &rng2);
    REQUIRE(loaded_meta["sid_table_hash"] == "00ff");
    REQUIRE(fresh.get("alpha").values() == params.get("alpha").values());
    REQUIRE(opt2.step_count() == 1);
    REQUIRE(rng2.state() == rng.state());

    save_checkpoint(p2, fresh, &opt2, &rng2, loaded_meta);
    REQUIRE(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint load rejects mismatched models") {
    ParamSet params;
    params.add("w", Tensor::from(2, 2, {1, 2, 3, 4}));
    const std::string p = tmp_path("mismatch.ckpt");
    save_checkpoint(p, params, nullptr, nullptr, json::object());

    ParamSet other;
    other.add("w", Tensor::zeros(3, 3));
    REQUIRE_THROWS_AS(load_checkpoint_into(p, other), Error);

    ParamSet renamed;
    renamed.add("q", Tensor::zeros(2, 2));
    REQUIRE_THROWS_AS(load_checkpoint_into(p, renamed), Error);
}
