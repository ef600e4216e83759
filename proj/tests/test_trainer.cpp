#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "dds/trainer.hpp"

using namespace dds;

namespace {

Dataset tiny_dataset(std::uint64_t seed = 51) {
    SynthSpec spec;
    spec.image_size = 8;
    spec.signal_pixels = 6;
    spec.noise_amplitude = 0.25;
    spec.n_train = 32;
    spec.n_test = 8;
    return generate(spec, seed);
}

ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.gate.m = 6;
    cfg.selector.channels = 2;
    cfg.reconstructor.channels = 2;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.seed = 5;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("naive mode trains without a selector or gate") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.eval_mode = EvalMode::naive_ae;
    TrainResult r = train(cfg, ds);
    CHECK_FALSE(r.model.has_selector);
    CHECK(r.stats.instances == 0);  // no masks, nothing to count
    for (const auto& rec : r.metrics) {
        CHECK(std::isfinite(rec.mse));
        CHECK(rec.mask_overlap < 0.0);  // not applicable
    }
}

TEST_CASE("a zero learning rate is a training no-op") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.optimizer.lr = 0.0;
    cfg.selector_lr = 0.0;  // inherit the zero rate
    cfg.epochs = 2;
    TrainResult r = train(cfg, ds);
    std::vector<double> test_mse;
    for (const auto& rec : r.metrics)
        if (rec.split == "test") test_mse.push_back(rec.mse);
    REQUIRE(test_mse.size() == 2);
    CHECK(test_mse[0] == test_mse[1]);
}

TEST_CASE("dds training keeps the cardinality constraint and the zero-grad theorem") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.epochs = 3;
    cfg.spot_check_theorem = true;
    TrainResult r = train(cfg, ds);
    CHECK(r.stats.instances > 0);
    CHECK(r.stats.cardinality_violations == 0);
    CHECK(r.stats.eval_instances > 0);
    CHECK(r.stats.eval_violations == 0);
    CHECK(r.stats.spot_checks > 0);
    CHECK(r.stats.spot_check_failures == 0);
    CHECK(r.stats.train_budget_f > 0);  // epsilon = 0.1 lifts some budgets over 6 batches
}

TEST_CASE("training metrics are bit-reproducible for a fixed seed") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    TrainResult a = train(cfg, ds);
    TrainResult b = train(cfg, ds);
    const std::string p1 = "metrics_a.jsonl", p2 = "metrics_b.jsonl";
    write_metrics_jsonl(a.metrics, p1);
    write_metrics_jsonl(b.metrics, p2);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(!slurp(p1).empty());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("evaluation modes cover the forced and bypassed variants") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.epochs = 2;
    TrainResult r = train(cfg, ds);

    MetricsRecord dds_rec = evaluate(r.model, ds, EvalMode::dds);
    CHECK(std::isfinite(dds_rec.mse));
    CHECK(dds_rec.mask_overlap >= 0.0);
    CHECK(dds_rec.mask_overlap <= 1.0);
    CHECK(dds_rec.m == 6);

    MetricsRecord ones = evaluate(r.model, ds, EvalMode::forced_all_ones);
    CHECK(ones.mask_overlap == 1.0);  // the forced mask keeps everything
    CHECK(ones.mean_selected_score == 1.0);

    MetricsRecord uniform = evaluate(r.model, ds, EvalMode::forced_uniform_importance);
    CHECK(uniform.mean_selected_score == 1.0);
    CHECK(uniform.mask_overlap >= 0.0);

    MetricsRecord bypass = evaluate(r.model, ds, EvalMode::dds_train_only);
    CHECK(std::isfinite(bypass.mse));
    CHECK(bypass.mask_overlap < 0.0);  // mask bypassed, no selection stats

    CHECK_THROWS_WITH_AS(eval_mode_from_string("not_a_mode"), doctest::Contains("unknown mode"),
                         ConfigError);
}

TEST_CASE("evaluation on an untrained model is finite") {
    Dataset ds = tiny_dataset();
    ExperimentConfig base = tiny_config().resolved();
    TrainedModel model;
    model.cfg = base;
    model.has_selector = true;
    model.input_chw = {1, 8, 8};
    Rng rng(base.seed);
    model.selector = build_selector(base.selector.channels, model.input_chw, true);
    model.selector.init_params(rng);
    model.reconstructor = build_reconstructor(base.reconstructor.channels, base.reconstructor.latent_dim,
                                              model.input_chw);
    model.reconstructor.init_params(rng);
    MetricsRecord rec = evaluate(model, ds, EvalMode::dds);
    CHECK(std::isfinite(rec.mse));
    CHECK(rec.mse >= 0.0);
}

TEST_CASE("training rejects budgets beyond the feature count") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.gate.m = 999;  // F = 64
    CHECK_THROWS_AS(train(cfg, ds), ConfigError);
}

TEST_CASE("training aborts with context when the loss explodes") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    // the adaptive step magnitude is ~lr, so a catastrophic rate overflows
    // the reconstruction within a couple of batches
    cfg.optimizer.lr = 1e60;
    cfg.epochs = 2;
    CHECK_THROWS_WITH_AS(train(cfg, ds), doctest::Contains("non-finite loss"), NumericError);
}

TEST_CASE("ablation suite emits one row per mode and budget with shared seeds") {
    Dataset ds = tiny_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.epochs = 2;
    AblationOptions opts;
    opts.m_sweep = {4, 8};
    opts.modes = {EvalMode::naive_ae, EvalMode::dds, EvalMode::dds_train_only};
    AblationResult r = ablation_suite(cfg, ds, opts);
    REQUIRE(r.rows.size() == 6);
    for (const auto& row : r.rows) {
        CHECK(std::isfinite(row.mse_final));
        CHECK((row.m == 4 || row.m == 8));
        if (row.mode != EvalMode::naive_ae) CHECK(row.epochs_final == 2 * cfg.epochs);
    }
    // budget-parallel run reproduces the serial rows exactly
    AblationOptions par = opts;
    par.threads = 2;
    AblationResult r2 = ablation_suite(cfg, ds, par);
    REQUIRE(r2.rows.size() == r.rows.size());
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        CHECK(r2.rows[i].mse_final == r.rows[i].mse_final);
        CHECK(r2.rows[i].mse_matched == r.rows[i].mse_matched);
    }
}

TEST_CASE("metrics serialization is stable and omits timings") {
    MetricsRecord rec;
    rec.epoch = 3;
    rec.split = "test";
    rec.eval_mode = "dds";
    rec.m = 26;
    rec.mse = 0.015625;
    rec.mask_overlap = 0.5;
    rec.mean_selected_score = -1.0;
    rec.wall_seconds = 123.456;
    std::string line = to_json_line(rec);
    CHECK(line ==
          "{\"epoch\":3,\"eval_mode\":\"dds\",\"m\":26,\"mask_overlap\":0.5,"
          "\"mean_selected_score\":null,\"mse\":0.015625,\"split\":\"test\"}");
}
