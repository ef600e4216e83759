#pragma once

// Training harness wiring selector + gate + reconstructor, the evaluation
// modes behind every ablation row, and metrics emission (JSON lines + CSV).
// File outputs contain only deterministic fields, so a fixed (config, seed,
// dataset) triple reproduces them byte for byte; wall-clock timings go to
// the console.

#include <charconv>
#include <chrono>
#include <fstream>
#include <future>
#include <limits>
#include <string>
#include <vector>

#include "dds/gating.hpp"
#include "dds/nets.hpp"
#include "dds/synthdata.hpp"
#include "dds/tensor.hpp"

namespace dds {

enum class EvalMode {
    dds,
    naive_ae,
    no_residual,
    hard_sigmoid,
    classic_concrete,
    no_concrete,
    no_dynamic_m,
    dds_train_only,
    forced_all_ones,
    forced_uniform_importance,
};

inline const std::vector<std::pair<EvalMode, std::string>>& eval_mode_names() {
    static const std::vector<std::pair<EvalMode, std::string>> names = {
        {EvalMode::dds, "dds"},
        {EvalMode::naive_ae, "naive_ae"},
        {EvalMode::no_residual, "no_residual"},
        {EvalMode::hard_sigmoid, "hard_sigmoid"},
        {EvalMode::classic_concrete, "classic_concrete"},
        {EvalMode::no_concrete, "no_concrete"},
        {EvalMode::no_dynamic_m, "no_dynamic_m"},
        {EvalMode::dds_train_only, "dds_train_only"},
        {EvalMode::forced_all_ones, "forced_all_ones"},
        {EvalMode::forced_uniform_importance, "forced_uniform_importance"},
    };
    return names;
}

inline std::string to_string(EvalMode m) {
    for (const auto& [mode, name] : eval_mode_names())
        if (mode == m) return name;
    return "?";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
    for (const auto& [mode, name] : eval_mode_names())
        if (name == s) return mode;
    throw ConfigError("unknown mode '" + s + "'");
}

struct SelectorSpec {
    std::size_t channels = 8;
    bool per_channel_scores = false;
};

struct ReconstructorSpec {
    std::size_t channels = 8;
    std::size_t latent_dim = 0;  // 0: match the gate budget m
};

struct ExperimentConfig {
    GateConfig gate;
    SelectorSpec selector;
    ReconstructorSpec reconstructor;
    AdamConfig optimizer{2e-3, 0.9, 0.999, 1e-8};
    // The selection scores must drift slower than the reconstructor adapts,
    // otherwise early reconstruction error deselects bright pixels before
    // their value can show. 0 means: use optimizer.lr.
    double selector_lr = 2e-4;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    EvalMode eval_mode = EvalMode::dds;
    bool spot_check_theorem = false;  // instrumented zero-gradient checks during training

    bool uses_selector() const { return eval_mode != EvalMode::naive_ae; }

    // arm-specific gate settings (Table-style ablation rows)
    ExperimentConfig resolved() const {
        ExperimentConfig c = *this;
        switch (eval_mode) {
            case EvalMode::hard_sigmoid:
                c.gate.zeta = 1.1;
                c.gate.gamma = -0.1;
                break;
            case EvalMode::classic_concrete: c.gate.kappa = 1.0; break;
            case EvalMode::no_concrete: c.gate.kappa = 0.0; break;
            case EvalMode::no_dynamic_m: c.gate.epsilon = 0.0; break;
            default: break;
        }
        if (c.reconstructor.latent_dim == 0) c.reconstructor.latent_dim = c.gate.m;
        c.gate.mode = GateMode::train;
        return c;
    }

    bool with_residual() const { return eval_mode != EvalMode::no_residual; }
};

struct MetricsRecord {
    std::size_t epoch = 0;
    std::string split;  // "train" | "test"
    std::string eval_mode;
    std::size_t m = 0;
    double mse = 0.0;
    double mask_overlap = -1.0;          // < 0: not applicable
    double mean_selected_score = -1.0;   // < 0: not applicable
    double wall_seconds = 0.0;           // console only, never serialized
};

// instrumentation over a whole run (cardinality constraint + theorem checks)
struct TrainStats {
    std::size_t instances = 0;
    std::size_t cardinality_violations = 0;
    std::size_t train_budget_m = 0;  // dynamic-M kept the budget
    std::size_t train_budget_f = 0;  // dynamic-M lifted to all features
    std::size_t eval_instances = 0;
    std::size_t eval_violations = 0;
    std::size_t spot_checks = 0;
    std::size_t spot_check_failures = 0;
};

struct TrainedModel {
    ExperimentConfig cfg;  // resolved
    bool has_selector = false;
    Network selector;
    Network reconstructor;
    Shape input_chw;
};

struct TrainResult {
    TrainedModel model;
    std::vector<MetricsRecord> metrics;
    TrainStats stats;
};

namespace detail {

struct BatchOutcome {
    Tensor scores;  // [B x F], soft, post-gate (empty when no selector)
    Tensor mask;    // [B x F] binary constant
    Tensor recon;   // [B x C x H x W]
    Tensor loss;    // scalar
};

// One forward pass. `x` carries the data; `x_gate` is the tensor the gate
// product consumes (identical values; a tracked leaf during spot checks so
// the exact zero-gradient property can be asserted on real training state).
inline BatchOutcome forward_batch(const TrainedModel& model, std::span<const Tensor> sel_params,
                                  std::span<const Tensor> rec_params, const Tensor& x, const Tensor& x_gate,
                                  const GateConfig& gate, const std::vector<std::size_t>& m_eff,
                                  EvalMode mode, Rng* noise_rng) {
    std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t F = H * W;
    BatchOutcome out;

    if (!model.has_selector || mode == EvalMode::naive_ae) {
        out.recon = model.reconstructor.forward(rec_params, x_gate);
        out.loss = mse(out.recon, x);
        return out;
    }

    Tensor recon_input;
    if (mode == EvalMode::dds_train_only) {
        recon_input = x_gate;  // mask bypassed at inference
    } else if (mode == EvalMode::forced_all_ones) {
        out.scores = Tensor::ones({B, F});
        out.mask = Tensor::ones({B, F});
        recon_input = x_gate;  // 1 * 1 * x
    } else {
        Tensor pre = model.selector.forward(sel_params, x);  // selector sees the input as data
        Tensor shifted = add(pre, Tensor::scalar(gate.delta));
        Tensor scores4 = (gate.mode == GateMode::train && gate.kappa > 0.0 && noise_rng)
                             ? stochastic_gate(shifted, gate, *noise_rng)
                             : hard_concrete(shifted, gate);
        out.scores = reshape(scores4, {B, F});
        out.mask = topm_mask(out.scores.detach(), m_eff);

        Tensor x_flat = reshape(x_gate, {B, C * F});
        Tensor applied;
        if (mode == EvalMode::forced_uniform_importance) {
            applied = C == 1 ? mul(x_flat, out.mask)
                             : mul(x_flat, reshape(repeat_channels(reshape(out.mask, {B, 1, H, W}), C), {B, C * F}));
        } else if (C == 1) {
            applied = apply_gate(x_flat, out.scores, out.mask);
        } else {
            Tensor sc = reshape(repeat_channels(reshape(out.scores, {B, 1, H, W}), C), {B, C * F});
            Tensor mc = reshape(repeat_channels(reshape(out.mask, {B, 1, H, W}), C), {B, C * F});
            applied = apply_gate(x_flat, sc, mc);
        }
        recon_input = reshape(applied, {B, C, H, W});
    }

    out.recon = model.reconstructor.forward(rec_params, recon_input);
    out.loss = mse(out.recon, x);
    return out;
}

inline double mean_selected_score(const Tensor& scores, const Tensor& mask) {
    double num = 0.0, den = 0.0;
    auto sd = scores.data(), md = mask.data();
    for (std::size_t i = 0; i < sd.size(); ++i)
        if (md[i] == 1.0) {
            num += sd[i];
            den += 1.0;
        }
    return den > 0.0 ? num / den : -1.0;
}

inline std::vector<std::size_t> range_ids(std::size_t begin, std::size_t count) {
    std::vector<std::size_t> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = begin + i;
    return v;
}

inline Tensor gather_images(const Dataset& ds, std::span<const std::size_t> ids) {
    std::size_t hw = ds.features();
    std::vector<double> out(ids.size() * hw);
    auto d = ds.images.data();
    for (std::size_t k = 0; k < ids.size(); ++k)
        std::copy(&d[ids[k] * hw], &d[ids[k] * hw] + hw, &out[k * hw]);
    return Tensor({ids.size(), 1, ds.height(), ds.width()}, std::move(out));
}

inline Tensor gather_truth(const Dataset& ds, std::span<const std::size_t> ids) {
    std::size_t hw = ds.features();
    std::vector<double> out(ids.size() * hw);
    auto d = ds.relevance_truth.data();
    for (std::size_t k = 0; k < ids.size(); ++k)
        std::copy(&d[ids[k] * hw], &d[ids[k] * hw] + hw, &out[k * hw]);
    return Tensor({ids.size(), hw}, std::move(out));
}

}  // namespace detail

// Deterministic evaluation (kappa = 0, dynamic-M off) of one mode over the
// test split.
inline MetricsRecord evaluate(const TrainedModel& model, const Dataset& ds, EvalMode mode,
                              std::size_t epoch_label = 0, TrainStats* stats = nullptr) {
    GateConfig gate = model.cfg.gate.for_eval();
    std::size_t F = ds.features();
    if (model.has_selector && (gate.m < 1 || gate.m > F))
        throw ConfigError("evaluate: budget m outside [1, F]");

    MetricsRecord rec;
    rec.epoch = epoch_label;
    rec.split = "test";
    rec.eval_mode = to_string(mode);
    rec.m = gate.m;

    auto sel_params = model.has_selector ? model.selector.constants() : std::vector<Tensor>{};
    auto rec_params = model.reconstructor.constants();

    double mse_sum = 0.0, overlap_sum = 0.0, score_sum = 0.0;
    std::size_t n_batches_with_mask = 0;
    std::size_t done = 0;
    std::size_t chunk = std::max<std::size_t>(1, model.cfg.batch_size);
    while (done < ds.n_test) {
        std::size_t count = std::min(chunk, ds.n_test - done);
        auto ids = detail::range_ids(ds.n_train + done, count);
        Tensor x = detail::gather_images(ds, ids);
        std::vector<std::size_t> m_eff(count, gate.m);
        auto out = detail::forward_batch(model, sel_params, rec_params, x, x, gate, m_eff, mode, nullptr);
        mse_sum += out.loss.item() * static_cast<double>(count);
        if (out.mask.size() > 0) {
            Tensor truth = detail::gather_truth(ds, ids);
            overlap_sum += mask_overlap(out.mask, truth, ds.signal_pixels) * static_cast<double>(count);
            double msc = mode == EvalMode::forced_all_ones || mode == EvalMode::forced_uniform_importance
                             ? 1.0
                             : detail::mean_selected_score(out.scores, out.mask);
            score_sum += msc * static_cast<double>(count);
            ++n_batches_with_mask;
            if (stats) {
                for (std::size_t b = 0; b < count; ++b) {
                    ++stats->eval_instances;
                    std::size_t ones = 0;
                    for (std::size_t j = 0; j < F; ++j)
                        if (out.mask[b * F + j] == 1.0) ++ones;
                    std::size_t expect = mode == EvalMode::forced_all_ones ? F : gate.m;
                    if (ones != expect) ++stats->eval_violations;
                }
            }
        }
        done += count;
    }
    rec.mse = mse_sum / static_cast<double>(ds.n_test);
    if (n_batches_with_mask > 0) {
        rec.mask_overlap = overlap_sum / static_cast<double>(ds.n_test);
        rec.mean_selected_score = score_sum / static_cast<double>(ds.n_test);
    }
    return rec;
}

inline TrainResult train(const ExperimentConfig& raw_cfg, const Dataset& ds) {
    ExperimentConfig cfg = raw_cfg.resolved();
    cfg.gate.validate();
    std::size_t F = ds.features();
    if (cfg.gate.m > F)
        throw ConfigError("train: budget m " + std::to_string(cfg.gate.m) + " exceeds feature count " +
                          std::to_string(F));
    if (ds.n_train == 0) throw ConfigError("train: dataset has no training split");

    Shape chw{1, ds.height(), ds.width()};
    TrainResult result;
    result.model.cfg = cfg;
    result.model.input_chw = chw;
    result.model.has_selector = cfg.uses_selector();

    Rng rng(cfg.seed);
    Rng init_rng = rng.fork(1), shuffle_rng = rng.fork(2), noise_rng = rng.fork(3), dyn_rng = rng.fork(4),
        spot_rng = rng.fork(5);

    if (result.model.has_selector) {
        result.model.selector = build_selector(cfg.selector.channels, chw, cfg.with_residual(),
                                               cfg.selector.per_channel_scores);
        result.model.selector.init_params(init_rng);
    }
    result.model.reconstructor = build_reconstructor(cfg.reconstructor.channels, cfg.reconstructor.latent_dim, chw);
    result.model.reconstructor.init_params(init_rng);

    Network& sel = result.model.selector;
    Network& rec = result.model.reconstructor;

    AdamConfig sel_opt_cfg = cfg.optimizer;
    if (cfg.selector_lr > 0.0) sel_opt_cfg.lr = cfg.selector_lr;
    Adam sel_opt(sel_opt_cfg, result.model.has_selector ? sel.param_infos() : std::vector<ParamInfo>{});
    Adam rec_opt(cfg.optimizer, rec.param_infos());

    std::vector<std::size_t> order(ds.n_train);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;

        for (std::size_t start = 0; start < ds.n_train; start += cfg.batch_size) {
            std::size_t count = std::min(cfg.batch_size, ds.n_train - start);
            std::span<const std::size_t> ids(&order[start], count);
            Tensor x = detail::gather_images(ds, ids);

            Tape tape;
            auto sel_params = result.model.has_selector ? sel.mount(tape) : std::vector<Tensor>{};
            auto rec_params = rec.mount(tape);

            std::vector<std::size_t> m_eff = result.model.has_selector
                                                 ? dynamic_m(count, F, cfg.gate, dyn_rng)
                                                 : std::vector<std::size_t>(count, cfg.gate.m);
            auto out = detail::forward_batch(result.model, sel_params, rec_params, x, x, cfg.gate, m_eff,
                                             cfg.eval_mode == EvalMode::naive_ae ? EvalMode::naive_ae
                                                                                 : EvalMode::dds,
                                             &noise_rng);
            double loss_v = out.loss.item();
            if (!std::isfinite(loss_v))
                throw NumericError("training aborted: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batches) + " (mode " +
                                   to_string(cfg.eval_mode) + ")");
            loss_sum += loss_v;
            ++batches;

            tape.backward(out.loss);
            if (result.model.has_selector) {
                std::vector<std::span<const double>> grads;
                std::vector<std::vector<double>*> targets;
                for (std::size_t i = 0; i < sel_params.size(); ++i) {
                    grads.push_back(sel_params[i].grad());
                    targets.push_back(&sel.values()[i]);
                }
                sel_opt.step(targets, grads);
            }
            {
                std::vector<std::span<const double>> grads;
                std::vector<std::vector<double>*> targets;
                for (std::size_t i = 0; i < rec_params.size(); ++i) {
                    grads.push_back(rec_params[i].grad());
                    targets.push_back(&rec.values()[i]);
                }
                rec_opt.step(targets, grads);
            }

            // cardinality instrumentation
            if (out.mask.size() > 0) {
                for (std::size_t b = 0; b < count; ++b) {
                    ++result.stats.instances;
                    std::size_t ones = 0;
                    for (std::size_t j = 0; j < F; ++j)
                        if (out.mask[b * F + j] == 1.0) ++ones;
                    if (ones != std::min(m_eff[b], F)) ++result.stats.cardinality_violations;
                    if (m_eff[b] == F && cfg.gate.m != F) ++result.stats.train_budget_f;
                    else ++result.stats.train_budget_m;
                }
            }

            // zero-gradient theorem spot check on live training state
            if (cfg.spot_check_theorem && result.model.has_selector && batches % 8 == 1) {
                Tape check_tape;
                auto sp = sel.mount(check_tape);
                auto rp = rec.mount(check_tape);
                Tensor x_leaf = check_tape.leaf(x);
                Rng noise_copy = spot_rng.fork(epoch * 1000 + batches);
                auto chk = detail::forward_batch(result.model, sp, rp, x, x_leaf, cfg.gate, m_eff,
                                                 EvalMode::dds, &noise_copy);
                check_tape.backward(chk.loss);
                ++result.stats.spot_checks;
                auto g = x_leaf.grad();
                bool okay = true;
                for (std::size_t i = 0; i < chk.mask.size(); ++i)
                    if (chk.mask[i] == 0.0 && g[i] != 0.0) okay = false;
                if (!okay) ++result.stats.spot_check_failures;
            }
        }

        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        MetricsRecord train_rec;
        train_rec.epoch = epoch;
        train_rec.split = "train";
        train_rec.eval_mode = to_string(cfg.eval_mode);
        train_rec.m = cfg.gate.m;
        train_rec.mse = loss_sum / static_cast<double>(batches);
        train_rec.wall_seconds = wall;
        result.metrics.push_back(train_rec);

        MetricsRecord test_rec = evaluate(result.model, ds, cfg.eval_mode, epoch, &result.stats);
        test_rec.wall_seconds = wall;
        result.metrics.push_back(test_rec);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation suite: every requested mode at every budget in the sweep, same
// seed everywhere so arm differences are attributable to the mode. The
// dds-family arms train for 2x the naive epochs; records exist at both the
// matched and the doubled epoch. Modes that share dds training reuse the
// dds checkpoint of their budget.
// ---------------------------------------------------------------------------
struct AblationOptions {
    std::vector<std::size_t> m_sweep;
    std::vector<EvalMode> modes;  // empty: all modes
    std::size_t threads = 1;
};

struct AblationRow {
    EvalMode mode;
    std::size_t m = 0;
    std::size_t epochs_matched = 0;
    std::size_t epochs_final = 0;
    double mse_matched = 0.0;
    double mse_final = 0.0;
    double mask_overlap = -1.0;
    double mean_selected_score = -1.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;             // keyed (mode, m), sweep-major
    std::vector<MetricsRecord> all_metrics;    // full per-epoch history
};

namespace detail {

inline double mse_at_epoch(const std::vector<MetricsRecord>& ms, std::size_t epoch) {
    for (const auto& r : ms)
        if (r.split == "test" && r.epoch == epoch) return r.mse;
    return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

inline AblationResult ablation_suite(const ExperimentConfig& base, const Dataset& ds,
                                     const AblationOptions& opts) {
    std::vector<EvalMode> modes = opts.modes;
    if (modes.empty())
        for (const auto& [mode, name] : eval_mode_names()) modes.push_back(mode);
    std::vector<std::size_t> sweep = opts.m_sweep;
    if (sweep.empty()) sweep = {base.gate.m};

    struct Job {
        std::size_t m;
        std::vector<AblationRow> rows;
        std::vector<MetricsRecord> metrics;
    };

    auto run_budget = [&](std::size_t m) {
        Job job;
        job.m = m;
        std::size_t naive_epochs = base.epochs;
        std::size_t dds_epochs = 2 * base.epochs;

        TrainResult dds_result;
        bool have_dds = false;
        // dds-family arms keep the base reconstructor across the sweep (only
        // the mask budget varies); latent 0 still falls back to m
        auto dds_arm = [&]() -> TrainResult& {
            if (!have_dds) {
                ExperimentConfig c = base;
                c.gate.m = m;
                c.eval_mode = EvalMode::dds;
                c.epochs = dds_epochs;
                dds_result = train(c, ds);
                have_dds = true;
            }
            return dds_result;
        };

        for (EvalMode mode : modes) {
            AblationRow row;
            row.mode = mode;
            row.m = m;
            row.epochs_matched = naive_epochs;

            if (mode == EvalMode::naive_ae) {
                ExperimentConfig c = base;
                c.gate.m = m;
                c.reconstructor.latent_dim = 0;  // the baseline's latent budget is m
                c.eval_mode = mode;
                c.epochs = naive_epochs;
                TrainResult r = train(c, ds);
                row.epochs_final = naive_epochs;
                row.mse_matched = detail::mse_at_epoch(r.metrics, naive_epochs);
                row.mse_final = row.mse_matched;
                const MetricsRecord& last = r.metrics.back();
                row.mask_overlap = last.mask_overlap;
                row.mean_selected_score = last.mean_selected_score;
                job.metrics.insert(job.metrics.end(), r.metrics.begin(), r.metrics.end());
            } else if (mode == EvalMode::dds_train_only || mode == EvalMode::forced_all_ones ||
                       mode == EvalMode::forced_uniform_importance) {
                TrainResult& r = dds_arm();
                MetricsRecord matched = evaluate(r.model, ds, mode, naive_epochs);
                MetricsRecord final_rec = evaluate(r.model, ds, mode, dds_epochs);
                row.epochs_final = dds_epochs;
                row.mse_matched = matched.mse;  // same checkpoint; label only
                row.mse_final = final_rec.mse;
                row.mask_overlap = final_rec.mask_overlap;
                row.mean_selected_score = final_rec.mean_selected_score;
                job.metrics.push_back(final_rec);
            } else {
                TrainResult local;
                TrainResult* r;
                if (mode == EvalMode::dds) {
                    r = &dds_arm();
                } else {
                    ExperimentConfig c = base;
                    c.gate.m = m;
                    c.eval_mode = mode;
                    c.epochs = dds_epochs;
                    local = train(c, ds);
                    r = &local;
                }
                row.epochs_final = dds_epochs;
                row.mse_matched = detail::mse_at_epoch(r->metrics, naive_epochs);
                row.mse_final = detail::mse_at_epoch(r->metrics, dds_epochs);
                const MetricsRecord& last = r->metrics.back();
                row.mask_overlap = last.mask_overlap;
                row.mean_selected_score = last.mean_selected_score;
                job.metrics.insert(job.metrics.end(), r->metrics.begin(), r->metrics.end());
            }
            job.rows.push_back(row);
        }
        return job;
    };

    std::vector<Job> jobs(sweep.size());
    if (opts.threads > 1 && sweep.size() > 1) {
        std::vector<std::future<Job>> futs;
        futs.reserve(sweep.size());
        for (std::size_t m : sweep) futs.push_back(std::async(std::launch::async, run_budget, m));
        for (std::size_t i = 0; i < futs.size(); ++i) jobs[i] = futs[i].get();
    } else {
        for (std::size_t i = 0; i < sweep.size(); ++i) jobs[i] = run_budget(sweep[i]);
    }

    AblationResult out;
    for (const Job& job : jobs) {
        out.rows.insert(out.rows.end(), job.rows.begin(), job.rows.end());
        out.all_metrics.insert(out.all_metrics.end(), job.metrics.begin(), job.metrics.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization. Doubles use shortest round-trip formatting; records carry
// no timing fields, so identical runs produce identical bytes.
// ---------------------------------------------------------------------------
inline std::string fmt_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string to_json_line(const MetricsRecord& r) {
    std::string s = "{";
    s += "\"epoch\":" + std::to_string(r.epoch);
    s += ",\"eval_mode\":\"" + r.eval_mode + "\"";
    s += ",\"m\":" + std::to_string(r.m);
    s += ",\"mask_overlap\":" + (r.mask_overlap < 0.0 ? "null" : fmt_double(r.mask_overlap));
    s += ",\"mean_selected_score\":" + (r.mean_selected_score < 0.0 ? "null" : fmt_double(r.mean_selected_score));
    s += ",\"mse\":" + fmt_double(r.mse);
    s += ",\"split\":\"" + r.split + "\"";
    s += "}";
    return s;
}

inline void write_metrics_jsonl(const std::vector<MetricsRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("metrics: cannot open " + path + " for writing");
    for (const auto& r : records) out << to_json_line(r) << "\n";
    if (!out) throw IoError("metrics: write failed for " + path);
}

inline void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("metrics: cannot open " + path + " for writing");
    out << "epoch,split,eval_mode,m,mse,mask_overlap,mean_selected_score\n";
    for (const auto& r : records) {
        out << r.epoch << ',' << r.split << ',' << r.eval_mode << ',' << r.m << ',' << fmt_double(r.mse)
            << ',' << (r.mask_overlap < 0.0 ? "" : fmt_double(r.mask_overlap)) << ','
            << (r.mean_selected_score < 0.0 ? "" : fmt_double(r.mean_selected_score)) << "\n";
    }
    if (!out) throw IoError("metrics: write failed for " + path);
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("metrics: cannot open " + path + " for writing");
    out << "eval_mode,m,epochs_matched,epochs_final,mse_matched,mse_final,mask_overlap,mean_selected_score\n";
    for (const auto& r : rows) {
        out << to_string(r.mode) << ',' << r.m << ',' << r.epochs_matched << ',' << r.epochs_final << ','
            << fmt_double(r.mse_matched) << ',' << fmt_double(r.mse_final) << ','
            << (r.mask_overlap < 0.0 ? "" : fmt_double(r.mask_overlap)) << ','
            << (r.mean_selected_score < 0.0 ? "" : fmt_double(r.mean_selected_score)) << "\n";
    }
    if (!out) throw IoError("metrics: write failed for " + path);
}

}  // namespace dds
