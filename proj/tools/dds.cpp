// dds: command-line workbench for unsupervised dynamic data selection.
// Subcommands: gen, train, eval, ablate, gradcheck, mask.
// Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numerical abort.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "dds/config.hpp"
#include "dds/gradcheck.hpp"
#include "dds/synthdata.hpp"
#include "dds/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct GenArgs {
    std::size_t size = 16;
    std::size_t signal = 26;
    std::string pattern = "blob";
    std::string noise = "uniform";
    double amplitude = 0.3;
    std::size_t ntrain = 192;
    std::size_t ntest = 48;
    std::uint64_t seed = 7;
    std::string out;
    std::string export_pgm;
    std::size_t export_count = 8;
};

struct RunArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string data;
    std::string out_dir;
    std::string ckpt;
    std::string mode;
    std::string m_sweep;
    std::string modes;
    std::size_t threads = 1;
    std::size_t count = 8;
    bool has_seed = false;
    std::uint64_t seed = 0;
    bool has_epochs = false;
    std::size_t epochs = 0;
    bool has_m = false;
    std::size_t m = 0;
};

dds::SignalPattern pattern_from_string(const std::string& s) {
    if (s == "blob") return dds::SignalPattern::blob;
    if (s == "bar") return dds::SignalPattern::bar;
    if (s == "glyph") return dds::SignalPattern::glyph;
    throw dds::ConfigError("unknown pattern '" + s + "' (expected blob, bar or glyph)");
}

dds::NoiseKind noise_from_string(const std::string& s) {
    if (s == "uniform") return dds::NoiseKind::uniform;
    if (s == "salt_pepper") return dds::NoiseKind::salt_pepper;
    if (s == "structured_clutter") return dds::NoiseKind::structured_clutter;
    throw dds::ConfigError("unknown noise kind '" + s + "'");
}

dds::CliConfig resolve_config(const RunArgs& a) {
    dds::CliConfig cfg;
    if (!a.config_path.empty()) cfg.load_file(a.config_path);
    for (const std::string& o : a.overrides) cfg.set_override(o);
    if (!a.mode.empty()) cfg.set("train.mode", a.mode);
    if (a.has_seed) cfg.set("train.seed", std::to_string(a.seed));
    if (a.has_epochs) cfg.set("train.epochs", std::to_string(a.epochs));
    if (a.has_m) cfg.set("gate.m", std::to_string(a.m));
    return cfg;
}

void echo_gate(const dds::ExperimentConfig& c) {
    const dds::GateConfig& g = c.gate;
    std::cout << "gate: beta=" << dds::fmt_double(g.beta) << " zeta=" << dds::fmt_double(g.zeta)
              << " gamma=" << dds::fmt_double(g.gamma) << " delta=" << dds::fmt_double(g.delta)
              << " kappa(train)=" << dds::fmt_double(g.kappa) << " kappa(eval)=0"
              << " epsilon=" << dds::fmt_double(g.epsilon) << " m=" << g.m << "\n";
}

// rebuild the model skeleton for a checkpoint produced by `train`
dds::TrainedModel model_for(const dds::ExperimentConfig& raw, const dds::Dataset& ds) {
    dds::ExperimentConfig cfg = raw.resolved();
    dds::TrainedModel model;
    model.cfg = cfg;
    model.input_chw = {1, ds.height(), ds.width()};
    model.has_selector = cfg.uses_selector();
    if (model.has_selector)
        model.selector = dds::build_selector(cfg.selector.channels, model.input_chw, cfg.with_residual(),
                                             cfg.selector.per_channel_scores);
    model.reconstructor =
        dds::build_reconstructor(cfg.reconstructor.channels, cfg.reconstructor.latent_dim, model.input_chw);
    return model;
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::string cur;
    std::istringstream is(csv);
    while (std::getline(is, cur, ',')) {
        if (cur.empty()) continue;
        out.push_back(static_cast<std::size_t>(std::stoull(cur)));
    }
    return out;
}

int cmd_gen(const GenArgs& a) {
    dds::SynthSpec spec;
    spec.image_size = a.size;
    spec.signal_pixels = a.signal;
    spec.signal_pattern = pattern_from_string(a.pattern);
    spec.noise_kind = noise_from_string(a.noise);
    spec.noise_amplitude = a.amplitude;
    spec.n_train = a.ntrain;
    spec.n_test = a.ntest;
    spec.validate();

    dds::Dataset ds = dds::generate(spec, a.seed);
    dds::save(ds, a.out);
    std::cout << "wrote " << a.out << ": " << ds.total() << " images (" << ds.n_train << " train / "
              << ds.n_test << " test), " << ds.features() << " features, " << ds.signal_pixels
              << " signal pixels\n";

    if (!a.export_pgm.empty()) {
        fs::create_directories(a.export_pgm);
        std::size_t n = std::min(a.export_count, ds.total());
        std::size_t hw = ds.features();
        for (std::size_t i = 0; i < n; ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "image_%03zu.pgm", i);
            dds::write_pgm((fs::path(a.export_pgm) / name).string(), ds.height(), ds.width(),
                           ds.images.data().subspan(i * hw, hw));
            std::snprintf(name, sizeof(name), "truth_%03zu.pgm", i);
            dds::write_pgm((fs::path(a.export_pgm) / name).string(), ds.height(), ds.width(),
                           ds.relevance_truth.data().subspan(i * hw, hw));
        }
        std::cout << "exported " << n << " image/truth pairs to " << a.export_pgm << "\n";
    }
    return 0;
}

int cmd_train(const RunArgs& a) {
    dds::CliConfig cfg = resolve_config(a);
    dds::ExperimentConfig exp = cfg.experiment();
    dds::Dataset ds = dds::load(a.data);

    fs::create_directories(a.out_dir);
    cfg.echo_to((fs::path(a.out_dir) / "config_resolved.ini").string());
    echo_gate(exp.resolved());

    dds::TrainResult r = dds::train(exp, ds);
    dds::write_metrics_jsonl(r.metrics, (fs::path(a.out_dir) / "metrics.jsonl").string());
    dds::write_metrics_csv(r.metrics, (fs::path(a.out_dir) / "metrics.csv").string());

    std::vector<const dds::Network*> nets;
    if (r.model.has_selector) nets.push_back(&r.model.selector);
    nets.push_back(&r.model.reconstructor);
    dds::save_checkpoint(nets, (fs::path(a.out_dir) / "checkpoint.dds1").string());

    const dds::MetricsRecord& last = r.metrics.back();
    std::cout << "final test mse: " << dds::fmt_double(last.mse);
    if (last.mask_overlap >= 0.0) std::cout << "  mask overlap: " << dds::fmt_double(last.mask_overlap);
    std::cout << "\n";
    if (r.stats.cardinality_violations + r.stats.eval_violations > 0) {
        std::cerr << "cardinality violations detected: " << r.stats.cardinality_violations << " train, "
                  << r.stats.eval_violations << " eval\n";
        return 1;
    }
    if (exp.spot_check_theorem && r.stats.spot_check_failures > 0) {
        std::cerr << "zero-gradient spot checks failed: " << r.stats.spot_check_failures << "/"
                  << r.stats.spot_checks << "\n";
        return 1;
    }
    return 0;
}

int cmd_eval(const RunArgs& a) {
    dds::CliConfig cfg = resolve_config(a);
    dds::ExperimentConfig exp = cfg.experiment();
    dds::EvalMode mode = dds::eval_mode_from_string(a.mode.empty() ? cfg.get("train.mode") : a.mode);
    dds::Dataset ds = dds::load(a.data);

    // the networks an arm of this mode would have trained
    dds::ExperimentConfig arm = exp;
    arm.eval_mode = mode == dds::EvalMode::naive_ae ? mode : dds::EvalMode::dds;
    dds::TrainedModel model = model_for(arm, ds);
    std::vector<dds::Network*> nets;
    if (model.has_selector) nets.push_back(&model.selector);
    nets.push_back(&model.reconstructor);
    dds::load_checkpoint(nets, a.ckpt);

    dds::MetricsRecord rec = dds::evaluate(model, ds, mode);
    std::cout << dds::to_json_line(rec) << "\n";
    if (!a.out_dir.empty()) {
        fs::create_directories(a.out_dir);
        cfg.echo_to((fs::path(a.out_dir) / "config_resolved.ini").string());
        dds::write_metrics_jsonl({rec}, (fs::path(a.out_dir) / "metrics.jsonl").string());
    }
    return 0;
}

int cmd_ablate(const RunArgs& a) {
    dds::CliConfig cfg = resolve_config(a);
    dds::ExperimentConfig exp = cfg.experiment();
    dds::Dataset ds = dds::load(a.data);

    dds::AblationOptions opts;
    opts.threads = a.threads;
    if (!a.m_sweep.empty()) opts.m_sweep = parse_size_list(a.m_sweep);
    if (!a.modes.empty()) {
        std::istringstream is(a.modes);
        std::string tok;
        while (std::getline(is, tok, ','))
            if (!tok.empty()) opts.modes.push_back(dds::eval_mode_from_string(tok));
    }

    fs::create_directories(a.out_dir);
    cfg.echo_to((fs::path(a.out_dir) / "config_resolved.ini").string());
    echo_gate(exp.resolved());

    dds::AblationResult r = dds::ablation_suite(exp, ds, opts);
    dds::write_metrics_jsonl(r.all_metrics, (fs::path(a.out_dir) / "metrics.jsonl").string());
    dds::write_ablation_csv(r.rows, (fs::path(a.out_dir) / "ablation.csv").string());
    std::cout << "ablation rows: " << r.rows.size() << "\n";
    for (const auto& row : r.rows)
        std::cout << "  " << dds::to_string(row.mode) << " m=" << row.m
                  << " mse@" << row.epochs_matched << "=" << dds::fmt_double(row.mse_matched)
                  << " mse@" << row.epochs_final << "=" << dds::fmt_double(row.mse_final) << "\n";
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t rounds, bool corrupt) {
    if (corrupt) {
        // fault-injection fixture: the checker must flag the broken rule
        dds::gradcheck::Report rep = dds::gradcheck::run_corrupted_fixture(seed);
        std::cout << "corrupted fixture max relative error: " << dds::fmt_double(rep.max_rel_err) << "\n";
        return rep.max_rel_err > 1e-4 ? 1 : 0;
    }
    dds::gradcheck::SuiteResult res = dds::gradcheck::run_suite(seed, rounds);
    std::cout << "max relative error: " << dds::fmt_double(res.max_rel_err) << " (worst: "
              << (res.worst.empty() ? "-" : res.worst) << ") over " << res.checked << " samples, "
              << res.kink_skips << " kink skips\n";
    std::cout << "masked-pixel gradients exactly zero: " << (res.masked_zeros_exact ? "yes" : "NO") << "\n";
    if (!res.ok(1e-4)) {
        std::cerr << "gradcheck FAILED (tolerance 1e-4)\n";
        return 1;
    }
    std::cout << "gradcheck ok\n";
    return 0;
}

int cmd_mask(const RunArgs& a) {
    dds::CliConfig cfg = resolve_config(a);
    dds::ExperimentConfig exp = cfg.experiment();
    dds::Dataset ds = dds::load(a.data);

    dds::ExperimentConfig arm = exp;
    arm.eval_mode = dds::EvalMode::dds;
    dds::TrainedModel model = model_for(arm, ds);
    std::vector<dds::Network*> nets{&model.selector, &model.reconstructor};
    dds::load_checkpoint(nets, a.ckpt);

    fs::create_directories(a.out_dir);
    std::size_t count = std::min(a.count, ds.n_test);
    std::size_t H = ds.height(), W = ds.width(), F = ds.features();
    dds::GateConfig gate = model.cfg.gate.for_eval();

    auto sel_params = model.selector.constants();
    double overlap_sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t idx = ds.n_train + i;
        dds::Tensor x = ds.batch(idx, 1);
        dds::Tensor pre = model.selector.forward(sel_params, x);
        dds::Tensor scores4 = dds::hard_concrete(dds::add(pre, dds::Tensor::scalar(gate.delta)), gate);
        dds::Tensor scores = dds::reshape(scores4, {1, F});
        dds::Tensor mask = dds::topm_mask(scores, {gate.m});
        dds::Tensor truth = ds.truth_batch(idx, 1);
        overlap_sum += dds::mask_overlap(mask, truth, ds.signal_pixels);

        char name[64];
        std::snprintf(name, sizeof(name), "input_%03zu.pgm", i);
        dds::write_pgm((fs::path(a.out_dir) / name).string(), H, W, x.data());
        std::snprintf(name, sizeof(name), "scores_%03zu.pgm", i);
        dds::write_pgm((fs::path(a.out_dir) / name).string(), H, W, scores.data());
        std::snprintf(name, sizeof(name), "mask_%03zu.pgm", i);
        dds::write_pgm((fs::path(a.out_dir) / name).string(), H, W, mask.data());
    }
    std::cout << "mean mask overlap: " << dds::fmt_double(overlap_sum / static_cast<double>(count)) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dds: unsupervised dynamic data selection workbench"};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* sgen = app.add_subcommand("gen", "generate a synthetic dataset (.ddsd)");
    sgen->add_option("--size", gen.size, "image side length (H = W)");
    sgen->add_option("--signal", gen.signal, "informative pixels per image");
    sgen->add_option("--pattern", gen.pattern, "signal pattern: blob, bar or glyph");
    sgen->add_option("--noise", gen.noise, "noise kind: uniform, salt_pepper or structured_clutter");
    sgen->add_option("--amplitude", gen.amplitude, "noise amplitude in [0, 1]");
    sgen->add_option("--ntrain", gen.ntrain, "training instances");
    sgen->add_option("--ntest", gen.ntest, "test instances");
    sgen->add_option("--seed", gen.seed, "generation seed");
    sgen->add_option("--out", gen.out, "output dataset path")->required();
    sgen->add_option("--export-pgm", gen.export_pgm, "also dump images/truth as PGM into this directory");
    sgen->add_option("--export-count", gen.export_count, "number of images to dump with --export-pgm");

    auto add_run_flags = [](CLI::App* s, RunArgs& a, bool need_data, bool need_out) {
        auto* d = s->add_option("--data", a.data, "dataset file (.ddsd)");
        if (need_data) d->required();
        auto* o = s->add_option("--out", a.out_dir, "output directory");
        if (need_out) o->required();
        s->add_option("--config", a.config_path, "config file (key = value sections)");
        s->add_option("--set", a.overrides, "override, e.g. --set gate.kappa=0.2")->take_all();
        s->add_option("--mode", a.mode, "experiment mode (dds, naive_ae, ...)");
        s->add_option("--seed", a.seed, "seed override")->each([&a](const std::string&) { a.has_seed = true; });
        s->add_option("--epochs", a.epochs, "epoch override")->each([&a](const std::string&) { a.has_epochs = true; });
        s->add_option("--m", a.m, "feature budget override")->each([&a](const std::string&) { a.has_m = true; });
    };

    RunArgs train_args;
    CLI::App* strain = app.add_subcommand("train", "train one experiment arm");
    add_run_flags(strain, train_args, true, true);

    RunArgs eval_args;
    CLI::App* seval = app.add_subcommand("eval", "evaluate a checkpoint under a mode");
    add_run_flags(seval, eval_args, true, false);
    seval->add_option("--ckpt", eval_args.ckpt, "checkpoint file (.dds1)")->required();

    RunArgs ablate_args;
    CLI::App* sablate = app.add_subcommand("ablate", "run the mode x budget ablation table");
    add_run_flags(sablate, ablate_args, true, true);
    sablate->add_option("--m-sweep", ablate_args.m_sweep, "comma-separated budgets, e.g. 26,64,128");
    sablate->add_option("--modes", ablate_args.modes, "comma-separated mode subset (default: all)");
    sablate->add_option("--threads", ablate_args.threads, "parallel budget workers");

    std::uint64_t gc_seed = 2026;
    std::size_t gc_rounds = 100;
    bool gc_corrupt = false;
    CLI::App* sgrad = app.add_subcommand("gradcheck", "finite-difference check of every op + composition");
    sgrad->add_option("--seed", gc_seed, "base seed");
    sgrad->add_option("--rounds", gc_rounds, "random seeds to sweep");
    sgrad->add_flag("--corrupt", gc_corrupt, "run the deliberately broken fixture (must fail)");

    RunArgs mask_args;
    CLI::App* smask = app.add_subcommand("mask", "dump input/scores/mask PGM triplets for a checkpoint");
    add_run_flags(smask, mask_args, true, true);
    smask->add_option("--ckpt", mask_args.ckpt, "checkpoint file (.dds1)")->required();
    smask->add_option("--count", mask_args.count, "number of test images to dump");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sgen->parsed()) return cmd_gen(gen);
        if (strain->parsed()) return cmd_train(train_args);
        if (seval->parsed()) return cmd_eval(eval_args);
        if (sablate->parsed()) return cmd_ablate(ablate_args);
        if (sgrad->parsed()) return cmd_gradcheck(gc_seed, gc_rounds, gc_corrupt);
        if (smask->parsed()) return cmd_mask(mask_args);
    } catch (const dds::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const dds::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dds::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dds::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
