// Command-line driver for the unlearning experiment harness.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mape/harness.hpp"

namespace {

using mape::harness::ExperimentConfig;

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> sparsity;
    std::optional<std::string> method;
    std::optional<std::string> mask_source;
    std::optional<double> eta;
    std::optional<int> epochs;
    std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "Experiment config JSON file");
    cmd->add_option("--seed", opts.seed, "Master seed override");
    cmd->add_option("--sparsity", opts.sparsity, "Mask sparsity override");
    cmd->add_option("--method", opts.method,
                    "Unlearning method (SO, MAPE-SO, GA, MAPE-GA, GD, NPO, DPO, SA, RT)");
    cmd->add_option("--mask-source", opts.mask_source,
                    "Mask source (none, MLR, MLF, SURE, premask, external)");
    cmd->add_option("--eta", opts.eta, "Unlearning rate override");
    cmd->add_option("--epochs", opts.epochs, "Unlearning epochs override");
    cmd->add_option("--out-dir", opts.out_dir, "Output root (default $MAPE_OUT_DIR or ./runs)");
}

ExperimentConfig build_config(const CommonOpts& opts, const std::string& scenario) {
    ExperimentConfig cfg;
    if (!opts.config_path.empty()) {
        cfg = mape::harness::load_config(opts.config_path);
    }
    cfg.scenario = scenario;
    if (opts.seed) {
        cfg.master_seed = *opts.seed;
    }
    if (opts.sparsity) {
        cfg.sparsity = *opts.sparsity;
    }
    if (opts.method) {
        mape::harness::apply_method_spec(cfg, *opts.method);
    }
    if (opts.mask_source) {
        cfg.unlearn_hp.mask_source = mape::unlearn::mask_source_from_name(*opts.mask_source);
    }
    if (opts.eta) {
        cfg.unlearn_hp.eta = *opts.eta;
    }
    if (opts.epochs) {
        cfg.unlearn_hp.epochs = *opts.epochs;
    }
    if (opts.out_dir) {
        cfg.out_dir = *opts.out_dir;
    }
    return cfg;
}

void print_phases(const mape::harness::RunRecord& record) {
    std::cout << mape::harness::kMetricsHeader << "\n";
    for (const auto& p : record.phases) {
        std::cout << mape::harness::metrics_csv_row(record.scenario, p) << "\n";
    }
    std::cout << "run dir: " << record.run_dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MAPE-Unlearn toy-scale experiment harness"};
    app.require_subcommand(1);

    CommonOpts opts;

    auto* cmd_train = app.add_subcommand("train", "Train the toy model from scratch");
    add_common(cmd_train, opts);

    auto* cmd_select = app.add_subcommand("select-mask", "Select a module mask for a model");
    add_common(cmd_select, opts);
    std::string model_path;
    cmd_select->add_option("--model", model_path, "Model file (.mape)");
    std::string mask_out = "mask.txt";
    cmd_select->add_option("--mask-out", mask_out, "Mask output path");

    auto* cmd_unlearn = app.add_subcommand("unlearn", "Single unlearning run");
    add_common(cmd_unlearn, opts);

    auto* cmd_eval = app.add_subcommand("evaluate", "Evaluate a saved model on the task splits");
    add_common(cmd_eval, opts);
    std::string eval_model;
    cmd_eval->add_option("--model", eval_model, "Model file (.mape)")->required();
    std::string eval_baseline;
    cmd_eval->add_option("--baseline", eval_baseline,
                         "Optional baseline model for the parameter-diff census");

    auto* cmd_succ = app.add_subcommand("successive", "Successive unlearning scenario");
    add_common(cmd_succ, opts);
    bool batch_mode = false;
    cmd_succ->add_flag("--batch", batch_mode, "Remove all requests in one batch update");
    std::optional<int> requests;
    cmd_succ->add_option("--requests", requests, "Number of removal requests");

    auto* cmd_relearn = app.add_subcommand("relearn", "Unlearn, then run the relearning attack");
    add_common(cmd_relearn, opts);
    std::optional<int> relearn_epochs;
    cmd_relearn->add_option("--relearn-epochs", relearn_epochs, "Attack epochs");

    auto* cmd_sweep = app.add_subcommand("sweep", "Sparsity sweep");
    add_common(cmd_sweep, opts);

    auto* cmd_export = app.add_subcommand("export", "Export plot data from run records");
    std::vector<std::string> run_dirs;
    cmd_export->add_option("--runs", run_dirs, "Run directories (containing record.json)")
        ->required();
    std::string export_out = "plotdata.csv";
    cmd_export->add_option("--out", export_out, "Output CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_export->parsed()) {
            std::vector<mape::harness::RunRecord> records;
            for (const auto& dir : run_dirs) {
                records.push_back(
                    mape::harness::load_record((std::filesystem::path(dir) / "record.json").string()));
            }
            mape::harness::export_plotdata(records, export_out);
            std::cout << "wrote " << export_out << "\n";
            return 0;
        }

        if (cmd_train->parsed()) {
            ExperimentConfig cfg = build_config(opts, "single");
            auto pr = mape::harness::prepare_run(cfg);
            namespace fs = std::filesystem;
            const fs::path dir = fs::path(cfg.resolved_out_dir()) /
                                 (mape::harness::config_hash(cfg) + "-s" +
                                  std::to_string(cfg.master_seed));
            fs::create_directories(dir);
            const std::string path = (dir / "theta_star.mape").string();
            mape::save_model(pr.theta_star, path);
            std::printf("train_acc=%.4f test_acc=%.4f model=%s\n",
                        pr.pretrain.final_train_accuracy, pr.pretrain.final_test_accuracy,
                        path.c_str());
            return 0;
        }

        if (cmd_select->parsed()) {
            ExperimentConfig cfg = build_config(opts, "single");
            mape::ModelState model;
            if (!model_path.empty()) {
                model = mape::load_model(model_path);
            } else {
                model = mape::harness::prepare_run(cfg).theta_star;
            }
            auto pr_seeds = mape::SeedBundle::from_master(cfg.master_seed);
            auto bundle = mape::gen_synthetic(cfg.task, pr_seeds.data);
            auto source = cfg.unlearn_hp.mask_source == mape::unlearn::MaskSource::None
                              ? mape::unlearn::MaskSource::MLR
                              : cfg.unlearn_hp.mask_source;
            const mape::MaskPair mask = mape::harness::resolve_mask(
                model, bundle, source, cfg.sparsity, cfg.unlearn_hp.external_mask_path);
            mape::save_mask(mask, mape::unlearn::mask_source_name(source), mask_out);
            std::printf("active=%d/%d mask=%s\n", mask.active_count(), mask.module_count(),
                        mask_out.c_str());
            return 0;
        }

        if (cmd_eval->parsed()) {
            ExperimentConfig cfg = build_config(opts, "single");
            const mape::ModelState model = mape::load_model(eval_model);
            auto seeds = mape::SeedBundle::from_master(cfg.master_seed);
            auto bundle = mape::gen_synthetic(cfg.task, seeds.data);
            mape::assert_split_hygiene(bundle);
            std::optional<mape::ModelState> baseline;
            if (!eval_baseline.empty()) {
                baseline = mape::load_model(eval_baseline);
            }
            const auto report = mape::harness::metrics_for(
                model, bundle, baseline ? &*baseline : nullptr);
            std::cout << "forget_acc,retain_acc,test_acc,mia,params_changed_fraction\n";
            using mape::harness::format_double;
            std::cout << format_double(report.forget_acc) << ',' << format_double(report.retain_acc)
                      << ',' << format_double(report.test_acc) << ','
                      << format_double(report.mia_score) << ','
                      << format_double(report.params_changed_fraction) << "\n";
            return 0;
        }

        std::string scenario = "single";
        if (cmd_unlearn->parsed()) {
            scenario = "single";
        } else if (cmd_succ->parsed()) {
            scenario = batch_mode ? "batch" : "successive";
        } else if (cmd_relearn->parsed()) {
            scenario = "relearn";
        } else if (cmd_sweep->parsed()) {
            scenario = "sweep";
        }
        ExperimentConfig cfg = build_config(opts, scenario);
        if (cmd_succ->parsed() && requests) {
            cfg.successive_requests = *requests;
        }
        if (cmd_relearn->parsed() && relearn_epochs) {
            cfg.relearn_epochs = *relearn_epochs;
        }
        const auto record = mape::harness::run_experiment(cfg);
        print_phases(record);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
