#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mape/data.hpp"
#include "mape/evalattack.hpp"
#include "mape/fisher.hpp"
#include "mape/mask.hpp"
#include "mape/maskselect.hpp"
#include "mape/model.hpp"
#include "mape/rng.hpp"
#include "mape/stats.hpp"
#include "mape/successive.hpp"
#include "mape/train.hpp"
#include "mape/unlearn.hpp"

namespace mape {
namespace harness {

constexpr const char* kVersion = "mape-unlearn 0.1.0";

using json = nlohmann::json;

// 17 significant digits: enough for an exact double round-trip through text.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::string scenario = "single";  // single | sweep | successive | batch | relearn
    std::uint64_t master_seed = 1;
    std::string out_dir;  // empty: $MAPE_OUT_DIR, then "runs"

    ModelConfig model;
    TaskParams task;
    TrainHParams train_hp;
    unlearn::UnlearnHParams unlearn_hp;

    double sparsity = 0.9;
    std::vector<double> sparsity_list{0.0, 0.5, 0.7, 0.9, 0.95};

    int successive_requests = 10;
    bool refine_premask = false;

    double relearn_fraction = 0.2;
    int relearn_epochs = 10;
    double relearn_learning_rate = 0.05;

    void validate() const {
        model.validate();
        if (task.seq_len > model.max_seq_len) {
            throw std::invalid_argument("ExperimentConfig: seq_len exceeds max_seq_len");
        }
        if (scenario != "single" && scenario != "sweep" && scenario != "successive" &&
            scenario != "batch" && scenario != "relearn") {
            throw std::invalid_argument("ExperimentConfig: unknown scenario " + scenario);
        }
    }

    std::string resolved_out_dir() const {
        if (!out_dir.empty()) {
            return out_dir;
        }
        if (const char* env = std::getenv("MAPE_OUT_DIR")) {
            if (*env != '\0') {
                return env;
            }
        }
        return "runs";
    }
};

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["scenario"] = c.scenario;
    j["master_seed"] = c.master_seed;
    j["out_dir"] = c.out_dir;
    j["model"] = {{"num_layers", c.model.num_layers}, {"num_heads", c.model.num_heads},
                  {"d_model", c.model.d_model},       {"d_ff", c.model.d_ff},
                  {"vocab_size", c.model.vocab_size}, {"num_classes", c.model.num_classes},
                  {"max_seq_len", c.model.max_seq_len}};
    j["data"] = {{"num_train", c.task.num_train},
                 {"num_test", c.task.num_test},
                 {"forget_count", c.task.forget_count},
                 {"seq_len", c.task.seq_len}};
    j["train"] = {{"epochs", c.train_hp.epochs},
                  {"batch_size", c.train_hp.batch_size},
                  {"learning_rate", c.train_hp.learning_rate},
                  {"momentum", c.train_hp.momentum}};
    j["unlearn"] = {{"method", unlearn::method_name(c.unlearn_hp.method)},
                    {"eta", c.unlearn_hp.eta},
                    {"epochs", c.unlearn_hp.epochs},
                    {"batch_size", c.unlearn_hp.batch_size},
                    {"beta", c.unlearn_hp.beta},
                    {"gamma", c.unlearn_hp.gamma},
                    {"lambda", c.unlearn_hp.lambda},
                    {"mask_source", unlearn::mask_source_name(c.unlearn_hp.mask_source)},
                    {"external_mask_path", c.unlearn_hp.external_mask_path}};
    j["sparsity"] = c.sparsity;
    j["sparsity_list"] = c.sparsity_list;
    j["successive"] = {{"requests", c.successive_requests}, {"refine_premask", c.refine_premask}};
    j["relearn"] = {{"fraction", c.relearn_fraction},
                    {"epochs", c.relearn_epochs},
                    {"learning_rate", c.relearn_learning_rate}};
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    c.scenario = j.value("scenario", c.scenario);
    c.master_seed = j.value("master_seed", c.master_seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("model")) {
        const json& m = j["model"];
        c.model.num_layers = m.value("num_layers", c.model.num_layers);
        c.model.num_heads = m.value("num_heads", c.model.num_heads);
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.d_ff = m.value("d_ff", c.model.d_ff);
        c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
        c.model.num_classes = m.value("num_classes", c.model.num_classes);
        c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        c.task.num_train = d.value("num_train", c.task.num_train);
        c.task.num_test = d.value("num_test", c.task.num_test);
        c.task.forget_count = d.value("forget_count", c.task.forget_count);
        c.task.seq_len = d.value("seq_len", c.task.seq_len);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        c.train_hp.epochs = t.value("epochs", c.train_hp.epochs);
        c.train_hp.batch_size = t.value("batch_size", c.train_hp.batch_size);
        c.train_hp.learning_rate = t.value("learning_rate", c.train_hp.learning_rate);
        c.train_hp.momentum = t.value("momentum", c.train_hp.momentum);
    }
    if (j.contains("unlearn")) {
        const json& u = j["unlearn"];
        c.unlearn_hp.method =
            unlearn::method_from_name(u.value("method", std::string("SO")));
        c.unlearn_hp.eta = u.value("eta", c.unlearn_hp.eta);
        c.unlearn_hp.epochs = u.value("epochs", c.unlearn_hp.epochs);
        c.unlearn_hp.batch_size = u.value("batch_size", c.unlearn_hp.batch_size);
        c.unlearn_hp.beta = u.value("beta", c.unlearn_hp.beta);
        c.unlearn_hp.gamma = u.value("gamma", c.unlearn_hp.gamma);
        c.unlearn_hp.lambda = u.value("lambda", c.unlearn_hp.lambda);
        c.unlearn_hp.mask_source =
            unlearn::mask_source_from_name(u.value("mask_source", std::string("none")));
        c.unlearn_hp.external_mask_path =
            u.value("external_mask_path", c.unlearn_hp.external_mask_path);
    }
    c.sparsity = j.value("sparsity", c.sparsity);
    if (j.contains("sparsity_list")) {
        c.sparsity_list = j["sparsity_list"].get<std::vector<double>>();
    }
    if (j.contains("successive")) {
        c.successive_requests = j["successive"].value("requests", c.successive_requests);
        c.refine_premask = j["successive"].value("refine_premask", c.refine_premask);
    }
    if (j.contains("relearn")) {
        c.relearn_fraction = j["relearn"].value("fraction", c.relearn_fraction);
        c.relearn_epochs = j["relearn"].value("epochs", c.relearn_epochs);
        c.relearn_learning_rate = j["relearn"].value("learning_rate", c.relearn_learning_rate);
    }
    // data task mirrors the model alphabet
    c.task.vocab_size = c.model.vocab_size;
    c.task.num_classes = c.model.num_classes;
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_config: cannot open " + path);
    }
    json j;
    in >> j;
    return config_from_json(j);
}

// FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string canon = to_json(c).dump();
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const unsigned char ch : canon) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Run record
// ---------------------------------------------------------------------------

struct PhaseMetrics {
    std::string phase;
    std::string method;
    double sparsity = 0.0;
    std::uint64_t seed = 0;
    eval::MetricsReport metrics;
};

struct RunRecord {
    std::string config_hash;
    std::string version;
    json config;
    SeedBundle seeds{};
    std::vector<PhaseMetrics> phases;
    std::string run_dir;
    std::string mask_file;
    std::vector<std::string> model_files;
    double total_seconds = 0.0;
    std::string error_phase;  // empty on success
    std::string error_message;
    std::string scenario;
};

inline json record_to_json(const RunRecord& r) {
    json j;
    j["config_hash"] = r.config_hash;
    j["version"] = r.version;
    j["config"] = r.config;
    j["scenario"] = r.scenario;
    j["seeds"] = {{"data", r.seeds.data},
                  {"init", r.seeds.init},
                  {"unlearn", r.seeds.unlearn},
                  {"attack", r.seeds.attack}};
    j["phases"] = json::array();
    for (const auto& p : r.phases) {
        j["phases"].push_back({{"phase", p.phase},
                               {"method", p.method},
                               {"sparsity", p.sparsity},
                               {"seed", p.seed},
                               {"forget_acc", p.metrics.forget_acc},
                               {"retain_acc", p.metrics.retain_acc},
                               {"test_acc", p.metrics.test_acc},
                               {"mia", p.metrics.mia_score},
                               {"params_changed_fraction", p.metrics.params_changed_fraction},
                               {"wall_time", p.metrics.wall_time}});
    }
    j["run_dir"] = r.run_dir;
    j["mask_file"] = r.mask_file;
    j["model_files"] = r.model_files;
    j["total_seconds"] = r.total_seconds;
    j["error_phase"] = r.error_phase;
    j["error_message"] = r.error_message;
    return j;
}

inline RunRecord record_from_json(const json& j) {
    RunRecord r;
    r.config_hash = j.value("config_hash", std::string());
    r.version = j.value("version", std::string());
    if (j.contains("config")) {
        r.config = j["config"];
    }
    r.scenario = j.value("scenario", std::string());
    if (j.contains("seeds")) {
        r.seeds.data = j["seeds"].value("data", 0ULL);
        r.seeds.init = j["seeds"].value("init", 0ULL);
        r.seeds.unlearn = j["seeds"].value("unlearn", 0ULL);
        r.seeds.attack = j["seeds"].value("attack", 0ULL);
    }
    for (const auto& p : j.value("phases", json::array())) {
        PhaseMetrics pm;
        pm.phase = p.value("phase", std::string());
        pm.method = p.value("method", std::string());
        pm.sparsity = p.value("sparsity", 0.0);
        pm.seed = p.value("seed", 0ULL);
        pm.metrics.forget_acc = p.value("forget_acc", 0.0);
        pm.metrics.retain_acc = p.value("retain_acc", 0.0);
        pm.metrics.test_acc = p.value("test_acc", 0.0);
        pm.metrics.mia_score = p.value("mia", 0.0);
        pm.metrics.params_changed_fraction = p.value("params_changed_fraction", 0.0);
        pm.metrics.wall_time = p.value("wall_time", 0.0);
        r.phases.push_back(std::move(pm));
    }
    r.run_dir = j.value("run_dir", std::string());
    r.mask_file = j.value("mask_file", std::string());
    r.model_files = j.value("model_files", std::vector<std::string>());
    r.total_seconds = j.value("total_seconds", 0.0);
    r.error_phase = j.value("error_phase", std::string());
    r.error_message = j.value("error_message", std::string());
    return r;
}

inline RunRecord load_record(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_record: cannot open " + path);
    }
    json j;
    in >> j;
    return record_from_json(j);
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline const char* kMetricsHeader =
    "scenario,method,sparsity,seed,phase,forget_acc,retain_acc,test_acc,mia,"
    "params_changed_fraction";

inline std::string metrics_csv_row(const std::string& scenario, const PhaseMetrics& p) {
    std::ostringstream out;
    out << scenario << ',' << p.method << ',' << format_double(p.sparsity) << ',' << p.seed << ','
        << p.phase << ',' << format_double(p.metrics.forget_acc) << ','
        << format_double(p.metrics.retain_acc) << ',' << format_double(p.metrics.test_acc) << ','
        << format_double(p.metrics.mia_score) << ','
        << format_double(p.metrics.params_changed_fraction);
    return out.str();
}

inline void write_metrics_csv(const RunRecord& record, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_metrics_csv: cannot open " + path);
    }
    out << kMetricsHeader << "\n";
    for (const auto& p : record.phases) {
        out << metrics_csv_row(record.scenario, p) << "\n";
    }
}

inline void write_trajectory_csv(const std::vector<successive::StepRecord>& steps,
                                 const std::string& method, double sparsity,
                                 const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_trajectory_csv: cannot open " + path);
    }
    out << "t,method,sparsity,forget_acc,retain_acc,test_acc,mia,params_changed_fraction\n";
    for (const auto& s : steps) {
        out << s.t << ',' << method << ',' << format_double(sparsity) << ','
            << format_double(s.metrics.forget_acc) << ',' << format_double(s.metrics.retain_acc)
            << ',' << format_double(s.metrics.test_acc) << ',' << format_double(s.metrics.mia_score)
            << ',' << format_double(s.metrics.params_changed_fraction) << "\n";
    }
}

inline void write_relearn_csv(const eval::RelearnTrajectory& traj, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_relearn_csv: cannot open " + path);
    }
    out << "epoch,forget_acc,mia\n";
    for (std::size_t i = 0; i < traj.forget_acc.size(); ++i) {
        out << (i + 1) << ',' << format_double(traj.forget_acc[i]) << ','
            << format_double(traj.mia[i]) << "\n";
    }
}

// ---------------------------------------------------------------------------
// Mask resolution
// ---------------------------------------------------------------------------

inline MaskPair resolve_mask(const ModelState& state, const DatasetBundle& bundle,
                             unlearn::MaskSource source, double sparsity,
                             const std::string& external_path) {
    switch (source) {
        case unlearn::MaskSource::MLR: {
            const auto problem =
                select::build_mlr_problem(state, bundle.forget, bundle.retain, sparsity);
            return select::greedy_swap(problem, select::warm_start(problem));
        }
        case unlearn::MaskSource::MLF: {
            const auto problem =
                select::build_mlf_problem(state, bundle.forget, bundle.retain, sparsity);
            return select::greedy_swap(problem, select::warm_start(problem));
        }
        case unlearn::MaskSource::SURE:
            return select::sure_select(state, bundle.forget, sparsity);
        case unlearn::MaskSource::Premask: {
            const Vec diag = fisher::diag_fim_masks(state, bundle.train);
            return select::successive_premask(diag, sparsity, state.config);
        }
        case unlearn::MaskSource::External: {
            LoadedMask loaded = load_mask(external_path);
            loaded.mask.validate_against(state.config);
            return loaded.mask;
        }
        case unlearn::MaskSource::None:
            break;
    }
    throw std::invalid_argument("resolve_mask: no mask for source 'none'");
}

inline unlearn::MaskSource default_mask_source(unlearn::Method method) {
    switch (method) {
        case unlearn::Method::MapeSO:
            return unlearn::MaskSource::MLR;
        case unlearn::Method::GA:
        case unlearn::Method::GD:
        case unlearn::Method::NPO:
        case unlearn::Method::DPO:
            return unlearn::MaskSource::MLF;
        default:
            return unlearn::MaskSource::None;
    }
}

// "MAPE-GA" style method specs map to (method, default mask source).
inline void apply_method_spec(ExperimentConfig& cfg, const std::string& spec) {
    std::string name = spec;
    bool mape = false;
    if (name.rfind("MAPE-", 0) == 0 && name != "MAPE-SO") {
        mape = true;
        name = name.substr(5);
    }
    cfg.unlearn_hp.method = unlearn::method_from_name(name);
    if (mape || cfg.unlearn_hp.method == unlearn::Method::MapeSO) {
        if (cfg.unlearn_hp.mask_source == unlearn::MaskSource::None) {
            cfg.unlearn_hp.mask_source = default_mask_source(cfg.unlearn_hp.method);
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct PreparedRun {
    DatasetBundle bundle;
    ModelState theta_star;
    TrainResult pretrain;
    SeedBundle seeds{};
};

inline PreparedRun prepare_run(const ExperimentConfig& cfg) {
    PreparedRun pr;
    pr.seeds = SeedBundle::from_master(cfg.master_seed);
    pr.bundle = gen_synthetic(cfg.task, pr.seeds.data);
    assert_split_hygiene(pr.bundle);
    ModelConfig mc = cfg.model;
    mc.seed = pr.seeds.init;
    TrainHParams thp = cfg.train_hp;
    thp.seed = pr.seeds.init + 1;
    pr.pretrain = train(mc, pr.bundle.train, thp, &pr.bundle.test);
    pr.theta_star = pr.pretrain.state;
    return pr;
}

// Applies the configured unlearning method to theta_star. Returns the
// unlearned model and, when one was used, the mask.
struct UnlearnOutcome {
    ModelState model;
    std::optional<MaskPair> mask;
    std::string method_label;
};

inline UnlearnOutcome run_unlearn_phase(const ExperimentConfig& cfg, const PreparedRun& pr,
                                        double sparsity) {
    UnlearnOutcome out{pr.theta_star, std::nullopt, unlearn::method_name(cfg.unlearn_hp.method)};
    unlearn::UnlearnHParams hp = cfg.unlearn_hp;
    hp.seed = pr.seeds.unlearn;

    unlearn::MaskSource source = hp.mask_source;
    if (hp.method == unlearn::Method::MapeSO && source == unlearn::MaskSource::None) {
        source = unlearn::MaskSource::MLR;
    }
    const bool masked = source != unlearn::MaskSource::None &&
                        hp.method != unlearn::Method::SO && hp.method != unlearn::Method::SA &&
                        hp.method != unlearn::Method::RT;
    if (masked) {
        out.mask = resolve_mask(pr.theta_star, pr.bundle, source, sparsity,
                                hp.external_mask_path);
        out.method_label = std::string("MAPE-") +
                           (hp.method == unlearn::Method::MapeSO
                                ? "SO"
                                : unlearn::method_name(hp.method));
    }

    switch (hp.method) {
        case unlearn::Method::SO:
            out.model = unlearn::so_update(pr.theta_star, pr.bundle.forget, pr.bundle.retain, hp);
            break;
        case unlearn::Method::MapeSO:
            out.model = unlearn::mape_so_update(pr.theta_star, *out.mask, pr.bundle.forget,
                                                pr.bundle.retain, hp);
            break;
        case unlearn::Method::GA:
        case unlearn::Method::GD:
        case unlearn::Method::NPO:
        case unlearn::Method::DPO:
            out.model = unlearn::finetune_unlearn(pr.theta_star,
                                                  out.mask ? &*out.mask : nullptr,
                                                  pr.bundle.forget, pr.bundle.retain, hp);
            break;
        case unlearn::Method::SA:
            out.model = unlearn::sa_unlearn(pr.theta_star, pr.bundle.retain, hp);
            break;
        case unlearn::Method::RT: {
            ModelConfig mc = cfg.model;
            mc.seed = pr.seeds.init;
            TrainHParams thp = cfg.train_hp;
            thp.seed = pr.seeds.unlearn;
            out.model = unlearn::rt_retrain(mc, pr.bundle.retain, thp).state;
            break;
        }
    }
    return out;
}

inline eval::MetricsReport metrics_for(const ModelState& model, const DatasetBundle& bundle,
                                       const ModelState* pre_state) {
    eval::MetricsInputs inputs;
    inputs.forget = &bundle.forget;
    inputs.retain = &bundle.retain;
    inputs.test = &bundle.test;
    return eval::compute_metrics(model, inputs, pre_state);
}

inline RunRecord run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    RunRecord record;
    record.config_hash = config_hash(cfg);
    record.version = kVersion;
    record.config = to_json(cfg);
    record.scenario = cfg.scenario;

    namespace fs = std::filesystem;
    const fs::path run_dir =
        fs::path(cfg.resolved_out_dir()) /
        (record.config_hash + "-s" + std::to_string(cfg.master_seed));
    fs::create_directories(run_dir);
    record.run_dir = run_dir.string();
    {
        std::ofstream out(run_dir / "config.json");
        out << to_json(cfg).dump(2) << "\n";
    }

    std::string phase = "prepare";
    try {
        PreparedRun pr = prepare_run(cfg);
        record.seeds = pr.seeds;

        const std::string theta_path = (run_dir / "theta_star.mape").string();
        save_model(pr.theta_star, theta_path);
        record.model_files.push_back(theta_path);

        PhaseMetrics pre;
        pre.phase = "pretrain";
        pre.method = "train";
        pre.sparsity = 0.0;
        pre.seed = cfg.master_seed;
        pre.metrics = metrics_for(pr.theta_star, pr.bundle, nullptr);
        record.phases.push_back(pre);

        if (cfg.scenario == "single" || cfg.scenario == "relearn") {
            phase = "unlearn";
            UnlearnOutcome outcome = run_unlearn_phase(cfg, pr, cfg.sparsity);
            const std::string model_path = (run_dir / "unlearned.mape").string();
            save_model(outcome.model, model_path);
            record.model_files.push_back(model_path);
            if (outcome.mask.has_value()) {
                record.mask_file = (run_dir / "mask.txt").string();
                save_mask(*outcome.mask,
                          unlearn::mask_source_name(cfg.unlearn_hp.mask_source),
                          record.mask_file);
            }

            phase = "evaluate";
            PhaseMetrics post;
            post.phase = "unlearned";
            post.method = outcome.method_label;
            post.sparsity = outcome.mask ? cfg.sparsity : 0.0;
            post.seed = cfg.master_seed;
            post.metrics = metrics_for(outcome.model, pr.bundle, &pr.theta_star);
            record.phases.push_back(post);

            if (cfg.scenario == "relearn") {
                phase = "relearn";
                const Split relearn_set =
                    eval::draw_relearn_set(pr.bundle.retain, cfg.relearn_fraction,
                                           pr.seeds.attack);
                eval::RelearnHParams rhp;
                rhp.learning_rate = cfg.relearn_learning_rate;
                rhp.seed = pr.seeds.attack + 1;
                const double threshold = pre.metrics.forget_acc - 0.05;
                const eval::RelearnTrajectory traj =
                    eval::relearn_attack(outcome.model, relearn_set, pr.bundle.forget,
                                         pr.bundle.test, cfg.relearn_epochs, threshold, rhp);
                write_relearn_csv(traj, (run_dir / "relearn.csv").string());
                for (std::size_t e = 0; e < traj.forget_acc.size(); ++e) {
                    PhaseMetrics pm;
                    pm.phase = "relearn_epoch_" + std::to_string(e + 1);
                    pm.method = outcome.method_label;
                    pm.sparsity = outcome.mask ? cfg.sparsity : 0.0;
                    pm.seed = cfg.master_seed;
                    pm.metrics.forget_acc = traj.forget_acc[e];
                    pm.metrics.mia_score = traj.mia[e];
                    record.phases.push_back(pm);
                }
            }
        } else if (cfg.scenario == "sweep") {
            phase = "sweep";
            for (const double s : cfg.sparsity_list) {
                UnlearnOutcome outcome = run_unlearn_phase(cfg, pr, s);
                PhaseMetrics pm;
                pm.phase = "unlearned";
                pm.method = outcome.method_label;
                pm.sparsity = outcome.mask ? s : 0.0;
                pm.seed = cfg.master_seed;
                pm.metrics = metrics_for(outcome.model, pr.bundle, &pr.theta_star);
                record.phases.push_back(pm);
            }
        } else if (cfg.scenario == "successive" || cfg.scenario == "batch") {
            phase = cfg.scenario;
            std::vector<std::int64_t> requests = pr.bundle.forget_ids;
            if (static_cast<int>(requests.size()) > cfg.successive_requests) {
                requests.resize(static_cast<std::size_t>(cfg.successive_requests));
            }
            unlearn::UnlearnHParams hp = cfg.unlearn_hp;
            hp.seed = pr.seeds.unlearn;
            unlearn::MaskSource source = hp.mask_source;
            if (hp.method == unlearn::Method::MapeSO &&
                source == unlearn::MaskSource::None) {
                source = unlearn::MaskSource::MLR;
            }
            if (hp.method == unlearn::Method::SO) {
                source = unlearn::MaskSource::None;
            }
            const std::string label = source == unlearn::MaskSource::None
                                          ? "SO"
                                          : "MAPE-SO";
            successive::IterativeResult result =
                cfg.scenario == "successive"
                    ? successive::run_iterative(pr.theta_star, pr.bundle.train, pr.bundle.test,
                                                requests, source, cfg.sparsity, hp)
                    : successive::run_batch(pr.theta_star, pr.bundle.train, pr.bundle.test,
                                            requests, source, cfg.sparsity, hp);
            write_trajectory_csv(result.steps, label,
                                 source == unlearn::MaskSource::None ? 0.0 : cfg.sparsity,
                                 (run_dir / "trajectory.csv").string());
            const std::string model_path = (run_dir / "unlearned.mape").string();
            save_model(result.final_state, model_path);
            record.model_files.push_back(model_path);
            for (const auto& step : result.steps) {
                PhaseMetrics pm;
                pm.phase = "request_" + std::to_string(step.t);
                pm.method = label;
                pm.sparsity = source == unlearn::MaskSource::None ? 0.0 : cfg.sparsity;
                pm.seed = cfg.master_seed;
                pm.metrics = step.metrics;
                record.phases.push_back(pm);
            }
        }

        phase = "persist";
        write_metrics_csv(record, (run_dir / "metrics.csv").string());
    } catch (const std::exception& e) {
        record.error_phase = phase;
        record.error_message = e.what();
    }

    record.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    {
        std::ofstream out(run_dir / "record.json");
        out << record_to_json(record).dump(2) << "\n";
    }
    if (!record.error_phase.empty()) {
        throw std::runtime_error("run_experiment failed in phase " + record.error_phase + ": " +
                                 record.error_message);
    }
    return record;
}

// ---------------------------------------------------------------------------
// Plot-data export: long format with a per-group median column.
// ---------------------------------------------------------------------------

inline void export_plotdata(const std::vector<RunRecord>& records, const std::string& path) {
    if (records.empty()) {
        throw std::invalid_argument("export_plotdata: no records");
    }
    struct Row {
        std::string scenario;
        std::string method;
        double sparsity;
        std::uint64_t seed;
        std::string phase;
        std::string metric;
        double value;
    };
    std::vector<Row> rows;
    const char* metric_names[] = {"forget_acc", "retain_acc", "test_acc", "mia",
                                  "params_changed_fraction"};
    for (const auto& r : records) {
        for (const auto& p : r.phases) {
            const double values[] = {p.metrics.forget_acc, p.metrics.retain_acc,
                                     p.metrics.test_acc, p.metrics.mia_score,
                                     p.metrics.params_changed_fraction};
            for (int m = 0; m < 5; ++m) {
                rows.push_back({r.scenario, p.method, p.sparsity, p.seed, p.phase,
                                metric_names[m], values[m]});
            }
        }
    }
    std::map<std::string, Vec> groups;
    auto group_key = [](const Row& row) {
        return row.scenario + "|" + row.method + "|" + format_double(row.sparsity) + "|" +
               row.phase + "|" + row.metric;
    };
    for (const auto& row : rows) {
        groups[group_key(row)].push_back(row.value);
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("export_plotdata: cannot open " + path);
    }
    out << "scenario,method,sparsity,seed,phase,metric,value,group_median\n";
    for (const auto& row : rows) {
        out << row.scenario << ',' << row.method << ',' << format_double(row.sparsity) << ','
            << row.seed << ',' << row.phase << ',' << row.metric << ','
            << format_double(row.value) << ','
            << format_double(stats::median(groups[group_key(row)])) << "\n";
    }
}

}  // namespace harness
}  // namespace mape
