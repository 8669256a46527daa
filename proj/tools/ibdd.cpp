// ibdd: run leave-one-class-out experiments, aggregate their reports, and
// inspect stored checkpoints.
//
// Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include "ibdd/experiment.hpp"

#include <CLI11.hpp>

#include <torch/torch.h>

#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

struct Overrides {
    std::string config;
    std::string data_dir;
    std::vector<int> ood_classes;
    std::optional<int> repetitions;
    std::optional<std::size_t> n_support;
    std::optional<std::uint64_t> base_seed;
    std::optional<int> epochs;
    std::optional<int> steps;
    std::optional<double> learning_rate;
    std::optional<double> beta;
    std::optional<double> sigma_z;
    std::optional<std::string> scope;
    std::string output_dir;
};

void add_config_options(CLI::App& app, Overrides& o) {
    app.add_option("-c,--config", o.config, "JSON experiment configuration");
    app.add_option("--data-dir", o.data_dir,
                   "directory holding train-/t10k- IDX files; overrides the data section");
}

void add_override_options(CLI::App& app, Overrides& o) {
    app.add_option("--ood-class", o.ood_classes, "held-out class (repeatable)");
    app.add_option("--repetitions", o.repetitions);
    app.add_option("--n-support", o.n_support);
    app.add_option("--seed", o.base_seed, "base seed");
    app.add_option("--epochs", o.epochs, "GAN pre-training epochs");
    app.add_option("--steps", o.steps, "IB re-training steps");
    app.add_option("--lr", o.learning_rate, "IB re-training learning rate");
    app.add_option("--beta", o.beta);
    app.add_option("--sigma-z", o.sigma_z);
    app.add_option("--scope", o.scope)->check(CLI::IsMember({"embedding_head_only", "full_discriminator_stack"}));
    app.add_option("-o,--output", o.output_dir, "output directory");
}

ibdd::ExperimentConfig resolve(const Overrides& o) {
    ibdd::ExperimentConfig cfg;
    if (!o.config.empty()) {
        cfg = ibdd::load_config(o.config);
    }
    if (!o.data_dir.empty()) {
        const fs::path d = o.data_dir;
        cfg.train_images = d / "train-images-idx3-ubyte";
        cfg.train_labels = d / "train-labels-idx1-ubyte";
        cfg.test_images = d / "t10k-images-idx3-ubyte";
        cfg.test_labels = d / "t10k-labels-idx1-ubyte";
    }
    if (!o.ood_classes.empty()) cfg.ood_classes = o.ood_classes;
    if (o.repetitions) cfg.repetitions = *o.repetitions;
    if (o.n_support) cfg.n_support = *o.n_support;
    if (o.base_seed) cfg.base_seed = *o.base_seed;
    if (o.epochs) cfg.gan.epochs = *o.epochs;
    if (o.steps) cfg.ib.steps = *o.steps;
    if (o.learning_rate) cfg.ib.learning_rate = *o.learning_rate;
    if (o.beta) cfg.ib.loss.beta = *o.beta;
    if (o.sigma_z) cfg.ib.loss.sigma_z = *o.sigma_z;
    if (o.scope) {
        cfg.ib.scope = *o.scope == "embedding_head_only" ? ibdd::RetrainScope::embedding_head_only
                                                         : ibdd::RetrainScope::full_discriminator_stack;
    }
    if (!o.output_dir.empty()) cfg.output_dir = o.output_dir;
    return cfg;
}

ibdd::CheckpointPhase parse_phase(const std::string& s) {
    return s == "before" ? ibdd::CheckpointPhase::before : ibdd::CheckpointPhase::after;
}

// Checkpoint commands need only the data paths and head shape; output paths
// are irrelevant, so the full validation is narrowed to the data fields.
void validate_data_only(const ibdd::ExperimentConfig& cfg) {
    std::vector<std::string> data_problems;
    for (const auto& p : cfg.problems()) {
        if (p.rfind("data.", 0) == 0 || p.rfind("head.", 0) == 0) data_problems.push_back(p);
    }
    if (!data_problems.empty()) throw ibdd::ConfigError(std::move(data_problems));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Information-bottleneck re-training for few-shot out-of-distribution detection"};
    app.require_subcommand(1);

    Overrides run_opts;
    bool resume = false;
    bool dry_run = false;
    auto* run = app.add_subcommand("run", "pre-train, re-train and score every (ood class, repetition) cell");
    add_config_options(*run, run_opts);
    add_override_options(*run, run_opts);
    run->add_flag("--resume", resume, "skip cells that already have a completion marker");
    run->add_flag("--print-config", dry_run, "print the resolved configuration and exit");

    std::string results_dir;
    auto* report = app.add_subcommand("report", "re-derive aggregate.json and aggregate.csv from a results directory");
    report->add_option("results_dir", results_dir)->required();

    Overrides eval_opts;
    std::string cell;
    std::string phase = "after";
    std::string out_path;
    auto* eval = app.add_subcommand("eval", "score a stored checkpoint and print its report as JSON");
    add_config_options(*eval, eval_opts);
    eval->add_option("--cell", cell, "cell directory (ood_<c>/rep_<r>)")->required();
    eval->add_option("--phase", phase)->check(CLI::IsMember({"before", "after"}));
    eval->add_option("--out", out_path, "write the report here instead of stdout");

    Overrides export_opts;
    bool with_support = false;
    auto* exp = app.add_subcommand("export-embeddings", "write the test (and support) embeddings of a checkpoint as CSV");
    add_config_options(*exp, export_opts);
    exp->add_option("--cell", cell)->required();
    exp->add_option("--phase", phase)->check(CLI::IsMember({"before", "after"}));
    exp->add_option("--out", out_path)->required();
    exp->add_flag("--with-support", with_support);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalid;
    }

    torch::set_num_threads(1);

    try {
        if (run->parsed()) {
            auto cfg = resolve(run_opts);
            if (dry_run) {
                std::cout << ibdd::dump_config(cfg);
                return kExitOk;
            }
            cfg.validate();
            ibdd::RunOptions opts;
            opts.resume = resume;
            opts.progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
            const auto agg = ibdd::run_experiments(cfg, opts);
            std::cout << agg.to_csv();
        } else if (report->parsed()) {
            const auto agg = ibdd::aggregate_results(results_dir);
            ibdd::write_aggregate(agg, results_dir);
            std::cout << agg.to_csv();
        } else if (eval->parsed()) {
            auto cfg = resolve(eval_opts);
            validate_data_only(cfg);
            auto ck = ibdd::load_checkpoint(cfg, cell, parse_phase(phase));
            const auto rep = ibdd::evaluate_task(ck.discriminator, ck.head, ck.task, cfg.kde);
            const auto text = ibdd::report_to_json(rep).dump() + "\n";
            if (out_path.empty()) {
                std::cout << text;
            } else {
                std::ofstream(out_path) << text;
            }
        } else if (exp->parsed()) {
            auto cfg = resolve(export_opts);
            validate_data_only(cfg);
            auto ck = ibdd::load_checkpoint(cfg, cell, parse_phase(phase));
            const auto emb = ibdd::embed_task(ck.discriminator, ck.head, ck.task);
            ibdd::export_embeddings_csv(out_path, emb, ck.task, with_support);
        }
    } catch (const ibdd::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return kExitInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}
