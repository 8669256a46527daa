#pragma once

// Leave-one-class-out experiment grid: configuration, per-cell execution and
// persistence, and aggregation of persisted score reports.
//
// Output layout under output_dir:
//   config.resolved.json
//   ood_<c>/rep_<r>/{pretrain_log.jsonl, retrain_log.jsonl,
//                    discriminator_pretrained.params, head_initial.params,
//                    discriminator.params, head.params, prototypes.json,
//                    score_before.json, score_after.json, cell.json}
//   aggregate.json, aggregate.csv
//
// cell.json is written last and marks a finished cell for --resume.

#include "ibdd/evaluate.hpp"
#include "ibdd/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibdd {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<std::string> problems);
    const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
    std::vector<std::string> problems_;
};

inline constexpr const char* kOutputRootEnv = "IBDD_OUTPUT_ROOT";
inline constexpr int kAggregateSchemaVersion = 1;
inline constexpr int kCellSchemaVersion = 1;

struct ExperimentConfig {
    std::filesystem::path train_images;
    std::filesystem::path train_labels;
    std::filesystem::path test_images;
    std::filesystem::path test_labels;
    std::vector<ClassId> ood_classes{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::size_t n_support = 10;
    int repetitions = 10;
    std::uint64_t base_seed = 0;
    GanTrainConfig gan;
    IBTrainConfig ib;
    EmbeddingMode head_mode = EmbeddingMode::projected;
    std::int64_t d_proj = 128;
    KdeSettings kde;
    std::filesystem::path output_dir = "runs/default";

    /// Field-level problems; empty when valid. Paths are checked for existence.
    std::vector<std::string> problems() const;
    void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Relative dataset paths resolve against the config file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& c);

/// seed = base + 1000 * ood_class + repetition
std::uint64_t cell_seed(std::uint64_t base_seed, ClassId ood_class, int repetition);

std::filesystem::path cell_dir(const std::filesystem::path& output_dir, ClassId ood_class, int repetition);

struct CellSummary {
    ClassId ood_class = 0;
    int repetition = 0;
    std::uint64_t seed = 0;
    double auprc_before = 0.0;
    double auprc_after = 0.0;
    double separation_before = 0.0;
    double separation_after = 0.0;
    std::map<ClassId, std::size_t> consumed_labels;
};

struct AggregateRow {
    ClassId ood_class = 0;
    std::vector<int> repetitions;
    std::vector<double> auprc_before;
    std::vector<double> auprc_after;
    std::vector<double> separation_before;
    std::vector<double> separation_after;
    double mean_before = 0.0;
    double std_before = 0.0;
    double mean_after = 0.0;
    double std_after = 0.0;
    double mean_separation_before = 0.0;
    double mean_separation_after = 0.0;
};

struct AggregateReport {
    std::vector<AggregateRow> rows;  // ordered by ood_class

    std::string to_json_text() const;
    /// Plot-ready table: ood_class,phase,mean_auprc,std_auprc
    std::string to_csv() const;
};

struct RunOptions {
    bool resume = false;
    std::function<void(const std::string&)> progress;
};

/// Loads datasets once and runs every (ood_class, repetition) cell.
AggregateReport run_experiments(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Runs one cell and persists its artifacts; returns its summary.
CellSummary run_cell(const ExperimentConfig& cfg, std::shared_ptr<const ImageDataset> train,
                     std::shared_ptr<const ImageDataset> test, ClassId ood_class, int repetition);

/// Pure fold over every ood_*/rep_*/ cell of a results directory.
AggregateReport aggregate_results(const std::filesystem::path& results_dir);
std::vector<CellSummary> read_cells(const std::filesystem::path& results_dir);

/// Writes aggregate.json and aggregate.csv.
void write_aggregate(const AggregateReport& report, const std::filesystem::path& dir);

enum class CheckpointPhase { before, after };

struct LoadedCheckpoint {
    OodTask task;
    Discriminator discriminator;
    EmbeddingHead head;
};

/// Rebuilds a cell's task and loads the chosen phase's networks.
LoadedCheckpoint load_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& cell,
                                 CheckpointPhase phase);

}  // namespace ibdd
