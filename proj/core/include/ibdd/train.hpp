#pragma once

// Two-phase training: adversarial pre-training of the generator and
// discriminator on the unlabeled in-distribution pool, then few-shot
// re-training of the discriminator's embedding under the IB loss.

#include "ibdd/data_ingest.hpp"
#include "ibdd/ib_loss.hpp"
#include "ibdd/nets.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibdd {

struct GanTrainConfig {
    int epochs = 5;
    std::size_t batch_size = 128;
    double lr_generator = 2e-4;
    double lr_discriminator = 2e-4;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    std::int64_t noise_dim = kNoiseDim;
    bool drop_last = true;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class RetrainScope { embedding_head_only, full_discriminator_stack };
enum class PrototypeInit { support_class_means, random };

struct IBTrainConfig {
    int steps = 100;
    // With projected embeddings of width ~128, sigma_z = 1 lets compression
    // dominate relevance and re-training lowers AUPRC; 100 keeps it a weak
    // regularizer.
    double learning_rate = 3e-4;
    IBLossConfig loss{.beta = 1.0, .sigma_z = 100.0};
    RetrainScope scope = RetrainScope::full_discriminator_stack;
    PrototypeInit prototype_init = PrototypeInit::support_class_means;
    bool log_prior_bias = false;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class Phase { pretrain, retrain };

struct TrainRecord {
    int step = 0;
    Phase phase = Phase::pretrain;
    double d_loss = 0.0;  // pretrain only
    double g_loss = 0.0;  // pretrain only
    std::optional<LossBreakdown> ib;  // retrain only
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
    // Raw dataset labels of every sample fed to a training step.
    std::map<ClassId, std::size_t> consumed_labels;

    /// Everything except wall-clock time, for determinism comparisons.
    bool same_trajectory(const TrainLog& other) const;
    /// One JSON object per record.
    std::string to_jsonl() const;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, TrainLog log) : std::runtime_error(what), log_(std::move(log)) {}
    const TrainLog& log() const noexcept { return log_; }

private:
    TrainLog log_;
};

class TrainInputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct PretrainResult {
    Generator generator;
    Discriminator discriminator;
    TrainLog log;
};

/// BCE discriminator loss on real vs generated batches, non-saturating
/// generator loss, Adam for both. Seeds torch and the batch order from cfg.seed.
PretrainResult pretrain_gan(const OodTask& task, const GanTrainConfig& cfg);

struct RetrainResult {
    Discriminator discriminator;
    EmbeddingHead head;
    ClassPrototypes prototypes;
    TrainLog log;
};

class RetrainDiverged : public TrainingDiverged {
public:
    RetrainDiverged(const std::string& what, RetrainResult last_good)
        : TrainingDiverged(what, last_good.log), last_good_(std::move(last_good)) {}
    const RetrainResult& last_good() const noexcept { return last_good_; }

private:
    RetrainResult last_good_;
};

/// Full-batch IB descent over the support set, updating the embedding
/// parameters in scope plus the prototypes with Adam. The inputs are cloned
/// and the discriminating head is never used. A non-finite loss throws
/// RetrainDiverged carrying the state from the last finite step.
RetrainResult retrain_ib(const Discriminator& discriminator, const EmbeddingHead& head,
                         const OodTask& task, const IBTrainConfig& cfg);

/// Builds an embedding head with the default initialization drawn from seed.
EmbeddingHead make_embedding_head(EmbeddingMode mode, std::int64_t d_proj, std::uint64_t seed);

/// Support-set images as an N x 1 x 28 x 28 tensor.
torch::Tensor images_tensor(const ImageDataset& ds, std::span<const std::size_t> indices);
torch::Tensor images_tensor(const ImageDataset& ds);

/// Evaluation-mode embedding in chunks, as a double matrix.
Matrix embed_matrix(Discriminator& disc, EmbeddingHead& head, const torch::Tensor& images,
                    std::int64_t chunk = 500);

struct RepetitionResult {
    int repetition = 0;
    std::uint64_t seed = 0;
    OodTask task;
    PretrainResult pretrain;
    RetrainResult retrain;
    EmbeddingHead initial_head{nullptr};
};

/// Repetition r uses seed = base_seed + r for support sampling and both phases.
std::vector<RepetitionResult> run_experiment(std::shared_ptr<const ImageDataset> train,
                                             std::shared_ptr<const ImageDataset> test, ClassId ood_class,
                                             std::size_t n_support, GanTrainConfig gan_cfg,
                                             IBTrainConfig ib_cfg, EmbeddingMode head_mode,
                                             std::int64_t d_proj, int repetitions, std::uint64_t base_seed);

void to_json(nlohmann::json& j, const GanTrainConfig& c);
void from_json(const nlohmann::json& j, GanTrainConfig& c);
void to_json(nlohmann::json& j, const IBTrainConfig& c);
void from_json(const nlohmann::json& j, IBTrainConfig& c);

}  // namespace ibdd
