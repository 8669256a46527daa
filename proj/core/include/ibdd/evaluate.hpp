#pragma once

// Task-level evaluation: embed support and test sets with a frozen network,
// score the test set with a KDE over the support embeddings and summarize.

#include "ibdd/data_ingest.hpp"
#include "ibdd/nets.hpp"
#include "ibdd/score_eval.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

namespace ibdd {

struct KdeSettings {
    BandwidthPolicy bandwidth = BandwidthPolicy::scott();
    KdePooling pooling = KdePooling::pooled;
};

class ReportSchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Embeddings of the task's support and test sets in evaluation mode.
struct TaskEmbeddings {
    Matrix support;
    std::vector<int> support_labels;  // raw dataset labels
    Matrix test;
    std::vector<int> test_labels;
};

TaskEmbeddings embed_task(Discriminator& disc, EmbeddingHead& head, const OodTask& task);

ScoreReport score_embeddings(const TaskEmbeddings& emb, const OodTask& task, const KdeSettings& kde);

/// Positives are test samples of the OOD class; separation is measured over
/// in-distribution test samples.
ScoreReport evaluate_task(Discriminator& disc, EmbeddingHead& head, const OodTask& task,
                          const KdeSettings& kde);

nlohmann::json report_to_json(const ScoreReport& report);
ScoreReport report_from_json(const nlohmann::json& j, const std::string& origin = "<json>");

/// CSV with header id,label,is_ood,z0..z{d-1}; support rows are listed
/// after the test rows with ids prefixed "support:".
void export_embeddings_csv(const std::filesystem::path& path, const TaskEmbeddings& emb, const OodTask& task,
                           bool include_support);

void to_json(nlohmann::json& j, const KdeSettings& k);
void from_json(const nlohmann::json& j, KdeSettings& k);

}  // namespace ibdd
