#include "ibdd/evaluate.hpp"

#include "ibdd/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace ibdd {

NLOHMANN_JSON_SERIALIZE_ENUM(KdePooling, {{KdePooling::pooled, "pooled"}, {KdePooling::per_class_max, "per_class_max"}})

TaskEmbeddings embed_task(Discriminator& disc, EmbeddingHead& head, const OodTask& task) {
    TaskEmbeddings out;
    out.support = embed_matrix(disc, head, images_tensor(*task.train, task.support_indices));
    for (std::size_t i : task.support_indices) {
        out.support_labels.push_back(task.train->labels[i]);
    }
    out.test = embed_matrix(disc, head, images_tensor(*task.test));
    out.test_labels = task.test->labels;
    return out;
}

ScoreReport score_embeddings(const TaskEmbeddings& emb, const OodTask& task, const KdeSettings& kde) {
    const auto model = fit_kde(emb.support, kde.bandwidth, kde.pooling, emb.support_labels);

    ScoreReport report;
    report.bandwidth = model.bandwidth;
    report.scores = anomaly_score(model, emb.test);
    report.labels = emb.test_labels;
    for (int y : emb.test_labels) {
        report.is_ood.push_back(y == task.ood_class ? 1 : 0);
    }
    report.curve = auprc(report.scores, report.is_ood);
    report.separation = separation_ratio(emb.test, emb.test_labels, task.in_dist_classes);
    return report;
}

ScoreReport evaluate_task(Discriminator& disc, EmbeddingHead& head, const OodTask& task, const KdeSettings& kde) {
    return score_embeddings(embed_task(disc, head, task), task, kde);
}

namespace {

// JSON has no infinity; the separation sentinel is written as the string "inf".
nlohmann::json finite_or_tag(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

double read_number(const nlohmann::json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    return j.get<double>();
}

}  // namespace

nlohmann::json report_to_json(const ScoreReport& r) {
    nlohmann::json j;
    j["schema_version"] = ScoreReport::kSchemaVersion;
    j["auprc"] = r.curve.area;
    j["auprc_estimator"] = "average_precision";
    j["separation_ratio"] = finite_or_tag(r.separation);
    j["bandwidth"] = r.bandwidth;
    auto& curve = j["curve"] = nlohmann::json::array();
    for (const auto& p : r.curve.points) {
        curve.push_back({p.recall, p.precision});
    }
    j["scores"] = r.scores;
    j["labels"] = r.labels;
    j["is_ood"] = r.is_ood;
    return j;
}

ScoreReport report_from_json(const nlohmann::json& j, const std::string& origin) {
    const int version = j.value("schema_version", -1);
    if (version != ScoreReport::kSchemaVersion) {
        throw ReportSchemaError("score report " + origin + " has schema version " + std::to_string(version) +
                                ", expected " + std::to_string(ScoreReport::kSchemaVersion));
    }
    ScoreReport r;
    r.curve.area = j.at("auprc").get<double>();
    r.separation = read_number(j.at("separation_ratio"));
    r.bandwidth = j.at("bandwidth").get<double>();
    for (const auto& p : j.at("curve")) {
        r.curve.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    r.scores = j.at("scores").get<std::vector<double>>();
    r.labels = j.at("labels").get<std::vector<int>>();
    r.is_ood = j.at("is_ood").get<std::vector<std::uint8_t>>();
    return r;
}

void export_embeddings_csv(const std::filesystem::path& path, const TaskEmbeddings& emb, const OodTask& task,
                           bool include_support) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << std::setprecision(9);
    out << "id,label,is_ood";
    for (Eigen::Index c = 0; c < emb.test.cols(); ++c) {
        out << ",z" << c;
    }
    out << '\n';
    auto row = [&](const std::string& id, int label, const auto& z) {
        out << id << ',' << label << ',' << (label == task.ood_class ? 1 : 0);
        for (Eigen::Index c = 0; c < z.size(); ++c) {
            out << ',' << z(c);
        }
        out << '\n';
    };
    for (Eigen::Index i = 0; i < emb.test.rows(); ++i) {
        row("test:" + std::to_string(i), emb.test_labels[static_cast<std::size_t>(i)], emb.test.row(i));
    }
    if (include_support) {
        for (Eigen::Index i = 0; i < emb.support.rows(); ++i) {
            row("support:" + std::to_string(task.support_indices[static_cast<std::size_t>(i)]),
                emb.support_labels[static_cast<std::size_t>(i)], emb.support.row(i));
        }
    }
}

void to_json(nlohmann::json& j, const KdeSettings& k) {
    j = {{"bandwidth", k.bandwidth.kind == BandwidthPolicy::Kind::scott ? nlohmann::json("scott")
                                                                         : nlohmann::json(k.bandwidth.value)},
         {"pooling", k.pooling}};
}

void from_json(const nlohmann::json& j, KdeSettings& k) {
    if (j.contains("bandwidth")) {
        const auto& b = j.at("bandwidth");
        if (b.is_string()) {
            if (b.get<std::string>() != "scott") {
                throw std::invalid_argument("kde.bandwidth must be \"scott\" or a positive number");
            }
            k.bandwidth = BandwidthPolicy::scott();
        } else {
            k.bandwidth = BandwidthPolicy::fixed(b.get<double>());
        }
    }
    k.pooling = j.value("pooling", k.pooling);
}

}  // namespace ibdd
