#include "ibdd/score_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

namespace ibdd {

namespace {

// log[(1/M) sum_j N(q | s_j, h^2 I)] over the given support rows.
double log_kernel_mean(const Matrix& support, std::span<const Eigen::Index> rows,
                       const Eigen::RowVectorXd& q, double h) {
    const double inv_two_h2 = 1.0 / (2.0 * h * h);
    double max_e = -std::numeric_limits<double>::infinity();
    std::vector<double> expo(rows.size());
    for (std::size_t j = 0; j < rows.size(); ++j) {
        expo[j] = -(q - support.row(rows[j])).squaredNorm() * inv_two_h2;
        max_e = std::max(max_e, expo[j]);
    }
    if (!std::isfinite(max_e)) {
        return -std::numeric_limits<double>::infinity();
    }
    double acc = 0.0;
    for (double e : expo) {
        acc += std::exp(e - max_e);
    }
    const double d = static_cast<double>(support.cols());
    return max_e + std::log(acc) - std::log(static_cast<double>(rows.size())) -
           0.5 * d * std::log(2.0 * std::numbers::pi * h * h);
}

}  // namespace

double scott_bandwidth(const Matrix& support) {
    const Eigen::Index m = support.rows();
    const Eigen::Index d = support.cols();
    if (m < 2) {
        throw MetricError("Scott's rule needs at least two support points; use a fixed bandwidth");
    }
    const Matrix centered = support.rowwise() - support.colwise().mean();
    const Eigen::RowVectorXd var = centered.colwise().squaredNorm() / static_cast<double>(m - 1);
    const double mean_std = var.array().sqrt().mean();
    if (!(mean_std > 0.0)) {
        throw MetricError("support embeddings have zero variance; Scott's rule is degenerate, use a fixed bandwidth");
    }
    return std::pow(static_cast<double>(m), -1.0 / (static_cast<double>(d) + 4.0)) * mean_std;
}

KdeModel fit_kde(Matrix support, const BandwidthPolicy& policy, KdePooling pooling,
                 std::vector<int> support_labels) {
    if (support.rows() < 1 || support.cols() < 1) {
        throw MetricError("KDE needs at least one support point of positive dimension");
    }
    if (!support.allFinite()) {
        throw NumericError("non-finite support embeddings");
    }
    if (pooling == KdePooling::per_class_max &&
        support_labels.size() != static_cast<std::size_t>(support.rows())) {
        throw MetricError("per-class KDE needs one label per support point");
    }
    KdeModel model;
    model.bandwidth = policy.kind == BandwidthPolicy::Kind::fixed ? policy.value : scott_bandwidth(support);
    if (!(model.bandwidth > 0.0) || !std::isfinite(model.bandwidth)) {
        throw MetricError("bandwidth must be positive");
    }
    model.support = std::move(support);
    model.support_labels = std::move(support_labels);
    model.pooling = pooling;
    return model;
}

std::vector<double> log_density(const KdeModel& model, const Matrix& queries) {
    if (queries.cols() != model.support.cols()) {
        throw MetricError("query dimension " + std::to_string(queries.cols()) +
                          " does not match KDE dimension " + std::to_string(model.support.cols()));
    }
    std::vector<std::vector<Eigen::Index>> groups;
    if (model.pooling == KdePooling::pooled) {
        groups.emplace_back(static_cast<std::size_t>(model.support.rows()));
        std::iota(groups[0].begin(), groups[0].end(), Eigen::Index{0});
    } else {
        std::map<int, std::vector<Eigen::Index>> by_label;
        for (Eigen::Index j = 0; j < model.support.rows(); ++j) {
            by_label[model.support_labels[static_cast<std::size_t>(j)]].push_back(j);
        }
        for (auto& [label, rows] : by_label) {
            groups.push_back(std::move(rows));
        }
    }

    std::vector<double> out(static_cast<std::size_t>(queries.rows()));
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& rows : groups) {
            best = std::max(best, log_kernel_mean(model.support, rows, queries.row(q), model.bandwidth));
        }
        // only reached for astronomically distant queries
        if (!std::isfinite(best)) {
            best = std::numeric_limits<double>::lowest();
        }
        out[static_cast<std::size_t>(q)] = best;
    }
    return out;
}

std::vector<double> anomaly_score(const KdeModel& model, const Matrix& queries) {
    auto scores = log_density(model, queries);
    for (double& s : scores) {
        s = -s;
    }
    return scores;
}

PrCurve auprc(std::span<const double> scores, std::span<const std::uint8_t> positives) {
    if (scores.size() != positives.size()) {
        throw MetricError("scores and labels differ in length");
    }
    const auto n_pos = static_cast<std::size_t>(std::count_if(positives.begin(), positives.end(),
                                                              [](std::uint8_t p) { return p != 0; }));
    if (n_pos == 0 || n_pos == positives.size()) {
        throw MetricError("AUPRC is undefined without both positive and negative samples");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    PrCurve curve;
    std::size_t tp = 0;
    std::size_t seen = 0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        // tied scores share one threshold
        const double threshold = scores[order[i]];
        while (i < order.size() && scores[order[i]] == threshold) {
            tp += positives[order[i]] != 0 ? 1 : 0;
            ++seen;
            ++i;
        }
        const PrPoint p{static_cast<double>(tp) / static_cast<double>(n_pos),
                        static_cast<double>(tp) / static_cast<double>(seen)};
        curve.area += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
        curve.points.push_back(p);
    }
    return curve;
}

double separation_ratio(const Matrix& embeddings, std::span<const int> labels) {
    if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
        throw MetricError("embedding rows and labels differ in length");
    }
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        members[labels[i]].push_back(static_cast<Eigen::Index>(i));
    }
    if (members.size() < 2) {
        throw MetricError("separation ratio needs at least two classes");
    }

    std::vector<Eigen::RowVectorXd> centroids;
    double intra = 0.0;
    for (const auto& [label, rows] : members) {
        Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(embeddings.cols());
        for (Eigen::Index r : rows) {
            c += embeddings.row(r);
        }
        c /= static_cast<double>(rows.size());
        for (Eigen::Index r : rows) {
            intra += (embeddings.row(r) - c).norm();
        }
        centroids.push_back(std::move(c));
    }
    intra /= static_cast<double>(labels.size());

    double inter = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < centroids.size(); ++a) {
        for (std::size_t b = a + 1; b < centroids.size(); ++b) {
            inter += (centroids[a] - centroids[b]).norm();
            ++pairs;
        }
    }
    inter /= static_cast<double>(pairs);
    if (intra == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return inter / intra;
}

double separation_ratio(const Matrix& embeddings, std::span<const int> labels,
                        std::span<const int> classes) {
    if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
        throw MetricError("embedding rows and labels differ in length");
    }
    std::vector<Eigen::Index> keep;
    std::vector<int> kept_labels;
    for (int c : classes) {
        const auto before = keep.size();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == c) {
                keep.push_back(static_cast<Eigen::Index>(i));
                kept_labels.push_back(c);
            }
        }
        if (keep.size() == before) {
            throw MetricError("class " + std::to_string(c) + " has no samples");
        }
    }
    return separation_ratio(Matrix(embeddings(keep, Eigen::all)), kept_labels);
}

}  // namespace ibdd
