#pragma once

// Anomaly scoring in the embedded space: a Gaussian kernel density over the
// labeled support embeddings, precision-recall evaluation with the OOD class
// as the positive class, and a class-separation diagnostic.

#include "ibdd/ib_loss.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibdd {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct BandwidthPolicy {
    enum class Kind { fixed, scott };
    Kind kind = Kind::scott;
    double value = 1.0;  // used when kind == fixed

    static BandwidthPolicy fixed(double h) { return {Kind::fixed, h}; }
    static BandwidthPolicy scott() { return {Kind::scott, 0.0}; }
};

enum class KdePooling {
    pooled,         // one density over all support points
    per_class_max,  // max over per-class densities
};

struct KdeModel {
    Matrix support;
    std::vector<int> support_labels;  // only needed for per_class_max
    double bandwidth = 1.0;
    KdePooling pooling = KdePooling::pooled;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(support.cols()); }
};

/// Scott's rule: h = M^(-1/(d+4)) * mean per-dimension sample std.
double scott_bandwidth(const Matrix& support);

KdeModel fit_kde(Matrix support, const BandwidthPolicy& policy,
                 KdePooling pooling = KdePooling::pooled, std::vector<int> support_labels = {});

/// Gaussian-kernel log density, evaluated with log-sum-exp.
std::vector<double> log_density(const KdeModel& model, const Matrix& queries);

/// -log density; higher means more anomalous.
std::vector<double> anomaly_score(const KdeModel& model, const Matrix& queries);

struct PrPoint {
    double recall = 0.0;
    double precision = 0.0;
};

struct PrCurve {
    std::vector<PrPoint> points;  // one point per distinct score threshold, recall nondecreasing
    double area = 0.0;            // average precision: sum_k (R_k - R_{k-1}) * P_k
};

PrCurve auprc(std::span<const double> scores, std::span<const std::uint8_t> positives);

/// Mean pairwise distance between class centroids divided by the mean
/// distance of samples to their own centroid. +inf when every class is a
/// single point.
double separation_ratio(const Matrix& embeddings, std::span<const int> labels);

/// Restricted to the listed classes; rows with other labels are ignored and
/// a listed class without samples is an error.
double separation_ratio(const Matrix& embeddings, std::span<const int> labels,
                        std::span<const int> classes);

struct ScoreReport {
    static constexpr int kSchemaVersion = 1;

    std::vector<double> scores;
    std::vector<std::uint8_t> is_ood;
    std::vector<int> labels;
    PrCurve curve;
    double separation = 0.0;
    double bandwidth = 0.0;
};

}  // namespace ibdd
