#pragma once

// Information-bottleneck loss over embedded samples.
//
// The Lagrangian is  L = I(X;Z) - beta * I(Y;Z)  with empirical estimators
//
//   compression  C = 1/N^2 sum_j sum_i ( -|z_j - z_i|^2 / (2 sigma_z^2) + d log sigma_z )
//   relevance    R = 1/N sum_i log softmax_k(-D_k(z_i))[y_i]
//   D_k(z)         = |z - mu_k|^2 / (2 sigma_k^2) + d log sigma_k
//
// R is the negative of the multi-class data description (MCDD) MAP loss with
// all class biases at zero. Every term returns its value together with
// analytic gradients w.r.t. the embeddings and the class prototypes.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibdd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class LossInputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Rows of z are embeddings f(x_i); y holds class indices in [0, num_classes).
struct EmbeddingBatch {
    Matrix z;
    std::vector<int> y;
    int num_classes = 0;

    std::size_t size() const noexcept { return static_cast<std::size_t>(z.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(z.cols()); }
    void validate() const;
};

/// Per-class Gaussian components. sigma_k = exp(log_sigma_k), so positivity
/// never needs clipping.
struct ClassPrototypes {
    Matrix mu;
    Vector log_sigma;
    Vector bias;

    std::size_t num_classes() const noexcept { return static_cast<std::size_t>(mu.rows()); }
    double sigma(std::size_t k) const { return std::exp(log_sigma(static_cast<Eigen::Index>(k))); }
    void validate(std::size_t dim) const;

    static ClassPrototypes zeros(std::size_t num_classes, std::size_t dim);
    // mu_k = mean of class k rows, sigma_k = 1, b_k = 0.
    static ClassPrototypes from_class_means(const EmbeddingBatch& batch);
    // b_k = log(n_k / N) instead of the uniform prior.
    void set_log_prior_bias(const EmbeddingBatch& batch);
};

struct IBLossConfig {
    double beta = 1.0;
    double sigma_z = 1.0;
    // Adds the constant d*log(sigma_z) to the compression value. Gradients
    // are unaffected.
    bool include_log_sigma_term = false;

    void validate() const;
};

struct LossBreakdown {
    double compression = 0.0;
    double relevance = 0.0;
    double total = 0.0;
};

/// Gradients of a scalar loss. Unused blocks stay zero-sized.
struct LossGradients {
    Matrix z;
    Matrix mu;
    Vector log_sigma;
    Vector bias;
};

template <class T>
struct Evaluated {
    T value;
    LossGradients grad;
};

/// D_k(z_i) for every row. The d*log sigma_k addend is dropped when
/// with_log_scale is false.
Vector class_distance(const EmbeddingBatch& batch, const ClassPrototypes& protos, int k,
                      bool with_log_scale = true);

/// Mean negative log posterior of the generative classifier, biases included.
double mcdd_loss(const EmbeddingBatch& batch, const ClassPrototypes& protos);
Evaluated<double> mcdd_loss_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos);

double compression_term(const EmbeddingBatch& batch, const IBLossConfig& cfg);
Evaluated<double> compression_term_with_grad(const EmbeddingBatch& batch, const IBLossConfig& cfg);

double relevance_term(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                      const IBLossConfig& cfg);
Evaluated<double> relevance_term_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                                           const IBLossConfig& cfg);

LossBreakdown ib_loss(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                      const IBLossConfig& cfg);
/// Gradient of the total only.
Evaluated<LossBreakdown> ib_loss_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                                           const IBLossConfig& cfg);

// ---------------------------------------------------------------------------
// Finite-difference verification

enum class LossSelector { mcdd, compression, relevance, ib_total };

const char* to_string(LossSelector s);

struct GradCheckFixture {
    EmbeddingBatch batch;
    ClassPrototypes protos;
    IBLossConfig cfg;

    // Standard-normal embeddings and centers, log_sigma in [-0.3, 0.3],
    // small random biases, labels cycling through all classes.
    static GradCheckFixture random(std::size_t n, std::size_t dim, int num_classes, unsigned seed);
};

struct GradCheckReport {
    bool passed = false;
    double max_relative_error = 0.0;
    std::string worst_location;  // e.g. "z[3,1]"
    std::string failure;         // set when a gradient is non-finite
    std::size_t entries_checked = 0;
};

/// Central differences w.r.t. every entry of z, mu, log_sigma (and bias for
/// the MCDD loss). Relative error is |a - f| / max(|a|, |f|, 1e-6).
GradCheckReport grad_check(LossSelector selector, const GradCheckFixture& fixture, double h,
                           double tolerance);

}  // namespace ibdd
