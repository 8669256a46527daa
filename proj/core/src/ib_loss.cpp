#include "ibdd/ib_loss.hpp"

#include <algorithm>
#include <limits>

namespace ibdd {

namespace {

void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw NumericError(std::string("non-finite entries in ") + what);
    }
}

void require_finite(const Vector& v, const char* what) {
    if (!v.allFinite()) {
        throw NumericError(std::string("non-finite entries in ") + what);
    }
}

// Mean negative log posterior  1/N sum_i [ -a_{i,y_i} + logsumexp_k a_ik ]
// with a_ik = -D_k(z_i) + b_k. Biases are skipped when use_bias is false.
Evaluated<double> neg_log_posterior(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                                    bool use_bias) {
    batch.validate();
    protos.validate(batch.dim());
    if (static_cast<int>(protos.num_classes()) != batch.num_classes) {
        throw LossInputError("prototype count does not match batch num_classes");
    }

    const Eigen::Index n = batch.z.rows();
    const Eigen::Index d = batch.z.cols();
    const Eigen::Index k_count = protos.mu.rows();
    const double inv_n = 1.0 / static_cast<double>(n);

    Vector inv_var(k_count);
    for (Eigen::Index k = 0; k < k_count; ++k) {
        inv_var(k) = std::exp(-2.0 * protos.log_sigma(k));
    }

    Evaluated<double> out{0.0, {}};
    out.grad.z = Matrix::Zero(n, d);
    out.grad.mu = Matrix::Zero(k_count, d);
    out.grad.log_sigma = Vector::Zero(k_count);
    out.grad.bias = Vector::Zero(use_bias ? k_count : 0);

    Vector logits(k_count);
    Vector sq(k_count);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < k_count; ++k) {
            sq(k) = (batch.z.row(i) - protos.mu.row(k)).squaredNorm();
            const double dist = 0.5 * sq(k) * inv_var(k) + static_cast<double>(d) * protos.log_sigma(k);
            logits(k) = -dist + (use_bias ? protos.bias(k) : 0.0);
        }
        const double m = logits.maxCoeff();
        const double lse = m + std::log((logits.array() - m).exp().sum());
        const int y = batch.y[static_cast<std::size_t>(i)];
        out.value += inv_n * (lse - logits(y));

        // dL/da_ik = (p_ik - [k == y_i]) / N ; dL/dD_ik = -dL/da_ik
        for (Eigen::Index k = 0; k < k_count; ++k) {
            const double g_logit = inv_n * (std::exp(logits(k) - lse) - (k == y ? 1.0 : 0.0));
            const double g_dist = -g_logit;
            const auto diff = (batch.z.row(i) - protos.mu.row(k)).eval();
            out.grad.z.row(i) += g_dist * inv_var(k) * diff;
            out.grad.mu.row(k) -= g_dist * inv_var(k) * diff;
            out.grad.log_sigma(k) += g_dist * (static_cast<double>(d) - sq(k) * inv_var(k));
            if (use_bias) {
                out.grad.bias(k) += g_logit;
            }
        }
    }
    return out;
}

LossGradients negate(LossGradients g) {
    g.z = -g.z;
    g.mu = -g.mu;
    g.log_sigma = -g.log_sigma;
    g.bias = -g.bias;
    return g;
}

}  // namespace

void EmbeddingBatch::validate() const {
    if (static_cast<std::size_t>(z.rows()) != y.size()) {
        throw LossInputError("embedding rows and label count differ");
    }
    if (z.rows() == 0 || z.cols() == 0) {
        throw LossInputError("empty embedding batch");
    }
    if (num_classes < 1) {
        throw LossInputError("num_classes must be positive");
    }
    for (int label : y) {
        if (label < 0 || label >= num_classes) {
            throw LossInputError("label " + std::to_string(label) + " outside [0, " +
                                 std::to_string(num_classes) + ")");
        }
    }
    require_finite(z, "embeddings");
}

void ClassPrototypes::validate(std::size_t dim) const {
    if (static_cast<std::size_t>(mu.cols()) != dim) {
        throw LossInputError("prototype dimension does not match embeddings");
    }
    if (log_sigma.size() != mu.rows() || bias.size() != mu.rows()) {
        throw LossInputError("prototype parameter sizes disagree");
    }
    require_finite(mu, "prototype centers");
    require_finite(log_sigma, "prototype log scales");
    require_finite(bias, "prototype biases");
}

ClassPrototypes ClassPrototypes::zeros(std::size_t num_classes, std::size_t dim) {
    const auto k = static_cast<Eigen::Index>(num_classes);
    return {Matrix::Zero(k, static_cast<Eigen::Index>(dim)), Vector::Zero(k), Vector::Zero(k)};
}

ClassPrototypes ClassPrototypes::from_class_means(const EmbeddingBatch& batch) {
    batch.validate();
    auto protos = zeros(static_cast<std::size_t>(batch.num_classes), batch.dim());
    Vector counts = Vector::Zero(batch.num_classes);
    for (Eigen::Index i = 0; i < batch.z.rows(); ++i) {
        const int y = batch.y[static_cast<std::size_t>(i)];
        protos.mu.row(y) += batch.z.row(i);
        counts(y) += 1.0;
    }
    for (int k = 0; k < batch.num_classes; ++k) {
        if (counts(k) == 0.0) {
            throw LossInputError("class " + std::to_string(k) + " has no samples");
        }
        protos.mu.row(k) /= counts(k);
    }
    return protos;
}

void ClassPrototypes::set_log_prior_bias(const EmbeddingBatch& batch) {
    Vector counts = Vector::Zero(mu.rows());
    for (int y : batch.y) {
        counts(y) += 1.0;
    }
    for (Eigen::Index k = 0; k < counts.size(); ++k) {
        bias(k) = counts(k) > 0 ? std::log(counts(k) / static_cast<double>(batch.y.size()))
                                : -std::numeric_limits<double>::infinity();
    }
}

void IBLossConfig::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw LossInputError("beta must be a finite non-negative number");
    }
    if (!(sigma_z > 0.0) || !std::isfinite(sigma_z)) {
        throw LossInputError("sigma_z must be positive");
    }
}

Vector class_distance(const EmbeddingBatch& batch, const ClassPrototypes& protos, int k,
                      bool with_log_scale) {
    require_finite(batch.z, "embeddings");
    protos.validate(batch.dim());
    if (k < 0 || k >= static_cast<int>(protos.num_classes())) {
        throw LossInputError("class index out of range");
    }
    const double inv_var = std::exp(-2.0 * protos.log_sigma(k));
    Vector out = 0.5 * inv_var * (batch.z.rowwise() - protos.mu.row(k)).rowwise().squaredNorm();
    if (with_log_scale) {
        out.array() += static_cast<double>(batch.dim()) * protos.log_sigma(k);
    }
    return out;
}

double mcdd_loss(const EmbeddingBatch& batch, const ClassPrototypes& protos) {
    return neg_log_posterior(batch, protos, true).value;
}

Evaluated<double> mcdd_loss_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos) {
    return neg_log_posterior(batch, protos, true);
}

Evaluated<double> compression_term_with_grad(const EmbeddingBatch& batch, const IBLossConfig& cfg) {
    cfg.validate();
    require_finite(batch.z, "embeddings");
    const Eigen::Index n = batch.z.rows();
    if (n < 2) {
        throw LossInputError("compression term needs at least two embeddings");
    }
    // sum_{i,j} |z_i - z_j|^2 = 2N sum_i |z_i - mean|^2
    const double var_z = cfg.sigma_z * cfg.sigma_z;
    const Matrix centered = batch.z.rowwise() - batch.z.colwise().mean();
    const double dn = static_cast<double>(n);

    Evaluated<double> out{-centered.squaredNorm() / (dn * var_z), {}};
    if (cfg.include_log_sigma_term) {
        out.value += static_cast<double>(batch.dim()) * std::log(cfg.sigma_z);
    }
    out.grad.z = (-2.0 / (dn * var_z)) * centered;
    return out;
}

double compression_term(const EmbeddingBatch& batch, const IBLossConfig& cfg) {
    return compression_term_with_grad(batch, cfg).value;
}

Evaluated<double> relevance_term_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                                           const IBLossConfig& cfg) {
    cfg.validate();
    auto nlp = neg_log_posterior(batch, protos, false);
    return {-nlp.value, negate(std::move(nlp.grad))};
}

double relevance_term(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                      const IBLossConfig& cfg) {
    return relevance_term_with_grad(batch, protos, cfg).value;
}

Evaluated<LossBreakdown> ib_loss_with_grad(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                                           const IBLossConfig& cfg) {
    auto comp = compression_term_with_grad(batch, cfg);
    auto rel = relevance_term_with_grad(batch, protos, cfg);

    Evaluated<LossBreakdown> out;
    out.value.compression = comp.value;
    out.value.relevance = rel.value;
    out.value.total = comp.value - cfg.beta * rel.value;
    out.grad.z = comp.grad.z - cfg.beta * rel.grad.z;
    out.grad.mu = -cfg.beta * rel.grad.mu;
    out.grad.log_sigma = -cfg.beta * rel.grad.log_sigma;
    return out;
}

LossBreakdown ib_loss(const EmbeddingBatch& batch, const ClassPrototypes& protos,
                      const IBLossConfig& cfg) {
    return ib_loss_with_grad(batch, protos, cfg).value;
}

}  // namespace ibdd
