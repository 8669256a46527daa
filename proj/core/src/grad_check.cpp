#include "ibdd/ib_loss.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace ibdd {

namespace {

double evaluate(LossSelector s, const GradCheckFixture& f) {
    switch (s) {
        case LossSelector::mcdd: return mcdd_loss(f.batch, f.protos);
        case LossSelector::compression: return compression_term(f.batch, f.cfg);
        case LossSelector::relevance: return relevance_term(f.batch, f.protos, f.cfg);
        case LossSelector::ib_total: return ib_loss(f.batch, f.protos, f.cfg).total;
    }
    return 0.0;
}

LossGradients analytic(LossSelector s, const GradCheckFixture& f) {
    switch (s) {
        case LossSelector::mcdd: return mcdd_loss_with_grad(f.batch, f.protos).grad;
        case LossSelector::compression: return compression_term_with_grad(f.batch, f.cfg).grad;
        case LossSelector::relevance: return relevance_term_with_grad(f.batch, f.protos, f.cfg).grad;
        case LossSelector::ib_total: return ib_loss_with_grad(f.batch, f.protos, f.cfg).grad;
    }
    return {};
}

// Walks one parameter block; a missing analytic block means the loss does
// not depend on it, so the expected gradient is zero.
template <class Block>
bool check_block(const char* name, Block& param, const Block& grad,
                 const std::function<double()>& f, double h, GradCheckReport& report) {
    const Eigen::Index rows = param.rows();
    const Eigen::Index cols = param.cols();
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            const double saved = param(r, c);
            param(r, c) = saved + h;
            const double up = f();
            param(r, c) = saved - h;
            const double down = f();
            param(r, c) = saved;

            const double fd = (up - down) / (2.0 * h);
            const double an = grad.size() == 0 ? 0.0 : grad(r, c);
            std::string where = std::string(name) + "[" + std::to_string(r);
            where += cols > 1 ? "," + std::to_string(c) + "]" : "]";
            if (!std::isfinite(an) || !std::isfinite(fd)) {
                report.failure = "non-finite gradient at " + where;
                report.worst_location = where;
                return false;
            }
            // Gradients below h are compared on an absolute scale of h: the
            // central difference cannot resolve them more finely than O(h^2).
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), h});
            ++report.entries_checked;
            if (rel >= report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_location = where;
            }
        }
    }
    return true;
}

}  // namespace

const char* to_string(LossSelector s) {
    switch (s) {
        case LossSelector::mcdd: return "mcdd_loss";
        case LossSelector::compression: return "compression_term";
        case LossSelector::relevance: return "relevance_term";
        case LossSelector::ib_total: return "ib_loss";
    }
    return "?";
}

GradCheckFixture GradCheckFixture::random(std::size_t n, std::size_t dim, int num_classes, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(-0.3, 0.3);

    GradCheckFixture f;
    const auto rows = static_cast<Eigen::Index>(n);
    const auto cols = static_cast<Eigen::Index>(dim);
    f.batch.num_classes = num_classes;
    f.batch.z.resize(rows, cols);
    for (auto& v : f.batch.z.reshaped()) v = normal(rng);
    for (std::size_t i = 0; i < n; ++i) {
        f.batch.y.push_back(static_cast<int>(i % static_cast<std::size_t>(num_classes)));
    }
    f.protos = ClassPrototypes::zeros(static_cast<std::size_t>(num_classes), dim);
    for (auto& v : f.protos.mu.reshaped()) v = normal(rng);
    for (auto& v : f.protos.log_sigma) v = unif(rng);
    for (auto& v : f.protos.bias) v = unif(rng);
    f.cfg.beta = 1.0;
    f.cfg.sigma_z = 1.0;
    return f;
}

GradCheckReport grad_check(LossSelector selector, const GradCheckFixture& fixture, double h,
                           double tolerance) {
    GradCheckReport report;
    GradCheckFixture work = fixture;
    const LossGradients g = analytic(selector, work);
    const std::function<double()> f = [&] { return evaluate(selector, work); };

    bool ok = check_block("z", work.batch.z, g.z, f, h, report) &&
              check_block("mu", work.protos.mu, g.mu, f, h, report) &&
              check_block("log_sigma", work.protos.log_sigma, g.log_sigma, f, h, report);
    if (ok && selector == LossSelector::mcdd) {
        ok = check_block("bias", work.protos.bias, g.bias, f, h, report);
    }
    report.passed = ok && report.max_relative_error < tolerance;
    return report;
}

}  // namespace ibdd
