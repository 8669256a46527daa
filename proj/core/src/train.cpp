#include "ibdd/train.hpp"

#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace ibdd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename Holder>
Holder deep_clone(const Holder& net) {
    using Impl = typename Holder::ContainedType;
    return Holder(std::dynamic_pointer_cast<Impl>(net->clone()));
}

torch::Tensor to_tensor(const Matrix& m) {
    return torch::from_blob(const_cast<double*>(m.data()), {m.rows(), m.cols()}, torch::kFloat64).clone();
}

torch::Tensor to_tensor(const Vector& v) {
    return torch::from_blob(const_cast<double*>(v.data()), {v.size()}, torch::kFloat64).clone();
}

Matrix to_matrix(const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kFloat64).contiguous();
    return Eigen::Map<const Matrix>(c.data_ptr<double>(), c.size(0), c.size(1));
}

Vector to_vector(const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kFloat64).contiguous();
    return Eigen::Map<const Vector>(c.data_ptr<double>(), c.size(0));
}

void count_labels(TrainLog& log, const ImageDataset& ds, std::span<const std::size_t> indices) {
    for (std::size_t i : indices) {
        ++log.consumed_labels[ds.labels[i]];
    }
}

const char* phase_name(Phase p) { return p == Phase::pretrain ? "pretrain" : "retrain"; }

}  // namespace

void GanTrainConfig::validate() const {
    if (epochs < 1) throw TrainInputError("gan.epochs must be >= 1");
    if (batch_size < 1) throw TrainInputError("gan.batch_size must be >= 1");
    if (!(lr_generator > 0.0) || !(lr_discriminator > 0.0)) throw TrainInputError("gan learning rates must be > 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw TrainInputError("gan Adam moment coefficients must lie in [0, 1)");
    }
    if (noise_dim != kNoiseDim) throw TrainInputError("gan.noise_dim must be 100");
}

void IBTrainConfig::validate() const {
    if (steps < 1) throw TrainInputError("ib.steps must be >= 1");
    if (!(learning_rate >= 0.0)) throw TrainInputError("ib.learning_rate must be >= 0");
    try {
        loss.validate();
    } catch (const LossInputError& e) {
        throw TrainInputError(std::string("ib.loss: ") + e.what());
    }
}

bool TrainLog::same_trajectory(const TrainLog& other) const {
    if (records.size() != other.records.size() || consumed_labels != other.consumed_labels) {
        return false;
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& a = records[i];
        const auto& b = other.records[i];
        if (a.step != b.step || a.phase != b.phase || a.d_loss != b.d_loss || a.g_loss != b.g_loss ||
            a.ib.has_value() != b.ib.has_value()) {
            return false;
        }
        if (a.ib && (a.ib->compression != b.ib->compression || a.ib->relevance != b.ib->relevance ||
                     a.ib->total != b.ib->total)) {
            return false;
        }
    }
    return true;
}

std::string TrainLog::to_jsonl() const {
    std::ostringstream out;
    for (const auto& r : records) {
        nlohmann::json j;
        j["step"] = r.step;
        j["phase"] = phase_name(r.phase);
        if (r.phase == Phase::pretrain) {
            j["d_loss"] = r.d_loss;
            j["g_loss"] = r.g_loss;
        } else if (r.ib) {
            j["compression"] = r.ib->compression;
            j["relevance"] = r.ib->relevance;
            j["total"] = r.ib->total;
        }
        j["wall_seconds"] = r.wall_seconds;
        out << j.dump() << '\n';
    }
    return out.str();
}

torch::Tensor images_tensor(const ImageDataset& ds, std::span<const std::size_t> indices) {
    const auto n = static_cast<std::int64_t>(indices.size());
    auto t = torch::empty({n, static_cast<std::int64_t>(ds.channels), static_cast<std::int64_t>(ds.rows),
                           static_cast<std::int64_t>(ds.cols)});
    float* dst = t.data_ptr<float>();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto img = ds.image(indices[k]);
        std::copy(img.begin(), img.end(), dst + k * ds.image_size());
    }
    return t;
}

torch::Tensor images_tensor(const ImageDataset& ds) {
    return torch::from_blob(const_cast<float*>(ds.pixels.data()),
                            {static_cast<std::int64_t>(ds.size()), static_cast<std::int64_t>(ds.channels),
                             static_cast<std::int64_t>(ds.rows), static_cast<std::int64_t>(ds.cols)})
        .clone();
}

Matrix embed_matrix(Discriminator& disc, EmbeddingHead& head, const torch::Tensor& images, std::int64_t chunk) {
    torch::NoGradGuard no_grad;
    const bool was_training = disc->is_training();
    disc->eval();
    head->eval();
    std::vector<torch::Tensor> parts;
    for (std::int64_t start = 0; start < images.size(0); start += chunk) {
        parts.push_back(embed(disc, head, images.slice(0, start, std::min(images.size(0), start + chunk))));
    }
    disc->train(was_training);
    return to_matrix(torch::cat(parts));
}

EmbeddingHead make_embedding_head(EmbeddingMode mode, std::int64_t d_proj, std::uint64_t seed) {
    torch::manual_seed(seed);
    EmbeddingHead head(mode, d_proj);
    init_params(*head);
    return head;
}

PretrainResult pretrain_gan(const OodTask& task, const GanTrainConfig& cfg) {
    cfg.validate();
    if (task.pretrain_pool.empty()) {
        throw TrainInputError("pretrain pool is empty");
    }
    const ImageDataset& train = *task.train;
    for (std::size_t i : task.pretrain_pool) {
        if (train.labels[i] == task.ood_class) {
            throw TrainInputError("pretrain pool contains the OOD class");
        }
    }

    torch::manual_seed(cfg.seed);
    PretrainResult out{Generator(), Discriminator(), {}};
    Generator& gen = out.generator;
    Discriminator& disc = out.discriminator;
    init_params(*gen);
    init_params(*disc);
    gen->train();
    disc->train();

    torch::optim::Adam opt_g(gen->parameters(), torch::optim::AdamOptions(cfg.lr_generator)
                                                    .betas({cfg.adam_beta1, cfg.adam_beta2}));
    torch::optim::Adam opt_d(disc->parameters(), torch::optim::AdamOptions(cfg.lr_discriminator)
                                                     .betas({cfg.adam_beta1, cfg.adam_beta2}));

    const BatchPlan plan{cfg.batch_size, cfg.seed, cfg.drop_last};
    const auto t0 = Clock::now();
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& batch : iterate_batches(task.pretrain_pool, plan, static_cast<std::uint64_t>(epoch))) {
            count_labels(out.log, train, batch);
            const auto real = images_tensor(train, batch);
            const auto n = real.size(0);
            const auto ones = torch::ones({n, 1});
            const auto zeros = torch::zeros({n, 1});

            const auto fake = gen->forward(torch::randn({n, cfg.noise_dim}));

            opt_d.zero_grad();
            const auto d_loss = torch::binary_cross_entropy_with_logits(disc->logits(real), ones) +
                                torch::binary_cross_entropy_with_logits(disc->logits(fake.detach()), zeros);
            d_loss.backward();
            opt_d.step();

            // non-saturating generator objective
            opt_g.zero_grad();
            const auto g_loss = torch::binary_cross_entropy_with_logits(disc->logits(fake), ones);
            g_loss.backward();
            opt_g.step();

            TrainRecord rec;
            rec.step = step++;
            rec.phase = Phase::pretrain;
            rec.d_loss = d_loss.item<double>();
            rec.g_loss = g_loss.item<double>();
            rec.wall_seconds = seconds_since(t0);
            out.log.records.push_back(rec);
            if (!std::isfinite(rec.d_loss) || !std::isfinite(rec.g_loss)) {
                throw TrainingDiverged("GAN loss became non-finite at step " + std::to_string(rec.step),
                                       out.log);
            }
        }
    }
    gen->eval();
    disc->eval();
    return out;
}

RetrainResult retrain_ib(const Discriminator& discriminator, const EmbeddingHead& head, const OodTask& task,
                         const IBTrainConfig& cfg) {
    cfg.validate();
    const auto labels = task.support_class_indices();
    const auto k_count = static_cast<int>(task.num_classes());
    {
        const std::set<int> present(labels.begin(), labels.end());
        if (present.count(-1) != 0) {
            throw TrainInputError("support set contains the OOD class");
        }
        if (static_cast<int>(present.size()) != k_count) {
            throw TrainInputError("support set is missing an in-distribution class");
        }
    }

    torch::manual_seed(cfg.seed);
    RetrainResult out{deep_clone(discriminator), deep_clone(head), {}, {}};
    Discriminator& disc = out.discriminator;
    EmbeddingHead& emb = out.head;
    const bool full = cfg.scope == RetrainScope::full_discriminator_stack;

    const auto support = images_tensor(*task.train, task.support_indices);

    // prototypes start from the pre-trained support embeddings
    EmbeddingBatch batch{embed_matrix(disc, emb, support), labels, k_count};
    ClassPrototypes protos = ClassPrototypes::from_class_means(batch);
    if (cfg.prototype_init == PrototypeInit::random) {
        const Matrix centered = batch.z.rowwise() - batch.z.colwise().mean();
        const Eigen::RowVectorXd spread =
            (centered.colwise().squaredNorm() / static_cast<double>(batch.size())).array().sqrt();
        const Matrix noise = to_matrix(torch::randn({k_count, static_cast<std::int64_t>(batch.dim())},
                                                    torch::kFloat64));
        protos.mu = (noise.array().rowwise() * spread.array()).matrix().rowwise() + batch.z.colwise().mean();
    }
    // sigma_k starts at the per-class maximum-likelihood scale
    for (int k = 0; k < k_count; ++k) {
        double sq = 0.0;
        int count = 0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            if (labels[i] == k) {
                sq += (batch.z.row(static_cast<Eigen::Index>(i)) - protos.mu.row(k)).squaredNorm();
                ++count;
            }
        }
        const double var = sq / (static_cast<double>(count) * static_cast<double>(batch.dim()));
        protos.log_sigma(k) = 0.5 * std::log(std::max(var, 1e-12));
    }
    if (cfg.log_prior_bias) {
        protos.set_log_prior_bias(batch);
    }

    auto mu_t = to_tensor(protos.mu).requires_grad_(true);
    auto log_sigma_t = to_tensor(protos.log_sigma).requires_grad_(true);

    std::vector<torch::Tensor> params = emb->parameters();
    if (full) {
        for (auto& p : disc->conv->parameters()) {
            params.push_back(p);
        }
    }
    params.push_back(mu_t);
    params.push_back(log_sigma_t);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate));

    auto snapshot = [&] {
        RetrainResult s{deep_clone(disc), deep_clone(emb), protos, out.log};
        s.discriminator->eval();
        return s;
    };
    RetrainResult last_good = snapshot();

    const auto t0 = Clock::now();
    for (int step = 0; step < cfg.steps; ++step) {
        count_labels(out.log, *task.train, task.support_indices);
        disc->train(full);
        emb->train();

        torch::Tensor z;
        if (full) {
            z = emb->forward(disc->features(support));
        } else {
            torch::Tensor feats;
            {
                torch::NoGradGuard no_grad;
                feats = disc->features(support);
            }
            z = emb->forward(feats);
        }
        batch.z = to_matrix(z);
        protos.mu = to_matrix(mu_t);
        protos.log_sigma = to_vector(log_sigma_t);

        TrainRecord rec;
        rec.step = step;
        rec.phase = Phase::retrain;
        Evaluated<LossBreakdown> loss;
        try {
            loss = ib_loss_with_grad(batch, protos, cfg.loss);
        } catch (const NumericError& e) {
            throw RetrainDiverged(std::string("IB retraining diverged at step ") + std::to_string(step) + ": " +
                                      e.what(),
                                  std::move(last_good));
        }
        if (!std::isfinite(loss.value.total)) {
            throw RetrainDiverged("IB loss became non-finite at step " + std::to_string(step),
                                  std::move(last_good));
        }
        rec.ib = loss.value;

        opt.zero_grad();
        z.backward(to_tensor(loss.grad.z).to(z.scalar_type()));
        mu_t.mutable_grad() = to_tensor(loss.grad.mu);
        log_sigma_t.mutable_grad() = to_tensor(loss.grad.log_sigma);
        opt.step();

        rec.wall_seconds = seconds_since(t0);
        out.log.records.push_back(rec);
        last_good = snapshot();
    }

    disc->eval();
    emb->eval();
    protos.mu = to_matrix(mu_t);
    protos.log_sigma = to_vector(log_sigma_t);
    out.prototypes = protos;
    return out;
}

std::vector<RepetitionResult> run_experiment(std::shared_ptr<const ImageDataset> train,
                                             std::shared_ptr<const ImageDataset> test, ClassId ood_class,
                                             std::size_t n_support, GanTrainConfig gan_cfg, IBTrainConfig ib_cfg,
                                             EmbeddingMode head_mode, std::int64_t d_proj, int repetitions,
                                             std::uint64_t base_seed) {
    if (repetitions < 1) {
        throw TrainInputError("repetitions must be >= 1");
    }
    const std::set<ClassId> known(train->labels.begin(), train->labels.end());
    if (!known.contains(ood_class)) {
        throw TrainInputError("ood class " + std::to_string(ood_class) + " is not in the label set");
    }
    std::vector<RepetitionResult> out;
    for (int r = 0; r < repetitions; ++r) {
        const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(r);
        auto task = build_task(train, test, ood_class, n_support, seed);
        gan_cfg.seed = seed;
        ib_cfg.seed = seed;
        auto pre = pretrain_gan(task, gan_cfg);
        auto head = make_embedding_head(head_mode, d_proj, seed);
        auto re = retrain_ib(pre.discriminator, head, task, ib_cfg);
        out.push_back(RepetitionResult{r, seed, std::move(task), std::move(pre), std::move(re), head});
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON

NLOHMANN_JSON_SERIALIZE_ENUM(RetrainScope, {{RetrainScope::embedding_head_only, "embedding_head_only"},
                                            {RetrainScope::full_discriminator_stack, "full_discriminator_stack"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PrototypeInit, {{PrototypeInit::support_class_means, "support_class_means"},
                                             {PrototypeInit::random, "random"}})

void to_json(nlohmann::json& j, const GanTrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"lr_generator", c.lr_generator},
         {"lr_discriminator", c.lr_discriminator},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"noise_dim", c.noise_dim},
         {"drop_last", c.drop_last}};
}

void from_json(const nlohmann::json& j, GanTrainConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_generator = j.value("lr_generator", c.lr_generator);
    c.lr_discriminator = j.value("lr_discriminator", c.lr_discriminator);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.drop_last = j.value("drop_last", c.drop_last);
}

void to_json(nlohmann::json& j, const IBTrainConfig& c) {
    j = {{"steps", c.steps},
         {"learning_rate", c.learning_rate},
         {"beta", c.loss.beta},
         {"sigma_z", c.loss.sigma_z},
         {"include_log_sigma_term", c.loss.include_log_sigma_term},
         {"scope", c.scope},
         {"prototype_init", c.prototype_init},
         {"log_prior_bias", c.log_prior_bias}};
}

void from_json(const nlohmann::json& j, IBTrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.loss.beta = j.value("beta", c.loss.beta);
    c.loss.sigma_z = j.value("sigma_z", c.loss.sigma_z);
    c.loss.include_log_sigma_term = j.value("include_log_sigma_term", c.loss.include_log_sigma_term);
    c.scope = j.value("scope", c.scope);
    c.prototype_init = j.value("prototype_init", c.prototype_init);
    c.log_prior_bias = j.value("log_prior_bias", c.log_prior_bias);
}

}  // namespace ibdd
