#include "ibdd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <tuple>

namespace ibdd {

namespace fs = std::filesystem;
using nlohmann::json;

NLOHMANN_JSON_SERIALIZE_ENUM(EmbeddingMode, {{EmbeddingMode::flatten, "flatten"},
                                             {EmbeddingMode::projected, "projected"}})

namespace {

std::string join_lines(const std::vector<std::string>& items) {
    std::string out = "invalid configuration:";
    for (const auto& s : items) {
        out += "\n  " + s;
    }
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    // Write-then-rename so an interrupted run never leaves a partial marker.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        out << text;
        if (!out) {
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Population standard deviation; 0 for a single repetition.
double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

json finite_or_tag(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

json prototypes_to_json(const ClassPrototypes& p) {
    json mu = json::array();
    for (Eigen::Index k = 0; k < p.mu.rows(); ++k) {
        std::vector<double> row(p.mu.row(k).begin(), p.mu.row(k).end());
        mu.push_back(row);
    }
    return {{"mu", mu},
            {"log_sigma", std::vector<double>(p.log_sigma.begin(), p.log_sigma.end())},
            {"bias", std::vector<double>(p.bias.begin(), p.bias.end())}};
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

std::vector<std::string> ExperimentConfig::problems() const {
    std::vector<std::string> p;
    auto need_file = [&](const char* field, const fs::path& path) {
        if (path.empty()) {
            p.push_back(std::string(field) + ": required");
        } else if (!fs::is_regular_file(path)) {
            p.push_back(std::string(field) + ": no such file " + path.string());
        }
    };
    need_file("data.train_images", train_images);
    need_file("data.train_labels", train_labels);
    need_file("data.test_images", test_images);
    need_file("data.test_labels", test_labels);

    if (ood_classes.empty()) p.push_back("ood_classes: must not be empty");
    if (std::set<ClassId>(ood_classes.begin(), ood_classes.end()).size() != ood_classes.size()) {
        p.push_back("ood_classes: duplicate entries");
    }
    for (ClassId c : ood_classes) {
        if (c < 0) p.push_back("ood_classes: negative class " + std::to_string(c));
    }
    if (n_support < 2) p.push_back("n_support: must be >= 2");
    if (repetitions < 1) p.push_back("repetitions: must be >= 1");
    if (head_mode == EmbeddingMode::projected && d_proj < 2) p.push_back("head.d_proj: must be >= 2");
    if (kde.bandwidth.kind == BandwidthPolicy::Kind::fixed && !(kde.bandwidth.value > 0.0)) {
        p.push_back("kde.bandwidth: must be positive");
    }
    if (output_dir.empty()) p.push_back("output_dir: required");

    auto nested = [&](const char* prefix, auto&& check) {
        try {
            check();
        } catch (const std::exception& e) {
            p.push_back(std::string(prefix) + ": " + e.what());
        }
    };
    nested("gan", [&] { gan.validate(); });
    nested("ib", [&] { ib.validate(); });
    return p;
}

void ExperimentConfig::validate() const {
    auto p = problems();
    if (!p.empty()) {
        throw ConfigError(std::move(p));
    }
}

void to_json(json& j, const ExperimentConfig& c) {
    j = {{"data",
          {{"train_images", c.train_images.string()},
           {"train_labels", c.train_labels.string()},
           {"test_images", c.test_images.string()},
           {"test_labels", c.test_labels.string()}}},
         {"ood_classes", c.ood_classes},
         {"n_support", c.n_support},
         {"repetitions", c.repetitions},
         {"base_seed", c.base_seed},
         {"gan", c.gan},
         {"ib", c.ib},
         {"head", {{"mode", c.head_mode}, {"d_proj", c.d_proj}}},
         {"kde", c.kde},
         {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, ExperimentConfig& c) {
    static const std::set<std::string> known{"data", "ood_classes", "n_support", "repetitions", "base_seed",
                                             "gan",  "ib",          "head",      "kde",         "output_dir"};
    std::vector<std::string> problems;
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) problems.push_back(key + ": unknown field");
    }
    if (!problems.empty()) throw ConfigError(std::move(problems));

    auto field = [&](const char* name, auto&& assign) {
        try {
            assign();
        } catch (const json::exception& e) {
            problems.push_back(std::string(name) + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            problems.push_back(std::string(name) + ": " + e.what());
        }
    };
    if (j.contains("data")) {
        const auto& d = j.at("data");
        field("data.train_images", [&] { c.train_images = d.value("train_images", c.train_images.string()); });
        field("data.train_labels", [&] { c.train_labels = d.value("train_labels", c.train_labels.string()); });
        field("data.test_images", [&] { c.test_images = d.value("test_images", c.test_images.string()); });
        field("data.test_labels", [&] { c.test_labels = d.value("test_labels", c.test_labels.string()); });
    }
    field("ood_classes", [&] { c.ood_classes = j.value("ood_classes", c.ood_classes); });
    field("n_support", [&] { c.n_support = j.value("n_support", c.n_support); });
    field("repetitions", [&] { c.repetitions = j.value("repetitions", c.repetitions); });
    field("base_seed", [&] { c.base_seed = j.value("base_seed", c.base_seed); });
    field("gan", [&] {
        if (j.contains("gan")) from_json(j.at("gan"), c.gan);
    });
    field("ib", [&] {
        if (j.contains("ib")) from_json(j.at("ib"), c.ib);
    });
    field("head", [&] {
        if (!j.contains("head")) return;
        const auto& h = j.at("head");
        if (h.contains("mode")) {
            const auto s = h.at("mode").get<std::string>();
            if (s != "flatten" && s != "projected") throw std::invalid_argument("unknown mode " + s);
            c.head_mode = h.at("mode").get<EmbeddingMode>();
        }
        c.d_proj = h.value("d_proj", c.d_proj);
    });
    field("kde", [&] {
        if (j.contains("kde")) from_json(j.at("kde"), c.kde);
    });
    field("output_dir", [&] { c.output_dir = j.value("output_dir", c.output_dir.string()); });
    if (!problems.empty()) throw ConfigError(std::move(problems));
}

ExperimentConfig load_config(const fs::path& path) {
    ExperimentConfig c = read_json(path).get<ExperimentConfig>();
    const fs::path base = path.parent_path();
    for (fs::path* p : {&c.train_images, &c.train_labels, &c.test_images, &c.test_labels}) {
        if (!p->empty() && p->is_relative()) *p = base / *p;
    }
    return c;
}

std::string dump_config(const ExperimentConfig& c) {
    return json(c).dump(2) + "\n";
}

std::uint64_t cell_seed(std::uint64_t base_seed, ClassId ood_class, int repetition) {
    return base_seed + 1000u * static_cast<std::uint64_t>(ood_class) + static_cast<std::uint64_t>(repetition);
}

fs::path cell_dir(const fs::path& output_dir, ClassId ood_class, int repetition) {
    return output_dir / ("ood_" + std::to_string(ood_class)) / ("rep_" + std::to_string(repetition));
}

CellSummary run_cell(const ExperimentConfig& cfg, std::shared_ptr<const ImageDataset> train,
                     std::shared_ptr<const ImageDataset> test, ClassId ood_class, int repetition) {
    const std::uint64_t seed = cell_seed(cfg.base_seed, ood_class, repetition);
    const fs::path dir = cell_dir(cfg.output_dir, ood_class, repetition);
    fs::create_directories(dir);
    fs::remove(dir / "cell.json");

    const auto task = build_task(train, test, ood_class, cfg.n_support, seed);
    GanTrainConfig gan = cfg.gan;
    gan.seed = seed;
    IBTrainConfig ib = cfg.ib;
    ib.seed = seed;

    auto pre = pretrain_gan(task, gan);
    write_text(dir / "pretrain_log.jsonl", pre.log.to_jsonl());
    save_params(pre.discriminator, dir / "discriminator_pretrained.params");

    auto head = make_embedding_head(cfg.head_mode, cfg.d_proj, seed);
    save_params(head, dir / "head_initial.params");

    const auto before = evaluate_task(pre.discriminator, head, task, cfg.kde);
    write_text(dir / "score_before.json", report_to_json(before).dump() + "\n");

    auto re = retrain_ib(pre.discriminator, head, task, ib);
    write_text(dir / "retrain_log.jsonl", re.log.to_jsonl());
    save_params(re.discriminator, dir / "discriminator.params");
    save_params(re.head, dir / "head.params");
    write_text(dir / "prototypes.json", prototypes_to_json(re.prototypes).dump() + "\n");

    const auto after = evaluate_task(re.discriminator, re.head, task, cfg.kde);
    write_text(dir / "score_after.json", report_to_json(after).dump() + "\n");

    CellSummary s;
    s.ood_class = ood_class;
    s.repetition = repetition;
    s.seed = seed;
    s.auprc_before = before.curve.area;
    s.auprc_after = after.curve.area;
    s.separation_before = before.separation;
    s.separation_after = after.separation;
    s.consumed_labels = pre.log.consumed_labels;
    for (const auto& [label, n] : re.log.consumed_labels) {
        s.consumed_labels[label] += n;
    }

    json consumed = json::object();
    for (const auto& [label, n] : s.consumed_labels) {
        consumed[std::to_string(label)] = n;
    }
    const json marker = {{"schema_version", kCellSchemaVersion},
                         {"ood_class", ood_class},
                         {"repetition", repetition},
                         {"seed", seed},
                         {"consumed_labels", consumed}};
    write_text(dir / "cell.json", marker.dump(2) + "\n");
    return s;
}

namespace {

CellSummary read_cell(const fs::path& dir) {
    const json marker = read_json(dir / "cell.json");
    if (marker.value("schema_version", -1) != kCellSchemaVersion) {
        throw ReportSchemaError("cell marker " + (dir / "cell.json").string() + " has an unsupported schema version");
    }
    CellSummary s;
    s.ood_class = marker.at("ood_class").get<ClassId>();
    s.repetition = marker.at("repetition").get<int>();
    s.seed = marker.at("seed").get<std::uint64_t>();
    for (const auto& [label, n] : marker.at("consumed_labels").items()) {
        s.consumed_labels[std::stoi(label)] = n.get<std::size_t>();
    }
    const auto before = report_from_json(read_json(dir / "score_before.json"), (dir / "score_before.json").string());
    const auto after = report_from_json(read_json(dir / "score_after.json"), (dir / "score_after.json").string());
    s.auprc_before = before.curve.area;
    s.auprc_after = after.curve.area;
    s.separation_before = before.separation;
    s.separation_after = after.separation;
    return s;
}

AggregateReport fold_cells(std::vector<CellSummary> cells) {
    std::sort(cells.begin(), cells.end(), [](const CellSummary& a, const CellSummary& b) {
        return std::tie(a.ood_class, a.repetition) < std::tie(b.ood_class, b.repetition);
    });
    AggregateReport report;
    for (const auto& c : cells) {
        if (report.rows.empty() || report.rows.back().ood_class != c.ood_class) {
            report.rows.push_back(AggregateRow{});
            report.rows.back().ood_class = c.ood_class;
        }
        auto& row = report.rows.back();
        row.repetitions.push_back(c.repetition);
        row.auprc_before.push_back(c.auprc_before);
        row.auprc_after.push_back(c.auprc_after);
        row.separation_before.push_back(c.separation_before);
        row.separation_after.push_back(c.separation_after);
    }
    for (auto& row : report.rows) {
        row.mean_before = mean_of(row.auprc_before);
        row.std_before = std_of(row.auprc_before);
        row.mean_after = mean_of(row.auprc_after);
        row.std_after = std_of(row.auprc_after);
        row.mean_separation_before = mean_of(row.separation_before);
        row.mean_separation_after = mean_of(row.separation_after);
    }
    return report;
}

}  // namespace

std::vector<CellSummary> read_cells(const fs::path& results_dir) {
    if (!fs::is_directory(results_dir)) {
        throw std::runtime_error("results directory not found: " + results_dir.string());
    }
    static const std::regex ood_re("ood_([0-9]+)");
    static const std::regex rep_re("rep_([0-9]+)");
    std::vector<CellSummary> cells;
    for (const auto& ood : fs::directory_iterator(results_dir)) {
        if (!ood.is_directory() || !std::regex_match(ood.path().filename().string(), ood_re)) continue;
        for (const auto& rep : fs::directory_iterator(ood.path())) {
            if (!rep.is_directory() || !std::regex_match(rep.path().filename().string(), rep_re)) continue;
            if (!fs::exists(rep.path() / "cell.json")) continue;
            cells.push_back(read_cell(rep.path()));
        }
    }
    return cells;
}

AggregateReport aggregate_results(const fs::path& results_dir) {
    auto cells = read_cells(results_dir);
    if (cells.empty()) {
        throw std::runtime_error("no completed cells under " + results_dir.string());
    }
    return fold_cells(std::move(cells));
}

std::string AggregateReport::to_json_text() const {
    json j;
    j["schema_version"] = kAggregateSchemaVersion;
    auto& arr = j["classes"] = json::array();
    for (const auto& r : rows) {
        json sep_before = json::array();
        json sep_after = json::array();
        for (double v : r.separation_before) sep_before.push_back(finite_or_tag(v));
        for (double v : r.separation_after) sep_after.push_back(finite_or_tag(v));
        arr.push_back({{"ood_class", r.ood_class},
                       {"repetitions", r.repetitions},
                       {"auprc_before", r.auprc_before},
                       {"auprc_after", r.auprc_after},
                       {"separation_before", sep_before},
                       {"separation_after", sep_after},
                       {"mean_auprc_before", r.mean_before},
                       {"std_auprc_before", r.std_before},
                       {"mean_auprc_after", r.mean_after},
                       {"std_auprc_after", r.std_after},
                       {"mean_separation_before", finite_or_tag(r.mean_separation_before)},
                       {"mean_separation_after", finite_or_tag(r.mean_separation_after)}});
    }
    return j.dump(2) + "\n";
}

std::string AggregateReport::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "ood_class,phase,mean_auprc,std_auprc\n";
    for (const auto& r : rows) {
        out << r.ood_class << ",before," << r.mean_before << ',' << r.std_before << '\n';
        out << r.ood_class << ",after," << r.mean_after << ',' << r.std_after << '\n';
    }
    return out.str();
}

void write_aggregate(const AggregateReport& report, const fs::path& dir) {
    fs::create_directories(dir);
    write_text(dir / "aggregate.json", report.to_json_text());
    write_text(dir / "aggregate.csv", report.to_csv());
}

AggregateReport run_experiments(const ExperimentConfig& input, const RunOptions& opts) {
    ExperimentConfig cfg = input;
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0' &&
                                                        cfg.output_dir.is_relative()) {
        cfg.output_dir = fs::path(root) / cfg.output_dir;
    }
    cfg.validate();
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "config.resolved.json", dump_config(cfg));

    auto train = std::make_shared<const ImageDataset>(parse_idx(cfg.train_images, cfg.train_labels, Split::train));
    auto test = std::make_shared<const ImageDataset>(parse_idx(cfg.test_images, cfg.test_labels, Split::test));

    auto say = [&](const std::string& msg) {
        if (opts.progress) opts.progress(msg);
    };
    for (ClassId c : cfg.ood_classes) {
        for (int r = 0; r < cfg.repetitions; ++r) {
            const fs::path dir = cell_dir(cfg.output_dir, c, r);
            if (opts.resume && fs::exists(dir / "cell.json")) {
                say("skip ood=" + std::to_string(c) + " rep=" + std::to_string(r) + " (complete)");
                continue;
            }
            const auto s = run_cell(cfg, train, test, c, r);
            std::ostringstream msg;
            msg << std::fixed << std::setprecision(4) << "ood=" << c << " rep=" << r << " auprc " << s.auprc_before
                << " -> " << s.auprc_after << "  separation " << s.separation_before << " -> "
                << s.separation_after;
            say(msg.str());
        }
    }
    auto report = aggregate_results(cfg.output_dir);
    write_aggregate(report, cfg.output_dir);
    return report;
}

LoadedCheckpoint load_checkpoint(const ExperimentConfig& cfg, const fs::path& cell, CheckpointPhase phase) {
    const json marker = read_json(cell / "cell.json");
    const auto ood_class = marker.at("ood_class").get<ClassId>();
    const auto seed = marker.at("seed").get<std::uint64_t>();

    auto train = std::make_shared<const ImageDataset>(parse_idx(cfg.train_images, cfg.train_labels, Split::train));
    auto test = std::make_shared<const ImageDataset>(parse_idx(cfg.test_images, cfg.test_labels, Split::test));
    auto task = build_task(train, test, ood_class, cfg.n_support, seed);

    Discriminator disc;
    EmbeddingHead head(cfg.head_mode, cfg.d_proj);
    if (phase == CheckpointPhase::before) {
        load_params(disc, cell / "discriminator_pretrained.params");
        load_params(head, cell / "head_initial.params");
    } else {
        load_params(disc, cell / "discriminator.params");
        load_params(head, cell / "head.params");
    }
    disc->eval();
    head->eval();
    return LoadedCheckpoint{std::move(task), disc, head};
}

}  // namespace ibdd
