#include "ibdd/data_ingest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>

namespace ibdd {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(DataError::Kind::io, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                        const std::filesystem::path& path) {
    if (offset + 4 > bytes.size()) {
        throw DataError(DataError::Kind::format, "truncated IDX header in " + path.string());
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                                static_cast<char>(v >> 8), static_cast<char>(v)};
    out.write(b.data(), b.size());
}

}  // namespace

float byte_to_intensity(std::uint8_t v) noexcept {
    return static_cast<float>(v) * (2.0f / 255.0f) - 1.0f;
}

std::uint8_t intensity_to_byte(float x) noexcept {
    const float v = std::round((x + 1.0f) * 127.5f);
    return static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
}

ImageDataset parse_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path, Split split) {
    const auto img = read_file(images_path);
    const auto lbl = read_file(labels_path);

    if (read_be32(img, 0, images_path) != kIdxImagesMagic) {
        throw DataError(DataError::Kind::format, "bad IDX image magic in " + images_path.string());
    }
    if (read_be32(lbl, 0, labels_path) != kIdxLabelsMagic) {
        throw DataError(DataError::Kind::format, "bad IDX label magic in " + labels_path.string());
    }
    const std::size_t n = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    const std::size_t n_labels = read_be32(lbl, 4, labels_path);

    if (n != n_labels) {
        throw DataError(DataError::Kind::consistency,
                        "image count " + std::to_string(n) + " in " + images_path.string() +
                            " does not match label count " + std::to_string(n_labels) + " in " +
                            labels_path.string());
    }
    if (img.size() != 16 + n * rows * cols) {
        throw DataError(DataError::Kind::format, "payload size mismatch in " + images_path.string());
    }
    if (lbl.size() != 8 + n) {
        throw DataError(DataError::Kind::format, "payload size mismatch in " + labels_path.string());
    }

    ImageDataset ds;
    ds.rows = rows;
    ds.cols = cols;
    ds.channels = 1;
    ds.split = split;
    ds.pixels.resize(n * rows * cols);
    std::transform(img.begin() + 16, img.end(), ds.pixels.begin(), byte_to_intensity);
    ds.labels.assign(lbl.begin() + 8, lbl.end());
    return ds;
}

void write_idx(const ImageDataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
    if (dataset.channels != 1) {
        throw DataError(DataError::Kind::format, "IDX images must be single-channel");
    }
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lbl(labels_path, std::ios::binary);
    if (!img || !lbl) {
        throw DataError(DataError::Kind::io, "cannot write " + images_path.string());
    }
    put_be32(img, kIdxImagesMagic);
    put_be32(img, static_cast<std::uint32_t>(dataset.size()));
    put_be32(img, static_cast<std::uint32_t>(dataset.rows));
    put_be32(img, static_cast<std::uint32_t>(dataset.cols));
    std::vector<char> bytes(dataset.pixels.size());
    std::transform(dataset.pixels.begin(), dataset.pixels.end(), bytes.begin(),
                   [](float x) { return static_cast<char>(intensity_to_byte(x)); });
    img.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

    put_be32(lbl, kIdxLabelsMagic);
    put_be32(lbl, static_cast<std::uint32_t>(dataset.size()));
    for (ClassId y : dataset.labels) {
        lbl.put(static_cast<char>(y));
    }
}

int OodTask::class_index(ClassId label) const noexcept {
    const auto it = std::find(in_dist_classes.begin(), in_dist_classes.end(), label);
    return it == in_dist_classes.end() ? -1 : static_cast<int>(it - in_dist_classes.begin());
}

std::vector<int> OodTask::support_class_indices() const {
    std::vector<int> out;
    out.reserve(support_indices.size());
    for (std::size_t i : support_indices) {
        out.push_back(class_index(train->labels[i]));
    }
    return out;
}

OodTask build_task(std::shared_ptr<const ImageDataset> train,
                   std::shared_ptr<const ImageDataset> test, ClassId ood_class,
                   std::size_t n_support, std::uint64_t seed) {
    if (!train || !test || train->size() == 0 || test->size() == 0) {
        throw DataError(DataError::Kind::empty_input, "build_task needs nonempty train and test splits");
    }
    const std::set<ClassId> train_classes(train->labels.begin(), train->labels.end());
    const std::set<ClassId> test_classes(test->labels.begin(), test->labels.end());
    if (!train_classes.contains(ood_class) || !test_classes.contains(ood_class)) {
        throw DataError(DataError::Kind::insufficient_data,
                        "OOD class " + std::to_string(ood_class) + " missing from train or test split");
    }

    OodTask task;
    task.ood_class = ood_class;
    task.n_support = n_support;
    task.seed = seed;
    task.train = train;
    task.test = test;
    for (ClassId c : train_classes) {
        if (c != ood_class) {
            task.in_dist_classes.push_back(c);
        }
    }

    for (std::size_t i = 0; i < train->size(); ++i) {
        if (train->labels[i] != ood_class) {
            task.pretrain_pool.push_back(i);
        }
    }

    std::mt19937_64 rng(seed);
    for (ClassId c : task.in_dist_classes) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < train->size(); ++i) {
            if (train->labels[i] == c) {
                members.push_back(i);
            }
        }
        if (members.size() < n_support) {
            throw DataError(DataError::Kind::insufficient_data,
                            "class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                                " training examples, fewer than n_support=" + std::to_string(n_support));
        }
        // partial Fisher-Yates: the first n_support slots are a uniform sample
        for (std::size_t k = 0; k < n_support; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, members.size() - 1);
            std::swap(members[k], members[pick(rng)]);
        }
        task.support_indices.insert(task.support_indices.end(), members.begin(),
                                    members.begin() + static_cast<std::ptrdiff_t>(n_support));
    }
    return task;
}

std::vector<std::vector<std::size_t>> iterate_batches(std::size_t n, const BatchPlan& plan,
                                                      std::uint64_t epoch) {
    if (n == 0) {
        throw DataError(DataError::Kind::empty_input, "cannot batch an empty dataset");
    }
    if (plan.batch_size == 0) {
        throw DataError(DataError::Kind::consistency, "batch_size must be positive");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(plan.shuffle_seed),
                      static_cast<std::uint32_t>(plan.shuffle_seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += plan.batch_size) {
        const std::size_t end = std::min(n, start + plan.batch_size);
        if (plan.drop_last && end - start < plan.batch_size) {
            break;
        }
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

std::vector<std::vector<std::size_t>> iterate_batches(std::span<const std::size_t> pool,
                                                      const BatchPlan& plan, std::uint64_t epoch) {
    auto batches = iterate_batches(pool.size(), plan, epoch);
    for (auto& batch : batches) {
        for (auto& i : batch) {
            i = pool[i];
        }
    }
    return batches;
}

}  // namespace ibdd
