#pragma once

#include "ibdd/data_ingest.hpp"
#include "ibdd/ib_loss.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <memory>
#include <random>
#include <string>

namespace fixture {

inline ibdd::Matrix to_matrix(const oracle::Rows& rows) {
    ibdd::Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    return m;
}

inline oracle::Rows to_rows(const ibdd::Matrix& m) {
    oracle::Rows rows(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = m(i, c);
    return rows;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

// Synthetic image dataset: per_class images of each label in [0, classes),
// pixel bytes drawn uniformly so the IDX encoding is exact.
inline ibdd::ImageDataset synthetic_images(int classes, std::size_t per_class, unsigned seed,
                                           ibdd::Split split = ibdd::Split::train) {
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> byte(0, 255);
    ibdd::ImageDataset ds;
    ds.split = split;
    for (std::size_t i = 0; i < per_class; ++i) {
        for (int c = 0; c < classes; ++c) {
            ds.labels.push_back(c);
            for (std::size_t p = 0; p < ds.image_size(); ++p) {
                ds.pixels.push_back(ibdd::byte_to_intensity(static_cast<std::uint8_t>(byte(rng))));
            }
        }
    }
    return ds;
}

// Per-test scratch directory, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("ibdd_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

}  // namespace fixture
