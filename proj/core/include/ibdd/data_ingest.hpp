#pragma once

// MNIST-format (IDX) loading, leave-one-class-out task construction and
// deterministic mini-batch planning.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibdd {

using ClassId = int;

class DataError : public std::runtime_error {
public:
    enum class Kind { format, consistency, insufficient_data, empty_input, io };
    DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

enum class Split { train, test };

// Images stored row-major, one H*W*C block per sample, intensities in [-1, 1].
struct ImageDataset {
    std::size_t rows = 28;
    std::size_t cols = 28;
    std::size_t channels = 1;
    std::vector<float> pixels;
    std::vector<ClassId> labels;
    Split split = Split::train;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t image_size() const noexcept { return rows * cols * channels; }
    std::span<const float> image(std::size_t i) const {
        return {pixels.data() + i * image_size(), image_size()};
    }
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Pixel bytes are mapped by 2*v/255 - 1.
ImageDataset parse_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path,
                       Split split = Split::train);

// Inverse of parse_idx; reproduces the original bytes for any parsed file.
void write_idx(const ImageDataset& dataset,
               const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

float byte_to_intensity(std::uint8_t v) noexcept;
std::uint8_t intensity_to_byte(float x) noexcept;

/// One leave-one-class-out experiment. Samples are referenced by index into
/// the shared train/test datasets, which stay immutable.
struct OodTask {
    ClassId ood_class = 0;
    std::vector<ClassId> in_dist_classes;
    std::shared_ptr<const ImageDataset> train;
    std::shared_ptr<const ImageDataset> test;
    std::vector<std::size_t> pretrain_pool;    // indices into train, unlabeled use
    std::vector<std::size_t> support_indices;  // indices into train, n per class
    std::size_t n_support = 0;
    std::uint64_t seed = 0;

    std::size_t num_classes() const noexcept { return in_dist_classes.size(); }
    // Position of a raw label within in_dist_classes, or -1 for the OOD class.
    int class_index(ClassId label) const noexcept;
    std::vector<int> support_class_indices() const;
};

OodTask build_task(std::shared_ptr<const ImageDataset> train,
                   std::shared_ptr<const ImageDataset> test,
                   ClassId ood_class,
                   std::size_t n_support,
                   std::uint64_t seed);

struct BatchPlan {
    std::size_t batch_size = 128;
    std::uint64_t shuffle_seed = 0;
    bool drop_last = false;
};

// Index batches over [0, n) for one epoch. The permutation is a pure function
// of (shuffle_seed, epoch).
std::vector<std::vector<std::size_t>> iterate_batches(std::size_t n, const BatchPlan& plan,
                                                      std::uint64_t epoch = 0);

// Same, over a pool of dataset indices; batches contain pool entries.
std::vector<std::vector<std::size_t>> iterate_batches(std::span<const std::size_t> pool,
                                                      const BatchPlan& plan,
                                                      std::uint64_t epoch = 0);

}  // namespace ibdd
