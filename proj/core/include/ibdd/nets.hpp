#pragma once

// Generator and discriminator networks for 28x28x1 images, the
// discriminator's embedding function, and a versioned parameter file format.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>

namespace ibdd {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ParamFileError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::int64_t kNoiseDim = 100;
inline constexpr std::int64_t kImageSide = 28;
inline constexpr std::int64_t kFeatureDim = 64 * 7 * 7;
inline constexpr double kLeakySlope = 0.2;

// Linear(100, 7*7*512) -> BN1d -> ReLU -> reshape 512x7x7
// -> ConvT(512,256,3,s2,p1,op1) -> BN -> LeakyReLU   (14x14)
// -> ConvT(256,128,3,s1,p1)     -> BN -> LeakyReLU   (14x14)
// -> ConvT(128,64,3,s1,p1)      -> BN -> LeakyReLU   (14x14)
// -> ConvT(64,1,3,s2,p1,op1)    -> tanh              (28x28)
class GeneratorImpl : public torch::nn::Cloneable<GeneratorImpl> {
public:
    GeneratorImpl();
    void reset() override;
    torch::Tensor forward(const torch::Tensor& noise);

    torch::nn::Linear fc{nullptr};
    torch::nn::BatchNorm1d bn0{nullptr};
    torch::nn::Sequential deconv{nullptr};
};
TORCH_MODULE(Generator);

// Conv stack 1->8->16->32->64 (kernel 3, strides 1,2,1,2, padding 1), each
// followed by BN2d and LeakyReLU(0.2): 28 -> 28 -> 14 -> 14 -> 7. The head
// Linear(64*7*7, 1) + sigmoid discriminates real from generated images.
class DiscriminatorImpl : public torch::nn::Cloneable<DiscriminatorImpl> {
public:
    DiscriminatorImpl();
    void reset() override;

    torch::Tensor features(const torch::Tensor& images);  // N x 3136
    torch::Tensor logits(const torch::Tensor& images);    // N x 1
    torch::Tensor forward(const torch::Tensor& images);   // N x 1 in (0, 1)

    torch::nn::Sequential conv{nullptr};
    torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Discriminator);

enum class EmbeddingMode { flatten, projected };

// Maps the 3136 conv features to the embedded space. flatten is the identity;
// projected is a trainable Linear(3136, d_proj).
class EmbeddingHeadImpl : public torch::nn::Cloneable<EmbeddingHeadImpl> {
public:
    explicit EmbeddingHeadImpl(EmbeddingMode mode = EmbeddingMode::projected, std::int64_t d_proj = 128);
    void reset() override;
    torch::Tensor forward(const torch::Tensor& features);

    EmbeddingMode mode() const noexcept { return mode_; }
    std::int64_t dim() const noexcept { return mode_ == EmbeddingMode::flatten ? kFeatureDim : d_proj_; }

    torch::nn::Linear proj{nullptr};

private:
    EmbeddingMode mode_;
    std::int64_t d_proj_;
};
TORCH_MODULE(EmbeddingHead);

/// normal(0, 0.02) weights for conv/affine layers, BN scale normal(1, 0.02),
/// zero offsets. Draws from the current torch generator.
void init_params(torch::nn::Module& module);

torch::Tensor generate(Generator& gen, const torch::Tensor& noise);
torch::Tensor discriminate(Discriminator& disc, const torch::Tensor& images);
torch::Tensor embed(Discriminator& disc, EmbeddingHead& head, const torch::Tensor& images);

void check_image_batch(const torch::Tensor& images);

// Parameter files: "IBDDPARM" magic, u32 format version, topology tag, then
// one record per parameter/buffer (name, dtype, shape, little-endian payload).
inline constexpr std::uint32_t kParamFormatVersion = 1;

std::string topology_tag(const Generator&);
std::string topology_tag(const Discriminator&);
std::string topology_tag(const EmbeddingHead&);

void save_params(const torch::nn::Module& module, const std::string& topology,
                 const std::filesystem::path& path);
void load_params(torch::nn::Module& module, const std::string& topology,
                 const std::filesystem::path& path);

template <class Net>
void save_params(const Net& net, const std::filesystem::path& path) {
    save_params(*net, topology_tag(net), path);
}
template <class Net>
void load_params(Net& net, const std::filesystem::path& path) {
    load_params(*net, topology_tag(net), path);
}

/// FNV-1a over every parameter and buffer, in registration order.
std::uint64_t param_digest(const torch::nn::Module& module);

}  // namespace ibdd
