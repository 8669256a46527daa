#include "ibdd/nets.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace ibdd {

namespace nn = torch::nn;

static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");

GeneratorImpl::GeneratorImpl() { reset(); }

void GeneratorImpl::reset() {
    fc = register_module("fc", nn::Linear(kNoiseDim, 7 * 7 * 512));
    bn0 = register_module("bn0", nn::BatchNorm1d(7 * 7 * 512));
    const auto leaky = nn::LeakyReLUOptions().negative_slope(kLeakySlope);
    deconv = register_module(
        "deconv",
        nn::Sequential(
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(512, 256, 3).stride(2).padding(1).output_padding(1)),
            nn::BatchNorm2d(256), nn::LeakyReLU(leaky),
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(256, 128, 3).stride(1).padding(1)),
            nn::BatchNorm2d(128), nn::LeakyReLU(leaky),
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(128, 64, 3).stride(1).padding(1)),
            nn::BatchNorm2d(64), nn::LeakyReLU(leaky),
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(64, 1, 3).stride(2).padding(1).output_padding(1)),
            nn::Tanh()));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& noise) {
    auto x = torch::relu(bn0(fc(noise)));
    return deconv->forward(x.view({-1, 512, 7, 7}));
}

DiscriminatorImpl::DiscriminatorImpl() { reset(); }

void DiscriminatorImpl::reset() {
    const auto leaky = nn::LeakyReLUOptions().negative_slope(kLeakySlope);
    conv = register_module(
        "conv",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(1, 8, 3).stride(1).padding(1)), nn::BatchNorm2d(8),
                       nn::LeakyReLU(leaky),
                       nn::Conv2d(nn::Conv2dOptions(8, 16, 3).stride(2).padding(1)), nn::BatchNorm2d(16),
                       nn::LeakyReLU(leaky),
                       nn::Conv2d(nn::Conv2dOptions(16, 32, 3).stride(1).padding(1)), nn::BatchNorm2d(32),
                       nn::LeakyReLU(leaky),
                       nn::Conv2d(nn::Conv2dOptions(32, 64, 3).stride(2).padding(1)), nn::BatchNorm2d(64),
                       nn::LeakyReLU(leaky)));
    head = register_module("head", nn::Linear(kFeatureDim, 1));
}

torch::Tensor DiscriminatorImpl::features(const torch::Tensor& images) {
    return conv->forward(images).flatten(1);
}

torch::Tensor DiscriminatorImpl::logits(const torch::Tensor& images) { return head(features(images)); }

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) { return torch::sigmoid(logits(images)); }

EmbeddingHeadImpl::EmbeddingHeadImpl(EmbeddingMode mode, std::int64_t d_proj) : mode_(mode), d_proj_(d_proj) {
    if (mode == EmbeddingMode::projected && d_proj < 2) {
        throw ShapeError("projected embedding dimension must be at least 2");
    }
    reset();
}

void EmbeddingHeadImpl::reset() {
    if (mode_ == EmbeddingMode::projected) {
        proj = register_module("proj", nn::Linear(kFeatureDim, d_proj_));
    }
}

torch::Tensor EmbeddingHeadImpl::forward(const torch::Tensor& features) {
    if (features.dim() != 2 || features.size(1) != kFeatureDim) {
        throw ShapeError("embedding head expects N x 3136 features");
    }
    return mode_ == EmbeddingMode::flatten ? features : proj(features);
}

void init_params(nn::Module& module) {
    torch::NoGradGuard no_grad;
    for (auto& m : module.modules(/*include_self=*/true)) {
        if (auto* lin = m->as<nn::Linear>()) {
            lin->weight.normal_(0.0, 0.02);
            lin->bias.zero_();
        } else if (auto* conv = m->as<nn::Conv2d>()) {
            conv->weight.normal_(0.0, 0.02);
            conv->bias.zero_();
        } else if (auto* deconv = m->as<nn::ConvTranspose2d>()) {
            deconv->weight.normal_(0.0, 0.02);
            deconv->bias.zero_();
        } else if (auto* bn2 = m->as<nn::BatchNorm2d>()) {
            bn2->weight.normal_(1.0, 0.02);
            bn2->bias.zero_();
        } else if (auto* bn1 = m->as<nn::BatchNorm1d>()) {
            bn1->weight.normal_(1.0, 0.02);
            bn1->bias.zero_();
        }
    }
}

void check_image_batch(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != kImageSide ||
        images.size(3) != kImageSide) {
        throw ShapeError("expected an N x 1 x 28 x 28 image batch, got " +
                         c10::str(images.sizes()));
    }
}

torch::Tensor generate(Generator& gen, const torch::Tensor& noise) {
    if (noise.dim() != 2 || noise.size(1) != kNoiseDim) {
        throw ShapeError("expected N x 100 noise, got " + c10::str(noise.sizes()));
    }
    return gen->forward(noise);
}

torch::Tensor discriminate(Discriminator& disc, const torch::Tensor& images) {
    check_image_batch(images);
    return disc->forward(images).squeeze(1);
}

torch::Tensor embed(Discriminator& disc, EmbeddingHead& head, const torch::Tensor& images) {
    check_image_batch(images);
    return head->forward(disc->features(images));
}

std::string topology_tag(const Generator&) { return "generator/table1"; }
std::string topology_tag(const Discriminator&) { return "discriminator/table1"; }
std::string topology_tag(const EmbeddingHead& head) {
    return head->mode() == EmbeddingMode::flatten ? "embedding_head/flatten"
                                                  : "embedding_head/projected/" + std::to_string(head->dim());
}

// ---------------------------------------------------------------------------
// Parameter files

namespace {

constexpr std::array<char, 8> kMagic{'I', 'B', 'D', 'D', 'P', 'A', 'R', 'M'};

enum class DType : std::uint8_t { f32 = 0, i64 = 1 };

std::vector<std::pair<std::string, torch::Tensor>> named_state(const nn::Module& module) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : module.named_parameters(true)) {
        out.emplace_back(p.key(), p.value());
    }
    for (const auto& b : module.named_buffers(true)) {
        out.emplace_back(b.key(), b.value());
    }
    return out;
}

template <class T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
    put(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    Reader(std::vector<char> bytes, std::filesystem::path path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <class T>
    T get() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
    void read(void* dst, std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw ParamFileError("truncated parameter file " + path_.string());
        }
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    std::vector<char> bytes_;
    std::filesystem::path path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_params(const nn::Module& module, const std::string& topology, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ParamFileError("cannot write " + path.string());
    }
    const auto state = named_state(module);
    out.write(kMagic.data(), kMagic.size());
    put(out, kParamFormatVersion);
    put_string(out, topology);
    put(out, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, tensor] : state) {
        const auto t = tensor.detach().cpu().contiguous();
        put_string(out, name);
        DType dtype;
        if (t.scalar_type() == torch::kFloat32) {
            dtype = DType::f32;
        } else if (t.scalar_type() == torch::kInt64) {
            dtype = DType::i64;
        } else {
            throw ParamFileError("unsupported tensor dtype for " + name);
        }
        put(out, static_cast<std::uint8_t>(dtype));
        put(out, static_cast<std::uint32_t>(t.dim()));
        for (auto s : t.sizes()) {
            put(out, static_cast<std::int64_t>(s));
        }
        out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    }
    if (!out) {
        throw ParamFileError("failed writing " + path.string());
    }
}

void load_params(nn::Module& module, const std::string& topology, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ParamFileError("cannot open " + path.string());
    }
    Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);

    std::array<char, 8> magic{};
    r.read(magic.data(), magic.size());
    if (magic != kMagic) {
        throw ParamFileError("not a parameter file: " + path.string());
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kParamFormatVersion) {
        throw ParamFileError("parameter file version " + std::to_string(version) + " unsupported in " +
                             path.string());
    }
    const auto stored_topology = r.get_string();
    if (stored_topology != topology) {
        throw ParamFileError("topology mismatch in " + path.string() + ": file holds '" + stored_topology +
                             "', expected '" + topology + "'");
    }
    auto state = named_state(module);
    const auto count = r.get<std::uint32_t>();
    if (count != state.size()) {
        throw ParamFileError("tensor count mismatch in " + path.string());
    }

    // Decode everything first so a bad file leaves the module untouched.
    std::vector<torch::Tensor> decoded;
    for (const auto& [name, tensor] : state) {
        const auto stored_name = r.get_string();
        if (stored_name != name) {
            throw ParamFileError("expected tensor '" + name + "', found '" + stored_name + "' in " + path.string());
        }
        const auto dtype = static_cast<DType>(r.get<std::uint8_t>());
        const auto ndim = r.get<std::uint32_t>();
        std::vector<std::int64_t> shape(ndim);
        for (auto& s : shape) {
            s = r.get<std::int64_t>();
        }
        if (shape != tensor.sizes().vec()) {
            throw ParamFileError("shape mismatch for '" + name + "' in " + path.string());
        }
        const auto st = dtype == DType::f32 ? torch::kFloat32 : torch::kInt64;
        if ((dtype != DType::f32 && dtype != DType::i64) || st != tensor.scalar_type()) {
            throw ParamFileError("dtype mismatch for '" + name + "' in " + path.string());
        }
        auto t = torch::empty(shape, torch::TensorOptions().dtype(st));
        r.read(t.data_ptr(), t.nbytes());
        decoded.push_back(std::move(t));
    }
    if (!r.at_end()) {
        throw ParamFileError("trailing bytes in " + path.string());
    }
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < state.size(); ++i) {
        state[i].second.copy_(decoded[i]);
    }
}

std::uint64_t param_digest(const nn::Module& module) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, tensor] : named_state(module)) {
        const auto t = tensor.detach().cpu().contiguous();
        const auto* p = static_cast<const unsigned char*>(t.data_ptr());
        for (std::size_t i = 0; i < t.nbytes(); ++i) {
            h = (h ^ p[i]) * 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace ibdd
