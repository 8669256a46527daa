#include "ibdd/nets.hpp"

#include "../support/fixtures.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

using namespace ibdd;
namespace fs = std::filesystem;

namespace {

std::vector<char> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

torch::Tensor images(std::int64_t n, std::uint64_t seed) {
    torch::manual_seed(seed);
    return torch::rand({n, 1, 28, 28}) * 2 - 1;
}

}  // namespace

TEST(Generator, ShapeAndRange) {
    torch::manual_seed(1);
    Generator g;
    init_params(*g);
    const auto out = generate(g, torch::randn({4, kNoiseDim}) * 5);
    EXPECT_EQ(out.sizes(), (std::vector<std::int64_t>{4, 1, 28, 28}));
    EXPECT_LE(out.abs().max().item<float>(), 1.0f);
}

TEST(Generator, ZeroNoiseDeterministicInEvalMode) {
    torch::manual_seed(2);
    Generator g;
    init_params(*g);
    g->eval();
    const auto z = torch::zeros({1, kNoiseDim});
    EXPECT_TRUE(torch::equal(generate(g, z), generate(g, z)));
}

TEST(Generator, WrongNoiseWidthIsAShapeError) {
    Generator g;
    EXPECT_THROW(generate(g, torch::zeros({2, 99})), ShapeError);
}

TEST(Discriminator, FeatureWidthAndProbabilityRange) {
    torch::manual_seed(3);
    Discriminator d;
    init_params(*d);
    d->eval();
    EXPECT_EQ(d->features(images(1, 4)).sizes(), (std::vector<std::int64_t>{1, kFeatureDim}));
    EXPECT_EQ(kFeatureDim, 3136);
    const auto p = discriminate(d, images(6, 5));
    EXPECT_EQ(p.sizes(), (std::vector<std::int64_t>{6}));
    EXPECT_GT(p.min().item<float>(), 0.0f);
    EXPECT_LT(p.max().item<float>(), 1.0f);
}

TEST(Discriminator, SingleImageInEvalMode) {
    Discriminator d;
    d->eval();
    EXPECT_NO_THROW(discriminate(d, images(1, 6)));
}

TEST(Discriminator, WrongImageSizeIsAShapeError) {
    Discriminator d;
    EXPECT_THROW(discriminate(d, torch::zeros({2, 1, 32, 32})), ShapeError);
    EXPECT_THROW(discriminate(d, torch::zeros({2, 3, 28, 28})), ShapeError);
}

TEST(Embed, FlattenAndProjectedWidths) {
    Discriminator d;
    d->eval();
    EmbeddingHead flat(EmbeddingMode::flatten);
    EmbeddingHead proj(EmbeddingMode::projected, 64);
    const auto x = images(10, 7);
    EXPECT_EQ(embed(d, flat, x).sizes(), (std::vector<std::int64_t>{10, 3136}));
    EXPECT_EQ(embed(d, proj, x).sizes(), (std::vector<std::int64_t>{10, 64}));
    EXPECT_THROW(EmbeddingHead(EmbeddingMode::projected, 1), ShapeError);
}

TEST(Embed, DuplicateRowsEmbedIdentically) {
    Discriminator d;
    d->eval();
    EmbeddingHead h(EmbeddingMode::projected, 16);
    const auto one = images(1, 8);
    const auto z = embed(d, h, torch::cat({one, one, one}));
    EXPECT_TRUE(torch::equal(z[0], z[1]));
    EXPECT_TRUE(torch::equal(z[1], z[2]));
}

TEST(Params, RoundTripIsExactAndStable) {
    fixture::TempDir dir("params");
    torch::manual_seed(9);
    Discriminator d;
    init_params(*d);
    // populate batch-norm running statistics
    d->train();
    d->features(images(8, 10));
    d->eval();
    save_params(d, dir.path / "a.params");

    Discriminator e;
    load_params(e, dir.path / "a.params");
    e->eval();
    const auto x = images(5, 11);
    EXPECT_TRUE(torch::equal(d->features(x), e->features(x)));
    EXPECT_EQ(param_digest(*d), param_digest(*e));

    save_params(e, dir.path / "b.params");
    EXPECT_EQ(bytes_of(dir.path / "a.params"), bytes_of(dir.path / "b.params"));
}

TEST(Params, TruncatedFileIsRejected) {
    fixture::TempDir dir("params_trunc");
    EmbeddingHead h(EmbeddingMode::projected, 8);
    save_params(h, dir.path / "h.params");
    fs::resize_file(dir.path / "h.params", fs::file_size(dir.path / "h.params") - 3);
    EmbeddingHead g(EmbeddingMode::projected, 8);
    EXPECT_THROW(load_params(g, dir.path / "h.params"), ParamFileError);
}

TEST(Params, TopologyMismatchIsRejected) {
    fixture::TempDir dir("params_topo");
    Generator g;
    save_params(g, dir.path / "g.params");
    Discriminator d;
    EXPECT_THROW(load_params(d, dir.path / "g.params"), ParamFileError);

    EmbeddingHead h8(EmbeddingMode::projected, 8);
    save_params(h8, dir.path / "h8.params");
    EmbeddingHead h16(EmbeddingMode::projected, 16);
    EXPECT_THROW(load_params(h16, dir.path / "h8.params"), ParamFileError);
}

TEST(Params, FailedLoadLeavesTargetUntouched) {
    fixture::TempDir dir("params_atomic");
    torch::manual_seed(12);
    Discriminator d;
    init_params(*d);
    save_params(d, dir.path / "d.params");
    fs::resize_file(dir.path / "d.params", fs::file_size(dir.path / "d.params") - 1);
    Discriminator e;
    init_params(*e);
    const auto before = param_digest(*e);
    EXPECT_THROW(load_params(e, dir.path / "d.params"), ParamFileError);
    EXPECT_EQ(param_digest(*e), before);
}

TEST(Params, VersionFieldIsChecked) {
    fixture::TempDir dir("params_version");
    EmbeddingHead h(EmbeddingMode::projected, 4);
    save_params(h, dir.path / "h.params");
    {
        std::fstream f(dir.path / "h.params", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);  // version follows the 8-byte magic
        const std::uint32_t bogus = kParamFormatVersion + 1;
        f.write(reinterpret_cast<const char*>(&bogus), sizeof bogus);
    }
    EXPECT_THROW(load_params(h, dir.path / "h.params"), ParamFileError);
}

TEST(Init, DcganStatistics) {
    torch::manual_seed(13);
    Discriminator d;
    init_params(*d);
    for (const auto& item : d->named_parameters()) {
        if (item.key().find("bias") != std::string::npos) {
            EXPECT_EQ(item.value().abs().max().item<float>(), 0.0f) << item.key();
        }
    }
    Generator g;
    init_params(*g);
    const auto w = g->fc->weight;
    EXPECT_NEAR(w.std().item<float>(), 0.02f, 0.001f);
    EXPECT_NEAR(w.mean().item<float>(), 0.0f, 0.001f);
}
