#include "ibdd/data_ingest.hpp"

#include "../support/fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

using namespace ibdd;
namespace fs = std::filesystem;

namespace {

std::vector<char> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

// Hand-assembled IDX pair, independent of write_idx.
void write_raw_idx(const fs::path& images, const fs::path& labels, std::uint32_t rows, std::uint32_t cols,
                   const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& ys,
                   std::uint32_t image_magic = 0x803, std::uint32_t label_magic = 0x801) {
    std::vector<std::uint8_t> a;
    put_u32(a, image_magic);
    put_u32(a, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
    put_u32(a, rows);
    put_u32(a, cols);
    a.insert(a.end(), pixels.begin(), pixels.end());
    std::ofstream(images, std::ios::binary).write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size()));
    std::vector<std::uint8_t> b;
    put_u32(b, label_magic);
    put_u32(b, static_cast<std::uint32_t>(ys.size()));
    b.insert(b.end(), ys.begin(), ys.end());
    std::ofstream(labels, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::shared_ptr<const ImageDataset> shared(ImageDataset ds) {
    return std::make_shared<const ImageDataset>(std::move(ds));
}

}  // namespace

TEST(Idx, KnownBytesMapToIntensities) {
    fixture::TempDir dir("idx_known");
    // three 1x1 images
    write_raw_idx(dir.path / "i", dir.path / "l", 1, 1, {0, 127, 255}, {4, 5, 6});
    const auto ds = parse_idx(dir.path / "i", dir.path / "l");
    ASSERT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.pixels[0], -1.0f);
    EXPECT_NEAR(ds.pixels[1], -0.00392, 1e-5);
    EXPECT_NEAR(ds.pixels[1], 2.0 * 127.0 / 255.0 - 1.0, 1e-7);
    EXPECT_EQ(ds.pixels[2], 1.0f);
    EXPECT_EQ(ds.labels, (std::vector<ClassId>{4, 5, 6}));
}

TEST(Idx, EveryByteSurvivesTheIntensityMap) {
    for (int v = 0; v < 256; ++v) {
        const float x = byte_to_intensity(static_cast<std::uint8_t>(v));
        EXPECT_GE(x, -1.0f);
        EXPECT_LE(x, 1.0f);
        EXPECT_EQ(intensity_to_byte(x), v);
    }
}

TEST(Idx, RoundTripIsBitExact) {
    fixture::TempDir dir("idx_roundtrip");
    std::vector<std::uint8_t> px;
    for (int i = 0; i < 256 * 4; ++i) px.push_back(static_cast<std::uint8_t>((i * 37 + 11) % 256));
    std::vector<std::uint8_t> ys;
    for (int i = 0; i < 64; ++i) ys.push_back(static_cast<std::uint8_t>(i % 10));
    write_raw_idx(dir.path / "a", dir.path / "b", 4, 4, px, ys);
    const auto ds = parse_idx(dir.path / "a", dir.path / "b");
    write_idx(ds, dir.path / "a2", dir.path / "b2");
    EXPECT_EQ(bytes_of(dir.path / "a"), bytes_of(dir.path / "a2"));
    EXPECT_EQ(bytes_of(dir.path / "b"), bytes_of(dir.path / "b2"));
}

TEST(Idx, BadMagicNamesTheFile) {
    fixture::TempDir dir("idx_magic");
    write_raw_idx(dir.path / "imgs", dir.path / "lbls", 1, 1, {1, 2}, {0, 1}, 0x804);
    try {
        parse_idx(dir.path / "imgs", dir.path / "lbls");
        FAIL() << "expected a format error";
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::format);
        EXPECT_NE(std::string(e.what()).find("imgs"), std::string::npos);
    }
}

TEST(Idx, CountMismatchIsAConsistencyError) {
    fixture::TempDir dir("idx_count");
    write_raw_idx(dir.path / "i", dir.path / "l", 1, 1, {1, 2, 3}, {0, 1});
    try {
        parse_idx(dir.path / "i", dir.path / "l");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::consistency);
    }
}

TEST(Idx, TruncatedPayloadIsAFormatError) {
    fixture::TempDir dir("idx_trunc");
    write_raw_idx(dir.path / "i", dir.path / "l", 2, 2, {1, 2, 3, 4, 5, 6, 7, 8}, {0, 1});
    fs::resize_file(dir.path / "i", fs::file_size(dir.path / "i") - 1);
    EXPECT_THROW(parse_idx(dir.path / "i", dir.path / "l"), DataError);
}

TEST(Idx, MissingFileIsAnIoError) {
    try {
        parse_idx("/nonexistent/a", "/nonexistent/b");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::io);
    }
}

TEST(BuildTask, LeaveOneOutSupportShape) {
    auto train = shared(fixture::synthetic_images(10, 20, 1));
    auto test = shared(fixture::synthetic_images(10, 5, 2, Split::test));
    const auto t = build_task(train, test, 8, 10, 0);
    EXPECT_EQ(t.support_indices.size(), 90u);
    EXPECT_EQ(t.in_dist_classes.size(), 9u);
    EXPECT_TRUE(std::find(t.in_dist_classes.begin(), t.in_dist_classes.end(), 8) == t.in_dist_classes.end());
    std::map<ClassId, int> per_class;
    for (auto i : t.support_indices) per_class[train->labels[i]]++;
    EXPECT_EQ(per_class.count(8), 0u);
    for (const auto& [c, n] : per_class) EXPECT_EQ(n, 10) << c;
    EXPECT_EQ(std::set<std::size_t>(t.support_indices.begin(), t.support_indices.end()).size(), 90u);
}

TEST(BuildTask, PoolExcludesOodAndTestKeepsIt) {
    auto train = shared(fixture::synthetic_images(10, 12, 1));
    auto test = shared(fixture::synthetic_images(10, 3, 2, Split::test));
    for (ClassId ood = 0; ood < 10; ++ood) {
        const auto t = build_task(train, test, ood, 5, 42);
        for (auto i : t.pretrain_pool) ASSERT_NE(train->labels[i], ood);
        EXPECT_EQ(t.pretrain_pool.size(), 9u * 12u);
        EXPECT_EQ(t.test.get(), test.get());
        EXPECT_EQ(std::count(test->labels.begin(), test->labels.end(), ood), 3);
        EXPECT_EQ(t.class_index(ood), -1);
    }
}

TEST(BuildTask, SameSeedSameSupport) {
    auto train = shared(fixture::synthetic_images(4, 30, 1));
    auto test = shared(fixture::synthetic_images(4, 3, 2, Split::test));
    const auto a = build_task(train, test, 1, 10, 123);
    const auto b = build_task(train, test, 1, 10, 123);
    const auto c = build_task(train, test, 1, 10, 124);
    EXPECT_EQ(a.support_indices, b.support_indices);
    EXPECT_NE(a.support_indices, c.support_indices);
}

TEST(BuildTask, TooFewExamplesIsInsufficientData) {
    auto ds = fixture::synthetic_images(10, 12, 1);
    // keep only 5 images of class 7
    ImageDataset cut;
    int sevens = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] == 7 && ++sevens > 5) continue;
        cut.labels.push_back(ds.labels[i]);
        auto img = ds.image(i);
        cut.pixels.insert(cut.pixels.end(), img.begin(), img.end());
    }
    auto train = shared(std::move(cut));
    auto test = shared(fixture::synthetic_images(10, 2, 2, Split::test));
    try {
        build_task(train, test, 3, 10, 0);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::insufficient_data);
    }
}

TEST(BuildTask, SelectionIsUniformWithinClass) {
    // 1000 seeds, 20 candidates per class, 4 drawn: each candidate expected 200 times
    auto train = shared(fixture::synthetic_images(3, 20, 5));
    auto test = shared(fixture::synthetic_images(3, 2, 6, Split::test));
    std::map<std::size_t, int> hits;
    const int seeds = 1000;
    for (int s = 0; s < seeds; ++s) {
        for (auto i : build_task(train, test, 0, 4, static_cast<std::uint64_t>(s)).support_indices) hits[i]++;
    }
    const double p = 4.0 / 20.0;
    const double mean = seeds * p;
    const double sd = std::sqrt(seeds * p * (1 - p));
    EXPECT_EQ(hits.size(), 40u);
    for (const auto& [idx, n] : hits) EXPECT_LT(std::abs(n - mean), 5.0 * sd) << "index " << idx;
}

TEST(Batches, SizesWithAndWithoutRemainder) {
    BatchPlan plan{4, 1, true};
    auto sizes = [](const auto& batches) {
        std::vector<std::size_t> s;
        for (const auto& b : batches) s.push_back(b.size());
        return s;
    };
    EXPECT_EQ(sizes(iterate_batches(10, plan)), (std::vector<std::size_t>{4, 4}));
    plan.drop_last = false;
    EXPECT_EQ(sizes(iterate_batches(10, plan)), (std::vector<std::size_t>{4, 4, 2}));
}

TEST(Batches, EpochsReshuffleReproducibly) {
    const BatchPlan plan{5, 9, false};
    const auto e0 = iterate_batches(40, plan, 0);
    const auto e1 = iterate_batches(40, plan, 1);
    EXPECT_NE(e0, e1);
    EXPECT_EQ(e0, iterate_batches(40, plan, 0));
    EXPECT_EQ(e1, iterate_batches(40, plan, 1));
    std::vector<std::size_t> all;
    for (const auto& b : e1) all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(all[i], i);
}

TEST(Batches, PoolOverloadYieldsPoolEntries) {
    const std::vector<std::size_t> pool{100, 205, 307, 411, 512};
    const auto batches = iterate_batches(pool, BatchPlan{2, 3, false});
    std::vector<std::size_t> seen;
    for (const auto& b : batches) seen.insert(seen.end(), b.begin(), b.end());
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, pool);
}

TEST(Batches, EmptyInputIsRejected) {
    try {
        iterate_batches(0, BatchPlan{});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(e.kind(), DataError::Kind::empty_input);
    }
}
