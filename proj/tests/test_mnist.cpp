#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

#include "rfcnet/mnist.hpp"

using namespace rfcnet::mnist;

namespace {

std::vector<std::uint8_t> header_bytes(std::uint8_t dtype, std::uint8_t ndim, std::vector<std::uint32_t> dims) {
    std::vector<std::uint8_t> b{0, 0, dtype, ndim};
    for (auto d : dims) {
        for (int s = 24; s >= 0; s -= 8) b.push_back(std::uint8_t(d >> s));
    }
    return b;
}

IdxFile random_images(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    IdxFile f;
    f.header = {kImageMagic, kUnsignedByte, 3, {std::uint32_t(n), 28, 28}};
    f.data.resize(n * 28 * 28);
    for (auto& v : f.data) v = std::uint8_t(rng());
    return f;
}

IdxFile labels_of(std::vector<std::uint8_t> labels) {
    IdxFile f;
    f.header = {kLabelMagic, kUnsignedByte, 1, {std::uint32_t(labels.size())}};
    f.data = std::move(labels);
    return f;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("rfcnet_mnist_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(Idx, StandardTrainingImageHeader) {
    auto bytes = header_bytes(0x08, 3, {60000, 28, 28});
    ASSERT_EQ(bytes[0], 0x00);
    ASSERT_EQ(bytes[3], 0x03);
    bytes.resize(bytes.size() + std::size_t(60000) * 28 * 28, 0);
    const auto f = parse_idx(bytes);
    EXPECT_EQ(f.header.magic, 2051u);
    EXPECT_EQ(f.header.ndim, 3);
    EXPECT_EQ(f.header.dims, (std::vector<std::uint32_t>{60000, 28, 28}));
    EXPECT_EQ(f.data.size(), std::size_t(60000) * 28 * 28);
}

TEST(Idx, ShippedDigitFilesDecode) {
    const auto dir = std::filesystem::path(RFCNET_SOURCE_DIR) / "data" / "mnist5k";
    if (!std::filesystem::exists(dir)) GTEST_SKIP() << "no shipped digit subset";
    const auto img = parse_idx(read_maybe_gzipped(dir / "train-images-idx3-ubyte.gz"));
    EXPECT_EQ(img.header.magic, 2051u);
    EXPECT_EQ(img.header.dims.size(), 3u);
    const auto lab = parse_idx(read_maybe_gzipped(dir / "train-labels-idx1-ubyte.gz"));
    EXPECT_EQ(lab.header.magic, 2049u);
    EXPECT_EQ(lab.header.dims[0], img.header.dims[0]);
}

TEST(Idx, SingleZeroImage) {
    auto bytes = header_bytes(0x08, 3, {1, 28, 28});
    bytes.resize(bytes.size() + 784, 0);
    const auto f = parse_idx(bytes);
    EXPECT_EQ(f.header.dims, (std::vector<std::uint32_t>{1, 28, 28}));
    ASSERT_EQ(f.data.size(), 784u);
    for (auto v : f.data) EXPECT_EQ(v, 0);
}

TEST(Idx, TruncatedStreams) {
    auto full = header_bytes(0x08, 3, {2, 28, 28});
    const auto header_only = full;
    EXPECT_THROW(parse_idx(header_only), Truncated);
    full.resize(full.size() + 2 * 784 - 1, 7);
    EXPECT_THROW(parse_idx(full), Truncated);
    EXPECT_THROW(parse_idx(std::vector<std::uint8_t>{0, 0, 8}), Truncated);
    std::vector<std::uint8_t> mid_dims{0, 0, 8, 3, 0, 0, 0, 1, 0, 0};
    EXPECT_THROW(parse_idx(mid_dims), Truncated);
}

TEST(Idx, BadMagicRejected) {
    auto two_dims = header_bytes(0x08, 2, {1, 1});
    two_dims.push_back(0);
    EXPECT_THROW(parse_idx(two_dims), BadMagic);
    auto nonzero_lead = header_bytes(0x08, 1, {1});
    nonzero_lead[0] = 1;
    nonzero_lead.push_back(3);
    EXPECT_THROW(parse_idx(nonzero_lead), BadMagic);
}

TEST(Idx, WrongDtypeRejected) {
    auto floats = header_bytes(0x0D, 1, {1});
    floats.resize(floats.size() + 4, 0);
    EXPECT_THROW(parse_idx(floats), UnsupportedDtype);
    auto ints = header_bytes(0x0C, 3, {1, 28, 28});
    EXPECT_THROW(parse_idx(ints), UnsupportedDtype);
}

TEST(Idx, RoundTripByteExact) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto bytes = serialize_idx(random_images(3 + seed, seed));
        EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes);
    }
    const auto lab = serialize_idx(labels_of({3, 1, 4, 1, 5}));
    EXPECT_EQ(serialize_idx(parse_idx(lab)), lab);

    const auto dir = std::filesystem::path(RFCNET_SOURCE_DIR) / "data" / "mnist5k";
    if (std::filesystem::exists(dir)) {
        for (auto name : {"t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"}) {
            const auto raw = read_maybe_gzipped(dir / name);
            EXPECT_EQ(serialize_idx(parse_idx(raw)), raw) << name;
        }
    }
}

TEST(Idx, GzipAndPlainFilesReadIdentically) {
    const auto dir = temp_dir("gz");
    const auto bytes = serialize_idx(random_images(4, 9));
    write_file(dir / "plain", bytes);
    write_file(dir / "packed.gz", bytes, true);
    EXPECT_EQ(read_maybe_gzipped(dir / "plain"), bytes);
    EXPECT_EQ(read_maybe_gzipped(dir / "packed.gz"), bytes);
    EXPECT_LT(std::filesystem::file_size(dir / "packed.gz"), bytes.size() + 64);
    std::filesystem::remove_all(dir);
}

TEST(Idx, CountMismatchIsAnError) {
    EXPECT_THROW(pair_idx(random_images(3, 1), labels_of({1, 2})), CountMismatch);
    EXPECT_NO_THROW(pair_idx(random_images(2, 1), labels_of({1, 2})));
}

TEST(Idx, LoadDigitSetFromDirectory) {
    const auto dir = temp_dir("dir");
    const auto img = random_images(5, 4);
    write_file(dir / "train-images-idx3-ubyte", serialize_idx(img));
    write_file(dir / "train-labels-idx1-ubyte.gz", serialize_idx(labels_of({0, 1, 2, 3, 9})), true);
    write_file(dir / "t10k-images-idx3-ubyte", serialize_idx(random_images(2, 5)));
    write_file(dir / "t10k-labels-idx1-ubyte", serialize_idx(labels_of({7, 7})));
    const auto set = load_digit_set(dir, "train");
    EXPECT_EQ(set.size(), 5u);
    EXPECT_EQ(set.pixels, img.data);
    const auto source = GlyphSource::from_directory(dir);
    EXPECT_EQ(source.set(GlyphSplit::test).size(), 2u);
    EXPECT_EQ(source.glyph(GlyphSplit::test, 1).digit, 7);
    EXPECT_THROW(load_digit_set(dir, "missing"), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST(Glyphs, SameSeedSameGlyph) {
    const auto source = GlyphSource::synthetic();
    std::mt19937_64 a(42), b(42);
    for (int i = 0; i < 20; ++i) {
        const auto ga = source.sample(a, GlyphSplit::train);
        const auto gb = source.sample(b, GlyphSplit::train);
        EXPECT_EQ(ga.index, gb.index);
        EXPECT_EQ(ga.image, gb.image);
    }
}

TEST(Glyphs, AllDigitsAppearAndRangeHolds) {
    const auto source = GlyphSource::synthetic();
    std::mt19937_64 rng(5);
    std::array<int, 10> counts{};
    for (int i = 0; i < 10000; ++i) {
        const auto g = source.sample(rng, GlyphSplit::test);
        ++counts[g.digit];
        const auto [lo, hi] = std::minmax_element(g.image.begin(), g.image.end());
        ASSERT_GE(*lo, 0.0f);
        ASSERT_LE(*hi, 1.0f);
    }
    for (int d = 0; d < 10; ++d) {
        EXPECT_GT(counts[d], 800) << d;
        EXPECT_LT(counts[d], 1200) << d;
    }
}

TEST(Glyphs, UnloadedSplitThrows) {
    GlyphSource source(synthetic_digits(1, 3), DigitSet{});
    std::mt19937_64 rng(1);
    EXPECT_NO_THROW(source.sample(rng, GlyphSplit::train));
    EXPECT_THROW(source.sample(rng, GlyphSplit::test), SplitNotLoaded);
}

TEST(Glyphs, SyntheticDigitsAreDeterministicStrokes) {
    const auto a = synthetic_digits(3, 11), b = synthetic_digits(3, 11);
    EXPECT_EQ(a.pixels, b.pixels);
    ASSERT_EQ(a.size(), 30u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.labels[i], i % 10);
        int ink = 0;
        for (int p = 0; p < 784; ++p) ink += a.pixels[i * 784 + p] > 76;  // > 0.3 after normalization
        EXPECT_GT(ink, 25) << "digit " << int(a.labels[i]);
        EXPECT_LT(ink, 400) << "digit " << int(a.labels[i]);
    }
    EXPECT_NE(synthetic_digits(3, 12).pixels, a.pixels);
}
