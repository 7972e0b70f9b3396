#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rfcnet::mnist {

class IdxError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BadMagic : public IdxError {
public:
    using IdxError::IdxError;
};
class Truncated : public IdxError {
public:
    using IdxError::IdxError;
};
class UnsupportedDtype : public IdxError {
public:
    using IdxError::IdxError;
};
class CountMismatch : public IdxError {
public:
    using IdxError::IdxError;
};
class SplitNotLoaded : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kImageMagic = 2051;
inline constexpr std::uint32_t kLabelMagic = 2049;
inline constexpr std::uint8_t kUnsignedByte = 0x08;

struct IdxHeader {
    std::uint32_t magic = 0;
    std::uint8_t dtype_code = 0;
    std::uint8_t ndim = 0;
    std::vector<std::uint32_t> dims;

    std::size_t element_count() const;
};

struct IdxFile {
    IdxHeader header;
    std::vector<std::uint8_t> data;  // row-major, unsigned 8-bit
};

/// Decodes an IDX byte stream (big-endian header). Throws BadMagic,
/// UnsupportedDtype or Truncated.
IdxFile parse_idx(std::span<const std::uint8_t> bytes);
/// Inverse of parse_idx; bytes beyond the declared payload are not reproduced.
std::vector<std::uint8_t> serialize_idx(const IdxFile& file);

/// Reads a whole file, transparently inflating gzip content.
std::vector<std::uint8_t> read_maybe_gzipped(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes, bool gzip = false);

inline constexpr int kGlyphSize = 28;

/// Paired digit images (N x 28 x 28) and labels.
struct DigitSet {
    std::vector<std::uint8_t> pixels;
    std::vector<std::uint8_t> labels;
    std::size_t size() const { return labels.size(); }
};

/// Builds a DigitSet from paired image/label files; throws CountMismatch when
/// the counts disagree.
DigitSet pair_idx(const IdxFile& images, const IdxFile& labels);

/// Loads "<prefix>-images-idx3-ubyte" and "<prefix>-labels-idx1-ubyte"
/// (optionally with .gz) from dir, for prefix "train" or "t10k".
DigitSet load_digit_set(const std::filesystem::path& dir, const std::string& prefix);

/// Stroke-rendered stand-in digits used when no MNIST directory is configured.
/// Deterministic given (per_digit, seed).
DigitSet synthetic_digits(int per_digit, std::uint64_t seed);

enum class GlyphSplit { train, test };

struct DigitGlyph {
    int digit = 0;
    std::size_t index = 0;
    std::vector<float> image;  // kGlyphSize x kGlyphSize, values in [0, 1]
};

/// Read-only pool of glyphs per split; safe for concurrent readers.
class GlyphSource {
public:
    GlyphSource() = default;
    GlyphSource(DigitSet train, DigitSet test) : train_(std::move(train)), test_(std::move(test)) {}

    /// Reads from an MNIST directory.
    static GlyphSource from_directory(const std::filesystem::path& dir);
    /// Uses RFCNET_MNIST_DIR when `dir` is empty; falls back to synthetic digits
    /// when neither is given.
    static GlyphSource resolve(const std::string& dir);
    static GlyphSource synthetic(std::uint64_t seed = 7);

    /// Uniformly drawn glyph of the split, normalized to [0, 1]. Throws SplitNotLoaded.
    DigitGlyph sample(std::mt19937_64& rng, GlyphSplit split) const;
    DigitGlyph glyph(GlyphSplit split, std::size_t index) const;
    const DigitSet& set(GlyphSplit split) const { return split == GlyphSplit::train ? train_ : test_; }
    const std::string& origin() const { return origin_; }

private:
    DigitSet train_, test_;
    std::string origin_ = "memory";
};

}  // namespace rfcnet::mnist
