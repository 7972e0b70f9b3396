#include "rfcnet/mnist.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>

namespace rfcnet::mnist {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
    return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
           std::uint32_t(b[at + 3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

}  // namespace

std::size_t IdxHeader::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw Truncated("idx: stream shorter than the 4-byte magic");
    if (bytes[0] != 0 || bytes[1] != 0) throw BadMagic("idx: leading magic bytes must be zero");
    IdxFile f;
    f.header.dtype_code = bytes[2];
    f.header.ndim = bytes[3];
    f.header.magic = read_be32(bytes, 0);
    if (f.header.dtype_code != kUnsignedByte) {
        throw UnsupportedDtype("idx: dtype code " + std::to_string(int(f.header.dtype_code)) + " (only 0x08 supported)");
    }
    if (f.header.magic != kImageMagic && f.header.magic != kLabelMagic) {
        throw BadMagic("idx: magic " + std::to_string(f.header.magic) + " is neither 2049 nor 2051");
    }
    const std::size_t header_len = 4 + 4 * std::size_t(f.header.ndim);
    if (bytes.size() < header_len) throw Truncated("idx: stream ends inside the dimension table");
    for (int i = 0; i < f.header.ndim; ++i) {
        const auto d = read_be32(bytes, 4 + 4 * i);
        if (d == 0) throw IdxError("idx: zero-sized dimension " + std::to_string(i));
        f.header.dims.push_back(d);
    }
    const std::size_t n = f.header.element_count();
    if (bytes.size() - header_len < n) {
        throw Truncated("idx: declared " + std::to_string(n) + " elements, stream holds " +
                        std::to_string(bytes.size() - header_len));
    }
    f.data.assign(bytes.begin() + header_len, bytes.begin() + header_len + n);
    return f;
}

std::vector<std::uint8_t> serialize_idx(const IdxFile& file) {
    if (file.header.dims.size() != file.header.ndim) throw IdxError("idx: ndim does not match dims");
    if (file.data.size() != file.header.element_count()) throw IdxError("idx: payload size does not match dims");
    std::vector<std::uint8_t> out;
    out.reserve(4 + 4 * file.header.dims.size() + file.data.size());
    out.push_back(0);
    out.push_back(0);
    out.push_back(file.header.dtype_code);
    out.push_back(file.header.ndim);
    for (auto d : file.header.dims) write_be32(out, d);
    out.insert(out.end(), file.data.begin(), file.data.end());
    return out;
}

std::vector<std::uint8_t> read_maybe_gzipped(const std::filesystem::path& path) {
    gzFile gz = gzopen(path.string().c_str(), "rb");
    if (!gz) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::array<std::uint8_t, 1 << 16> buf{};
    for (;;) {
        const int got = gzread(gz, buf.data(), unsigned(buf.size()));
        if (got < 0) {
            int code = 0;
            std::string msg = gzerror(gz, &code);
            gzclose(gz);
            throw std::runtime_error("read error in " + path.string() + ": " + msg);
        }
        if (got == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + got);
    }
    gzclose(gz);
    return out;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes, bool gzip) {
    if (gzip) {
        gzFile gz = gzopen(path.string().c_str(), "wb");
        if (!gz) throw std::runtime_error("cannot create " + path.string());
        const int wrote = bytes.empty() ? 0 : gzwrite(gz, bytes.data(), unsigned(bytes.size()));
        gzclose(gz);
        if (wrote != int(bytes.size())) throw std::runtime_error("short write to " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

DigitSet pair_idx(const IdxFile& images, const IdxFile& labels) {
    if (images.header.magic != kImageMagic || images.header.ndim != 3) throw BadMagic("expected an image file (2051, 3 dims)");
    if (labels.header.magic != kLabelMagic || labels.header.ndim != 1) throw BadMagic("expected a label file (2049, 1 dim)");
    if (images.header.dims[0] != labels.header.dims[0]) {
        throw CountMismatch(std::to_string(images.header.dims[0]) + " images vs " +
                            std::to_string(labels.header.dims[0]) + " labels");
    }
    if (images.header.dims[1] != kGlyphSize || images.header.dims[2] != kGlyphSize) {
        throw IdxError("digit images must be 28x28");
    }
    for (auto l : labels.data) {
        if (l > 9) throw IdxError("digit label " + std::to_string(int(l)) + " out of range");
    }
    return DigitSet{images.data, labels.data};
}

namespace {

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
    for (auto name : {stem, stem + ".gz"}) {
        if (std::filesystem::exists(dir / name)) return dir / name;
    }
    throw std::runtime_error("missing " + (dir / stem).string() + "[.gz]");
}

}  // namespace

DigitSet load_digit_set(const std::filesystem::path& dir, const std::string& prefix) {
    const auto img = read_maybe_gzipped(find_idx(dir, prefix + "-images-idx3-ubyte"));
    const auto lab = read_maybe_gzipped(find_idx(dir, prefix + "-labels-idx1-ubyte"));
    return pair_idx(parse_idx(img), parse_idx(lab));
}

namespace {

struct Pt {
    double x, y;
};
using Stroke = std::vector<Pt>;

Stroke ellipse(double cx, double cy, double rx, double ry, double a0 = 0.0, double a1 = 2 * std::numbers::pi,
               int n = 18) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        const double a = a0 + (a1 - a0) * i / n;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

// Skeletons in a unit box, y pointing down.
std::vector<Stroke> skeleton(int digit) {
    const double pi = std::numbers::pi;
    switch (digit) {
        case 0: return {ellipse(0.5, 0.5, 0.33, 0.48)};
        case 1: return {{{0.32, 0.18}, {0.55, 0.0}, {0.55, 1.0}}};
        case 2:
            return {{{0.15, 0.25}, {0.3, 0.04}, {0.65, 0.02}, {0.85, 0.22}, {0.78, 0.45}, {0.15, 1.0}, {0.9, 1.0}}};
        case 3:
            return {{{0.15, 0.08}, {0.5, 0.0}, {0.82, 0.13}, {0.8, 0.38}, {0.45, 0.5}, {0.85, 0.62}, {0.88, 0.86},
                     {0.5, 1.0}, {0.12, 0.9}}};
        case 4: return {{{0.68, 1.0}, {0.68, 0.0}, {0.08, 0.68}, {0.95, 0.68}}};
        case 5:
            return {{{0.85, 0.0}, {0.22, 0.0}, {0.16, 0.45}, {0.58, 0.38}, {0.88, 0.62}, {0.76, 0.93}, {0.4, 1.0},
                     {0.1, 0.88}}};
        case 6: {
            Stroke s{{0.78, 0.03}, {0.42, 0.12}, {0.2, 0.42}, {0.16, 0.72}};
            auto loop = ellipse(0.48, 0.73, 0.32, 0.26, pi, 3 * pi);
            s.insert(s.end(), loop.begin(), loop.end());
            return {s};
        }
        case 7: return {{{0.08, 0.0}, {0.92, 0.0}, {0.42, 1.0}}};
        case 8: return {ellipse(0.5, 0.25, 0.28, 0.24), ellipse(0.5, 0.73, 0.34, 0.27)};
        default: {
            auto loop = ellipse(0.5, 0.3, 0.31, 0.28);
            return {loop, {{0.81, 0.3}, {0.72, 1.0}}};
        }
    }
}

double segment_distance(Pt p, Pt a, Pt b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
    return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

DigitSet synthetic_digits(int per_digit, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    DigitSet set;
    set.pixels.reserve(std::size_t(per_digit) * 10 * kGlyphSize * kGlyphSize);
    for (int i = 0; i < per_digit; ++i) {
        for (int d = 0; d < 10; ++d) {
            // random affine into the central ~20x20 box, as MNIST centers its digits
            const double rot = (u(rng) - 0.5) * 0.5;
            const double shear = (u(rng) - 0.5) * 0.5;
            const double sx = 11.0 + 6.0 * u(rng), sy = 17.0 + 4.0 * u(rng);
            const double tx = 14.0 + (u(rng) - 0.5) * 3.0, ty = 14.0 + (u(rng) - 0.5) * 3.0;
            const double radius = 0.9 + 1.0 * u(rng);
            const double c = std::cos(rot), s = std::sin(rot);
            std::vector<Stroke> strokes = skeleton(d);
            for (auto& st : strokes) {
                for (auto& p : st) {
                    const double jx = p.x + (u(rng) - 0.5) * 0.06, jy = p.y + (u(rng) - 0.5) * 0.06;
                    const double x = (jx - 0.5) * sx + shear * (jy - 0.5) * sy;
                    const double y = (jy - 0.5) * sy;
                    p = {tx + c * x - s * y, ty + s * x + c * y};
                }
            }
            for (int py = 0; py < kGlyphSize; ++py) {
                for (int px = 0; px < kGlyphSize; ++px) {
                    const Pt q{px + 0.5, py + 0.5};
                    double best = 1e9;
                    for (const auto& st : strokes) {
                        for (std::size_t k = 1; k < st.size(); ++k) best = std::min(best, segment_distance(q, st[k - 1], st[k]));
                    }
                    const double v = std::clamp(radius + 0.5 - best, 0.0, 1.0);
                    set.pixels.push_back(std::uint8_t(std::lround(v * 255.0)));
                }
            }
            set.labels.push_back(std::uint8_t(d));
        }
    }
    return set;
}

GlyphSource GlyphSource::from_directory(const std::filesystem::path& dir) {
    GlyphSource g(load_digit_set(dir, "train"), load_digit_set(dir, "t10k"));
    g.origin_ = "idx:" + dir.string();
    return g;
}

GlyphSource GlyphSource::resolve(const std::string& dir) {
    if (!dir.empty()) return from_directory(dir);
    if (const char* env = std::getenv("RFCNET_MNIST_DIR"); env && *env) return from_directory(env);
    return synthetic();
}

GlyphSource GlyphSource::synthetic(std::uint64_t seed) {
    GlyphSource g(synthetic_digits(200, seed), synthetic_digits(50, seed ^ 0x9e3779b97f4a7c15ULL));
    g.origin_ = "synthetic";
    return g;
}

DigitGlyph GlyphSource::glyph(GlyphSplit split, std::size_t index) const {
    const auto& s = set(split);
    if (index >= s.size()) throw std::out_of_range("glyph index out of range");
    DigitGlyph g;
    g.digit = s.labels[index];
    g.index = index;
    g.image.resize(kGlyphSize * kGlyphSize);
    const auto* px = s.pixels.data() + index * kGlyphSize * kGlyphSize;
    for (std::size_t i = 0; i < g.image.size(); ++i) g.image[i] = float(px[i]) / 255.0f;
    return g;
}

DigitGlyph GlyphSource::sample(std::mt19937_64& rng, GlyphSplit split) const {
    const auto& s = set(split);
    if (s.size() == 0) throw SplitNotLoaded(split == GlyphSplit::train ? "train glyphs not loaded" : "test glyphs not loaded");
    std::uniform_int_distribution<std::size_t> pick(0, s.size() - 1);
    return glyph(split, pick(rng));
}

}  // namespace rfcnet::mnist
