#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfcnet/mnist.hpp"

namespace rfcnet::scene {

class PlacementFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BadConfig : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr int kNumClasses = 14;
enum Label : std::uint8_t { kBackground = 0, kWall = 1, kStaticSquare = 2, kCircle = 3, kFirstDigitClass = 4 };

struct IntRange {
    int lo = 0, hi = 0;
    int sample(std::mt19937_64& rng) const { return std::uniform_int_distribution<int>(lo, hi)(rng); }
};
struct RealRange {
    double lo = 0.0, hi = 0.0;
    double sample(std::mt19937_64& rng) const {
        return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
    }
};

struct SceneConfig {
    int image_size = 64;
    int channels = 1;
    int sequence_length = 5;
    std::uint64_t seed = 0;

    IntRange n_dynamic_squares{2, 4};
    IntRange n_static_squares{1, 3};
    IntRange n_circles{1, 3};
    IntRange square_size{10, 16};
    IntRange circle_radius{4, 8};
    int border_thickness = 2;
    IntRange n_walls{0, 2};
    IntRange wall_length{12, 24};
    IntRange wall_thickness{2, 4};
    RealRange speed{0.5, 3.0};  // per axis, random sign

    RealRange background_intensity{0.0, 0.2};
    RealRange wall_intensity{0.3, 0.7};
    RealRange body_intensity{0.15, 1.0};
    RealRange digit_intensity{0.0, 1.0};
    double min_digit_contrast = 0.25;
    double digit_threshold = 0.3;

    RealRange noise_sigma{0.02, 0.10};
    RealRange offset_amplitude{-0.5, 0.5};
    RealRange offset_decay{0.5, 0.9};
    IntRange offset_onset{0, 0};  // first perturbed frame of each offset
    int min_region_size = 8;

    int placement_attempts = 1000;

    void validate() const;
    /// Same scene distribution with all perturbations disabled.
    SceneConfig clean() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
/// Partial objects override defaults; unknown keys throw BadConfig.
void from_json(const nlohmann::json& j, SceneConfig& c);

enum class ObjectKind { wall, static_square, dynamic_square, circle };

struct SceneObject {
    ObjectKind kind = ObjectKind::wall;
    double x = 0, y = 0;                // center, px
    double vx = 0, vy = 0;              // px / frame
    double half_w = 0, half_h = 0;      // squares and walls; circles use radius
    double radius = 0;
    double body_color = 0;
    std::optional<mnist::DigitGlyph> digit;
    double digit_color = 0;

    double left() const { return x - half_w; }
    double right() const { return x + half_w; }
    double top() const { return y - half_h; }
    double bottom() const { return y + half_h; }
};

struct SceneState {
    int image_size = 64;
    double background = 0.0;
    double digit_threshold = 0.3;
    std::vector<SceneObject> objects;
};

/// Draws a scene; digits come from `glyph_split`. Throws PlacementFailure when no
/// overlap-free square layout is found within config.placement_attempts tries.
SceneState sample_scene(const SceneConfig& config, const mnist::GlyphSource& glyphs, mnist::GlyphSplit glyph_split,
                        std::mt19937_64& rng);

/// Advances one frame: ballistic motion with sub-steps of at most one pixel per
/// axis, equal-mass elastic square/square contacts, reflection off walls,
/// borders and static squares; circles bounce at the image bounds only.
SceneState step(const SceneState& state);

/// Sum of squared speeds of the dynamic squares.
double square_energy(const SceneState& state);

struct Frame {
    int size = 0;
    std::vector<float> pixels;        // size x size
    std::vector<std::uint8_t> label;  // size x size
};

Frame render(const SceneState& state);

struct Perturbation {
    double noise_sigma = 0.0;
    double global_amplitude = 0.0, global_decay = 0.0;
    int global_onset = 0;
    double region_amplitude = 0.0, region_decay = 0.0;
    int region_onset = 0;
    int region_x0 = 0, region_y0 = 0, region_x1 = 0, region_y1 = 0;  // half-open

    /// Offset added to pixel (x, y) of frame t before noise.
    double offset(int t, int x, int y) const;
};

Perturbation sample_perturbation(const SceneConfig& config, std::mt19937_64& rng);

/// Adds offsets and Gaussian noise to frames (T x C x H x W, in place) and clips
/// to [0, 1]. With `clip` false the unclipped values are kept.
void perturb(std::vector<float>& frames, int frame_count, int channels, int size, const Perturbation& p,
             std::mt19937_64& rng, bool clip = true);

struct SequenceSample {
    int frames_count = 0, channels = 1, size = 0;
    std::vector<float> frames;        // T x C x H x W, perturbed
    std::vector<float> clean_frames;  // same shape, unperturbed
    std::vector<std::uint8_t> label;  // H x W, last frame
};

/// Scene -> T renders (stepping between frames) -> perturbation. The clean twin
/// is the unperturbed render sequence; the label is the last clean render.
SequenceSample generate_sequence(const SceneConfig& config, const mnist::GlyphSource& glyphs,
                                 mnist::GlyphSplit glyph_split, std::mt19937_64& rng);

/// Independent stream for sequence `index` of a named split.
std::uint64_t sequence_seed(std::uint64_t global_seed, const std::string& stream, std::uint64_t index);

}  // namespace rfcnet::scene
