#include "rfcnet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

namespace rfcnet::scene {

namespace {

void check_range(const char* name, double lo, double hi) {
    if (!(lo <= hi)) throw BadConfig(std::string(name) + ": empty range");
}

}  // namespace

void SceneConfig::validate() const {
    if (image_size < 32) throw BadConfig("image_size must be >= 32");
    if (channels < 1) throw BadConfig("channels must be >= 1");
    if (sequence_length < 2) throw BadConfig("sequence_length must be >= 2");
    check_range("n_dynamic_squares", n_dynamic_squares.lo, n_dynamic_squares.hi);
    check_range("n_static_squares", n_static_squares.lo, n_static_squares.hi);
    check_range("n_circles", n_circles.lo, n_circles.hi);
    check_range("square_size", square_size.lo, square_size.hi);
    check_range("circle_radius", circle_radius.lo, circle_radius.hi);
    check_range("n_walls", n_walls.lo, n_walls.hi);
    check_range("wall_length", wall_length.lo, wall_length.hi);
    check_range("wall_thickness", wall_thickness.lo, wall_thickness.hi);
    check_range("speed", speed.lo, speed.hi);
    check_range("background_intensity", background_intensity.lo, background_intensity.hi);
    check_range("wall_intensity", wall_intensity.lo, wall_intensity.hi);
    check_range("body_intensity", body_intensity.lo, body_intensity.hi);
    check_range("digit_intensity", digit_intensity.lo, digit_intensity.hi);
    check_range("noise_sigma", noise_sigma.lo, noise_sigma.hi);
    check_range("offset_amplitude", offset_amplitude.lo, offset_amplitude.hi);
    check_range("offset_decay", offset_decay.lo, offset_decay.hi);
    check_range("offset_onset", offset_onset.lo, offset_onset.hi);
    if (n_dynamic_squares.lo < 0 || n_static_squares.lo < 0 || n_circles.lo < 0 || n_walls.lo < 0) {
        throw BadConfig("object counts must be >= 0");
    }
    if (square_size.lo < 2 || circle_radius.lo < 1 || wall_length.lo < 1 || wall_thickness.lo < 1) {
        throw BadConfig("object sizes must be positive");
    }
    if (border_thickness < 1) throw BadConfig("border_thickness must be >= 1");
    if (square_size.hi + 2 * border_thickness + 2 > image_size) throw BadConfig("squares do not fit inside the borders");
    if (wall_length.hi + 2 * border_thickness > image_size) throw BadConfig("walls do not fit inside the borders");
    if (speed.lo <= 0.0) throw BadConfig("speed range must exclude zero");
    if (noise_sigma.lo < 0.0) throw BadConfig("noise_sigma must be >= 0");
    if (offset_decay.lo < 0.0 || offset_decay.hi > 1.0) throw BadConfig("offset_decay must lie in [0, 1]");
    if (offset_onset.lo < 0 || offset_onset.hi >= sequence_length) throw BadConfig("offset_onset outside the sequence");
    if (min_region_size < 1 || min_region_size > image_size) throw BadConfig("min_region_size out of range");
    if (digit_threshold < 0.0 || digit_threshold >= 1.0) throw BadConfig("digit_threshold must lie in [0, 1)");
    if (placement_attempts < 1) throw BadConfig("placement_attempts must be >= 1");
}

SceneConfig SceneConfig::clean() const {
    SceneConfig c = *this;
    c.noise_sigma = {0.0, 0.0};
    c.offset_amplitude = {0.0, 0.0};
    return c;
}

namespace {

template <class R>
nlohmann::json range_json(const R& r) {
    return nlohmann::json::array({r.lo, r.hi});
}

template <class R>
void parse_range(const nlohmann::json& v, const std::string& key, R& r) {
    if (!v.is_array() || v.size() != 2) throw BadConfig(key + ": expected [lo, hi]");
    r.lo = v[0].get<decltype(r.lo)>();
    r.hi = v[1].get<decltype(r.hi)>();
}

// key -> (writer, reader) over one SceneConfig field
struct FieldIo {
    std::function<nlohmann::json(const SceneConfig&)> get;
    std::function<void(const nlohmann::json&, SceneConfig&)> set;
};

const std::map<std::string, FieldIo>& fields() {
    static const std::map<std::string, FieldIo> table = [] {
        std::map<std::string, FieldIo> t;
#define RFC_SCALAR(name)                                                                          \
    t[#name] = {[](const SceneConfig& c) { return nlohmann::json(c.name); },                     \
                [](const nlohmann::json& v, SceneConfig& c) { c.name = v.get<decltype(c.name)>(); }};
#define RFC_RANGE(name)                                                                           \
    t[#name] = {[](const SceneConfig& c) { return range_json(c.name); },                         \
                [](const nlohmann::json& v, SceneConfig& c) { parse_range(v, #name, c.name); }};
        RFC_SCALAR(image_size)
        RFC_SCALAR(channels)
        RFC_SCALAR(sequence_length)
        RFC_SCALAR(seed)
        RFC_RANGE(n_dynamic_squares)
        RFC_RANGE(n_static_squares)
        RFC_RANGE(n_circles)
        RFC_RANGE(square_size)
        RFC_RANGE(circle_radius)
        RFC_SCALAR(border_thickness)
        RFC_RANGE(n_walls)
        RFC_RANGE(wall_length)
        RFC_RANGE(wall_thickness)
        RFC_RANGE(speed)
        RFC_RANGE(background_intensity)
        RFC_RANGE(wall_intensity)
        RFC_RANGE(body_intensity)
        RFC_RANGE(digit_intensity)
        RFC_SCALAR(min_digit_contrast)
        RFC_SCALAR(digit_threshold)
        RFC_RANGE(noise_sigma)
        RFC_RANGE(offset_amplitude)
        RFC_RANGE(offset_decay)
        RFC_RANGE(offset_onset)
        RFC_SCALAR(min_region_size)
        RFC_SCALAR(placement_attempts)
#undef RFC_SCALAR
#undef RFC_RANGE
        return t;
    }();
    return table;
}

}  // namespace

void to_json(nlohmann::json& j, const SceneConfig& c) {
    j = nlohmann::json::object();
    for (const auto& [key, io] : fields()) j[key] = io.get(c);
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
    if (!j.is_object()) throw BadConfig("scene config must be an object");
    for (const auto& [key, value] : j.items()) {
        auto it = fields().find(key);
        if (it == fields().end()) throw BadConfig("unknown scene config key '" + key + "'");
        try {
            it->second.set(value, c);
        } catch (const nlohmann::json::exception& e) {
            throw BadConfig("scene config key '" + key + "': " + e.what());
        }
    }
    c.validate();
}

namespace {

double random_sign(std::mt19937_64& rng) { return std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0; }

bool boxes_overlap(const SceneObject& a, const SceneObject& b, double gap) {
    return std::abs(a.x - b.x) < a.half_w + b.half_w + gap && std::abs(a.y - b.y) < a.half_h + b.half_h + gap;
}

SceneObject make_wall(double x0, double y0, double x1, double y1, double color) {
    SceneObject w;
    w.kind = ObjectKind::wall;
    w.x = 0.5 * (x0 + x1);
    w.y = 0.5 * (y0 + y1);
    w.half_w = 0.5 * (x1 - x0);
    w.half_h = 0.5 * (y1 - y0);
    w.body_color = color;
    return w;
}

}  // namespace

SceneState sample_scene(const SceneConfig& config, const mnist::GlyphSource& glyphs, mnist::GlyphSplit glyph_split,
                        std::mt19937_64& rng) {
    config.validate();
    const double size = config.image_size;
    const double b = config.border_thickness;
    SceneState s;
    s.image_size = config.image_size;
    s.digit_threshold = config.digit_threshold;
    s.background = config.background_intensity.sample(rng);

    const double wall_color = config.wall_intensity.sample(rng);
    s.objects.push_back(make_wall(0, 0, size, b, wall_color));
    s.objects.push_back(make_wall(0, size - b, size, size, wall_color));
    s.objects.push_back(make_wall(0, b, b, size - b, wall_color));
    s.objects.push_back(make_wall(size - b, b, size, size - b, wall_color));

    const int n_walls = config.n_walls.sample(rng);
    for (int i = 0; i < n_walls; ++i) {
        const double len = config.wall_length.sample(rng);
        const double th = config.wall_thickness.sample(rng);
        const bool horizontal = std::bernoulli_distribution(0.5)(rng);
        const double w = horizontal ? len : th, h = horizontal ? th : len;
        const double x0 = std::uniform_int_distribution<int>(int(b), int(size - b - w))(rng);
        const double y0 = std::uniform_int_distribution<int>(int(b), int(size - b - h))(rng);
        s.objects.push_back(make_wall(x0, y0, x0 + w, y0 + h, wall_color));
    }

    // counts and sizes are fixed first; each attempt lays out all squares anew
    const int n_static = config.n_static_squares.sample(rng);
    const int n_dynamic = config.n_dynamic_squares.sample(rng);
    std::vector<SceneObject> squares(std::size_t(n_static + n_dynamic));
    for (int i = 0; i < n_static + n_dynamic; ++i) {
        auto& sq = squares[std::size_t(i)];
        sq.kind = i < n_static ? ObjectKind::static_square : ObjectKind::dynamic_square;
        sq.half_w = sq.half_h = 0.5 * config.square_size.sample(rng);
    }
    // each square is drawn uniformly from all free pixel-aligned positions
    const std::size_t fixed_count = s.objects.size();
    bool placed_all = false;
    std::vector<std::pair<int, int>> free;
    for (int attempt = 0; attempt < config.placement_attempts && !placed_all; ++attempt) {
        s.objects.resize(fixed_count);
        placed_all = true;
        for (auto& sq : squares) {
            const int side = int(2 * sq.half_w);
            free.clear();
            for (int y0 = int(b); y0 + side <= int(size - b); ++y0) {
                for (int x0 = int(b); x0 + side <= int(size - b); ++x0) {
                    sq.x = x0 + sq.half_w;
                    sq.y = y0 + sq.half_h;
                    const bool clear = std::none_of(s.objects.begin(), s.objects.end(),
                                                    [&](const SceneObject& o) { return boxes_overlap(sq, o, 1.0); });
                    if (clear) free.emplace_back(x0, y0);
                }
            }
            if (free.empty()) {
                placed_all = false;
                break;
            }
            const auto [x0, y0] = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
            sq.x = x0 + sq.half_w;
            sq.y = y0 + sq.half_h;
            s.objects.push_back(sq);
        }
    }
    if (!placed_all) {
        throw PlacementFailure("could not lay out " + std::to_string(squares.size()) + " squares after " +
                               std::to_string(config.placement_attempts) + " attempts");
    }
    for (std::size_t i = fixed_count; i < s.objects.size(); ++i) {
        auto& sq = s.objects[i];
        if (sq.kind == ObjectKind::dynamic_square) {
            sq.vx = random_sign(rng) * config.speed.sample(rng);
            sq.vy = random_sign(rng) * config.speed.sample(rng);
        }
        sq.body_color = config.body_intensity.sample(rng);
        sq.digit = glyphs.sample(rng, glyph_split);
        sq.digit_color = config.digit_intensity.sample(rng);
        for (int k = 0; k < 100 && std::abs(sq.digit_color - sq.body_color) < config.min_digit_contrast; ++k) {
            sq.digit_color = config.digit_intensity.sample(rng);
        }
        if (std::abs(sq.digit_color - sq.body_color) < config.min_digit_contrast) {
            sq.digit_color = sq.body_color > 0.5 ? config.digit_intensity.lo : config.digit_intensity.hi;
        }
    }

    const int n_circles = config.n_circles.sample(rng);
    for (int i = 0; i < n_circles; ++i) {
        SceneObject c;
        c.kind = ObjectKind::circle;
        c.radius = config.circle_radius.sample(rng);
        c.half_w = c.half_h = c.radius;
        std::uniform_real_distribution<double> pos(c.radius, size - c.radius);
        c.x = pos(rng);
        c.y = pos(rng);
        c.vx = random_sign(rng) * config.speed.sample(rng);
        c.vy = random_sign(rng) * config.speed.sample(rng);
        c.body_color = config.body_intensity.sample(rng);
        s.objects.push_back(std::move(c));
    }
    return s;
}

namespace {

// Pushes `a` out of the immovable box `o` along the axis of least penetration
// and reflects the matching velocity component if it points into `o`.
bool resolve_against_fixed(SceneObject& a, const SceneObject& o) {
    const double px = std::min(a.right(), o.right()) - std::max(a.left(), o.left());
    const double py = std::min(a.bottom(), o.bottom()) - std::max(a.top(), o.top());
    if (px <= 0 || py <= 0) return false;
    if (px < py) {
        const double dir = a.x < o.x ? -1.0 : 1.0;
        a.x += dir * px;
        if (a.vx * dir < 0) a.vx = -a.vx;
    } else {
        const double dir = a.y < o.y ? -1.0 : 1.0;
        a.y += dir * py;
        if (a.vy * dir < 0) a.vy = -a.vy;
    }
    return true;
}

// Equal masses: exchange the velocity components along the contact axis.
bool resolve_pair(SceneObject& a, SceneObject& b) {
    const double px = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
    const double py = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
    if (px <= 0 || py <= 0) return false;
    if (px < py) {
        const double dir = a.x < b.x ? -1.0 : 1.0;  // direction pushing a away from b
        a.x += dir * 0.5 * px;
        b.x -= dir * 0.5 * px;
        if ((b.vx - a.vx) * dir > 0) std::swap(a.vx, b.vx);
    } else {
        const double dir = a.y < b.y ? -1.0 : 1.0;
        a.y += dir * 0.5 * py;
        b.y -= dir * 0.5 * py;
        if ((b.vy - a.vy) * dir > 0) std::swap(a.vy, b.vy);
    }
    return true;
}

}  // namespace

SceneState step(const SceneState& state) {
    SceneState s = state;
    std::vector<std::size_t> fixed, moving, circles;
    double vmax = 0.0;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        const auto& o = s.objects[i];
        switch (o.kind) {
            case ObjectKind::wall:
            case ObjectKind::static_square: fixed.push_back(i); break;
            case ObjectKind::dynamic_square: moving.push_back(i); break;
            case ObjectKind::circle: circles.push_back(i); break;
        }
        vmax = std::max({vmax, std::abs(o.vx), std::abs(o.vy)});
    }
    const int substeps = std::max(1, int(std::ceil(vmax)));
    const double dt = 1.0 / substeps;
    const double size = s.image_size;

    for (int k = 0; k < substeps; ++k) {
        for (auto i : moving) {
            s.objects[i].x += s.objects[i].vx * dt;
            s.objects[i].y += s.objects[i].vy * dt;
        }
        for (int pass = 0; pass < 4; ++pass) {
            bool any = false;
            for (std::size_t a = 0; a < moving.size(); ++a) {
                for (std::size_t c = a + 1; c < moving.size(); ++c) {
                    any |= resolve_pair(s.objects[moving[a]], s.objects[moving[c]]);
                }
            }
            for (auto i : moving) {
                for (auto f : fixed) any |= resolve_against_fixed(s.objects[i], s.objects[f]);
            }
            if (!any) break;
        }
        for (auto i : circles) {
            auto& c = s.objects[i];
            c.x += c.vx * dt;
            c.y += c.vy * dt;
            if (c.x - c.radius < 0) {
                c.x = 2 * c.radius - c.x;
                c.vx = std::abs(c.vx);
            } else if (c.x + c.radius > size) {
                c.x = 2 * (size - c.radius) - c.x;
                c.vx = -std::abs(c.vx);
            }
            if (c.y - c.radius < 0) {
                c.y = 2 * c.radius - c.y;
                c.vy = std::abs(c.vy);
            } else if (c.y + c.radius > size) {
                c.y = 2 * (size - c.radius) - c.y;
                c.vy = -std::abs(c.vy);
            }
        }
    }
    return s;
}

double square_energy(const SceneState& state) {
    double e = 0.0;
    for (const auto& o : state.objects) {
        if (o.kind == ObjectKind::dynamic_square) e += o.vx * o.vx + o.vy * o.vy;
    }
    return e;
}

namespace {

int draw_rank(ObjectKind k) {
    switch (k) {
        case ObjectKind::wall: return 0;
        case ObjectKind::static_square: return 1;
        case ObjectKind::dynamic_square: return 2;
        case ObjectKind::circle: return 3;
    }
    return 0;
}

float glyph_at(const mnist::DigitGlyph& g, double u, double v) {
    // bilinear lookup, (u, v) in glyph pixel units
    const int n = mnist::kGlyphSize;
    u -= 0.5;
    v -= 0.5;
    const int x0 = int(std::floor(u)), y0 = int(std::floor(v));
    const double fx = u - x0, fy = v - y0;
    auto px = [&](int x, int y) -> double {
        if (x < 0 || y < 0 || x >= n || y >= n) return 0.0;
        return g.image[std::size_t(y) * n + x];
    };
    return float((1 - fy) * ((1 - fx) * px(x0, y0) + fx * px(x0 + 1, y0)) +
                 fy * ((1 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1)));
}

}  // namespace

Frame render(const SceneState& state) {
    const int n = state.image_size;
    Frame f;
    f.size = n;
    f.pixels.assign(std::size_t(n) * n, float(state.background));
    f.label.assign(std::size_t(n) * n, kBackground);

    std::vector<const SceneObject*> order;
    for (const auto& o : state.objects) order.push_back(&o);
    std::stable_sort(order.begin(), order.end(),
                     [](const SceneObject* a, const SceneObject* b) { return draw_rank(a->kind) < draw_rank(b->kind); });

    for (const SceneObject* o : order) {
        std::uint8_t cls = kWall;
        if (o->kind == ObjectKind::static_square) cls = kStaticSquare;
        if (o->kind == ObjectKind::circle) cls = kCircle;
        if (o->kind == ObjectKind::dynamic_square) cls = std::uint8_t(kFirstDigitClass + (o->digit ? o->digit->digit : 0));

        const int x0 = std::max(0, int(std::floor(o->left()))), x1 = std::min(n, int(std::ceil(o->right())) + 1);
        const int y0 = std::max(0, int(std::floor(o->top()))), y1 = std::min(n, int(std::ceil(o->bottom())) + 1);
        for (int y = y0; y < y1; ++y) {
            const double cy = y + 0.5;
            for (int x = x0; x < x1; ++x) {
                const double cx = x + 0.5;
                double value = o->body_color;
                if (o->kind == ObjectKind::circle) {
                    const double dx = cx - o->x, dy = cy - o->y;
                    if (dx * dx + dy * dy >= o->radius * o->radius) continue;
                } else {
                    if (cx < o->left() || cx >= o->right() || cy < o->top() || cy >= o->bottom()) continue;
                    if (o->digit) {
                        const double u = (cx - o->left()) / (2 * o->half_w) * mnist::kGlyphSize;
                        const double v = (cy - o->top()) / (2 * o->half_h) * mnist::kGlyphSize;
                        if (glyph_at(*o->digit, u, v) > state.digit_threshold) value = o->digit_color;
                    }
                }
                const std::size_t at = std::size_t(y) * n + x;
                f.pixels[at] = float(value);
                f.label[at] = cls;
            }
        }
    }
    return f;
}

double Perturbation::offset(int t, int x, int y) const {
    double v = 0.0;
    if (t >= global_onset) v += global_amplitude * std::pow(global_decay, t - global_onset);
    if (t >= region_onset && x >= region_x0 && x < region_x1 && y >= region_y0 && y < region_y1) {
        v += region_amplitude * std::pow(region_decay, t - region_onset);
    }
    return v;
}

Perturbation sample_perturbation(const SceneConfig& config, std::mt19937_64& rng) {
    Perturbation p;
    p.noise_sigma = config.noise_sigma.sample(rng);
    p.global_amplitude = config.offset_amplitude.sample(rng);
    p.global_decay = config.offset_decay.sample(rng);
    p.global_onset = config.offset_onset.sample(rng);
    p.region_amplitude = config.offset_amplitude.sample(rng);
    p.region_decay = config.offset_decay.sample(rng);
    p.region_onset = config.offset_onset.sample(rng);
    const int n = config.image_size, m = config.min_region_size;
    p.region_x0 = std::uniform_int_distribution<int>(0, n - m)(rng);
    p.region_x1 = std::uniform_int_distribution<int>(p.region_x0 + m, n)(rng);
    p.region_y0 = std::uniform_int_distribution<int>(0, n - m)(rng);
    p.region_y1 = std::uniform_int_distribution<int>(p.region_y0 + m, n)(rng);
    return p;
}

void perturb(std::vector<float>& frames, int frame_count, int channels, int size, const Perturbation& p,
             std::mt19937_64& rng, bool clip) {
    const std::size_t plane = std::size_t(size) * size;
    if (frames.size() != plane * channels * frame_count) throw std::invalid_argument("perturb: frame buffer size mismatch");
    std::normal_distribution<double> noise(0.0, p.noise_sigma > 0 ? p.noise_sigma : 1.0);
    for (int t = 0; t < frame_count; ++t) {
        for (int c = 0; c < channels; ++c) {
            float* img = frames.data() + (std::size_t(t) * channels + c) * plane;
            for (int y = 0; y < size; ++y) {
                for (int x = 0; x < size; ++x) {
                    double v = img[std::size_t(y) * size + x] + p.offset(t, x, y);
                    if (p.noise_sigma > 0) v += noise(rng);
                    if (clip) v = std::clamp(v, 0.0, 1.0);
                    img[std::size_t(y) * size + x] = float(v);
                }
            }
        }
    }
}

SequenceSample generate_sequence(const SceneConfig& config, const mnist::GlyphSource& glyphs,
                                 mnist::GlyphSplit glyph_split, std::mt19937_64& rng) {
    SceneState state = sample_scene(config, glyphs, glyph_split, rng);
    SequenceSample out;
    out.frames_count = config.sequence_length;
    out.channels = config.channels;
    out.size = config.image_size;
    const std::size_t plane = std::size_t(out.size) * out.size;
    out.clean_frames.reserve(plane * out.channels * out.frames_count);
    for (int t = 0; t < config.sequence_length; ++t) {
        if (t > 0) state = step(state);
        Frame f = render(state);
        for (int c = 0; c < out.channels; ++c) out.clean_frames.insert(out.clean_frames.end(), f.pixels.begin(), f.pixels.end());
        if (t + 1 == config.sequence_length) out.label = std::move(f.label);
    }
    const Perturbation p = sample_perturbation(config, rng);
    out.frames = out.clean_frames;
    perturb(out.frames, out.frames_count, out.channels, out.size, p, rng);
    return out;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t sequence_seed(std::uint64_t global_seed, const std::string& stream, std::uint64_t index) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the stream name
    for (unsigned char ch : stream) h = (h ^ ch) * 0x100000001b3ULL;
    return splitmix(splitmix(global_seed ^ h) + index);
}

}  // namespace rfcnet::scene
