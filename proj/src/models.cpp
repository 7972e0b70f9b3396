#include "rfcnet/models.hpp"

#include <cstdio>
#include <map>
#include <sstream>

namespace rfcnet::models {

using nn::FilterKind;

Family parse_family(const std::string& s) {
    if (s == "fcd") return Family::fcd;
    if (s == "rfcd") return Family::rfcd;
    if (s == "rm_gf") return Family::rm_gf;
    if (s == "tm_3d") return Family::tm_3d;
    if (s == "tm_st") return Family::tm_st;
    throw BadSpec("unknown model family '" + s + "'");
}

std::string to_string(Family f) {
    switch (f) {
        case Family::fcd: return "fcd";
        case Family::rfcd: return "rfcd";
        case Family::rm_gf: return "rm_gf";
        case Family::tm_3d: return "tm_3d";
        case Family::tm_st: return "tm_st";
    }
    return "?";
}

void ModelSpec::validate() const {
    auto fail = [this](const std::string& what) { throw BadSpec("model '" + name + "': " + what); };
    if (depth < 1) fail("depth must be >= 1");
    if (layers_per_db < 1) fail("layers_per_db must be >= 1");
    if (growth < 1) fail("growth must be >= 1");
    if (first_conv_features < 1) fail("first_conv_features must be >= 1");
    if (n_classes != 14) fail("n_classes must be 14");
    if (sequence_length < 1) fail("sequence_length must be >= 1");
    if (input_channels < 1) fail("input_channels must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (family == Family::rfcd) {
        if (!fm_kind) fail("rfcd needs fm_kind");
        if (static_cast<int>(hidden_kernel_sizes.size()) != block_count()) {
            fail("hidden_kernel_sizes has " + std::to_string(hidden_kernel_sizes.size()) + " entries, depth " +
                 std::to_string(depth) + " needs " + std::to_string(block_count()));
        }
        for (int k : hidden_kernel_sizes) {
            if (k < 1 || k % 2 == 0) fail("hidden kernel sizes must be odd and positive");
        }
        if (*fm_kind == FilterKind::ed) {
            try {
                nn::encoder_width(alpha_ed.value_or(1.0), growth);
            } catch (const nn::BadAlpha& e) {
                fail(e.what());
            }
        }
    } else {
        if (fm_kind || alpha_ed) fail("fm_kind/alpha_ed are only valid for family rfcd");
        if (!hidden_kernel_sizes.empty()) fail("hidden_kernel_sizes are only valid for family rfcd");
    }
    if (family == Family::rm_gf) {
        if (global_hidden_kernel < 1 || global_hidden_kernel % 2 == 0) fail("global_hidden_kernel must be odd");
        try {
            nn::encoder_width(global_alpha_ed, layers_per_db * growth);
        } catch (const nn::BadAlpha& e) {
            fail(e.what());
        }
    }
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
    j = nlohmann::json{{"name", s.name},
                       {"family", to_string(s.family)},
                       {"depth", s.depth},
                       {"layers_per_db", s.layers_per_db},
                       {"growth", s.growth},
                       {"first_conv_features", s.first_conv_features},
                       {"n_classes", s.n_classes},
                       {"sequence_length", s.sequence_length},
                       {"input_channels", s.input_channels},
                       {"dropout", s.dropout}};
    if (s.fm_kind) j["fm_kind"] = nn::to_string(*s.fm_kind);
    if (s.alpha_ed) j["alpha_ed"] = *s.alpha_ed;
    if (!s.hidden_kernel_sizes.empty()) j["hidden_kernel_sizes"] = s.hidden_kernel_sizes;
    if (s.family == Family::rm_gf) {
        j["global_alpha_ed"] = s.global_alpha_ed;
        j["global_hidden_kernel"] = s.global_hidden_kernel;
    }
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
    static const std::vector<std::string> known{"name",           "family",
                                                "depth",          "layers_per_db",
                                                "growth",         "first_conv_features",
                                                "fm_kind",        "alpha_ed",
                                                "hidden_kernel_sizes", "global_alpha_ed",
                                                "global_hidden_kernel", "n_classes",
                                                "sequence_length", "input_channels",
                                                "dropout"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw BadSpec("unknown model spec key '" + key + "'");
        }
    }
    s = ModelSpec{};
    s.name = j.value("name", std::string());
    s.family = parse_family(j.at("family").get<std::string>());
    s.depth = j.value("depth", s.depth);
    s.layers_per_db = j.value("layers_per_db", s.layers_per_db);
    s.growth = j.value("growth", s.growth);
    s.first_conv_features = j.value("first_conv_features", s.first_conv_features);
    if (j.contains("fm_kind")) s.fm_kind = nn::parse_filter_kind(j.at("fm_kind").get<std::string>());
    if (j.contains("alpha_ed")) s.alpha_ed = j.at("alpha_ed").get<double>();
    if (j.contains("hidden_kernel_sizes")) s.hidden_kernel_sizes = j.at("hidden_kernel_sizes").get<std::vector<int>>();
    s.global_alpha_ed = j.value("global_alpha_ed", s.global_alpha_ed);
    s.global_hidden_kernel = j.value("global_hidden_kernel", s.global_hidden_kernel);
    s.n_classes = j.value("n_classes", s.n_classes);
    s.sequence_length = j.value("sequence_length", s.sequence_length);
    s.input_channels = j.value("input_channels", s.input_channels);
    s.dropout = j.value("dropout", s.dropout);
}

const std::vector<std::string>& zoo_names() {
    static const std::vector<std::string> names{"fcd_b",    "fcd_s", "rfcd_ff", "rfcd_res", "rfcd_ed1",
                                                "rfcd_ed2", "rm_gf", "tm_3d",   "tm_st"};
    return names;
}

namespace {

ModelSpec make_spec(const std::string& name, int layers, int growth, int first) {
    ModelSpec s;
    s.name = name;
    s.depth = 2;
    s.layers_per_db = layers;
    s.growth = growth;
    s.first_conv_features = first;
    if (name == "fcd_b" || name == "fcd_s") {
        s.family = Family::fcd;
    } else if (name.rfind("rfcd_", 0) == 0) {
        s.family = Family::rfcd;
        s.hidden_kernel_sizes = {9, 5, 3, 5, 9};
        if (name == "rfcd_ff") s.fm_kind = FilterKind::ff;
        if (name == "rfcd_res") s.fm_kind = FilterKind::res;
        if (name == "rfcd_ed1") {
            s.fm_kind = FilterKind::ed;
            s.alpha_ed = 1.0;
        }
        if (name == "rfcd_ed2") {
            s.fm_kind = FilterKind::ed;
            s.alpha_ed = 2.0;
        }
        if (!s.fm_kind) throw BadSpec("unknown model '" + name + "'");
    } else if (name == "rm_gf") {
        s.family = Family::rm_gf;
    } else if (name == "tm_3d") {
        s.family = Family::tm_3d;
    } else if (name == "tm_st") {
        s.family = Family::tm_st;
    } else {
        throw BadSpec("unknown model '" + name + "'");
    }
    return s;
}

}  // namespace

ModelSpec zoo_spec(const std::string& name) {
    if (name == "fcd_b") return make_spec(name, 9, 12, 48);
    // Non-recurrent baselines are widened/narrowed to match rfcd_ff's parameter budget.
    if (name == "tm_st") return make_spec(name, 7, 12, 48);
    if (name == "tm_3d") return make_spec(name, 7, 7, 48);
    return make_spec(name, 7, 8, 48);
}

ModelSpec tiny_spec(const std::string& name) {
    if (name == "fcd_b") return make_spec(name, 3, 8, 16);
    if (name == "tm_st") return make_spec(name, 2, 9, 16);
    if (name == "tm_3d") return make_spec(name, 2, 5, 16);
    return make_spec(name, 2, 6, 16);
}

std::string format_param_table(const std::string& name, const ParamTable& t) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-20s %12s\n", ("model " + name).c_str(), "parameters");
    out << line;
    const std::pair<const char*, std::size_t> rows[] = {{"feature_extractor", t.feature_extractor},
                                                        {"filter_modules", t.filter_modules},
                                                        {"upsampling", t.upsampling},
                                                        {"classifier", t.classifier},
                                                        {"total", t.total()}};
    for (const auto& [label, n] : rows) {
        std::snprintf(line, sizeof line, "%-20s %12zu\n", label, n);
        out << line;
    }
    return out.str();
}

// Network

template <typename T>
Network<T>::Network(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    const bool temporal = spec_.family == Family::tm_3d;
    const int in = spec_.family == Family::tm_st ? spec_.input_channels * spec_.sequence_length
                                                 : spec_.input_channels;
    const int d = spec_.depth, layers = spec_.layers_per_db, k = spec_.growth;
    const int new_channels = layers * k;

    first_ = nn::Conv<T>(in, spec_.first_conv_features, 3, true, rng, temporal);

    auto add_block = [&](int in_channels, int position) {
        if (spec_.family == Family::rfcd) {
            nn::FilterModuleSpec fm;
            fm.kind = *spec_.fm_kind;
            fm.alpha_ed = spec_.alpha_ed.value_or(1.0);
            fm.hidden_kernel = spec_.hidden_kernel_sizes[position];
            recurrent_blocks_.emplace_back(in_channels, layers, k, spec_.dropout, fm, rng);
        } else {
            plain_blocks_.emplace_back(in_channels, layers, k, spec_.dropout, rng, temporal);
        }
        return in_channels + new_channels;
    };

    int c = spec_.first_conv_features;
    std::vector<int> skips;
    for (int i = 0; i < d; ++i) {
        c = add_block(c, i);
        skips.push_back(c);
        downs_.emplace_back(c, spec_.dropout, rng);
    }
    add_block(c, d);
    for (int i = 0; i < d; ++i) {
        ups_.emplace_back(new_channels, new_channels, rng);
        c = add_block(new_channels + skips[d - 1 - i], d + 1 + i);
    }
    if (spec_.family == Family::rm_gf) {
        nn::FilterModuleSpec fm;
        fm.kind = FilterKind::ed;
        fm.channels = new_channels;
        fm.alpha_ed = spec_.global_alpha_ed;
        fm.hidden_kernel = spec_.global_hidden_kernel;
        global_filter_.emplace(fm, rng);
    }
    classifier_ = nn::Conv<T>(c, spec_.n_classes, 1, true, rng);
}

template <typename T>
std::size_t Network<T>::state_count() const {
    std::size_t n = 0;
    for (const auto& b : recurrent_blocks_) n += b.state_count();
    if (global_filter_) ++n;
    return n;
}

template <typename T>
nn::BlockOutput<T> Network<T>::run_block(std::size_t index, const Var<T>& x,
                                         std::span<nn::ConvLSTMState<T>>& states, const nn::RunContext& ctx) {
    if (recurrent_blocks_.empty()) return plain_blocks_[index].forward(x, ctx);
    auto& block = recurrent_blocks_[index];
    auto mine = states.first(block.state_count());
    states = states.subspan(block.state_count());
    return block.forward(x, mine, ctx);
}

template <typename T>
void Network<T>::check_frame(const Shape& s) const {
    const int factor = 1 << spec_.depth;
    if (s.h % factor != 0 || s.w % factor != 0) {
        throw ShapeMismatch("frame " + s.str() + " spatial size must be divisible by " + std::to_string(factor));
    }
}

template <typename T>
Var<T> Network<T>::trunk(const Var<T>& input, std::span<nn::ConvLSTMState<T>> states, const nn::RunContext& ctx,
                         bool classify, int last_frame_batch) {
    check_frame(input.shape());
    const int d = spec_.depth;
    Var<T> x = first_.forward(input, ctx);
    std::vector<Var<T>> skips;
    for (int i = 0; i < d; ++i) {
        auto out = run_block(i, x, states, ctx);
        skips.push_back(out.stack);
        x = downs_[i].forward(out.stack, ctx);
    }
    auto out = run_block(d, x, states, ctx);
    Var<T> block_input;
    for (int i = 0; i < d; ++i) {
        std::vector<Var<T>> parts{ups_[i].forward(out.new_features), skips[d - 1 - i]};
        block_input = ops::concat_channels<T>(parts);
        out = run_block(d + 1 + i, block_input, states, ctx);
    }
    Var<T> final_stack = out.stack;
    if (global_filter_) {
        auto [filtered, next] = global_filter_->forward(out.new_features, states[0], ctx);
        states[0] = std::move(next);
        std::vector<Var<T>> parts{block_input, filtered};
        final_stack = ops::concat_channels<T>(parts);
    }
    if (!classify) return Var<T>();
    if (last_frame_batch > 0) {
        final_stack = ops::slice_batch(final_stack, final_stack.shape().n - last_frame_batch, last_frame_batch);
    }
    return classifier_.forward(final_stack, ctx);
}

template <typename T>
Var<T> Network<T>::forward_frame(const Var<T>& frame, std::span<nn::ConvLSTMState<T>> states,
                                 const nn::RunContext& ctx, bool classify) {
    if (states.size() != state_count()) {
        throw nn::StateCountMismatch("network needs " + std::to_string(state_count()) + " states, got " +
                                     std::to_string(states.size()));
    }
    if (spec_.family == Family::tm_st || spec_.family == Family::tm_3d) {
        throw WrongSequenceLength("model '" + spec_.name + "' consumes whole clips, not single frames");
    }
    if (frame.shape().c != spec_.input_channels) {
        throw ShapeMismatch("frame " + frame.shape().str() + " does not have " +
                            std::to_string(spec_.input_channels) + " channels");
    }
    return trunk(frame, states, ctx, classify, 0);
}

template <typename T>
Var<T> Network<T>::forward_sequence(std::span<const Var<T>> frames, const nn::RunContext& ctx) {
    if (frames.empty()) throw WrongSequenceLength("empty frame sequence");
    for (const auto& f : frames) {
        if (!(f.shape() == frames[0].shape())) {
            throw ShapeMismatch("frames differ in shape: " + f.shape().str() + " vs " + frames[0].shape().str());
        }
        if (f.shape().c != spec_.input_channels) {
            throw ShapeMismatch("frame " + f.shape().str() + " does not have " +
                                std::to_string(spec_.input_channels) + " channels");
        }
    }
    const int t_len = static_cast<int>(frames.size());
    if (spec_.family != Family::fcd && t_len != spec_.sequence_length) {
        throw WrongSequenceLength("model '" + spec_.name + "' expects " + std::to_string(spec_.sequence_length) +
                                  " frames, got " + std::to_string(t_len));
    }
    switch (spec_.family) {
        case Family::fcd: return trunk(frames.back(), {}, ctx, true, 0);
        case Family::rfcd:
        case Family::rm_gf: {
            std::vector<nn::ConvLSTMState<T>> states(state_count());
            Var<T> scores;
            for (int t = 0; t < t_len; ++t) scores = forward_frame(frames[t], states, ctx, t == t_len - 1);
            return scores;
        }
        case Family::tm_st: return trunk(ops::concat_channels<T>(frames), {}, ctx, true, 0);
        case Family::tm_3d: {
            nn::RunContext clip = ctx;
            clip.clip_length = t_len;
            return trunk(ops::concat_batch<T>(frames), {}, clip, true, frames[0].shape().n);
        }
    }
    return Var<T>();
}

template <typename T>
nn::ParamList<T> Network<T>::parameters() {
    nn::ParamList<T> out;
    first_.collect("first", out);
    const int d = spec_.depth;
    auto block_name = [d](int b) {
        if (b < d) return "down" + std::to_string(b);
        if (b == d) return std::string("mid");
        return "up" + std::to_string(b - d - 1);
    };
    auto collect_block = [&](int b) {
        if (recurrent_blocks_.empty()) {
            plain_blocks_[b].collect(block_name(b), out);
        } else {
            recurrent_blocks_[b].collect(block_name(b), out);
        }
    };
    for (int i = 0; i < d; ++i) {
        collect_block(i);
        downs_[i].collect("td" + std::to_string(i), out);
    }
    collect_block(d);
    for (int i = 0; i < d; ++i) {
        ups_[i].collect("tu" + std::to_string(i), out);
        collect_block(d + 1 + i);
    }
    if (global_filter_) global_filter_->collect("gfm", out);
    classifier_.collect("classifier", out);
    return out;
}

template <typename T>
ParamTable Network<T>::count_params() {
    ParamTable t;
    for (const auto& [name, v] : parameters().params) {
        const std::size_t n = v->value().size();
        if (name.rfind("gfm", 0) == 0 || name.find(".fm") != std::string::npos) {
            t.filter_modules += n;
        } else if (name.rfind("classifier", 0) == 0) {
            t.classifier += n;
        } else if (name.rfind("up", 0) == 0 || name.rfind("tu", 0) == 0) {
            t.upsampling += n;
        } else {
            t.feature_extractor += n;
        }
    }
    return t;
}

template <typename T>
std::size_t Network<T>::load_matching(Network& source) {
    auto src = source.parameters();
    std::map<std::string, Var<T>*> params(src.params.begin(), src.params.end());
    std::map<std::string, Tensor<T>*> buffers(src.buffers.begin(), src.buffers.end());
    auto dst = parameters();
    std::size_t copied = 0;
    for (auto& [name, v] : dst.params) {
        auto it = params.find(name);
        if (it != params.end() && it->second->shape() == v->shape()) {
            v->mutable_value() = it->second->value();
            ++copied;
        }
    }
    for (auto& [name, b] : dst.buffers) {
        auto it = buffers.find(name);
        if (it != buffers.end() && it->second->shape() == b->shape()) {
            *b = *it->second;
            ++copied;
        }
    }
    return copied;
}

template <typename T>
std::vector<nn::FilterModule<T>*> Network<T>::filter_modules() {
    std::vector<nn::FilterModule<T>*> out;
    for (auto& b : recurrent_blocks_) {
        for (auto& f : b.filters()) out.push_back(&f);
    }
    if (global_filter_) out.push_back(&*global_filter_);
    return out;
}

template class Network<float>;
template class Network<double>;

}  // namespace rfcnet::models
