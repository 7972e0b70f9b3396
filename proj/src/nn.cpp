#include "rfcnet/nn.hpp"

#include <cmath>

namespace rfcnet::nn {

namespace {

template <typename T>
Var<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> constant_param(int n, T value) {
    return Var<T>(Tensor<T>(Shape{n, 1, 1, 1}, value), true);
}

// Shifts a frame-major clip by `offset` frames with zero fill: result frame t
// holds input frame t + offset.
template <typename T>
Var<T> shift_frames(const Var<T>& x, int clip_length, int offset) {
    const Shape& s = x.shape();
    const int batch = s.n / clip_length;
    const int keep = (clip_length - std::abs(offset)) * batch;
    Var<T> zeros(Tensor<T>(Shape{std::abs(offset) * batch, s.c, s.h, s.w}));
    if (offset > 0) {
        std::vector<Var<T>> parts{ops::slice_batch(x, offset * batch, keep), zeros};
        return ops::concat_batch<T>(parts);
    }
    std::vector<Var<T>> parts{zeros, ops::slice_batch(x, 0, keep)};
    return ops::concat_batch<T>(parts);
}

}  // namespace

int encoder_width(double alpha, int channels) {
    const int width = static_cast<int>(std::floor(alpha * channels + 0.5));
    if (width < 1) {
        throw BadAlpha("alpha_ed=" + std::to_string(alpha) + " with " + std::to_string(channels) +
                       " channels yields an empty encoder");
    }
    return width;
}

FilterKind parse_filter_kind(const std::string& s) {
    if (s == "ff") return FilterKind::ff;
    if (s == "res") return FilterKind::res;
    if (s == "ed") return FilterKind::ed;
    if (s == "identity") return FilterKind::identity;
    throw std::invalid_argument("unknown filter kind '" + s + "'");
}

std::string to_string(FilterKind k) {
    switch (k) {
        case FilterKind::ff: return "ff";
        case FilterKind::res: return "res";
        case FilterKind::ed: return "ed";
        case FilterKind::identity: return "identity";
    }
    return "?";
}

// BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels)
    : gamma_(constant_param<T>(channels, T(1))),
      beta_(constant_param<T>(channels, T(0))),
      running_mean_(Shape{channels, 1, 1, 1}, T(0)),
      running_var_(Shape{channels, 1, 1, 1}, T(1)) {}

template <typename T>
Var<T> BatchNorm2d<T>::forward(const Var<T>& x, const RunContext& ctx) {
    return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, ctx.training);
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.params.emplace_back(prefix + ".gamma", &gamma_);
    out.params.emplace_back(prefix + ".beta", &beta_);
    out.buffers.emplace_back(prefix + ".running_mean", &running_mean_);
    out.buffers.emplace_back(prefix + ".running_var", &running_var_);
}

// Conv

template <typename T>
Conv<T>::Conv(int in, int out, int kernel, bool bias, std::mt19937_64& rng, bool temporal)
    : in_(in), out_(out), kernel_(kernel) {
    const int taps = temporal ? 3 : 1;
    const std::size_t fan_in = static_cast<std::size_t>(in) * kernel * kernel * taps;
    for (int t = 0; t < taps; ++t) weights_.push_back(he_normal<T>(Shape{out, in, kernel, kernel}, fan_in, rng));
    if (bias) bias_ = constant_param<T>(out, T(0));
}

template <typename T>
Var<T> Conv<T>::forward(const Var<T>& x, const RunContext& ctx) const {
    if (x.shape().c != in_) {
        throw ShapeMismatch("conv expects " + std::to_string(in_) + " channels, got " + x.shape().str());
    }
    if (weights_.size() == 1) return ops::conv2d(x, weights_[0], bias_);
    if (ctx.clip_length < 1 || x.shape().n % ctx.clip_length != 0) {
        throw ShapeMismatch("spatio-temporal conv: batch " + std::to_string(x.shape().n) +
                            " is not a multiple of clip length " + std::to_string(ctx.clip_length));
    }
    // Taps 0, 1, 2 look at frames t-1, t, t+1.
    Var<T> y = ops::conv2d(x, weights_[1], bias_);
    if (ctx.clip_length > 1) {
        y = ops::add(y, ops::conv2d(shift_frames(x, ctx.clip_length, -1), weights_[0], Var<T>()));
        y = ops::add(y, ops::conv2d(shift_frames(x, ctx.clip_length, 1), weights_[2], Var<T>()));
    }
    return y;
}

template <typename T>
void Conv<T>::collect(const std::string& prefix, ParamList<T>& out) {
    if (weights_.size() == 1) {
        out.params.emplace_back(prefix + ".weight", &weights_[0]);
    } else {
        for (std::size_t t = 0; t < weights_.size(); ++t) {
            out.params.emplace_back(prefix + ".weight_t" + std::to_string(t), &weights_[t]);
        }
    }
    if (bias_.defined()) out.params.emplace_back(prefix + ".bias", &bias_);
}

// DenseUnit

template <typename T>
DenseUnit<T>::DenseUnit(int in_channels, int growth, double dropout, std::mt19937_64& rng, bool temporal)
    : in_(in_channels),
      growth_(growth),
      dropout_(dropout),
      bn_(in_channels),
      conv_(in_channels, growth, 3, true, rng, temporal) {
    if (growth <= 0) throw std::invalid_argument("dense unit growth must be positive");
}

template <typename T>
Var<T> DenseUnit<T>::forward(const Var<T>& stack, const RunContext& ctx) {
    if (stack.shape().c != in_) {
        throw ShapeMismatch("dense unit declared " + std::to_string(in_) + " input channels, got " +
                            stack.shape().str());
    }
    auto y = conv_.forward(ops::relu(bn_.forward(stack, ctx)), ctx);
    if (dropout_ > 0.0 && ctx.training) y = ops::dropout(y, dropout_, true, *ctx.rng);
    return y;
}

template <typename T>
void DenseUnit<T>::collect(const std::string& prefix, ParamList<T>& out) {
    bn_.collect(prefix + ".bn", out);
    conv_.collect(prefix + ".conv", out);
}

// DenseBlock

template <typename T>
DenseBlock<T>::DenseBlock(int in_channels, int layers, int growth, double dropout, std::mt19937_64& rng,
                          bool temporal)
    : in_(in_channels), growth_(growth) {
    for (int l = 0; l < layers; ++l) units_.emplace_back(in_channels + l * growth, growth, dropout, rng, temporal);
}

template <typename T>
BlockOutput<T> DenseBlock<T>::forward(const Var<T>& input, const RunContext& ctx) {
    if (input.shape().c != in_) {
        throw ShapeMismatch("dense block declared " + std::to_string(in_) + " input channels, got " +
                            input.shape().str());
    }
    std::vector<Var<T>> stack_parts{input};
    std::vector<Var<T>> fresh;
    Var<T> stack = input;
    for (auto& unit : units_) {
        auto r = unit.forward(stack, ctx);
        fresh.push_back(r);
        stack_parts.push_back(r);
        stack = ops::concat_channels<T>(stack_parts);
    }
    Var<T> new_features = fresh.empty() ? Var<T>() : ops::concat_channels<T>(fresh);
    return {stack, new_features};
}

template <typename T>
void DenseBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t l = 0; l < units_.size(); ++l) units_[l].collect(prefix + ".du" + std::to_string(l), out);
}

// ConvLSTMCell

template <typename T>
ConvLSTMCell<T>::ConvLSTMCell(int in_channels, int hidden_channels, int hidden_kernel, std::mt19937_64& rng,
                              int input_kernel)
    : in_(in_channels),
      hidden_(hidden_channels),
      hidden_kernel_(hidden_kernel),
      input_conv_(in_channels, 4 * hidden_channels, input_kernel, true, rng),
      hidden_conv_(hidden_channels, 4 * hidden_channels, hidden_kernel, false, rng) {
    if (hidden_kernel % 2 == 0 || input_kernel % 2 == 0) {
        throw std::invalid_argument("conv-lstm kernels must be odd for same padding");
    }
    // Forget-gate bias starts at 1.
    auto& b = input_conv_.bias().mutable_value();
    for (int c = hidden_channels; c < 2 * hidden_channels; ++c) b[c] = T(1);
}

template <typename T>
ConvLSTMState<T> ConvLSTMCell<T>::step(const Var<T>& e, const ConvLSTMState<T>& prev,
                                       const RunContext& ctx) const {
    const Shape& es = e.shape();
    if (es.c != in_) {
        throw ShapeMismatch("conv-lstm expects " + std::to_string(in_) + " input channels, got " + es.str());
    }
    auto z = input_conv_.forward(e, ctx);
    if (!prev.empty()) {
        const Shape expected{es.n, hidden_, es.h, es.w};
        if (!(prev.h.shape() == expected) || !(prev.c.shape() == expected)) {
            throw ShapeMismatch("conv-lstm state " + prev.h.shape().str() + " does not match input " + es.str());
        }
        z = ops::add(z, hidden_conv_.forward(prev.h, ctx));
    }
    auto i = ops::sigmoid(ops::slice_channels(z, 0, hidden_));
    auto f = ops::sigmoid(ops::slice_channels(z, hidden_, hidden_));
    auto o = ops::sigmoid(ops::slice_channels(z, 2 * hidden_, hidden_));
    auto g = ops::tanh(ops::slice_channels(z, 3 * hidden_, hidden_));
    auto c = ops::mul(i, g);
    if (!prev.empty()) c = ops::add(ops::mul(f, prev.c), c);
    auto h = ops::mul(o, ops::tanh(c));
    return {c, h};
}

template <typename T>
void ConvLSTMCell<T>::collect(const std::string& prefix, ParamList<T>& out) {
    input_conv_.collect(prefix + ".input", out);
    hidden_conv_.collect(prefix + ".hidden", out);
}

template <typename T>
std::size_t ConvLSTMCell<T>::parameter_count(int in_channels, int hidden_channels, int input_kernel,
                                             int hidden_kernel) {
    const std::size_t ci = in_channels, ch = hidden_channels;
    return 4 * (ci * ch * input_kernel * input_kernel + ch * ch * hidden_kernel * hidden_kernel + ch);
}

// FilterModule

template <typename T>
FilterModule<T>::FilterModule(const FilterModuleSpec& spec, std::mt19937_64& rng) : spec_(spec) {
    if (spec.channels <= 0) throw std::invalid_argument("filter module needs positive channel count");
    if (spec.kind == FilterKind::identity) return;
    bn_ = BatchNorm2d<T>(spec.channels);
    if (spec.kind == FilterKind::ed) {
        const int hidden = encoder_width(spec.alpha_ed, spec.channels);
        cell_ = ConvLSTMCell<T>(spec.channels, hidden, spec.hidden_kernel, rng);
        decoder_ = DenseUnit<T>(hidden, spec.channels, 0.0, rng);
    } else {
        cell_ = ConvLSTMCell<T>(spec.channels, spec.channels, spec.hidden_kernel, rng);
    }
}

template <typename T>
std::pair<Var<T>, ConvLSTMState<T>> FilterModule<T>::forward(const Var<T>& r_bar, const ConvLSTMState<T>& state,
                                                             const RunContext& ctx) {
    if (r_bar.shape().c != spec_.channels) {
        throw ShapeMismatch("filter module expects " + std::to_string(spec_.channels) + " channels, got " +
                            r_bar.shape().str());
    }
    if (spec_.kind == FilterKind::identity) return {r_bar, state};
    auto next = cell_.step(ops::relu(bn_.forward(r_bar, ctx)), state, ctx);
    switch (spec_.kind) {
        case FilterKind::ff: return {next.h, next};
        case FilterKind::res: return {ops::add(r_bar, next.h), next};
        case FilterKind::ed: return {decoder_.forward(next.h, ctx), next};
        case FilterKind::identity: break;
    }
    return {r_bar, state};
}

template <typename T>
void FilterModule<T>::collect(const std::string& prefix, ParamList<T>& out) {
    if (spec_.kind == FilterKind::identity) return;
    bn_.collect(prefix + ".bn", out);
    cell_.collect(prefix + ".cell", out);
    if (spec_.kind == FilterKind::ed) decoder_.collect(prefix + ".decoder", out);
}

// RecurrentDenseBlock

template <typename T>
RecurrentDenseBlock<T>::RecurrentDenseBlock(int in_channels, int layers, int growth, double dropout,
                                            FilterModuleSpec filter, std::mt19937_64& rng)
    : in_(in_channels), growth_(growth) {
    filter.channels = growth;
    for (int l = 0; l < layers; ++l) {
        units_.emplace_back(in_channels + l * growth, growth, dropout, rng);
        filters_.emplace_back(filter, rng);
    }
}

template <typename T>
BlockOutput<T> RecurrentDenseBlock<T>::forward(const Var<T>& input, std::span<ConvLSTMState<T>> states,
                                               const RunContext& ctx) {
    if (states.size() != filters_.size()) {
        throw StateCountMismatch("recurrent dense block has " + std::to_string(filters_.size()) +
                                 " filter modules but received " + std::to_string(states.size()) + " states");
    }
    if (input.shape().c != in_) {
        throw ShapeMismatch("recurrent dense block declared " + std::to_string(in_) + " input channels, got " +
                            input.shape().str());
    }
    std::vector<Var<T>> stack_parts{input};
    std::vector<Var<T>> fresh;
    Var<T> stack = input;
    for (std::size_t l = 0; l < units_.size(); ++l) {
        auto r_bar = units_[l].forward(stack, ctx);
        auto [r_hat, next] = filters_[l].forward(r_bar, states[l], ctx);
        states[l] = std::move(next);
        fresh.push_back(r_hat);
        stack_parts.push_back(r_hat);
        stack = ops::concat_channels<T>(stack_parts);
    }
    Var<T> new_features = fresh.empty() ? Var<T>() : ops::concat_channels<T>(fresh);
    return {stack, new_features};
}

template <typename T>
void RecurrentDenseBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
    for (std::size_t l = 0; l < units_.size(); ++l) {
        units_[l].collect(prefix + ".du" + std::to_string(l), out);
        filters_[l].collect(prefix + ".fm" + std::to_string(l), out);
    }
}

// Transitions

template <typename T>
TransitionDown<T>::TransitionDown(int channels, double dropout, std::mt19937_64& rng)
    : dropout_(dropout), bn_(channels), conv_(channels, channels, 1, true, rng) {}

template <typename T>
Var<T> TransitionDown<T>::forward(const Var<T>& x, const RunContext& ctx) {
    auto y = conv_.forward(ops::relu(bn_.forward(x, ctx)), ctx);
    if (dropout_ > 0.0 && ctx.training) y = ops::dropout(y, dropout_, true, *ctx.rng);
    return ops::max_pool2(y);
}

template <typename T>
void TransitionDown<T>::collect(const std::string& prefix, ParamList<T>& out) {
    bn_.collect(prefix + ".bn", out);
    conv_.collect(prefix + ".conv", out);
}

template <typename T>
TransitionUp<T>::TransitionUp(int in_channels, int out_channels, std::mt19937_64& rng)
    : weight_(he_normal<T>(Shape{in_channels, out_channels, 3, 3}, static_cast<std::size_t>(in_channels) * 9, rng)),
      bias_(constant_param<T>(out_channels, T(0))) {}

template <typename T>
Var<T> TransitionUp<T>::forward(const Var<T>& x) const {
    return ops::conv_transpose2d_up(x, weight_, bias_);
}

template <typename T>
void TransitionUp<T>::collect(const std::string& prefix, ParamList<T>& out) {
    out.params.emplace_back(prefix + ".weight", &weight_);
    out.params.emplace_back(prefix + ".bias", &bias_);
}

template <typename T>
void randomize(ParamList<T>& params, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    for (auto& [name, v] : params.params) {
        for (auto& x : v->mutable_value().values()) x = static_cast<T>(dist(rng));
    }
}

#define RFCNET_INSTANTIATE_NN(T)                                        \
    template class BatchNorm2d<T>;                                      \
    template class Conv<T>;                                             \
    template class DenseUnit<T>;                                        \
    template class DenseBlock<T>;                                       \
    template class ConvLSTMCell<T>;                                     \
    template class FilterModule<T>;                                     \
    template class RecurrentDenseBlock<T>;                              \
    template class TransitionDown<T>;                                   \
    template class TransitionUp<T>;                                     \
    template void randomize(ParamList<T>&, std::mt19937_64&, double);

RFCNET_INSTANTIATE_NN(float)
RFCNET_INSTANTIATE_NN(double)

}  // namespace rfcnet::nn
