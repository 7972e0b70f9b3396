#pragma once

#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfcnet/ops.hpp"

namespace rfcnet::nn {

class BadAlpha : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class StateCountMismatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Named trainable parameters and non-trainable buffers of a module tree.
template <typename T>
struct ParamList {
    std::vector<std::pair<std::string, Var<T>*>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, v] : params) n += v->value().size();
        return n;
    }
};

/// Per-call execution settings.
struct RunContext {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // required when dropout is active
    // Frames folded into the batch dimension (frame-major) for spatio-temporal
    // convolutions; 1 for ordinary per-frame execution.
    int clip_length = 1;
};

/// round-half-up of alpha * channels; throws BadAlpha when the result is < 1.
int encoder_width(double alpha, int channels);

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);

    Var<T> forward(const Var<T>& x, const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

private:
    Var<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
};

/// Square "same"-padded convolution. With `temporal` set it becomes a 3xkxk
/// spatio-temporal convolution over frames folded into the batch dimension,
/// with zero padding in time.
template <typename T>
class Conv {
public:
    Conv() = default;
    Conv(int in, int out, int kernel, bool bias, std::mt19937_64& rng, bool temporal = false);

    Var<T> forward(const Var<T>& x, const RunContext& ctx) const;
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    Var<T>& bias() { return bias_; }
    std::vector<Var<T>>& weights() { return weights_; }

private:
    int in_ = 0, out_ = 0, kernel_ = 0;
    std::vector<Var<T>> weights_;  // one per temporal tap (1 or 3)
    Var<T> bias_;
};

/// Pre-activation unit: batch norm, ReLU, 3x3 convolution emitting `growth` maps.
template <typename T>
class DenseUnit {
public:
    DenseUnit() = default;
    DenseUnit(int in_channels, int growth, double dropout, std::mt19937_64& rng, bool temporal = false);

    Var<T> forward(const Var<T>& stack, const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return in_; }
    int growth() const { return growth_; }
    Conv<T>& conv() { return conv_; }

private:
    int in_ = 0, growth_ = 0;
    double dropout_ = 0.0;
    BatchNorm2d<T> bn_;
    Conv<T> conv_;
};

template <typename T>
struct BlockOutput {
    Var<T> stack;         // input plus every appended feature map
    Var<T> new_features;  // only the appended maps
};

template <typename T>
class DenseBlock {
public:
    DenseBlock() = default;
    DenseBlock(int in_channels, int layers, int growth, double dropout, std::mt19937_64& rng,
               bool temporal = false);

    BlockOutput<T> forward(const Var<T>& input, const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return in_; }
    int out_channels() const { return in_ + static_cast<int>(units_.size()) * growth_; }
    int new_channels() const { return static_cast<int>(units_.size()) * growth_; }
    std::vector<DenseUnit<T>>& units() { return units_; }

private:
    int in_ = 0, growth_ = 0;
    std::vector<DenseUnit<T>> units_;
};

/// Recurrent memory of one Conv-LSTM; both tensors are undefined before the first step.
template <typename T>
struct ConvLSTMState {
    Var<T> c;
    Var<T> h;
    bool empty() const { return !h.defined(); }
};

/// Convolutional LSTM cell: 3x3 (by default) input kernels, k_h x k_h hidden kernels.
///
/// Gates are stacked along the output channels of a single input convolution
/// and a single hidden convolution in the order input, forget, output, candidate:
///
///   i, f, o = sigmoid(W_e* e + W_h* h_prev + b)
///   c = f * c_prev + i * tanh(W_ec e + W_hc h_prev + b_c)
///   h = o * tanh(c)
///
/// The hidden convolution carries no bias; biases live on the input side.
template <typename T>
class ConvLSTMCell {
public:
    ConvLSTMCell() = default;
    ConvLSTMCell(int in_channels, int hidden_channels, int hidden_kernel, std::mt19937_64& rng,
                 int input_kernel = 3);

    /// Returns the new state; its `h` is the cell output.
    ConvLSTMState<T> step(const Var<T>& e, const ConvLSTMState<T>& prev, const RunContext& ctx) const;
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return in_; }
    int hidden_channels() const { return hidden_; }
    int hidden_kernel() const { return hidden_kernel_; }
    Conv<T>& input_conv() { return input_conv_; }
    Conv<T>& hidden_conv() { return hidden_conv_; }

    /// 4 * (C_in * C_h * k_e^2 + C_h^2 * k_h^2 + C_h)
    static std::size_t parameter_count(int in_channels, int hidden_channels, int input_kernel,
                                       int hidden_kernel);

private:
    int in_ = 0, hidden_ = 0, hidden_kernel_ = 0;
    Conv<T> input_conv_;
    Conv<T> hidden_conv_;
};

enum class FilterKind {
    ff,
    res,
    ed,
    identity,  // pass-through; exists only for reduction tests
};

FilterKind parse_filter_kind(const std::string& s);
std::string to_string(FilterKind k);

struct FilterModuleSpec {
    FilterKind kind = FilterKind::ff;
    int channels = 0;
    double alpha_ed = 1.0;
    int hidden_kernel = 3;
};

/// Replaces a crude feature map with a temporally filtered one of identical shape.
template <typename T>
class FilterModule {
public:
    FilterModule() = default;
    FilterModule(const FilterModuleSpec& spec, std::mt19937_64& rng);

    std::pair<Var<T>, ConvLSTMState<T>> forward(const Var<T>& r_bar, const ConvLSTMState<T>& state,
                                                const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    const FilterModuleSpec& spec() const { return spec_; }
    ConvLSTMCell<T>& cell() { return cell_; }
    int hidden_channels() const { return cell_.hidden_channels(); }

private:
    FilterModuleSpec spec_;
    BatchNorm2d<T> bn_;
    ConvLSTMCell<T> cell_;
    DenseUnit<T> decoder_;  // ed only
};

/// Dense block with a Filter Module after every unit; the filtered maps (not the
/// raw ones) are appended to the stack, so later units see filtered features.
template <typename T>
class RecurrentDenseBlock {
public:
    RecurrentDenseBlock() = default;
    RecurrentDenseBlock(int in_channels, int layers, int growth, double dropout,
                        FilterModuleSpec filter, std::mt19937_64& rng);

    BlockOutput<T> forward(const Var<T>& input, std::span<ConvLSTMState<T>> states, const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

    int in_channels() const { return in_; }
    int out_channels() const { return in_ + static_cast<int>(units_.size()) * growth_; }
    int new_channels() const { return static_cast<int>(units_.size()) * growth_; }
    std::size_t state_count() const { return filters_.size(); }
    std::vector<DenseUnit<T>>& units() { return units_; }
    std::vector<FilterModule<T>>& filters() { return filters_; }

private:
    int in_ = 0, growth_ = 0;
    std::vector<DenseUnit<T>> units_;
    std::vector<FilterModule<T>> filters_;
};

/// Pre-activation 1x1 convolution followed by 2x2 max pooling.
template <typename T>
class TransitionDown {
public:
    TransitionDown() = default;
    TransitionDown(int channels, double dropout, std::mt19937_64& rng);
    Var<T> forward(const Var<T>& x, const RunContext& ctx);
    void collect(const std::string& prefix, ParamList<T>& out);

private:
    double dropout_ = 0.0;
    BatchNorm2d<T> bn_;
    Conv<T> conv_;
};

/// 3x3 stride-2 transposed convolution.
template <typename T>
class TransitionUp {
public:
    TransitionUp() = default;
    TransitionUp(int in_channels, int out_channels, std::mt19937_64& rng);
    Var<T> forward(const Var<T>& x) const;
    void collect(const std::string& prefix, ParamList<T>& out);

private:
    Var<T> weight_, bias_;
};

/// Fills every parameter with N(0, scale^2); used by tests to leave the
/// initialization regime.
template <typename T>
void randomize(ParamList<T>& params, std::mt19937_64& rng, double scale);

}  // namespace rfcnet::nn
