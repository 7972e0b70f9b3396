#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfcnet/nn.hpp"

namespace rfcnet::models {

class BadSpec : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class WrongSequenceLength : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Family { fcd, rfcd, rm_gf, tm_3d, tm_st };

Family parse_family(const std::string& s);
std::string to_string(Family f);

/// Declarative architecture description.
struct ModelSpec {
    std::string name;
    Family family = Family::fcd;
    int depth = 2;
    int layers_per_db = 7;
    int growth = 8;
    int first_conv_features = 48;
    // rfcd only
    std::optional<nn::FilterKind> fm_kind;
    std::optional<double> alpha_ed;
    std::vector<int> hidden_kernel_sizes;  // one per dense block, 2*depth+1
    // rm_gf global filter
    double global_alpha_ed = 0.625;
    int global_hidden_kernel = 9;
    int n_classes = 14;
    int sequence_length = 5;
    int input_channels = 1;
    double dropout = 0.0;

    int block_count() const { return 2 * depth + 1; }
    bool recurrent() const { return family == Family::rfcd || family == Family::rm_gf; }
    /// Throws BadSpec.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

/// Names of the shipped model zoo.
const std::vector<std::string>& zoo_names();
/// Full-width specs of the zoo (published widths plus the parity adjustments
/// for the non-recurrent baselines).
ModelSpec zoo_spec(const std::string& name);
/// Reduced-width variant used by desk-scale runs.
ModelSpec tiny_spec(const std::string& name);

/// Exact parameter counts grouped by role.
struct ParamTable {
    std::size_t feature_extractor = 0;  // first conv, down-path blocks, transitions down, bottleneck
    std::size_t filter_modules = 0;     // every Filter Module, including rm_gf's global filter
    std::size_t upsampling = 0;         // transitions up and up-path blocks
    std::size_t classifier = 0;
    std::size_t total() const { return feature_extractor + filter_modules + upsampling + classifier; }
};

std::string format_param_table(const std::string& name, const ParamTable& t);

template <typename T>
class Network {
public:
    Network(const ModelSpec& spec, std::uint64_t seed);

    const ModelSpec& spec() const { return spec_; }

    /// Class scores (B, n_classes, H, W) for the last frame of the sequence.
    /// Recurrent families start from zero state and walk the frames in order.
    Var<T> forward_sequence(std::span<const Var<T>> frames, const nn::RunContext& ctx);

    /// One recurrent step over a single frame (B, C_in, H, W). `states` must
    /// hold state_count() entries. Returns scores, or an undefined Var when
    /// `classify` is false.
    Var<T> forward_frame(const Var<T>& frame, std::span<nn::ConvLSTMState<T>> states, const nn::RunContext& ctx,
                         bool classify = true);

    std::size_t state_count() const;
    nn::ParamList<T> parameters();
    ParamTable count_params();

    /// Copies every parameter and buffer whose name and shape match one in
    /// `source`; returns the number of tensors copied. Used to seed an RFC
    /// network from a trained single-frame network.
    std::size_t load_matching(Network& source);

    /// Test hook: every filter module of the recurrent blocks.
    std::vector<nn::FilterModule<T>*> filter_modules();

private:
    Var<T> trunk(const Var<T>& x, std::span<nn::ConvLSTMState<T>> states, const nn::RunContext& ctx,
                 bool classify, int last_frame_batch);
    nn::BlockOutput<T> run_block(std::size_t index, const Var<T>& x, std::span<nn::ConvLSTMState<T>>& states,
                                 const nn::RunContext& ctx);
    void check_frame(const Shape& s) const;

    ModelSpec spec_;
    nn::Conv<T> first_;
    std::vector<nn::DenseBlock<T>> plain_blocks_;
    std::vector<nn::RecurrentDenseBlock<T>> recurrent_blocks_;
    std::vector<nn::TransitionDown<T>> downs_;
    std::vector<nn::TransitionUp<T>> ups_;
    std::optional<nn::FilterModule<T>> global_filter_;
    nn::Conv<T> classifier_;
};

}  // namespace rfcnet::models
