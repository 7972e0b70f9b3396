#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfcnet/dataset.hpp"
#include "rfcnet/models.hpp"

namespace rfcnet::train {

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(int epoch, std::size_t batch, const std::string& detail)
        : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                             (detail.empty() ? "" : ": " + detail)),
          epoch_(epoch), batch_(batch) {}
    int epoch() const { return epoch_; }
    std::size_t batch() const { return batch_; }

private:
    int epoch_;
    std::size_t batch_;
};
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BadTrainConfig : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
    std::string optimizer = "adam";
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 8;
    int max_epochs = 100;
    int patience = 10;
    std::uint64_t seed = 0;
    std::string device = "cpu";
    double time_budget_s = 0.0;   // 0 = unlimited; checked between epochs
    int eval_batch_size = 8;
    std::string train_split = "train";
    std::string val_split = "val";
    bool keep_last = true;        // also write last.ckpt every epoch
    double target_val_miou = 0.0; // > 0: stop once val mIoU reaches it
    std::string init_from;        // checkpoint whose matching tensors seed a fresh run

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Partial objects override defaults; unknown keys throw BadTrainConfig.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Mean per-pixel softmax cross-entropy of scores (B, K, H, W) against labels
/// (B, H, W). Throws ops::LabelOutOfRange.
template <typename T>
Var<T> segmentation_loss(const Var<T>& scores, std::span<const std::uint8_t> labels);

/// Rows are ground truth, columns prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes = scene::kNumClasses);

    void add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> prediction);
    std::uint64_t at(int truth, int prediction) const { return counts_[std::size_t(truth) * classes_ + prediction]; }
    std::uint64_t total() const;
    int classes() const { return classes_; }

    /// TP / (TP + FP + FN), or nullopt when the class never occurs in either.
    std::optional<double> iou(int c) const;
    /// Mean over classes with a defined IoU; 0 when none is defined.
    double mean_iou() const;
    ConfusionMatrix& operator+=(const ConfusionMatrix& o);

private:
    int classes_;
    std::vector<std::uint64_t> counts_;
};

/// Per-pixel argmax over the class axis of (B, K, H, W) scores.
std::vector<std::uint8_t> argmax_labels(const Tensor<float>& scores);

/// Stacks samples into per-frame tensors (B, C, H, W); `clean` selects the
/// unperturbed twin frames.
struct Batch {
    std::vector<Tensor<float>> frames;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint64_t> indices;
};
Batch make_batch(std::span<const data::StoredSample> samples, bool clean = false);

/// Adam with L2 weight decay folded into the gradient.
class Adam {
public:
    Adam(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}
    void step(nn::ParamList<float>& params);
    std::int64_t steps() const { return t_; }

    // exposed for checkpointing
    std::map<std::string, Tensor<float>>& first_moments() { return m_; }
    std::map<std::string, Tensor<float>>& second_moments() { return v_; }
    void set_steps(std::int64_t t) { t_ = t; }

private:
    double lr_, wd_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor<float>> m_, v_;
};

struct TrainState {
    int epoch = 0;  // completed epochs
    double best_val_miou = -1.0;
    int best_epoch = 0;
    int epochs_without_improvement = 0;
    std::string rng_state;  // std::mt19937_64 stream text
    std::int64_t optimizer_steps = 0;
};

/// Serialized model + optimizer + loop state.
struct Checkpoint {
    models::ModelSpec spec;
    TrainConfig config;
    TrainState state;
    std::map<std::string, Tensor<float>> tensors;  // parameters and buffers by name
    std::map<std::string, Tensor<float>> optimizer_m, optimizer_v;
};

inline constexpr char kCheckpointMagic[8] = {'R', 'F', 'C', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of a network's named parameters and buffers.
std::map<std::string, Tensor<float>> capture_tensors(models::Network<float>& net);
/// Restores tensors by name; throws CheckpointError on a missing name or shape mismatch.
void restore_tensors(models::Network<float>& net, const std::map<std::string, Tensor<float>>& tensors);
/// Network rebuilt from the checkpoint's spec with its tensors loaded.
std::unique_ptr<models::Network<float>> network_from_checkpoint(const Checkpoint& c);

/// Stops once `patience` consecutive updates fail to improve the best value.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}
    /// Records a metric; returns true when it is a new best.
    bool update(double metric);
    bool should_stop() const { return bad_epochs_ >= patience_; }
    int bad_epochs() const { return bad_epochs_; }
    double best() const { return best_; }
    void restore(double best, int bad_epochs) {
        best_ = best;
        bad_epochs_ = bad_epochs;
    }

private:
    int patience_;
    double best_ = -1.0;
    int bad_epochs_ = 0;
};

struct EvalResult {
    ConfusionMatrix confusion;
    std::vector<std::optional<double>> iou;  // per class
    double mean_iou = 0.0;
    std::size_t sequences = 0;
};

nlohmann::json to_json(const EvalResult& r);

/// Runs the network over a whole split in inference mode and aggregates one
/// confusion matrix. `clean` evaluates the clean twin frames of the split.
EvalResult evaluate(models::Network<float>& net, const data::SplitReader& split, int batch_size = 8,
                    bool clean = false);

/// Short display name of a label class.
const char* class_name(int c);

/// Per-class table (text) with a footer explaining excluded classes.
std::string format_eval_table(const std::string& title, const EvalResult& r);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    // From the training-mode forward passes of the epoch, weights still moving.
    double train_miou = 0.0;
    double val_miou = 0.0;
    double wall_time_s = 0.0;
    bool improved = false;
};

struct TrainResult {
    std::filesystem::path best_checkpoint;
    std::vector<EpochRecord> history;
    double best_val_miou = 0.0;
    int best_epoch = 0;
    bool stopped_early = false;
    bool budget_exhausted = false;
    bool reached_target = false;
    std::size_t initialized_tensors = 0;  // copied from config.init_from
};

struct TrainHooks {
    std::function<void(const EpochRecord&)> on_epoch;
    /// Replaces validation (tests inject metric sequences); receives the epoch.
    std::function<double(int)> val_metric;
    /// Ends training after the epoch when it returns true (counts as reaching the target).
    std::function<bool(const EpochRecord&)> should_stop;
};

/// Trains `spec` on data_dir's train split, selecting on val mean IoU. Writes
/// best.ckpt, last.ckpt and an append-only metrics.jsonl into out_dir. Resumes
/// from out_dir/last.ckpt when `resume` is set and the file exists.
TrainResult train(const models::ModelSpec& spec, const std::filesystem::path& data_dir, const TrainConfig& config,
                  const std::filesystem::path& out_dir, const TrainHooks& hooks = {}, bool resume = false);

struct GridCell {
    std::string id;
    models::ModelSpec spec;
};

/// Cartesian product over spec fields; `axes` maps a ModelSpec JSON key to
/// the values it takes.
std::vector<GridCell> expand_grid(const models::ModelSpec& base, const std::map<std::string, nlohmann::json>& axes);

struct GridRow {
    std::string id;
    models::ModelSpec spec;
    double best_val_miou = 0.0;
    int best_epoch = 0;
    std::size_t parameters = 0;
    bool resumed = false;  // loaded from a finished cell instead of trained
};

/// Trains every cell under out_dir/<id>/ and returns rows ranked by val mean
/// IoU (descending). Cells with a result.json are not re-run.
std::vector<GridRow> grid_search(const std::vector<GridCell>& cells, const std::filesystem::path& data_dir,
                                 const TrainConfig& config, const std::filesystem::path& out_dir);

std::string format_grid_table(const std::vector<GridRow>& rows);

}  // namespace rfcnet::train
