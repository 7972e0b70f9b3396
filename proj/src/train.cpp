#include "rfcnet/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rfcnet/ops.hpp"

namespace rfcnet::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (optimizer != "adam") throw BadTrainConfig("unsupported optimizer '" + optimizer + "' (only adam)");
    if (!(learning_rate > 0.0)) throw BadTrainConfig("learning_rate must be > 0");
    if (weight_decay < 0.0) throw BadTrainConfig("weight_decay must be >= 0");
    if (batch_size < 1) throw BadTrainConfig("batch_size must be >= 1");
    if (eval_batch_size < 1) throw BadTrainConfig("eval_batch_size must be >= 1");
    if (max_epochs < 1) throw BadTrainConfig("max_epochs must be >= 1");
    if (patience < 1) throw BadTrainConfig("patience must be >= 1");
    if (device != "cpu") throw BadTrainConfig("device '" + device + "' unavailable (cpu only)");
    if (time_budget_s < 0.0) throw BadTrainConfig("time_budget_s must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"optimizer", c.optimizer},         {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
         {"batch_size", c.batch_size},       {"max_epochs", c.max_epochs},       {"patience", c.patience},
         {"seed", c.seed},                   {"device", c.device},               {"time_budget_s", c.time_budget_s},
         {"eval_batch_size", c.eval_batch_size}, {"train_split", c.train_split}, {"val_split", c.val_split},
         {"keep_last", c.keep_last}, {"target_val_miou", c.target_val_miou}, {"init_from", c.init_from}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw BadTrainConfig("train config must be an object");
    nlohmann::json merged = c;
    for (const auto& [key, value] : j.items()) {
        if (!merged.contains(key)) throw BadTrainConfig("unknown train config key '" + key + "'");
        merged[key] = value;
    }
    try {
        c.optimizer = merged["optimizer"].get<std::string>();
        c.learning_rate = merged["learning_rate"].get<double>();
        c.weight_decay = merged["weight_decay"].get<double>();
        c.batch_size = merged["batch_size"].get<int>();
        c.max_epochs = merged["max_epochs"].get<int>();
        c.patience = merged["patience"].get<int>();
        c.seed = merged["seed"].get<std::uint64_t>();
        c.device = merged["device"].get<std::string>();
        c.time_budget_s = merged["time_budget_s"].get<double>();
        c.eval_batch_size = merged["eval_batch_size"].get<int>();
        c.train_split = merged["train_split"].get<std::string>();
        c.val_split = merged["val_split"].get<std::string>();
        c.keep_last = merged["keep_last"].get<bool>();
        c.target_val_miou = merged["target_val_miou"].get<double>();
        c.init_from = merged["init_from"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw BadTrainConfig(std::string("train config: ") + e.what());
    }
    c.validate();
}

template <typename T>
Var<T> segmentation_loss(const Var<T>& scores, std::span<const std::uint8_t> labels) {
    return ops::softmax_cross_entropy(scores, labels);
}
template Var<float> segmentation_loss(const Var<float>&, std::span<const std::uint8_t>);
template Var<double> segmentation_loss(const Var<double>&, std::span<const std::uint8_t>);

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes), counts_(std::size_t(classes) * classes, 0) {
    if (classes < 1) throw std::invalid_argument("confusion matrix needs >= 1 class");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> truth, std::span<const std::uint8_t> prediction) {
    if (truth.size() != prediction.size()) throw std::invalid_argument("truth/prediction size mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= classes_ || prediction[i] >= classes_) throw std::out_of_range("class id out of range");
        ++counts_[std::size_t(truth[i]) * classes_ + prediction[i]];
    }
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t n = 0;
    for (auto c : counts_) n += c;
    return n;
}

std::optional<double> ConfusionMatrix::iou(int c) const {
    std::uint64_t tp = at(c, c), fp = 0, fn = 0;
    for (int k = 0; k < classes_; ++k) {
        if (k == c) continue;
        fp += at(k, c);
        fn += at(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) return std::nullopt;
    return double(tp) / double(denom);
}

double ConfusionMatrix::mean_iou() const {
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < classes_; ++c) {
        if (auto v = iou(c)) {
            sum += *v;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
    if (o.classes_ != classes_) throw std::invalid_argument("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
}

std::vector<std::uint8_t> argmax_labels(const Tensor<float>& scores) {
    const Shape s = scores.shape();
    std::vector<std::uint8_t> out(std::size_t(s.n) * s.h * s.w);
    const std::size_t plane = std::size_t(s.h) * s.w;
    for (int b = 0; b < s.n; ++b) {
        const float* base = scores.data() + std::size_t(b) * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            int best = 0;
            float best_v = base[p];
            for (int c = 1; c < s.c; ++c) {
                const float v = base[std::size_t(c) * plane + p];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            out[std::size_t(b) * plane + p] = std::uint8_t(best);
        }
    }
    return out;
}

Batch make_batch(std::span<const data::StoredSample> samples, bool clean) {
    if (samples.empty()) throw std::invalid_argument("empty batch");
    const auto& first = samples.front().sample;
    const int T = first.frames_count, C = first.channels, S = first.size;
    const std::size_t frame_len = std::size_t(C) * S * S;
    Batch b;
    const Shape shape{int(samples.size()), C, S, S};
    for (int t = 0; t < T; ++t) b.frames.emplace_back(shape);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i].sample;
        if (s.frames_count != T || s.channels != C || s.size != S) throw std::invalid_argument("ragged batch");
        const auto& src = clean ? s.clean_frames : s.frames;
        for (int t = 0; t < T; ++t) {
            std::copy_n(src.begin() + std::ptrdiff_t(t * frame_len), frame_len, b.frames[t].data() + i * frame_len);
        }
        b.labels.insert(b.labels.end(), s.label.begin(), s.label.end());
        b.indices.push_back(samples[i].index);
    }
    return b;
}

void Adam::step(nn::ParamList<float>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    const float wd = float(wd_), b1 = float(b1_), b2 = float(b2_), eps = float(eps_);
    const float step = float(lr_ / c1);
    const float inv_c2 = float(1.0 / c2);
    for (auto& [name, p] : params.params) {
        if (p->grad().empty()) continue;
        auto& value = p->mutable_value();
        const auto& g = p->grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m = Tensor<float>(value.shape());
            v = Tensor<float>(value.shape());
        }
        float* pv = value.data();
        float* pm = m.data();
        float* pvv = v.data();
        const float* pg = g.data();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const float gi = pg[i] + wd * pv[i];
            pm[i] = b1 * pm[i] + (1.0f - b1) * gi;
            pvv[i] = b2 * pvv[i] + (1.0f - b2) * gi * gi;
            pv[i] -= step * pm[i] / (std::sqrt(pvv[i] * inv_c2) + eps);
        }
        p->zero_grad();
    }
}

namespace {

// --- checkpoint encoding ---------------------------------------------------

template <class T>
void put(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
    put<std::uint32_t>(out, std::uint32_t(name.size()));
    out += name;
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put<std::uint32_t>(out, std::uint32_t(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
}

struct Reader {
    const std::string& bytes;
    std::size_t at = 0;
    void need(std::size_t n) const {
        if (bytes.size() - at < n) throw CheckpointError("checkpoint truncated");
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes.data() + at, sizeof(T));
        at += sizeof(T);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(at, n);
        at += n;
        return s;
    }
    std::pair<std::string, Tensor<float>> tensor() {
        const auto len = get<std::uint32_t>();
        std::string name = str(len);
        Shape s;
        s.n = int(get<std::uint32_t>());
        s.c = int(get<std::uint32_t>());
        s.h = int(get<std::uint32_t>());
        s.w = int(get<std::uint32_t>());
        Tensor<float> t(s);
        need(t.size() * sizeof(float));
        std::memcpy(t.data(), bytes.data() + at, t.size() * sizeof(float));
        at += t.size() * sizeof(float);
        return {std::move(name), std::move(t)};
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
    nlohmann::json header = {{"spec", c.spec},
                             {"config", c.config},
                             {"state",
                              {{"epoch", c.state.epoch},
                               {"best_val_miou", c.state.best_val_miou},
                               {"best_epoch", c.state.best_epoch},
                               {"epochs_without_improvement", c.state.epochs_without_improvement},
                               {"rng_state", c.state.rng_state},
                               {"optimizer_steps", c.state.optimizer_steps}}}};
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string h = header.dump();
    put<std::uint64_t>(out, h.size());
    out += h;
    for (const auto* group : {&c.tensors, &c.optimizer_m, &c.optimizer_v}) {
        put<std::uint32_t>(out, std::uint32_t(group->size()));
        for (const auto& [name, t] : *group) put_tensor(out, name, t);
    }
    const auto crc = std::uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(out.data()), uInt(out.size())));
    put<std::uint32_t>(out, crc);

    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        f.write(out.data(), std::streamsize(out.size()));
        if (!f) throw CheckpointError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kCheckpointMagic) + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint");
    }
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    if (std::uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), uInt(bytes.size() - 4))) != stored_crc) {
        throw CheckpointError(path.string() + ": checksum mismatch");
    }
    Reader r{bytes, sizeof(kCheckpointMagic)};
    if (r.get<std::uint32_t>() != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
    const auto hlen = r.get<std::uint64_t>();
    Checkpoint c;
    try {
        const auto header = nlohmann::json::parse(r.str(hlen));
        c.spec = header.at("spec").get<models::ModelSpec>();
        c.config = header.at("config").get<TrainConfig>();
        const auto& s = header.at("state");
        c.state.epoch = s.at("epoch").get<int>();
        c.state.best_val_miou = s.at("best_val_miou").get<double>();
        c.state.best_epoch = s.at("best_epoch").get<int>();
        c.state.epochs_without_improvement = s.at("epochs_without_improvement").get<int>();
        c.state.rng_state = s.at("rng_state").get<std::string>();
        c.state.optimizer_steps = s.at("optimizer_steps").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    for (auto* group : {&c.tensors, &c.optimizer_m, &c.optimizer_v}) {
        const auto n = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < n; ++i) group->insert(r.tensor());
    }
    return c;
}

std::map<std::string, Tensor<float>> capture_tensors(models::Network<float>& net) {
    std::map<std::string, Tensor<float>> out;
    auto params = net.parameters();
    for (auto& [name, v] : params.params) out[name] = v->value();
    for (auto& [name, t] : params.buffers) out[name] = *t;
    return out;
}

void restore_tensors(models::Network<float>& net, const std::map<std::string, Tensor<float>>& tensors) {
    auto params = net.parameters();
    auto copy = [&](const std::string& name, Tensor<float>& dst) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
        if (!(it->second.shape() == dst.shape())) {
            throw CheckpointError("shape mismatch for '" + name + "': " + it->second.shape().str() + " vs " +
                                  dst.shape().str());
        }
        dst = it->second;
    };
    for (auto& [name, v] : params.params) copy(name, v->mutable_value());
    for (auto& [name, t] : params.buffers) copy(name, *t);
}

std::unique_ptr<models::Network<float>> network_from_checkpoint(const Checkpoint& c) {
    auto net = std::make_unique<models::Network<float>>(c.spec, 0);
    restore_tensors(*net, c.tensors);
    return net;
}

bool EarlyStopping::update(double metric) {
    if (metric > best_) {
        best_ = metric;
        bad_epochs_ = 0;
        return true;
    }
    ++bad_epochs_;
    return false;
}

nlohmann::json to_json(const EvalResult& r) {
    nlohmann::json iou = nlohmann::json::array();
    for (const auto& v : r.iou) iou.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    nlohmann::json matrix = nlohmann::json::array();
    for (int t = 0; t < r.confusion.classes(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
        matrix.push_back(row);
    }
    return {{"mean_iou", r.mean_iou}, {"per_class_iou", iou}, {"sequences", r.sequences}, {"confusion", matrix}};
}

EvalResult evaluate(models::Network<float>& net, const data::SplitReader& split, int batch_size, bool clean) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    NoGradGuard no_grad;
    EvalResult r{ConfusionMatrix(net.spec().n_classes), {}, 0.0, split.size()};
    nn::RunContext ctx;
    ctx.training = false;
    std::vector<data::StoredSample> chunk;
    for (std::size_t start = 0; start < split.size(); start += std::size_t(batch_size)) {
        chunk.clear();
        for (std::size_t i = start; i < std::min(split.size(), start + std::size_t(batch_size)); ++i) {
            chunk.push_back(split.get(i));
        }
        Batch b = make_batch(chunk, clean);
        std::vector<Var<float>> frames;
        for (auto& f : b.frames) frames.emplace_back(std::move(f));
        const auto scores = net.forward_sequence(frames, ctx);
        r.confusion.add(b.labels, argmax_labels(scores.value()));
    }
    for (int c = 0; c < r.confusion.classes(); ++c) r.iou.push_back(r.confusion.iou(c));
    r.mean_iou = r.confusion.mean_iou();
    return r;
}

const char* class_name(int c) {
    static const char* names[] = {"background", "wall",     "static_sq", "circle",   "dyn_digit0",
                                  "dyn_digit1", "dyn_digit2", "dyn_digit3", "dyn_digit4", "dyn_digit5",
                                  "dyn_digit6", "dyn_digit7", "dyn_digit8", "dyn_digit9"};
    return c >= 0 && c < 14 ? names[c] : "class";
}

std::string format_eval_table(const std::string& title, const EvalResult& r) {
    std::ostringstream os;
    os << title << " (" << r.sequences << " sequences, " << r.confusion.total() << " pixels)\n";
    os << std::left << std::setw(6) << "class" << std::setw(14) << "name" << std::right << std::setw(10) << "IoU %"
       << "\n";
    int excluded = 0;
    for (int c = 0; c < r.confusion.classes(); ++c) {
        os << std::left << std::setw(6) << c << std::setw(14) << class_name(c) << std::right << std::setw(10);
        if (r.iou[std::size_t(c)]) {
            os << std::fixed << std::setprecision(2) << 100.0 * *r.iou[std::size_t(c)];
        } else {
            os << "n/a";
            ++excluded;
        }
        os << "\n";
    }
    os << std::left << std::setw(20) << "mean IoU" << std::right << std::setw(10) << std::fixed << std::setprecision(2)
       << 100.0 * r.mean_iou << "\n";
    os << "IoU = TP/(TP+FP+FN) from one confusion matrix over the split; classes absent from both labels and "
          "predictions (n/a, "
       << excluded << " here) are excluded from the mean.\n";
    return os.str();
}

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
    std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(epoch + 1));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string rng_text(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

std::size_t cache_for(const data::DatasetManifest& m, const std::string& split) {
    // keep whole splits resident when they are small
    const auto& info = m.split(split);
    const std::uint64_t per_sample =
        std::uint64_t(m.frames) * m.channels * m.image_size * m.image_size * (m.dtype == data::StorageDtype::f32 ? 8 : 2);
    const std::uint64_t budget = 1ull << 30;
    const std::uint64_t shards_fit = m.shard_size ? budget / std::max<std::uint64_t>(1, per_sample * m.shard_size) : 1;
    return std::size_t(std::clamp<std::uint64_t>(shards_fit, 1, std::max<std::size_t>(1, info.shards.size())));
}

Checkpoint make_checkpoint(models::Network<float>& net, Adam& opt, const TrainConfig& cfg, const TrainState& st) {
    Checkpoint c;
    c.spec = net.spec();
    c.config = cfg;
    c.state = st;
    c.state.optimizer_steps = opt.steps();
    c.tensors = capture_tensors(net);
    c.optimizer_m = opt.first_moments();
    c.optimizer_v = opt.second_moments();
    return c;
}

}  // namespace

TrainResult train(const models::ModelSpec& spec, const fs::path& data_dir, const TrainConfig& config,
                  const fs::path& out_dir, const TrainHooks& hooks, bool resume) {
    config.validate();
    spec.validate();
    const auto manifest = data::read_manifest(data_dir);
    const data::SplitReader train_split(data_dir, manifest, config.train_split, cache_for(manifest, config.train_split));
    std::optional<data::SplitReader> val_split;
    if (!hooks.val_metric) val_split.emplace(data_dir, manifest, config.val_split, cache_for(manifest, config.val_split));
    if (train_split.size() == 0) throw data::DataMissing("train split '" + config.train_split + "' is empty");
    if (spec.input_channels != manifest.channels) {
        throw models::BadSpec("spec expects " + std::to_string(spec.input_channels) + " input channels, dataset has " +
                              std::to_string(manifest.channels));
    }
    fs::create_directories(out_dir);

    models::Network<float> net(spec, config.seed);
    Adam opt(config.learning_rate, config.weight_decay);
    std::mt19937_64 rng(config.seed ^ 0x5eed5eed5eedULL);
    TrainState state;
    EarlyStopping stopper(config.patience);

    const fs::path last_path = out_dir / "last.ckpt", best_path = out_dir / "best.ckpt";
    if (resume && fs::exists(last_path)) {
        const auto c = load_checkpoint(last_path);
        restore_tensors(net, c.tensors);
        opt.first_moments() = c.optimizer_m;
        opt.second_moments() = c.optimizer_v;
        opt.set_steps(c.state.optimizer_steps);
        state = c.state;
        std::istringstream(state.rng_state) >> rng;
        stopper.restore(state.best_val_miou, state.epochs_without_improvement);
    } else {
        fs::remove(out_dir / "metrics.jsonl");
    }

    TrainResult result;
    if (!config.init_from.empty() && state.epoch == 0) {
        auto source = network_from_checkpoint(load_checkpoint(config.init_from));
        result.initialized_tensors = net.load_matching(*source);
    }
    result.best_checkpoint = best_path;
    result.best_val_miou = state.best_val_miou;
    result.best_epoch = state.best_epoch;
    if (stopper.should_stop()) {
        result.stopped_early = true;
        return result;
    }

    std::ofstream log(out_dir / "metrics.jsonl", std::ios::app);
    const auto started = std::chrono::steady_clock::now();
    auto params = net.parameters();
    nn::RunContext ctx;
    ctx.training = true;
    ctx.rng = &rng;

    for (int epoch = state.epoch + 1; epoch <= config.max_epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const auto order = train_split.order(epoch_seed(config.seed, epoch));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        ConfusionMatrix seen(net.spec().n_classes);
        std::vector<data::StoredSample> chunk;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size), ++batches) {
            chunk.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + std::size_t(config.batch_size)); ++i) {
                chunk.push_back(train_split.get(order[i]));
            }
            Batch b = make_batch(chunk);
            std::vector<Var<float>> frames;
            for (auto& f : b.frames) frames.emplace_back(std::move(f));
            const auto scores = net.forward_sequence(frames, ctx);
            auto loss = segmentation_loss(scores, b.labels);
            const double value = loss.value()[0];
            if (!std::isfinite(value)) {
                nlohmann::json dump = {{"epoch", epoch}, {"batch", batches}, {"sample_indices", b.indices},
                                       {"loss", std::isnan(value) ? "nan" : "inf"}};
                std::ofstream(out_dir / "nonfinite_batch.json") << dump.dump(2) << "\n";
                throw NonFiniteLoss(epoch, batches, "samples " + nlohmann::json(b.indices).dump());
            }
            seen.add(b.labels, argmax_labels(scores.value()));
            loss.backward();
            opt.step(params);
            loss_sum += value;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(std::max<std::size_t>(1, batches));
        rec.train_miou = seen.mean_iou();
        rec.val_miou = hooks.val_metric ? hooks.val_metric(epoch)
                                        : evaluate(net, *val_split, config.eval_batch_size).mean_iou;
        rec.improved = stopper.update(rec.val_miou);
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();

        state.epoch = epoch;
        state.best_val_miou = stopper.best();
        state.epochs_without_improvement = stopper.bad_epochs();
        state.rng_state = rng_text(rng);
        if (rec.improved) {
            state.best_epoch = epoch;
            save_checkpoint(make_checkpoint(net, opt, config, state), best_path);
        }
        if (config.keep_last) save_checkpoint(make_checkpoint(net, opt, config, state), last_path);

        log << nlohmann::json{{"epoch", rec.epoch},
                              {"train_loss", rec.train_loss},
                              {"train_miou", rec.train_miou},
                              {"val_miou", rec.val_miou},
                              {"wall_time_s", rec.wall_time_s},
                              {"improved", rec.improved}}
                   .dump()
            << "\n";
        log.flush();
        result.history.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);

        if (hooks.should_stop && hooks.should_stop(rec)) {
            result.reached_target = true;
            break;
        }
        if (stopper.should_stop()) {
            result.stopped_early = true;
            break;
        }
        if (config.target_val_miou > 0 && rec.val_miou >= config.target_val_miou) {
            result.reached_target = true;
            break;
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        if (config.time_budget_s > 0 && elapsed >= config.time_budget_s && epoch < config.max_epochs) {
            result.budget_exhausted = true;
            break;
        }
    }
    result.best_val_miou = state.best_val_miou;
    result.best_epoch = state.best_epoch;
    return result;
}

std::vector<GridCell> expand_grid(const models::ModelSpec& base, const std::map<std::string, nlohmann::json>& axes) {
    std::vector<GridCell> cells{{base.name, base}};
    const nlohmann::json base_json = base;
    for (const auto& [key, values] : axes) {
        if (!base_json.contains(key) && key != "fm_kind" && key != "alpha_ed") {
            throw models::BadSpec("grid axis '" + key + "' is not a model spec field");
        }
        if (!values.is_array() || values.empty()) throw models::BadSpec("grid axis '" + key + "' needs a value list");
        std::vector<GridCell> next;
        for (const auto& cell : cells) {
            for (const auto& v : values) {
                nlohmann::json j = cell.spec;
                j[key] = v;
                GridCell c;
                c.spec = j.get<models::ModelSpec>();
                c.spec.validate();
                std::string text = v.is_string() ? v.get<std::string>() : v.dump();
                std::replace_if(text.begin(), text.end(), [](char ch) { return !std::isalnum((unsigned char)ch) && ch != '.' && ch != '-'; }, '_');
                c.id = cell.id + "__" + key + "-" + text;
                next.push_back(std::move(c));
            }
        }
        cells = std::move(next);
    }
    return cells;
}

std::vector<GridRow> grid_search(const std::vector<GridCell>& cells, const fs::path& data_dir,
                                 const TrainConfig& config, const fs::path& out_dir) {
    std::vector<GridRow> rows;
    for (const auto& cell : cells) {
        const fs::path dir = out_dir / cell.id;
        const fs::path done = dir / "result.json";
        GridRow row;
        row.id = cell.id;
        row.spec = cell.spec;
        if (fs::exists(done)) {
            std::ifstream in(done);
            const auto j = nlohmann::json::parse(in);
            row.best_val_miou = j.at("best_val_miou").get<double>();
            row.best_epoch = j.at("best_epoch").get<int>();
            row.parameters = j.at("parameters").get<std::size_t>();
            row.resumed = true;
        } else {
            // an interrupted cell restarts from its last completed epoch
            const auto r = train(cell.spec, data_dir, config, dir, {}, true);
            row.best_val_miou = r.best_val_miou;
            row.best_epoch = r.best_epoch;
            models::Network<float> probe(cell.spec, 0);
            row.parameters = probe.count_params().total();
            const nlohmann::json j = {{"id", row.id},
                                      {"spec", row.spec},
                                      {"best_val_miou", row.best_val_miou},
                                      {"best_epoch", row.best_epoch},
                                      {"parameters", row.parameters},
                                      {"epochs", r.history.size()}};
            const fs::path tmp = dir / "result.json.tmp";
            std::ofstream(tmp) << j.dump(2) << "\n";
            fs::rename(tmp, done);
        }
        rows.push_back(std::move(row));
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const GridRow& a, const GridRow& b) { return a.best_val_miou > b.best_val_miou; });
    return rows;
}

std::string format_grid_table(const std::vector<GridRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(6) << "rank" << std::setw(48) << "cell" << std::right << std::setw(12) << "params"
       << std::setw(14) << "val mIoU %" << std::setw(8) << "epoch" << std::setw(10) << "source" << "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        os << std::left << std::setw(6) << i + 1 << std::setw(48) << rows[i].id << std::right << std::setw(12)
           << rows[i].parameters << std::setw(14) << std::fixed << std::setprecision(2) << 100.0 * rows[i].best_val_miou
           << std::setw(8) << rows[i].best_epoch << std::setw(10) << (rows[i].resumed ? "resumed" : "trained")
           << "\n";
    }
    return os.str();
}

}  // namespace rfcnet::train
