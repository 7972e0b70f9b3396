#include "rfcnet/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>

namespace rfcnet::data {

static_assert(std::endian::native == std::endian::little, "shard encoding assumes a little-endian host");

std::string to_string(StorageDtype d) { return d == StorageDtype::f32 ? "f32" : "u8"; }

StorageDtype parse_dtype(const std::string& s) {
    if (s == "f32") return StorageDtype::f32;
    if (s == "u8") return StorageDtype::u8;
    throw std::invalid_argument("unknown storage dtype '" + s + "' (expected f32 or u8)");
}

const SplitInfo& DatasetManifest::split(const std::string& name) const {
    for (const auto& s : splits) {
        if (s.name == name) return s;
    }
    std::string known;
    for (const auto& s : splits) known += (known.empty() ? "" : ", ") + s.name;
    throw UnknownSplit("unknown split '" + name + "' (have: " + known + ")");
}

bool DatasetManifest::has_split(const std::string& name) const {
    return std::any_of(splits.begin(), splits.end(), [&](const SplitInfo& s) { return s.name == name; });
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
    nlohmann::json splits = nlohmann::json::object();
    for (const auto& s : m.splits) {
        nlohmann::json shards = nlohmann::json::array();
        for (const auto& sh : s.shards) {
            shards.push_back({{"file", sh.file}, {"first", sh.first}, {"count", sh.count}, {"bytes", sh.bytes},
                              {"crc32", sh.crc32}});
        }
        splits[s.name] = {{"count", s.count}, {"stream", s.stream}, {"clean", s.clean},
                          {"glyph_split", s.glyph_split}, {"shards", shards}};
    }
    j = {{"format", "rfcnet-dataset"},
         {"version", m.version},
         {"seed", m.seed},
         {"dtype", to_string(m.dtype)},
         {"quantization_step", m.dtype == StorageDtype::u8 ? 1.0 / 255.0 : 0.0},
         {"shard_size", m.shard_size},
         {"frames", m.frames},
         {"channels", m.channels},
         {"image_size", m.image_size},
         {"glyph_source", m.glyph_source},
         {"config_echo", m.config_echo},
         {"splits", splits}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
    if (j.value("format", "") != "rfcnet-dataset") throw IoError("not a dataset manifest");
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) throw IoError("unsupported manifest version " + std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.dtype = parse_dtype(j.at("dtype").get<std::string>());
    m.shard_size = j.at("shard_size").get<std::uint64_t>();
    m.frames = j.at("frames").get<int>();
    m.channels = j.at("channels").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.glyph_source = j.at("glyph_source").get<std::string>();
    m.config_echo = j.at("config_echo").get<scene::SceneConfig>();
    m.splits.clear();
    for (const auto& [name, s] : j.at("splits").items()) {
        SplitInfo info;
        info.name = name;
        info.count = s.at("count").get<std::uint64_t>();
        info.stream = s.at("stream").get<std::string>();
        info.clean = s.at("clean").get<bool>();
        info.glyph_split = s.at("glyph_split").get<std::string>();
        for (const auto& sh : s.at("shards")) {
            info.shards.push_back({sh.at("file").get<std::string>(), sh.at("first").get<std::uint64_t>(),
                                   sh.at("count").get<std::uint64_t>(), sh.at("bytes").get<std::uint64_t>(),
                                   sh.at("crc32").get<std::uint32_t>()});
        }
        m.splits.push_back(std::move(info));
    }
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
    const auto tmp = dir / (std::string(kManifestName) + ".tmp");
    {
        std::ofstream out(tmp);
        out << nlohmann::json(m).dump(2) << "\n";
        if (!out) throw IoError("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, dir / kManifestName);
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / kManifestName;
    std::ifstream in(path);
    if (!in) throw DataMissing("no dataset manifest at " + path.string());
    try {
        return nlohmann::json::parse(in).get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
}

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
}

void put_frames(std::vector<std::uint8_t>& out, const std::vector<float>& frames, StorageDtype dtype) {
    if (dtype == StorageDtype::f32) {
        const auto at = out.size();
        out.resize(at + frames.size() * sizeof(float));
        std::memcpy(out.data() + at, frames.data(), frames.size() * sizeof(float));
    } else {
        for (float v : frames) out.push_back(std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
}

struct Cursor {
    const std::vector<std::uint8_t>& bytes;
    std::size_t at = 0;
    const std::string& shard;

    void need(std::size_t n) const {
        if (bytes.size() - at < n) throw IoError("shard '" + shard + "' truncated");
    }
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes.data() + at, sizeof(T));
        at += sizeof(T);
        return v;
    }
    std::vector<float> frames(std::size_t n, StorageDtype dtype) {
        std::vector<float> out(n);
        if (dtype == StorageDtype::f32) {
            need(n * sizeof(float));
            std::memcpy(out.data(), bytes.data() + at, n * sizeof(float));
            at += n * sizeof(float);
        } else {
            need(n);
            for (std::size_t i = 0; i < n; ++i) out[i] = float(bytes[at + i]) / 255.0f;
            at += n;
        }
        return out;
    }
};

std::uint32_t crc_of(const std::vector<std::uint8_t>& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t at = 0;
    while (at < bytes.size()) {
        const auto chunk = std::min<std::size_t>(bytes.size() - at, 1u << 30);
        crc = crc32(crc, bytes.data() + at, uInt(chunk));
        at += chunk;
    }
    return std::uint32_t(crc);
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

}  // namespace

ShardWriter::ShardWriter(std::filesystem::path dir, std::string split, std::uint64_t shard_size, StorageDtype dtype)
    : dir_(std::move(dir)), split_(std::move(split)), shard_size_(shard_size), dtype_(dtype) {
    if (shard_size_ == 0) throw std::invalid_argument("shard_size must be >= 1");
    std::filesystem::create_directories(dir_);
}

void ShardWriter::add(std::uint64_t index, const scene::SequenceSample& s) {
    if (buffer_.empty()) {
        buffer_.insert(buffer_.end(), std::begin(kShardMagic), std::end(kShardMagic));
        put<std::uint32_t>(buffer_, kShardVersion);
        first_ = written_;
    }
    put<std::uint64_t>(buffer_, index);
    put<std::uint32_t>(buffer_, std::uint32_t(s.frames_count));
    put<std::uint32_t>(buffer_, std::uint32_t(s.channels));
    put<std::uint32_t>(buffer_, std::uint32_t(s.size));
    put<std::uint32_t>(buffer_, std::uint32_t(s.size));
    put<std::uint8_t>(buffer_, std::uint8_t(dtype_));
    put_frames(buffer_, s.frames, dtype_);
    put_frames(buffer_, s.clean_frames, dtype_);
    buffer_.insert(buffer_.end(), s.label.begin(), s.label.end());
    ++in_buffer_;
    ++written_;
    if (in_buffer_ == shard_size_) flush();
}

void ShardWriter::flush() {
    if (in_buffer_ == 0) return;
    char name[64];
    std::snprintf(name, sizeof(name), "%s-%05zu.bin", split_.c_str(), shards_.size());
    const auto path = dir_ / name;
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(buffer_.data()), std::streamsize(buffer_.size()));
        if (!out) throw IoError("cannot write " + path.string());
    }
    shards_.push_back({name, first_, in_buffer_, buffer_.size(), crc_of(buffer_)});
    buffer_.clear();
    in_buffer_ = 0;
}

SplitInfo ShardWriter::finish() {
    flush();
    SplitInfo info;
    info.name = split_;
    info.count = written_;
    info.stream = split_;
    info.shards = shards_;
    return info;
}

DatasetManifest write_shards(const std::vector<scene::SequenceSample>& samples, const std::filesystem::path& out_dir,
                             std::uint64_t shard_size, StorageDtype dtype, const std::string& split) {
    ShardWriter w(out_dir, split, shard_size, dtype);
    for (std::size_t i = 0; i < samples.size(); ++i) w.add(i, samples[i]);
    DatasetManifest m;
    m.dtype = dtype;
    m.shard_size = shard_size;
    if (!samples.empty()) {
        m.frames = samples[0].frames_count;
        m.channels = samples[0].channels;
        m.image_size = samples[0].size;
    }
    m.glyph_source = "external";
    m.splits.push_back(w.finish());
    m.splits.back().glyph_split = "train";
    write_manifest(m, out_dir);
    return m;
}

namespace {

struct SplitPlan {
    std::string name, stream;
    std::uint64_t count;
    bool clean;
    mnist::GlyphSplit glyphs;
};

}  // namespace

DatasetManifest generate_dataset(const GenerateOptions& opt, const mnist::GlyphSource& glyphs,
                                 const std::filesystem::path& out_dir) {
    opt.scene.validate();
    std::filesystem::create_directories(out_dir);
    std::filesystem::remove(out_dir / kManifestName);  // a partial rewrite must not look complete

    const std::vector<SplitPlan> plans{
        {"train", "train", opt.counts.train, false, mnist::GlyphSplit::train},
        {"val", "val", opt.counts.val, false, mnist::GlyphSplit::train},
        {"test", "test", opt.counts.test, false, mnist::GlyphSplit::test},
        {"clean_test", "test", opt.counts.clean_test, true, mnist::GlyphSplit::test},
    };
    DatasetManifest m;
    m.seed = opt.seed;
    m.dtype = opt.dtype;
    m.shard_size = opt.shard_size;
    m.frames = opt.scene.sequence_length;
    m.channels = opt.scene.channels;
    m.image_size = opt.scene.image_size;
    m.glyph_source = glyphs.origin();
    m.config_echo = opt.scene;

    const int workers = std::max(1, opt.workers);
    for (const auto& plan : plans) {
        const scene::SceneConfig cfg = plan.clean ? opt.scene.clean() : opt.scene;
        ShardWriter writer(out_dir, plan.name, opt.shard_size, opt.dtype);
        for (std::uint64_t first = 0; first < plan.count; first += opt.shard_size) {
            const std::uint64_t n = std::min(opt.shard_size, plan.count - first);
            std::vector<scene::SequenceSample> batch(n);
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            auto work = [&](int w) {
                try {
                    for (std::uint64_t i = std::uint64_t(w); i < n; i += std::uint64_t(workers)) {
                        std::mt19937_64 rng(scene::sequence_seed(opt.seed, plan.stream, first + i));
                        batch[i] = scene::generate_sequence(cfg, glyphs, plan.glyphs, rng);
                    }
                } catch (...) {
                    errors[std::size_t(w)] = std::current_exception();
                }
            };
            if (workers == 1) {
                work(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
                for (auto& t : pool) t.join();
            }
            for (auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
            for (std::uint64_t i = 0; i < n; ++i) writer.add(first + i, batch[i]);
        }
        SplitInfo info = writer.finish();
        info.stream = plan.stream;
        info.clean = plan.clean;
        info.glyph_split = plan.glyphs == mnist::GlyphSplit::train ? "train" : "test";
        m.splits.push_back(std::move(info));
    }
    write_manifest(m, out_dir);
    return m;
}

void verify_dataset(const std::filesystem::path& dir, const DatasetManifest& m) {
    for (const auto& s : m.splits) {
        for (const auto& sh : s.shards) {
            const auto bytes = read_all(dir / sh.file);
            if (bytes.size() != sh.bytes) {
                throw ChecksumError(sh.file, "size " + std::to_string(bytes.size()) + " != " + std::to_string(sh.bytes));
            }
            if (crc_of(bytes) != sh.crc32) throw ChecksumError(sh.file, "crc32 differs");
        }
    }
}

bool regenerates_identically(const std::filesystem::path& dir, const mnist::GlyphSource& glyphs,
                             const std::filesystem::path& scratch_dir, int workers) {
    const auto m = read_manifest(dir);
    GenerateOptions opt;
    opt.scene = m.config_echo;
    opt.seed = m.seed;
    opt.shard_size = m.shard_size;
    opt.dtype = m.dtype;
    opt.workers = workers;
    opt.counts = {m.has_split("train") ? m.split("train").count : 0, m.has_split("val") ? m.split("val").count : 0,
                  m.has_split("test") ? m.split("test").count : 0,
                  m.has_split("clean_test") ? m.split("clean_test").count : 0};
    const auto again = generate_dataset(opt, glyphs, scratch_dir);
    for (const auto& s : m.splits) {
        if (!again.has_split(s.name)) return false;
        const auto& t = again.split(s.name);
        if (t.shards.size() != s.shards.size()) return false;
        for (std::size_t i = 0; i < s.shards.size(); ++i) {
            if (t.shards[i].crc32 != s.shards[i].crc32 || t.shards[i].bytes != s.shards[i].bytes) return false;
        }
    }
    return true;
}

SplitReader::SplitReader(std::filesystem::path dir, DatasetManifest manifest, const std::string& split,
                         std::size_t cached_shards)
    : dir_(std::move(dir)), manifest_(std::move(manifest)), info_(manifest_.split(split)),
      cached_shards_(std::max<std::size_t>(1, cached_shards)) {}

std::shared_ptr<const SplitReader::Shard> SplitReader::load(std::size_t shard) const {
    {
        std::lock_guard lock(mutex_);
        for (auto it = cache_.begin(); it != cache_.end(); ++it) {
            if (it->first == shard) {
                cache_.splice(cache_.begin(), cache_, it);
                return cache_.front().second;
            }
        }
    }
    const auto& sh = info_.shards[shard];
    const auto bytes = read_all(dir_ / sh.file);
    if (bytes.size() != sh.bytes || crc_of(bytes) != sh.crc32) throw ChecksumError(sh.file, "contents changed since write");
    Cursor cur{bytes, 0, sh.file};
    cur.need(sizeof(kShardMagic));
    if (std::memcmp(bytes.data(), kShardMagic, sizeof(kShardMagic)) != 0) throw IoError("bad shard magic in " + sh.file);
    cur.at = sizeof(kShardMagic);
    if (cur.get<std::uint32_t>() != kShardVersion) throw IoError("unsupported shard version in " + sh.file);
    auto out = std::make_shared<Shard>();
    out->reserve(sh.count);
    while (cur.at < bytes.size()) {
        StoredSample r;
        r.index = cur.get<std::uint64_t>();
        auto& s = r.sample;
        s.frames_count = int(cur.get<std::uint32_t>());
        s.channels = int(cur.get<std::uint32_t>());
        s.size = int(cur.get<std::uint32_t>());
        if (int(cur.get<std::uint32_t>()) != s.size) throw IoError("non-square frames in " + sh.file);
        const auto dtype = StorageDtype(cur.get<std::uint8_t>());
        const std::size_t n = std::size_t(s.frames_count) * s.channels * s.size * s.size;
        s.frames = cur.frames(n, dtype);
        s.clean_frames = cur.frames(n, dtype);
        cur.need(std::size_t(s.size) * s.size);
        s.label.assign(bytes.begin() + std::ptrdiff_t(cur.at), bytes.begin() + std::ptrdiff_t(cur.at + std::size_t(s.size) * s.size));
        cur.at += std::size_t(s.size) * s.size;
        out->push_back(std::move(r));
    }
    if (out->size() != sh.count) throw IoError("shard " + sh.file + " holds " + std::to_string(out->size()) + " records");

    std::lock_guard lock(mutex_);
    cache_.emplace_front(shard, out);
    while (cache_.size() > cached_shards_) cache_.pop_back();
    return out;
}

StoredSample SplitReader::get(std::size_t position) const {
    if (position >= size()) throw std::out_of_range("sample position out of range");
    std::size_t shard = 0;
    while (position >= info_.shards[shard].first + info_.shards[shard].count) ++shard;
    return (*load(shard))[position - info_.shards[shard].first];
}

std::vector<std::size_t> SplitReader::order(std::optional<std::uint64_t> shuffle_seed) const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle_seed) {
        // explicit Fisher-Yates so the permutation does not depend on the standard library
        std::mt19937_64 rng(*shuffle_seed);
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    }
    return idx;
}

SampleIterator::SampleIterator(std::shared_ptr<const SplitReader> reader, std::optional<std::uint64_t> shuffle_seed)
    : reader_(std::move(reader)), order_(reader_->order(shuffle_seed)) {}

StoredSample SampleIterator::next() {
    if (done()) throw std::out_of_range("iterator exhausted");
    return reader_->get(order_[pos_++]);
}

SampleIterator open_split(const std::filesystem::path& dir, const std::string& split,
                          std::optional<std::uint64_t> shuffle_seed) {
    auto reader = std::make_shared<const SplitReader>(dir, read_manifest(dir), split);
    return SampleIterator(std::move(reader), shuffle_seed);
}

}  // namespace rfcnet::data
