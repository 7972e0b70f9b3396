#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfcnet/scene.hpp"

namespace rfcnet::data {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class ChecksumError : public std::runtime_error {
public:
    ChecksumError(const std::string& shard, const std::string& what)
        : std::runtime_error("checksum mismatch in shard '" + shard + "': " + what), shard_(shard) {}
    const std::string& shard() const { return shard_; }

private:
    std::string shard_;
};
class UnknownSplit : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};
class DataMissing : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kShardMagic[16] = {'R', 'F', 'C', 'N', 'E', 'T', 'D', 'S'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

enum class StorageDtype : std::uint8_t { f32 = 0, u8 = 1 };
std::string to_string(StorageDtype d);
StorageDtype parse_dtype(const std::string& s);

struct ShardInfo {
    std::string file;
    std::uint64_t first = 0, count = 0;  // sequence range [first, first + count)
    std::uint64_t bytes = 0;
    std::uint32_t crc32 = 0;
};

struct SplitInfo {
    std::string name;
    std::uint64_t count = 0;
    std::string stream;          // seed stream; clean_test shares the test stream
    bool clean = false;          // perturbations disabled
    std::string glyph_split;     // "train" or "test"
    std::vector<ShardInfo> shards;
};

struct DatasetManifest {
    int version = kManifestVersion;
    std::uint64_t seed = 0;
    StorageDtype dtype = StorageDtype::f32;
    std::uint64_t shard_size = 0;
    int frames = 0, channels = 0, image_size = 0;
    std::string glyph_source;
    scene::SceneConfig config_echo;
    std::vector<SplitInfo> splits;

    const SplitInfo& split(const std::string& name) const;  // throws UnknownSplit
    bool has_split(const std::string& name) const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Manifest is written to a temporary file and renamed into place.
void write_manifest(const DatasetManifest& m, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);  // throws DataMissing

/// Appends samples to "<split>-NNNNN.bin" shards of at most shard_size records.
class ShardWriter {
public:
    ShardWriter(std::filesystem::path dir, std::string split, std::uint64_t shard_size, StorageDtype dtype);
    void add(std::uint64_t index, const scene::SequenceSample& s);
    /// Flushes the open shard and returns the split's shard table (count filled in).
    SplitInfo finish();

private:
    void flush();

    std::filesystem::path dir_;
    std::string split_;
    std::uint64_t shard_size_;
    StorageDtype dtype_;
    std::vector<std::uint8_t> buffer_;
    std::uint64_t in_buffer_ = 0, first_ = 0, written_ = 0;
    std::vector<ShardInfo> shards_;
};

/// Writes all samples as one split and a manifest describing them.
DatasetManifest write_shards(const std::vector<scene::SequenceSample>& samples, const std::filesystem::path& out_dir,
                             std::uint64_t shard_size, StorageDtype dtype = StorageDtype::f32,
                             const std::string& split = "train");

struct SplitCounts {
    std::uint64_t train = 20000, val = 4000, test = 1000, clean_test = 1000;
    static SplitCounts tiny() { return {500, 100, 100, 100}; }
};

struct GenerateOptions {
    scene::SceneConfig scene;
    std::uint64_t seed = 0;
    SplitCounts counts;
    std::uint64_t shard_size = 500;
    StorageDtype dtype = StorageDtype::f32;
    int workers = 1;
};

/// Generates every split into out_dir. Sequence i of a split uses
/// scene::sequence_seed(seed, stream, i), so output is independent of `workers`.
DatasetManifest generate_dataset(const GenerateOptions& opt, const mnist::GlyphSource& glyphs,
                                 const std::filesystem::path& out_dir);

/// Recomputes every shard checksum; throws ChecksumError naming the first bad shard.
void verify_dataset(const std::filesystem::path& dir, const DatasetManifest& m);

/// Regenerates the dataset from config_echo and seed into scratch_dir and
/// reports whether every shard checksum matches.
bool regenerates_identically(const std::filesystem::path& dir, const mnist::GlyphSource& glyphs,
                             const std::filesystem::path& scratch_dir, int workers = 1);

struct StoredSample {
    std::uint64_t index = 0;
    scene::SequenceSample sample;
};

/// Random access to one split with a small cache of decoded shards. Safe for
/// concurrent use.
class SplitReader {
public:
    SplitReader(std::filesystem::path dir, DatasetManifest manifest, const std::string& split,
                std::size_t cached_shards = 8);

    std::size_t size() const { return std::size_t(info_.count); }
    const SplitInfo& info() const { return info_; }
    const DatasetManifest& manifest() const { return manifest_; }
    StoredSample get(std::size_t position) const;
    /// Deterministic visiting order: identity, or a seeded permutation.
    std::vector<std::size_t> order(std::optional<std::uint64_t> shuffle_seed = std::nullopt) const;

private:
    using Shard = std::vector<StoredSample>;
    std::shared_ptr<const Shard> load(std::size_t shard) const;

    std::filesystem::path dir_;
    DatasetManifest manifest_;
    SplitInfo info_;
    std::size_t cached_shards_;
    mutable std::mutex mutex_;
    mutable std::list<std::pair<std::size_t, std::shared_ptr<const Shard>>> cache_;
};

/// Sequential iterator over a split.
class SampleIterator {
public:
    SampleIterator(std::shared_ptr<const SplitReader> reader, std::optional<std::uint64_t> shuffle_seed);
    bool done() const { return pos_ >= order_.size(); }
    StoredSample next();
    std::size_t size() const { return order_.size(); }

private:
    std::shared_ptr<const SplitReader> reader_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

/// Opens a split of the dataset stored in dir. Throws DataMissing / UnknownSplit.
SampleIterator open_split(const std::filesystem::path& dir, const std::string& split,
                          std::optional<std::uint64_t> shuffle_seed = std::nullopt);

}  // namespace rfcnet::data
