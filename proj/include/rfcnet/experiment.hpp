#pragma once

#include <filesystem>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>

#include "rfcnet/dataset.hpp"
#include "rfcnet/models.hpp"
#include "rfcnet/train.hpp"

namespace rfcnet::experiment {

class BadConfig : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DatasetSection {
    std::string dir = "data/generated";
    data::SplitCounts counts;
    std::uint64_t shard_size = 500;
    data::StorageDtype dtype = data::StorageDtype::f32;
    int workers = 1;
    std::string mnist_dir;  // empty: $RFCNET_MNIST_DIR, then synthetic glyphs
};

/// Everything one experiment needs. The scene seed doubles as the dataset seed.
struct ExperimentConfig {
    scene::SceneConfig scene;
    DatasetSection dataset;
    std::map<std::string, models::ModelSpec> models;
    train::TrainConfig train;

    /// Requires exactly the zoo's model names; throws BadConfig.
    void validate() const;
    const models::ModelSpec& model(const std::string& name) const;
};

void to_json(nlohmann::json& j, const DatasetSection& d);
void from_json(const nlohmann::json& j, DatasetSection& d);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Strict: unknown keys anywhere throw BadConfig (or the section's own error).
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Built-in configuration document: full-scale sections plus a "profiles"
/// object whose entries are merge-patched over the root when selected.
nlohmann::json default_document();

/// Applies `profile` ("full" is the root itself) and parses strictly.
ExperimentConfig resolve(const nlohmann::json& document, const std::string& profile);
ExperimentConfig load(const std::filesystem::path& file, const std::string& profile);

/// FNV-1a 64 over the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& effective);

/// Version string baked in at configure time.
std::string code_version();

/// Writes stamp.json (command, config hash, seed, code version) and
/// config.json (the effective configuration) into `dir`.
void write_stamp(const std::filesystem::path& dir, const std::string& command, const nlohmann::json& effective,
                 std::uint64_t seed, const nlohmann::json& extra = nlohmann::json::object());

}  // namespace rfcnet::experiment
