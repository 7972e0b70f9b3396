#include "rfcnet/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

#ifndef RFCNET_VERSION
#define RFCNET_VERSION "unknown"
#endif

namespace rfcnet::experiment {

namespace fs = std::filesystem;

namespace {

template <typename Fn>
auto section(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const nlohmann::json::exception& e) {
        throw BadConfig(std::string(name) + ": " + e.what());
    }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw BadConfig(where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw BadConfig("unknown key '" + key + "' in " + where);
    }
}

nlohmann::json counts_json(const data::SplitCounts& c) {
    return {{"train", c.train}, {"val", c.val}, {"test", c.test}, {"clean_test", c.clean_test}};
}

}  // namespace

void ExperimentConfig::validate() const {
    scene.validate();
    train.validate();
    const auto& names = models::zoo_names();
    for (const auto& [name, spec] : models) {
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            throw BadConfig("unknown model '" + name + "' in models section");
        }
        if (spec.name != name) throw BadConfig("model '" + name + "' carries name '" + spec.name + "'");
        spec.validate();
    }
    for (const auto& name : names) {
        if (!models.count(name)) throw BadConfig("models section lacks '" + name + "'");
    }
    if (dataset.shard_size == 0) throw BadConfig("dataset.shard_size must be >= 1");
    if (dataset.workers < 1) throw BadConfig("dataset.workers must be >= 1");
}

const models::ModelSpec& ExperimentConfig::model(const std::string& name) const {
    const auto it = models.find(name);
    if (it == models.end()) throw BadConfig("no model named '" + name + "'");
    return it->second;
}

void to_json(nlohmann::json& j, const DatasetSection& d) {
    j = {{"dir", d.dir},
         {"counts", counts_json(d.counts)},
         {"shard_size", d.shard_size},
         {"dtype", data::to_string(d.dtype)},
         {"workers", d.workers},
         {"mnist_dir", d.mnist_dir}};
}

void from_json(const nlohmann::json& j, DatasetSection& d) {
    reject_unknown(j, {"dir", "counts", "shard_size", "dtype", "workers", "mnist_dir"}, "dataset");
    section("dataset", [&] {
        d.dir = j.value("dir", d.dir);
        if (j.contains("counts")) {
            const auto& c = j.at("counts");
            reject_unknown(c, {"train", "val", "test", "clean_test"}, "dataset.counts");
            d.counts.train = c.value("train", d.counts.train);
            d.counts.val = c.value("val", d.counts.val);
            d.counts.test = c.value("test", d.counts.test);
            d.counts.clean_test = c.value("clean_test", d.counts.clean_test);
        }
        d.shard_size = j.value("shard_size", d.shard_size);
        if (j.contains("dtype")) d.dtype = data::parse_dtype(j.at("dtype").get<std::string>());
        d.workers = j.value("workers", d.workers);
        d.mnist_dir = j.value("mnist_dir", d.mnist_dir);
        return 0;
    });
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json models = nlohmann::json::object();
    for (const auto& [name, spec] : c.models) models[name] = spec;
    j = {{"scene", c.scene}, {"dataset", c.dataset}, {"models", models}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    reject_unknown(j, {"scene", "dataset", "models", "train"}, "experiment config");
    if (j.contains("scene")) c.scene = j.at("scene").get<scene::SceneConfig>();
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<DatasetSection>();
    if (j.contains("train")) c.train = j.at("train").get<train::TrainConfig>();
    if (j.contains("models")) {
        const auto& m = j.at("models");
        if (!m.is_object()) throw BadConfig("models must be an object");
        c.models.clear();
        for (const auto& [name, spec] : m.items()) {
            auto parsed = section("models", [&] { return spec.get<models::ModelSpec>(); });
            if (parsed.name.empty()) parsed.name = name;
            c.models[name] = parsed;
        }
    }
    c.validate();
}

nlohmann::json default_document() {
    ExperimentConfig full;
    nlohmann::json tiny_models = nlohmann::json::object();
    for (const auto& name : models::zoo_names()) {
        full.models[name] = models::zoo_spec(name);
        tiny_models[name] = models::tiny_spec(name);
    }
    nlohmann::json doc = full;
    doc["profiles"] = {{"tiny", {{"dataset", {{"counts", counts_json(data::SplitCounts::tiny())}}},
                                 {"models", tiny_models}}}};
    return doc;
}

ExperimentConfig resolve(const nlohmann::json& document, const std::string& profile) {
    if (!document.is_object()) throw BadConfig("experiment config must be a JSON object");
    nlohmann::json root = document;
    nlohmann::json profiles = nlohmann::json::object();
    if (root.contains("profiles")) {
        profiles = root["profiles"];
        root.erase("profiles");
        if (!profiles.is_object()) throw BadConfig("profiles must be an object");
    }
    if (profile != "full") {
        if (!profiles.contains(profile)) throw BadConfig("unknown profile '" + profile + "'");
        root.merge_patch(profiles[profile]);
    }
    return root.get<ExperimentConfig>();
}

ExperimentConfig load(const fs::path& file, const std::string& profile) {
    std::ifstream in(file);
    if (!in) throw BadConfig("cannot open config " + file.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw BadConfig(file.string() + ": " + e.what());
    }
    return resolve(doc, profile);
}

std::string config_hash(const nlohmann::json& effective) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : effective.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string code_version() { return RFCNET_VERSION; }

void write_stamp(const fs::path& dir, const std::string& command, const nlohmann::json& effective,
                 std::uint64_t seed, const nlohmann::json& extra) {
    fs::create_directories(dir);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char when[32];
    std::strftime(when, sizeof when, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    nlohmann::json stamp = {{"command", command},
                            {"config_hash", config_hash(effective)},
                            {"seed", seed},
                            {"code_version", code_version()},
                            {"created_utc", when}};
    for (const auto& [k, v] : extra.items()) stamp[k] = v;
    std::ofstream(dir / "stamp.json") << stamp.dump(2) << "\n";
    std::ofstream(dir / "config.json") << effective.dump(2) << "\n";
}

}  // namespace rfcnet::experiment
