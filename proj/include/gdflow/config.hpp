#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdflow/model.hpp"
#include "gdflow/train.hpp"

// Run configuration document (strict key whitelist) and the checkpoint file
// format: a JSON manifest of {name, shape, byte offset} plus one raw
// little-endian float64 blob.

namespace gdflow {

using Json = nlohmann::json;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

namespace detail {

inline void require_keys(const Json& obj, const std::string& section,
                         const std::set<std::string>& keys) {
    if (!obj.is_object()) throw UsageError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : obj.items())
        if (!keys.count(key))
            throw UsageError("unknown config key '" + section + "." + key + "'");
    for (const auto& key : keys)
        if (!obj.contains(key))
            throw UsageError("missing config key '" + section + "." + key + "'");
}

template <class T>
T get_num(const Json& obj, const std::string& section, const std::string& key) {
    const auto& v = obj.at(key);
    if (!v.is_number())
        throw UsageError("config key '" + section + "." + key + "' must be a number");
    return v.get<T>();
}

}  // namespace detail

inline Json model_config_to_json(const ModelConfig& m) {
    return Json{{"d", m.d},
                {"d_h", m.d_h},
                {"K", m.K},
                {"k", m.k},
                {"heads", m.heads},
                {"key_dim", m.key_dim},
                {"leaky_slope", m.leaky_slope},
                {"variant", variant_name(m.variant)}};
}

inline Json integrator_config_to_json(const IntegratorConfig& c) {
    return Json{{"dt", c.dt},
                {"T", c.t_end},
                {"graph_refresh", c.refresh == GraphRefresh::PerStep ? "per-step" : "per-stage"},
                {"activation", c.activation}};
}

inline ModelConfig model_config_from_json(const Json& jm, const Json& ji) {
    detail::require_keys(jm, "model",
                         {"d", "d_h", "K", "k", "heads", "key_dim", "leaky_slope", "variant"});
    detail::require_keys(ji, "integrator", {"dt", "T", "graph_refresh", "activation"});
    ModelConfig m;
    m.d = detail::get_num<int64_t>(jm, "model", "d");
    m.d_h = detail::get_num<int64_t>(jm, "model", "d_h");
    m.K = detail::get_num<int64_t>(jm, "model", "K");
    m.k = detail::get_num<int64_t>(jm, "model", "k");
    m.heads = detail::get_num<int64_t>(jm, "model", "heads");
    m.key_dim = detail::get_num<int64_t>(jm, "model", "key_dim");
    m.leaky_slope = detail::get_num<double>(jm, "model", "leaky_slope");
    if (!jm.at("variant").is_string()) throw UsageError("model.variant must be a string");
    m.variant = parse_variant(jm.at("variant").get<std::string>());
    m.integrator.dt = detail::get_num<double>(ji, "integrator", "dt");
    m.integrator.t_end = detail::get_num<double>(ji, "integrator", "T");
    if (!ji.at("graph_refresh").is_string())
        throw UsageError("integrator.graph_refresh must be a string");
    m.integrator.refresh = parse_graph_refresh(ji.at("graph_refresh").get<std::string>());
    if (!ji.at("activation").is_boolean())
        throw UsageError("integrator.activation must be a boolean");
    m.integrator.activation = ji.at("activation").get<bool>();
    try {
        m.validate();
    } catch (const std::exception& e) {
        throw UsageError(std::string("invalid model config: ") + e.what());
    }
    return m;
}

inline TrainConfig train_config_from_json(const Json& jt) {
    detail::require_keys(jt, "train",
                         {"lr_init", "lr_min", "plateau_patience", "plateau_factor", "batch_size",
                          "iterations", "sigma_range", "loss_mode", "seed", "patch_size",
                          "val_interval", "clip_norm"});
    TrainConfig t;
    t.lr_init = detail::get_num<double>(jt, "train", "lr_init");
    t.lr_min = detail::get_num<double>(jt, "train", "lr_min");
    t.plateau_patience = detail::get_num<int64_t>(jt, "train", "plateau_patience");
    t.plateau_factor = detail::get_num<double>(jt, "train", "plateau_factor");
    t.batch_size = detail::get_num<int64_t>(jt, "train", "batch_size");
    t.iterations = detail::get_num<int64_t>(jt, "train", "iterations");
    const auto& sr = jt.at("sigma_range");
    if (!sr.is_array() || sr.size() != 2 || !sr[0].is_number() || !sr[1].is_number())
        throw UsageError("train.sigma_range must be [lo, hi]");
    t.sigma_lo = sr[0].get<double>();
    t.sigma_hi = sr[1].get<double>();
    if (!jt.at("loss_mode").is_string()) throw UsageError("train.loss_mode must be a string");
    t.loss_mode = parse_loss_mode(jt.at("loss_mode").get<std::string>());
    t.seed = detail::get_num<uint64_t>(jt, "train", "seed");
    t.patch_size = detail::get_num<int64_t>(jt, "train", "patch_size");
    t.val_interval = detail::get_num<int64_t>(jt, "train", "val_interval");
    t.clip_norm = detail::get_num<double>(jt, "train", "clip_norm");
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw UsageError(std::string("invalid train config: ") + e.what());
    }
    return t;
}

inline RunConfig parse_run_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw UsageError(std::string("config is not valid JSON: ") + e.what());
    }
    detail::require_keys(j, "<root>", {"model", "integrator", "train"});
    RunConfig rc;
    rc.model = model_config_from_json(j.at("model"), j.at("integrator"));
    rc.train = train_config_from_json(j.at("train"));
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open config " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

// ---------------------------------------------------------------------------
// Checkpoints: "GDFLOWCK" magic, u64 manifest length, manifest JSON, blob.

constexpr char kCheckpointMagic[8] = {'G', 'D', 'F', 'L', 'O', 'W', 'C', 'K'};

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const ModelConfig& cfg) {
    Json manifest;
    manifest["format_version"] = 1;
    manifest["model"] = model_config_to_json(cfg);
    manifest["integrator"] = integrator_config_to_json(cfg.integrator);
    Json plist = Json::array();
    int64_t offset = 0;
    std::vector<double> blob;
    for (const auto& [name, t] : params.named()) {
        Json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        plist.push_back(entry);
        blob.insert(blob.end(), t.values().begin(), t.values().end());
        offset += t.size() * static_cast<int64_t>(sizeof(double));
    }
    manifest["params"] = plist;
    const std::string mtext = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write(kCheckpointMagic, 8);
    const uint64_t mlen = mtext.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(double)));
    if (!f) throw IoError("write failure on checkpoint " + path);
}

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw ParseError(path + ": not a gdflow checkpoint");
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    if (f.gcount() != 8) throw ParseError(path + ": truncated manifest length");
    std::string mtext(mlen, '\0');
    f.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (static_cast<uint64_t>(f.gcount()) != mlen) throw ParseError(path + ": truncated manifest");
    Json manifest;
    try {
        manifest = Json::parse(mtext);
    } catch (const Json::parse_error& e) {
        throw ParseError(path + ": bad manifest: " + e.what());
    }

    Checkpoint ck;
    ck.config = model_config_from_json(manifest.at("model"), manifest.at("integrator"));
    ck.params = init_params(ck.config, 0);

    std::vector<char> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto named = ck.params.named();
    const auto& plist = manifest.at("params");
    if (plist.size() != named.size())
        throw ParseError(path + ": parameter count does not match the stored config");
    for (size_t i = 0; i < named.size(); ++i) {
        const auto& entry = plist.at(i);
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        if (name != named[i].first)
            throw ParseError(path + ": unexpected parameter '" + name + "'");
        Tensor& t = const_cast<Tensor&>(named[i].second);
        if (shape != t.shape())
            throw ParseError(path + ": shape mismatch for '" + name + "': stored " +
                             shape_str(shape) + ", config requires " + shape_str(t.shape()));
        const int64_t bytes = t.size() * static_cast<int64_t>(sizeof(double));
        if (offset < 0 || offset + bytes > static_cast<int64_t>(blob.size()))
            throw ParseError(path + ": blob out of range for '" + name + "'");
        std::memcpy(t.mutable_data(), blob.data() + offset, static_cast<size_t>(bytes));
    }
    return ck;
}

}  // namespace gdflow
