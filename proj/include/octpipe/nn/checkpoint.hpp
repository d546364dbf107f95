#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "octpipe/errors.hpp"
#include "octpipe/nn/layers.hpp"

namespace oct::nn {

// Checkpoint directory layout:
//   spec.json      architecture description + seed + format version
//   manifest.json  [{"name", "shape", "offset"}] with byte offsets
//   params.bin     flat little-endian f32 blob, entries in manifest order
inline constexpr int kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(const std::string& dir, const nlohmann::json& spec,
                     const std::vector<Param<S>*>& params) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    nlohmann::json spec_out = spec;
    spec_out["checkpoint_version"] = kCheckpointVersion;
    {
        std::ofstream os(dir + "/spec.json");
        if (!os) throw io_error("cannot write " + dir + "/spec.json");
        os << spec_out.dump(2) << "\n";
    }

    nlohmann::json manifest = nlohmann::json::array();
    std::ofstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw io_error("cannot write " + dir + "/params.bin");
    std::uint64_t offset = 0;
    std::vector<float> tmp;
    for (const auto* p : params) {
        manifest.push_back({{"name", p->name},
                            {"shape", p->value.shape},
                            {"offset", offset},
                            {"trainable", p->trainable},
                            {"buffer", p->is_buffer}});
        tmp.resize(p->value.numel());
        for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = static_cast<float>(p->value.data[i]);
        blob.write(reinterpret_cast<const char*>(tmp.data()),
                   static_cast<std::streamsize>(sizeof(float) * tmp.size()));
        offset += sizeof(float) * tmp.size();
    }
    if (!blob) throw io_error("write failed: " + dir + "/params.bin");
    std::ofstream os(dir + "/manifest.json");
    if (!os) throw io_error("cannot write " + dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
}

inline nlohmann::json load_checkpoint_spec(const std::string& dir) {
    std::ifstream is(dir + "/spec.json");
    if (!is) throw io_error("cannot open " + dir + "/spec.json");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("invalid checkpoint spec.json: " + std::string(e.what()));
    }
    return j;
}

// Fills the given params (matched by name) from the checkpoint. Every param
// must be present with the exact shape; unknown names in the manifest are an
// error so a truncated or mixed-up checkpoint cannot load silently.
template <typename S>
void load_checkpoint_params(const std::string& dir, const std::vector<Param<S>*>& params) {
    std::ifstream ms(dir + "/manifest.json");
    if (!ms) throw io_error("cannot open " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("invalid checkpoint manifest: " + std::string(e.what()));
    }

    std::unordered_map<std::string, Param<S>*> by_name;
    for (auto* p : params) by_name[p->name] = p;

    std::ifstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw io_error("cannot open " + dir + "/params.bin");

    std::size_t loaded = 0;
    std::vector<float> tmp;
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name").get<std::string>();
        const auto it = by_name.find(name);
        if (it == by_name.end())
            throw format_error("checkpoint has unknown parameter: " + name);
        Param<S>* p = it->second;
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != p->value.shape)
            throw shape_error("checkpoint shape mismatch for " + name);
        const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        blob.seekg(static_cast<std::streamoff>(offset));
        tmp.resize(p->value.numel());
        blob.read(reinterpret_cast<char*>(tmp.data()),
                  static_cast<std::streamsize>(sizeof(float) * tmp.size()));
        if (static_cast<std::size_t>(blob.gcount()) != sizeof(float) * tmp.size())
            throw truncation_error("checkpoint blob truncated at " + name);
        for (std::size_t i = 0; i < tmp.size(); ++i) p->value.data[i] = static_cast<S>(tmp[i]);
        ++loaded;
    }
    if (loaded != by_name.size())
        throw format_error("checkpoint is missing parameters (" + std::to_string(loaded) +
                           " of " + std::to_string(by_name.size()) + ")");
}

}  // namespace oct::nn
