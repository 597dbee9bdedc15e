#pragma once

// Parameter checkpoint: a JSON index {name -> offset} followed by a blob of
// DPAT tensor records. Offsets are relative to the start of the blob.

#include <map>

#include <json.hpp>

#include "dpa/tensor.hpp"

namespace dpa {

struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& named,
                            const std::string& config_text) {
    std::ostringstream blob(std::ios::binary);
    nlohmann::json index;
    index["version"] = 1;
    index["config"] = config_text;
    nlohmann::json offsets = nlohmann::json::object();
    for (const auto& [name, t] : named) {
        offsets[name] = static_cast<int64_t>(blob.tellp());
        save_tensor(blob, t);
    }
    index["tensors"] = offsets;
    std::string header = index.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write("DPAC", 4);
    uint32_t len = static_cast<uint32_t>(header.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::string payload = blob.str();
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DPAC", 4) != 0)
        throw ParseError("bad checkpoint magic in " + path);
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    std::string header(len, '\0');
    f.read(header.data(), len);
    if (!f) throw ParseError("truncated checkpoint header");
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint index: ") + e.what());
    }
    std::streampos blob_start = f.tellg();

    Checkpoint ckpt;
    ckpt.config_text = index.value("config", "");
    // load in offset order so the file reads forward
    std::vector<std::pair<int64_t, std::string>> order;
    for (auto it = index["tensors"].begin(); it != index["tensors"].end(); ++it)
        order.push_back({it.value().get<int64_t>(), it.key()});
    std::sort(order.begin(), order.end());
    for (const auto& [off, name] : order) {
        f.seekg(blob_start + static_cast<std::streamoff>(off));
        ckpt.tensors.push_back({name, load_tensor(f)});
    }
    return ckpt;
}

}  // namespace dpa
