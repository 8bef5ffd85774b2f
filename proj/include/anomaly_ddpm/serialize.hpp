#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomaly_ddpm/errors.hpp"
#include "anomaly_ddpm/tensor.hpp"

namespace anomaly_ddpm {

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Write then rename, so partially failed runs never leave truncated artifacts.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

// Self-describing container of named float tensors plus JSON metadata.
// Used for model checkpoints and threshold maps. Layout:
//   magic "ADPMTNS1" | u64 header_len | header JSON | raw float32 payload
// The header carries user metadata under "meta" and a tensor directory
// (name, shape, offset) under "tensors". Saves are byte-deterministic, so
// load(save(m)) reproduces tensors exactly.
class TensorFile {
  public:
    nlohmann::json meta = nlohmann::json::object();

    void put(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

    bool has(const std::string& name) const { return tensors_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw IoError("tensor not found in container: " + name);
        return it->second;
    }

    const std::map<std::string, Tensor>& tensors() const { return tensors_; }

    // FNV-1a over shapes and payload in name order; identifies the weights.
    uint64_t payload_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : tensors_) {
            h = fnv1a64(name.data(), name.size(), h);
            for (int d : t.shape()) {
                int64_t v = d;
                h = fnv1a64(&v, sizeof(v), h);
            }
            h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(float), h);
        }
        return h;
    }

    std::string checksum() const { return hex64(payload_hash()); }

    std::string to_bytes() const {
        nlohmann::json dir = nlohmann::json::array();
        uint64_t offset = 0;
        for (const auto& [name, t] : tensors_) {
            dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
            offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
        }
        nlohmann::json header = {{"meta", meta}, {"tensors", dir}};
        std::string hs = header.dump();
        std::string bytes;
        bytes.reserve(16 + hs.size() + offset);
        bytes.append("ADPMTNS1", 8);
        uint64_t hlen = hs.size();
        bytes.append(reinterpret_cast<const char*>(&hlen), 8);
        bytes.append(hs);
        for (const auto& [name, t] : tensors_) {
            (void)name;
            bytes.append(reinterpret_cast<const char*>(t.data()),
                         static_cast<size_t>(t.numel()) * sizeof(float));
        }
        return bytes;
    }

    void save(const std::filesystem::path& path) const { atomic_write_file(path, to_bytes()); }

    static TensorFile from_bytes(const std::string& bytes, const std::string& origin = "<bytes>") {
        if (bytes.size() < 16 || std::memcmp(bytes.data(), "ADPMTNS1", 8) != 0)
            throw IoError("not a tensor container: " + origin);
        uint64_t hlen = 0;
        std::memcpy(&hlen, bytes.data() + 8, 8);
        if (16 + hlen > bytes.size()) throw IoError("corrupt container header: " + origin);
        nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));
        TensorFile tf;
        tf.meta = header.value("meta", nlohmann::json::object());
        size_t payload_base = 16 + static_cast<size_t>(hlen);
        for (const auto& e : header.at("tensors")) {
            std::string name = e.at("name").get<std::string>();
            std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            uint64_t offset = e.at("offset").get<uint64_t>();
            size_t nbytes = static_cast<size_t>(Tensor::numel_of(shape)) * sizeof(float);
            if (payload_base + offset + nbytes > bytes.size())
                throw IoError("corrupt container payload: " + origin);
            Tensor t(shape);
            std::memcpy(t.data(), bytes.data() + payload_base + offset, nbytes);
            tf.tensors_[name] = std::move(t);
        }
        return tf;
    }

    static TensorFile load(const std::filesystem::path& path) {
        return from_bytes(read_file_bytes(path), path.string());
    }

  private:
    std::map<std::string, Tensor> tensors_;
};

inline void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
    atomic_write_file(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace anomaly_ddpm
