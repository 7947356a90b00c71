#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "prism/core.hpp"
#include "prism/nn.hpp"
#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Checkpoint container: one file holding
//   [u64 little-endian manifest byte count][UTF-8 JSON manifest][raw arrays]
// where the raw block is every parameter as little-endian float32, packed in
// manifest order. Writes go to a sibling temp file and are renamed into
// place, so a crash never leaves a half-written checkpoint at `path`.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
    std::uint32_t format_version = kCheckpointFormatVersion;
    std::int64_t step = 0;
    std::map<std::string, std::string> config;
};

namespace ckpt_detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& in, const std::string& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (in.gcount() != 8) throw IoError("checkpoint truncated (header): " + path);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline void put_f32_le(std::ostream& out, const float* src, std::size_t n) {
    static_assert(sizeof(float) == 4);
    // Little-endian host: memcpy is already the wire format.
    std::vector<unsigned char> buf(n * 4);
    std::memcpy(buf.data(), src, n * 4);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

inline void get_f32_le(std::istream& in, float* dst, std::size_t n, const std::string& name,
                       const std::string& path) {
    std::vector<unsigned char> buf(n * 4);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (std::size_t(in.gcount()) != buf.size())
        throw IoError("checkpoint truncated while reading array '" + name + "': " + path);
    std::memcpy(dst, buf.data(), n * 4);
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const ParamStore<float>& store,
                            const CheckpointMeta& meta) {
    nlohmann::json manifest;
    manifest["format_version"] = meta.format_version;
    manifest["step"] = meta.step;
    manifest["config"] = meta.config;
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& [name, tensor] : store.entries) {
        nlohmann::json a;
        a["name"] = name;
        a["shape"] = tensor->shape();
        arrays.push_back(std::move(a));
    }
    manifest["arrays"] = std::move(arrays);
    const std::string text = manifest.dump();

    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open checkpoint for writing: " + tmp.string());
        ckpt_detail::put_u64_le(out, text.size());
        out.write(text.data(), std::streamsize(text.size()));
        for (const auto& [name, tensor] : store.entries)
            ckpt_detail::put_f32_le(out, tensor->data(), std::size_t(tensor->numel()));
        out.flush();
        if (!out) throw IoError("write failed for checkpoint: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + target.string() + ": " + ec.message());
}

// Reads only the manifest (cheap). Used to recover the config snapshot before
// the model that will receive the arrays has been built.
inline CheckpointMeta peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    const std::uint64_t len = ckpt_detail::get_u64_le(in, path);
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (std::uint64_t(in.gcount()) != len)
        throw IoError("checkpoint truncated (manifest): " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest is not valid JSON: " + path + ": " + e.what());
    }
    CheckpointMeta meta;
    try {
        meta.format_version = manifest.at("format_version").get<std::uint32_t>();
        meta.step = manifest.at("step").get<std::int64_t>();
        meta.config = manifest.at("config").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest missing fields: " + path + ": " + e.what());
    }
    if (meta.format_version != kCheckpointFormatVersion)
        throw IoError("checkpoint format version mismatch: " + path + " has version " +
                      std::to_string(meta.format_version) + ", expected " +
                      std::to_string(kCheckpointFormatVersion));
    return meta;
}

// Loads the arrays into `store`, which must already hold tensors with the
// exact names and shapes recorded in the file (same registration order).
inline CheckpointMeta load_checkpoint(const std::string& path, ParamStore<float>& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    const std::uint64_t len = ckpt_detail::get_u64_le(in, path);
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (std::uint64_t(in.gcount()) != len)
        throw IoError("checkpoint truncated (manifest): " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest is not valid JSON: " + path + ": " + e.what());
    }

    CheckpointMeta meta;
    try {
        meta.format_version = manifest.at("format_version").get<std::uint32_t>();
        meta.step = manifest.at("step").get<std::int64_t>();
        meta.config = manifest.at("config").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest missing fields: " + path + ": " + e.what());
    }
    if (meta.format_version != kCheckpointFormatVersion)
        throw IoError("checkpoint format version mismatch: " + path + " has version " +
                      std::to_string(meta.format_version) + ", expected " +
                      std::to_string(kCheckpointFormatVersion));

    const auto& arrays = manifest.at("arrays");
    if (arrays.size() != store.entries.size())
        throw ShapeError("checkpoint holds " + std::to_string(arrays.size()) +
                         " arrays but the model has " + std::to_string(store.entries.size()));
    for (std::size_t i = 0; i < store.entries.size(); ++i) {
        const std::string file_name = arrays[i].at("name").get<std::string>();
        const auto file_shape = arrays[i].at("shape").get<std::vector<std::int64_t>>();
        auto& [name, tensor] = store.entries[i];
        if (file_name != name)
            throw ShapeError("checkpoint array " + std::to_string(i) + " is '" + file_name +
                             "' but the model expects '" + name + "'");
        if (file_shape != tensor->shape()) {
            auto fmt = [](const std::vector<std::int64_t>& s) {
                std::string r = "[";
                for (std::size_t k = 0; k < s.size(); ++k)
                    r += (k ? "," : "") + std::to_string(s[k]);
                return r + "]";
            };
            throw ShapeError("shape mismatch for array '" + name + "': checkpoint has " +
                             fmt(file_shape) + ", model has " + fmt(tensor->shape()));
        }
        ckpt_detail::get_f32_le(in, tensor->data(), std::size_t(tensor->numel()), name, path);
    }
    return meta;
}

}  // namespace prism
