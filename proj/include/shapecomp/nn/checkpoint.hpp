#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "shapecomp/binary_io.hpp"
#include "shapecomp/nn/model.hpp"

// Checkpoint container:
//   "SCKP" | u32 version | u32 n + n bytes of JSON (model config and metadata)
//   | u32 blob count | per blob: u32 name length, name, u8 kind, u32 ndim,
//   ndim x u32 dims, float32 little-endian values.
namespace shapecomp::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig model;
    nlohmann::json meta = nlohmann::json::object();
    CompletionNet<float> net;
};

inline std::vector<char> encode_checkpoint(const CompletionNet<float>& net, const nlohmann::json& meta = nlohmann::json::object()) {
    io::ByteWriter w;
    w.bytes("SCKP");
    w.u32(kCheckpointVersion);
    const std::string header = nlohmann::json{{"model", net.config()}, {"meta", meta}}.dump();
    w.u32(std::uint32_t(header.size()));
    w.bytes(header);
    w.u32(std::uint32_t(net.params().size()));
    for (const auto* p : net.params()) {
        w.u32(std::uint32_t(p->name.size()));
        w.bytes(p->name);
        w.u8(std::uint8_t(p->kind));
        w.u32(std::uint32_t(p->value.ndim()));
        for (int d : p->value.shape()) w.u32(std::uint32_t(d));
        for (float v : p->value.values()) w.f32(v);
    }
    return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes));
    if (r.bytes(4) != "SCKP") throw FormatError("not a checkpoint (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.bytes(r.u32()));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const ModelConfig cfg = header.at("model").get<ModelConfig>();
    Checkpoint ck{cfg, header.value("meta", nlohmann::json::object()), CompletionNet<float>(cfg)};
    const std::uint32_t count = r.u32();
    if (count != ck.net.params().size())
        throw ConfigMismatch("checkpoint holds " + std::to_string(count) + " blobs, model expects " +
                             std::to_string(ck.net.params().size()));
    for (auto* p : ck.net.params()) {
        const std::string name = r.bytes(r.u32());
        if (name != p->name) throw ConfigMismatch("checkpoint blob '" + name + "' where '" + p->name + "' was expected");
        if (r.u8() != std::uint8_t(p->kind)) throw FormatError("blob '" + name + "' has the wrong kind");
        const std::uint32_t ndim = r.u32();
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(int(r.u32()));
        if (shape != p->value.shape()) throw ConfigMismatch("blob '" + name + "' has a different shape");
        for (auto& v : p->value.values()) v = r.f32();
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint blobs");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CompletionNet<float>& net,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    io::ByteWriter w;
    const auto bytes = encode_checkpoint(net, meta);
    w.bytes(std::string_view(bytes.data(), bytes.size()));
    w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return decode_checkpoint(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
}

}  // namespace shapecomp::nn
