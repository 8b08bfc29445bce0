#pragma once

#include <filesystem>
#include <variant>

#include "shapecomp/binary_io.hpp"
#include "shapecomp/grid.hpp"

// VXG1 (binary occupancy) and VXF1 (float probability) grid files:
//   magic[4] | u32 dim x3 (equal) | f32 voxel_size_mm | payload (x fastest)
// VXG1 payload is one byte per voxel (0 or 1), VXF1 is little-endian f32.
namespace shapecomp::io {

inline constexpr std::string_view kBinaryMagic = "VXG1";
inline constexpr std::string_view kFloatMagic = "VXF1";

namespace detail {

inline void write_header(ByteWriter& w, std::string_view magic, const GridSpec& spec) {
    w.bytes(magic);
    for (int i = 0; i < 3; ++i) w.u32(static_cast<std::uint32_t>(spec.c));
    w.f32(static_cast<float>(spec.voxel_size));
}

inline GridSpec read_header_tail(ByteReader& r) {
    const std::uint32_t dx = r.u32(), dy = r.u32(), dz = r.u32();
    if (dx != dy || dy != dz) {
        throw FormatError("grid dims must be equal, got " + std::to_string(dx) + "x" + std::to_string(dy) + "x" +
                          std::to_string(dz));
    }
    if (dx < GridSpec::min_edge || dx > 4096) throw FormatError("grid edge out of range: " + std::to_string(dx));
    const float vs = r.f32();
    if (!(vs > 0.0f)) throw FormatError("voxel size must be positive");
    return GridSpec(int(dx), double(vs));
}

}  // namespace detail

inline std::vector<char> encode(const VoxelGrid& g) {
    ByteWriter w;
    detail::write_header(w, kBinaryMagic, g.spec());
    for (auto v : g.data()) w.u8(v);
    return w.buffer();
}

inline std::vector<char> encode(const ProbGrid& g) {
    ByteWriter w;
    detail::write_header(w, kFloatMagic, g.spec());
    for (double v : g.data()) w.f32(static_cast<float>(v));
    return w.buffer();
}

using AnyGrid = std::variant<VoxelGrid, ProbGrid>;

inline AnyGrid decode_any(std::vector<char> bytes) {
    ByteReader r(std::move(bytes));
    const std::string magic = r.bytes(4);
    const GridSpec spec = detail::read_header_tail(r);
    const std::size_t n = spec.voxel_count();
    if (magic == kBinaryMagic) {
        std::vector<std::uint8_t> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t at = r.offset();
            data[i] = r.u8();
            if (data[i] > 1) throw FormatError("non-binary voxel value at byte " + std::to_string(at));
        }
        if (r.remaining()) throw FormatError("trailing bytes after VXG1 payload");
        return VoxelGrid(spec, std::move(data));
    }
    if (magic == kFloatMagic) {
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t at = r.offset();
            const float v = r.f32();
            if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("probability out of [0,1] at byte " + std::to_string(at));
            data[i] = v;
        }
        if (r.remaining()) throw FormatError("trailing bytes after VXF1 payload");
        return ProbGrid(spec, std::move(data));
    }
    throw FormatError("unknown grid magic '" + magic + "'");
}

inline AnyGrid read_any_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return decode_any(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
}

inline VoxelGrid read_voxel_grid(const std::filesystem::path& path) {
    auto any = read_any_grid(path);
    if (auto* g = std::get_if<VoxelGrid>(&any)) return std::move(*g);
    throw FormatError("'" + path.string() + "' is a VXF1 probability grid, expected VXG1");
}

inline ProbGrid read_prob_grid(const std::filesystem::path& path) {
    auto any = read_any_grid(path);
    if (auto* g = std::get_if<ProbGrid>(&any)) return std::move(*g);
    return ProbGrid::from_binary(std::get<VoxelGrid>(any));
}

namespace detail {

inline void write_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

}  // namespace detail

inline void write_grid(const std::filesystem::path& path, const VoxelGrid& g) { detail::write_bytes(path, encode(g)); }
inline void write_grid(const std::filesystem::path& path, const ProbGrid& g) { detail::write_bytes(path, encode(g)); }

}  // namespace shapecomp::io
