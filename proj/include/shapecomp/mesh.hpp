#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Geometry>

#include "shapecomp/grid.hpp"

namespace shapecomp {

struct TriangleMesh {
    std::vector<Vec3> vertices;                 // mm
    std::vector<std::array<int, 3>> triangles;  // indices into vertices

    void validate() const {
        if (vertices.size() < 4) throw InvalidArgument("mesh needs at least 4 vertices");
        for (const auto& t : triangles)
            for (int i : t)
                if (i < 0 || std::size_t(i) >= vertices.size()) throw InvalidArgument("triangle index out of range");
    }

    void translate(const Vec3& d) {
        for (auto& v : vertices) v += d;
    }
};

namespace mesh_detail {

// Merges vertices that agree to within `tol` (quantised key) and drops
// triangles that collapse or have zero area.
inline TriangleMesh build_clean(const std::vector<Vec3>& raw_vertices, const std::vector<std::array<int, 3>>& raw_tris,
                                double tol = 1e-6) {
    TriangleMesh mesh;
    std::map<std::tuple<long long, long long, long long>, int> lookup;
    std::vector<int> remap(raw_vertices.size());
    for (std::size_t i = 0; i < raw_vertices.size(); ++i) {
        const Vec3& v = raw_vertices[i];
        auto key = std::make_tuple(std::llround(v.x() / tol), std::llround(v.y() / tol), std::llround(v.z() / tol));
        auto [it, inserted] = lookup.emplace(key, int(mesh.vertices.size()));
        if (inserted) mesh.vertices.push_back(v);
        remap[i] = it->second;
    }
    for (const auto& t : raw_tris) {
        std::array<int, 3> r{remap[std::size_t(t[0])], remap[std::size_t(t[1])], remap[std::size_t(t[2])]};
        if (r[0] == r[1] || r[1] == r[2] || r[0] == r[2]) continue;
        const Vec3 n = (mesh.vertices[std::size_t(r[1])] - mesh.vertices[std::size_t(r[0])])
                           .cross(mesh.vertices[std::size_t(r[2])] - mesh.vertices[std::size_t(r[0])]);
        if (n.norm() <= 1e-14) continue;
        mesh.triangles.push_back(r);
    }
    return mesh;
}

inline std::string lower_ext(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
    return e;
}

inline float read_f32_le(const unsigned char* p) {
    std::uint32_t u = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                      (std::uint32_t(p[3]) << 24);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

inline TriangleMesh parse_binary_stl(const std::vector<char>& bytes) {
    if (bytes.size() < 84) throw ParseError("binary STL header truncated at byte " + std::to_string(bytes.size()));
    const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t count = std::uint32_t(b[80]) | (std::uint32_t(b[81]) << 8) | (std::uint32_t(b[82]) << 16) |
                                (std::uint32_t(b[83]) << 24);
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> tris;
    verts.reserve(std::size_t(count) * 3);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::size_t off = 84 + std::size_t(t) * 50;
        if (off + 50 > bytes.size()) {
            throw ParseError("binary STL truncated: triangle " + std::to_string(t) + " at byte offset " +
                             std::to_string(off) + " exceeds file size " + std::to_string(bytes.size()));
        }
        for (int k = 0; k < 3; ++k) {
            const unsigned char* p = b + off + 12 + 12 * k;
            verts.emplace_back(read_f32_le(p), read_f32_le(p + 4), read_f32_le(p + 8));
        }
        const int base = int(verts.size()) - 3;
        tris.push_back({base, base + 1, base + 2});
    }
    return build_clean(verts, tris);
}

inline TriangleMesh parse_ascii_stl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> tris;
    int pending = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string word;
        if (!(ls >> word)) continue;
        if (word == "vertex") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) throw ParseError("malformed vertex on line " + std::to_string(line_no));
            verts.emplace_back(x, y, z);
            ++pending;
        } else if (word == "endloop") {
            if (pending != 3) throw ParseError("facet without exactly 3 vertices ending on line " + std::to_string(line_no));
            const int base = int(verts.size()) - 3;
            tris.push_back({base, base + 1, base + 2});
            pending = 0;
        } else if (word == "facet" || word == "outer" || word == "endfacet" || word == "solid" || word == "endsolid") {
            continue;
        } else {
            throw ParseError("unexpected token '" + word + "' on line " + std::to_string(line_no));
        }
    }
    if (pending != 0) throw ParseError("unterminated facet at end of file (line " + std::to_string(line_no) + ")");
    return build_clean(verts, tris);
}

inline TriangleMesh parse_obj(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<Vec3> verts;
    std::vector<std::array<int, 3>> tris;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string word;
        if (!(ls >> word)) continue;
        if (word == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) throw ParseError("malformed vertex on line " + std::to_string(line_no));
            verts.emplace_back(x, y, z);
        } else if (word == "f") {
            std::vector<int> face;
            std::string tok;
            while (ls >> tok) {
                const std::string head = tok.substr(0, tok.find('/'));
                int idx = 0;
                try {
                    std::size_t used = 0;
                    idx = std::stoi(head, &used);
                    if (used != head.size()) throw std::invalid_argument(head);
                } catch (const std::exception&) {
                    throw ParseError("bad face index '" + tok + "' on line " + std::to_string(line_no));
                }
                if (idx < 0) idx = int(verts.size()) + idx + 1;  // relative index
                if (idx < 1 || std::size_t(idx) > verts.size())
                    throw ParseError("face index out of range on line " + std::to_string(line_no));
                face.push_back(idx - 1);
            }
            if (face.size() < 3) throw ParseError("face with fewer than 3 vertices on line " + std::to_string(line_no));
            for (std::size_t k = 1; k + 1 < face.size(); ++k) tris.push_back({face[0], face[k], face[k + 1]});
        }
        // other records (vn, vt, g, o, s, usemtl, ...) are ignored
    }
    return build_clean(verts, tris);
}

}  // namespace mesh_detail

/// Reads binary/ASCII STL or OBJ (v/f records). Vertices closer than 1e-6 mm merge.
inline TriangleMesh load_mesh(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    const std::string ext = mesh_detail::lower_ext(path);

    TriangleMesh mesh;
    if (ext == ".stl") {
        bool binary = true;
        if (bytes.size() >= 84) {
            const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
            const std::uint64_t count = std::uint32_t(b[80]) | (std::uint32_t(b[81]) << 8) |
                                        (std::uint32_t(b[82]) << 16) | (std::uint32_t(b[83]) << 24);
            if (84 + 50 * count == bytes.size()) binary = true;
            else binary = false;
        } else {
            binary = false;
        }
        const std::string head(bytes.data(), std::min<std::size_t>(bytes.size(), 5));
        const std::string text(bytes.begin(), bytes.end());
        if (!binary && head == "solid" && text.find("facet") != std::string::npos) {
            mesh = mesh_detail::parse_ascii_stl(text);
        } else {
            mesh = mesh_detail::parse_binary_stl(bytes);
        }
    } else if (ext == ".obj") {
        mesh = mesh_detail::parse_obj(std::string(bytes.begin(), bytes.end()));
    } else {
        throw UnsupportedFormat("unsupported mesh extension '" + ext + "' (expected .stl or .obj)");
    }
    mesh.validate();
    return mesh;
}

inline void save_ascii_stl(const std::filesystem::path& path, const TriangleMesh& mesh) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.precision(17);
    out << "solid shapecomp\n";
    for (const auto& t : mesh.triangles) {
        const Vec3 n = (mesh.vertices[std::size_t(t[1])] - mesh.vertices[std::size_t(t[0])])
                           .cross(mesh.vertices[std::size_t(t[2])] - mesh.vertices[std::size_t(t[0])])
                           .normalized();
        out << "facet normal " << n.x() << ' ' << n.y() << ' ' << n.z() << "\n outer loop\n";
        for (int k : t) {
            const Vec3& v = mesh.vertices[std::size_t(k)];
            out << "  vertex " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
        }
        out << " endloop\nendfacet\n";
    }
    out << "endsolid shapecomp\n";
}

// Simple closed solids, used for calibration and tests.

inline TriangleMesh make_box_mesh(const Vec3& lo, const Vec3& hi) {
    TriangleMesh m;
    for (int i = 0; i < 8; ++i)
        m.vertices.emplace_back((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(), (i & 4) ? hi.z() : lo.z());
    // Outward-facing quads, split along a diagonal.
    const int quads[6][4] = {{0, 2, 3, 1}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 6, 7, 3}, {0, 4, 6, 2}, {1, 3, 7, 5}};
    for (const auto& q : quads) {
        m.triangles.push_back({q[0], q[1], q[2]});
        m.triangles.push_back({q[0], q[2], q[3]});
    }
    return m;
}

/// Latitude/longitude sphere with poles on the z axis.
inline TriangleMesh make_uv_sphere_mesh(const Vec3& center, double radius, int slices = 64, int stacks = 32) {
    TriangleMesh m;
    m.vertices.push_back(center + Vec3(0, 0, radius));
    for (int i = 1; i < stacks; ++i) {
        const double phi = std::numbers::pi * i / stacks;
        for (int j = 0; j < slices; ++j) {
            const double theta = 2.0 * std::numbers::pi * j / slices;
            m.vertices.push_back(center + radius * Vec3(std::sin(phi) * std::cos(theta),
                                                        std::sin(phi) * std::sin(theta), std::cos(phi)));
        }
    }
    m.vertices.push_back(center - Vec3(0, 0, radius));
    const int south = int(m.vertices.size()) - 1;
    auto ring = [&](int i, int j) { return 1 + (i - 1) * slices + (j % slices); };
    for (int j = 0; j < slices; ++j) m.triangles.push_back({0, ring(1, j), ring(1, j + 1)});
    for (int i = 1; i + 1 < stacks; ++i)
        for (int j = 0; j < slices; ++j) {
            m.triangles.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
            m.triangles.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
        }
    for (int j = 0; j < slices; ++j) m.triangles.push_back({south, ring(stacks - 1, j + 1), ring(stacks - 1, j)});
    return m;
}

struct VoxelizeReport {
    std::size_t disagreeing_voxels = 0;
    std::size_t total_voxels = 0;
    Vec3 origin = Vec3::Zero();  ///< world position of the grid's min corner (mm)
};

namespace mesh_detail {

struct Point2 {
    double u, v;
};

inline bool lex_less(const Point2& a, const Point2& b) { return a.u < b.u || (a.u == b.u && a.v < b.v); }

// Edge function evaluated with endpoints in canonical order so that the two
// triangles sharing an edge compute exactly negated values.
inline double edge_function(const Point2& from, const Point2& to, const Point2& p) {
    const bool flip = lex_less(to, from);
    const Point2& a = flip ? to : from;
    const Point2& b = flip ? from : to;
    const double e = (b.u - a.u) * (p.v - a.v) - (b.v - a.v) * (p.u - a.u);
    return flip ? -e : e;
}

// Top-left fill rule for a counter-clockwise edge: points exactly on the
// edge belong to it only for one of the two traversal directions.
inline bool owns_boundary(const Point2& from, const Point2& to) {
    const double du = to.u - from.u, dv = to.v - from.v;
    return dv > 0.0 || (dv == 0.0 && du < 0.0);
}

}  // namespace mesh_detail

/// Ray-parity voxelization along all three axes with majority vote. The
/// output cube tightly bounds the mesh along its longest axis (edge >= 8)
/// and centers it along the others.
inline VoxelGrid voxelize(const TriangleMesh& mesh, double voxel_size_mm, VoxelizeReport* report = nullptr,
                          double max_disagreement = 0.01) {
    using namespace mesh_detail;
    if (!(voxel_size_mm > 0.0)) throw InvalidArgument("voxel size must be positive");
    mesh.validate();

    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const auto& v : mesh.vertices) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    const Vec3 extent = hi - lo;
    int edge = GridSpec::min_edge;
    for (int a = 0; a < 3; ++a) edge = std::max(edge, int(std::ceil(extent[a] / voxel_size_mm - 1e-9)));
    const GridSpec spec(edge, voxel_size_mm);
    // Pad by whole voxels so the bounding box starts on a voxel boundary; a half-voxel
    // shift would put axis-aligned faces exactly on voxel centers.
    Vec3 origin;
    for (int a = 0; a < 3; ++a)
        origin[a] = lo[a] - std::floor(0.5 * (edge - extent[a] / voxel_size_mm) + 1e-9) * voxel_size_mm;

    // Vertices in continuous voxel coordinates: voxel i has its center at i.
    std::vector<Vec3> local(mesh.vertices.size());
    for (std::size_t i = 0; i < local.size(); ++i)
        local[i] = (mesh.vertices[i] - origin) / voxel_size_mm - Vec3::Constant(0.5);

    const std::size_t n = spec.voxel_count();
    std::vector<std::uint8_t> votes(n, 0);
    const int c = edge;

    for (int axis = 0; axis < 3; ++axis) {
        const int au = (axis + 1) % 3, av = (axis + 2) % 3;
        std::vector<std::vector<double>> hits(std::size_t(c) * c);
        for (const auto& tri : mesh.triangles) {
            const Vec3& A = local[std::size_t(tri[0])];
            const Vec3& B = local[std::size_t(tri[1])];
            const Vec3& C = local[std::size_t(tri[2])];
            Point2 p0{A[au], A[av]}, p1{B[au], B[av]}, p2{C[au], C[av]};
            double d0 = A[axis], d1 = B[axis], d2 = C[axis];
            const double area = edge_function(p0, p1, p2);
            if (area == 0.0) continue;  // parallel to the ray direction
            if (area < 0.0) {
                std::swap(p1, p2);
                std::swap(d1, d2);
            }
            const int u0 = std::max(0, int(std::ceil(std::min({p0.u, p1.u, p2.u}))));
            const int u1 = std::min(c - 1, int(std::floor(std::max({p0.u, p1.u, p2.u}))));
            const int v0 = std::max(0, int(std::ceil(std::min({p0.v, p1.v, p2.v}))));
            const int v1 = std::min(c - 1, int(std::floor(std::max({p0.v, p1.v, p2.v}))));
            for (int v = v0; v <= v1; ++v)
                for (int u = u0; u <= u1; ++u) {
                    const Point2 p{double(u), double(v)};
                    const double e01 = edge_function(p0, p1, p);
                    const double e12 = edge_function(p1, p2, p);
                    const double e20 = edge_function(p2, p0, p);
                    auto inside = [](double e, const Point2& f, const Point2& t) {
                        return e > 0.0 || (e == 0.0 && owns_boundary(f, t));
                    };
                    if (!inside(e01, p0, p1) || !inside(e12, p1, p2) || !inside(e20, p2, p0)) continue;
                    const double sum = e01 + e12 + e20;
                    const double depth = (e12 * d0 + e20 * d1 + e01 * d2) / sum;
                    hits[std::size_t(u) + std::size_t(c) * std::size_t(v)].push_back(depth);
                }
        }
        for (int v = 0; v < c; ++v)
            for (int u = 0; u < c; ++u) {
                auto& h = hits[std::size_t(u) + std::size_t(c) * std::size_t(v)];
                std::sort(h.begin(), h.end());
                for (int s = 0; s < c; ++s) {
                    // crossings strictly ahead of the voxel center along +axis
                    const auto ahead = h.end() - std::upper_bound(h.begin(), h.end(), double(s));
                    if (ahead % 2 == 1) {
                        int xyz[3];
                        xyz[axis] = s;
                        xyz[au] = u;
                        xyz[av] = v;
                        votes[spec.index(xyz[0], xyz[1], xyz[2])] += 1;
                    }
                }
            }
    }

    VoxelGrid grid(spec);
    std::size_t disagree = 0;
    for (std::size_t i = 0; i < n; ++i) {
        grid.set(i, votes[i] >= 2);
        if (votes[i] == 1 || votes[i] == 2) ++disagree;
    }
    if (report) *report = {disagree, n, origin};
    if (double(disagree) > max_disagreement * double(n)) {
        throw NonWatertight(std::to_string(disagree) + " of " + std::to_string(n) +
                            " voxels have inconsistent ray parity across axes");
    }
    return grid;
}

/// Zero-pads `g` symmetrically (extra voxel, if any, goes after) to c^3.
inline VoxelGrid pad_to_cube(const VoxelGrid& g, int c) {
    if (g.edge() > c) {
        throw DoesNotFit("grid of edge " + std::to_string(g.edge()) + " does not fit into " + std::to_string(c) + "^3");
    }
    if (g.edge() == c) return g;
    const int before = (c - g.edge()) / 2;
    VoxelGrid out(GridSpec(c, g.spec().voxel_size));
    const int e = g.edge();
    for (int z = 0; z < e; ++z)
        for (int y = 0; y < e; ++y)
            for (int x = 0; x < e; ++x)
                if (g.at(x, y, z)) out.set(x + before, y + before, z + before, true);
    return out;
}

}  // namespace shapecomp
