#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gdflow/common.hpp"
#include "gdflow/tensor.hpp"

// Point-cloud data model, XYZ/PLY file formats, synthetic shape sampling,
// Gaussian noising and patch extraction.

namespace gdflow {

using Point3 = std::array<double, 3>;

struct PointCloud {
    std::vector<Point3> points;
    std::string name;

    int64_t size() const { return static_cast<int64_t>(points.size()); }
};

struct NoiseSpec {
    double sigma = 0.0;  // fraction of the bounding-box diagonal
    uint64_t seed = 0;
};

inline double bbox_diagonal(const PointCloud& pc) {
    if (pc.points.empty()) throw ValueError("bounding box of empty cloud");
    Point3 lo = pc.points[0], hi = pc.points[0];
    for (const auto& p : pc.points)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) d2 += (hi[a] - lo[a]) * (hi[a] - lo[a]);
    return std::sqrt(d2);
}

inline Tensor to_tensor(const PointCloud& pc) {
    std::vector<double> data;
    data.reserve(pc.points.size() * 3);
    for (const auto& p : pc.points) data.insert(data.end(), p.begin(), p.end());
    return Tensor({pc.size(), 3}, std::move(data));
}

inline PointCloud from_tensor(const Tensor& t, std::string name = {}) {
    if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("point tensor must be N x 3");
    PointCloud pc;
    pc.name = std::move(name);
    pc.points.resize(t.dim(0));
    for (int64_t i = 0; i < t.dim(0); ++i)
        for (int a = 0; a < 3; ++a) pc.points[i][a] = t.values()[i * 3 + a];
    return pc;
}

// ---------------------------------------------------------------------------
// File formats

enum class CloudFormat { Xyz, PlyAscii, PlyBinary };

namespace detail {

inline bool parse_double(const std::string& tok, double& out) {
    const char* s = tok.c_str();
    char* end = nullptr;
    out = std::strtod(s, &end);
    return end != s && *end == '\0';
}

}  // namespace detail

// One point per line, whitespace separated; '#' starts a comment; extra
// columns beyond x y z are ignored.
inline PointCloud load_xyz(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    PointCloud pc;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream is(line);
        std::string tx, ty, tz;
        if (!(is >> tx)) continue;  // blank line
        if (!(is >> ty >> tz))
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected three coordinates");
        Point3 p;
        if (!detail::parse_double(tx, p[0]) || !detail::parse_double(ty, p[1]) ||
            !detail::parse_double(tz, p[2]))
            throw ParseError(path + ":" + std::to_string(lineno) + ": malformed number");
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
            throw ParseError(path + ":" + std::to_string(lineno) + ": non-finite coordinate");
        pc.points.push_back(p);
    }
    if (pc.points.empty()) throw ParseError(path + ": empty cloud");
    return pc;
}

inline void save_xyz(const PointCloud& pc, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    char buf[128];
    for (const auto& p : pc.points) {
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
        f << buf;
    }
    if (!f) throw IoError("write failure on " + path);
}

// Strict PLY subset: a single vertex element with float x, y, z, in ascii or
// binary_little_endian 1.0. Anything else is a parse error.
inline PointCloud load_ply(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string line;
    int64_t lineno = 0;
    auto next_line = [&]() -> std::string {
        if (!std::getline(f, line)) throw ParseError(path + ": unexpected end of header");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ++lineno;
        return line;
    };
    auto err = [&](const std::string& msg) {
        return ParseError(path + ":" + std::to_string(lineno) + ": " + msg);
    };
    if (next_line() != "ply") throw err("missing ply magic");
    bool binary = false;
    {
        const std::string fmt = next_line();
        if (fmt == "format ascii 1.0")
            binary = false;
        else if (fmt == "format binary_little_endian 1.0")
            binary = true;
        else
            throw err("unsupported format line '" + fmt + "'");
    }
    int64_t n = -1;
    int prop = 0;
    const char* want[3] = {"property float x", "property float y", "property float z"};
    for (;;) {
        const std::string l = next_line();
        if (l.rfind("comment", 0) == 0) continue;
        if (l.rfind("element vertex ", 0) == 0) {
            if (n >= 0) throw err("duplicate vertex element");
            try {
                n = std::stoll(l.substr(15));
            } catch (...) {
                throw err("bad vertex count");
            }
            continue;
        }
        if (l.rfind("property", 0) == 0) {
            if (n < 0 || prop >= 3 || l != want[prop]) throw err("unsupported property '" + l + "'");
            ++prop;
            continue;
        }
        if (l == "end_header") break;
        throw err("unsupported header line '" + l + "'");
    }
    if (n < 0) throw err("missing vertex element");
    if (prop != 3) throw err("vertex element must have float x y z");
    if (n == 0) throw ParseError(path + ": empty cloud");
    PointCloud pc;
    pc.points.resize(n);
    if (binary) {
        std::vector<float> raw(static_cast<size_t>(n) * 3);
        f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
        if (f.gcount() != static_cast<std::streamsize>(raw.size() * 4))
            throw ParseError(path + ": truncated binary payload");
        for (int64_t i = 0; i < n; ++i)
            for (int a = 0; a < 3; ++a) pc.points[i][a] = raw[i * 3 + a];
    } else {
        for (int64_t i = 0; i < n; ++i) {
            const std::string l = next_line();
            std::istringstream is(l);
            std::string tx, ty, tz;
            if (!(is >> tx >> ty >> tz)) throw err("expected three coordinates");
            if (!detail::parse_double(tx, pc.points[i][0]) ||
                !detail::parse_double(ty, pc.points[i][1]) ||
                !detail::parse_double(tz, pc.points[i][2]))
                throw err("malformed number");
        }
    }
    return pc;
}

inline void save_ply(const PointCloud& pc, const std::string& path, bool binary) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "ply\n"
      << (binary ? "format binary_little_endian 1.0" : "format ascii 1.0") << "\n"
      << "element vertex " << pc.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\nend_header\n";
    if (binary) {
        std::vector<float> raw;
        raw.reserve(pc.points.size() * 3);
        for (const auto& p : pc.points)
            for (int a = 0; a < 3; ++a) raw.push_back(static_cast<float>(p[a]));
        f.write(reinterpret_cast<const char*>(raw.data()),
                static_cast<std::streamsize>(raw.size() * 4));
    } else {
        char buf[96];
        for (const auto& p : pc.points) {
            std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", p[0], p[1], p[2]);
            f << buf;
        }
    }
    if (!f) throw IoError("write failure on " + path);
}

inline PointCloud load_cloud(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "ply") return load_ply(path);
    return load_xyz(path);
}

inline void save_cloud(const PointCloud& pc, const std::string& path,
                       CloudFormat fmt = CloudFormat::Xyz) {
    switch (fmt) {
        case CloudFormat::Xyz: save_xyz(pc, path); break;
        case CloudFormat::PlyAscii: save_ply(pc, path, false); break;
        case CloudFormat::PlyBinary: save_ply(pc, path, true); break;
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class SynthShape { Sphere, Torus, Cube, Plane };

inline SynthShape parse_shape(const std::string& s) {
    if (s == "sphere") return SynthShape::Sphere;
    if (s == "torus") return SynthShape::Torus;
    if (s == "cube") return SynthShape::Cube;
    if (s == "plane") return SynthShape::Plane;
    throw UsageError("unknown shape '" + s + "'");
}

// Uniform surface samples, then centered and scaled to unit bbox diagonal.
inline PointCloud synth(SynthShape shape, int64_t n, uint64_t seed) {
    if (n < 8) throw UsageError("synth requires n >= 8");
    Rng rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    PointCloud pc;
    pc.points.resize(n);
    switch (shape) {
        case SynthShape::Sphere: {
            pc.name = "sphere";
            for (auto& p : pc.points) {
                double v[3], norm = 0.0;
                do {
                    norm = 0.0;
                    for (double& x : v) {
                        x = gauss(rng);
                        norm += x * x;
                    }
                } while (norm < 1e-12);
                norm = std::sqrt(norm);
                for (int a = 0; a < 3; ++a) p[a] = v[a] / norm;
            }
            break;
        }
        case SynthShape::Torus: {
            pc.name = "torus";
            const double R = 1.0, r = 0.4;
            for (auto& p : pc.points) {
                // rejection on the major angle keeps the surface density uniform
                double theta;
                for (;;) {
                    theta = 2.0 * std::numbers::pi * uni(rng);
                    if (uni(rng) <= (R + r * std::cos(theta)) / (R + r)) break;
                }
                const double phi = 2.0 * std::numbers::pi * uni(rng);
                p[0] = (R + r * std::cos(theta)) * std::cos(phi);
                p[1] = (R + r * std::cos(theta)) * std::sin(phi);
                p[2] = r * std::sin(theta);
            }
            break;
        }
        case SynthShape::Cube: {
            pc.name = "cube";
            for (auto& p : pc.points) {
                const int face = static_cast<int>(uni(rng) * 6.0) % 6;
                const double u = uni(rng) - 0.5, v = uni(rng) - 0.5;
                const int axis = face / 2;
                const double sign = face % 2 ? 0.5 : -0.5;
                p[axis] = sign;
                p[(axis + 1) % 3] = u;
                p[(axis + 2) % 3] = v;
            }
            break;
        }
        case SynthShape::Plane: {
            pc.name = "plane";
            for (auto& p : pc.points) {
                p[0] = uni(rng) - 0.5;
                p[1] = uni(rng) - 0.5;
                p[2] = 0.0;
            }
            break;
        }
    }
    // center, then scale so the bbox diagonal is exactly 1
    Point3 lo = pc.points[0], hi = pc.points[0];
    for (const auto& p : pc.points)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    double d2 = 0.0;
    Point3 mid;
    for (int a = 0; a < 3; ++a) {
        d2 += (hi[a] - lo[a]) * (hi[a] - lo[a]);
        mid[a] = 0.5 * (lo[a] + hi[a]);
    }
    const double scale = 1.0 / std::sqrt(d2);
    for (auto& p : pc.points)
        for (int a = 0; a < 3; ++a) p[a] = (p[a] - mid[a]) * scale;
    return pc;
}

// Per-coordinate i.i.d. Gaussian with std = sigma * bbox diagonal.
inline PointCloud add_noise(const PointCloud& pc, const NoiseSpec& spec) {
    if (spec.sigma < 0.0) throw ValueError("noise sigma must be >= 0");
    PointCloud out = pc;
    if (spec.sigma == 0.0) return out;
    const double std_abs = spec.sigma * bbox_diagonal(pc);
    Rng rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, std_abs);
    for (auto& p : out.points)
        for (int a = 0; a < 3; ++a) p[a] += gauss(rng);
    return out;
}

// patch_size nearest points (including the seed point) around random seeds.
inline std::vector<PointCloud> extract_patches(const PointCloud& pc, int64_t patch_size,
                                               int64_t count, uint64_t seed) {
    const int64_t n = pc.size();
    if (patch_size < 1 || patch_size > n)
        throw ValueError("patch_size " + std::to_string(patch_size) + " exceeds cloud size " +
                         std::to_string(n));
    Rng rng(seed);
    std::uniform_int_distribution<int64_t> pick(0, n - 1);
    std::vector<PointCloud> patches;
    patches.reserve(count);
    std::vector<std::pair<double, int64_t>> dist(n);
    for (int64_t c = 0; c < count; ++c) {
        const int64_t center = pick(rng);
        const Point3& q = pc.points[center];
        for (int64_t i = 0; i < n; ++i) {
            const Point3& p = pc.points[i];
            const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
            dist[i] = {dx * dx + dy * dy + dz * dz, i};
        }
        std::nth_element(dist.begin(), dist.begin() + (patch_size - 1), dist.end());
        std::sort(dist.begin(), dist.begin() + patch_size);
        PointCloud patch;
        patch.name = pc.name + "_patch" + std::to_string(c);
        patch.points.reserve(patch_size);
        for (int64_t i = 0; i < patch_size; ++i) patch.points.push_back(pc.points[dist[i].second]);
        patches.push_back(std::move(patch));
    }
    return patches;
}

}  // namespace gdflow
