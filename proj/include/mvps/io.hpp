#pragma once

// File formats: binary PLY for clouds/meshes, PFM for float maps, 8/16-bit
// grayscale PNG for masks and quantized images.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"

namespace mvps::io {

static_assert(std::endian::native == std::endian::little, "PLY/PFM writers assume a little-endian host");

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
    T v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(path, "unexpected end of file");
    return v;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path, "cannot open for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path, "cannot open for reading");
    return is;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PLY

inline void write_ply(const std::string& path, const std::vector<Vec3>& vertices, const std::vector<Vec3>& normals,
                      const std::vector<TriangleMesh::Triangle>& faces) {
    const bool with_normals = !normals.empty();
    if (with_normals && normals.size() != vertices.size()) throw InputError("write_ply: normals length mismatch");
    auto os = detail::open_out(path);
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << vertices.size() << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    if (with_normals) os << "property float nx\nproperty float ny\nproperty float nz\n";
    os << "element face " << faces.size() << "\n";
    os << "property list uchar uint vertex_indices\n";
    os << "end_header\n";
    for (std::size_t i = 0; i < vertices.size(); ++i) {
        for (int c = 0; c < 3; ++c) detail::put(os, static_cast<float>(vertices[i][c]));
        if (with_normals)
            for (int c = 0; c < 3; ++c) detail::put(os, static_cast<float>(normals[i][c]));
    }
    for (const auto& f : faces) {
        detail::put<std::uint8_t>(os, 3);
        for (auto idx : f) detail::put<std::uint32_t>(os, idx);
    }
    if (!os) throw IoError(path, "write failed");
}

inline void write_ply(const std::string& path, const TriangleMesh& mesh) {
    write_ply(path, mesh.vertices, mesh.vertex_normals, mesh.triangles);
}

inline void write_ply(const std::string& path, const PointCloud& cloud) {
    write_ply(path, cloud.points, cloud.normals, {});
}

// Reads ASCII or binary little-endian PLY with float/double vertex properties
// and triangle (or polygon, fan-triangulated) faces.
inline TriangleMesh read_ply(const std::string& path) {
    auto is = detail::open_in(path);
    std::string line;
    std::getline(is, line);
    if (line.rfind("ply", 0) != 0) throw IoError(path, "not a PLY file");

    enum class Fmt { ascii, binary_le } fmt = Fmt::ascii;
    struct Prop {
        std::string name, type, count_type;
        bool list = false;
    };
    struct Element {
        std::string name;
        std::size_t count = 0;
        std::vector<Prop> props;
    };
    std::vector<Element> elements;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ss(line);
        std::string kw;
        ss >> kw;
        if (kw == "format") {
            std::string f;
            ss >> f;
            if (f == "ascii") fmt = Fmt::ascii;
            else if (f == "binary_little_endian") fmt = Fmt::binary_le;
            else throw IoError(path, "unsupported PLY format '" + f + "'");
        } else if (kw == "element") {
            Element e;
            ss >> e.name >> e.count;
            elements.push_back(e);
        } else if (kw == "property") {
            if (elements.empty()) throw IoError(path, "property before element");
            Prop p;
            ss >> p.type;
            if (p.type == "list") {
                p.list = true;
                ss >> p.count_type >> p.type >> p.name;
            } else {
                ss >> p.name;
            }
            elements.back().props.push_back(p);
        } else if (kw == "end_header") {
            break;
        }
    }

    auto type_size = [&](const std::string& t) -> int {
        if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
        if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
        if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
        if (t == "double" || t == "float64") return 8;
        throw IoError(path, "unsupported PLY type '" + t + "'");
    };
    auto read_scalar = [&](const std::string& t) -> double {
        if (fmt == Fmt::ascii) {
            double v;
            if (!(is >> v)) throw IoError(path, "truncated ASCII PLY body");
            return v;
        }
        switch (type_size(t)) {
            case 1:
                return (t == "char" || t == "int8") ? double(detail::get<std::int8_t>(is, path))
                                                    : double(detail::get<std::uint8_t>(is, path));
            case 2:
                return (t == "short" || t == "int16") ? double(detail::get<std::int16_t>(is, path))
                                                      : double(detail::get<std::uint16_t>(is, path));
            case 4:
                if (t == "float" || t == "float32") return detail::get<float>(is, path);
                return (t == "int" || t == "int32") ? double(detail::get<std::int32_t>(is, path))
                                                    : double(detail::get<std::uint32_t>(is, path));
            default:
                return detail::get<double>(is, path);
        }
    };

    TriangleMesh mesh;
    for (const auto& e : elements) {
        if (e.name == "vertex") {
            int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1;
            for (int i = 0; i < int(e.props.size()); ++i) {
                const auto& n = e.props[i].name;
                if (n == "x") ix = i;
                if (n == "y") iy = i;
                if (n == "z") iz = i;
                if (n == "nx") inx = i;
                if (n == "ny") iny = i;
                if (n == "nz") inz = i;
            }
            if (ix < 0 || iy < 0 || iz < 0) throw IoError(path, "vertex element lacks x/y/z");
            const bool has_n = inx >= 0 && iny >= 0 && inz >= 0;
            std::vector<double> vals(e.props.size());
            for (std::size_t v = 0; v < e.count; ++v) {
                for (std::size_t i = 0; i < e.props.size(); ++i) {
                    if (e.props[i].list) throw IoError(path, "list property in vertex element");
                    vals[i] = read_scalar(e.props[i].type);
                }
                mesh.vertices.emplace_back(vals[ix], vals[iy], vals[iz]);
                if (has_n) mesh.vertex_normals.emplace_back(vals[inx], vals[iny], vals[inz]);
            }
        } else {
            for (std::size_t v = 0; v < e.count; ++v) {
                for (const auto& p : e.props) {
                    if (!p.list) {
                        read_scalar(p.type);
                        continue;
                    }
                    const auto n = static_cast<std::size_t>(read_scalar(p.count_type));
                    std::vector<std::uint32_t> idx(n);
                    for (auto& i : idx) i = static_cast<std::uint32_t>(read_scalar(p.type));
                    if (e.name == "face" && (p.name == "vertex_indices" || p.name == "vertex_index"))
                        for (std::size_t k = 2; k < n; ++k) mesh.triangles.push_back({idx[0], idx[k - 1], idx[k]});
                }
            }
        }
    }
    try {
        mesh.validate();
    } catch (const InputError& e) {
        throw IoError(path, e.what());
    }
    return mesh;
}

// ---------------------------------------------------------------------------
// PFM (little-endian; rows stored bottom-to-top per the format)

template <int Channels>
struct PfmData {
    int width = 0, height = 0;
    std::vector<float> values;  // row-major top-to-bottom, interleaved channels
};

template <int Channels>
void write_pfm_raw(const std::string& path, int width, int height, const std::vector<float>& values) {
    static_assert(Channels == 1 || Channels == 3);
    if (values.size() != std::size_t(width) * height * Channels) throw InputError("write_pfm: size mismatch");
    auto os = detail::open_out(path);
    os << (Channels == 3 ? "PF" : "Pf") << "\n" << width << " " << height << "\n-1.0\n";
    for (int v = height - 1; v >= 0; --v)
        os.write(reinterpret_cast<const char*>(values.data() + std::size_t(v) * width * Channels),
                 std::streamsize(sizeof(float)) * width * Channels);
    if (!os) throw IoError(path, "write failed");
}

template <int Channels>
PfmData<Channels> read_pfm_raw(const std::string& path) {
    auto is = detail::open_in(path);
    std::string magic;
    is >> magic;
    const int ch = magic == "PF" ? 3 : magic == "Pf" ? 1 : 0;
    if (ch == 0) throw IoError(path, "not a PFM file");
    if (ch != Channels) throw IoError(path, "expected " + std::to_string(Channels) + "-channel PFM");
    PfmData<Channels> d;
    double scale;
    if (!(is >> d.width >> d.height >> scale) || d.width <= 0 || d.height <= 0) throw IoError(path, "bad PFM header");
    is.get();  // single whitespace after the scale
    if (scale > 0) throw IoError(path, "big-endian PFM not supported");
    d.values.resize(std::size_t(d.width) * d.height * Channels);
    for (int v = d.height - 1; v >= 0; --v)
        if (!is.read(reinterpret_cast<char*>(d.values.data() + std::size_t(v) * d.width * Channels),
                     std::streamsize(sizeof(float)) * d.width * Channels))
            throw IoError(path, "truncated PFM data");
    return d;
}

template <typename T>
void write_pfm(const std::string& path, const Grid<T>& g) {
    std::vector<float> vals(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) vals[i] = static_cast<float>(g[i]);
    write_pfm_raw<1>(path, g.width(), g.height(), vals);
}

inline void write_pfm(const std::string& path, const NormalField& n) {
    std::vector<float> vals(n.size() * 3);
    for (std::size_t i = 0; i < n.size(); ++i)
        for (int c = 0; c < 3; ++c) vals[3 * i + c] = static_cast<float>(n[i][c]);
    write_pfm_raw<3>(path, n.width(), n.height(), vals);
}

inline Image read_pfm_image(const std::string& path) {
    auto d = read_pfm_raw<1>(path);
    Image img(d.width, d.height);
    std::copy(d.values.begin(), d.values.end(), img.storage().begin());
    return img;
}

inline DepthMap read_pfm_depth(const std::string& path, DepthRole role) {
    auto d = read_pfm_raw<1>(path);
    DepthMap m(d.width, d.height, role);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = d.values[i];
    return m;
}

inline NormalField read_pfm_normals(const std::string& path) {
    auto d = read_pfm_raw<3>(path);
    NormalField n(d.width, d.height);
    for (std::size_t i = 0; i < n.size(); ++i) n[i] = Vec3(d.values[3 * i], d.values[3 * i + 1], d.values[3 * i + 2]);
    return n;
}

// ---------------------------------------------------------------------------
// PNG (grayscale, 8 or 16 bit)

struct GrayPng {
    int width = 0, height = 0, bit_depth = 8;
    std::vector<std::uint16_t> values;
};

inline void write_png_gray(const std::string& path, const GrayPng& img) {
    if (img.bit_depth != 8 && img.bit_depth != 16) throw InputError("write_png_gray: bit depth must be 8 or 16");
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError(path, "cannot open for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path, "libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError(path, "libpng write failed");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, img.bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int bpp = img.bit_depth / 8;
    std::vector<png_byte> row(std::size_t(img.width) * bpp);
    for (int v = 0; v < img.height; ++v) {
        for (int u = 0; u < img.width; ++u) {
            const auto val = img.values[std::size_t(v) * img.width + u];
            if (bpp == 1) {
                row[u] = static_cast<png_byte>(val);
            } else {
                row[2 * u] = static_cast<png_byte>(val >> 8);  // PNG is big-endian
                row[2 * u + 1] = static_cast<png_byte>(val & 0xff);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline GrayPng read_png_gray(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError(path, "cannot open for reading");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path, "libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path, "libpng read failed");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    GrayPng img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.bit_depth = png_get_bit_depth(png, info);
    const auto color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || (img.bit_depth != 8 && img.bit_depth != 16)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path, "only 8/16-bit grayscale PNG is supported");
    }
    const int bpp = img.bit_depth / 8;
    std::vector<png_byte> row(std::size_t(img.width) * bpp);
    img.values.resize(std::size_t(img.width) * img.height);
    for (int v = 0; v < img.height; ++v) {
        png_read_row(png, row.data(), nullptr);
        for (int u = 0; u < img.width; ++u)
            img.values[std::size_t(v) * img.width + u] =
                bpp == 1 ? row[u] : static_cast<std::uint16_t>((row[2 * u] << 8) | row[2 * u + 1]);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline void write_mask_png(const std::string& path, const BitMask& mask) {
    GrayPng p{mask.width(), mask.height(), 8, {}};
    p.values.resize(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) p.values[i] = mask[i] ? 255 : 0;
    write_png_gray(path, p);
}

inline BitMask read_mask_png(const std::string& path) {
    const auto p = read_png_gray(path);
    BitMask m(p.width, p.height, 0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.values[i] > 0 ? 1 : 0;
    return m;
}

// 16-bit export of a linear radiometric image; `white` maps to 65535, values are clamped.
inline void write_png16(const std::string& path, const Image& img, double white = 1.0) {
    GrayPng p{img.width(), img.height(), 16, {}};
    p.values.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        p.values[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img[i] / white, 0.0, 1.0) * 65535.0));
    write_png_gray(path, p);
}

inline Image read_png16(const std::string& path, double white = 1.0) {
    const auto p = read_png_gray(path);
    const double maxv = p.bit_depth == 16 ? 65535.0 : 255.0;
    Image img(p.width, p.height);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(p.values[i] / maxv * white);
    return img;
}

}  // namespace mvps::io
