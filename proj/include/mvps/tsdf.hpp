#pragma once

// Dense truncated signed distance volume: weighted running-mean integration of
// depth maps, band extraction for one camera, raycasting, marching-cubes
// meshing and a raw debug dump.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvps/detail/mc_tables.hpp"
#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"

namespace mvps {

// Voxel (i, j, k) is centred at origin + (i, j, k) * voxel_size. V is the signed
// distance divided by the truncation mu; unobserved voxels hold V = 1, W = 0.
class TSDFVolume {
public:
    TSDFVolume() = default;
    TSDFVolume(int resolution, double voxel_size, const Vec3& origin, double truncation_voxels = 3.0)
        : n_(resolution), voxel_(voxel_size), origin_(origin), mu_(truncation_voxels * voxel_size) {
        if (resolution < 2) throw InputError("TSDFVolume: resolution must be at least 2");
        if (!(voxel_size > 0.0) || !(truncation_voxels > 0.0)) throw InputError("TSDFVolume: bad voxel size");
        if (!origin.allFinite()) throw InputError("TSDFVolume: origin not finite");
        const std::size_t count = std::size_t(n_) * n_ * n_;
        v_.assign(count, 1.0);
        w_.assign(count, 0.0);
    }

    int resolution() const { return n_; }
    double voxel_size() const { return voxel_; }
    double truncation() const { return mu_; }
    const Vec3& origin() const { return origin_; }
    std::size_t voxel_count() const { return v_.size(); }

    std::size_t index(int i, int j, int k) const { return (std::size_t(k) * n_ + j) * n_ + i; }
    std::array<int, 3> coords(std::size_t idx) const {
        return {int(idx % n_), int((idx / n_) % n_), int(idx / (std::size_t(n_) * n_))};
    }
    Vec3 position(int i, int j, int k) const { return origin_ + voxel_ * Vec3(i, j, k); }
    Vec3 position(std::size_t idx) const {
        const auto c = coords(idx);
        return position(c[0], c[1], c[2]);
    }

    double value(std::size_t idx) const { return v_[idx]; }
    double weight(std::size_t idx) const { return w_[idx]; }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }
    std::vector<double>& weights() { return w_; }
    const std::vector<double>& weights() const { return w_; }

    // V <- (W V + w v) / (W + w), W <- W + w.
    void update(std::size_t idx, double v, double w) {
        if (!(w > 0.0)) return;
        const double wn = w_[idx] + w;
        v_[idx] = (w_[idx] * v_[idx] + w * v) / wn;
        w_[idx] = wn;
    }

    // Trilinear V at a reference-frame point; empty unless all 8 neighbours are observed.
    std::optional<double> sample(const Vec3& p) const {
        const Vec3 g = (p - origin_) / voxel_;
        const int i = int(std::floor(g.x())), j = int(std::floor(g.y())), k = int(std::floor(g.z()));
        if (i < 0 || j < 0 || k < 0 || i + 1 >= n_ || j + 1 >= n_ || k + 1 >= n_) return std::nullopt;
        const double fx = g.x() - i, fy = g.y() - j, fz = g.z() - k;
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int di = c & 1, dj = (c >> 1) & 1, dk = (c >> 2) & 1;
            const std::size_t idx = index(i + di, j + dj, k + dk);
            if (!(w_[idx] > 0.0)) return std::nullopt;
            acc += (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz) * v_[idx];
        }
        return acc;
    }

    // Central-difference gradient of the trilinear field.
    std::optional<Vec3> sample_gradient(const Vec3& p) const {
        const double h = 0.5 * voxel_;
        Vec3 g;
        for (int a = 0; a < 3; ++a) {
            Vec3 d = Vec3::Zero();
            d[a] = h;
            const auto fp = sample(p + d), fm = sample(p - d);
            if (!fp || !fm) return std::nullopt;
            g[a] = (*fp - *fm) / (2.0 * h);
        }
        return g;
    }

private:
    int n_ = 0;
    double voxel_ = 1.0;
    Vec3 origin_ = Vec3::Zero();
    double mu_ = 3.0;
    std::vector<double> v_;
    std::vector<double> w_;
};

// Cube sized from a first-frame cloud seen along +z: side = (1 + 2 * margin) * max bbox extent,
// centred on the cloud in x and y, and starting margin * extent in front of the nearest point in z
// so the unseen back half of the object fits.
inline TSDFVolume fit_volume(const std::vector<Vec3>& points, int resolution, double margin = 0.1,
                             double truncation_voxels = 3.0) {
    if (points.empty()) throw InputError("fit_volume: empty cloud");
    const AxisBox box = bounding_box(points);
    const double extent = box.extent().maxCoeff();
    if (!(extent > 0.0)) throw InputError("fit_volume: degenerate cloud");
    const double side = (1.0 + 2.0 * margin) * extent;
    const double voxel = side / double(resolution - 1);
    const Vec3 c = box.center();
    const Vec3 origin(c.x() - 0.5 * side, c.y() - 0.5 * side, box.min.z() - margin * extent);
    return TSDFVolume(resolution, voxel, origin, truncation_voxels);
}

struct LocalUpdate {
    struct Entry {
        std::size_t voxel;
        double v;
        double w;
    };
    std::vector<Entry> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

namespace detail {

// Calls f(voxel index, sdf, pixel index) for every voxel projecting onto a valid depth pixel.
template <typename F>
void visit_frustum(const TSDFVolume& vol, const DepthMap& depth, const CameraIntrinsics& k, const PoseSE3& pose,
                   F&& f) {
    k.validate();
    if (!depth.same_shape(k.width, k.height)) throw InputError("tsdf: depth does not match intrinsics");
    const PoseSE3 inv = pose.inverse();
    const Mat3& r = inv.rotation();
    const int n = vol.resolution();
    const double s = vol.voxel_size();
    for (int kk = 0; kk < n; ++kk)
        for (int j = 0; j < n; ++j) {
            const Vec3 row0 = inv * vol.position(0, j, kk);
            const Vec3 step = r.col(0) * s;
            for (int i = 0; i < n; ++i) {
                const Vec3 x = row0 + double(i) * step;
                if (!(x.z() > 0.0)) continue;
                const double u = k.fx * x.x() / x.z() + k.cx, v = k.fy * x.y() / x.z() + k.cy;
                const int pu = int(std::lround(u)), pv = int(std::lround(v));
                if (pu < 0 || pv < 0 || pu >= k.width || pv >= k.height) continue;
                const std::size_t pix = depth.index(pu, pv);
                const double d = depth[pix];
                if (!(std::isfinite(d) && d > 0.0)) continue;
                f(vol.index(i, j, kk), d - x.z(), pix);
            }
        }
}

}  // namespace detail

// Voxels in the camera frustum whose signed distance to `depth` lies within the truncation band,
// with their normalised value. Weights are taken from `confidence` when given, else 1.
inline LocalUpdate local_extract(const TSDFVolume& vol, const CameraIntrinsics& k, const PoseSE3& pose,
                                 const DepthMap& depth, const Grid<double>* confidence = nullptr,
                                 double min_weight = 0.05) {
    LocalUpdate out;
    const double mu = vol.truncation();
    detail::visit_frustum(vol, depth, k, pose, [&](std::size_t idx, double sdf, std::size_t pix) {
        if (std::abs(sdf) > mu) return;
        const double w = confidence ? std::max((*confidence)[pix], min_weight) : 1.0;
        out.entries.push_back({idx, std::clamp(sdf / mu, -1.0, 1.0), w});
    });
    return out;
}

inline void apply_update(TSDFVolume& vol, const LocalUpdate& upd) {
    for (const auto& e : upd.entries) vol.update(e.voxel, e.v, e.w);
}

// Fuses one depth map (camera -> reference pose). Every voxel in front of the surface or within
// mu behind it is updated with v = clamp(sdf / mu) and w = max(confidence at the pixel, min_weight).
inline void integrate(TSDFVolume& vol, const DepthMap& depth, const Grid<double>& confidence,
                      const CameraIntrinsics& k, const PoseSE3& pose, double min_weight = 0.05) {
    if (!confidence.same_shape(depth)) throw InputError("integrate: confidence does not match depth");
    const double mu = vol.truncation();
    detail::visit_frustum(vol, depth, k, pose, [&](std::size_t idx, double sdf, std::size_t pix) {
        if (sdf <= -mu) return;
        vol.update(idx, std::clamp(sdf / mu, -1.0, 1.0), std::max(confidence[pix], min_weight));
    });
}

// ---------------------------------------------------------------------------
// Marching cubes

namespace detail {

inline constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                      {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
inline constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace detail

// Surface V = 0 with edge-linear vertices welded across cells; only cubes whose eight
// corners are all observed emit triangles. Faces are wound counter-clockwise seen from V > 0.
inline TriangleMesh extract_mesh(const TSDFVolume& vol) {
    TriangleMesh mesh;
    const int n = vol.resolution();
    const auto& val = vol.values();
    const auto& wt = vol.weights();
    std::unordered_map<std::uint64_t, std::uint32_t> welded;
    auto vertex_on_edge = [&](int i, int j, int k, int e) -> std::uint32_t {
        const int* a = detail::kCorner[detail::kEdge[e][0]];
        const int* b = detail::kCorner[detail::kEdge[e][1]];
        int lo[3] = {i + std::min(a[0], b[0]), j + std::min(a[1], b[1]), k + std::min(a[2], b[2])};
        const int axis = a[0] != b[0] ? 0 : (a[1] != b[1] ? 1 : 2);
        const std::uint64_t key = std::uint64_t(vol.index(lo[0], lo[1], lo[2])) * 3 + axis;
        const auto [it, inserted] = welded.try_emplace(key, std::uint32_t(mesh.vertices.size()));
        if (inserted) {
            int hi[3] = {lo[0], lo[1], lo[2]};
            hi[axis] += 1;
            const double v0 = val[vol.index(lo[0], lo[1], lo[2])], v1 = val[vol.index(hi[0], hi[1], hi[2])];
            const double t = v0 / (v0 - v1);
            const Vec3 p0 = vol.position(lo[0], lo[1], lo[2]), p1 = vol.position(hi[0], hi[1], hi[2]);
            mesh.vertices.push_back(p0 + t * (p1 - p0));
        }
        return it->second;
    };
    for (int k = 0; k + 1 < n; ++k)
        for (int j = 0; j + 1 < n; ++j)
            for (int i = 0; i + 1 < n; ++i) {
                int cube = 0;
                bool observed = true;
                for (int c = 0; c < 8 && observed; ++c) {
                    const std::size_t idx =
                        vol.index(i + detail::kCorner[c][0], j + detail::kCorner[c][1], k + detail::kCorner[c][2]);
                    observed = wt[idx] > 0.0;
                    if (val[idx] < 0.0) cube |= 1 << c;
                }
                if (!observed || cube == 0 || cube == 255) continue;
                const int* tri = detail::kTriTable[cube];
                for (int t = 0; tri[t] != -1; t += 3) {
                    const std::uint32_t a = vertex_on_edge(i, j, k, tri[t]);
                    const std::uint32_t b = vertex_on_edge(i, j, k, tri[t + 1]);
                    const std::uint32_t c = vertex_on_edge(i, j, k, tri[t + 2]);
                    mesh.triangles.push_back({a, c, b});
                }
            }
    mesh.vertex_normals.assign(mesh.vertices.size(), Vec3::Zero());
    for (const auto& t : mesh.triangles) {
        const Vec3 fn = (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
        for (auto v : t) mesh.vertex_normals[v] += fn;
    }
    for (auto& nrm : mesh.vertex_normals) {
        const double len = nrm.norm();
        nrm = len > 0.0 ? Vec3(nrm / len) : Vec3(0.0, 0.0, 1.0);
    }
    return mesh;
}

// Zero-crossing points of the volume (the marching-cubes vertices) with unit normals along grad V.
inline PointCloud model_cloud(const TSDFVolume& vol) {
    const TriangleMesh mesh = extract_mesh(vol);
    PointCloud cloud;
    for (const auto& p : mesh.vertices) {
        const auto g = vol.sample_gradient(p);
        if (!g || !(g->norm() > 0.0)) continue;
        cloud.points.push_back(p);
        cloud.normals.push_back(g->normalized());
    }
    return cloud;
}

// Depth of the first observed + to - crossing along each pixel ray, NaN where none is found.
// Rays march in half-voxel steps and the crossing is refined by linear interpolation.
inline DepthMap raycast_depth(const TSDFVolume& vol, const CameraIntrinsics& k, const PoseSE3& pose,
                              double near = 0.0, double far = std::numeric_limits<double>::infinity(),
                              int stride = 1) {
    k.validate();
    DepthMap out(k.width, k.height, DepthRole::prior);
    const double step = 0.5 * vol.voxel_size();
    const double n = vol.resolution();
    const Vec3 lo = vol.origin(), hi = vol.origin() + Vec3::Constant((n - 1) * vol.voxel_size());
    const Vec3 cam = pose.translation();
    for (int v = 0; v < k.height; v += stride)
        for (int u = 0; u < k.width; u += stride) {
            const Vec3 r = k.ray(u, v);  // unit z
            const Vec3 dir = pose.rotate(r);
            double t0 = near, t1 = far;  // parametrised by camera z
            for (int a = 0; a < 3; ++a) {
                if (std::abs(dir[a]) < 1e-15) {
                    if (cam[a] < lo[a] || cam[a] > hi[a]) t1 = -1.0;
                    continue;
                }
                double ta = (lo[a] - cam[a]) / dir[a], tb = (hi[a] - cam[a]) / dir[a];
                if (ta > tb) std::swap(ta, tb);
                t0 = std::max(t0, ta);
                t1 = std::min(t1, tb);
            }
            if (!(t1 > t0)) continue;
            const double dt = step / r.norm();
            std::optional<double> prev;
            double tprev = t0;
            for (double t = t0; t <= t1; t += dt) {
                const auto f = vol.sample(cam + t * dir);
                if (f && prev && *prev > 0.0 && *f <= 0.0) {
                    out(u, v) = tprev + (t - tprev) * (*prev / (*prev - *f));
                    break;
                }
                if (f && prev && *prev < 0.0 && *f >= 0.0) break;  // back face
                prev = f;
                tprev = t;
            }
        }
    return out;
}

// Surface points (reference frame) with unit normals from the raycast depth of one camera.
inline PointCloud raycast_cloud(const TSDFVolume& vol, const CameraIntrinsics& k, const PoseSE3& pose,
                                int stride = 1) {
    const DepthMap d = raycast_depth(vol, k, pose, 0.0, std::numeric_limits<double>::infinity(), stride);
    PointCloud cloud;
    for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u) {
            if (!d.valid(u, v)) continue;
            const Vec3 p = pose * k.unproject(u, v, d(u, v));
            const auto g = vol.sample_gradient(p);
            if (!g || !(g->norm() > 0.0)) continue;
            cloud.points.push_back(p);
            cloud.normals.push_back(g->normalized());
        }
    return cloud;
}

// ---------------------------------------------------------------------------
// Debug dump: 5 ASCII header lines, then little-endian float32 V followed by W,
// x fastest, then y, then z.

namespace io {

inline void write_tsdf_dump(const std::string& path, const TSDFVolume& vol) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(17);
    os << "MVPS_TSDF 1\n";
    os << "resolution " << vol.resolution() << "\n";
    os << "voxel_size " << vol.voxel_size() << "\n";
    os << "origin " << vol.origin().x() << " " << vol.origin().y() << " " << vol.origin().z() << "\n";
    os << "truncation " << vol.truncation() << "\n";
    std::vector<float> buf(vol.voxel_count());
    for (const auto* src : {&vol.values(), &vol.weights()}) {
        std::transform(src->begin(), src->end(), buf.begin(), [](double x) { return float(x); });
        os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    }
    if (!os) throw IoError(path, "write failed");
}

inline TSDFVolume read_tsdf_dump(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(path, "cannot open for reading");
    std::string line, key;
    std::vector<std::string> header(5);
    for (std::size_t i = 0; i < 5; ++i)
        if (!std::getline(is, header[i])) throw ParseError(path, i + 1, "truncated header");
    if (header[0] != "MVPS_TSDF 1") throw ParseError(path, 1, "bad magic");
    auto fields = [&](std::size_t i, const std::string& name, int count) {
        std::istringstream ls(header[i]);
        std::vector<double> v(count);
        if (!(ls >> key) || key != name) throw ParseError(path, i + 1, "expected '" + name + "'");
        for (auto& x : v)
            if (!(ls >> x)) throw ParseError(path, i + 1, "bad value for '" + name + "'");
        return v;
    };
    const int n = int(fields(1, "resolution", 1)[0]);
    const double voxel = fields(2, "voxel_size", 1)[0];
    const auto o = fields(3, "origin", 3);
    const double mu = fields(4, "truncation", 1)[0];
    TSDFVolume vol(n, voxel, Vec3(o[0], o[1], o[2]), mu / voxel);
    std::vector<float> buf(vol.voxel_count());
    for (auto* dst : {&vol.values(), &vol.weights()}) {
        if (!is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float))))
            throw IoError(path, "truncated voxel data");
        std::transform(buf.begin(), buf.end(), dst->begin(), [](float x) { return double(x); });
    }
    return vol;
}

}  // namespace io

}  // namespace mvps
