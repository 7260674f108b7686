#pragma once

// Synthetic stand-in for the robot and its LED ring: trajectories, a
// ray-casting renderer for photometric-stereo image stacks, and the
// perturbations used by the ablations.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <numbers>
#include <optional>
#include <variant>
#include <vector>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"
#include "mvps/random.hpp"

namespace mvps {

// ---------------------------------------------------------------------------
// Lights

struct LightRig {
    std::vector<Vec3> directions;    // unit, camera frame, pointing from surface toward the light
    std::vector<double> intensities;  // e_k > 0
    std::vector<int> active;          // sorted LED indices that fire

    std::size_t size() const { return directions.size(); }

    // LEDs on a ring around the lens, tilted `tilt_deg` off the optical axis.
    static LightRig ring(int count = 8, double tilt_deg = 30.0, double intensity = 1.0) {
        LightRig rig;
        const double t = deg2rad(tilt_deg);
        for (int k = 0; k < count; ++k) {
            const double phi = 2.0 * std::numbers::pi * k / count;
            rig.directions.emplace_back(std::sin(t) * std::cos(phi), std::sin(t) * std::sin(phi), -std::cos(t));
            rig.intensities.push_back(intensity);
            rig.active.push_back(k);
        }
        return rig;
    }

    void validate() const {
        if (directions.size() != intensities.size()) throw InputError("LightRig: directions/intensities mismatch");
        for (const auto& d : directions)
            if (std::abs(d.norm() - 1.0) > 1e-9) throw InputError("LightRig: direction is not unit length");
        for (double e : intensities)
            if (!(e > 0.0)) throw InputError("LightRig: intensities must be positive");
        if (active.size() < 3 || active.size() > 8) throw InputError("LightRig: active LED count must be in [3, 8]");
        for (std::size_t i = 0; i < active.size(); ++i) {
            if (active[i] < 0 || active[i] >= int(directions.size())) throw InputError("LightRig: bad active index");
            if (i > 0 && active[i] <= active[i - 1]) throw InputError("LightRig: active indices must be increasing");
        }
    }

    bool operator==(const LightRig&) const = default;
};

struct DirectionalLight {
    Vec3 direction;  // camera frame, unit
    double intensity = 1.0;
};

// Picks `count` LEDs maximising (minimum pairwise angle, then total pairwise angle).
inline std::vector<int> select_spread_leds(const LightRig& rig, int count) {
    const int n = int(rig.size());
    if (count < 1 || count > n) throw InputError("select_spread_leds: count out of range");
    std::vector<int> best;
    double best_min = -1.0, best_sum = -1.0;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        if (std::popcount(mask) != count) continue;
        std::vector<int> pick;
        for (int i = 0; i < n; ++i)
            if (mask & (1u << i)) pick.push_back(i);
        double mn = std::numbers::pi, sum = 0.0;
        for (std::size_t a = 0; a < pick.size(); ++a)
            for (std::size_t b = a + 1; b < pick.size(); ++b) {
                const double ang =
                    std::acos(std::clamp(rig.directions[pick[a]].dot(rig.directions[pick[b]]), -1.0, 1.0));
                mn = std::min(mn, ang);
                sum += ang;
            }
        const bool better = mn > best_min + 1e-12 || (std::abs(mn - best_min) <= 1e-12 && sum > best_sum + 1e-12);
        if (better) {
            best = pick;
            best_min = mn;
            best_sum = sum;
        }
    }
    return best;
}

// Each direction is tilted by an angle in [0, dir_noise_deg] about a random axis
// orthogonal to it; intensities scale by a factor in [1 - r, 1 + r].
inline LightRig perturb_lights(const LightRig& rig, double dir_noise_deg, double intensity_noise_rel,
                               std::uint64_t seed) {
    if (dir_noise_deg < 0.0 || intensity_noise_rel < 0.0 || intensity_noise_rel >= 1.0)
        throw InputError("perturb_lights: noise parameters out of range");
    Rng rng(splitmix64(seed));
    LightRig out = rig;
    for (std::size_t k = 0; k < rig.size(); ++k) {
        const Vec3& d = rig.directions[k];
        Vec3 axis(gaussian(rng), gaussian(rng), gaussian(rng));
        axis -= axis.dot(d) * d;
        if (axis.norm() < 1e-12) axis = d.unitOrthogonal();
        axis.normalize();
        const double angle = deg2rad(dir_noise_deg) * uniform01(rng);
        const double scale = 1.0 + intensity_noise_rel * (2.0 * uniform01(rng) - 1.0);
        if (dir_noise_deg > 0.0) out.directions[k] = (Eigen::AngleAxisd(angle, axis) * d).normalized();
        if (intensity_noise_rel > 0.0) out.intensities[k] = rig.intensities[k] * scale;
    }
    return out;
}

// Extra directional lights for the uncontrolled-illumination ablation. Directions
// are fixed in the camera frame, 25-65 degrees off the optical axis, camera side.
inline std::vector<DirectionalLight> make_external_lights(int count, double intensity, std::uint64_t seed) {
    if (count < 0) throw InputError("make_external_lights: negative count");
    Rng rng(splitmix64(seed ^ 0xe7u));
    std::vector<DirectionalLight> out;
    for (int i = 0; i < count; ++i) {
        const double tilt = deg2rad(uniform(rng, 25.0, 65.0));
        // Spread azimuths so successive lights do not pile onto the same patch.
        const double phi = 2.0 * std::numbers::pi * (i / 3.0 + uniform(rng, 0.0, 0.15));
        out.push_back({Vec3(std::sin(tilt) * std::cos(phi), std::sin(tilt) * std::sin(phi), -std::cos(tilt)),
                       intensity});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Objects

struct SphereShape {
    Vec3 center = Vec3::Zero();
    double radius = 20.0;
};

struct RayHit {
    double t = 0.0;  // along the unit ray direction
    Vec3 point;
    Vec3 normal;  // outward unit normal
    double albedo = 1.0;
};

// Triangle mesh with a bounding-volume hierarchy for ray casting.
class MeshShape {
public:
    MeshShape() = default;
    explicit MeshShape(TriangleMesh mesh, std::vector<double> vertex_albedo = {})
        : mesh_(std::move(mesh)), vertex_albedo_(std::move(vertex_albedo)) {
        mesh_.validate();
        if (!vertex_albedo_.empty() && vertex_albedo_.size() != mesh_.vertices.size())
            throw InputError("MeshShape: per-vertex albedo length mismatch");
        build();
    }

    const TriangleMesh& mesh() const { return mesh_; }
    const std::vector<double>& vertex_albedo() const { return vertex_albedo_; }

    std::optional<RayHit> intersect(const Vec3& o, const Vec3& d, double base_albedo) const {
        if (nodes_.empty()) return std::nullopt;
        double best_t = std::numeric_limits<double>::infinity();
        std::uint32_t best_tri = 0;
        double best_b1 = 0, best_b2 = 0;
        const Vec3 inv(1.0 / d.x(), 1.0 / d.y(), 1.0 / d.z());
        std::array<std::uint32_t, 64> stack;
        std::size_t top = 0;
        stack[top++] = 0;
        while (top > 0) {
            const Node& n = nodes_[stack[--top]];
            if (!slab(n, o, inv, best_t)) continue;
            if (n.count > 0) {
                for (std::uint32_t i = n.first; i < n.first + n.count; ++i) {
                    const auto& tri = mesh_.triangles[order_[i]];
                    double t, b1, b2;
                    if (moller_trumbore(o, d, mesh_.vertices[tri[0]], mesh_.vertices[tri[1]], mesh_.vertices[tri[2]],
                                        t, b1, b2) &&
                        t < best_t) {
                        best_t = t;
                        best_tri = order_[i];
                        best_b1 = b1;
                        best_b2 = b2;
                    }
                }
            } else {
                // Near child on top of the stack.
                const bool left_first = d[n.axis] >= 0.0;
                stack[top++] = left_first ? n.right : n.left;
                stack[top++] = left_first ? n.left : n.right;
            }
        }
        if (!std::isfinite(best_t)) return std::nullopt;
        const auto& tri = mesh_.triangles[best_tri];
        const Vec3 &a = mesh_.vertices[tri[0]], &b = mesh_.vertices[tri[1]], &c = mesh_.vertices[tri[2]];
        RayHit h;
        h.t = best_t;
        h.point = o + best_t * d;
        const double b0 = 1.0 - best_b1 - best_b2;
        if (!mesh_.vertex_normals.empty()) {
            h.normal = (b0 * mesh_.vertex_normals[tri[0]] + best_b1 * mesh_.vertex_normals[tri[1]] +
                        best_b2 * mesh_.vertex_normals[tri[2]])
                           .normalized();
        } else {
            h.normal = (b - a).cross(c - a).normalized();
        }
        if (h.normal.dot(d) > 0.0) h.normal = -h.normal;
        h.albedo = vertex_albedo_.empty() ? base_albedo
                                          : b0 * vertex_albedo_[tri[0]] + best_b1 * vertex_albedo_[tri[1]] +
                                                best_b2 * vertex_albedo_[tri[2]];
        return h;
    }

    AxisBox bounds() const { return bounding_box(mesh_.vertices); }

private:
    struct Node {
        Vec3 lo, hi;
        std::uint32_t left = 0, right = 0;  // children (internal)
        std::uint32_t first = 0, count = 0;  // leaf range in order_
        int axis = 0;                        // split axis (internal)
    };

    static bool slab(const Node& n, const Vec3& o, const Vec3& inv, double tmax) {
        double t0 = 0.0, t1 = tmax;
        for (int a = 0; a < 3; ++a) {
            double ta = (n.lo[a] - o[a]) * inv[a], tb = (n.hi[a] - o[a]) * inv[a];
            if (ta > tb) std::swap(ta, tb);
            t0 = std::max(t0, ta);
            t1 = std::min(t1, tb);
            if (t0 > t1) return false;
        }
        return true;
    }

    static bool moller_trumbore(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c, double& t,
                                double& u, double& v) {
        const Vec3 e1 = b - a, e2 = c - a;
        const Vec3 p = d.cross(e2);
        const double det = e1.dot(p);
        if (std::abs(det) < 1e-14) return false;
        const double inv = 1.0 / det;
        const Vec3 s = o - a;
        u = s.dot(p) * inv;
        if (u < 0.0 || u > 1.0) return false;
        const Vec3 q = s.cross(e1);
        v = d.dot(q) * inv;
        if (v < 0.0 || u + v > 1.0) return false;
        t = e2.dot(q) * inv;
        return t > 1e-9;
    }

    void build() {
        const auto n = static_cast<std::uint32_t>(mesh_.triangles.size());
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), 0u);
        centroids_.resize(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            const auto& t = mesh_.triangles[i];
            centroids_[i] = (mesh_.vertices[t[0]] + mesh_.vertices[t[1]] + mesh_.vertices[t[2]]) / 3.0;
        }
        nodes_.clear();
        if (n > 0) build_node(0, n);
    }

    std::uint32_t build_node(std::uint32_t first, std::uint32_t last) {
        const auto id = static_cast<std::uint32_t>(nodes_.size());
        nodes_.push_back({});
        AxisBox box, cbox;
        for (auto i = first; i < last; ++i) {
            for (auto vi : mesh_.triangles[order_[i]]) box.extend(mesh_.vertices[vi]);
            cbox.extend(centroids_[order_[i]]);
        }
        nodes_[id].lo = box.min;
        nodes_[id].hi = box.max;
        if (last - first <= 4) {
            nodes_[id].first = first;
            nodes_[id].count = last - first;
            return id;
        }
        int axis = 0;
        cbox.extent().maxCoeff(&axis);
        const auto mid = first + (last - first) / 2;
        std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + last,
                         [&](std::uint32_t a, std::uint32_t b) {
                             return centroids_[a][axis] < centroids_[b][axis] ||
                                    (centroids_[a][axis] == centroids_[b][axis] && a < b);
                         });
        const auto l = build_node(first, mid);
        const auto r = build_node(mid, last);
        nodes_[id].left = l;
        nodes_[id].right = r;
        nodes_[id].axis = axis;
        return id;
    }

    TriangleMesh mesh_;
    std::vector<double> vertex_albedo_;
    std::vector<std::uint32_t> order_;
    std::vector<Vec3> centroids_;
    std::vector<Node> nodes_;
};

struct SceneObject {
    std::variant<SphereShape, std::shared_ptr<const MeshShape>> shape = SphereShape{};
    double albedo = 0.8;
    double specular_exponent = 32.0;
    double specular_strength = 0.0;  // 0 disables the Blinn-Phong lobe

    static SceneObject sphere(const Vec3& center, double radius, double albedo = 0.8) {
        SceneObject o;
        o.shape = SphereShape{center, radius};
        o.albedo = albedo;
        return o;
    }

    static SceneObject mesh(TriangleMesh m, double albedo = 0.8, std::vector<double> vertex_albedo = {}) {
        SceneObject o;
        o.shape = std::make_shared<const MeshShape>(std::move(m), std::move(vertex_albedo));
        o.albedo = albedo;
        return o;
    }

    void validate() const {
        if (!(albedo >= 0.0 && albedo <= 1.0)) throw InputError("SceneObject: albedo must be in [0, 1]");
        if (specular_strength < 0.0) throw InputError("SceneObject: specular strength must be >= 0");
        if (const auto* s = std::get_if<SphereShape>(&shape); s && !(s->radius > 0.0))
            throw InputError("SceneObject: sphere radius must be positive");
    }

    bool is_sphere() const { return std::holds_alternative<SphereShape>(shape); }

    AxisBox bounds() const {
        if (const auto* s = std::get_if<SphereShape>(&shape)) {
            AxisBox b;
            b.extend(s->center - Vec3::Constant(s->radius));
            b.extend(s->center + Vec3::Constant(s->radius));
            return b;
        }
        return std::get<1>(shape)->bounds();
    }

    Vec3 center() const { return bounds().center(); }
    double diameter() const {
        if (const auto* s = std::get_if<SphereShape>(&shape)) return 2.0 * s->radius;
        return bounds().diagonal();
    }

    // First intersection along the unit direction `d`, world frame.
    std::optional<RayHit> intersect(const Vec3& o, const Vec3& d) const {
        if (const auto* s = std::get_if<SphereShape>(&shape)) {
            const Vec3 oc = o - s->center;
            const double b = oc.dot(d);
            const double c = oc.squaredNorm() - s->radius * s->radius;
            const double disc = b * b - c;
            if (disc < 0.0) return std::nullopt;
            const double sq = std::sqrt(disc);
            double t = -b - sq;
            if (t <= 1e-9) t = -b + sq;
            if (t <= 1e-9) return std::nullopt;
            RayHit h;
            h.t = t;
            h.point = o + t * d;
            h.normal = (h.point - s->center) / s->radius;
            h.albedo = albedo;
            return h;
        }
        return std::get<1>(shape)->intersect(o, d, albedo);
    }
};

// Geodesic sphere: a subdivided icosahedron projected onto the sphere, faces wound outward.
inline TriangleMesh icosphere(const Vec3& center, double radius, int subdivisions) {
    if (!(radius > 0.0) || subdivisions < 0) throw InputError("icosphere: bad radius or subdivision level");
    const double p = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> v = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0}, {0, -1, p}, {0, 1, p},
                           {0, -1, -p}, {0, 1, -p}, {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
    for (auto& x : v) x.normalize();
    std::vector<TriangleMesh::Triangle> f = {{0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
                                             {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                             {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
                                             {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
    for (int level = 0; level < subdivisions; ++level) {
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
        auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
            const auto key = std::minmax(a, b);
            const auto [it, inserted] = mid.try_emplace(key, std::uint32_t(v.size()));
            if (inserted) v.push_back((v[a] + v[b]).normalized());
            return it->second;
        };
        std::vector<TriangleMesh::Triangle> next;
        next.reserve(4 * f.size());
        for (const auto& t : f) {
            const auto ab = midpoint(t[0], t[1]), bc = midpoint(t[1], t[2]), ca = midpoint(t[2], t[0]);
            next.push_back({t[0], ab, ca});
            next.push_back({t[1], bc, ab});
            next.push_back({t[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        f = std::move(next);
    }
    TriangleMesh m;
    m.vertex_normals = v;
    for (auto& x : v) x = center + radius * x;
    m.vertices = std::move(v);
    m.triangles = std::move(f);
    return m;
}

// ---------------------------------------------------------------------------
// Trajectories

enum class TrajectoryKind { smooth_circle, square, zigzag };

struct Trajectory {
    TrajectoryKind kind = TrajectoryKind::smooth_circle;
    int stop_count = 36;
    double angular_step_deg = 10.0;
    double standoff = 100.0;
    double elevation_deg = 0.0;
    double zigzag_amplitude = 0.1;  // near/far = standoff * (1 -/+ amplitude)

    void validate() const {
        if (stop_count < 2) throw InputError("Trajectory: stop_count must be >= 2");
        if (!(standoff > 0.0)) throw InputError("Trajectory: standoff must be positive");
        if (!(angular_step_deg > 0.0)) throw InputError("Trajectory: angular step must be positive");
        if (kind == TrajectoryKind::smooth_circle && angular_step_deg * stop_count > 360.0 + 1e-9)
            throw InputError("Trajectory: smooth circle exceeds 360 degrees");
        if (kind == TrajectoryKind::zigzag && !(zigzag_amplitude > 0.0 && zigzag_amplitude < 1.0))
            throw InputError("Trajectory: zigzag amplitude must be in (0, 1)");
    }

    // The last stop is one angular step short of the first one.
    bool closes_loop() const { return std::abs(angular_step_deg * stop_count - 360.0) < 1e-9; }
};

inline const char* to_string(TrajectoryKind k) {
    switch (k) {
        case TrajectoryKind::smooth_circle: return "smooth";
        case TrajectoryKind::square: return "square";
        case TrajectoryKind::zigzag: return "zigzag";
    }
    return "?";
}

inline TrajectoryKind parse_trajectory_kind(const std::string& s) {
    if (s == "smooth" || s == "smooth-circle" || s == "circle") return TrajectoryKind::smooth_circle;
    if (s == "square") return TrajectoryKind::square;
    if (s == "zigzag") return TrajectoryKind::zigzag;
    throw InputError("unknown trajectory kind '" + s + "'");
}

// Camera-to-world pose at `position` looking at `target`; image v axis follows world +y.
inline PoseSE3 look_at(const Vec3& position, const Vec3& target) {
    const Vec3 z = (target - position).normalized();
    Vec3 down(0.0, 1.0, 0.0);
    if (std::abs(z.dot(down)) > 0.999) down = Vec3(0.0, 0.0, 1.0);
    const Vec3 y = (down - down.dot(z) * z).normalized();
    const Vec3 x = y.cross(z);
    Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    return PoseSE3::orthonormalized(r, position);
}

inline double trajectory_distance(const Trajectory& spec, int i) {
    const double bearing = deg2rad(spec.angular_step_deg * i);
    switch (spec.kind) {
        case TrajectoryKind::smooth_circle: return spec.standoff;
        case TrajectoryKind::square:
            return spec.standoff / std::max(std::abs(std::cos(bearing)), std::abs(std::sin(bearing)));
        case TrajectoryKind::zigzag: return spec.standoff * (i % 2 == 0 ? 1.0 - spec.zigzag_amplitude
                                                                          : 1.0 + spec.zigzag_amplitude);
    }
    return spec.standoff;
}

// Camera-to-world poses, one per stop, each facing `object_center`.
inline std::vector<PoseSE3> generate_trajectory(const Trajectory& spec, const Vec3& object_center) {
    spec.validate();
    std::vector<PoseSE3> poses;
    const double el = deg2rad(spec.elevation_deg);
    for (int i = 0; i < spec.stop_count; ++i) {
        const double bearing = deg2rad(spec.angular_step_deg * i);
        const double d = trajectory_distance(spec, i);
        const Vec3 offset(d * std::sin(bearing) * std::cos(el), -d * std::sin(el), -d * std::cos(bearing) * std::cos(el));
        poses.push_back(look_at(object_center + offset, object_center));
    }
    return poses;
}

// ---------------------------------------------------------------------------
// Rendering

struct PSImageStack {
    std::vector<Image> images;  // one per entry of light_ids
    std::vector<int> light_ids;  // LED index of each image
    BitMask mask;
    int view_index = 0;
    LightRig rig;
    std::optional<DepthMap> gt_depth;
    std::optional<NormalField> gt_normals;

    int width() const { return mask.width(); }
    int height() const { return mask.height(); }

    void validate() const {
        if (images.empty()) throw InputError("PSImageStack: no images");
        if (images.size() != light_ids.size()) throw InputError("PSImageStack: images/light_ids mismatch");
        for (const auto& img : images) {
            if (!img.same_shape(mask)) throw InputError("PSImageStack: image dimensions differ");
            for (float v : img.data())
                if (!(v >= 0.0f)) throw InputError("PSImageStack: negative or NaN pixel");
        }
        if (count_set(mask) == 0) throw InputError("PSImageStack: empty mask");
    }
};

struct RenderOptions {
    std::vector<DirectionalLight> external_lights;
    double noise_sigma = 0.0;  // additive Gaussian, inside the mask
    std::uint64_t seed = 0;
};

inline PSImageStack render_view(const SceneObject& object, const PoseSE3& pose, const LightRig& rig,
                                const CameraIntrinsics& k, const RenderOptions& opts = {}) {
    object.validate();
    rig.validate();
    k.validate();
    const PoseSE3 world_to_cam = pose.inverse();
    if ((world_to_cam * object.center()).z() <= 0.0) throw RenderError("render_view: object is behind the camera");

    PSImageStack s;
    s.mask = BitMask(k.width, k.height, 0);
    s.rig = rig;
    s.light_ids = rig.active;
    s.images.assign(rig.active.size(), Image(k.width, k.height, 0.0f));
    DepthMap depth(k.width, k.height, DepthRole::ground_truth);
    NormalField normals(k.width, k.height, Vec3::Zero());
    Rng rng(splitmix64(opts.seed));

    const Mat3& r = pose.rotation();
    for (int v = 0; v < k.height; ++v) {
        for (int u = 0; u < k.width; ++u) {
            const Vec3 ray_cam = k.ray(u, v);
            const Vec3 dir = (r * ray_cam).normalized();
            const auto hit = object.intersect(pose.translation(), dir);
            if (!hit) continue;
            const Vec3 p_cam = world_to_cam * hit->point;
            const Vec3 n_cam = r.transpose() * hit->normal;
            s.mask(u, v) = 1;
            depth(u, v) = p_cam.z();
            normals(u, v) = n_cam;
            const Vec3 view = -p_cam.normalized();
            double ext = 0.0;
            for (const auto& l : opts.external_lights) ext += l.intensity * hit->albedo * std::max(0.0, n_cam.dot(l.direction));
            for (std::size_t i = 0; i < rig.active.size(); ++i) {
                const int led = rig.active[i];
                const Vec3& l = rig.directions[led];
                const double e = rig.intensities[led];
                const double ndl = n_cam.dot(l);
                double val = e * hit->albedo * std::max(0.0, ndl) + ext;
                if (object.specular_strength > 0.0 && ndl > 0.0) {
                    const Vec3 h = (l + view).normalized();
                    val += e * object.specular_strength * std::pow(std::max(0.0, n_cam.dot(h)), object.specular_exponent);
                }
                if (opts.noise_sigma > 0.0) val += opts.noise_sigma * gaussian(rng);
                s.images[i](u, v) = static_cast<float>(std::max(0.0, val));
            }
        }
    }
    if (count_set(s.mask) == 0) throw RenderError("render_view: object is outside the camera frustum");
    s.gt_depth = std::move(depth);
    s.gt_normals = std::move(normals);
    return s;
}

// Per-pixel median over the stack; even counts average the two middle values.
inline Image median_image(const PSImageStack& stack) {
    if (stack.images.empty()) throw InputError("median_image: empty stack");
    const auto& first = stack.images.front();
    Image out(first.width(), first.height(), 0.0f);
    std::vector<float> vals(stack.images.size());
    const std::size_t n = vals.size();
    for (std::size_t i = 0; i < first.size(); ++i) {
        for (std::size_t k = 0; k < n; ++k) vals[k] = stack.images[k][i];
        std::sort(vals.begin(), vals.end());
        out[i] = n % 2 ? vals[n / 2] : static_cast<float>(0.5 * (double(vals[n / 2 - 1]) + double(vals[n / 2])));
    }
    return out;
}

// Multiplicative per-image noise inside a disk, simulating a locally unreliable
// photometric observation (dust, interreflection, sensor defect).
inline void corrupt_region(PSImageStack& stack, double center_u, double center_v, double radius_px, double noise_rel,
                           std::uint64_t seed) {
    Rng rng(splitmix64(seed ^ 0xc0ffeeull));
    for (auto& img : stack.images)
        for (int v = 0; v < img.height(); ++v)
            for (int u = 0; u < img.width(); ++u) {
                const double du = u - center_u, dv = v - center_v;
                if (du * du + dv * dv > radius_px * radius_px || !stack.mask(u, v)) continue;
                const double f = std::max(0.0, 1.0 + noise_rel * gaussian(rng));
                img(u, v) = static_cast<float>(img(u, v) * f);
            }
}

// True if the world point with outward normal `n` is seen unoccluded and inside the image.
inline bool point_visible(const SceneObject& object, const Vec3& p, const Vec3& n, const PoseSE3& pose,
                          const CameraIntrinsics& k) {
    const Vec3 to_cam = pose.translation() - p;
    if (n.dot(to_cam) <= 0.0) return false;
    const Vec3 pc = pose.inverse() * p;
    if (pc.z() <= 0.0) return false;
    const Vec2 px = k.project(pc);
    if (px.x() < -0.5 || px.y() < -0.5 || px.x() > k.width - 0.5 || px.y() > k.height - 0.5) return false;
    if (object.is_sphere()) return true;  // convex
    const double dist = to_cam.norm();
    const auto hit = object.intersect(pose.translation(), -to_cam / dist);
    return hit && std::abs(hit->t - dist) < 1e-6 * dist + 1e-9;
}

}  // namespace mvps
