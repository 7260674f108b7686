#pragma once

// Incremental reconstruction loop. For each stop, in order:
//   1. light rig (as given, or perturbed)      4. refine depth against the normals
//   2. normals + confidence from the stack     5. register to the fused model
//   3. median image, depth prior, alignment    6. integrate into the TSDF volume
// After the loop an optional pose-graph pass with a loop-closure edge corrects
// the trajectory and the volume is rebuilt from the cached refined depths.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mvps/config.hpp"
#include "mvps/dataset.hpp"
#include "mvps/depth_prior.hpp"
#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/io.hpp"
#include "mvps/metrics.hpp"
#include "mvps/photometric.hpp"
#include "mvps/random.hpp"
#include "mvps/refine.hpp"
#include "mvps/registration.hpp"
#include "mvps/scene_sim.hpp"
#include "mvps/tsdf.hpp"

namespace mvps {

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
    std::string dataset;  // dataset directory; empty renders the synthetic scene

    struct Scene {
        std::string shape = "sphere";  // sphere | mesh
        std::string mesh;              // PLY path when shape = mesh
        double radius = 20.0;
        double albedo = 0.8;
        double specular_strength = 0.0;
        double specular_exponent = 32.0;
    } scene;

    CameraIntrinsics camera;
    Trajectory trajectory;
    double jitter_deg = 0.0;  // ground-truth deviation from the commanded stops
    double jitter_rel = 0.0;  // translation jitter relative to the standoff

    struct Lights {
        int count = 8;
        double tilt_deg = 30.0;
        double intensity = 1.0;
        int active = 8;
        double perturb_deg = 0.0;
        double perturb_rel = 0.0;
        int external = 0;
        double external_intensity = 0.3;
    } lights;

    struct Render {
        double noise_sigma = 0.002;
        int corrupt_regions = 0;
        double corrupt_radius_px = 20.0;
        double corrupt_noise = 0.5;
    } render;

    struct Photometric {
        int ensemble = 16;
        int subset_size = 5;
        double sigma0 = 0.05;
        double shadow_threshold = 0.0;
    } photometric;

    struct Prior {
        double blur_sigma_px = 3.0;
        double scale = 1.0;
        double shift = 0.0;
        double noise_rel = 0.005;
        int noise_modes = 3;
        std::string align = "model";  // model | median | none
        int anchor_stride = 4;
        double anchor_min_cos = 0.5;
    } prior;

    struct Refine {
        std::string mode = "weighted";        // weighted | unweighted | prior_only
        std::string gradients = "perspective";  // perspective | orthographic
        double lambda_min = 0.05;
        double lambda_max = 0.95;
        double tol = 1e-8;
        int max_iter = 0;
        double eps = 0.3;
    } refine;

    struct Registration {
        int max_iter = 50;
        double trim = 0.3;
        int samples = 5000;
        std::string init = "motion";  // motion | velocity | identity
        int model_stride = 2;
    } registration;

    bool posegraph = true;
    double posegraph_min_eigen_ratio = 1e-3;  // loop closures weaker than this in any direction are dropped

    struct Tsdf {
        int resolution = 256;
        double truncation_voxels = 3.0;
        double margin = 0.1;
        double min_weight = 0.05;
    } tsdf;

    struct Eval {
        int samples = 100000;
        int chamfer_samples = 1000000;
        double max_incidence_deg = 80.0;
        double tau = 0.0;  // 0: 1% of the ground-truth bounding-box diagonal
    } eval;

    std::uint64_t seed = 1;
    std::string output = "out";

    void validate() const {
        auto bad = [](const std::string& what) { throw InputError("config: " + what); };
        if (dataset.empty() && scene.shape != "sphere" && scene.shape != "mesh") bad("scene.shape must be sphere or mesh");
        if (dataset.empty() && scene.shape == "mesh" && scene.mesh.empty()) bad("scene.mesh is required for shape = mesh");
        if (!(scene.radius > 0.0)) bad("scene.radius must be positive");
        camera.validate();
        trajectory.validate();
        if (jitter_deg < 0.0 || jitter_rel < 0.0) bad("trajectory jitter must be >= 0");
        if (lights.count < 3 || lights.count > 8) bad("lights.count must be in [3, 8]");
        if (lights.active < 3 || lights.active > lights.count) bad("lights.active must be in [3, lights.count]");
        if (lights.perturb_deg < 0.0 || lights.perturb_rel < 0.0 || lights.perturb_rel >= 1.0) bad("bad light perturbation");
        if (lights.external < 0 || lights.external_intensity < 0.0) bad("bad external lights");
        if (render.noise_sigma < 0.0 || render.corrupt_regions < 0 || render.corrupt_noise < 0.0) bad("bad render noise");
        if (photometric.ensemble < 2 || photometric.subset_size < 3) bad("bad ensemble settings");
        if (!(photometric.sigma0 > 0.0)) bad("photometric.sigma0 must be positive");
        if (prior.blur_sigma_px < 0.0 || !(prior.scale > 0.0) || prior.noise_rel < 0.0) bad("bad prior settings");
        if (prior.align != "model" && prior.align != "median" && prior.align != "none") bad("prior.align must be model, median or none");
        if (prior.anchor_stride < 1) bad("prior.anchor_stride must be >= 1");
        if (!(prior.anchor_min_cos >= 0.0 && prior.anchor_min_cos < 1.0)) bad("prior.anchor_min_cos must be in [0, 1)");
        if (refine.mode != "weighted" && refine.mode != "unweighted" && refine.mode != "prior_only")
            bad("refine.mode must be weighted, unweighted or prior_only");
        if (refine.gradients != "perspective" && refine.gradients != "orthographic")
            bad("refine.gradients must be perspective or orthographic");
        if (!(refine.lambda_min > 0.0 && refine.lambda_min <= refine.lambda_max && refine.lambda_max < 1.0))
            bad("refine.lambda_min/lambda_max must satisfy 0 < min <= max < 1");
        if (!(refine.tol > 0.0) || refine.max_iter < 0 || !(refine.eps >= 0.0)) bad("bad refine solver settings");
        if (registration.max_iter < 1 || !(registration.trim >= 0.0 && registration.trim < 1.0) ||
            registration.samples < 100 || registration.model_stride < 1)
            bad("bad registration settings");
        if (registration.init != "motion" && registration.init != "velocity" && registration.init != "identity")
            bad("registration.init must be motion, velocity or identity");
        if (!(posegraph_min_eigen_ratio >= 0.0 && posegraph_min_eigen_ratio < 1.0)) bad("posegraph.min_eigen_ratio must be in [0, 1)");
        if (tsdf.resolution < 8 || !(tsdf.truncation_voxels > 0.0) || tsdf.margin < 0.0 || tsdf.min_weight <= 0.0)
            bad("bad tsdf settings");
        if (eval.samples < 1 || eval.chamfer_samples < 1 || eval.tau < 0.0) bad("bad eval settings");
        if (!(eval.max_incidence_deg > 0.0 && eval.max_incidence_deg <= 90.0)) bad("eval.max_incidence_deg must be in (0, 90]");
    }
};

inline const std::vector<ConfigKey<PipelineConfig>>& pipeline_config_keys() {
    using C = PipelineConfig;
    static const std::vector<ConfigKey<C>> keys = {
        string_key<C>("input.dataset", "dataset directory; empty renders the synthetic scene",
                      [](auto& c) -> auto& { return c.dataset; }),
        string_key<C>("scene.shape", "sphere | mesh", [](auto& c) -> auto& { return c.scene.shape; }),
        string_key<C>("scene.mesh", "PLY file for shape = mesh", [](auto& c) -> auto& { return c.scene.mesh; }),
        double_key<C>("scene.radius", "sphere radius (scene units)", [](auto& c) -> auto& { return c.scene.radius; }),
        double_key<C>("scene.albedo", "diffuse albedo in [0, 1]", [](auto& c) -> auto& { return c.scene.albedo; }),
        double_key<C>("scene.specular_strength", "Blinn-Phong strength, 0 = Lambertian",
                      [](auto& c) -> auto& { return c.scene.specular_strength; }),
        double_key<C>("scene.specular_exponent", "Blinn-Phong exponent",
                      [](auto& c) -> auto& { return c.scene.specular_exponent; }),
        double_key<C>("camera.fx", "focal length (px)", [](auto& c) -> auto& { return c.camera.fx; }),
        double_key<C>("camera.fy", "focal length (px)", [](auto& c) -> auto& { return c.camera.fy; }),
        double_key<C>("camera.cx", "principal point (px)", [](auto& c) -> auto& { return c.camera.cx; }),
        double_key<C>("camera.cy", "principal point (px)", [](auto& c) -> auto& { return c.camera.cy; }),
        int_key<C>("camera.width", "image width (px)", [](auto& c) -> auto& { return c.camera.width; }),
        int_key<C>("camera.height", "image height (px)", [](auto& c) -> auto& { return c.camera.height; }),
        {"trajectory.kind", "smooth | square | zigzag",
         [](C& c, const std::string& v) { c.trajectory.kind = parse_trajectory_kind(v); },
         [](const C& c) { return std::string(to_string(c.trajectory.kind)); }},
        int_key<C>("trajectory.stops", "number of stops", [](auto& c) -> auto& { return c.trajectory.stop_count; }),
        double_key<C>("trajectory.step_deg", "bearing increment per stop",
                      [](auto& c) -> auto& { return c.trajectory.angular_step_deg; }),
        double_key<C>("trajectory.standoff", "camera distance to the object centre",
                      [](auto& c) -> auto& { return c.trajectory.standoff; }),
        double_key<C>("trajectory.elevation_deg", "camera elevation above the equator",
                      [](auto& c) -> auto& { return c.trajectory.elevation_deg; }),
        double_key<C>("trajectory.zigzag_amplitude", "relative near/far swing of the zigzag path",
                      [](auto& c) -> auto& { return c.trajectory.zigzag_amplitude; }),
        double_key<C>("trajectory.jitter_deg", "random rotation of the true stops (deg)",
                      [](auto& c) -> auto& { return c.jitter_deg; }),
        double_key<C>("trajectory.jitter_rel", "random translation of the true stops, relative to standoff",
                      [](auto& c) -> auto& { return c.jitter_rel; }),
        int_key<C>("lights.count", "LEDs on the ring", [](auto& c) -> auto& { return c.lights.count; }),
        double_key<C>("lights.tilt_deg", "LED angle off the optical axis", [](auto& c) -> auto& { return c.lights.tilt_deg; }),
        double_key<C>("lights.intensity", "LED intensity", [](auto& c) -> auto& { return c.lights.intensity; }),
        int_key<C>("lights.active", "LEDs fired per view (spread selection)", [](auto& c) -> auto& { return c.lights.active; }),
        double_key<C>("lights.perturb_deg", "direction error of the rig given to the solver (deg)",
                      [](auto& c) -> auto& { return c.lights.perturb_deg; }),
        double_key<C>("lights.perturb_rel", "relative intensity error of the rig given to the solver",
                      [](auto& c) -> auto& { return c.lights.perturb_rel; }),
        int_key<C>("lights.external", "uncontrolled directional lights", [](auto& c) -> auto& { return c.lights.external; }),
        double_key<C>("lights.external_intensity", "intensity of each uncontrolled light",
                      [](auto& c) -> auto& { return c.lights.external_intensity; }),
        double_key<C>("render.noise_sigma", "additive Gaussian image noise",
                      [](auto& c) -> auto& { return c.render.noise_sigma; }),
        int_key<C>("render.corrupt_regions", "corrupted disks per view", [](auto& c) -> auto& { return c.render.corrupt_regions; }),
        double_key<C>("render.corrupt_radius_px", "corrupted disk radius (px)",
                      [](auto& c) -> auto& { return c.render.corrupt_radius_px; }),
        double_key<C>("render.corrupt_noise", "relative multiplicative noise inside corrupted disks",
                      [](auto& c) -> auto& { return c.render.corrupt_noise; }),
        int_key<C>("photometric.ensemble", "LED subsets per view", [](auto& c) -> auto& { return c.photometric.ensemble; }),
        int_key<C>("photometric.subset_size", "LEDs per subset (capped at active - 1, floor 3)",
                   [](auto& c) -> auto& { return c.photometric.subset_size; }),
        double_key<C>("photometric.sigma0", "angular scale of the confidence (rad)",
                      [](auto& c) -> auto& { return c.photometric.sigma0; }),
        double_key<C>("photometric.shadow_threshold", "observations at or below are shadows",
                      [](auto& c) -> auto& { return c.photometric.shadow_threshold; }),
        double_key<C>("prior.blur_sigma_px", "Gaussian blur of the simulated prior (px)",
                      [](auto& c) -> auto& { return c.prior.blur_sigma_px; }),
        double_key<C>("prior.scale", "affine scale of the simulated prior", [](auto& c) -> auto& { return c.prior.scale; }),
        double_key<C>("prior.shift", "affine shift of the simulated prior", [](auto& c) -> auto& { return c.prior.shift; }),
        double_key<C>("prior.noise_rel", "smooth noise amplitude relative to the object size",
                      [](auto& c) -> auto& { return c.prior.noise_rel; }),
        int_key<C>("prior.noise_modes", "cosine modes of the smooth noise", [](auto& c) -> auto& { return c.prior.noise_modes; }),
        string_key<C>("prior.align", "model | median | none", [](auto& c) -> auto& { return c.prior.align; }),
        int_key<C>("prior.anchor_stride", "pixel stride of the model depth anchor",
                   [](auto& c) -> auto& { return c.prior.anchor_stride; }),
        double_key<C>("prior.anchor_min_cos", "anchor pixels need a normal within acos(value) of the view ray",
                      [](auto& c) -> auto& { return c.prior.anchor_min_cos; }),
        string_key<C>("refine.mode", "weighted | unweighted | prior_only", [](auto& c) -> auto& { return c.refine.mode; }),
        string_key<C>("refine.gradients", "perspective | orthographic", [](auto& c) -> auto& { return c.refine.gradients; }),
        double_key<C>("refine.lambda_min", "confidence clamp (lower)", [](auto& c) -> auto& { return c.refine.lambda_min; }),
        double_key<C>("refine.lambda_max", "confidence clamp (upper)", [](auto& c) -> auto& { return c.refine.lambda_max; }),
        double_key<C>("refine.tol", "relative residual tolerance", [](auto& c) -> auto& { return c.refine.tol; }),
        int_key<C>("refine.max_iter", "solver iterations, 0 = 10 sqrt(pixels)", [](auto& c) -> auto& { return c.refine.max_iter; }),
        double_key<C>("refine.eps", "grazing-normal cutoff", [](auto& c) -> auto& { return c.refine.eps; }),
        int_key<C>("registration.max_iter", "ICP iterations", [](auto& c) -> auto& { return c.registration.max_iter; }),
        double_key<C>("registration.trim", "fraction of worst residuals dropped",
                      [](auto& c) -> auto& { return c.registration.trim; }),
        int_key<C>("registration.samples", "live points used for ICP", [](auto& c) -> auto& { return c.registration.samples; }),
        string_key<C>("registration.init", "motion | velocity | identity", [](auto& c) -> auto& { return c.registration.init; }),
        int_key<C>("registration.model_stride", "pixel stride of the raycast model cloud",
                   [](auto& c) -> auto& { return c.registration.model_stride; }),
        bool_key<C>("posegraph.enabled", "loop-closure pose-graph pass", [](auto& c) -> auto& { return c.posegraph; }),
        double_key<C>("posegraph.min_eigen_ratio", "weakest/strongest ICP eigenvalue required to accept the loop closure",
                      [](auto& c) -> auto& { return c.posegraph_min_eigen_ratio; }),
        int_key<C>("tsdf.resolution", "voxels per axis", [](auto& c) -> auto& { return c.tsdf.resolution; }),
        double_key<C>("tsdf.truncation_voxels", "truncation band (voxels)",
                      [](auto& c) -> auto& { return c.tsdf.truncation_voxels; }),
        double_key<C>("tsdf.margin", "volume margin relative to the first-frame extent",
                      [](auto& c) -> auto& { return c.tsdf.margin; }),
        double_key<C>("tsdf.min_weight", "lower bound of the per-voxel weight", [](auto& c) -> auto& { return c.tsdf.min_weight; }),
        int_key<C>("eval.samples", "surface samples per mesh for the F-score", [](auto& c) -> auto& { return c.eval.samples; }),
        int_key<C>("eval.chamfer_samples", "surface samples per mesh for Chamfer-L1",
                   [](auto& c) -> auto& { return c.eval.chamfer_samples; }),
        double_key<C>("eval.max_incidence_deg", "ground truth counts where some camera sees it within this angle",
                      [](auto& c) -> auto& { return c.eval.max_incidence_deg; }),
        double_key<C>("eval.tau", "F-score threshold, 0 = 1% of the gt bbox diagonal", [](auto& c) -> auto& { return c.eval.tau; }),
        {"seed", "root random seed", [](C& c, const std::string& v) { c.seed = std::uint64_t(config_value::to_int(v)); },
         [](const C& c) { return std::to_string(c.seed); }},
        string_key<C>("output.dir", "output directory", [](auto& c) -> auto& { return c.output; }),
    };
    return keys;
}

inline PipelineConfig load_pipeline_config(const std::string& path, PipelineConfig base = {}) {
    apply_config(base, pipeline_config_keys(), parse_config_file(path), path);
    return base;
}

// ---------------------------------------------------------------------------
// Frame sources

class FrameSource {
public:
    virtual ~FrameSource() = default;
    virtual int frame_count() const = 0;
    virtual const CameraIntrinsics& intrinsics() const = 0;
    virtual const LightRig& rig() const = 0;  // calibrated rig, active LEDs set
    virtual PSImageStack frame(int t) = 0;
    virtual std::optional<DepthMap> prior(int) { return std::nullopt; }
};

// Ground truth for evaluation (world frame).
struct GroundTruth {
    std::vector<PoseSE3> poses;
    std::optional<SceneObject> object;  // analytic surface and visibility
    TriangleMesh mesh;                  // used when no analytic object is available
};

inline SceneObject make_scene_object(const PipelineConfig& cfg) {
    SceneObject o;
    if (cfg.scene.shape == "sphere") o = SceneObject::sphere(Vec3::Zero(), cfg.scene.radius, cfg.scene.albedo);
    else o = SceneObject::mesh(io::read_ply(cfg.scene.mesh), cfg.scene.albedo);
    o.specular_strength = cfg.scene.specular_strength;
    o.specular_exponent = cfg.scene.specular_exponent;
    o.validate();
    return o;
}

inline LightRig make_rig(const PipelineConfig& cfg) {
    LightRig rig = LightRig::ring(cfg.lights.count, cfg.lights.tilt_deg, cfg.lights.intensity);
    rig.active = select_spread_leds(rig, cfg.lights.active);
    return rig;
}

// True camera-to-world poses: commanded stops plus optional seeded jitter.
inline std::vector<PoseSE3> true_trajectory(const PipelineConfig& cfg, const Vec3& center) {
    auto poses = generate_trajectory(cfg.trajectory, center);
    if (cfg.jitter_deg == 0.0 && cfg.jitter_rel == 0.0) return poses;
    Rng rng = make_rng(cfg.seed, "jitter");
    for (auto& p : poses) {
        const Vec3 axis = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized();
        const double ang = deg2rad(cfg.jitter_deg) * uniform01(rng);
        const Vec3 dt = cfg.jitter_rel * cfg.trajectory.standoff * Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
        p = PoseSE3::orthonormalized(exp_so3(ang * axis) * p.rotation(), p.translation() + dt);
    }
    return poses;
}

// Renders the configured synthetic scene one view at a time.
class SceneSource : public FrameSource {
public:
    explicit SceneSource(const PipelineConfig& cfg)
        : cfg_(cfg), object_(make_scene_object(cfg)), rig_(make_rig(cfg)),
          poses_(true_trajectory(cfg, object_.center())) {
        external_ = make_external_lights(cfg.lights.external, cfg.lights.external_intensity,
                                         derive_seed(cfg.seed, "external"));
    }

    int frame_count() const override { return int(poses_.size()); }
    const CameraIntrinsics& intrinsics() const override { return cfg_.camera; }
    const LightRig& rig() const override { return rig_; }

    PSImageStack frame(int t) override {
        RenderOptions opts;
        opts.external_lights = external_;
        opts.noise_sigma = cfg_.render.noise_sigma;
        opts.seed = derive_seed(cfg_.seed, "render", std::uint64_t(t));
        PSImageStack s = render_view(object_, poses_[t], rig_, cfg_.camera, opts);
        s.view_index = t;
        Rng rng = make_rng(cfg_.seed, "corrupt", std::uint64_t(t));
        std::vector<std::size_t> frontal;
        for (std::size_t i = 0; i < s.mask.size(); ++i)
            if (s.mask[i] && (*s.gt_normals)[i].z() < -0.7) frontal.push_back(i);
        for (int r = 0; r < cfg_.render.corrupt_regions && !frontal.empty(); ++r) {
            const std::size_t pix = frontal[uniform_index(rng, frontal.size())];
            corrupt_region(s, double(pix % s.mask.width()), double(pix / s.mask.width()), cfg_.render.corrupt_radius_px,
                           cfg_.render.corrupt_noise, rng());
        }
        return s;
    }

    const SceneObject& object() const { return object_; }
    GroundTruth ground_truth() const { return {poses_, object_, {}}; }
    const std::vector<DirectionalLight>& external_lights() const { return external_; }

private:
    PipelineConfig cfg_;
    SceneObject object_;
    LightRig rig_;
    std::vector<PoseSE3> poses_;
    std::vector<DirectionalLight> external_;
};

class DatasetSource : public FrameSource {
public:
    explicit DatasetSource(const std::string& root) : reader_(root) {}
    int frame_count() const override { return reader_.view_count(); }
    const CameraIntrinsics& intrinsics() const override { return reader_.intrinsics(); }
    const LightRig& rig() const override { return reader_.rig(); }
    PSImageStack frame(int t) override { return reader_.load_view(t); }
    std::optional<DepthMap> prior(int t) override { return reader_.load_prior(t); }
    const io::DatasetReader& reader() const { return reader_; }

private:
    io::DatasetReader reader_;
};

// ---------------------------------------------------------------------------
// Per-frame records

struct StageTiming {
    std::string stage;
    double ms = 0.0;
};

struct FrameRecord {
    int view = 0;
    std::vector<StageTiming> timings;
    double total_ms = 0.0;
    RegistrationResult registration;
    int refine_iterations = 0;
    bool refine_converged = true;
    double refine_rms_change = 0.0;  // RMS(D_c - aligned prior) on the mask
    double prior_scale = 1.0;
    double prior_shift = 0.0;
    double confidence_mean = 0.0;
    double confidence_min = 0.0;
    double confidence_max = 0.0;
    double valid_gradient_fraction = 0.0;
    double ard = std::numeric_limits<double>::quiet_NaN();  // of D_c when ground-truth depth is present
    double ard_prior = std::numeric_limits<double>::quiet_NaN();

    double stage_ms(const std::string& name) const {
        for (const auto& s : timings)
            if (s.stage == name) return s.ms;
        return 0.0;
    }
};

struct PipelineResult {
    TriangleMesh mesh;                 // reference frame (= first camera)
    std::vector<PoseSE3> poses;        // camera -> reference, after the optional pose-graph pass
    std::vector<PoseSE3> chained_poses;  // as tracked, before the pose-graph pass
    std::vector<FrameRecord> records;
    std::optional<TSDFVolume> volume;
    bool loop_closed = false;
};

// ---------------------------------------------------------------------------
// The loop

namespace detail {

class StageClock {
public:
    explicit StageClock(FrameRecord& rec) : rec_(rec), frame_start_(now()), start_(frame_start_) {}
    void lap(const std::string& stage) {
        const auto t = now();
        rec_.timings.push_back({stage, ms(start_, t)});
        start_ = t;
    }
    void finish() { rec_.total_ms = ms(frame_start_, now()); }

private:
    using clock = std::chrono::steady_clock;
    static clock::time_point now() { return clock::now(); }
    static double ms(clock::time_point a, clock::time_point b) {
        return std::chrono::duration<double, std::milli>(b - a).count();
    }
    FrameRecord& rec_;
    clock::time_point frame_start_, start_;
};

inline PointCloud subsample_live(const DepthMap& d, const CameraIntrinsics& k, const BitMask& mask, int target) {
    BitMask ok(mask.width(), mask.height(), 0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] && std::isfinite(d[i]) && d[i] > 0.0) {
            ok[i] = 1;
            ++n;
        }
    const std::size_t stride = std::max<std::size_t>(1, (n + std::size_t(target) - 1) / std::size_t(target));
    PointCloud c;
    std::size_t seen = 0;
    for (int v = 0; v < d.height(); ++v)
        for (int u = 0; u < d.width(); ++u)
            if (ok(u, v) && seen++ % stride == 0) c.points.push_back(k.unproject(u, v, d(u, v)));
    return c;
}

inline double masked_rms(const Grid<double>& a, const Grid<double>& b, const BitMask& mask) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] && std::isfinite(a[i]) && std::isfinite(b[i])) {
            s += (a[i] - b[i]) * (a[i] - b[i]);
            ++n;
        }
    return n ? std::sqrt(s / double(n)) : 0.0;
}

}  // namespace detail

inline PipelineResult run_incremental(const PipelineConfig& cfg, FrameSource& source) {
    cfg.validate();
    const int n = source.frame_count();
    if (n < 1) throw InputError("run_incremental: no frames");
    const CameraIntrinsics k = source.intrinsics();
    k.validate();

    LightRig solver_rig = source.rig();
    if (cfg.lights.perturb_deg > 0.0 || cfg.lights.perturb_rel > 0.0)
        solver_rig = perturb_lights(solver_rig, cfg.lights.perturb_deg, cfg.lights.perturb_rel,
                                    derive_seed(cfg.seed, "lights"));
    const auto nominal = generate_trajectory(cfg.trajectory, Vec3::Zero());
    const bool nominal_matches = int(nominal.size()) == n;

    PipelineResult res;
    std::vector<DepthMap> refined(n);
    std::vector<Grid<double>> fusion_weight(n);
    std::vector<BitMask> masks(n);
    std::optional<TSDFVolume> volume;

    for (int t = 0; t < n; ++t) {
        FrameRecord rec;
        rec.view = t;
        detail::StageClock clock(rec);
        std::string stage = "load";
        try {
            PSImageStack stack = source.frame(t);
            stack.validate();
            if (!stack.mask.same_shape(k.width, k.height)) throw InputError("view size does not match intrinsics");
            masks[t] = stack.mask;
            clock.lap(stage);

            // (1)-(2) normals and confidence
            stage = "photometric";
            const int active = int(stack.images.size());
            EnsembleSpec ens;
            ens.count = cfg.photometric.ensemble;
            ens.subset_size = std::min(cfg.photometric.subset_size, std::max(3, active - 1));
            ens.sigma0 = cfg.photometric.sigma0;
            ens.lambda_min = cfg.refine.lambda_min;
            ens.lambda_max = cfg.refine.lambda_max;
            ens.seed = derive_seed(cfg.seed, "ensemble", std::uint64_t(t));
            ens.ls.shadow_threshold = cfg.photometric.shadow_threshold;
            const UncertaintyResult unc = estimate_uncertainty(stack, solver_rig, ens);
            clock.lap(stage);

            // (3) depth prior and metric alignment
            stage = "prior";
            const Image median = median_image(stack);
            (void)median;
            DepthMap prior;
            if (auto p = source.prior(t)) {
                prior = std::move(*p);
                if (!prior.same_shape(stack.mask)) throw InputError("prior size does not match the view");
            } else {
                if (!stack.gt_depth) throw InputError("no depth prior and no ground-truth depth to simulate one from");
                const PointCloud gt_cloud = backproject(*stack.gt_depth, k, stack.mask);
                const double size = bounding_box(gt_cloud.points).extent().maxCoeff();
                SmoothNoiseSpec noise;
                noise.amplitude = cfg.prior.noise_rel * size;
                noise.modes = cfg.prior.noise_modes;
                prior = simulate_sidp(*stack.gt_depth, stack.mask, cfg.prior.blur_sigma_px,
                                      {cfg.prior.scale, cfg.prior.shift}, noise, derive_seed(cfg.seed, "prior", std::uint64_t(t)));
            }
            PoseSE3 predicted = PoseSE3::identity();
            if (t > 0) {
                const PoseSE3& prev = res.chained_poses[t - 1];
                if (cfg.registration.init == "motion" && nominal_matches)
                    predicted = prev * (nominal[t - 1].inverse() * nominal[t]);
                else if (cfg.registration.init != "identity" && t > 1)
                    predicted = prev * (res.chained_poses[t - 2].inverse() * prev);
                else
                    predicted = prev;
            }
            if (cfg.prior.align == "median") {
                auto a = normalize_unit_median(prior, stack.mask);
                prior = std::move(a.depth);
                rec.prior_scale = a.scale;
            } else if (cfg.prior.align == "model" && volume) {
                const DepthMap anchor = raycast_depth(*volume, k, predicted, 0.0,
                                                      std::numeric_limits<double>::infinity(), cfg.prior.anchor_stride);
                BitMask frontal(k.width, k.height, 0);
                for (int v = 0; v < k.height; ++v)
                    for (int u = 0; u < k.width; ++u) {
                        const Vec3 r = k.ray(u, v);
                        frontal(u, v) = stack.mask(u, v) &&
                                        -unc.normals(u, v).dot(r) >= cfg.prior.anchor_min_cos * r.norm();
                    }
                try {
                    auto a = align_scale_shift(prior, anchor, frontal);
                    prior = std::move(a.depth);
                    rec.prior_scale = a.scale;
                    rec.prior_shift = a.shift;
                } catch (const InputError&) {
                    // too little model overlap: keep the prior as given
                }
            }
            for (std::size_t i = 0; i < prior.size(); ++i)
                if (stack.mask[i] && !(std::isfinite(prior[i]) && prior[i] > 0.0))
                    throw DataError("depth prior is not positive under the mask");
            clock.lap(stage);

            // (4) refinement
            stage = "refine";
            RefineProblem prob;
            prob.prior = prior;
            prob.mask = stack.mask;
            prob.confidence = unc.confidence;
            prob.params.lambda_min = cfg.refine.lambda_min;
            prob.params.lambda_max = cfg.refine.lambda_max;
            prob.params.tol = cfg.refine.tol;
            prob.params.max_iter = cfg.refine.max_iter;
            prob.target = cfg.refine.gradients == "perspective"
                              ? normals_to_gradients_perspective(unc.normals, stack.mask, k, prior, cfg.refine.eps)
                              : normals_to_gradients(unc.normals, stack.mask, cfg.refine.eps);
            DepthMap dc;
            Grid<double> weight(k.width, k.height, 0.0);
            if (cfg.refine.mode == "prior_only") {
                dc = DepthMap(prior, DepthRole::refined);
                for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = stack.mask[i] ? 0.5 : 0.0;
            } else {
                const RefineResult rr =
                    cfg.refine.mode == "weighted" ? refine_depth(prob) : refine_depth_unweighted(prob);
                dc = rr.depth;
                rec.refine_iterations = rr.iterations;
                rec.refine_converged = rr.converged;
                for (std::size_t i = 0; i < weight.size(); ++i) {
                    if (!stack.mask[i]) continue;
                    weight[i] = cfg.refine.mode == "weighted" ? detail::effective_lambda(prob, i) : 0.5;
                }
            }
            for (std::size_t i = 0; i < dc.size(); ++i)
                if (stack.mask[i] && !(std::isfinite(dc[i]) && dc[i] > 0.0))
                    throw DataError("refined depth is not positive under the mask");
            rec.refine_rms_change = detail::masked_rms(dc, prior, stack.mask);
            {
                double s = 0.0, lo = 1.0, hi = 0.0;
                std::size_t cnt = 0, valid = 0;
                for (std::size_t i = 0; i < stack.mask.size(); ++i) {
                    if (!stack.mask[i]) continue;
                    const double l = unc.confidence[i];
                    s += l;
                    lo = std::min(lo, l);
                    hi = std::max(hi, l);
                    ++cnt;
                    valid += prob.target.valid[i];
                }
                rec.confidence_mean = s / double(cnt);
                rec.confidence_min = lo;
                rec.confidence_max = hi;
                rec.valid_gradient_fraction = double(valid) / double(cnt);
            }
            if (stack.gt_depth) {
                rec.ard = ard(dc, *stack.gt_depth, stack.mask);
                rec.ard_prior = ard(prior, *stack.gt_depth, stack.mask);
            }
            clock.lap(stage);

            // (5) registration
            stage = "register";
            PoseSE3 pose = PoseSE3::identity();
            if (t == 0) {
                const PointCloud first = backproject(dc, k, stack.mask);
                volume.emplace(fit_volume(first.points, cfg.tsdf.resolution, cfg.tsdf.margin, cfg.tsdf.truncation_voxels));
                rec.registration.pose = pose;
                rec.registration.converged = true;
                rec.registration.inlier_fraction = 1.0;
            } else {
                const PointCloud live = detail::subsample_live(dc, k, stack.mask, cfg.registration.samples);
                PointCloud model = raycast_cloud(*volume, k, predicted, cfg.registration.model_stride);
                if (model.size() < 100) model = model_cloud(*volume);
                RegistrationParams rp;
                rp.max_iter = cfg.registration.max_iter;
                rp.trim_fraction = cfg.registration.trim;
                try {
                    rec.registration = register_cloud(live, model, predicted, rp);
                } catch (const InsufficientOverlapError&) {
                    rec.registration = register_cloud(live, model, res.chained_poses[t - 1], rp);
                }
                pose = rec.registration.pose;
            }
            res.chained_poses.push_back(pose);
            clock.lap(stage);

            // (6) fusion
            stage = "integrate";
            integrate(*volume, dc, weight, k, pose, cfg.tsdf.min_weight);
            refined[t] = std::move(dc);
            fusion_weight[t] = std::move(weight);
            clock.lap(stage);
        } catch (const PipelineError&) {
            throw;
        } catch (const std::exception& e) {
            throw PipelineError(t, stage, e.what());
        }
        clock.finish();
        res.records.push_back(std::move(rec));
    }

    res.poses = res.chained_poses;
    if (cfg.posegraph && n >= 3 && nominal_matches && cfg.trajectory.closes_loop()) {
        try {
            PoseGraph g;
            g.nodes = res.chained_poses;
            for (int t = 1; t < n; ++t) g.edges.push_back({t - 1, t, res.chained_poses[t - 1].inverse() * res.chained_poses[t], 1.0});
            PointCloud first = backproject(refined[0], k, masks[0]);
            const NormalField nf = normals_from_depth(refined[0], k, masks[0]);
            PointCloud model;
            for (int v = 0, idx = 0; v < k.height; ++v)
                for (int u = 0; u < k.width; ++u) {
                    if (!masks[0](u, v)) continue;
                    if (nf(u, v).squaredNorm() > 0.0) {
                        model.points.push_back(first.points[idx]);
                        model.normals.push_back(nf(u, v));
                    }
                    ++idx;
                }
            const PointCloud live = detail::subsample_live(refined[n - 1], k, masks[n - 1], cfg.registration.samples);
            RegistrationParams rp;
            rp.max_iter = cfg.registration.max_iter;
            rp.trim_fraction = cfg.registration.trim;
            const RegistrationResult loop = register_cloud(live, model, res.chained_poses[n - 1], rp);
            if (loop.min_eigen_ratio >= cfg.posegraph_min_eigen_ratio) {
                g.edges.push_back({n - 1, 0, loop.pose.inverse(), 1.0});
                res.poses = refine_pose_graph(g, 0).poses;
                res.loop_closed = true;
            }
        } catch (const InsufficientOverlapError&) {
            res.poses = res.chained_poses;
        } catch (const std::exception& e) {
            throw PipelineError(n - 1, "posegraph", e.what());
        }
        if (res.loop_closed) {
            TSDFVolume rebuilt(volume->resolution(), volume->voxel_size(), volume->origin(),
                               volume->truncation() / volume->voxel_size());
            for (int t = 0; t < n; ++t) integrate(rebuilt, refined[t], fusion_weight[t], k, res.poses[t], cfg.tsdf.min_weight);
            volume = std::move(rebuilt);
        }
    }
    res.mesh = extract_mesh(*volume);
    res.volume = std::move(volume);
    return res;
}

inline PipelineResult run_incremental(const PipelineConfig& cfg) {
    if (cfg.dataset.empty()) {
        SceneSource src(cfg);
        return run_incremental(cfg, src);
    }
    DatasetSource src(cfg.dataset);
    return run_incremental(cfg, src);
}

// ---------------------------------------------------------------------------
// Evaluation

// Surface samples of the ground truth observed by at least one camera (world frame): in frame,
// unoccluded, and seen at an incidence angle of at most max_incidence_deg.
inline std::vector<Vec3> visible_gt_samples(const GroundTruth& gt, const CameraIntrinsics& k, std::size_t count,
                                            std::uint64_t seed, double max_incidence_deg = 80.0) {
    const SceneObject obj = gt.object ? *gt.object : SceneObject::mesh(gt.mesh);
    const double min_cos = std::cos(deg2rad(max_incidence_deg));
    auto observed = [&](const Vec3& p, const Vec3& nrm) {
        for (const auto& pose : gt.poses) {
            const Vec3 to_cam = pose.translation() - p;
            if (nrm.dot(to_cam) >= min_cos * to_cam.norm() && point_visible(obj, p, nrm, pose, k)) return true;
        }
        return false;
    };
    if (obj.is_sphere()) {
        const auto& sph = std::get<SphereShape>(obj.shape);
        return sample_sphere(sph.center, sph.radius, count, seed, observed);
    }
    const PointCloud samples = sample_mesh(std::get<1>(obj.shape)->mesh(), count, seed);
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (observed(samples.points[i], samples.normals[i])) out.push_back(samples.points[i]);
    return out;
}

struct EvalOptions {
    std::size_t samples = 100000;          // per mesh, F-score
    std::size_t chamfer_samples = 1000000;  // per mesh, Chamfer-L1
    double tau = 0.0;                      // 0: 1% of the ground-truth bounding-box diagonal
    double max_incidence_deg = 80.0;
    std::uint64_t seed = 1;
    bool fit_scale = false;
};

// Compares a reference-frame mesh and trajectory against world-frame ground truth.
// The reference frame is the first camera, so the mesh is mapped to the world with gt.poses[0].
inline MetricReport evaluate(const TriangleMesh& mesh, const std::vector<PoseSE3>& poses, const GroundTruth& gt,
                             const CameraIntrinsics& k, const EvalOptions& opt) {
    if (gt.poses.empty()) throw InputError("evaluate: ground truth has no poses");
    MetricReport r;
    const AxisBox box = gt.object ? gt.object->bounds() : bounding_box(gt.mesh.vertices);
    r.tau = opt.tau > 0.0 ? opt.tau : 0.01 * box.diagonal();
    const std::vector<Vec3> gt_f =
        visible_gt_samples(gt, k, opt.samples, derive_seed(opt.seed, "eval_gt"), opt.max_incidence_deg);
    if (gt_f.empty()) throw InputError("evaluate: no observed ground-truth surface");
    if (mesh.triangles.empty()) {
        r.f = {};
        r.chamfer = std::numeric_limits<double>::infinity();
    } else {
        const TriangleMesh world = transform(mesh, gt.poses[0]);
        r.f = fscore(sample_mesh(world, opt.samples, derive_seed(opt.seed, "eval_pred")).points, gt_f, r.tau);
        const std::vector<Vec3> gt_c = visible_gt_samples(gt, k, opt.chamfer_samples,
                                                          derive_seed(opt.seed, "eval_gt_dense"), opt.max_incidence_deg);
        r.chamfer = chamfer_l1(sample_mesh(world, opt.chamfer_samples, derive_seed(opt.seed, "eval_pred_dense")).points,
                               gt_c);
    }
    if (poses.size() == gt.poses.size() && poses.size() >= 2) {
        r.per_frame = pose_errors(poses, gt.poses, opt.fit_scale);
        if (r.per_frame.size() > 1) {
            double sr = 0.0, st = 0.0;
            for (std::size_t i = 1; i < r.per_frame.size(); ++i) {
                sr += r.per_frame[i].rotation_deg;
                st += r.per_frame[i].translation;
            }
            r.mean_rotation_deg = sr / double(r.per_frame.size() - 1);
            r.mean_translation = st / double(r.per_frame.size() - 1);
        }
    }
    return r;
}

inline double mean_ard(const std::vector<FrameRecord>& records) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : records)
        if (std::isfinite(r.ard)) {
            s += r.ard;
            ++n;
        }
    return n ? s / double(n) : std::numeric_limits<double>::quiet_NaN();
}

inline MetricReport evaluate_scene_run(const PipelineConfig& cfg, const PipelineResult& res, const SceneSource& src) {
    EvalOptions opt;
    opt.samples = std::size_t(cfg.eval.samples);
    opt.chamfer_samples = std::size_t(cfg.eval.chamfer_samples);
    opt.max_incidence_deg = cfg.eval.max_incidence_deg;
    opt.tau = cfg.eval.tau;
    opt.seed = cfg.seed;
    MetricReport r = evaluate(res.mesh, res.poses, src.ground_truth(), cfg.camera, opt);
    r.ard = mean_ard(res.records);
    return r;
}

// ---------------------------------------------------------------------------
// Outputs

namespace io {

inline void write_frame_csv(const std::string& path, const std::vector<FrameRecord>& records) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(10)
       << "view,inlier_fraction,rms_residual,icp_iterations,icp_converged,refine_iterations,refine_converged,"
          "refine_rms_change,prior_scale,prior_shift,confidence_mean,confidence_min,confidence_max,"
          "valid_gradient_fraction,ard,ard_prior\n";
    for (const auto& r : records)
        os << r.view << ',' << r.registration.inlier_fraction << ',' << r.registration.rms_residual << ','
           << r.registration.iterations << ',' << int(r.registration.converged) << ',' << r.refine_iterations << ','
           << int(r.refine_converged) << ',' << r.refine_rms_change << ',' << r.prior_scale << ',' << r.prior_shift
           << ',' << r.confidence_mean << ',' << r.confidence_min << ',' << r.confidence_max << ','
           << r.valid_gradient_fraction << ',' << r.ard << ',' << r.ard_prior << "\n";
    if (!os) throw IoError(path, "write failed");
}

inline void write_timing_csv(const std::string& path, const std::vector<FrameRecord>& records) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(6) << "view";
    if (!records.empty())
        for (const auto& s : records.front().timings) os << ',' << s.stage << "_ms";
    os << ",total_ms\n";
    for (const auto& r : records) {
        os << r.view;
        for (const auto& s : r.timings) os << ',' << s.ms;
        os << ',' << r.total_ms << "\n";
    }
    if (!os) throw IoError(path, "write failed");
}

// mesh.ply, poses.txt, frames.csv and timings.csv (the only non-deterministic file).
inline void write_run_outputs(const std::string& dir, const PipelineResult& res) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
    const std::filesystem::path d(dir);
    write_ply((d / "mesh.ply").string(), res.mesh);
    write_poses((d / "poses.txt").string(), res.poses);
    write_frame_csv((d / "frames.csv").string(), res.records);
    write_timing_csv((d / "timings.csv").string(), res.records);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
    std::string setting;
    MetricReport report;
};

inline std::vector<std::string> ablation_kinds() {
    return {"uncertainty", "trajectory", "lights", "leds", "external", "posegraph"};
}

// Runs the matched sweep on the synthetic scene with one seed across settings.
inline std::vector<AblationRow> run_ablation(const PipelineConfig& base, const std::string& which,
                                             const std::function<void(const std::string&)>& progress = {}) {
    if (!base.dataset.empty()) throw InputError("run_ablation: sweeps run on the synthetic scene only");
    std::vector<std::pair<std::string, PipelineConfig>> settings;
    auto add = [&](std::string name, auto&& edit) {
        PipelineConfig c = base;
        edit(c);
        settings.emplace_back(std::move(name), std::move(c));
    };
    if (which == "uncertainty") {
        for (const char* m : {"weighted", "unweighted", "prior_only"})
            add(std::string("refine.mode=") + m, [&](PipelineConfig& c) { c.refine.mode = m; });
    } else if (which == "trajectory") {
        for (auto kind : {TrajectoryKind::smooth_circle, TrajectoryKind::square, TrajectoryKind::zigzag})
            add(std::string("trajectory.kind=") + to_string(kind), [&](PipelineConfig& c) { c.trajectory.kind = kind; });
    } else if (which == "lights") {
        add("lights=calibrated", [](PipelineConfig& c) { c.lights.perturb_deg = c.lights.perturb_rel = 0.0; });
        add("lights=perturbed", [](PipelineConfig& c) {
            c.lights.perturb_deg = 5.0;
            c.lights.perturb_rel = 0.1;
        });
    } else if (which == "leds") {
        for (int a = 3; a <= base.lights.count; ++a)
            add("lights.active=" + std::to_string(a), [&](PipelineConfig& c) { c.lights.active = a; });
    } else if (which == "external") {
        for (int e = 0; e <= 3; ++e)
            add("lights.external=" + std::to_string(e), [&](PipelineConfig& c) { c.lights.external = e; });
    } else if (which == "posegraph") {
        add("posegraph.enabled=false", [](PipelineConfig& c) { c.posegraph = false; });
        add("posegraph.enabled=true", [](PipelineConfig& c) { c.posegraph = true; });
    } else {
        throw InputError("run_ablation: unknown sweep '" + which + "'");
    }
    std::vector<AblationRow> rows;
    for (auto& [name, cfg] : settings) {
        if (progress) progress(name);
        SceneSource src(cfg);
        const PipelineResult res = run_incremental(cfg, src);
        AblationRow row{name, evaluate_scene_run(cfg, res, src)};
        row.report.name = which + ":" + name;
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::vector<MetricReport> reports;
    for (const auto& r : rows) reports.push_back(r.report);
    io::write_metric_csv(path, reports);
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
    std::string stage;
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double max_ms = 0.0;
};

// Per-stage timing summary over the frames of a run (frame 0 excluded when more exist).
inline std::vector<BenchRow> summarize_timings(const std::vector<FrameRecord>& records) {
    std::vector<BenchRow> out;
    if (records.empty()) return out;
    const std::size_t first = records.size() > 1 ? 1 : 0;
    std::vector<std::string> stages;
    for (const auto& s : records.front().timings) stages.push_back(s.stage);
    stages.push_back("refine+integrate");
    stages.push_back("total");
    for (const auto& st : stages) {
        std::vector<double> v;
        for (std::size_t i = first; i < records.size(); ++i) {
            const auto& r = records[i];
            v.push_back(st == "total" ? r.total_ms
                        : st == "refine+integrate" ? r.stage_ms("refine") + r.stage_ms("integrate")
                                                   : r.stage_ms(st));
        }
        std::sort(v.begin(), v.end());
        BenchRow row{st, std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()),
                     v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]), v.back()};
        out.push_back(row);
    }
    return out;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(6) << "stage,mean_ms,median_ms,max_ms\n";
    for (const auto& r : rows) os << r.stage << ',' << r.mean_ms << ',' << r.median_ms << ',' << r.max_ms << "\n";
    if (!os) throw IoError(path, "write failed");
}

}  // namespace mvps
