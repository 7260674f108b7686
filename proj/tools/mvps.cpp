#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "mvps/mvps.hpp"

namespace fs = std::filesystem;
using namespace mvps;

namespace {

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
    bool print_config = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config, "configuration file (key = value lines)");
    cmd->add_option("-s,--set", o.overrides, "override one key, e.g. --set refine.mode=unweighted");
    cmd->add_flag("--print-config", o.print_config, "print the effective configuration and exit");
}

PipelineConfig load(const CommonOptions& o) {
    PipelineConfig cfg;
    if (!o.config.empty()) cfg = load_pipeline_config(o.config, cfg);
    std::string text;
    for (const auto& s : o.overrides) text += s + "\n";
    apply_config(cfg, pipeline_config_keys(), parse_config_text(text, "--set"), "--set");
    cfg.validate();
    return cfg;
}

bool maybe_print(const CommonOptions& o, const PipelineConfig& cfg) {
    if (!o.print_config) return false;
    std::cout << dump_config(cfg, pipeline_config_keys());
    return true;
}

void print_report(const MetricReport& r) {
    std::cout << std::setprecision(6) << "fscore " << r.f.fscore << " (precision " << r.f.precision << ", recall "
              << r.f.recall << ") at tau " << r.tau << "\n"
              << "chamfer_l1 " << r.chamfer << "\n";
    if (std::isfinite(r.ard)) std::cout << "ard " << r.ard << "\n";
    if (!r.per_frame.empty())
        std::cout << "mean pose error " << r.mean_rotation_deg << " deg, " << r.mean_translation << "\n";
}

int cmd_render(const CommonOptions& o, const std::string& out, const std::string& format, bool with_prior) {
    const PipelineConfig cfg = load(o);
    if (maybe_print(o, cfg)) return 0;
    if (!cfg.dataset.empty()) throw InputError("render: input.dataset must be empty");
    SceneSource src(cfg);
    std::vector<PSImageStack> views;
    std::vector<DepthMap> priors;
    for (int t = 0; t < src.frame_count(); ++t) {
        views.push_back(src.frame(t));
        if (with_prior) {
            const auto& v = views.back();
            const PointCloud c = backproject(*v.gt_depth, cfg.camera, v.mask);
            SmoothNoiseSpec noise;
            noise.amplitude = cfg.prior.noise_rel * bounding_box(c.points).extent().maxCoeff();
            noise.modes = cfg.prior.noise_modes;
            priors.push_back(simulate_sidp(*v.gt_depth, v.mask, cfg.prior.blur_sigma_px, {cfg.prior.scale, cfg.prior.shift},
                                           noise, derive_seed(cfg.seed, "prior", std::uint64_t(t))));
        }
        std::cerr << "rendered view " << t + 1 << "/" << src.frame_count() << "\r" << std::flush;
    }
    std::cerr << "\n";
    const ImageFormat fmt = format == "png" ? ImageFormat::png16 : ImageFormat::pfm;
    io::write_dataset(out, views, cfg.camera, src.ground_truth().poses, src.rig(), fmt, priors);
    const SceneObject& obj = src.object();
    const TriangleMesh gt_mesh = obj.is_sphere()
                                     ? icosphere(std::get<SphereShape>(obj.shape).center,
                                                 std::get<SphereShape>(obj.shape).radius, 6)
                                     : std::get<1>(obj.shape)->mesh();
    io::write_ply((fs::path(out) / "gt_mesh.ply").string(), gt_mesh);
    std::cout << "wrote " << views.size() << " views to " << out << "\n";
    return 0;
}

int cmd_run(const CommonOptions& o, const std::string& dataset, const std::string& out, bool evaluate_run,
            bool dump_tsdf) {
    PipelineConfig cfg = load(o);
    if (!dataset.empty()) cfg.dataset = dataset;
    if (!out.empty()) cfg.output = out;
    if (maybe_print(o, cfg)) return 0;
    PipelineResult res;
    std::optional<MetricReport> report;
    if (cfg.dataset.empty()) {
        SceneSource src(cfg);
        res = run_incremental(cfg, src);
        if (evaluate_run) report = evaluate_scene_run(cfg, res, src);
    } else {
        DatasetSource src(cfg.dataset);
        res = run_incremental(cfg, src);
    }
    io::write_run_outputs(cfg.output, res);
    if (dump_tsdf && res.volume) io::write_tsdf_dump((fs::path(cfg.output) / "volume.tsdf").string(), *res.volume);
    std::cout << "wrote " << res.mesh.vertices.size() << " vertices, " << res.mesh.triangles.size() << " triangles, "
              << res.poses.size() << " poses to " << cfg.output << (res.loop_closed ? " (loop closed)" : "") << "\n";
    if (report) {
        report->name = "run";
        io::write_metric_csv((fs::path(cfg.output) / "metrics.csv").string(), {*report});
        io::write_pose_error_csv((fs::path(cfg.output) / "pose_errors.csv").string(), report->per_frame);
        print_report(*report);
    }
    return 0;
}

int cmd_eval(const std::string& mesh_path, const std::string& poses_path, const std::string& dataset,
             const std::string& out, std::size_t samples, std::size_t chamfer_samples, double tau, std::uint64_t seed) {
    const io::DatasetReader reader(dataset);
    if (!reader.gt_poses()) throw MissingAssetError((fs::path(dataset) / "poses_gt.txt").string(), -1);
    const std::string gt_mesh_path = (fs::path(dataset) / "gt_mesh.ply").string();
    if (!fs::exists(gt_mesh_path)) throw MissingAssetError(gt_mesh_path, -1);
    GroundTruth gt;
    gt.poses = *reader.gt_poses();
    gt.mesh = io::read_ply(gt_mesh_path);
    const TriangleMesh mesh = io::read_ply(mesh_path);
    const std::vector<PoseSE3> poses = poses_path.empty() ? std::vector<PoseSE3>{} : io::read_poses(poses_path);
    EvalOptions opt;
    opt.samples = samples;
    opt.chamfer_samples = chamfer_samples;
    opt.tau = tau;
    opt.seed = seed;
    MetricReport r = evaluate(mesh, poses, gt, reader.intrinsics(), opt);
    r.name = fs::path(mesh_path).stem().string();
    fs::create_directories(out);
    io::write_metric_csv((fs::path(out) / "metrics.csv").string(), {r});
    if (!r.per_frame.empty()) io::write_pose_error_csv((fs::path(out) / "pose_errors.csv").string(), r.per_frame);
    print_report(r);
    return 0;
}

int cmd_ablate(const CommonOptions& o, const std::string& which, const std::string& out) {
    const PipelineConfig cfg = load(o);
    if (maybe_print(o, cfg)) return 0;
    const std::vector<std::string> kinds = which == "all" ? ablation_kinds() : std::vector<std::string>{which};
    fs::create_directories(out);
    for (const auto& kind : kinds) {
        const auto rows = run_ablation(cfg, kind, [](const std::string& s) { std::cerr << "  " << s << "\n"; });
        write_ablation_csv((fs::path(out) / ("ablation_" + kind + ".csv")).string(), rows);
        for (const auto& r : rows)
            std::cout << std::left << std::setw(40) << r.report.name << " fscore " << std::setprecision(4)
                      << r.report.f.fscore << "  chamfer " << r.report.chamfer << "\n";
    }
    return 0;
}

int cmd_bench(const CommonOptions& o, const std::string& out) {
    PipelineConfig cfg = load(o);
    if (maybe_print(o, cfg)) return 0;
    const PipelineResult res = run_incremental(cfg);
    const auto rows = summarize_timings(res.records);
    if (!out.empty()) write_bench_csv(out, rows);
    std::cout << std::left << std::setw(18) << "stage" << std::right << std::setw(12) << "mean_ms" << std::setw(12)
              << "median_ms" << std::setw(12) << "max_ms" << "\n"
              << std::fixed << std::setprecision(2);
    for (const auto& r : rows)
        std::cout << std::left << std::setw(18) << r.stage << std::right << std::setw(12) << r.mean_ms << std::setw(12)
                  << r.median_ms << std::setw(12) << r.max_ms << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Incremental multi-view photometric stereo reconstruction"};
    app.require_subcommand(1);

    CommonOptions render_opts, run_opts, ablate_opts, bench_opts;
    std::string render_out = "dataset", render_format = "pfm";
    bool render_prior = false;
    auto* render = app.add_subcommand("render", "render the configured synthetic scene to a dataset directory");
    add_common(render, render_opts);
    render->add_option("-o,--out", render_out, "dataset directory");
    render->add_option("--format", render_format, "image format")->check(CLI::IsMember({"pfm", "png"}));
    render->add_flag("--with-prior", render_prior, "also write a simulated depth prior per view");

    std::string run_dataset, run_out;
    bool run_eval = false, run_dump = false;
    auto* run = app.add_subcommand("run", "reconstruct from a dataset or the configured synthetic scene");
    add_common(run, run_opts);
    run->add_option("-d,--dataset", run_dataset, "dataset directory (overrides input.dataset)");
    run->add_option("-o,--out", run_out, "output directory (overrides output.dir)");
    run->add_flag("--eval", run_eval, "evaluate against the synthetic ground truth");
    run->add_flag("--dump-tsdf", run_dump, "also write the final volume to volume.tsdf");
    run->footer(
        "\nOutputs:\n  mesh.ply     fused surface\n  poses.txt    one camera-to-reference pose per view\n"
        "  frames.csv   view,inlier_fraction,rms_residual,icp_iterations,icp_converged,refine_iterations,\n"
        "               refine_converged,refine_rms_change,prior_scale,prior_shift,confidence_mean,\n"
        "               confidence_min,confidence_max,valid_gradient_fraction,ard,ard_prior\n"
        "  timings.csv  view,<stage>_ms...,total_ms (wall-clock, varies between runs)\n"
        "  metrics.csv, pose_errors.csv  with --eval, same columns as the eval subcommand\n"
        "  volume.tsdf  with --dump-tsdf: 5 text header lines (magic, resolution, voxel_size, origin,\n"
        "               truncation), then float32 little-endian values and weights, x fastest");

    std::string eval_mesh, eval_poses, eval_dataset, eval_out = "eval";
    std::size_t eval_samples = 100000, eval_chamfer_samples = 1000000;
    double eval_tau = 0.0;
    std::uint64_t eval_seed = 1;
    auto* eval = app.add_subcommand("eval", "compare a mesh and trajectory with dataset ground truth");
    eval->add_option("-m,--mesh", eval_mesh, "reconstructed mesh (PLY)")->required();
    eval->add_option("-p,--poses", eval_poses, "estimated poses");
    eval->add_option("-d,--dataset", eval_dataset, "dataset with poses_gt.txt and gt_mesh.ply")->required();
    eval->add_option("-o,--out", eval_out, "output directory");
    eval->add_option("--samples", eval_samples, "surface samples per mesh for the F-score");
    eval->add_option("--chamfer-samples", eval_chamfer_samples, "surface samples per mesh for Chamfer-L1");
    eval->add_option("--tau", eval_tau, "F-score threshold, 0 = 1% of the bbox diagonal");
    eval->add_option("--seed", eval_seed, "sampling seed");
    eval->footer(std::string("\nOutputs:\n  metrics.csv      ") + io::kMetricCsvHeader +
                 "\n                   one row per run; errors in scene units and degrees, frame 0 excluded from the "
                 "means\n  pose_errors.csv  frame,rot_err_deg,trans_err\n"
                 "                   one row per frame after aligning the estimated trajectory to ground truth");

    std::string ablate_which = "all", ablate_out = "ablation";
    auto* ablate = app.add_subcommand("ablate", "run a matched parameter sweep on the synthetic scene");
    add_common(ablate, ablate_opts);
    ablate->add_option("-w,--which", ablate_which, "sweep")
        ->check(CLI::IsMember({"all", "uncertainty", "trajectory", "lights", "leds", "external", "posegraph"}));
    ablate->add_option("-o,--out", ablate_out, "output directory");
    ablate->footer(std::string("\nOutputs: ablation_<sweep>.csv per sweep with columns ") + io::kMetricCsvHeader +
                   "\nname is <sweep>:<setting>");

    std::string bench_out;
    auto* bench = app.add_subcommand("bench", "per-stage timing table");
    add_common(bench, bench_opts);
    bench->add_option("-o,--out", bench_out, "CSV file");
    bench->footer("\nOutput columns: stage,mean_ms,median_ms,max_ms (frame 0 excluded when more views exist)");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*render) return cmd_render(render_opts, render_out, render_format, render_prior);
        if (*run) return cmd_run(run_opts, run_dataset, run_out, run_eval, run_dump);
        if (*eval) return cmd_eval(eval_mesh, eval_poses, eval_dataset, eval_out, eval_samples, eval_chamfer_samples, eval_tau,
                                     eval_seed);
        if (*ablate) return cmd_ablate(ablate_opts, ablate_which, ablate_out);
        if (*bench) return cmd_bench(bench_opts, bench_out);
    } catch (const PipelineError& e) {
        std::cerr << "error: frame " << e.frame() << ": " << e.what() << "\n";
        return 3;
    } catch (const MissingAssetError& e) {
        std::cerr << "error: missing " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
