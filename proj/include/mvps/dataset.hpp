#pragma once

// On-disk multi-view photometric dataset:
//
//   <root>/K.txt                 row-major 3x3 intrinsics
//   <root>/lights.txt            one "lx ly lz e" line per LED
//   <root>/poses_gt.txt          optional, one row-major [R | t] line per view
//   <root>/view_NN/light_KK.pfm  float image of LED KK (or light_KK.png, 16-bit)
//   <root>/view_NN/mask.png      8-bit object mask
//   <root>/view_NN/gt_depth.pfm  optional ground-truth depth
//   <root>/view_NN/gt_normals.pfm optional ground-truth normals
//   <root>/view_NN/prior_depth.pfm optional externally supplied metric depth prior

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/io.hpp"
#include "mvps/registration.hpp"
#include "mvps/scene_sim.hpp"

namespace mvps {

enum class ImageFormat { pfm, png16 };

struct Dataset {
    CameraIntrinsics k;
    LightRig rig;
    std::vector<PSImageStack> views;
    std::vector<DepthMap> priors;          // empty, or one per view
    std::optional<std::vector<PoseSE3>> gt_poses;

    bool has_ground_truth() const {
        return gt_poses.has_value() && !views.empty() &&
               std::all_of(views.begin(), views.end(), [](const auto& v) { return v.gt_depth.has_value(); });
    }
};

namespace io {

namespace fs = std::filesystem;

inline std::string view_dir_name(int view) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%02d", view);
    return buf;
}

inline std::string light_file_name(int led, ImageFormat fmt) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "light_%02d.%s", led, fmt == ImageFormat::pfm ? "pfm" : "png");
    return buf;
}

inline void write_intrinsics(const std::string& path, const CameraIntrinsics& k) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(17);
    const Mat3 m = k.matrix();
    for (int r = 0; r < 3; ++r) os << m(r, 0) << ' ' << m(r, 1) << ' ' << m(r, 2) << '\n';
    if (!os) throw IoError(path, "write failed");
}

// Reads K.txt; the image size is supplied by the caller (taken from the masks).
inline CameraIntrinsics read_intrinsics(const std::string& path, int width, int height) {
    std::ifstream is(path);
    if (!is) throw IoError(path, "cannot open for reading");
    Mat3 m;
    std::string line;
    std::size_t lineno = 0;
    int row = 0;
    while (row < 3 && std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        for (int c = 0; c < 3; ++c)
            if (!(ls >> m(row, c))) throw ParseError(path, lineno, "expected 3 numbers in row " + std::to_string(row));
        ++row;
    }
    if (row < 3) throw ParseError(path, lineno, "expected 3 rows");
    if (m(0, 1) != 0.0 || m(1, 0) != 0.0 || m(2, 0) != 0.0 || m(2, 1) != 0.0 || m(2, 2) != 1.0)
        throw ParseError(path, 1, "expected [fx 0 cx; 0 fy cy; 0 0 1]");
    CameraIntrinsics k{m(0, 0), m(1, 1), m(0, 2), m(1, 2), width, height};
    try {
        k.validate();
    } catch (const InputError& e) {
        throw ParseError(path, 1, e.what());
    }
    return k;
}

inline void write_lights(const std::string& path, const LightRig& rig) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(17);
    for (std::size_t i = 0; i < rig.size(); ++i)
        os << rig.directions[i].x() << ' ' << rig.directions[i].y() << ' ' << rig.directions[i].z() << ' '
           << rig.intensities[i] << '\n';
    if (!os) throw IoError(path, "write failed");
}

// Directions and intensities only; the active set is left empty.
inline LightRig read_lights(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path, "cannot open for reading");
    LightRig rig;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        Vec3 d;
        double e;
        if (!(ls >> d.x() >> d.y() >> d.z() >> e)) throw ParseError(path, lineno, "expected 'lx ly lz e'");
        std::string extra;
        if (ls >> extra) throw ParseError(path, lineno, "trailing content '" + extra + "'");
        if (!d.allFinite() || std::abs(d.norm() - 1.0) > 1e-6) throw ParseError(path, lineno, "direction is not unit length");
        if (!(e > 0.0)) throw ParseError(path, lineno, "intensity must be positive");
        rig.directions.push_back(d);
        rig.intensities.push_back(e);
    }
    if (rig.directions.empty()) throw ParseError(path, lineno, "no lights");
    return rig;
}

inline void write_dataset(const std::string& root, const std::vector<PSImageStack>& views, const CameraIntrinsics& k,
                          const std::vector<PoseSE3>& poses, const LightRig& rig,
                          ImageFormat fmt = ImageFormat::pfm, const std::vector<DepthMap>& priors = {}) {
    if (views.empty()) throw InputError("write_dataset: no views");
    if (!poses.empty() && poses.size() != views.size()) throw InputError("write_dataset: poses/views length mismatch");
    if (!priors.empty() && priors.size() != views.size()) throw InputError("write_dataset: priors/views length mismatch");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError(root, "cannot create directory: " + ec.message());
    write_intrinsics((fs::path(root) / "K.txt").string(), k);
    write_lights((fs::path(root) / "lights.txt").string(), rig);
    if (!poses.empty()) write_poses((fs::path(root) / "poses_gt.txt").string(), poses);
    for (std::size_t t = 0; t < views.size(); ++t) {
        const auto& view = views[t];
        view.validate();
        const fs::path dir = fs::path(root) / view_dir_name(int(t));
        fs::create_directories(dir, ec);
        if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
        for (std::size_t i = 0; i < view.images.size(); ++i) {
            const std::string p = (dir / light_file_name(view.light_ids[i], fmt)).string();
            if (fmt == ImageFormat::pfm) write_pfm(p, view.images[i]);
            else write_png16(p, view.images[i]);
        }
        write_mask_png((dir / "mask.png").string(), view.mask);
        if (view.gt_depth) write_pfm((dir / "gt_depth.pfm").string(), *view.gt_depth);
        if (view.gt_normals) write_pfm((dir / "gt_normals.pfm").string(), *view.gt_normals);
        if (!priors.empty()) write_pfm((dir / "prior_depth.pfm").string(), priors[t]);
    }
}

// Lazy per-view access to a dataset directory.
class DatasetReader {
public:
    explicit DatasetReader(std::string root) : root_(std::move(root)) {
        if (!fs::is_directory(root_)) throw IoError(root_, "dataset directory not found");
        while (fs::is_directory(fs::path(root_) / view_dir_name(view_count_))) ++view_count_;
        if (view_count_ == 0) throw MissingAssetError((fs::path(root_) / view_dir_name(0)).string(), 0);
        rig_ = read_lights(require((fs::path(root_) / "lights.txt").string(), -1));
        const fs::path dir0 = fs::path(root_) / view_dir_name(0);
        static const std::regex pattern(R"(light_(\d+)\.(pfm|png))");
        for (const auto& entry : fs::directory_iterator(dir0)) {
            std::smatch m;
            const std::string name = entry.path().filename().string();
            if (!std::regex_match(name, m, pattern)) continue;
            const int led = std::stoi(m[1].str());
            if (led >= int(rig_.size())) throw IoError(entry.path().string(), "LED index not listed in lights.txt");
            const ImageFormat f = m[2].str() == "pfm" ? ImageFormat::pfm : ImageFormat::png16;
            if (!rig_.active.empty() && f != format_) throw IoError(entry.path().string(), "mixed image formats");
            format_ = f;
            rig_.active.push_back(led);
        }
        std::sort(rig_.active.begin(), rig_.active.end());
        if (rig_.active.empty()) throw MissingAssetError((dir0 / "light_00.pfm").string(), 0);
        try {
            rig_.validate();
        } catch (const InputError& e) {
            throw IoError((fs::path(root_) / "lights.txt").string(), e.what());
        }
        const BitMask mask0 = read_mask_png(require((dir0 / "mask.png").string(), 0));
        k_ = read_intrinsics(require((fs::path(root_) / "K.txt").string(), -1), mask0.width(), mask0.height());
        const fs::path poses = fs::path(root_) / "poses_gt.txt";
        if (fs::exists(poses)) {
            gt_poses_ = read_poses(poses.string());
            if (int(gt_poses_->size()) != view_count_)
                throw IoError(poses.string(), "expected " + std::to_string(view_count_) + " poses, found " +
                                                  std::to_string(gt_poses_->size()));
        }
    }

    const std::string& root() const { return root_; }
    int view_count() const { return view_count_; }
    const CameraIntrinsics& intrinsics() const { return k_; }
    const LightRig& rig() const { return rig_; }
    ImageFormat format() const { return format_; }
    const std::optional<std::vector<PoseSE3>>& gt_poses() const { return gt_poses_; }

    PSImageStack load_view(int t) const {
        if (t < 0 || t >= view_count_) throw InputError("load_view: view index out of range");
        const fs::path dir = fs::path(root_) / view_dir_name(t);
        PSImageStack s;
        s.view_index = t;
        s.rig = rig_;
        s.mask = read_mask_png(require((dir / "mask.png").string(), t));
        if (!s.mask.same_shape(k_.width, k_.height)) throw IoError((dir / "mask.png").string(), "mask size differs");
        if (count_set(s.mask) == 0) throw IoError((dir / "mask.png").string(), "empty mask");
        for (int led : rig_.active) {
            const std::string p = require((dir / light_file_name(led, format_)).string(), t);
            Image img = format_ == ImageFormat::pfm ? read_pfm_image(p) : read_png16(p);
            if (!img.same_shape(s.mask)) throw IoError(p, "image size differs from mask");
            s.images.push_back(std::move(img));
            s.light_ids.push_back(led);
        }
        const fs::path gd = dir / "gt_depth.pfm";
        if (fs::exists(gd)) s.gt_depth = read_pfm_depth(gd.string(), DepthRole::ground_truth);
        const fs::path gn = dir / "gt_normals.pfm";
        if (fs::exists(gn)) s.gt_normals = read_pfm_normals(gn.string());
        try {
            s.validate();
        } catch (const InputError& e) {
            throw IoError(dir.string(), e.what());
        }
        return s;
    }

    std::optional<DepthMap> load_prior(int t) const {
        const fs::path p = fs::path(root_) / view_dir_name(t) / "prior_depth.pfm";
        if (!fs::exists(p)) return std::nullopt;
        return read_pfm_depth(p.string(), DepthRole::prior);
    }

private:
    std::string require(const std::string& path, int view) const {
        if (!fs::exists(path)) throw MissingAssetError(path, view);
        return path;
    }

    std::string root_;
    int view_count_ = 0;
    CameraIntrinsics k_;
    LightRig rig_;
    ImageFormat format_ = ImageFormat::pfm;
    std::optional<std::vector<PoseSE3>> gt_poses_;
};

inline Dataset read_dataset(const std::string& root) {
    const DatasetReader reader(root);
    Dataset d;
    d.k = reader.intrinsics();
    d.rig = reader.rig();
    d.gt_poses = reader.gt_poses();
    for (int t = 0; t < reader.view_count(); ++t) d.views.push_back(reader.load_view(t));
    if (reader.load_prior(0))
        for (int t = 0; t < reader.view_count(); ++t) {
            auto p = reader.load_prior(t);
            if (!p) throw MissingAssetError((fs::path(root) / view_dir_name(t) / "prior_depth.pfm").string(), t);
            d.priors.push_back(std::move(*p));
        }
    return d;
}

}  // namespace io

}  // namespace mvps
