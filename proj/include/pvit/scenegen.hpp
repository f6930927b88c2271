#pragma once

// Procedural generator of labeled toy videos: a moving shape and a walking
// stick figure over a tilted ground plane, under an orthographic camera.
// Scenes are rasterized at full resolution with exact analytic ground truth,
// which is then downsampled to the patch grid.
//
// The downstream action class is (shape kind x motion direction): 4 kinds
// (small/large square, small/large ball) times 2 horizontal directions = 8
// classes. Kind shows up in order-invariant pixel statistics (area, color,
// shading); direction is carried only by where the shape ends up, so
// recovering it takes position-selective attention. The shape's final-frame
// bounding box determines the class exactly, which is what makes the
// auxiliary annotations genuinely informative for the downstream task.
//
// Everything is a pure function of (seed, origin, task_mask), so samples
// are reproducible and can be streamed without storage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pvit/rng.hpp"
#include "pvit/serialize.hpp"
#include "pvit/tasks.hpp"
#include "pvit/tensor.hpp"

namespace pvit {

struct InvalidMask : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bitmask over Task values.
using TaskMask = std::uint8_t;

inline constexpr TaskMask kAllTasksMask = 0x1f;

inline TaskMask mask_of(std::initializer_list<Task> ts) {
    TaskMask m = 0;
    for (Task t : ts) m |= static_cast<TaskMask>(1u << static_cast<int>(t));
    return m;
}

inline TaskMask mask_of(const std::vector<Task>& ts) {
    TaskMask m = 0;
    for (Task t : ts) m |= static_cast<TaskMask>(1u << static_cast<int>(t));
    return m;
}

inline bool mask_has(TaskMask m, Task t) { return (m >> static_cast<int>(t)) & 1u; }

enum class Origin : std::uint8_t { real = 0, synthetic = 1 };

struct SceneConfig {
    long frames = 4;
    long height = 32;
    long width = 32;
    long grid_h = 4;  // dense label grid (the per-frame patch grid)
    long grid_w = 4;
    double noise = 0.30;         // stddev of per-pixel Gaussian noise
    double depth_background = 20.0;
    int action_classes = 8;      // fixed by construction: 2 kinds x 4 directions

    void validate() const {
        if (height % grid_h != 0 || width % grid_w != 0) throw std::runtime_error("scene: image dims not divisible by grid");
        if (frames < 1) throw std::runtime_error("scene: frames < 1");
        if (action_classes != 8) throw std::runtime_error("scene: generator produces exactly 8 action classes");
    }
};

// ---------------------------------------------------------------------------
// Annotations

struct AnnotationSet {
    // Dense maps at grid resolution, row-major [T, gh, gw, channels].
    std::optional<std::vector<double>> depth;   // [T,gh,gw,1], scene units, >= 0
    std::optional<std::vector<double>> normal;  // [T,gh,gw,3], unit vectors
    std::optional<std::vector<int>> segm;       // [T,gh,gw], classes {0..3}
    std::optional<std::vector<double>> boxes;   // [O,4] = [2,4], normalized corners, slot 0 shape, slot 1 figure
    std::optional<std::vector<double>> pose;    // [1,75], final-frame joints
    std::optional<int> action;                  // class in [0, C)

    bool has(Task t) const {
        switch (t) {
            case Task::depth: return depth.has_value();
            case Task::normal: return normal.has_value();
            case Task::segm: return segm.has_value();
            case Task::pose: return pose.has_value();
            case Task::boxes: return boxes.has_value();
        }
        return false;
    }
};

struct VideoSample {
    std::vector<double> pixels;  // [T,3,H,W] in [0,1]
    long frames = 0, height = 0, width = 0;
    long grid_h = 0, grid_w = 0;
    AnnotationSet annotations;
    Origin origin = Origin::synthetic;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Scene description (all geometry is analytic; labels derive from it)

struct Scene {
    // Ground plane: depth(u,v) = plane_z0 + plane_ax*(u-0.5) + plane_bv*(v-0.5), valid below the horizon.
    double plane_z0, plane_ax, plane_bv;
    double horizon_v;  // rows v < horizon_v are background
    std::array<double, 3> plane_normal;

    // Moving shape.
    int kind;        // 0 small square, 1 large square, 2 small ball, 3 large ball
    int direction;   // 0:+u, 1:-u
    double cx0, cy0;       // start center
    double move_u, move_v;  // total displacement over the clip
    double half_extent;    // square half side or ball radius
    double shape_z;        // square depth / ball base depth
    double ball_bulge = 2.0;

    bool is_ball() const { return kind >= 2; }

    // Stick figure.
    double fig_x, fig_y;       // pelvis at frame 0
    double fig_drift_u, fig_drift_v;  // per-frame root drift
    double gait_phase0, gait_omega;
    double fig_z;

    // Appearance.
    double checker_off_u, checker_off_v;
    double light_u, light_v;
    double brightness;
    std::array<double, 3> channel_gain;

    int action() const { return kind * 2 + direction; }

    void shape_center(long t, long frames, double& cx, double& cy) const {
        const double f = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
        cx = cx0 + move_u * f;
        cy = cy0 + move_v * f;
    }

    double plane_depth(double u, double v) const { return plane_z0 + plane_ax * (u - 0.5) + plane_bv * (v - 0.5); }
};

inline Scene scene_from_seed(std::uint64_t seed) {
    Rng rng(mix_seed(seed, hash_str("scene")));
    Scene s;
    s.plane_z0 = rng.uniform(3.0, 4.0);
    s.plane_ax = rng.uniform(-0.4, 0.4);
    s.plane_bv = rng.uniform(0.6, 1.2);
    s.horizon_v = rng.uniform(0.15, 0.30);
    {
        const double nx = -s.plane_ax, ny = -s.plane_bv, nz = 1.0;
        const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
        s.plane_normal = {nx / len, ny / len, nz / len};
    }

    s.kind = static_cast<int>(rng.below(4));
    s.direction = static_cast<int>(rng.below(2));
    s.cx0 = 0.5 + rng.uniform(-0.03, 0.03);
    s.cy0 = 0.52 + rng.uniform(-0.06, 0.06);
    const double base_angle = s.direction == 0 ? 0.0 : 3.14159265358979323846;
    const double angle = base_angle + rng.uniform(-0.30, 0.30);
    const double len = rng.uniform(0.24, 0.30);
    s.move_u = std::cos(angle) * len;
    s.move_v = std::sin(angle) * len;
    static constexpr double kHalfExtent[4] = {0.055, 0.095, 0.070, 0.115};
    s.half_extent = kHalfExtent[s.kind];
    s.shape_z = s.plane_z0 - 1.5;

    s.fig_x = rng.uniform(0.20, 0.80);
    s.fig_y = rng.uniform(0.50, 0.80);
    s.fig_drift_u = rng.uniform(-0.012, 0.012);
    s.fig_drift_v = rng.uniform(-0.006, 0.006);
    s.gait_phase0 = rng.uniform(0.0, 6.283185307179586);
    s.gait_omega = rng.uniform(0.25, 0.45);
    s.fig_z = s.plane_z0 - 1.05;

    s.checker_off_u = rng.uniform(0.0, 1.0);
    s.checker_off_v = rng.uniform(0.0, 1.0);
    s.light_u = rng.uniform(-0.5, 0.5);
    s.light_v = rng.uniform(-0.5, 0.5);
    s.brightness = rng.uniform(0.75, 1.25);
    s.channel_gain = {rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1)};
    return s;
}

// 25 joints, (x,y,z) each, at frame t. Layout: pelvis, spine, head, then
// left/right arms with hand tips and thumbs, then left/right legs.
inline std::array<double, 75> figure_joints(const Scene& s, long t) {
    const double rx = s.fig_x + s.fig_drift_u * static_cast<double>(t);
    const double ry = s.fig_y + s.fig_drift_v * static_cast<double>(t);
    const double phi = s.gait_phase0 + s.gait_omega * static_cast<double>(t);
    const double swing = std::sin(phi);
    const double zswing = std::cos(phi);
    const double z = s.fig_z;

    std::array<double, 75> j{};
    auto set = [&](int idx, double x, double y, double zz) {
        j[idx * 3 + 0] = x;
        j[idx * 3 + 1] = y;
        j[idx * 3 + 2] = zz;
    };
    set(0, rx, ry, z);                   // pelvis
    set(1, rx, ry - 0.07, z);            // spine mid
    set(2, rx, ry - 0.14, z);            // spine shoulder
    set(3, rx, ry - 0.17, z);            // neck
    set(4, rx, ry - 0.22, z);            // head
    for (int side = 0; side < 2; ++side) {
        const double sgn = side == 0 ? -1.0 : 1.0;
        const double arm_swing = sgn > 0 ? swing : -swing;
        const int base = side == 0 ? 5 : 11;
        set(base + 0, rx + sgn * 0.05, ry - 0.14, z);                                        // shoulder
        set(base + 1, rx + sgn * 0.055 + 0.012 * arm_swing, ry - 0.08, z + 0.02 * zswing);   // elbow
        set(base + 2, rx + sgn * 0.06 + 0.03 * arm_swing, ry - 0.02, z + 0.05 * zswing);     // wrist
        set(base + 3, rx + sgn * 0.062 + 0.034 * arm_swing, ry - 0.005, z + 0.055 * zswing); // hand
        set(base + 4, rx + sgn * 0.064 + 0.036 * arm_swing, ry + 0.007, z + 0.055 * zswing); // hand tip
        set(base + 5, rx + sgn * 0.052 + 0.030 * arm_swing, ry + 0.002, z + 0.05 * zswing);  // thumb
    }
    for (int side = 0; side < 2; ++side) {
        const double sgn = side == 0 ? -1.0 : 1.0;
        const double leg_swing = sgn > 0 ? -swing : swing;
        const int base = side == 0 ? 17 : 21;
        set(base + 0, rx + sgn * 0.03, ry, z);                                   // hip
        set(base + 1, rx + sgn * 0.03 + 0.025 * leg_swing, ry + 0.09, z);        // knee
        set(base + 2, rx + sgn * 0.03 + 0.05 * leg_swing, ry + 0.17, z);         // ankle
        set(base + 3, rx + sgn * 0.05 + 0.05 * leg_swing, ry + 0.18, z);         // foot
    }
    return j;
}

namespace detail {

// Bones as joint index pairs, used for rasterizing the figure.
inline const std::array<std::array<int, 2>, 24>& figure_bones() {
    static const std::array<std::array<int, 2>, 24> bones = {{{0, 1},   {1, 2},   {2, 3},   {3, 4},   {2, 5},   {5, 6},
                                                              {6, 7},   {7, 8},   {8, 9},   {8, 10},  {2, 11},  {11, 12},
                                                              {12, 13}, {13, 14}, {14, 15}, {14, 16}, {0, 17},  {17, 18},
                                                              {18, 19}, {19, 20}, {0, 21},  {21, 22}, {22, 23}, {23, 24}}};
    return bones;
}

inline double dist_to_segment(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double tt = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    tt = std::clamp(tt, 0.0, 1.0);
    const double qx = ax + tt * dx, qy = ay + tt * dy;
    return std::sqrt((px - qx) * (px - qx) + (py - qy) * (py - qy));
}

struct PixelHit {
    int cls;        // segmentation class
    double depth;
    std::array<double, 3> normal;
    std::array<double, 3> color;  // pre-noise albedo
};

inline constexpr double kLimbHalfWidth = 0.035;
inline constexpr double kHeadRadius = 0.05;

inline PixelHit shade_pixel(const Scene& s, const std::array<double, 75>& joints, long t, long frames, double u, double v,
                            double bg_depth) {
    PixelHit hit;

    // Shape has priority (it is the closest surface).
    double cx, cy;
    s.shape_center(t, frames, cx, cy);
    const double du = u - cx, dv = v - cy;
    bool on_shape = false;
    if (!s.is_ball()) {
        on_shape = std::fabs(du) <= s.half_extent && std::fabs(dv) <= s.half_extent;
        if (on_shape) {
            hit = {2, s.shape_z, {0.0, 0.0, 1.0}, {0.80, 0.52, 0.22}};
        }
    } else {
        const double rho2 = du * du + dv * dv;
        const double r2 = s.half_extent * s.half_extent;
        on_shape = rho2 <= r2;
        if (on_shape) {
            const double h = std::sqrt(r2 - rho2);
            const double depth = s.shape_z - s.ball_bulge * h;
            // Surface z(u,v) = shape_z - bulge*sqrt(r^2-rho^2); normal ~ (-dz/du, -dz/dv, 1).
            const double gx = s.ball_bulge * du / std::max(h, 1e-6);
            const double gy = s.ball_bulge * dv / std::max(h, 1e-6);
            double nx = -gx, ny = -gy, nz = 1.0;
            const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
            nx /= len, ny /= len, nz /= len;
            const double lu = s.light_u, lv = s.light_v;
            const double llen = std::sqrt(lu * lu + lv * lv + 1.0);
            const double lambert = std::max(0.0, (nx * lu + ny * lv + nz) / llen);
            const double shade = 0.55 + 0.45 * lambert;
            hit = {2, depth, {nx, ny, nz}, {0.25 * shade, 0.60 * shade, 0.85 * shade}};
        }
    }
    if (on_shape) return hit;

    // Figure: distance to any bone segment, plus the head disc.
    bool on_figure = false;
    {
        const double hx = joints[4 * 3], hy = joints[4 * 3 + 1];
        if ((u - hx) * (u - hx) + (v - hy) * (v - hy) <= kHeadRadius * kHeadRadius) on_figure = true;
        if (!on_figure) {
            for (const auto& b : figure_bones()) {
                const double ax = joints[b[0] * 3], ay = joints[b[0] * 3 + 1];
                const double bx = joints[b[1] * 3], by = joints[b[1] * 3 + 1];
                if (dist_to_segment(u, v, ax, ay, bx, by) <= kLimbHalfWidth) {
                    on_figure = true;
                    break;
                }
            }
        }
    }
    if (on_figure) {
        return {3, s.fig_z, {0.0, 0.0, 1.0}, {0.55, 0.35, 0.45}};
    }

    if (v < s.horizon_v) {
        return {0, bg_depth, {0.0, 0.0, 1.0}, {0.20, 0.24, 0.33}};
    }

    // Ground plane with a checker texture and mild depth shading.
    const double z = s.plane_depth(u, v);
    const int cell = (static_cast<int>(std::floor((u + s.checker_off_u) * 6.0)) +
                      static_cast<int>(std::floor((v + s.checker_off_v) * 6.0))) & 1;
    const double tex = 1.0 + (cell ? 0.12 : -0.12);
    const double shade = 1.0 - 0.03 * (z - s.plane_z0);
    return {1, z, s.plane_normal, {0.36 * tex * shade, 0.32 * tex * shade, 0.26 * tex * shade}};
}

}  // namespace detail

// Full-resolution ground-truth maps for one frame (used by tests and by the
// downsampling stage).
struct FrameMaps {
    std::vector<double> depth;   // [H,W]
    std::vector<double> normal;  // [H,W,3]
    std::vector<int> segm;       // [H,W]
    std::vector<double> color;   // [3,H,W], pre-noise
};

inline FrameMaps render_frame(const Scene& scene, const SceneConfig& cfg, long t) {
    const long H = cfg.height, W = cfg.width;
    FrameMaps m;
    m.depth.resize(H * W);
    m.normal.resize(H * W * 3);
    m.segm.resize(H * W);
    m.color.resize(3 * H * W);
    const auto joints = figure_joints(scene, t);
    for (long py = 0; py < H; ++py) {
        const double v = (static_cast<double>(py) + 0.5) / static_cast<double>(H);
        for (long px = 0; px < W; ++px) {
            const double u = (static_cast<double>(px) + 0.5) / static_cast<double>(W);
            const auto hit = detail::shade_pixel(scene, joints, t, cfg.frames, u, v, cfg.depth_background);
            const long i = py * W + px;
            m.depth[i] = hit.depth;
            for (int c = 0; c < 3; ++c) m.normal[i * 3 + c] = hit.normal[c];
            m.segm[i] = hit.cls;
            for (int c = 0; c < 3; ++c) m.color[c * H * W + i] = hit.color[c];
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Ground-truth downsampling

enum class PoolKind { average, mode };

// Average-pools a [H,W,C] map to [gh,gw,C].
inline std::vector<double> downsample_average(const std::vector<double>& full, long H, long W, long C, long gh, long gw) {
    if (H % gh != 0 || W % gw != 0 || static_cast<long>(full.size()) != H * W * C) {
        throw ShapeMismatch("downsample: dimensions not divisible");
    }
    const long bh = H / gh, bw = W / gw;
    std::vector<double> out(gh * gw * C, 0.0);
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            const long cell = (y / bh) * gw + (x / bw);
            for (long c = 0; c < C; ++c) out[cell * C + c] += full[(y * W + x) * C + c];
        }
    }
    const double inv = 1.0 / static_cast<double>(bh * bw);
    for (double& v : out) v *= inv;
    return out;
}

// Majority-pools an integer class map; ties break to the lowest class index.
inline std::vector<int> downsample_mode(const std::vector<int>& full, long H, long W, long gh, long gw, int num_classes) {
    if (H % gh != 0 || W % gw != 0 || static_cast<long>(full.size()) != H * W) {
        throw ShapeMismatch("downsample: dimensions not divisible");
    }
    const long bh = H / gh, bw = W / gw;
    std::vector<int> out(gh * gw, 0);
    std::vector<int> counts(num_classes);
    for (long cy = 0; cy < gh; ++cy) {
        for (long cx = 0; cx < gw; ++cx) {
            std::fill(counts.begin(), counts.end(), 0);
            for (long y = cy * bh; y < (cy + 1) * bh; ++y)
                for (long x = cx * bw; x < (cx + 1) * bw; ++x) ++counts[full[y * W + x]];
            int best = 0;
            for (int c = 1; c < num_classes; ++c) {
                if (counts[c] > counts[best]) best = c;  // strict: ties keep the lower index
            }
            out[cy * gw + cx] = best;
        }
    }
    return out;
}

// Re-normalizes averaged normals to unit length; degenerate cells become +z.
inline void renormalize_normals(std::vector<double>& normals) {
    for (size_t i = 0; i + 3 <= normals.size(); i += 3) {
        const double len = std::sqrt(normals[i] * normals[i] + normals[i + 1] * normals[i + 1] + normals[i + 2] * normals[i + 2]);
        if (len < 1e-12) {
            normals[i] = 0.0;
            normals[i + 1] = 0.0;
            normals[i + 2] = 1.0;
        } else {
            normals[i] /= len;
            normals[i + 1] /= len;
            normals[i + 2] /= len;
        }
    }
}

// Final-frame bounding boxes in normalized (x1,y1,x2,y2) corners. Slot 0 is
// the shape, slot 1 the figure.
inline std::array<double, 4> shape_box(const Scene& scene, long frames) {
    double cx, cy;
    scene.shape_center(frames - 1, frames, cx, cy);
    const double e = scene.half_extent;
    return {std::clamp(cx - e, 0.0, 1.0), std::clamp(cy - e, 0.0, 1.0), std::clamp(cx + e, 0.0, 1.0),
            std::clamp(cy + e, 0.0, 1.0)};
}

inline std::array<double, 4> figure_box(const Scene& scene, long frames) {
    const auto joints = figure_joints(scene, frames - 1);
    double x1 = 1.0, y1 = 1.0, x2 = 0.0, y2 = 0.0;
    for (int j = 0; j < 25; ++j) {
        x1 = std::min(x1, joints[j * 3]);
        x2 = std::max(x2, joints[j * 3]);
        y1 = std::min(y1, joints[j * 3 + 1]);
        y2 = std::max(y2, joints[j * 3 + 1]);
    }
    return {std::clamp(x1 - 0.02, 0.0, 1.0), std::clamp(y1 - 0.02 - detail::kHeadRadius, 0.0, 1.0),
            std::clamp(x2 + 0.02, 0.0, 1.0), std::clamp(y2 + 0.02, 0.0, 1.0)};
}

// ---------------------------------------------------------------------------
// Sample generation

inline VideoSample generate_sample(const SceneConfig& cfg, std::uint64_t seed, Origin origin, TaskMask task_mask) {
    cfg.validate();
    if (origin == Origin::synthetic && task_mask == 0) {
        throw InvalidMask("generate_sample: synthetic sample needs a nonempty task mask");
    }
    const Scene scene = scene_from_seed(seed);
    const long T = cfg.frames, H = cfg.height, W = cfg.width, gh = cfg.grid_h, gw = cfg.grid_w;

    VideoSample sample;
    sample.frames = T;
    sample.height = H;
    sample.width = W;
    sample.grid_h = gh;
    sample.grid_w = gw;
    sample.origin = origin;
    sample.seed = seed;
    sample.pixels.resize(T * 3 * H * W);

    const bool want_depth = origin == Origin::synthetic && mask_has(task_mask, Task::depth);
    const bool want_normal = origin == Origin::synthetic && mask_has(task_mask, Task::normal);
    const bool want_segm = origin == Origin::synthetic && mask_has(task_mask, Task::segm);
    const bool want_boxes = origin == Origin::synthetic && mask_has(task_mask, Task::boxes);
    const bool want_pose = origin == Origin::synthetic && mask_has(task_mask, Task::pose);

    if (want_depth) sample.annotations.depth.emplace();
    if (want_normal) sample.annotations.normal.emplace();
    if (want_segm) sample.annotations.segm.emplace();

    Rng noise_rng(mix_seed(seed, hash_str("pixel-noise")));
    for (long t = 0; t < T; ++t) {
        FrameMaps maps = render_frame(scene, cfg, t);
        // Pixels: albedo * per-sample appearance jitter + Gaussian noise.
        for (long c = 0; c < 3; ++c) {
            const double gain = scene.brightness * scene.channel_gain[c];
            for (long i = 0; i < H * W; ++i) {
                double value = maps.color[c * H * W + i] * gain + cfg.noise * noise_rng.normal();
                sample.pixels[(t * 3 + c) * H * W + i] = std::clamp(value, 0.0, 1.0);
            }
        }
        if (want_depth) {
            auto d = downsample_average(maps.depth, H, W, 1, gh, gw);
            sample.annotations.depth->insert(sample.annotations.depth->end(), d.begin(), d.end());
        }
        if (want_normal) {
            auto n = downsample_average(maps.normal, H, W, 3, gh, gw);
            renormalize_normals(n);
            sample.annotations.normal->insert(sample.annotations.normal->end(), n.begin(), n.end());
        }
        if (want_segm) {
            auto s = downsample_mode(maps.segm, H, W, gh, gw, kSegmClasses);
            sample.annotations.segm->insert(sample.annotations.segm->end(), s.begin(), s.end());
        }
    }

    if (want_boxes) {
        const auto sb = shape_box(scene, T);
        const auto fb = figure_box(scene, T);
        std::vector<double> boxes(kBoxSlots * 4);
        std::copy(sb.begin(), sb.end(), boxes.begin());
        std::copy(fb.begin(), fb.end(), boxes.begin() + 4);
        sample.annotations.boxes = std::move(boxes);
    }

    if (want_pose) {
        const auto joints = figure_joints(scene, T - 1);
        sample.annotations.pose = std::vector<double>(joints.begin(), joints.end());
    }

    if (origin == Origin::real) {
        sample.annotations.action = scene.action();
    }
    return sample;
}

// ---------------------------------------------------------------------------
// Annotation shuffling (the "useless labels" ablation)

// For each task independently, permutes that task's annotations across the
// samples that carry it. Pixels and action labels stay untouched.
inline void shuffle_annotations(std::vector<VideoSample>& dataset, std::uint64_t seed) {
    for (Task t : kAllTasks) {
        std::vector<size_t> carriers;
        for (size_t i = 0; i < dataset.size(); ++i) {
            if (dataset[i].annotations.has(t)) carriers.push_back(i);
        }
        if (carriers.size() < 2) continue;
        Rng rng(mix_seed(seed, hash_str(std::string("shuffle-") + task_name(t))));
        // Fisher-Yates over the carrier list.
        std::vector<size_t> perm = carriers;
        for (size_t i = perm.size() - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(rng.below(i + 1));
            std::swap(perm[i], perm[j]);
        }
        auto reassign = [&](auto member) {
            std::vector<std::decay_t<decltype(dataset[0].annotations.*member)>> pool;
            pool.reserve(carriers.size());
            for (size_t idx : carriers) pool.push_back(dataset[idx].annotations.*member);
            for (size_t k = 0; k < carriers.size(); ++k) dataset[perm[k]].annotations.*member = pool[k];
        };
        switch (t) {
            case Task::depth: reassign(&AnnotationSet::depth); break;
            case Task::normal: reassign(&AnnotationSet::normal); break;
            case Task::segm: reassign(&AnnotationSet::segm); break;
            case Task::pose: reassign(&AnnotationSet::pose); break;
            case Task::boxes: reassign(&AnnotationSet::boxes); break;
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset files

inline constexpr std::uint32_t kDatasetMagic = 0x53445650;  // "PVDS"
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_sample(std::ostream& os, const VideoSample& s) {
    std::ostringstream payload;
    io::write_u64(payload, s.seed);
    io::write_u8(payload, static_cast<std::uint8_t>(s.origin));
    io::write_u32(payload, static_cast<std::uint32_t>(s.frames));
    io::write_u32(payload, static_cast<std::uint32_t>(s.height));
    io::write_u32(payload, static_cast<std::uint32_t>(s.width));
    io::write_u32(payload, static_cast<std::uint32_t>(s.grid_h));
    io::write_u32(payload, static_cast<std::uint32_t>(s.grid_w));
    io::write_f64_vec(payload, s.pixels);
    std::uint8_t present = 0;
    for (Task t : kAllTasks) {
        if (s.annotations.has(t)) present |= static_cast<std::uint8_t>(1u << static_cast<int>(t));
    }
    if (s.annotations.action.has_value()) present |= 0x20;
    io::write_u8(payload, present);
    if (s.annotations.depth) io::write_f64_vec(payload, *s.annotations.depth);
    if (s.annotations.normal) io::write_f64_vec(payload, *s.annotations.normal);
    if (s.annotations.segm) io::write_i32_vec(payload, *s.annotations.segm);
    if (s.annotations.pose) io::write_f64_vec(payload, *s.annotations.pose);
    if (s.annotations.boxes) io::write_f64_vec(payload, *s.annotations.boxes);
    if (s.annotations.action) io::write_u32(payload, static_cast<std::uint32_t>(*s.annotations.action));
    const std::string bytes = payload.str();
    io::write_u64(os, bytes.size());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline VideoSample read_sample(std::istream& is) {
    const std::uint64_t len = io::read_u64(is);
    std::string bytes(len, '\0');
    is.read(bytes.data(), static_cast<std::streamsize>(len));
    if (!is) throw IoError("dataset: truncated sample");
    std::istringstream payload(bytes);
    VideoSample s;
    s.seed = io::read_u64(payload);
    s.origin = static_cast<Origin>(io::read_u8(payload));
    s.frames = io::read_u32(payload);
    s.height = io::read_u32(payload);
    s.width = io::read_u32(payload);
    s.grid_h = io::read_u32(payload);
    s.grid_w = io::read_u32(payload);
    s.pixels = io::read_f64_vec(payload);
    const std::uint8_t present = io::read_u8(payload);
    if (present & (1u << static_cast<int>(Task::depth))) s.annotations.depth = io::read_f64_vec(payload);
    if (present & (1u << static_cast<int>(Task::normal))) s.annotations.normal = io::read_f64_vec(payload);
    if (present & (1u << static_cast<int>(Task::segm))) s.annotations.segm = io::read_i32_vec(payload);
    if (present & (1u << static_cast<int>(Task::pose))) s.annotations.pose = io::read_f64_vec(payload);
    if (present & (1u << static_cast<int>(Task::boxes))) s.annotations.boxes = io::read_f64_vec(payload);
    if (present & 0x20) s.annotations.action = static_cast<int>(io::read_u32(payload));
    return s;
}

struct DatasetHeader {
    std::uint32_t version = kDatasetVersion;
    std::uint64_t config_digest = 0;
    std::string rng_id = kRngId;
    std::uint64_t count = 0;
};

inline void write_dataset(const std::string& path, const std::vector<VideoSample>& samples, std::uint64_t config_digest) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    io::write_u32(os, kDatasetMagic);
    io::write_u32(os, kDatasetVersion);
    io::write_u64(os, config_digest);
    io::write_str(os, kRngId);
    io::write_u64(os, samples.size());
    for (const auto& s : samples) write_sample(os, s);
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<VideoSample> read_dataset(const std::string& path, DatasetHeader* header_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    if (io::read_u32(is) != kDatasetMagic) throw IoError("bad dataset magic: " + path);
    DatasetHeader h;
    h.version = io::read_u32(is);
    if (h.version != kDatasetVersion) throw IoError("unsupported dataset version");
    h.config_digest = io::read_u64(is);
    h.rng_id = io::read_str(is);
    h.count = io::read_u64(is);
    std::vector<VideoSample> samples;
    samples.reserve(h.count);
    for (std::uint64_t i = 0; i < h.count; ++i) samples.push_back(read_sample(is));
    if (header_out) *header_out = h;
    return samples;
}

}  // namespace pvit
