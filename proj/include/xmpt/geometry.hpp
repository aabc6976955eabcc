#pragma once

// Pinhole cameras, rigid transforms and occlusion-aware pixel-point matching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmpt {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) { return (1.0 / norm(a)) * a; }

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// 4×4 homogeneous transform, row-major. The bottom row is always 0 0 0 1.
struct Transform {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Transform identity() { return {}; }

  static Transform from_rotation_translation(const std::array<double, 9>& r, Vec3 t) {
    Transform out;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) out.m[i * 4 + j] = r[i * 3 + j];
    }
    out.m[3] = t.x;
    out.m[7] = t.y;
    out.m[11] = t.z;
    return out;
  }

  static Transform rotation_z(double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return from_rotation_translation({c, -s, 0, s, c, 0, 0, 0, 1}, {});
  }

  double operator()(int r, int c) const { return m[r * 4 + c]; }

  Vec3 apply(Vec3 p) const {
    return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3], m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
            m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
  }

  Vec3 rotate(Vec3 p) const {
    return {m[0] * p.x + m[1] * p.y + m[2] * p.z, m[4] * p.x + m[5] * p.y + m[6] * p.z,
            m[8] * p.x + m[9] * p.y + m[10] * p.z};
  }

  Vec3 translation() const { return {m[3], m[7], m[11]}; }

  /// this ∘ other (other applied first).
  Transform compose(const Transform& other) const {
    Transform out;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += m[i * 4 + k] * other.m[k * 4 + j];
        out.m[i * 4 + j] = s;
      }
    return out;
  }

  /// Inverse of a rigid transform: [Rᵀ | -Rᵀt].
  Transform rigid_inverse() const {
    std::array<double, 9> rt{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) rt[i * 3 + j] = m[j * 4 + i];
    const Vec3 t = translation();
    const Vec3 ti{-(rt[0] * t.x + rt[1] * t.y + rt[2] * t.z), -(rt[3] * t.x + rt[4] * t.y + rt[5] * t.z),
                  -(rt[6] * t.x + rt[7] * t.y + rt[8] * t.z)};
    return from_rotation_translation(rt, ti);
  }

  /// Rotation block orthonormal with determinant +1, bottom row 0 0 0 1.
  bool is_rigid(double tol = 1e-9) const {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += m[i * 4 + k] * m[j * 4 + k];
        if (std::abs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
      }
    const double det = m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
                       m[2] * (m[4] * m[9] - m[5] * m[8]);
    if (std::abs(det - 1.0) > tol) return false;
    return m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0;
  }
};

/// Camera-from-world transform for a camera at `eye` looking at `target`.
/// Camera axes: +x right, +y down in the image, +z forward. `up` is world up.
inline Transform look_at(Vec3 eye, Vec3 target, Vec3 up = {0, 0, 1}) {
  const Vec3 fwd = normalized(target - eye);
  Vec3 right = cross(fwd, up);
  if (norm(right) < 1e-9) throw GeometryError("look_at: view direction parallel to up vector");
  right = normalized(right);
  const Vec3 down = cross(fwd, right);
  // Rows of R are the camera axes expressed in world coordinates.
  const std::array<double, 9> r{right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
  const Vec3 t{-dot(right, eye), -dot(down, eye), -dot(fwd, eye)};
  return Transform::from_rotation_translation(r, t);
}

inline constexpr double kZNear = 1e-4;

struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::size_t width = 1, height = 1;
  Transform pose;  // world -> camera

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw GeometryError("camera: focal lengths must be positive");
    if (width == 0 || height == 0) throw GeometryError("camera: empty image extents");
    if (!(cx >= 0.0 && cx < static_cast<double>(width)) || !(cy >= 0.0 && cy < static_cast<double>(height)))
      throw GeometryError("camera: principal point outside the image");
    if (!pose.is_rigid()) throw GeometryError("camera: pose is not a rigid transform");
  }

  static CameraModel with_fov(std::size_t width, std::size_t height, double hfov_radians, Transform pose) {
    CameraModel cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = static_cast<double>(width) / (2.0 * std::tan(hfov_radians / 2.0));
    cam.cx = static_cast<double>(width) / 2.0;
    cam.cy = static_cast<double>(height) / 2.0;
    cam.pose = pose;
    return cam;
  }

  /// World-space ray direction through continuous pixel coordinate (u, v).
  Vec3 ray_direction(double u, double v) const {
    const Vec3 dir_cam{(u - cx) / fx, (v - cy) / fy, 1.0};
    return pose.rigid_inverse().rotate(dir_cam);
  }

  Vec3 camera_center() const { return pose.rigid_inverse().translation(); }

  /// World point at continuous pixel (u, v) with camera-frame depth z.
  Vec3 back_project(double u, double v, double z) const {
    const Vec3 p_cam{(u - cx) / fx * z, (v - cy) / fy * z, z};
    return pose.rigid_inverse().apply(p_cam);
  }
};

struct Projection {
  double u = 0.0, v = 0.0, depth = 0.0;
};

/// Perspective projection; absent when the point is not in front of the camera.
inline std::optional<Projection> project(Vec3 world, const CameraModel& cam) {
  const Vec3 p = cam.pose.apply(world);
  if (p.z <= kZNear) return std::nullopt;
  return Projection{cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z};
}

struct PixelCoord {
  std::size_t u = 0, v = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

/// Pixel (u, v) covers [u, u+1) × [v, v+1).
inline std::optional<PixelCoord> pixel_of(const Projection& p, const CameraModel& cam) {
  const double fu = std::floor(p.u), fv = std::floor(p.v);
  if (fu < 0.0 || fv < 0.0 || fu >= static_cast<double>(cam.width) || fv >= static_cast<double>(cam.height))
    return std::nullopt;
  return PixelCoord{static_cast<std::size_t>(fu), static_cast<std::size_t>(fv)};
}

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct PointCloud {
  std::vector<Vec3> xyz;
  std::vector<Rgb> rgb;
  std::vector<std::uint16_t> label;

  std::size_t size() const { return xyz.size(); }
  bool empty() const { return xyz.empty(); }
};

struct DepthMap {
  std::size_t width = 0, height = 0;
  std::vector<double> depth;  // row-major, 0 where nothing was observed

  double at(std::size_t u, std::size_t v) const { return depth[v * width + u]; }
};

struct Correspondence {
  std::size_t point = 0;
  PixelCoord pixel;
  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

struct CorrespondenceSet {
  std::vector<Correspondence> pairs;  // ascending point index
  CameraModel camera;
};

inline constexpr double kDefaultDepthTolerance = 0.05;

/// Matches points to the pixels they project into. Without a depth map the
/// nearest point per pixel wins (z-buffer); with one, a point must agree
/// with the observed depth to within tol·depth, and the nearest agreeing
/// point per pixel wins. Ties go to the lower point index.
inline CorrespondenceSet build_correspondences(const PointCloud& cloud, const CameraModel& cam,
                                               const DepthMap* depth = nullptr,
                                               double tol = kDefaultDepthTolerance) {
  if (cloud.empty()) throw GeometryError("build_correspondences: empty point cloud");
  if (depth && (depth->width != cam.width || depth->height != cam.height))
    throw GeometryError("build_correspondences: depth map " + std::to_string(depth->width) + "x" +
                        std::to_string(depth->height) + " does not match camera " + std::to_string(cam.width) +
                        "x" + std::to_string(cam.height));
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> owner(cam.width * cam.height, kNone);
  std::vector<double> zbuf(cam.width * cam.height, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto proj = project(cloud.xyz[i], cam);
    if (!proj) continue;
    const auto px = pixel_of(*proj, cam);
    if (!px) continue;
    const std::size_t slot = px->v * cam.width + px->u;
    if (depth) {
      const double observed = depth->at(px->u, px->v);
      if (!(observed > 0.0) || std::abs(proj->depth - observed) > tol * observed) continue;
    }
    if (proj->depth < zbuf[slot]) {
      zbuf[slot] = proj->depth;
      owner[slot] = i;
    }
  }
  CorrespondenceSet out;
  out.camera = cam;
  for (std::size_t slot = 0; slot < owner.size(); ++slot)
    if (owner[slot] != kNone) out.pairs.push_back({owner[slot], {slot % cam.width, slot / cam.width}});
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const Correspondence& a, const Correspondence& b) { return a.point < b.point; });
  return out;
}

/// Rigidly transformed copy; colours and labels are untouched.
inline PointCloud transform_points(const PointCloud& cloud, const Transform& rigid) {
  if (!rigid.is_rigid()) throw GeometryError("transform_points: transform is not rigid");
  PointCloud out = cloud;
  for (auto& p : out.xyz) p = rigid.apply(p);
  return out;
}

}  // namespace xmpt
