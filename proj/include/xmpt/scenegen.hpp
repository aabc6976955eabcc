#pragma once

// Synthetic RGB-D scenes: a room (floor and four walls, open top) holding
// coloured boxes and spheres, seen by one pinhole camera. The point cloud is
// the back-projection of every pixel that hit geometry.
//
// Files per scene:
//   image.ppm   binary PPM, P6, maxval 255
//   depth.bin   u32 width, u32 height, f32 depth[height][width]   (LE)
//   cloud.bin   u32 count, then per point f32 xyz[3], u8 rgb[3], u16 label   (LE)
//   camera.txt  key=value lines: fx fy cx cy width height pose (16 values, row-major)
//
// A manifest lists scenes, one per line, with paths relative to the manifest.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xmpt/geometry.hpp"
#include "xmpt/image.hpp"
#include "xmpt/rng.hpp"

namespace xmpt {

enum SceneClass : std::uint16_t { kFloor = 0, kWall = 1, kBox = 2, kSphere = 3 };
inline const std::vector<std::string> kDefaultClassNames{"floor", "wall", "box", "sphere"};

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneConfig {
  std::size_t width = 64, height = 64;
  Vec3 room{4.0, 4.0, 2.5};
  std::size_t min_boxes = 1, max_boxes = 3;
  std::size_t min_spheres = 1, max_spheres = 3;
  double hfov_degrees = 70.0;
  double min_coverage = 0.25;
  std::size_t max_attempts = 100;
  double depth_noise = 0.0;  // relative Gaussian noise on depth; reserved, off by default
};

struct SceneSample {
  std::string scene_id;
  Image image;
  DepthMap depth;
  CameraModel camera;
  PointCloud cloud;
};

namespace detail {

struct Box {
  Vec3 lo, hi;
  Rgb color;
};

struct Sphere {
  Vec3 center;
  double radius;
  Rgb color;
};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal;
  Rgb color;
  std::uint16_t label = 0;
};

struct Room {
  Vec3 extent;
  Rgb floor_a, floor_b, wall;
  std::vector<Box> boxes;
  std::vector<Sphere> spheres;
  Vec3 light;
};

// GCC 11 at -O3 folds a plain double→float→double round trip here.
inline double round_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline Rgb random_color(Rng& rng) { return {uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95)}; }

// Ray origin o, direction d; parametric t > eps.
inline void hit_plane(Vec3 o, Vec3 d, int axis, double at, Vec3 normal, const Room& room, std::uint16_t label,
                      Rgb color, Hit& best) {
  const double oc[3] = {o.x, o.y, o.z}, dc[3] = {d.x, d.y, d.z};
  if (std::abs(dc[axis]) < 1e-12) return;
  const double t = (at - oc[axis]) / dc[axis];
  if (!(t > 1e-9) || t >= best.t) return;
  const Vec3 p = o + t * d;
  const double eps = 1e-9;
  if (p.x < -eps || p.x > room.extent.x + eps || p.y < -eps || p.y > room.extent.y + eps || p.z < -eps ||
      p.z > room.extent.z + eps)
    return;
  if (dot(normal, d) >= 0.0) return;
  best = {t, normal, color, label};
  if (label == kFloor) {
    const bool odd = (static_cast<long>(std::floor(p.x / 0.5)) + static_cast<long>(std::floor(p.y / 0.5))) % 2 != 0;
    best.color = odd ? room.floor_b : room.floor_a;
  }
}

inline void hit_box(Vec3 o, Vec3 d, const Box& b, Hit& best) {
  const double oc[3] = {o.x, o.y, o.z}, dc[3] = {d.x, d.y, d.z};
  const double lo[3] = {b.lo.x, b.lo.y, b.lo.z}, hi[3] = {b.hi.x, b.hi.y, b.hi.z};
  double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dc[a]) < 1e-15) {
      if (oc[a] < lo[a] || oc[a] > hi[a]) return;
      continue;
    }
    double t0 = (lo[a] - oc[a]) / dc[a], t1 = (hi[a] - oc[a]) / dc[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
      sign = s;
    }
    tmax = std::min(tmax, t1);
  }
  if (axis < 0 || tmin > tmax || !(tmin > 1e-9) || tmin >= best.t) return;
  Vec3 n{};
  (axis == 0 ? n.x : axis == 1 ? n.y : n.z) = sign;
  best = {tmin, n, b.color, kBox};
}

inline void hit_sphere(Vec3 o, Vec3 d, const Sphere& s, Hit& best) {
  const Vec3 oc = o - s.center;
  const double a = dot(d, d), b = 2.0 * dot(oc, d), c = dot(oc, oc) - s.radius * s.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return;
  const double t = (-b - std::sqrt(disc)) / (2.0 * a);
  if (!(t > 1e-9) || t >= best.t) return;
  best = {t, (1.0 / s.radius) * (o + t * d - s.center), s.color, kSphere};
}

inline Hit trace(const Room& room, Vec3 o, Vec3 d) {
  Hit best;
  const Vec3 e = room.extent;
  hit_plane(o, d, 2, 0.0, {0, 0, 1}, room, kFloor, room.floor_a, best);
  hit_plane(o, d, 0, 0.0, {1, 0, 0}, room, kWall, room.wall, best);
  hit_plane(o, d, 0, e.x, {-1, 0, 0}, room, kWall, room.wall, best);
  hit_plane(o, d, 1, 0.0, {0, 1, 0}, room, kWall, room.wall, best);
  hit_plane(o, d, 1, e.y, {0, -1, 0}, room, kWall, room.wall, best);
  for (const auto& b : room.boxes) hit_box(o, d, b, best);
  for (const auto& s : room.spheres) hit_sphere(o, d, s, best);
  return best;
}

inline bool inside_any(const Room& room, Vec3 p, double margin) {
  for (const auto& b : room.boxes)
    if (p.x > b.lo.x - margin && p.x < b.hi.x + margin && p.y > b.lo.y - margin && p.y < b.hi.y + margin &&
        p.z > b.lo.z - margin && p.z < b.hi.z + margin)
      return true;
  for (const auto& s : room.spheres)
    if (norm(p - s.center) < s.radius + margin) return true;
  return false;
}

inline Room random_room(const SceneConfig& cfg, Rng& rng) {
  Room room;
  room.extent = cfg.room;
  room.floor_a = random_color(rng);
  room.floor_b = {0.75 * room.floor_a.r, 0.75 * room.floor_a.g, 0.75 * room.floor_a.b};
  room.wall = random_color(rng);
  const Vec3 e = cfg.room;
  const std::size_t nb = cfg.min_boxes + uniform_index(rng, cfg.max_boxes - cfg.min_boxes + 1);
  const std::size_t ns = cfg.min_spheres + uniform_index(rng, cfg.max_spheres - cfg.min_spheres + 1);
  for (std::size_t i = 0; i < nb; ++i) {
    const double sx = uniform(rng, 0.3, 1.0), sy = uniform(rng, 0.3, 1.0), sz = uniform(rng, 0.3, 1.2);
    const double x = uniform(rng, 0.2, e.x - 0.2 - sx), y = uniform(rng, 0.2, e.y - 0.2 - sy);
    room.boxes.push_back({{x, y, 0.0}, {x + sx, y + sy, sz}, random_color(rng)});
  }
  for (std::size_t i = 0; i < ns; ++i) {
    const double r = uniform(rng, 0.2, 0.5);
    const double x = uniform(rng, 0.3 + r, e.x - 0.3 - r), y = uniform(rng, 0.3 + r, e.y - 0.3 - r);
    const double z = r + (bernoulli(rng, 0.3) ? uniform(rng, 0.0, 0.8) : 0.0);
    room.spheres.push_back({{x, y, z}, r, random_color(rng)});
  }
  room.light = normalized({uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), 1.0});
  return room;
}

}  // namespace detail

/// Deterministic scene for `seed`. Resamples the camera (and layout) until
/// at least `min_coverage` of the pixels hit geometry.
inline SceneSample generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  if (cfg.width == 0 || cfg.height == 0) throw SceneError("generate_scene: empty image extents");
  Rng rng = derive_rng(seed, 0x5CE4E);
  const Vec3 e = cfg.room;
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const detail::Room room = detail::random_room(cfg, rng);
    const Vec3 eye{uniform(rng, 0.3, e.x - 0.3), uniform(rng, 0.3, e.y - 0.3), uniform(rng, 1.2, 2.0)};
    if (detail::inside_any(room, eye, 0.3)) continue;
    const auto& b = room.boxes[uniform_index(rng, room.boxes.size())];
    const auto& s = room.spheres[uniform_index(rng, room.spheres.size())];
    const Vec3 target = 0.5 * (0.5 * (b.lo + b.hi) + s.center);
    if (norm(target - eye) < 1.0) continue;
    const Vec3 dir = target - eye;
    if (std::abs(dir.x) + std::abs(dir.y) < 1e-6) continue;

    const double hfov = cfg.hfov_degrees * std::numbers::pi / 180.0;
    SceneSample out;
    out.camera = CameraModel::with_fov(cfg.width, cfg.height, hfov, look_at(eye, target));
    out.image = Image(cfg.height, cfg.width);
    out.depth = {cfg.width, cfg.height, std::vector<double>(cfg.width * cfg.height, 0.0)};
    const Transform cam_to_world = out.camera.pose.rigid_inverse();
    const Vec3 origin = cam_to_world.translation();
    std::vector<std::uint16_t> labels(cfg.width * cfg.height, 0);
    std::size_t covered = 0;
    for (std::size_t v = 0; v < cfg.height; ++v)
      for (std::size_t u = 0; u < cfg.width; ++u) {
        // Unnormalised direction with unit camera-z, so t is the depth.
        const Vec3 dc{(u + 0.5 - out.camera.cx) / out.camera.fx, (v + 0.5 - out.camera.cy) / out.camera.fy, 1.0};
        const Vec3 d = cam_to_world.rotate(dc);
        const detail::Hit hit = detail::trace(room, origin, d);
        if (!std::isfinite(hit.t)) continue;
        double z = hit.t;
        if (cfg.depth_noise > 0.0) z *= 1.0 + cfg.depth_noise * normal(rng);
        out.depth.depth[v * cfg.width + u] = detail::round_f32(z);
        const double shade = 0.35 + 0.65 * std::max(0.0, dot(hit.normal, room.light));
        out.image.at(v, u, 0) = detail::quantize8(hit.color.r * shade);
        out.image.at(v, u, 1) = detail::quantize8(hit.color.g * shade);
        out.image.at(v, u, 2) = detail::quantize8(hit.color.b * shade);
        labels[v * cfg.width + u] = hit.label;
        ++covered;
      }
    if (static_cast<double>(covered) < cfg.min_coverage * static_cast<double>(cfg.width * cfg.height)) continue;

    for (std::size_t v = 0; v < cfg.height; ++v)
      for (std::size_t u = 0; u < cfg.width; ++u) {
        const double z = out.depth.at(u, v);
        if (!(z > 0.0)) continue;
        const Vec3 p = out.camera.back_project(u + 0.5, v + 0.5, z);
        out.cloud.xyz.push_back({detail::round_f32(p.x),
                                 detail::round_f32(p.y),
                                 detail::round_f32(p.z)});
        out.cloud.rgb.push_back({out.image.at(v, u, 0), out.image.at(v, u, 1), out.image.at(v, u, 2)});
        out.cloud.label.push_back(labels[v * cfg.width + u]);
      }
    char id[32];
    std::snprintf(id, sizeof id, "scene_%06llu", static_cast<unsigned long long>(seed));
    out.scene_id = id;
    return out;
  }
  throw SceneError("generate_scene: seed " + std::to_string(seed) + " gave no camera pose with " +
                   std::to_string(cfg.min_coverage * 100.0) + "% coverage in " + std::to_string(cfg.max_attempts) +
                   " attempts");
}

// ---------------------------------------------------------------------------
// File IO

namespace detail {

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SceneError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void spit(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SceneError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw SceneError("write failed for '" + path.string() + "'");
}

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xFF));
  s.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::string& s, double v) { put_u32(s, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline std::uint32_t get_u32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}
inline std::uint16_t get_u16(std::string_view s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) | (static_cast<unsigned char>(s[at + 1]) << 8));
}
inline double get_f32(std::string_view s, std::size_t at) { return std::bit_cast<float>(get_u32(s, at)); }
inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void require_size(std::string_view bytes, std::size_t expected, const std::string& what) {
  if (bytes.size() != expected)
    throw SceneError(what + ": expected " + std::to_string(expected) + " bytes, found " +
                     std::to_string(bytes.size()));
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string encode_ppm(const Image& img) {
  std::string s = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  s.reserve(s.size() + img.rgb.size());
  for (double v : img.rgb) s.push_back(static_cast<char>(detail::to_u8(v)));
  return s;
}

inline Image decode_ppm(std::string_view bytes, const std::string& what = "ppm") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw SceneError(what + ": " + msg + " at byte " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos == start) fail("expected a number");
    return std::stoul(std::string(bytes.substr(start, pos - start)));
  };
  if (bytes.substr(0, 2) != "P6") fail("bad magic (expected P6)");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) fail("missing header terminator");
  ++pos;
  if (w == 0 || h == 0) fail("empty image");
  if (bytes.size() - pos != w * h * 3)
    throw SceneError(what + ": expected " + std::to_string(w * h * 3) + " pixel bytes after header at byte " +
                     std::to_string(pos) + ", found " + std::to_string(bytes.size() - pos));
  Image img(h, w);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

inline std::string encode_depth(const DepthMap& d) {
  std::string s;
  detail::put_u32(s, static_cast<std::uint32_t>(d.width));
  detail::put_u32(s, static_cast<std::uint32_t>(d.height));
  for (double v : d.depth) detail::put_f32(s, v);
  return s;
}

inline DepthMap decode_depth(std::string_view bytes, const std::string& what = "depth") {
  if (bytes.size() < 8) detail::require_size(bytes, 8, what + " header");
  DepthMap d;
  d.width = detail::get_u32(bytes, 0);
  d.height = detail::get_u32(bytes, 4);
  detail::require_size(bytes, 8 + 4 * d.width * d.height, what);
  d.depth.resize(d.width * d.height);
  for (std::size_t i = 0; i < d.depth.size(); ++i) d.depth[i] = detail::get_f32(bytes, 8 + 4 * i);
  return d;
}

inline constexpr std::size_t kCloudRecordBytes = 3 * 4 + 3 + 2;

inline std::string encode_cloud(const PointCloud& c) {
  std::string s;
  detail::put_u32(s, static_cast<std::uint32_t>(c.size()));
  for (std::size_t i = 0; i < c.size(); ++i) {
    detail::put_f32(s, c.xyz[i].x);
    detail::put_f32(s, c.xyz[i].y);
    detail::put_f32(s, c.xyz[i].z);
    s.push_back(static_cast<char>(detail::to_u8(c.rgb[i].r)));
    s.push_back(static_cast<char>(detail::to_u8(c.rgb[i].g)));
    s.push_back(static_cast<char>(detail::to_u8(c.rgb[i].b)));
    detail::put_u16(s, c.label.empty() ? 0 : c.label[i]);
  }
  return s;
}

inline PointCloud decode_cloud(std::string_view bytes, const std::string& what = "cloud") {
  if (bytes.size() < 4) detail::require_size(bytes, 4, what + " header");
  const std::size_t n = detail::get_u32(bytes, 0);
  detail::require_size(bytes, 4 + n * kCloudRecordBytes, what);
  PointCloud c;
  c.xyz.resize(n);
  c.rgb.resize(n);
  c.label.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = 4 + i * kCloudRecordBytes;
    c.xyz[i] = {detail::get_f32(bytes, at), detail::get_f32(bytes, at + 4), detail::get_f32(bytes, at + 8)};
    c.rgb[i] = {static_cast<unsigned char>(bytes[at + 12]) / 255.0, static_cast<unsigned char>(bytes[at + 13]) / 255.0,
                static_cast<unsigned char>(bytes[at + 14]) / 255.0};
    c.label[i] = detail::get_u16(bytes, at + 15);
  }
  return c;
}

inline std::string encode_camera(const CameraModel& cam) {
  std::string s;
  s += "fx=" + detail::fmt17(cam.fx) + "\n";
  s += "fy=" + detail::fmt17(cam.fy) + "\n";
  s += "cx=" + detail::fmt17(cam.cx) + "\n";
  s += "cy=" + detail::fmt17(cam.cy) + "\n";
  s += "width=" + std::to_string(cam.width) + "\n";
  s += "height=" + std::to_string(cam.height) + "\n";
  s += "pose=";
  for (std::size_t i = 0; i < 16; ++i) s += (i ? " " : "") + detail::fmt17(cam.pose.m[i]);
  s += "\n";
  return s;
}

inline CameraModel decode_camera(std::string_view text, const std::string& what = "camera") {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SceneError(what + ": line " + std::to_string(lineno) + " is not key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw SceneError(what + ": missing key '" + key + "'");
    return it->second;
  };
  CameraModel cam;
  try {
    cam.fx = std::stod(get("fx"));
    cam.fy = std::stod(get("fy"));
    cam.cx = std::stod(get("cx"));
    cam.cy = std::stod(get("cy"));
    cam.width = std::stoul(get("width"));
    cam.height = std::stoul(get("height"));
    std::istringstream ps(get("pose"));
    for (std::size_t i = 0; i < 16; ++i)
      if (!(ps >> cam.pose.m[i])) throw SceneError(what + ": pose needs 16 values, got " + std::to_string(i));
  } catch (const std::logic_error& e) {
    throw SceneError(what + ": malformed number (" + e.what() + ")");
  }
  cam.validate();
  return cam;
}

struct ScenePaths {
  std::string scene_id;
  std::filesystem::path image, depth, cloud, camera;
};

inline ScenePaths scene_paths(const std::filesystem::path& dir, const std::string& scene_id) {
  return {scene_id, dir / "image.ppm", dir / "depth.bin", dir / "cloud.bin", dir / "camera.txt"};
}

inline void save_scene(const SceneSample& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto p = scene_paths(dir, s.scene_id);
  detail::spit(p.image, encode_ppm(s.image));
  detail::spit(p.depth, encode_depth(s.depth));
  detail::spit(p.cloud, encode_cloud(s.cloud));
  detail::spit(p.camera, encode_camera(s.camera));
}

inline SceneSample load_scene(const ScenePaths& p) {
  for (const auto* path : {&p.image, &p.depth, &p.cloud, &p.camera})
    if (!std::filesystem::exists(*path))
      throw SceneError("scene '" + p.scene_id + "': missing file '" + path->string() + "'");
  SceneSample s;
  s.scene_id = p.scene_id;
  s.image = decode_ppm(detail::slurp(p.image), p.image.string());
  s.depth = decode_depth(detail::slurp(p.depth), p.depth.string());
  s.cloud = decode_cloud(detail::slurp(p.cloud), p.cloud.string());
  s.camera = decode_camera(detail::slurp(p.camera), p.camera.string());
  if (s.image.width != s.camera.width || s.image.height != s.camera.height || s.depth.width != s.camera.width ||
      s.depth.height != s.camera.height)
    throw SceneError("scene '" + p.scene_id + "': image, depth and camera extents disagree");
  return s;
}

inline SceneSample load_scene(const std::filesystem::path& dir, const std::string& scene_id = "scene") {
  return load_scene(scene_paths(dir, scene_id));
}

struct SceneManifest {
  std::uint64_t seed = 0;
  std::vector<std::string> class_names = kDefaultClassNames;
  std::vector<ScenePaths> scenes;
};

inline constexpr std::string_view kManifestHeader = "xmpt-manifest 1";

/// Writes `n` scenes generated from seeds seed..seed+n-1 and a manifest.
inline SceneManifest generate_corpus(const std::filesystem::path& out, std::size_t n, std::uint64_t seed,
                                     const SceneConfig& cfg = {}) {
  if (n == 0) throw SceneError("generate_corpus: scene count must be positive");
  std::filesystem::create_directories(out);
  SceneManifest m;
  m.seed = seed;
  std::string text(kManifestHeader);
  text += "\nseed " + std::to_string(seed) + "\nclasses";
  for (const auto& c : m.class_names) text += " " + c;
  text += "\n";
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSample s = generate_scene(seed + i, cfg);
    save_scene(s, out / s.scene_id);
    m.scenes.push_back(scene_paths(out / s.scene_id, s.scene_id));
    const std::string rel = s.scene_id + "/";
    text += "scene id=" + s.scene_id + " image=" + rel + "image.ppm depth=" + rel + "depth.bin cloud=" + rel +
            "cloud.bin camera=" + rel + "camera.txt\n";
  }
  detail::spit(out / "manifest.txt", text);
  return m;
}

inline SceneManifest load_manifest(const std::filesystem::path& path) {
  const std::string text = detail::slurp(path);
  const auto base = path.parent_path();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  SceneManifest m;
  std::set<std::string> ids;
  auto fail = [&](const std::string& msg) -> void {
    throw SceneError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != kManifestHeader) fail("bad header (expected \"" + std::string(kManifestHeader) + "\")");
      continue;
    }
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "seed") {
      if (!(ls >> m.seed)) fail("malformed seed");
    } else if (kind == "classes") {
      m.class_names.clear();
      for (std::string c; ls >> c;) m.class_names.push_back(c);
      if (m.class_names.empty()) fail("empty class table");
    } else if (kind == "scene") {
      std::map<std::string, std::string> kv;
      for (std::string tok; ls >> tok;) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) fail("expected key=value, got '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
      for (const char* key : {"id", "image", "depth", "cloud", "camera"})
        if (!kv.count(key)) fail(std::string("scene line missing '") + key + "'");
      if (!ids.insert(kv["id"]).second) fail("duplicate scene id '" + kv["id"] + "'");
      ScenePaths p{kv["id"], base / kv["image"], base / kv["depth"], base / kv["cloud"], base / kv["camera"]};
      for (const auto* f : {&p.image, &p.depth, &p.cloud, &p.camera})
        if (!std::filesystem::exists(*f)) fail("missing file '" + f->string() + "'");
      m.scenes.push_back(std::move(p));
    } else {
      fail("unknown record '" + kind + "'");
    }
  }
  if (lineno == 0) throw SceneError(path.string() + ": empty manifest");
  return m;
}

}  // namespace xmpt
