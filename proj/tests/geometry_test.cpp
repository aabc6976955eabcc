#include <gtest/gtest.h>

#include <numbers>
#include <set>

#include "oracles.hpp"
#include "xmpt/geometry.hpp"
#include "xmpt/rng.hpp"

namespace xmpt {
namespace {

CameraModel simple_camera(double f, double c, std::size_t size) {
  CameraModel cam;
  cam.fx = cam.fy = f;
  cam.cx = cam.cy = c;
  cam.width = cam.height = size;
  return cam;
}

TEST(Project, OpticalAxisHitsPrincipalPoint) {
  auto p = project({0, 0, 2}, simple_camera(100, 64, 128));
  ASSERT_TRUE(p);
  EXPECT_EQ(p->u, 64.0);
  EXPECT_EQ(p->v, 64.0);
  EXPECT_EQ(p->depth, 2.0);
}

TEST(Project, PinholeFormula) {
  // u = 100 * 0.5 / 2 + 64 = 89, v = 100 * -0.25 / 2 + 64 = 51.5
  auto p = project({0.5, -0.25, 2.0}, simple_camera(100, 64, 128));
  ASSERT_TRUE(p);
  EXPECT_NEAR(p->u, 89.0, 1e-12);
  EXPECT_NEAR(p->v, 51.5, 1e-12);
  EXPECT_NEAR(p->depth, 2.0, 1e-12);
}

TEST(Project, BehindCameraIsAbsent) {
  EXPECT_FALSE(project({0, 0, -1}, simple_camera(100, 64, 128)));
  EXPECT_FALSE(project({0, 0, 0.5 * kZNear}, simple_camera(100, 64, 128)));
}

TEST(Project, HomogeneousRayInvariance) {
  Rng rng(1);
  const auto cam = simple_camera(80, 31.5, 64);
  for (int i = 0; i < 1000; ++i) {
    Vec3 p{uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, 0.1, 5)};
    const double lambda = std::exp(uniform(rng, -3, 3));
    auto a = project(p, cam);
    auto b = project(lambda * p, cam);
    ASSERT_TRUE(a && b);
    EXPECT_NEAR(a->u, b->u, 1e-9);
    EXPECT_NEAR(a->v, b->v, 1e-9);
  }
}

TEST(Camera, ValidationRejectsBadIntrinsicsAndPose) {
  auto cam = simple_camera(100, 64, 128);
  EXPECT_NO_THROW(cam.validate());
  auto bad = cam;
  bad.fx = 0;
  EXPECT_THROW(bad.validate(), GeometryError);
  bad = cam;
  bad.cx = 128;
  EXPECT_THROW(bad.validate(), GeometryError);
  bad = cam;
  bad.pose.m[0] = 2.0;
  EXPECT_THROW(bad.validate(), GeometryError);
  bad = cam;
  bad.pose.m[0] = -1.0;  // reflection: orthonormal but det -1
  EXPECT_THROW(bad.validate(), GeometryError);
}

TEST(Camera, BackProjectInvertsProject) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    auto cam = oracle::random_room_camera(40, 30, rng);
    const double u = uniform(rng, 0, 40), v = uniform(rng, 0, 30), z = uniform(rng, 0.5, 6);
    auto p = project(cam.back_project(u, v, z), cam);
    ASSERT_TRUE(p);
    EXPECT_NEAR(p->u, u, 1e-9);
    EXPECT_NEAR(p->v, v, 1e-9);
    EXPECT_NEAR(p->depth, z, 1e-9);
  }
}

TEST(Correspondences, ZBufferKeepsNearest) {
  const auto cam = simple_camera(100, 64, 128);
  PointCloud cloud;
  cloud.xyz = {{0.2, 0.2, 2.0}, {0.1, 0.1, 1.0}};  // same ray
  cloud.rgb.resize(2);
  cloud.label.resize(2);
  auto set = build_correspondences(cloud, cam);
  ASSERT_EQ(set.pairs.size(), 1u);
  EXPECT_EQ(set.pairs[0].point, 1u);
  EXPECT_EQ(set.pairs[0].pixel, (PixelCoord{74, 74}));
}

TEST(Correspondences, ExactDepthAgreement) {
  const auto cam = simple_camera(100, 64, 128);
  PointCloud cloud;
  cloud.xyz = {{0.5, -0.25, 2.0}};
  cloud.rgb.resize(1);
  cloud.label.resize(1);
  DepthMap depth{128, 128, std::vector<double>(128 * 128, 0.0)};
  depth.depth[51 * 128 + 89] = 2.0;
  auto set = build_correspondences(cloud, cam, &depth, 0.05);
  ASSERT_EQ(set.pairs.size(), 1u);
  EXPECT_EQ(set.pairs[0].pixel, (PixelCoord{89, 51}));
  depth.depth[51 * 128 + 89] = 1.5;  // occluder in front
  EXPECT_TRUE(build_correspondences(cloud, cam, &depth, 0.05).pairs.empty());
}

TEST(Correspondences, Errors) {
  const auto cam = simple_camera(100, 64, 128);
  EXPECT_THROW(build_correspondences(PointCloud{}, cam), GeometryError);
  PointCloud cloud;
  cloud.xyz = {{0, 0, 1}};
  DepthMap wrong{64, 64, std::vector<double>(64 * 64, 1.0)};
  EXPECT_THROW(build_correspondences(cloud, cam, &wrong), GeometryError);
}

std::set<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>> as_set(const CorrespondenceSet& s) {
  std::set<std::pair<std::size_t, std::pair<std::size_t, std::size_t>>> out;
  for (const auto& c : s.pairs) out.insert({c.point, {c.pixel.u, c.pixel.v}});
  return out;
}

TEST(Correspondences, MatchesBruteForceOracleInRandomRoom) {
  Rng rng(2000);
  for (int scene = 0; scene < 5; ++scene) {
    auto cam = oracle::random_room_camera(32, 24, rng);
    auto cloud = oracle::random_room_cloud(2000, cam, rng);
    auto fast = build_correspondences(cloud, cam);
    auto slow = oracle::brute_force_correspondences(cloud, cam, nullptr, 0.0);
    EXPECT_FALSE(slow.empty());
    EXPECT_EQ(as_set(fast), slow) << "scene " << scene;
  }
}

TEST(Correspondences, MatchesOracleWithDepthMap) {
  Rng rng(2001);
  for (int scene = 0; scene < 5; ++scene) {
    auto cam = oracle::random_room_camera(32, 24, rng);
    auto cloud = oracle::random_room_cloud(1500, cam, rng);
    // Depth map from a subset of points, plus noise so the tolerance matters.
    DepthMap depth{32, 24, std::vector<double>(32 * 24, 0.0)};
    for (std::size_t i = 0; i < cloud.size(); i += 3) {
      auto p = project(cloud.xyz[i], cam);
      if (!p) continue;
      if (auto px = pixel_of(*p, cam)) {
        double& d = depth.depth[px->v * 32 + px->u];
        if (d == 0.0 || p->depth < d) d = p->depth * uniform(rng, 0.97, 1.03);
      }
    }
    auto fast = build_correspondences(cloud, cam, &depth, 0.05);
    auto slow = oracle::brute_force_correspondences(cloud, cam, &depth, 0.05);
    EXPECT_EQ(as_set(fast), slow) << "scene " << scene;
  }
}

TEST(Correspondences, InvariantsUnderRandomPoses) {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    auto cam = oracle::random_room_camera(20, 16, rng);
    auto cloud = oracle::random_room_cloud(800, cam, rng);
    auto set = build_correspondences(cloud, cam);
    std::set<std::size_t> points;
    std::set<std::pair<std::size_t, std::size_t>> pixels;
    for (const auto& c : set.pairs) {
      EXPECT_LT(c.pixel.u, cam.width);
      EXPECT_LT(c.pixel.v, cam.height);
      auto p = project(cloud.xyz[c.point], cam);
      ASSERT_TRUE(p);
      EXPECT_GT(p->depth, 0.0);
      EXPECT_TRUE(points.insert(c.point).second);
      EXPECT_TRUE(pixels.insert({c.pixel.u, c.pixel.v}).second);
    }
  }
}

TEST(Transform, IdentityLeavesCloudUnchanged) {
  Rng rng(3);
  auto cam = oracle::random_room_camera(8, 8, rng);
  auto cloud = oracle::random_room_cloud(100, cam, rng);
  auto out = transform_points(cloud, Transform::identity());
  EXPECT_EQ(out.xyz, cloud.xyz);
  EXPECT_EQ(out.rgb, cloud.rgb);
  EXPECT_EQ(out.label, cloud.label);
}

TEST(Transform, HalfTurnYaw) {
  PointCloud cloud;
  cloud.xyz = {{1, 0, 0}};
  cloud.rgb = {{0.1, 0.2, 0.3}};
  cloud.label = {2};
  auto out = transform_points(cloud, Transform::rotation_z(std::numbers::pi));
  EXPECT_NEAR(out.xyz[0].x, -1.0, 1e-12);
  EXPECT_NEAR(out.xyz[0].y, 0.0, 1e-12);
  EXPECT_NEAR(out.xyz[0].z, 0.0, 1e-12);
  EXPECT_EQ(out.rgb[0], cloud.rgb[0]);
  EXPECT_EQ(out.label[0], 2);
}

TEST(Transform, InverseRoundTrip) {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    auto cam = oracle::random_room_camera(8, 8, rng);
    const Transform& tf = cam.pose;
    auto cloud = oracle::random_room_cloud(200, cam, rng);
    auto out = transform_points(cloud, tf.compose(tf.rigid_inverse()));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      EXPECT_NEAR(out.xyz[i].x, cloud.xyz[i].x, 1e-9);
      EXPECT_NEAR(out.xyz[i].y, cloud.xyz[i].y, 1e-9);
      EXPECT_NEAR(out.xyz[i].z, cloud.xyz[i].z, 1e-9);
    }
  }
}

TEST(Transform, RejectsNonRigid) {
  Transform scale;
  scale.m[0] = 2.0;
  PointCloud cloud;
  cloud.xyz = {{1, 0, 0}};
  EXPECT_THROW(transform_points(cloud, scale), GeometryError);
}

}  // namespace
}  // namespace xmpt
