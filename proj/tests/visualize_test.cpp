#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "xmpt/visualize.hpp"

namespace xmpt {
namespace {

TEST(FitPca, RecoversDominantAxisWithPositiveSign) {
  // Rows spread along −e2 mostly, e0 a little.
  std::vector<double> f;
  for (int i = -5; i <= 5; ++i) f.insert(f.end(), {0.1 * i, 0.0, -2.0 * i, 0.0});
  const PcaBasis b = fit_pca(f, 4);
  const auto& c = b.component[0];
  const double norm = std::hypot(c[0], c[2]);
  EXPECT_NEAR(norm, 1.0, 1e-12);
  EXPECT_GT(std::abs(c[2]), std::abs(c[0]));
  EXPECT_GT(c[2], 0.0);
  EXPECT_EQ(b.component[1], std::vector<double>(4, 0.0));
}

TEST(FitPca, ConstantFeaturesGiveMidGray) {
  std::vector<double> f(50 * 16, 0.25);
  const PcaBasis b = fit_pca(f, 16);
  const Heatmap h = pixel_heatmap(b, f, 5, 10);
  for (auto v : h.rgb) ASSERT_EQ(v, 128);
  EXPECT_THROW(fit_pca(std::vector<double>(7), 16), VisualizeError);
}

TEST(PcaColor, ExtremesMapToFullRange) {
  std::vector<double> f = {-1.0, 0.0, 3.0};
  const PcaBasis b = fit_pca(f, 1);
  EXPECT_EQ(pca_color(b, &f[0])[0], 0);
  EXPECT_EQ(pca_color(b, &f[2])[0], 255);
  EXPECT_EQ(pca_color(b, &f[0])[1], 128);
}

TEST(RenderHeatmaps, DeterministicAndCoveringEveryCloudPixel) {
  const SceneSample s = generate_scene(21);
  const Image2DNet n2(3);
  const Point3DNet n3(3);
  const HeatmapSet a = render_heatmaps(s, &n2, &n3), b = render_heatmaps(s, &n2, &n3);
  ASSERT_TRUE(a.image && a.points);
  EXPECT_EQ(encode_heatmap(*a.image), encode_heatmap(*b.image));
  EXPECT_EQ(encode_heatmap(*a.points), encode_heatmap(*b.points));
  std::size_t covered = 0;
  for (bool c : a.points->covered) covered += c;
  EXPECT_EQ(covered, s.cloud.size());
  EXPECT_EQ(heatmap_distance(*a.image, *a.image), 0.0);

  const HeatmapSet only3 = render_heatmaps(s, nullptr, &n3);
  EXPECT_FALSE(only3.image);
  EXPECT_THROW(render_heatmaps(s, nullptr, nullptr), VisualizeError);
}

TEST(RenderHeatmaps, NearestPointWinsThePixel) {
  SceneSample s = generate_scene(4);
  const std::size_t i = s.cloud.size() / 2;
  // A copy of point i pulled halfway to the camera lands in the same pixel.
  const Vec3 eye = s.camera.camera_center();
  const Vec3 p = s.cloud.xyz[i];
  s.cloud.xyz.push_back({(p.x + eye.x) / 2, (p.y + eye.y) / 2, (p.z + eye.z) / 2});
  s.cloud.rgb.push_back(s.cloud.rgb[i]);
  s.cloud.label.push_back(s.cloud.label[i]);
  PcaBasis b;
  b.dims = 1;
  b.mean = {0.0};
  b.component = {std::vector<double>{1.0}, std::vector<double>{0.0}, std::vector<double>{0.0}};
  b.lo = {0.0, 0.0, 0.0};
  b.hi = {1.0, 0.0, 0.0};
  std::vector<double> f(s.cloud.size(), 0.0);
  f.back() = 1.0;
  const Heatmap h = point_heatmap(b, f, s.cloud, s.camera);
  const auto px = pixel_of(*project(p, s.camera), s.camera);
  EXPECT_EQ(h.rgb[(px->v * s.camera.width + px->u) * 3], 255);
}

TEST(WriteHeatmaps, WritesBothFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "xmpt_visualize_test";
  std::filesystem::remove_all(dir);
  const SceneSample s = generate_scene(2);
  const Image2DNet n2(1);
  const Point3DNet n3(1);
  const auto paths = write_heatmaps(render_heatmaps(s, &n2, &n3), (dir / "h").string());
  ASSERT_EQ(paths.size(), 2u);
  EXPECT_EQ(paths[0].filename(), "h_2d.ppm");
  const Image img = decode_ppm(detail::read_file(paths[1]));
  EXPECT_EQ(img.width, s.camera.width);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace xmpt
