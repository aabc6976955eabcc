#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "xmpt/augment.hpp"

namespace xmpt {
namespace {

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img.rgb) v = uniform01(rng);
  return img;
}

Augment2DConfig identity_config() {
  Augment2DConfig cfg;
  cfg.full_crop = true;
  cfg.flip_probability = 0.0;
  cfg.jitter.probability = 0.0;
  cfg.jitter.grayscale_probability = 0.0;
  return cfg;
}

TEST(AugmentImage, IdentityParametersLeaveImageUnchanged) {
  Rng rng(1);
  Image img = random_image(12, 16, rng);
  auto view = augment_image(img, rng, identity_config());
  EXPECT_EQ(view.image, img);
  const Point2 p = view.fwd_map.apply({3.25, 7.5});
  EXPECT_NEAR(p.x, 3.25, 1e-12);
  EXPECT_NEAR(p.y, 7.5, 1e-12);
}

TEST(AugmentImage, FullCropScalesToOutputSize) {
  Rng rng(1);
  Image img = random_image(8, 8, rng);
  auto cfg = identity_config();
  cfg.out_height = cfg.out_width = 16;
  auto view = augment_image(img, rng, cfg);
  EXPECT_EQ(view.image.height, 16u);
  // Edges map to edges: -0.5 -> -0.5 and 7.5 -> 15.5.
  EXPECT_NEAR(view.fwd_map.apply({-0.5, -0.5}).x, -0.5, 1e-12);
  EXPECT_NEAR(view.fwd_map.apply({7.5, 7.5}).y, 15.5, 1e-12);
  EXPECT_NEAR(view.fwd_map.a, 2.0, 1e-12);
}

TEST(AugmentImage, ForcedFlipSwapsColumns) {
  Image img(2, 2);
  const double vals[] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.0, 0.25};
  std::copy(std::begin(vals), std::end(vals), img.rgb.begin());
  auto cfg = identity_config();
  cfg.flip_probability = 1.0;
  Rng rng(2);
  auto view = augment_image(img, rng, cfg);
  EXPECT_TRUE(view.params.flipped);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(view.image.at(y, 0, c), img.at(y, 1, c));
      EXPECT_EQ(view.image.at(y, 1, c), img.at(y, 0, c));
    }
  for (double y : {0.0, 1.0}) {
    const Point2 p = view.fwd_map.apply({0.0, y});
    EXPECT_NEAR(p.x, 1.0, 1e-12);  // W - 1
    EXPECT_NEAR(p.y, y, 1e-12);
  }
}

TEST(AugmentImage, RoundTripOfForwardAndInverseMaps) {
  Rng rng(3);
  Image img = random_image(32, 32, rng);
  Augment2DConfig cfg;
  for (int draw = 0; draw < 50; ++draw) {
    auto view = augment_image(img, rng, cfg);
    ASSERT_NE(view.fwd_map.det(), 0.0);
    const Affine2 inv = view.inverse_map();
    for (int k = 0; k < 20; ++k) {
      const Point2 p{uniform(rng, 0.0, 31.0), uniform(rng, 0.0, 31.0)};
      const Point2 q = view.fwd_map.apply(inv.apply(p));
      EXPECT_NEAR(q.x, p.x, 1e-9);
      EXPECT_NEAR(q.y, p.y, 1e-9);
    }
    // Crop corners land on the view boundary.
    const auto& c = view.params.crop;
    for (Point2 corner : {Point2{c.x0, c.y0}, Point2{c.x1, c.y1}, Point2{c.x0, c.y1}, Point2{c.x1, c.y0}}) {
      const Point2 q = view.fwd_map.apply(corner);
      EXPECT_NEAR(std::min(std::abs(q.x + 0.5), std::abs(q.x - 31.5)), 0.0, 1e-9);
      EXPECT_NEAR(std::min(std::abs(q.y + 0.5), std::abs(q.y - 31.5)), 0.0, 1e-9);
    }
  }
}

TEST(AugmentImage, CropStaysWithinRanges) {
  Rng rng(4);
  Image img = random_image(40, 40, rng);
  Augment2DConfig cfg;
  for (int draw = 0; draw < 200; ++draw) {
    auto view = augment_image(img, rng, cfg);
    const auto& c = view.params.crop;
    const double frac = c.width() * c.height() / 1600.0;
    EXPECT_GE(c.x0, -0.5 - 1e-12);
    EXPECT_LE(c.x1, 39.5 + 1e-12);
    EXPECT_GE(frac, 0.4 - 1e-9);
    EXPECT_LE(frac, 1.0 + 1e-9);
    for (double v : view.image.rgb) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(AugmentImage, Errors) {
  Rng rng(5);
  Image tiny(1, 1, 0.5);
  EXPECT_THROW(augment_image(tiny, rng, Augment2DConfig{}), AugmentError);
  Image bad(4, 4, 1.5);
  EXPECT_THROW(augment_image(bad, rng, Augment2DConfig{}), AugmentError);
}

TEST(AugmentImage, SameSeedSameView) {
  Rng src(6);
  Image img = random_image(24, 24, src);
  Rng r1(42), r2(42);
  auto a = augment_image(img, r1, Augment2DConfig{});
  auto b = augment_image(img, r2, Augment2DConfig{});
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.params.seed, b.params.seed);
}

TEST(PositivePixels, IdenticalViewsPairWithThemselves) {
  Rng rng(7);
  Image img = random_image(32, 32, rng);
  Rng view_rng(8);
  auto view = augment_image(img, view_rng, Augment2DConfig{});
  auto pairs = sample_positive_pixels(view, view, 200, rng);
  ASSERT_FALSE(pairs.empty());
  for (const auto& p : pairs) EXPECT_EQ(p.a, p.b);
}

TEST(PositivePixels, DisjointCropsGiveNothing) {
  AugmentedView a, b;
  a.image = Image(8, 8);
  b.image = Image(8, 8);
  a.params.crop = {-0.5, -0.5, 3.0, 7.5};
  b.params.crop = {4.0, -0.5, 7.5, 7.5};
  Rng rng(9);
  EXPECT_TRUE(sample_positive_pixels(a, b, 100, rng).empty());
}

TEST(PositivePixels, BackProjectedCentresAgreeWithinOnePixel) {
  Rng rng(10);
  Image img = random_image(64, 64, rng);
  Augment2DConfig cfg;
  std::size_t total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto a = augment_image(img, rng, cfg);
    auto b = augment_image(img, rng, cfg);
    auto pairs = sample_positive_pixels(a, b, 1000, rng);
    const Affine2 ia = a.inverse_map(), ib = b.inverse_map();
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : pairs) {
      const Point2 oa = ia.apply({static_cast<double>(p.a.u), static_cast<double>(p.a.v)});
      const Point2 ob = ib.apply({static_cast<double>(p.b.u), static_cast<double>(p.b.v)});
      EXPECT_LT(std::hypot(oa.x - ob.x, oa.y - ob.y), 1.0);
      EXPECT_LT(p.a.u, 64u);
      EXPECT_LT(p.b.v, 64u);
      EXPECT_TRUE(seen.insert({p.a.u, p.a.v}).second);
    }
    EXPECT_LE(pairs.size(), 1000u);
    total += pairs.size();
  }
  EXPECT_GT(total, 5000u);
}

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.xyz.push_back({uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, 0, 2)});
    c.rgb.push_back({uniform01(rng), uniform01(rng), uniform01(rng)});
    c.label.push_back(static_cast<std::uint16_t>(i % 4));
  }
  return c;
}

TEST(AugmentCloud, IdentityParameters) {
  Rng rng(11);
  auto cloud = random_cloud(50, rng);
  Augment3DConfig cfg;
  cfg.rotation = RotationMode::kNone;
  cfg.keep_min = cfg.keep_max = 1.0;
  cfg.jitter.probability = 0.0;
  auto out = augment_cloud(cloud, rng, cfg);
  ASSERT_EQ(out.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(out.index_map[i], i);
    EXPECT_EQ(out.points[i], cloud.xyz[i]);
    EXPECT_EQ(out.colors[i], cloud.rgb[i]);
    EXPECT_EQ(out.labels[i], cloud.label[i]);
  }
}

TEST(AugmentCloud, HalfTurnAboutGravity) {
  PointCloud cloud;
  cloud.xyz = {{1, 0, 0}};
  cloud.rgb = {{0.2, 0.4, 0.6}};
  cloud.label = {1};
  const Transform r = Transform::rotation_z(std::numbers::pi);
  const Vec3 p = r.apply(cloud.xyz[0]);
  EXPECT_NEAR(p.x, -1.0, 1e-12);
  EXPECT_NEAR(p.y, 0.0, 1e-12);
  // Through the augmentation path: every gravity rotation keeps z and the
  // distance to the axis, and colours are untouched with jitter off.
  Augment3DConfig cfg;
  cfg.keep_min = cfg.keep_max = 1.0;
  cfg.jitter.probability = 0.0;
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    auto out = augment_cloud(cloud, rng, cfg);
    EXPECT_NEAR(out.points[0].z, 0.0, 1e-12);
    EXPECT_NEAR(std::hypot(out.points[0].x, out.points[0].y), 1.0, 1e-12);
    EXPECT_EQ(out.colors[0], cloud.rgb[0]);
  }
}

TEST(AugmentCloud, DropoutConcentratesAroundKeepRate) {
  Rng src(13);
  auto cloud = random_cloud(10000, src);
  Augment3DConfig cfg;
  cfg.keep_min = cfg.keep_max = 0.7;
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    total += static_cast<double>(augment_cloud(cloud, rng, cfg).size()) / 10000.0;
  }
  EXPECT_NEAR(total / 20.0, 0.7, 0.02);
}

TEST(AugmentCloud, IndexMapAndJitterBookkeeping) {
  Rng rng(14);
  auto cloud = random_cloud(500, rng);
  Augment3DConfig cfg;
  cfg.jitter.probability = 1.0;
  for (int t = 0; t < 20; ++t) {
    auto out = augment_cloud(cloud, rng, cfg);
    ASSERT_LE(out.size(), cloud.size());
    ASSERT_GE(out.size(), 1u);
    std::set<std::size_t> unique(out.index_map.begin(), out.index_map.end());
    EXPECT_EQ(unique.size(), out.index_map.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      ASSERT_LT(out.index_map[i], cloud.size());
      EXPECT_EQ(out.colors[i], out.params.jitter(cloud.rgb[out.index_map[i]]));
      EXPECT_EQ(out.labels[i], cloud.label[out.index_map[i]]);
    }
  }
}

TEST(AugmentCloud, AtLeastOneSurvivor) {
  Rng rng(15);
  auto cloud = random_cloud(3, rng);
  Augment3DConfig cfg;
  cfg.keep_min = cfg.keep_max = 1e-9;
  for (int t = 0; t < 20; ++t) EXPECT_EQ(augment_cloud(cloud, rng, cfg).size(), 1u);
  EXPECT_THROW(augment_cloud(PointCloud{}, rng, cfg), AugmentError);
}

TEST(AugmentCloud, FullRotationIsRigid) {
  Rng rng(16);
  auto cloud = random_cloud(10, rng);
  Augment3DConfig cfg;
  cfg.rotation = RotationMode::kFull;
  for (int t = 0; t < 20; ++t) EXPECT_TRUE(augment_cloud(cloud, rng, cfg).params.rotation.is_rigid());
}

TEST(AugmentCloud, SameSeedSameOutput) {
  Rng src(17);
  auto cloud = random_cloud(300, src);
  Rng a(5), b(5);
  auto x = augment_cloud(cloud, a, Augment3DConfig{});
  auto y = augment_cloud(cloud, b, Augment3DConfig{});
  EXPECT_EQ(x.points, y.points);
  EXPECT_EQ(x.colors, y.colors);
  EXPECT_EQ(x.index_map, y.index_map);
}

}  // namespace
}  // namespace xmpt
