#include <gtest/gtest.h>

#include <cmath>
#include <regex>
#include <sstream>

#include "xmpt/pipeline.hpp"

namespace xmpt {
namespace {

std::vector<Image> images_of(std::initializer_list<std::uint64_t> seeds) {
  std::vector<Image> out;
  for (auto s : seeds) out.push_back(generate_scene(s).image);
  return out;
}

RunConfig small_config() {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.stage1.steps = 2;
  cfg.stage1.pairs = 64;
  cfg.stage1.log_interval = 1;
  cfg.stage2.steps = 3;
  cfg.stage2.anchors = 64;
  cfg.stage2.log_interval = 1;
  cfg.k = 32;
  cfg.probe.steps = 20;
  cfg.probe.batch_points = 256;
  return cfg;
}

TEST(Stage1, SmokeStepWritesFiniteLossAndParsableLog) {
  RunConfig cfg = small_config();
  cfg.stage1.steps = 1;
  Image2DNet net(cfg.seed);
  std::ostringstream log;
  const TrainResult r = train_stage1(cfg, images_of({1, 2}), net, &log);
  ASSERT_EQ(r.losses.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.losses[0]));
  EXPECT_EQ(r.checkpoint.stage, "stage1");
  EXPECT_EQ(r.checkpoint.step, 1u);
  EXPECT_EQ(r.checkpoint.config_hash, config_hash(cfg));
  const std::regex line(R"(step=1 loss=-?\d+\.\d{6} pos_sim=-?\d+\.\d{6} neg_sim=-?\d+\.\d{6}\n)");
  EXPECT_TRUE(std::regex_match(log.str(), line)) << log.str();
  EXPECT_EQ(load_image_net(r.checkpoint).parameters().size(), net.parameters().size());
}

TEST(Stage1, SameSeedIsBitIdentical) {
  const RunConfig cfg = small_config();
  auto run = [&] {
    Image2DNet net(cfg.seed);
    std::ostringstream log;
    const TrainResult r = train_stage1(cfg, images_of({1, 2, 3}), net, &log);
    return serialize(r.checkpoint) + log.str();
  };
  EXPECT_EQ(run(), run());
}

TEST(Stage1, EmptyDatasetIsAnError) {
  Image2DNet net(0);
  EXPECT_THROW(train_stage1(small_config(), {}, net), PipelineError);
}

TEST(Stage1, CheckpointStageIsChecked) {
  Point3DNet net(0);
  EXPECT_THROW(load_image_net(Checkpoint::from_parameters(net.parameters())), PipelineError);
}

TEST(Stage2, TeacherIsFrozenAndRunsAreDeterministic) {
  const RunConfig cfg = small_config();
  const std::vector<SceneSample> scenes = {generate_scene(1), generate_scene(2)};
  const Image2DNet teacher(5);
  const Checkpoint before = Checkpoint::from_parameters(teacher.parameters());
  auto run = [&] {
    Point3DNet student(cfg.seed);
    std::ostringstream log;
    const TrainResult r = train_stage2(cfg, scenes, teacher, student, &log);
    EXPECT_EQ(r.losses.size(), 3u);
    EXPECT_EQ(r.checkpoint.stage, "stage2");
    return serialize(r.checkpoint) + log.str();
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(serialize(Checkpoint::from_parameters(teacher.parameters())), serialize(before));
}

TEST(Stage2, CorrespondencesAreReproducible) {
  const SceneSample s = generate_scene(8);
  const Image2DNet teacher(1);
  const TeacherView a = teacher_view(teacher, s), b = teacher_view(teacher, s);
  EXPECT_EQ(a.pixel_of, b.pixel_of);
  EXPECT_FALSE(a.features.requires_grad());
  std::size_t matched = 0;
  for (auto p : a.pixel_of) matched += p >= 0;
  // Every point was back-projected from a visible pixel, so all of them match.
  EXPECT_EQ(matched, s.cloud.size());
}

TEST(Stage2, SceneWithoutCorrespondencesIsSkippedAndLogged) {
  RunConfig cfg = small_config();
  SceneSample s = generate_scene(6);
  const Vec3 eye = s.camera.camera_center();
  // Reflect every point through the eye so the cloud sits behind the camera.
  for (auto& p : s.cloud.xyz) p = {2 * eye.x - p.x, 2 * eye.y - p.y, 2 * eye.z - p.z};
  Point3DNet student(0);
  std::ostringstream log;
  const TrainResult r = train_stage2(cfg, {s}, Image2DNet(0), student, &log);
  EXPECT_EQ(r.skipped, cfg.stage2.steps);
  EXPECT_NE(log.str().find("no correspondences"), std::string::npos);
}

TEST(Stage2, MimicryOfItselfIsBoundedByOne) {
  const std::vector<SceneSample> scenes = {generate_scene(3)};
  const double m = evaluate_mimicry(Point3DNet(1), Image2DNet(1), scenes);
  EXPECT_GE(m, -1.0);
  EXPECT_LE(m, 1.0);
}

TEST(ScorePredictions, PerfectClassifier) {
  const std::vector<std::uint16_t> truth = {0, 1, 2, 3, 3, 2, 1, 0, 0};
  const ProbeResult r = score_predictions(truth, truth, 4);
  EXPECT_EQ(r.miou, 1.0);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p)
      if (t != p) {
        EXPECT_EQ(r.confusion[t][p], 0u);
      }
  EXPECT_EQ(r.confusion[0][0], 3u);
}

TEST(ScorePredictions, UniformRandomMatchesClosedForm) {
  // IoU of uniform guessing on balanced classes is p/(2−p) with p = 1/4.
  Rng rng(2024);
  std::vector<std::uint16_t> truth, pred;
  for (std::size_t i = 0; i < 40000; ++i) {
    truth.push_back(static_cast<std::uint16_t>(i % 4));
    pred.push_back(static_cast<std::uint16_t>(uniform_index(rng, 4)));
  }
  const ProbeResult r = score_predictions(truth, pred, 4);
  EXPECT_NEAR(r.miou, 1.0 / 7.0, 0.05);
  for (std::size_t c = 0; c < 4; ++c) {
    std::size_t row = 0;
    for (auto v : r.confusion[c]) row += v;
    EXPECT_EQ(row, 10000u);
  }
}

TEST(ScorePredictions, AbsentClassesAreLeftOutOfTheMean) {
  const ProbeResult r = score_predictions({0, 0, 1, 1}, {0, 0, 1, 0}, 3);
  EXPECT_FALSE(r.present[2]);
  EXPECT_NEAR(r.miou, (2.0 / 3.0 + 0.5) / 2.0, 1e-15);
  EXPECT_THROW(score_predictions({0}, {0, 1}, 2), PipelineError);
  EXPECT_THROW(score_predictions({0}, {5}, 2), PipelineError);
}

TEST(LinearProbe, MissingTrainClassIsNamed) {
  SceneSample s = generate_scene(2);
  for (auto& l : s.cloud.label)
    if (l == kSphere) l = kBox;
  try {
    linear_probe(small_config(), Point3DNet(0), {s}, {generate_scene(3)}, 4);
    FAIL();
  } catch (const PipelineError& e) {
    EXPECT_NE(std::string(e.what()).find("sphere"), std::string::npos) << e.what();
  }
}

TEST(LinearProbe, DeterministicAndComparable) {
  RunConfig cfg = small_config();
  const std::vector<SceneSample> train = {generate_scene(1), generate_scene(2)}, eval = {generate_scene(3)};
  const ProbeResult a = linear_probe(cfg, Point3DNet(0), train, eval, 4);
  const ProbeResult b = linear_probe(cfg, Point3DNet(0), train, eval, 4);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_GE(a.miou, 0.0);
  EXPECT_LE(a.miou, 1.0);
  RunConfig other = cfg;
  other.probe.backbone = "runs/stage2.ckpt";
  EXPECT_EQ(probe_config_hash(other), probe_config_hash(cfg));
  other.probe.lr = 0.5;
  EXPECT_NE(probe_config_hash(other), probe_config_hash(cfg));
}

TEST(LinearProbe, LearnsSeparableFeatures) {
  // A backbone that sees colour should separate classes better than chance.
  RunConfig cfg = small_config();
  cfg.probe.steps = 100;
  const std::vector<SceneSample> train = {generate_scene(11), generate_scene(12), generate_scene(13)};
  const ProbeResult r = linear_probe(cfg, Point3DNet(4), train, {generate_scene(14)}, 4);
  EXPECT_GT(r.miou, 1.0 / 7.0);
}

TEST(SmoothedEnds, WindowedMeans) {
  std::vector<double> v(100);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const auto [head, tail] = smoothed_ends(v, 50);
  EXPECT_EQ(head, 24.5);
  EXPECT_EQ(tail, 74.5);
}

}  // namespace
}  // namespace xmpt
