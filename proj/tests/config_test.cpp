#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "xmpt/config.hpp"

namespace xmpt {
namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

TEST(Config, UnknownKeyIsAnError) {
  RunConfig cfg;
  try {
    apply_config_text(cfg, "seed=1\nstage1.stepz=10\n", "run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stage1.stepz"), std::string::npos) << msg;
    EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
  }
  EXPECT_THROW(apply_setting(cfg, "novalue"), ConfigError);
  EXPECT_THROW(apply_setting(cfg, "stage1.steps=ten"), ConfigError);
  EXPECT_THROW(apply_setting(cfg, "loss.negatives=both"), ConfigError);
}

TEST(Config, OverridesBeatFileBeatsEnvironment) {
  const auto path = write_temp("xmpt_config_test.cfg", "# comment\nseed = 4\nloss.tau=0.3\nstage2.steps=9\n");
  ::setenv("XMPT_SEED", "99", 1);
  RunConfig cfg = load_config(path.string(), {"loss.tau=0.1"});
  EXPECT_EQ(cfg.seed, 4u);
  EXPECT_EQ(cfg.tau, 0.1);
  EXPECT_EQ(cfg.stage2.steps, 9u);

  const auto bare = write_temp("xmpt_config_bare.cfg", "stage1.steps=3\n");
  cfg = load_config(bare.string());
  EXPECT_EQ(cfg.seed, 99u);
  ::unsetenv("XMPT_SEED");
  std::filesystem::remove(path);
  std::filesystem::remove(bare);
  EXPECT_THROW(load_config("/nonexistent/xmpt.cfg"), ConfigError);
}

TEST(Config, ResolvedEchoShowsOverride) {
  RunConfig cfg;
  apply_setting(cfg, "loss.tau=0.1");
  const std::string text = resolved_config(cfg);
  EXPECT_NE(text.find("\nloss.tau=0.1\n"), std::string::npos) << text;
  EXPECT_NE(text.find("augment3d.rotation=gravity\n"), std::string::npos);
}

TEST(Config, ResolvedTextRoundTripsAndHashes) {
  RunConfig cfg;
  apply_setting(cfg, "augment2d.jitter_min=0.55");
  apply_setting(cfg, "data.manifest=corpus/manifest.txt");
  RunConfig back;
  apply_config_text(back, resolved_config(cfg));
  EXPECT_EQ(resolved_config(back), resolved_config(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  apply_setting(back, "seed=1");
  EXPECT_NE(config_hash(back), config_hash(cfg));
}

TEST(Config, ValidationRejectsDegenerateRuns) {
  RunConfig cfg;
  validate(cfg);
  cfg.stage1.steps = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.stage2.lr = 0.0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.augment3d.keep_min = 0.0;
  EXPECT_THROW(validate(cfg), ConfigError);
}

}  // namespace
}  // namespace xmpt
