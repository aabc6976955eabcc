// xmpt: data generation, both pre-training stages, linear probe, gradient
// check and heatmap visualization.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "xmpt/gradcheck_suite.hpp"
#include "xmpt/pipeline.hpp"
#include "xmpt/runtime.hpp"
#include "xmpt/visualize.hpp"

namespace {

using namespace xmpt;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config, "key=value config file");
  cmd->add_option("--set", args.sets, "override, key=value (repeatable)");
}

RunConfig resolve(const ConfigArgs& args) {
  RunConfig cfg;
  if (args.config.empty()) {
    if (const char* env = std::getenv("XMPT_SEED")) apply_setting(cfg, std::string("seed=") + env, "XMPT_SEED");
    for (const auto& s : args.sets) apply_setting(cfg, s);
  } else {
    cfg = load_config(args.config, args.sets);
  }
  validate(cfg);
  std::cout << "# resolved config\n" << resolved_config(cfg) << std::flush;
  return cfg;
}

std::ofstream open_log(const std::string& path, const RunConfig& cfg) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream log(p, std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open log '" + path + "'");
  std::istringstream lines(resolved_config(cfg));
  for (std::string line; std::getline(lines, line);) log << "# " << line << '\n';
  return log;
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  std::size_t h = 0, w = 0;
  char x = 0, extra = 0;
  if (std::sscanf(s.c_str(), "%zu%c%zu%c", &h, &x, &w, &extra) != 3 || (x != 'x' && x != 'X') || h == 0 || w == 0)
    throw UsageError("--size: expected HxW with positive extents, got '" + s + "'");
  return {h, w};
}

int cmd_gen_data(const std::string& out, std::size_t scenes, std::uint64_t seed, const std::string& size) {
  if (scenes == 0) throw UsageError("--scenes: must be at least 1");
  const auto [h, w] = parse_size(size);
  SceneConfig sc;
  sc.height = h;
  sc.width = w;
  const SceneManifest m = generate_corpus(out, scenes, seed, sc);
  std::cout << "wrote " << m.scenes.size() << " scenes and " << (std::filesystem::path(out) / "manifest.txt").string()
            << "\n";
  return 0;
}

int cmd_pretrain2d(const ConfigArgs& args) {
  const RunConfig cfg = resolve(args);
  std::vector<Image> images;
  for (auto& s : load_scenes(cfg.manifest, cfg.stage1.images)) images.push_back(std::move(s.image));
  Image2DNet net(cfg.seed);
  std::ofstream log = open_log(cfg.stage1.log, cfg);
  const TrainResult r = train_stage1(cfg, images, net, &log);
  save_checkpoint(r.checkpoint, cfg.stage1.checkpoint);
  const SimilarityStats s = evaluate_stage1(net, images, cfg.augment2d, cfg.stage1.eval_pairs, cfg.seed + 1);
  std::cout << "eval pos_sim=" << detail::format_double(s.mean_pos_sim)
            << " neg_sim=" << detail::format_double(s.mean_neg_sim) << "\n"
            << "checkpoint " << cfg.stage1.checkpoint << "\n";
  return 0;
}

int cmd_pretrain3d(const ConfigArgs& args, const std::string& teacher_path) {
  const RunConfig cfg = resolve(args);
  const Image2DNet teacher = load_image_net(load_checkpoint(teacher_path));
  const auto scenes = load_scenes(cfg.manifest, cfg.stage2.scenes);
  Point3DNet student(cfg.seed);
  std::ofstream log = open_log(cfg.stage2.log, cfg);
  const TrainResult r = train_stage2(cfg, scenes, teacher, student, &log);
  save_checkpoint(r.checkpoint, cfg.stage2.checkpoint);
  std::cout << "train mimicry=" << detail::format_double(evaluate_mimicry(student, teacher, scenes)) << "\n";
  if (!cfg.eval_manifest.empty())
    std::cout << "eval mimicry="
              << detail::format_double(evaluate_mimicry(student, teacher, load_scenes(cfg.eval_manifest))) << "\n";
  std::cout << "checkpoint " << cfg.stage2.checkpoint << "\n";
  return 0;
}

std::string format_probe(const ProbeResult& r, const std::vector<std::string>& names, const std::string& backbone) {
  std::ostringstream o;
  o << "backbone=" << backbone << "\n";
  o << "config_hash=" << r.config_hash << "\n";
  o << "miou=" << detail::format_double(r.miou) << "\n";
  for (std::size_t c = 0; c < r.iou.size(); ++c)
    o << "iou." << (c < names.size() ? names[c] : std::to_string(c)) << "="
      << (r.present[c] ? detail::format_double(r.iou[c]) : std::string("absent")) << "\n";
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    o << "confusion." << t << "=";
    for (std::size_t p = 0; p < r.confusion[t].size(); ++p) o << (p ? " " : "") << r.confusion[t][p];
    o << "\n";
  }
  return o.str();
}

int cmd_probe(const ConfigArgs& args, const std::string& backbone_flag) {
  ConfigArgs a = args;
  if (!backbone_flag.empty()) a.sets.push_back("probe.backbone=" + backbone_flag);
  const RunConfig cfg = resolve(a);
  const SceneManifest m = load_manifest(cfg.manifest);
  const auto train = load_scenes(cfg.manifest, cfg.probe.train_scenes);
  const auto eval = cfg.eval_manifest.empty() ? load_scenes(cfg.manifest, cfg.probe.eval_scenes, train.size())
                                              : load_scenes(cfg.eval_manifest, cfg.probe.eval_scenes);
  const Point3DNet backbone =
      cfg.probe.backbone == "none" ? Point3DNet(cfg.seed) : load_point_net(load_checkpoint(cfg.probe.backbone));
  const ProbeResult r = linear_probe(cfg, backbone, train, eval, m.class_names.size(), m.class_names, &std::cout);
  const std::string text = format_probe(r, m.class_names, cfg.probe.backbone);
  detail::write_file_atomic(cfg.probe.result, text);
  std::cout << text;
  return 0;
}

int cmd_visualize(const std::vector<std::string>& checkpoints, const std::string& scene_dir,
                  const std::string& prefix) {
  std::optional<Image2DNet> net2d;
  std::optional<Point3DNet> net3d;
  for (const auto& path : checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.stage == "stage1" && !net2d) {
      net2d = load_image_net(ck);
    } else if (ck.stage == "stage2" && !net3d) {
      net3d = load_point_net(ck);
    } else {
      throw UsageError("--checkpoint: '" + path + "' has stage '" + ck.stage +
                       "'; give at most one stage1 and one stage2 checkpoint");
    }
  }
  const SceneSample scene = load_scene(scene_dir, std::filesystem::path(scene_dir).filename().string());
  const HeatmapSet set = render_heatmaps(scene, net2d ? &*net2d : nullptr, net3d ? &*net3d : nullptr);
  for (const auto& p : write_heatmaps(set, prefix)) std::cout << "wrote " << p.string() << "\n";
  if (set.image && set.points)
    std::cout << "color_distance=" << detail::format_double(heatmap_distance(*set.image, *set.points)) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& corrupt, std::size_t trials) {
  if (!corrupt.empty()) {
    const auto op = op_from_name(corrupt);
    if (!op) throw UsageError("--corrupt: unknown op '" + corrupt + "'");
    set_gradient_corruption(*op);
  }
  std::vector<std::string> failing;
  for (const auto& c : run_gradcheck_suite(trials)) {
    std::printf("check=%s max_rel_err=%.6e\n", c.name.c_str(), c.result.max_rel_err);
    if (!(c.result.max_rel_err < 1e-4)) failing.push_back(c.name);
  }
  if (failing.empty()) return 0;
  std::string list;
  for (const auto& f : failing) list += (list.empty() ? "" : ", ") + f;
  std::cerr << "gradcheck failed: " << list << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  xmpt::tune_allocator();
  CLI::App app{"Cross-modal pixel-to-point contrastive pre-training"};
  app.require_subcommand(1);
  std::function<int()> run;

  std::string out, size = "64x64";
  std::size_t scenes = 0;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene corpus");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--scenes", scenes, "number of scenes")->required();
  gen->add_option("--seed", seed, "seed of the first scene");
  gen->add_option("--size", size, "image size HxW");
  gen->callback([&] { run = [&] { return cmd_gen_data(out, scenes, seed, size); }; });

  ConfigArgs args;
  auto* p2 = app.add_subcommand("pretrain2d", "Stage 1: pixel-level contrastive training of the 2D net");
  add_config_options(p2, args);
  p2->callback([&] { run = [&] { return cmd_pretrain2d(args); }; });

  std::string teacher;
  auto* p3 = app.add_subcommand("pretrain3d", "Stage 2: train the 3D net against a frozen 2D teacher");
  add_config_options(p3, args);
  p3->add_option("--teacher", teacher, "stage1 checkpoint")->required();
  p3->callback([&] { run = [&] { return cmd_pretrain3d(args, teacher); }; });

  std::string backbone;
  auto* pr = app.add_subcommand("probe", "Linear-probe segmentation on a frozen 3D backbone");
  add_config_options(pr, args);
  pr->add_option("--backbone", backbone, "stage2 checkpoint, or none");
  pr->callback([&] { run = [&] { return cmd_probe(args, backbone); }; });

  std::vector<std::string> checkpoints;
  std::string scene_dir, prefix;
  auto* vz = app.add_subcommand("visualize", "PCA heatmaps of 2D and/or 3D features");
  vz->add_option("--checkpoint", checkpoints, "stage1 and/or stage2 checkpoint")->required();
  vz->add_option("--scene", scene_dir, "scene directory")->required();
  vz->add_option("--out", prefix, "output prefix")->required();
  vz->callback([&] { run = [&] { return cmd_visualize(checkpoints, scene_dir, prefix); }; });

  std::string corrupt;
  std::size_t trials = 100;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and both models");
  gc->add_option("--corrupt", corrupt, "deliberately corrupt one op's gradient");
  gc->add_option("--trials", trials, "random instances per op");
  gc->callback([&] { run = [&] { return cmd_gradcheck(corrupt, trials); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const xmpt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
