#pragma once

// Training loops: Stage 1 (pixel contrast between two augmented views of an
// image), Stage 2 (point features contrasted against a frozen 2D teacher's
// pixel features), and a linear probe scoring a 3D backbone by mIoU.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmpt/augment.hpp"
#include "xmpt/checkpoint.hpp"
#include "xmpt/config.hpp"
#include "xmpt/contrastive.hpp"
#include "xmpt/geometry.hpp"
#include "xmpt/models.hpp"
#include "xmpt/optim.hpp"
#include "xmpt/scenegen.hpp"

namespace xmpt {

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0, pos_sim = 0.0, neg_sim = 0.0;
};

inline std::string format_step(const StepLog& s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "step=%zu loss=%.6f pos_sim=%.6f neg_sim=%.6f", s.step, s.loss, s.pos_sim,
                s.neg_sim);
  return buf;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per completed step
  std::size_t skipped = 0;
};

/// Mean of the first and last `window` entries.
inline std::pair<double, double> smoothed_ends(const std::vector<double>& v, std::size_t window = 50) {
  if (v.empty()) return {0.0, 0.0};
  const std::size_t w = std::min(window, v.size());
  const double head = std::accumulate(v.begin(), v.begin() + static_cast<long>(w), 0.0) / static_cast<double>(w);
  const double tail = std::accumulate(v.end() - static_cast<long>(w), v.end(), 0.0) / static_cast<double>(w);
  return {head, tail};
}

// ---------------------------------------------------------------------------
// Data

inline std::vector<SceneSample> load_scenes(const std::string& manifest, std::size_t limit = 0,
                                            std::size_t offset = 0) {
  const SceneManifest m = load_manifest(manifest);
  std::vector<SceneSample> out;
  for (std::size_t i = offset; i < m.scenes.size() && (limit == 0 || out.size() < limit); ++i)
    out.push_back(load_scene(m.scenes[i]));
  if (out.empty()) throw PipelineError("dataset '" + manifest + "' is empty");
  return out;
}

inline Image2DNet load_image_net(const Checkpoint& ck) {
  if (ck.stage != "stage1") throw PipelineError("expected a stage1 (2D) checkpoint, got stage '" + ck.stage + "'");
  Image2DNet net;
  assign_parameters(net.parameters(), ck.to_parameters(), "2D checkpoint");
  return net;
}

inline Point3DNet load_point_net(const Checkpoint& ck) {
  if (ck.stage != "stage2") throw PipelineError("expected a stage2 (3D) checkpoint, got stage '" + ck.stage + "'");
  Point3DNet net;
  assign_parameters(net.parameters(), ck.to_parameters(), "3D checkpoint");
  return net;
}

namespace detail {

inline Checkpoint make_checkpoint(const ParameterList& params, const char* stage, std::size_t steps,
                                  const RunConfig& cfg) {
  Checkpoint ck = Checkpoint::from_parameters(params);
  ck.stage = stage;
  ck.step = steps;
  ck.seed = cfg.seed;
  ck.config_hash = config_hash(cfg);
  return ck;
}

inline std::vector<std::size_t> pick_batch(std::size_t n, std::size_t batch, Rng& rng) {
  if (batch <= n) return sample_without_replacement(n, batch, rng);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = uniform_index(rng, n);
  return out;
}

inline void emit(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n' << std::flush;
}

// Pixel features of view rows (v*W + u) for the given coordinates.
inline std::vector<std::size_t> pixel_rows(const std::vector<PixelPair>& pairs, std::size_t width, bool side_a) {
  std::vector<std::size_t> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) {
    const PixelCoord c = side_a ? p.a : p.b;
    rows.push_back(c.v * width + c.u);
  }
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1

/// Two augmented views per image; anchors are view-A pixels, positives the
/// matching view-B pixels, negatives every other positive in the batch.
inline TrainResult train_stage1(const RunConfig& cfg, const std::vector<Image>& images, Image2DNet& net,
                                std::ostream* log = nullptr) {
  if (images.empty()) throw PipelineError("stage1: dataset is empty");
  validate(cfg);
  Rng rng = derive_rng(cfg.seed, 0x51);
  Adam opt(net.parameters(), {.lr = cfg.stage1.lr});
  TrainResult result;
  for (std::size_t step = 1; step <= cfg.stage1.steps; ++step) {
    GraphScope scope;
    std::vector<Tensor> anchors, positives;
    for (std::size_t idx : detail::pick_batch(images.size(), cfg.stage1.batch_size, rng)) {
      const AugmentedView va = augment_image(images[idx], rng, cfg.augment2d);
      const AugmentedView vb = augment_image(images[idx], rng, cfg.augment2d);
      const auto pairs = sample_positive_pixels(va, vb, cfg.stage1.pairs, rng);
      if (pairs.empty()) continue;
      const Tensor fa = reshape(net.forward(va.image), {va.image.pixels(), kOutputChannels});
      const Tensor fb = reshape(net.forward(vb.image), {vb.image.pixels(), kOutputChannels});
      anchors.push_back(gather_rows(fa, detail::pixel_rows(pairs, va.image.width, true)));
      positives.push_back(gather_rows(fb, detail::pixel_rows(pairs, vb.image.width, false)));
    }
    if (anchors.empty()) {
      ++result.skipped;
      detail::emit(log, "# step=" + std::to_string(step) + " skipped: no crop overlap in batch");
      continue;
    }
    const Tensor a = anchors.size() == 1 ? anchors[0] : concat(anchors, 0);
    const Tensor p = positives.size() == 1 ? positives[0] : concat(positives, 0);
    const Tensor loss = info_nce({a, p, std::nullopt, cfg.tau, cfg.k, cfg.negatives}, rng);
    backward(loss);
    opt.step();
    opt.zero_grad();
    result.losses.push_back(loss.item());
    if (step % cfg.stage1.log_interval == 0 || step == 1) {
      const SimilarityStats s = similarity_stats(a, p);
      detail::emit(log, format_step({step, loss.item(), s.mean_pos_sim, s.mean_neg_sim}));
    }
  }
  result.checkpoint = detail::make_checkpoint(net.parameters(), "stage1", cfg.stage1.steps, cfg);
  return result;
}

/// Positive/negative cosine on fresh augmentations the trainer never drew.
/// Negatives of a pair are the positives of all other pairs, across images.
inline SimilarityStats evaluate_stage1(const Image2DNet& net, const std::vector<Image>& images,
                                       const Augment2DConfig& aug, std::size_t pairs_per_image, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng = derive_rng(seed, 0xE1);
  std::vector<Tensor> anchors, positives;
  for (const auto& img : images) {
    const AugmentedView va = augment_image(img, rng, aug);
    const AugmentedView vb = augment_image(img, rng, aug);
    const auto pairs = sample_positive_pixels(va, vb, pairs_per_image, rng);
    if (pairs.empty()) continue;
    const Tensor fa = reshape(net.forward(va.image), {va.image.pixels(), kOutputChannels});
    const Tensor fb = reshape(net.forward(vb.image), {vb.image.pixels(), kOutputChannels});
    anchors.push_back(gather_rows(fa, detail::pixel_rows(pairs, va.image.width, true)));
    positives.push_back(gather_rows(fb, detail::pixel_rows(pairs, vb.image.width, false)));
  }
  if (anchors.empty()) throw PipelineError("evaluate_stage1: no overlapping views");
  return similarity_stats(concat(anchors, 0), concat(positives, 0));
}

// ---------------------------------------------------------------------------
// Stage 2

struct TeacherView {
  Tensor features;                         // H·W × 16, no graph
  std::vector<std::ptrdiff_t> pixel_of;    // per source point: pixel row, or −1
};

/// Frozen teacher features and point→pixel matches for a scene.
inline TeacherView teacher_view(const Image2DNet& teacher, const SceneSample& scene) {
  NoGradGuard no_grad;
  TeacherView tv;
  tv.features = reshape(teacher.forward(scene.image), {scene.image.pixels(), kOutputChannels}).detach();
  tv.pixel_of.assign(scene.cloud.size(), -1);
  const CorrespondenceSet cs = build_correspondences(scene.cloud, scene.camera, &scene.depth);
  for (const auto& c : cs.pairs)
    tv.pixel_of[c.point] = static_cast<std::ptrdiff_t>(c.pixel.v * scene.camera.width + c.pixel.u);
  return tv;
}

namespace detail {

inline std::vector<std::uint32_t> parameter_bits(const ParameterList& params) {
  std::vector<std::uint32_t> bits;
  for (const auto& p : params)
    for (double v : p.tensor.data()) {
      const auto u = std::bit_cast<std::uint64_t>(v);
      bits.push_back(static_cast<std::uint32_t>(u));
      bits.push_back(static_cast<std::uint32_t>(u >> 32));
    }
  return bits;
}

}  // namespace detail

/// Point features are trained to match the frozen teacher's pixel features.
/// Matches come from the un-augmented cloud and are carried through the
/// augmentation's index map.
inline TrainResult train_stage2(const RunConfig& cfg, const std::vector<SceneSample>& scenes,
                                const Image2DNet& teacher, Point3DNet& student, std::ostream* log = nullptr) {
  if (scenes.empty()) throw PipelineError("stage2: dataset is empty");
  validate(cfg);
  const auto teacher_before = detail::parameter_bits(teacher.parameters());
  std::vector<TeacherView> views;
  views.reserve(scenes.size());
  for (const auto& s : scenes) views.push_back(teacher_view(teacher, s));

  Rng rng = derive_rng(cfg.seed, 0x52);
  Adam opt(student.parameters(), {.lr = cfg.stage2.lr});
  TrainResult result;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t step = 1; step <= cfg.stage2.steps; ++step) {
    GraphScope scope;
    std::vector<Tensor> anchors, positives;
    for (std::size_t b = 0; b < cfg.stage2.batch_size; ++b) {
      if (cursor == order.size()) {
        order.resize(scenes.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle(std::span<std::size_t>(order), rng);
        cursor = 0;
      }
      const std::size_t si = order[cursor++];
      const AugmentedCloud aug = augment_cloud(scenes[si].cloud, rng, cfg.augment3d);
      std::vector<std::size_t> rows, pixels;
      for (std::size_t k = 0; k < aug.size(); ++k) {
        const auto px = views[si].pixel_of[aug.index_map[k]];
        if (px < 0) continue;
        rows.push_back(k);
        pixels.push_back(static_cast<std::size_t>(px));
      }
      if (rows.empty()) {
        detail::emit(log, "# step=" + std::to_string(step) + " skipped scene " + scenes[si].scene_id +
                              ": no correspondences");
        continue;
      }
      if (rows.size() > cfg.stage2.anchors) {
        auto pick = sample_without_replacement(rows.size(), cfg.stage2.anchors, rng);
        std::sort(pick.begin(), pick.end());
        std::vector<std::size_t> r2, p2;
        for (auto i : pick) {
          r2.push_back(rows[i]);
          p2.push_back(pixels[i]);
        }
        rows.swap(r2);
        pixels.swap(p2);
      }
      const Tensor feats = student.forward(cloud_tensor(aug.points, aug.colors));
      anchors.push_back(gather_rows(feats, rows));
      positives.push_back(gather_rows(views[si].features, pixels));
    }
    if (anchors.empty()) {
      ++result.skipped;
      continue;
    }
    const Tensor a = anchors.size() == 1 ? anchors[0] : concat(anchors, 0);
    const Tensor p = positives.size() == 1 ? positives[0] : concat(positives, 0);
    if (p.has_node() || p.requires_grad()) throw PipelineError("stage2: teacher features are attached to the graph");
    const Tensor loss = info_nce({a, p, std::nullopt, cfg.tau, cfg.k, cfg.negatives}, rng);
    backward(loss);
    opt.step();
    opt.zero_grad();
    result.losses.push_back(loss.item());
    if (step % cfg.stage2.log_interval == 0 || step == 1) {
      const SimilarityStats s = similarity_stats(a, p);
      detail::emit(log, format_step({step, loss.item(), s.mean_pos_sim, s.mean_neg_sim}));
    }
  }
  if (detail::parameter_bits(teacher.parameters()) != teacher_before)
    throw PipelineError("stage2: frozen 2D parameters changed during training");
  result.checkpoint = detail::make_checkpoint(student.parameters(), "stage2", cfg.stage2.steps, cfg);
  return result;
}

/// Mean cosine between each matched point's feature (un-augmented cloud)
/// and the teacher's feature at its pixel, pooled over scenes.
inline double evaluate_mimicry(const Point3DNet& student, const Image2DNet& teacher,
                               const std::vector<SceneSample>& scenes) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : scenes) {
    const TeacherView tv = teacher_view(teacher, s);
    const Tensor f = student.forward(cloud_tensor(s.cloud));
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      if (tv.pixel_of[i] < 0) continue;
      const auto px = static_cast<std::size_t>(tv.pixel_of[i]);
      double d = 0.0;
      for (std::size_t c = 0; c < kOutputChannels; ++c)
        d += f[i * kOutputChannels + c] * tv.features[px * kOutputChannels + c];
      total += d;
      ++count;
    }
  }
  if (count == 0) throw PipelineError("evaluate_mimicry: no correspondences");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeResult {
  std::vector<double> iou;    // per class; 0 for classes absent from ground truth
  std::vector<bool> present;  // class occurs in ground truth
  double miou = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][predicted]
  std::uint64_t config_hash = 0;
};

inline ProbeResult score_predictions(const std::vector<std::uint16_t>& truth, const std::vector<std::uint16_t>& pred,
                                     std::size_t classes) {
  if (truth.size() != pred.size()) throw PipelineError("score_predictions: length mismatch");
  ProbeResult r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || pred[i] >= classes) throw PipelineError("score_predictions: label out of range");
    ++r.confusion[truth[i]][pred[i]];
  }
  r.iou.assign(classes, 0.0);
  r.present.assign(classes, false);
  std::size_t n_present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = r.confusion[c][c], row = 0, col = 0;
    for (std::size_t k = 0; k < classes; ++k) {
      row += r.confusion[c][k];
      col += r.confusion[k][c];
    }
    if (row == 0) continue;
    r.present[c] = true;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(row + col - tp);
    r.miou += r.iou[c];
    ++n_present;
  }
  if (n_present) r.miou /= static_cast<double>(n_present);
  return r;
}

/// Hash of everything the probe depends on except the backbone choice.
inline std::uint64_t probe_config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.probe.backbone = "";
  c.probe.result = "";
  return config_hash(c);
}

namespace detail {

// Mean softmax cross-entropy of row-shifted logits against class indices.
inline Tensor softmax_cross_entropy(const Tensor& shifted, const std::vector<std::size_t>& labels) {
  const Tensor log_norm = log(sum(exp(shifted), 1, true));
  return mean(sub(log_norm, take_along_rows(shifted, labels, 1)));
}

inline std::vector<double> backbone_features(const Point3DNet& net, const SceneSample& s) {
  NoGradGuard no_grad;
  const Tensor f = net.backbone(cloud_tensor(s.cloud));
  return {f.data().begin(), f.data().end()};
}

}  // namespace detail

/// Frozen backbone, fresh C-class linear head trained with softmax
/// cross-entropy on train scenes, mIoU on eval scenes.
inline ProbeResult linear_probe(const RunConfig& cfg, const Point3DNet& backbone,
                                const std::vector<SceneSample>& train, const std::vector<SceneSample>& eval,
                                std::size_t classes, const std::vector<std::string>& class_names = kDefaultClassNames,
                                std::ostream* log = nullptr) {
  if (train.empty() || eval.empty()) throw PipelineError("probe: train and eval splits must be non-empty");
  validate(cfg);
  constexpr std::size_t kWidth = Point3DNet::kBackboneWidth;

  std::vector<double> xs;
  std::vector<std::uint16_t> ys;
  for (const auto& s : train) {
    const auto f = detail::backbone_features(backbone, s);
    xs.insert(xs.end(), f.begin(), f.end());
    ys.insert(ys.end(), s.cloud.label.begin(), s.cloud.label.end());
  }
  std::vector<bool> seen(classes, false);
  for (auto y : ys) {
    if (y >= classes) throw PipelineError("probe: label " + std::to_string(y) + " out of range");
    seen[y] = true;
  }
  std::string missing;
  for (std::size_t c = 0; c < classes; ++c)
    if (!seen[c]) missing += (missing.empty() ? "" : ", ") + (c < class_names.size() ? class_names[c] : std::to_string(c));
  if (!missing.empty()) throw PipelineError("probe: classes absent from the train split: " + missing);

  const std::size_t n = ys.size();
  std::vector<double> mu(kWidth, 0.0), sigma(kWidth, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < kWidth; ++c) mu[c] += xs[i * kWidth + c];
  for (auto& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < kWidth; ++c) sigma[c] += (xs[i * kWidth + c] - mu[c]) * (xs[i * kWidth + c] - mu[c]);
  for (auto& s : sigma) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-8);
  auto standardize = [&](std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mu[i % kWidth]) / sigma[i % kWidth];
  };
  standardize(xs);

  Rng init = derive_rng(cfg.seed, 0x9E0BE);
  LinearLayer head(kWidth, classes, init);
  Adam opt({{"probe.weight", head.weight}, {"probe.bias", head.bias}}, {.lr = cfg.probe.lr});
  Rng order = derive_rng(cfg.seed, 0x9E0);
  const std::size_t bsz = std::min(cfg.probe.batch_points, n);
  for (std::size_t step = 1; step <= cfg.probe.steps; ++step) {
    GraphScope scope;
    std::vector<double> bx(bsz * kWidth);
    std::vector<std::size_t> by(bsz);
    for (std::size_t j = 0; j < bsz; ++j) {
      const std::size_t i = uniform_index(order, n);
      std::copy_n(xs.begin() + static_cast<long>(i * kWidth), kWidth, bx.begin() + static_cast<long>(j * kWidth));
      by[j] = ys[i];
    }
    const Tensor logits = head(Tensor::from({bsz, kWidth}, std::move(bx)));
    std::vector<double> row_max(bsz);
    for (std::size_t j = 0; j < bsz; ++j)
      row_max[j] = *std::max_element(logits.data().begin() + static_cast<long>(j * classes),
                                     logits.data().begin() + static_cast<long>((j + 1) * classes));
    const Tensor shifted = sub(logits, Tensor::from({bsz, 1}, std::move(row_max)));
    const Tensor loss = detail::softmax_cross_entropy(shifted, by);
    backward(loss);
    opt.step();
    opt.zero_grad();
    if (log && (step % 50 == 0 || step == 1))
      detail::emit(log, "probe step=" + std::to_string(step) + " loss=" + detail::format_double(loss.item()));
  }

  std::vector<std::uint16_t> truth, pred;
  NoGradGuard no_grad;
  for (const auto& s : eval) {
    auto f = detail::backbone_features(backbone, s);
    standardize(f);
    const Tensor logits = head(Tensor::from({s.cloud.size(), kWidth}, std::move(f)));
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      const auto row = logits.data().subspan(i * classes, classes);
      pred.push_back(static_cast<std::uint16_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      truth.push_back(s.cloud.label[i]);
    }
  }
  ProbeResult r = score_predictions(truth, pred, classes);
  r.config_hash = probe_config_hash(cfg);
  return r;
}

}  // namespace xmpt
