#pragma once

// InfoNCE over row-aligned anchor/positive features with sampled negatives.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmpt/rng.hpp"
#include "xmpt/tensor.hpp"

namespace xmpt {

inline constexpr std::size_t kFeatureDim = 16;
inline constexpr double kDefaultTemperature = 0.4;
inline constexpr std::size_t kDefaultNegatives = 1024;
inline constexpr double kUnitNormTolerance = 1e-6;

enum class NegativeMode {
  kKeySide,     // other rows of the positives (target bank)
  kAnchorSide,  // other rows of the anchors
};

struct ContrastiveBatch {
  Tensor anchors;                   // N×D
  Tensor positives;                 // N×D, row i pairs with anchors row i
  std::optional<Tensor> negatives;  // explicit M×D bank; overrides `mode`
  double temperature = kDefaultTemperature;
  std::size_t negatives_per_anchor = kDefaultNegatives;
  NegativeMode mode = NegativeMode::kKeySide;
};

class ContrastiveError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require_unit_rows(const Tensor& t, const char* what) {
  const std::size_t d = t.shape().back();
  const auto v = t.data();
  for (std::size_t r = 0; r < t.numel() / d; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += v[r * d + c] * v[r * d + c];
    if (std::abs(std::sqrt(s) - 1.0) > kUnitNormTolerance)
      throw ContrastiveError(std::string("info_nce: ") + what + " row " + std::to_string(r) + " has norm " +
                             std::to_string(std::sqrt(s)) + ", expected unit length");
  }
}

// Per anchor, k column indices into the bank. When the bank is the positives
// or anchors themselves, column i is excluded for anchor i.
inline std::vector<std::size_t> sample_negative_columns(std::size_t n, std::size_t bank, bool exclude_self,
                                                        std::size_t k, Rng& rng) {
  const std::size_t candidates = exclude_self ? bank - 1 : bank;
  std::vector<std::size_t> cols;
  cols.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    auto remap = [&](std::size_t c) { return exclude_self && c >= i ? c + 1 : c; };
    if (k == candidates) {
      for (std::size_t c = 0; c < candidates; ++c) cols.push_back(remap(c));
    } else {
      for (std::size_t c : sample_without_replacement(candidates, k, rng)) cols.push_back(remap(c));
    }
  }
  return cols;
}

}  // namespace detail

/// Mean over anchors of −log softmax of the positive logit against up to K
/// sampled negative logits, all similarities divided by the temperature.
inline Tensor info_nce(const ContrastiveBatch& batch, Rng& rng) {
  if (!batch.anchors.defined() || !batch.positives.defined())
    throw ContrastiveError("info_nce: empty batch (N = 0)");
  if (batch.anchors.rank() != 2 || batch.anchors.shape() != batch.positives.shape())
    throw ContrastiveError("info_nce: anchors " + to_string(batch.anchors.shape()) + " and positives " +
                           to_string(batch.positives.shape()) + " must be matching N×D");
  if (!(batch.temperature > 0.0)) throw ContrastiveError("info_nce: temperature must be positive");
  detail::require_unit_rows(batch.anchors, "anchor");
  detail::require_unit_rows(batch.positives, "positive");

  const std::size_t n = batch.anchors.dim(0);
  Tensor bank;
  bool exclude_self = true;
  if (batch.negatives) {
    bank = *batch.negatives;
    exclude_self = false;
    if (bank.rank() != 2 || bank.dim(1) != batch.anchors.dim(1))
      throw ContrastiveError("info_nce: negatives " + to_string(bank.shape()) + " do not match feature width");
    detail::require_unit_rows(bank, "negative");
  } else {
    bank = batch.mode == NegativeMode::kKeySide ? batch.positives : batch.anchors;
  }
  const std::size_t candidates = exclude_self ? bank.dim(0) - 1 : bank.dim(0);
  const std::size_t k = std::min(batch.negatives_per_anchor, candidates);
  const double inv_tau = 1.0 / batch.temperature;

  Tensor pos = sum(mul(batch.anchors, batch.positives), 1, true);  // N×1
  Tensor logits = pos;
  if (k > 0) {
    const auto cols = detail::sample_negative_columns(n, bank.dim(0), exclude_self, k, rng);
    Tensor sims = matmul(batch.anchors, transpose(bank));  // N×M
    logits = concat({pos, take_along_rows(sims, cols, k)}, 1);
  }
  logits = scalar_mul(logits, inv_tau);

  // Row max as a constant shift; the loss is invariant to it.
  std::vector<double> row_max(n);
  const std::size_t width = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double m = logits[i * width];
    for (std::size_t j = 1; j < width; ++j) m = std::max(m, logits[i * width + j]);
    row_max[i] = m;
  }
  Tensor shifted = sub(logits, Tensor::from({n, 1}, std::move(row_max)));
  Tensor log_norm = log(sum(exp(shifted), 1, true));  // N×1
  const std::vector<std::size_t> first(n, 0);
  Tensor pos_shifted = take_along_rows(shifted, first, 1);
  return mean(sub(log_norm, pos_shifted));
}

struct SimilarityStats {
  double mean_pos_sim = 0.0;
  double mean_neg_sim = 0.0;
};

/// Mean cosine of aligned pairs and of every (anchor, negative) pair.
inline SimilarityStats similarity_stats(const Tensor& anchors, const Tensor& positives, const Tensor& negatives) {
  if (!anchors.defined() || !positives.defined() || !negatives.defined())
    throw ContrastiveError("similarity_stats: empty inputs");
  if (anchors.shape() != positives.shape() || negatives.dim(1) != anchors.dim(1))
    throw ContrastiveError("similarity_stats: shape mismatch");
  NoGradGuard no_grad;
  const std::size_t n = anchors.dim(0), d = anchors.dim(1), m = negatives.dim(0);
  const auto a = anchors.data(), p = positives.data(), q = negatives.data();
  SimilarityStats s;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) s.mean_pos_sim += a[i * d + c] * p[i * d + c];
  s.mean_pos_sim /= static_cast<double>(n);
  // sum_i sum_j a_i·q_j = (sum_i a_i)·(sum_j q_j)
  std::vector<double> sa(d, 0.0), sq(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) sa[c] += a[i * d + c];
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) sq[c] += q[j * d + c];
  for (std::size_t c = 0; c < d; ++c) s.mean_neg_sim += sa[c] * sq[c];
  s.mean_neg_sim /= static_cast<double>(n * m);
  return s;
}

/// In-batch form: negatives of anchor i are the positives j ≠ i.
inline SimilarityStats similarity_stats(const Tensor& anchors, const Tensor& positives) {
  if (!anchors.defined() || !positives.defined()) throw ContrastiveError("similarity_stats: empty inputs");
  const std::size_t n = anchors.dim(0);
  SimilarityStats s = similarity_stats(anchors, positives, positives);
  if (n < 2) {
    s.mean_neg_sim = 0.0;
    return s;
  }
  // Remove the diagonal from the all-pairs mean.
  const double diag_sum = s.mean_pos_sim * static_cast<double>(n);
  const double all_sum = s.mean_neg_sim * static_cast<double>(n * n);
  s.mean_neg_sim = (all_sum - diag_sum) / static_cast<double>(n * (n - 1));
  return s;
}

}  // namespace xmpt
