#pragma once

#include "sklp/autodiff.hpp"

#include <cstdint>
#include <deque>
#include <span>
#include <vector>

namespace sklp::objectives {

using ad::Matrix;
using ad::Vector;

struct Temperature {
  double value = 0.07;
  void validate() const;
};

struct LossWeights {
  double itc = 1.0;
  double itm = 1.0;
  double mlm = 1.0;

  void validate() const;
  /// Alignment-weighted preset (0.4, 0.3, 0.3).
  static LossWeights alignment_weighted() { return {0.4, 0.3, 0.3}; }
};

enum class Modality { image, text };

struct QueueEntry {
  Vector embedding;
  Modality modality;
  std::int64_t pair_id = -1;
};

/// Immutable view of the queue at one instant, split by modality.
struct QueueSnapshot {
  Matrix images;  // one unit-norm row per queued image embedding
  Matrix texts;
  std::vector<std::int64_t> image_pair_ids;
  std::vector<std::int64_t> text_pair_ids;

  bool empty() const { return images.rows() == 0 && texts.rows() == 0; }
};

/// Fixed-capacity FIFO of detached unit-norm embeddings used as extra
/// contrastive negatives. Both modalities share one eviction order.
class FeatureQueue {
 public:
  explicit FeatureQueue(std::size_t capacity);

  void push(const Vector& embedding, Modality modality, std::int64_t pair_id = -1);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<QueueEntry>& entries() const { return entries_; }
  QueueSnapshot snapshot(Eigen::Index dim) const;

 private:
  std::size_t capacity_;
  std::deque<QueueEntry> entries_;
};

/// Symmetric InfoNCE over a batch plus queued negatives of the opposite
/// modality. Rows of `images` and `texts` are paired and must be unit norm
/// (within 1e-4). When `pair_ids` is given, queued entries carrying the
/// query's own pair id are left out of its negatives.
double itc_loss(const Matrix& images, const Matrix& texts, const QueueSnapshot& queue, Temperature tau,
                std::span<const std::int64_t> pair_ids = {});
/// Binary cross-entropy; p is clamped to [1e-12, 1 − 1e-12].
double itm_loss(double p, int y);
/// Mean over `masked_positions` of −log softmax(logits_i)[target_i].
double mlm_loss(const Matrix& logits, std::span<const int> target_ids, std::span<const std::size_t> masked_positions);
double total_loss(double l_itc, double l_itm, double l_mlm, const LossWeights& w);

// Differentiable counterparts used during training.
ad::Var itc_loss(ad::Graph& g, ad::Var images, ad::Var texts, const QueueSnapshot& queue, Temperature tau,
                 std::span<const std::int64_t> pair_ids = {});
ad::Var total_loss(ad::Graph& g, ad::Var l_itc, ad::Var l_itm, ad::Var l_mlm, const LossWeights& w);

}  // namespace sklp::objectives
