#include "sklp/objectives.hpp"

#include "sklp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sklp::objectives {

void Temperature::validate() const {
  if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError("temperature must be positive");
}

void LossWeights::validate() const {
  for (double w : {itc, itm, mlm}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be nonnegative");
  }
  if (itc == 0.0 && itm == 0.0 && mlm == 0.0) throw ConfigError("at least one loss weight must be positive");
}

FeatureQueue::FeatureQueue(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("feature queue capacity must be positive");
}

void FeatureQueue::push(const Vector& embedding, Modality modality, std::int64_t pair_id) {
  if (std::abs(embedding.norm() - 1.0) > 1e-4) throw ContractError("queued embeddings must be unit norm");
  if (!entries_.empty() && entries_.front().embedding.size() != embedding.size()) {
    throw ShapeError("queued embedding width changed");
  }
  entries_.push_back({embedding, modality, pair_id});
  while (entries_.size() > capacity_) entries_.pop_front();
}

QueueSnapshot FeatureQueue::snapshot(Eigen::Index dim) const {
  Eigen::Index ni = 0, nt = 0;
  for (const QueueEntry& e : entries_) (e.modality == Modality::image ? ni : nt) += 1;
  QueueSnapshot s{Matrix(ni, dim), Matrix(nt, dim), {}, {}};
  Eigen::Index ii = 0, it = 0;
  for (const QueueEntry& e : entries_) {
    if (e.embedding.size() != dim) throw ShapeError("queue snapshot width mismatch");
    if (e.modality == Modality::image) {
      s.images.row(ii++) = e.embedding.transpose();
      s.image_pair_ids.push_back(e.pair_id);
    } else {
      s.texts.row(it++) = e.embedding.transpose();
      s.text_pair_ids.push_back(e.pair_id);
    }
  }
  return s;
}

namespace {

void check_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > 1e-4) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " is not unit norm");
    }
  }
}

// −log(exp(x_pos) / Σ exp(x_k)) computed with a max shift.
double neg_log_softmax(const std::vector<double>& xs, std::size_t pos) {
  const double mx = *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s) - xs[pos];
}

bool excluded(std::span<const std::int64_t> pair_ids, const std::vector<std::int64_t>& queued_ids, Eigen::Index i,
              Eigen::Index q) {
  return !pair_ids.empty() && static_cast<std::size_t>(q) < queued_ids.size() &&
         queued_ids[static_cast<std::size_t>(q)] == pair_ids[static_cast<std::size_t>(i)];
}

double directional(const Matrix& queries, const Matrix& keys, const Matrix& queued,
                   const std::vector<std::int64_t>& queued_ids, std::span<const std::int64_t> pair_ids, double tau) {
  const Eigen::Index b = queries.rows();
  double total = 0.0;
  std::vector<double> logits;
  for (Eigen::Index i = 0; i < b; ++i) {
    logits.clear();
    for (Eigen::Index j = 0; j < b; ++j) logits.push_back(queries.row(i).dot(keys.row(j)) / tau);
    for (Eigen::Index q = 0; q < queued.rows(); ++q) {
      if (!excluded(pair_ids, queued_ids, i, q)) logits.push_back(queries.row(i).dot(queued.row(q)) / tau);
    }
    total += neg_log_softmax(logits, static_cast<std::size_t>(i));
  }
  return total / static_cast<double>(b);
}

}  // namespace

double itc_loss(const Matrix& images, const Matrix& texts, const QueueSnapshot& queue, Temperature tau,
                std::span<const std::int64_t> pair_ids) {
  tau.validate();
  if (images.rows() < 1 || images.rows() != texts.rows()) throw ShapeError("itc_loss needs B >= 1 paired rows");
  if (!pair_ids.empty() && static_cast<Eigen::Index>(pair_ids.size()) != images.rows()) {
    throw ShapeError("itc_loss needs one pair id per batch row");
  }
  if (images.cols() != texts.cols()) throw ShapeError("itc_loss embedding widths differ");
  if ((queue.texts.rows() > 0 && queue.texts.cols() != images.cols()) ||
      (queue.images.rows() > 0 && queue.images.cols() != images.cols())) {
    throw ShapeError("itc_loss queue width differs from batch");
  }
  check_unit_rows(images, "image");
  check_unit_rows(texts, "text");
  const double i2t = directional(images, texts, queue.texts, queue.text_pair_ids, pair_ids, tau.value);
  const double t2i = directional(texts, images, queue.images, queue.image_pair_ids, pair_ids, tau.value);
  return 0.5 * (i2t + t2i);
}

double itm_loss(double p, int y) {
  constexpr double eps = 1e-12;
  if (y != 0 && y != 1) throw UsageError("itm label must be 0 or 1");
  const double q = std::clamp(p, eps, 1.0 - eps);
  return y == 1 ? -std::log(q) : -std::log1p(-q);
}

double mlm_loss(const Matrix& logits, std::span<const int> target_ids, std::span<const std::size_t> masked_positions) {
  if (masked_positions.empty()) throw UsageError("mlm_loss requires at least one masked position");
  if (static_cast<Eigen::Index>(target_ids.size()) != logits.rows()) {
    throw ShapeError("mlm_loss: one target id per logit row required");
  }
  double total = 0.0;
  std::vector<double> row;
  for (std::size_t pos : masked_positions) {
    if (static_cast<Eigen::Index>(pos) >= logits.rows()) throw ShapeError("masked position out of range");
    const int t = target_ids[pos];
    if (t < 0 || t >= logits.cols()) throw VocabularyError("target id out of range");
    row.assign(logits.row(static_cast<Eigen::Index>(pos)).data(),
               logits.row(static_cast<Eigen::Index>(pos)).data() + logits.cols());
    total += neg_log_softmax(row, static_cast<std::size_t>(t));
  }
  return total / static_cast<double>(masked_positions.size());
}

double total_loss(double l_itc, double l_itm, double l_mlm, const LossWeights& w) {
  return w.itc * l_itc + w.itm * l_itm + w.mlm * l_mlm;
}

ad::Var itc_loss(ad::Graph& g, ad::Var images, ad::Var texts, const QueueSnapshot& queue, Temperature tau,
                 std::span<const std::int64_t> pair_ids) {
  tau.validate();
  const Eigen::Index b = g.value(images).rows();
  if (b < 1 || g.value(texts).rows() != b) throw ShapeError("itc_loss needs B >= 1 paired rows");
  if (!pair_ids.empty() && static_cast<Eigen::Index>(pair_ids.size()) != b) {
    throw ShapeError("itc_loss needs one pair id per batch row");
  }
  std::vector<int> targets(static_cast<std::size_t>(b));
  std::iota(targets.begin(), targets.end(), 0);

  auto direction = [&](ad::Var q, ad::Var k, const Matrix& queued, const std::vector<std::int64_t>& queued_ids) {
    ad::Var keys = k;
    if (queued.rows() > 0) keys = ad::concat_rows(g, {k, g.constant(queued, "queue")});
    ad::Var logits = ad::scale(g, ad::matmul_nt(g, q, keys), 1.0 / tau.value);
    bool any = false;
    Matrix block = Matrix::Zero(b, b + queued.rows());
    for (Eigen::Index i = 0; i < b; ++i) {
      for (Eigen::Index r = 0; r < queued.rows(); ++r) {
        if (excluded(pair_ids, queued_ids, i, r)) {
          block(i, b + r) = -1e30;
          any = true;
        }
      }
    }
    if (any) logits = ad::add(g, logits, g.constant(std::move(block), "queue_exclusion"));
    return ad::cross_entropy_rows(g, logits, targets);
  };
  ad::Var i2t = direction(images, texts, queue.texts, queue.text_pair_ids);
  ad::Var t2i = direction(texts, images, queue.images, queue.image_pair_ids);
  return ad::weighted_sum(g, {i2t, t2i}, {0.5, 0.5});
}

ad::Var total_loss(ad::Graph& g, ad::Var l_itc, ad::Var l_itm, ad::Var l_mlm, const LossWeights& w) {
  return ad::weighted_sum(g, {l_itc, l_itm, l_mlm}, {w.itc, w.itm, w.mlm});
}

}  // namespace sklp::objectives
