#include "sklp/retrieval.hpp"

#include "sklp/errors.hpp"
#include "sklp/parallel.hpp"

#include <cstdio>

namespace sklp::retrieval {

std::string RetrievalResult::to_string() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "txt_r1=%.4f txt_r5=%.4f txt_r10=%.4f img_r1=%.4f img_r5=%.4f img_r10=%.4f mean_r=%.4f", txt_r1,
                txt_r5, txt_r10, img_r1, img_r5, img_r10, mean_r);
  return buf;
}

namespace {

// Zero-based rank of candidate `truth` among scores(k) for k in [0, n).
Eigen::Index rank_of(const auto& scores, Eigen::Index truth) {
  Eigen::Index rank = 0;
  const double t = scores(truth);
  for (Eigen::Index k = 0; k < scores.size(); ++k) {
    if (scores(k) > t || (scores(k) == t && k < truth)) ++rank;
  }
  return rank;
}

}  // namespace

RetrievalResult recall_from_similarity(const ad::Matrix& sim) {
  const Eigen::Index n = sim.rows();
  if (n == 0 || sim.cols() != n) throw ShapeError("similarity matrix must be square and nonempty");
  RetrievalResult r;
  for (Eigen::Index q = 0; q < n; ++q) {
    const Eigen::Index ti = rank_of(sim.col(q), q);  // text q against every image
    const Eigen::Index ii = rank_of(sim.row(q), q);  // image q against every text
    r.txt_r1 += ti < 1;
    r.txt_r5 += ti < 5;
    r.txt_r10 += ti < 10;
    r.img_r1 += ii < 1;
    r.img_r5 += ii < 5;
    r.img_r10 += ii < 10;
  }
  const double dn = static_cast<double>(n);
  for (double* v : {&r.txt_r1, &r.txt_r5, &r.txt_r10, &r.img_r1, &r.img_r5, &r.img_r10}) *v /= dn;
  r.mean_r = (r.txt_r1 + r.txt_r5 + r.txt_r10 + r.img_r1 + r.img_r5 + r.img_r10) / 6.0;
  return r;
}

RetrievalResult eval_retrieval(const model::ParamSet& params, std::span<const ad::Matrix> images,
                               std::span<const std::vector<int>> texts, unsigned threads) {
  if (images.size() != texts.size()) throw ShapeError("eval_retrieval needs paired images and texts");
  if (images.size() < 10) throw UsageError("eval_retrieval needs at least 10 pairs");
  const auto n = static_cast<Eigen::Index>(images.size());
  const int d = params.config().embed_dim;
  ad::Matrix img(n, d), txt(n, d);
  parallel_for(images.size(), threads, [&](std::size_t i) {
    img.row(static_cast<Eigen::Index>(i)) = model::encode_image(params, images[i]).global.transpose();
    txt.row(static_cast<Eigen::Index>(i)) = model::encode_text(params, texts[i]).global.transpose();
  });
  return recall_from_similarity(img * txt.transpose());
}

}  // namespace sklp::retrieval
