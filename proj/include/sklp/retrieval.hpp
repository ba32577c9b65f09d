#pragma once

#include "sklp/model.hpp"

#include <span>
#include <string>

namespace sklp::retrieval {

struct RetrievalResult {
  double txt_r1 = 0, txt_r5 = 0, txt_r10 = 0;  // text query -> image
  double img_r1 = 0, img_r5 = 0, img_r10 = 0;  // image query -> text
  double mean_r = 0;

  std::string to_string() const;
};

/// sim(i, j) = similarity of image i and text j. A query's rank counts the
/// candidates scoring strictly higher than its counterpart plus equal scores
/// at lower indices.
RetrievalResult recall_from_similarity(const ad::Matrix& sim);

/// Cosine similarity of image and text globals; rows are paired.
RetrievalResult eval_retrieval(const model::ParamSet& params, std::span<const ad::Matrix> images,
                               std::span<const std::vector<int>> texts, unsigned threads = 1);

}  // namespace sklp::retrieval
