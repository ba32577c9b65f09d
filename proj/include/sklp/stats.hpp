#pragma once

#include "sklp/corpus.hpp"

#include <string>
#include <vector>

namespace sklp::stats {

/// Bidirectional MTLD. A sequence that never drops below the threshold
/// (zero factors) scores its own length.
double mtld(const std::vector<std::string>& tokens, double ttr_threshold = 0.72);

struct CorpusStats {
  std::size_t records = 0;
  std::size_t tokens = 0;
  double mean_tokens = 0;
  double mtld = 0;  // over the concatenated token stream
};

CorpusStats corpus_stats(const std::vector<CorpusRecord>& records);

}  // namespace sklp::stats
