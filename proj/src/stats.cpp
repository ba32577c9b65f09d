#include "sklp/stats.hpp"

#include "sklp/errors.hpp"
#include "sklp/tokenizer.hpp"

#include <unordered_set>

namespace sklp::stats {

namespace {

double factors(auto begin, auto end, double threshold) {
  double count = 0.0;
  std::unordered_set<std::string> types;
  std::size_t n = 0;
  double ttr = 1.0;
  for (auto it = begin; it != end; ++it) {
    types.insert(*it);
    ++n;
    ttr = static_cast<double>(types.size()) / static_cast<double>(n);
    if (ttr < threshold) {
      count += 1.0;
      types.clear();
      n = 0;
      ttr = 1.0;
    }
  }
  if (n > 0) count += (1.0 - ttr) / (1.0 - threshold);
  return count;
}

}  // namespace

double mtld(const std::vector<std::string>& tokens, double ttr_threshold) {
  if (tokens.empty()) throw UsageError("mtld of an empty token sequence");
  if (!(ttr_threshold > 0.0 && ttr_threshold < 1.0)) throw ConfigError("ttr threshold must lie in (0, 1)");
  const double len = static_cast<double>(tokens.size());
  auto one_pass = [&](double f) { return f > 0.0 ? len / f : len; };
  const double fwd = one_pass(factors(tokens.begin(), tokens.end(), ttr_threshold));
  const double bwd = one_pass(factors(tokens.rbegin(), tokens.rend(), ttr_threshold));
  return 0.5 * (fwd + bwd);
}

CorpusStats corpus_stats(const std::vector<CorpusRecord>& records) {
  CorpusStats s;
  std::vector<std::string> stream;
  for (const CorpusRecord& r : records) {
    for (const std::string& seg : r.segments) {
      for (std::string& t : model::tokenize(seg)) stream.push_back(std::move(t));
    }
  }
  s.records = records.size();
  s.tokens = stream.size();
  s.mean_tokens = records.empty() ? 0.0 : static_cast<double>(s.tokens) / static_cast<double>(records.size());
  s.mtld = stream.empty() ? 0.0 : mtld(stream);
  return s;
}

}  // namespace sklp::stats
