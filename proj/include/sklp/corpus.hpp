#pragma once

// Image-text corpus records and their token-level encoding.

#include "sklp/autodiff.hpp"
#include "sklp/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace sklp {

inline constexpr int kSegmentsPerText = 8;

/// Half-open token range [begin, end) into an encoded sequence.
using Span = std::pair<int, int>;

struct CorpusRecord {
  std::int64_t pair_id = 0;
  std::string image_path;  // relative to the corpus directory
  std::vector<std::string> segments;
  std::string tier = "L";
  std::optional<std::string> parent_id;
  nlohmann::json geo = nlohmann::json::object();
  std::optional<std::vector<int>> planted;  // synthetic data only

  /// Throws DataError for a wrong segment count or missing parent link.
  void validate() const;
  std::string text() const;
  bool operator==(const CorpusRecord&) const = default;
};

nlohmann::json to_json(const CorpusRecord& r);
CorpusRecord record_from_json(const nlohmann::json& j);

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& jsonl);
void write_corpus(const std::filesystem::path& jsonl, const std::vector<CorpusRecord>& records);

/// `[cls] tokens(seg0) tokens(seg1) ...` with one span per segment. A skipped
/// segment gets an empty span at the position where it would have started.
struct EncodedText {
  std::vector<int> ids;
  std::vector<Span> spans;
};

EncodedText encode_segments(const model::Vocabulary& vocab, const std::vector<std::string>& segments,
                            int skip_segment = -1);

/// 8-bit PGM scaled to [0,1].
ad::Matrix load_image(const std::filesystem::path& path);

}  // namespace sklp
