#pragma once

// Segment-level noise screening, masked reconstruction and the staged
// self-consistent optimisation loop.

#include "sklp/corpus.hpp"
#include "sklp/model.hpp"
#include "sklp/objectives.hpp"
#include "sklp/train.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace sklp::scio {

/// Frozen model and negatives shared by every screening decision of one round.
struct Snapshot {
  std::string id;
  model::ParamSet params;
  objectives::QueueSnapshot queue;
  double temperature = 0.07;
};

nlohmann::json queue_to_json(const objectives::QueueSnapshot& q);
objectives::QueueSnapshot queue_from_json(const nlohmann::json& j);
/// Writes <dir>/<id>.sklp and <dir>/<id>.queue.json.
void save_snapshot(const Snapshot& s, const std::filesystem::path& dir);
Snapshot load_snapshot(const std::string& id, const std::filesystem::path& dir, double temperature);

struct SegmentDeltas {
  double itc = 0;  // L_itc(removed or replaced) - L_itc(original)
  double itm = 0;  // s(removed or replaced) - s(original)

  bool operator==(const SegmentDeltas&) const = default;
};

/// One pair scored against a snapshot; the image is encoded once.
class PairScorer {
 public:
  PairScorer(const Snapshot& snap, const model::Vocabulary& vocab, const ad::Matrix& pixels,
             std::vector<std::string> segments, std::int64_t pair_id);

  const EncodedText& encoded() const { return encoded_; }
  const train::PairScore& original() const { return original_; }
  const model::VisualEmbedding& visual() const { return visual_; }
  std::int64_t pair_id() const { return pair_id_; }

  train::PairScore score(std::span<const int> ids) const;
  /// Deltas for the text with segment j removed. ScreeningError when nothing
  /// but the classification token would remain.
  SegmentDeltas removal(int j) const;
  /// Deltas for the text with segment j's tokens replaced by `tokens`.
  SegmentDeltas replacement(int j, std::span<const int> tokens) const;

 private:
  const Snapshot& snap_;
  const model::Vocabulary& vocab_;
  std::vector<std::string> segments_;
  std::int64_t pair_id_;
  model::VisualEmbedding visual_;
  EncodedText encoded_;
  train::PairScore original_;
};

double delta_itc_segment(const PairScorer& scorer, int j);
double delta_itm_segment(const PairScorer& scorer, int j);

inline bool is_noise(const SegmentDeltas& d) { return d.itc < 0.0 && d.itm > 0.0; }

struct ScreenResult {
  std::vector<int> flagged;  // ascending
  std::array<std::optional<SegmentDeltas>, kSegmentsPerText> deltas;
  std::array<std::string, kSegmentsPerText> errors;  // non-empty when the segment could not be scored
};

/// Evaluates all eight removals; segments listed in `skip` are not scored.
ScreenResult screen_pair(const PairScorer& scorer, const std::vector<int>& skip = {});

class NoisePool {
 public:
  /// False when (pair, segment) is already pooled. ContractError when the
  /// deltas do not satisfy the flagging condition.
  bool insert(std::int64_t pair_id, int segment, SegmentDeltas deltas);
  bool contains(std::int64_t pair_id, int segment) const;
  std::vector<int> segments_of(std::int64_t pair_id) const;
  std::size_t size() const { return entries_.size(); }
  const std::map<std::pair<std::int64_t, int>, SegmentDeltas>& entries() const { return entries_; }

 private:
  std::map<std::pair<std::int64_t, int>, SegmentDeltas> entries_;
};

struct MaskedText {
  std::vector<int> ids;
  Span span;
  std::vector<int> original;  // the span's tokens before masking
};

/// UsageError unless (pair_id, j) is pooled.
MaskedText mask_segment(const NoisePool& pool, std::int64_t pair_id, const EncodedText& text, int j);
std::vector<int> unmask(const MaskedText& masked);

/// Greedy fill of the masked span, leftmost first. The argmax runs over the
/// vocabulary's non-special ids and breaks ties toward the lowest id.
std::vector<int> reconstruct_segment(const model::ParamSet& params, const MaskedText& masked,
                                     const model::VisualEmbedding& visual, const model::Vocabulary& vocab);

enum class Action { keep, drop, reconstruct_accepted, reconstruct_rejected };
std::string action_name(Action a);
Action action_from_name(const std::string& name);

struct ScioDecision {
  std::int64_t pair_id = 0;
  int segment = 0;
  int stage = 2;
  Action action = Action::keep;
  std::optional<SegmentDeltas> deltas;
  std::optional<std::string> candidate_text;
  std::optional<std::string> replacement_text;  // present iff reconstruct_accepted
  std::string snapshot_id;
  std::optional<std::string> error;

  void validate() const;
  bool operator==(const ScioDecision&) const = default;
};

nlohmann::json to_json(const ScioDecision& d);
ScioDecision decision_from_json(const nlohmann::json& j);
std::vector<ScioDecision> read_report(const std::filesystem::path& jsonl);

/// Accepted iff both the ITC loss drops and the match probability rises.
ScioDecision accept_reconstruction(const PairScorer& scorer, int j, std::span<const int> candidate,
                                   const model::Vocabulary& vocab, const std::string& snapshot_id);

struct ScioOptions {
  std::filesystem::path corpus_dir;  // holds corpus.jsonl and the images
  std::filesystem::path out_dir;
  train::RunConfig config;
  /// Directory holding model.sklp and vocab.txt of an earlier run to start
  /// from; its model config must match config.model.
  std::optional<std::filesystem::path> init_dir;
};

struct ScioResult {
  model::ParamSet params;
  std::vector<CorpusRecord> corpus;  // with accepted replacements
  std::vector<ScioDecision> decisions;
  NoisePool pool;
};

/// Writes report.jsonl, snapshots/, model.sklp, vocab.txt, config.txt,
/// metrics.csv and the updated corpus.jsonl into out_dir.
ScioResult run_scio(const ScioOptions& options);

struct AuditResult {
  std::size_t checked = 0;
  std::vector<std::string> violations;
};

/// Re-evaluates every drop and reconstruct_accepted record of a run from its
/// report, snapshots and the original corpus.
AuditResult audit_report(const std::filesystem::path& run_dir, const std::filesystem::path& corpus_dir,
                         unsigned threads = 1);

}  // namespace sklp::scio
