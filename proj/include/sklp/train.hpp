#pragma once

// Run configuration, optimizer, learning-rate schedule and the joint
// ITC + ITM + MLM training loop.

#include "sklp/corpus.hpp"
#include "sklp/model.hpp"
#include "sklp/objectives.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace sklp::train {

struct StageSchedule {
  int stage1 = 4;
  int stage2 = 4;
  int stage3 = 4;

  int total() const { return stage1 + stage2 + stage3; }
  void validate() const;
};

struct RunConfig {
  model::ModelConfig model;
  int image_side = 64;
  int batch_size = 8;
  int queue_capacity = 256;
  int queue_warmup_epochs = 10;  // queue is filled but not read before this epoch
  double lr = 1e-3;
  int warmup_steps = 50;
  double weight_decay = 0.05;
  double min_lr = 1e-6;
  double lr_decay = 0.9;
  double temperature = 0.07;
  objectives::LossWeights weights;
  double mask_rate = 0.15;
  int epochs = 30;
  StageSchedule stages;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  /// Also fills in model.max_patches from image_side and patch_size.
  void validate();
  /// Applies one `key=value` setting; UsageError for unknown keys.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
};

/// Parses `key=value` lines ('#' starts a comment) into `cfg`.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
/// Seed from SKLP_SEED when set, else `fallback`.
std::uint64_t seed_from_env(std::uint64_t fallback);

/// Linear warmup from min_lr to lr, then lr * decay^epoch floored at min_lr.
struct LrSchedule {
  double lr = 3e-4;
  double min_lr = 1e-6;
  long warmup_steps = 0;
  long steps_per_epoch = 1;
  double decay = 0.9;

  double at(long step) const;
};

/// Adam with decoupled weight decay applied to rank-2 weights only.
class AdamW {
 public:
  AdamW(double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(model::ParamSet& params, const model::Gradients& grads, double lr);
  long steps() const { return t_; }

 private:
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, ad::Matrix> m_, v_;
};

struct Example {
  std::int64_t pair_id = 0;
  ad::Matrix pixels;
  EncodedText text;
  std::vector<char> mlm_excluded;  // per segment; 1 keeps the span out of MLM targets
};

/// Builds the vocabulary-encoded examples; images must be image_side square.
std::vector<Example> make_examples(const std::vector<CorpusRecord>& records, const model::Vocabulary& vocab,
                                   const std::filesystem::path& corpus_dir, const RunConfig& cfg);
/// Vocabulary over every segment of the corpus.
model::Vocabulary build_vocabulary(const std::vector<CorpusRecord>& records, int vocab_size);

/// Eligible MLM target positions: real tokens outside excluded segments.
std::vector<int> mlm_eligible_positions(const Example& ex);
/// round(rate * eligible) positions (at least one) drawn without replacement, sorted.
std::vector<int> choose_mask_positions(const Example& ex, double rate, std::uint64_t seed);

struct StepLosses {
  double itc = 0, itm = 0, mlm = 0, total = 0;
};

struct MetricsRow {
  long step = 0;
  double lr = 0;
  StepLosses losses;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::string format_metrics_row(const MetricsRow& row);

class Trainer {
 public:
  Trainer(RunConfig cfg, model::ParamSet params, std::size_t corpus_size);

  /// One optimizer step on the given examples; pushes detached globals to the
  /// queue afterwards. Throws NumericError on a non-finite loss.
  StepLosses step(const std::vector<const Example*>& batch);
  /// Shuffled pass over `examples` in floor(N / batch) steps.
  void run_epoch(const std::vector<Example>& examples);

  const model::ParamSet& params() const { return params_; }
  model::ParamSet& params() { return params_; }
  const objectives::FeatureQueue& queue() const { return queue_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  long global_step() const { return step_; }
  int epochs_done() const { return epoch_; }
  const LrSchedule& schedule() const { return schedule_; }
  const RunConfig& config() const { return cfg_; }

 private:
  RunConfig cfg_;
  model::ParamSet params_;
  AdamW opt_;
  objectives::FeatureQueue queue_;
  LrSchedule schedule_;
  long step_ = 0;
  int epoch_ = 0;
  std::vector<MetricsRow> metrics_;
};

/// Parameter initialisation seed derived from the run seed.
std::uint64_t init_seed(const RunConfig& cfg);
void write_config(const RunConfig& cfg, const std::filesystem::path& path);

struct TrainOutputs {
  model::ParamSet params;
  model::Vocabulary vocab;
  std::vector<MetricsRow> metrics;
};

/// Trains on <corpus_dir>/corpus.jsonl for cfg.epochs and writes model.sklp,
/// vocab.txt, config.txt and metrics.csv into out_dir. The checkpoint is
/// rewritten after every epoch, so a failing step leaves the last good one.
TrainOutputs run_training(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                          const RunConfig& cfg);

/// Value-level single-pair quantities used by screening and acceptance.
struct PairScore {
  double itc = 0;       // single-pair ITC loss against a frozen queue
  double match = 0;     // ITM probability
};
PairScore score_pair(const model::ParamSet& params, const model::VisualEmbedding& visual, std::span<const int> ids,
                     const objectives::QueueSnapshot& queue, double temperature, std::int64_t pair_id);

}  // namespace sklp::train
