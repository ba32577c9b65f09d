#pragma once

// Synthetic radar-like scenes with captions from the mock generator and
// optional planted contradictions.

#include "sklp/corpus.hpp"
#include "sklp/hcot.hpp"
#include "sklp/ingest.hpp"
#include "sklp/scene.hpp"

#include <filesystem>

namespace sklp::synth {

SyntheticScene random_scene(std::uint64_t seed, int side);
/// Bright shapes over a landform-dependent background, times unit-mean
/// gamma speckle (4 looks). Values in [0,1].
ad::Matrix render_scene(const SyntheticScene& scene);
ingest::ByteRaster to_bytes(const ad::Matrix& image);

struct SyntheticPair {
  SyntheticScene scene;
  ingest::ByteRaster image;
  CorpusRecord record;
};

/// Each segment is independently replaced with probability noise_rate by a
/// contradiction; planted indices are recorded on the record.
SyntheticPair gen_synthetic_pair(std::uint64_t seed, double noise_rate, std::int64_t pair_id, int side,
                                 const std::vector<hcot::PromptLayer>& layers);

struct SynthOptions {
  std::filesystem::path out_dir;
  int n = 64;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  int side = 64;
  std::filesystem::path templates;
  unsigned threads = 1;
};

/// Writes images/<id>.pgm and corpus.jsonl; returns the records.
std::vector<CorpusRecord> write_synthetic_corpus(const SynthOptions& options);

}  // namespace sklp::synth
