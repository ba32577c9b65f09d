#pragma once

// Hierarchical cognitive chain of thought: five-layer prompt assembly and the
// large -> medium -> small scale generation chain.

#include "sklp/scene.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sklp::hcot {

enum class LayerKind { earth_cognition, social_prior, sar_theory, instance_discrimination, calibration };
inline constexpr std::array<LayerKind, 5> kLayerOrder{LayerKind::earth_cognition, LayerKind::social_prior,
                                                      LayerKind::sar_theory, LayerKind::instance_discrimination,
                                                      LayerKind::calibration};
std::string layer_name(LayerKind k);

enum class Tier { L, M, S };
std::string tier_name(Tier t);
Tier tier_from_name(const std::string& s);

struct PromptLayer {
  LayerKind kind;
  std::string text;
};

/// Reads `<kind>.txt` for each of the five kinds and checks placeholders.
std::vector<PromptLayer> load_layers(const std::filesystem::path& dir);
/// Throws TemplateError on any placeholder outside the allowed set.
void check_placeholders(const PromptLayer& layer);

struct GeoContext {
  std::string city;
  double lon_min = 0, lon_max = 0;
  double lat_min = 0, lat_max = 0;
  double resolution_m = 1.0;
  Tier tier = Tier::L;

  void validate() const;
};

/// One concatenated prompt with a "### <kind>" block per layer. Lines that
/// reference {prior_text} are dropped when no prior is given.
std::string assemble_prompt(const std::vector<PromptLayer>& layers, const GeoContext& ctx,
                            const std::optional<std::string>& prior_text);

class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string id() const = 0;
  /// Must be deterministic for a fixed (prompt, seed).
  virtual std::string generate(const std::string& prompt, std::uint64_t seed) = 0;
};

/// Template captioner driven by scene ground truth. Emits a JSON array of 8
/// segments: scene type, one per object class, layout, landform.
class MockGenerator : public Generator {
 public:
  explicit MockGenerator(SyntheticScene scene);
  std::string id() const override { return "mock-template-v1"; }
  std::string generate(const std::string& prompt, std::uint64_t seed) override;
  const SyntheticScene& scene() const { return scene_; }

 private:
  SyntheticScene scene_;
};

/// Segment texts for a scene, paraphrases chosen by rng seed.
std::vector<std::string> describe_scene(const SyntheticScene& scene, std::uint64_t seed);
/// A segment contradicting the scene: an absent class, else a wrong count.
std::string contradiction_segment(const SyntheticScene& scene, std::uint64_t seed);
/// Parses generator output into exactly 8 segments (FormatError otherwise).
std::vector<std::string> parse_segments(const std::string& output);

using Clock = std::function<std::int64_t()>;
/// Counter clock returning 0, 1, 2, ... so recorded chains stay reproducible.
Clock logical_clock();

struct ChainResult {
  std::string t_l, t_m, t_s;
  std::array<std::string, 3> prompts;
  std::array<std::string, 3> image_refs;
  std::string generator_id;
  std::uint64_t seed = 0;
  std::array<std::int64_t, 3> timestamps{};

  nlohmann::json to_json() const;
  bool operator==(const ChainResult&) const = default;
};

/// T_L = gen(prompt(S_L)); T_M = gen(prompt(S_M, T_L)); T_S = gen(prompt(S_S, T_M)).
ChainResult run_chain(const std::array<std::string, 3>& image_refs, const std::array<GeoContext, 3>& contexts,
                      const std::vector<PromptLayer>& layers, Generator& gen, std::uint64_t seed,
                      const Clock& clock = logical_clock());

}  // namespace sklp::hcot
