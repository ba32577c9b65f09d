#pragma once

#include "sklp/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace sklp::model {

using ad::Matrix;
using ad::Vector;

struct ModelConfig {
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int patch_size = 16;
  int max_patches = 64;
  int vocab_size = 512;
  int max_text_len = 64;
  int pad_token_id = 0;
  int cls_token_id = 1;
  int mask_token_id = 2;

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;
  int head_dim() const { return embed_dim / num_heads; }
  int ffn_dim() const { return 4 * embed_dim; }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

/// A named real array. Rank-1 arrays are stored as a single row.
struct Tensor {
  std::vector<std::uint32_t> shape;
  Matrix data;

  std::size_t size() const { return static_cast<std::size_t>(data.size()); }
  bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

Tensor make_tensor(std::vector<std::uint32_t> shape);

/// Parameters of both towers, the fusion stack and the two heads. Names
/// enumerate lexicographically.
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(ModelConfig config, std::int64_t version = 0)
      : config_(config), version_(version) {}

  const ModelConfig& config() const { return config_; }
  std::int64_t version() const { return version_; }
  void set_version(std::int64_t v) { version_ = v; }

  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::map<std::string, Tensor>& entries() { return entries_; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  void insert(std::string name, Tensor t);

  std::size_t total_size() const;
  bool all_finite() const;

  bool operator==(const ParamSet& o) const {
    return config_ == o.config_ && version_ == o.version_ && entries_ == o.entries_;
  }

 private:
  ModelConfig config_;
  std::int64_t version_ = 0;
  std::map<std::string, Tensor> entries_;
};

/// Deterministic in (config, seed). Weights uniform with standard deviation
/// 1/sqrt(fan_in); biases zero; layer-norm gains one.
ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

struct VisualEmbedding {
  Vector global;    // unit norm
  Matrix patches;   // one row per patch
};

struct TextEmbedding {
  Vector global;                 // unit norm
  Matrix tokens;                 // one row per position
  std::vector<char> attn_mask;   // 1 = real token, 0 = pad
};

struct FusedFeatures {
  Matrix token_states;
  Vector summary;  // state at the classification position
};

/// Splits an H×W image into row-major flattened patches (patch-major order).
Matrix patchify(const Matrix& pixels, int patch_size);

VisualEmbedding encode_image(const ParamSet& params, const Matrix& pixels);
TextEmbedding encode_text(const ParamSet& params, std::span<const int> token_ids);
FusedFeatures fuse(const ParamSet& params, const VisualEmbedding& visual, const TextEmbedding& text);
double itm_logit(const ParamSet& params, const FusedFeatures& fused);
/// Match probability in (0,1); clamped to [1e-12, 1 − 1e-12].
double itm_probability(const ParamSet& params, const FusedFeatures& fused);
/// (len × vocab_size) logits of the image-conditioned masked-token head.
Matrix mlm_logits(const ParamSet& params, std::span<const int> masked_ids, const VisualEmbedding& visual);
/// Row-wise normalised exponentials.
Matrix row_softmax(const Matrix& logits);

// ---- graph-level construction -------------------------------------------

/// Resolves parameter names to graph leaves inside one Graph.
class Binding {
 public:
  Binding(ad::Graph& graph, const ParamSet& params, bool track_gradients);

  ad::Var operator()(const std::string& name);
  ad::Graph& graph() { return graph_; }
  const ModelConfig& config() const { return params_.config(); }
  const ParamSet& params() const { return params_; }
  const std::map<std::string, ad::Var>& leaves() const { return leaves_; }

 private:
  ad::Graph& graph_;
  const ParamSet& params_;
  bool track_;
  std::map<std::string, ad::Var> leaves_;
};

struct VisualNodes {
  ad::Var global;
  ad::Var patches;
};

struct TextNodes {
  ad::Var global;
  ad::Var tokens;
  std::vector<char> mask;
};

VisualNodes visual_tower(Binding& b, const Matrix& pixels);
TextNodes text_tower(Binding& b, std::span<const int> token_ids);
/// Cross-attention of text positions over patch states; returns token states.
ad::Var fusion_stack(Binding& b, ad::Var text_tokens, ad::Var patches);
/// 1×1 logit from the classification-position state.
ad::Var itm_head(Binding& b, ad::Var token_states);
/// len × vocab logits.
ad::Var mlm_head(Binding& b, ad::Var token_states);

// ---- gradients -------------------------------------------------------------

using Gradients = std::map<std::string, Matrix>;
using LossBuilder = std::function<ad::Var(Binding&)>;

/// Exact reverse-mode gradient of the scalar built by `loss` with respect to
/// every parameter (zeros for parameters the loss does not touch).
Gradients gradient_of(const LossBuilder& loss, const ParamSet& params, double* loss_value = nullptr);
/// Forward-only evaluation of the same builder.
double evaluate_loss(const LossBuilder& loss, const ParamSet& params);

}  // namespace sklp::model
