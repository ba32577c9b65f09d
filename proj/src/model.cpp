#include "sklp/model.hpp"

#include "sklp/errors.hpp"
#include "sklp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sklp::model {

using ad::Graph;
using ad::Var;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
  };
  positive(embed_dim, "embed_dim");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(patch_size, "patch_size");
  positive(max_patches, "max_patches");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim mod num_heads must be 0 (" + std::to_string(embed_dim) + " mod " +
                      std::to_string(num_heads) + ")");
  }
  for (int id : {pad_token_id, cls_token_id, mask_token_id}) {
    if (id < 0 || id >= vocab_size) {
      throw ConfigError("special token id " + std::to_string(id) + " outside [0, vocab_size)");
    }
  }
  if (pad_token_id == cls_token_id || pad_token_id == mask_token_id || cls_token_id == mask_token_id) {
    throw ConfigError("mask/pad/cls token ids must be pairwise distinct");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"cls_token_id", c.cls_token_id}, {"embed_dim", c.embed_dim},
                        {"mask_token_id", c.mask_token_id}, {"max_patches", c.max_patches},
                        {"max_text_len", c.max_text_len}, {"num_heads", c.num_heads},
                        {"num_layers", c.num_layers}, {"pad_token_id", c.pad_token_id},
                        {"patch_size", c.patch_size}, {"vocab_size", c.vocab_size}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.max_patches = j.at("max_patches").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_text_len = j.at("max_text_len").get<int>();
    c.pad_token_id = j.at("pad_token_id").get<int>();
    c.cls_token_id = j.at("cls_token_id").get<int>();
    c.mask_token_id = j.at("mask_token_id").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor make_tensor(std::vector<std::uint32_t> shape) {
  Tensor t;
  if (shape.size() == 1) {
    t.data = Matrix::Zero(1, shape[0]);
  } else if (shape.size() == 2) {
    t.data = Matrix::Zero(shape[0], shape[1]);
  } else {
    throw ShapeError("only rank-1 and rank-2 tensors are supported");
  }
  t.shape = std::move(shape);
  return t;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ShapeError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ShapeError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamSet::insert(std::string name, Tensor t) { entries_[std::move(name)] = std::move(t); }

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

bool ParamSet::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const auto& kv) { return kv.second.data.allFinite(); });
}

namespace {

using Shape = std::vector<std::uint32_t>;

enum class Init { weight, zero, one };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  double fan_in = 1.0;
};

void add_attention(std::vector<ParamSpec>& out, const std::string& p, std::uint32_t d) {
  for (const char* m : {"q", "k", "v", "o"}) {
    out.push_back({p + ".w" + m, {d, d}, Init::weight, double(d)});
    out.push_back({p + ".b" + m, {d}, Init::zero});
  }
}

void add_norm(std::vector<ParamSpec>& out, const std::string& p, std::uint32_t d) {
  out.push_back({p + ".gain", {d}, Init::one});
  out.push_back({p + ".bias", {d}, Init::zero});
}

void add_ffn(std::vector<ParamSpec>& out, const std::string& p, std::uint32_t d, std::uint32_t h) {
  out.push_back({p + ".w1", {d, h}, Init::weight, double(d)});
  out.push_back({p + ".b1", {h}, Init::zero});
  out.push_back({p + ".w2", {h, d}, Init::weight, double(h)});
  out.push_back({p + ".b2", {d}, Init::zero});
}

void add_layers(std::vector<ParamSpec>& out, const std::string& tower, const ModelConfig& c,
                const char* attn_name) {
  const auto d = static_cast<std::uint32_t>(c.embed_dim);
  const auto h = static_cast<std::uint32_t>(c.ffn_dim());
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = tower + ".layer" + std::to_string(l);
    add_norm(out, p + ".ln1", d);
    add_attention(out, p + "." + attn_name, d);
    add_norm(out, p + ".ln2", d);
    add_ffn(out, p + ".ffn", d, h);
  }
  add_norm(out, tower + ".ln_final", d);
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::uint32_t>(c.embed_dim);
  const auto ps = static_cast<std::uint32_t>(c.patch_size * c.patch_size);
  const auto vocab = static_cast<std::uint32_t>(c.vocab_size);
  std::vector<ParamSpec> out;

  out.push_back({"visual.patch.w", {ps, d}, Init::weight, double(ps)});
  out.push_back({"visual.patch.b", {d}, Init::zero});
  out.push_back({"visual.pos_embed", {std::uint32_t(c.max_patches), d}, Init::weight, double(d)});
  add_layers(out, "visual", c, "attn");
  out.push_back({"visual.proj.w", {d, d}, Init::weight, double(d)});
  out.push_back({"visual.proj.b", {d}, Init::zero});

  out.push_back({"text.tok_embed", {vocab, d}, Init::weight, double(d)});
  out.push_back({"text.pos_embed", {std::uint32_t(c.max_text_len), d}, Init::weight, double(d)});
  add_layers(out, "text", c, "attn");
  out.push_back({"text.proj.w", {d, d}, Init::weight, double(d)});
  out.push_back({"text.proj.b", {d}, Init::zero});

  add_layers(out, "fusion", c, "cross");

  out.push_back({"itm.w", {d, 1}, Init::weight, double(d)});
  out.push_back({"itm.b", {1}, Init::zero});
  out.push_back({"mlm.w", {d, vocab}, Init::weight, double(d)});
  out.push_back({"mlm.b", {vocab}, Init::zero});
  return out;
}

}  // namespace

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamSet ps(config, 0);
  for (const ParamSpec& spec : parameter_layout(config)) {
    Tensor t = make_tensor(spec.shape);
    switch (spec.init) {
      case Init::zero:
        break;
      case Init::one:
        t.data.setOnes();
        break;
      case Init::weight: {
        Rng rng(mix_seed(seed, fnv1a(spec.name)));
        // Uniform on [-a, a] has standard deviation a/sqrt(3).
        const double a = std::sqrt(3.0) / std::sqrt(spec.fan_in);
        for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data.data()[i] = rng.uniform(-a, a);
        break;
      }
    }
    ps.insert(spec.name, std::move(t));
  }
  return ps;
}

// ---- towers ------------------------------------------------------------------

Binding::Binding(Graph& graph, const ParamSet& params, bool track_gradients)
    : graph_(graph), params_(params), track_(track_gradients) {}

Var Binding::operator()(const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const Tensor& t = params_.at(name);
  Var v = graph_.leaf(&t.data, name, track_);
  leaves_.emplace(name, v);
  return v;
}

namespace {

Var linear(Binding& b, Var x, const std::string& w, const std::string& bias) {
  Graph& g = b.graph();
  return ad::add_row(g, ad::matmul(g, x, b(w)), b(bias));
}

Var norm(Binding& b, Var x, const std::string& prefix) {
  return ad::layer_norm(b.graph(), x, b(prefix + ".gain"), b(prefix + ".bias"));
}

Var attention(Binding& b, const std::string& p, Var queries, Var keys, std::span<const char> key_valid) {
  Graph& g = b.graph();
  const int heads = b.config().num_heads;
  const int dh = b.config().head_dim();
  Var q = linear(b, queries, p + ".wq", p + ".bq");
  Var k = linear(b, keys, p + ".wk", p + ".bk");
  Var v = linear(b, keys, p + ".wv", p + ".bv");
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(g, q, h * dh, dh);
    Var kh = ad::slice_cols(g, k, h * dh, dh);
    Var vh = ad::slice_cols(g, v, h * dh, dh);
    Var scores = ad::scale(g, ad::matmul_nt(g, qh, kh), inv);
    Var probs = ad::softmax_rows(g, scores, key_valid);
    outs.push_back(ad::matmul(g, probs, vh));
  }
  Var merged = heads == 1 ? outs[0] : ad::concat_cols(g, outs);
  return linear(b, merged, p + ".wo", p + ".bo");
}

Var feed_forward(Binding& b, Var x, const std::string& p) {
  Graph& g = b.graph();
  Var h = ad::gelu(g, linear(b, x, p + ".w1", p + ".b1"));
  return linear(b, h, p + ".w2", p + ".b2");
}

Var encoder_stack(Binding& b, const std::string& tower, Var x, std::span<const char> key_valid) {
  Graph& g = b.graph();
  for (int l = 0; l < b.config().num_layers; ++l) {
    const std::string p = tower + ".layer" + std::to_string(l);
    Var n1 = norm(b, x, p + ".ln1");
    x = ad::add(g, x, attention(b, p + ".attn", n1, n1, key_valid));
    x = ad::add(g, x, feed_forward(b, norm(b, x, p + ".ln2"), p + ".ffn"));
  }
  return norm(b, x, tower + ".ln_final");
}

}  // namespace

Matrix patchify(const Matrix& pixels, int patch_size) {
  const Eigen::Index h = pixels.rows();
  const Eigen::Index w = pixels.cols();
  if (patch_size <= 0 || h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a multiple of patch size " + std::to_string(patch_size));
  }
  const Eigen::Index gh = h / patch_size;
  const Eigen::Index gw = w / patch_size;
  Matrix out(gh * gw, Eigen::Index(patch_size) * patch_size);
  for (Eigen::Index pr = 0; pr < gh; ++pr) {
    for (Eigen::Index pc = 0; pc < gw; ++pc) {
      const Eigen::Index row = pr * gw + pc;
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          out(row, Eigen::Index(y) * patch_size + x) = pixels(pr * patch_size + y, pc * patch_size + x);
        }
      }
    }
  }
  return out;
}

VisualNodes visual_tower(Binding& b, const Matrix& pixels) {
  const ModelConfig& c = b.config();
  Graph& g = b.graph();
  Matrix patches = patchify(pixels, c.patch_size);
  patches = (patches.array() - 0.5) * 2.0;
  if (patches.rows() > c.max_patches) {
    throw ShapeError("patch count " + std::to_string(patches.rows()) + " exceeds max_patches " +
                     std::to_string(c.max_patches));
  }
  const Eigen::Index n = patches.rows();
  Var x = linear(b, g.constant(std::move(patches), "patches"), "visual.patch.w", "visual.patch.b");
  x = ad::add(g, x, ad::slice_rows(g, b("visual.pos_embed"), 0, n));
  Var states = encoder_stack(b, "visual", x, {});
  Var pooled = ad::mean_rows(g, states);
  Var global = ad::l2_normalize_rows(g, linear(b, pooled, "visual.proj.w", "visual.proj.b"));
  return {global, states};
}

namespace {

void check_token_ids(const ModelConfig& c, std::span<const int> ids) {
  if (ids.empty()) throw ShapeError("empty token sequence");
  if (static_cast<int>(ids.size()) > c.max_text_len) {
    throw ShapeError("token sequence length " + std::to_string(ids.size()) + " exceeds max_text_len " +
                     std::to_string(c.max_text_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= c.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside [0, " +
                            std::to_string(c.vocab_size) + ")");
    }
  }
  if (ids[0] != c.cls_token_id) throw UsageError("position 0 must hold the classification token");
}

}  // namespace

namespace {

TextNodes text_tower_rows(Binding& b, std::span<const int> token_ids) {
  const ModelConfig& c = b.config();
  Graph& g = b.graph();
  const auto n = static_cast<Eigen::Index>(token_ids.size());
  std::vector<char> mask(token_ids.size());
  for (std::size_t i = 0; i < token_ids.size(); ++i) mask[i] = token_ids[i] != c.pad_token_id;
  Var x = ad::gather_rows(g, b("text.tok_embed"), token_ids);
  x = ad::add(g, x, ad::slice_rows(g, b("text.pos_embed"), 0, n));
  Var states = encoder_stack(b, "text", x, mask);
  Var cls = ad::slice_rows(g, states, 0, 1);
  Var global = ad::l2_normalize_rows(g, linear(b, cls, "text.proj.w", "text.proj.b"));
  return {global, states, std::move(mask)};
}

}  // namespace

TextNodes text_tower(Binding& b, std::span<const int> token_ids) {
  const ModelConfig& c = b.config();
  check_token_ids(c, token_ids);
  std::size_t real = token_ids.size();
  while (token_ids[real - 1] == c.pad_token_id) --real;
  if (real == token_ids.size()) return text_tower_rows(b, token_ids);
  // Real rows come from the unpadded prefix so trailing pads cannot perturb
  // them, not even in the last bit.
  Graph& g = b.graph();
  TextNodes prefix = text_tower_rows(b, token_ids.first(real));
  TextNodes full = text_tower_rows(b, token_ids);
  const auto r = static_cast<Eigen::Index>(real);
  const auto n = static_cast<Eigen::Index>(token_ids.size());
  Var states = ad::concat_rows(g, {prefix.tokens, ad::slice_rows(g, full.tokens, r, n - r)});
  return {prefix.global, states, std::move(full.mask)};
}

Var fusion_stack(Binding& b, Var text_tokens, Var patches) {
  Graph& g = b.graph();
  const ModelConfig& c = b.config();
  if (g.value(text_tokens).cols() != c.embed_dim || g.value(patches).cols() != c.embed_dim) {
    throw ShapeError("fusion inputs must have " + std::to_string(c.embed_dim) + " columns");
  }
  Var x = text_tokens;
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "fusion.layer" + std::to_string(l);
    x = ad::add(g, x, attention(b, p + ".cross", norm(b, x, p + ".ln1"), patches, {}));
    x = ad::add(g, x, feed_forward(b, norm(b, x, p + ".ln2"), p + ".ffn"));
  }
  return norm(b, x, "fusion.ln_final");
}

Var itm_head(Binding& b, Var token_states) {
  Var cls = ad::slice_rows(b.graph(), token_states, 0, 1);
  return linear(b, cls, "itm.w", "itm.b");
}

Var mlm_head(Binding& b, Var token_states) { return linear(b, token_states, "mlm.w", "mlm.b"); }

// ---- value-level API --------------------------------------------------------------

namespace {

Vector row_vector(const Matrix& m) { return m.row(0).transpose(); }

void check_config_match(const ParamSet& params, Eigen::Index cols) {
  if (cols != params.config().embed_dim) {
    throw ShapeError("embedding width " + std::to_string(cols) + " does not match embed_dim " +
                     std::to_string(params.config().embed_dim));
  }
}

}  // namespace

VisualEmbedding encode_image(const ParamSet& params, const Matrix& pixels) {
  Graph g;
  Binding b(g, params, false);
  VisualNodes v = visual_tower(b, pixels);
  return {row_vector(g.value(v.global)), g.value(v.patches)};
}

TextEmbedding encode_text(const ParamSet& params, std::span<const int> token_ids) {
  Graph g;
  Binding b(g, params, false);
  TextNodes t = text_tower(b, token_ids);
  return {row_vector(g.value(t.global)), g.value(t.tokens), std::move(t.mask)};
}

FusedFeatures fuse(const ParamSet& params, const VisualEmbedding& visual, const TextEmbedding& text) {
  check_config_match(params, visual.patches.cols());
  check_config_match(params, text.tokens.cols());
  Graph g;
  Binding b(g, params, false);
  Var states = fusion_stack(b, g.constant(text.tokens, "text_tokens"), g.constant(visual.patches, "patches"));
  const Matrix& s = g.value(states);
  return {s, row_vector(s)};
}

double itm_logit(const ParamSet& params, const FusedFeatures& fused) {
  check_config_match(params, fused.token_states.cols());
  const Matrix& w = params.at("itm.w").data;
  return fused.summary.dot(w.col(0)) + params.at("itm.b").data(0, 0);
}

double itm_probability(const ParamSet& params, const FusedFeatures& fused) {
  constexpr double eps = 1e-12;
  const double p = 1.0 / (1.0 + std::exp(-itm_logit(params, fused)));
  return std::clamp(p, eps, 1.0 - eps);
}

Matrix mlm_logits(const ParamSet& params, std::span<const int> masked_ids, const VisualEmbedding& visual) {
  check_config_match(params, visual.patches.cols());
  Graph g;
  Binding b(g, params, false);
  TextNodes t = text_tower(b, masked_ids);
  Var states = fusion_stack(b, t.tokens, g.constant(visual.patches, "patches"));
  return g.value(mlm_head(b, states));
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// ---- gradients --------------------------------------------------------------------

Gradients gradient_of(const LossBuilder& loss, const ParamSet& params, double* loss_value) {
  Graph g;
  Binding b(g, params, true);
  Var root = loss(b);
  if (g.value(root).size() != 1) throw ShapeError("loss must be a scalar");
  const double value = g.scalar(root);
  if (!std::isfinite(value)) {
    auto bad = g.first_non_finite();
    throw NumericError("non-finite loss" + (bad ? " (first at '" + *bad + "')" : std::string()));
  }
  g.backward(root);
  Gradients out;
  for (const auto& [name, t] : params.entries()) {
    auto it = b.leaves().find(name);
    out[name] = it == b.leaves().end() ? Matrix::Zero(t.data.rows(), t.data.cols()) : g.grad_or_zero(it->second);
  }
  if (loss_value) *loss_value = value;
  return out;
}

double evaluate_loss(const LossBuilder& loss, const ParamSet& params) {
  Graph g;
  Binding b(g, params, false);
  return g.scalar(loss(b));
}

}  // namespace sklp::model
