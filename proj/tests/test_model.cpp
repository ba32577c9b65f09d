#include "doctest.h"
#include "fd_oracle.hpp"

#include "sklp/checkpoint.hpp"
#include "sklp/errors.hpp"
#include "sklp/model.hpp"
#include "sklp/rng.hpp"
#include "sklp/tokenizer.hpp"

#include <filesystem>

using namespace sklp;
using namespace sklp::model;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.patch_size = 4;
  c.max_patches = 4;
  c.vocab_size = 32;
  c.max_text_len = 12;
  return c;
}

Matrix random_image(Rng& rng, int h, int w) {
  Matrix m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("config validation names the violated invariant") {
  ModelConfig c;
  c.num_heads = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("mod num_heads"), ConfigError);
  c = ModelConfig{};
  c.mask_token_id = c.pad_token_id;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("distinct"), ConfigError);
  c = ModelConfig{};
  c.cls_token_id = c.vocab_size;
  CHECK_THROWS_AS(init_params(c, 1), ConfigError);
}

TEST_CASE("init_params is deterministic and seed sensitive") {
  const ModelConfig c = tiny_config();
  const ParamSet a = init_params(c, 7);
  const ParamSet b = init_params(c, 7);
  const ParamSet d = init_params(c, 8);
  CHECK(serialize_checkpoint(a) == serialize_checkpoint(b));
  CHECK_FALSE(a == d);
  CHECK(a.all_finite());
  CHECK(a.at("text.layer0.attn.bq").data.isZero());
  CHECK(a.at("visual.layer0.ln1.gain").data.isOnes());
  // Weights are zero-mean with std ≈ 1/sqrt(fan_in).
  const Matrix& w = a.at("mlm.w").data;
  const double sd = std::sqrt(w.array().square().mean());
  CHECK(sd == doctest::Approx(1.0 / 4.0).epsilon(0.1));
}

TEST_CASE("parameter names enumerate lexicographically") {
  const ParamSet p = init_params(tiny_config(), 1);
  std::string prev;
  for (const auto& [name, _] : p.entries()) {
    CHECK(prev < name);
    prev = name;
  }
}

TEST_CASE("image encoder shapes and normalisation") {
  Rng rng(3);
  ModelConfig c = tiny_config();
  c.patch_size = 16;
  c.max_patches = 4;
  const ParamSet p = init_params(c, 1);
  const Matrix img = random_image(rng, 32, 32);
  const VisualEmbedding v = encode_image(p, img);
  CHECK(v.patches.rows() == 4);
  CHECK(v.patches.cols() == 16);
  CHECK(std::abs(v.global.norm() - 1.0) <= 1e-6);
  const VisualEmbedding again = encode_image(p, img);
  CHECK(v.global == again.global);
  CHECK(v.patches == again.patches);
  CHECK_THROWS_AS(encode_image(p, random_image(rng, 30, 32)), ShapeError);
  CHECK_THROWS_AS(encode_image(p, random_image(rng, 48, 32)), ShapeError);  // 6 patches > 4
}

TEST_CASE("text encoder: normalisation, vocabulary errors, pad invariance") {
  const ModelConfig c = tiny_config();
  const ParamSet p = init_params(c, 2);
  const std::vector<int> ids{c.cls_token_id, 7, 9, 11, 5};
  const TextEmbedding t = encode_text(p, ids);
  CHECK(std::abs(t.global.norm() - 1.0) <= 1e-6);
  CHECK(t.tokens.rows() == 5);
  CHECK(encode_text(p, ids).global == t.global);

  std::vector<int> padded = ids;
  padded.insert(padded.end(), 4, c.pad_token_id);
  const TextEmbedding tp = encode_text(p, padded);
  CHECK(tp.global == t.global);
  CHECK(tp.tokens.topRows(5) == t.tokens);
  CHECK(tp.attn_mask == std::vector<char>{1, 1, 1, 1, 1, 0, 0, 0, 0});

  CHECK_THROWS_AS(encode_text(p, std::vector<int>{c.cls_token_id, 32}), VocabularyError);
  CHECK_THROWS_AS(encode_text(p, std::vector<int>(13, 5)), ShapeError);
  CHECK_THROWS_AS(encode_text(p, std::vector<int>{5, 6}), UsageError);
}

TEST_CASE("fusion depends on the image and keeps the text length") {
  Rng rng(4);
  const ModelConfig c = tiny_config();
  const ParamSet p = init_params(c, 3);
  const VisualEmbedding v = encode_image(p, random_image(rng, 8, 8));
  const TextEmbedding t = encode_text(p, std::vector<int>{1, 4, 5, 6});
  const FusedFeatures f = fuse(p, v, t);
  CHECK(f.token_states.rows() == 4);
  VisualEmbedding zero = v;
  zero.patches.setZero();
  const FusedFeatures fz = fuse(p, zero, t);
  CHECK((f.summary - fz.summary).norm() > 1e-6);
  CHECK(fuse(p, v, t).summary == f.summary);

  const double prob = itm_probability(p, f);
  CHECK(prob > 0.0);
  CHECK(prob < 1.0);
  ParamSet flat = p;
  flat.at("itm.w").data.setZero();
  CHECK(itm_probability(flat, f) == 0.5);

  ModelConfig other = c;
  other.embed_dim = 8;
  CHECK_THROWS_AS(fuse(init_params(other, 1), v, t), ShapeError);
}

TEST_CASE("mlm logits: shape, normalisation, image conditioning") {
  Rng rng(5);
  const ModelConfig c = tiny_config();
  const ParamSet p = init_params(c, 4);
  const std::vector<int> masked{1, 6, c.mask_token_id, 8};
  const VisualEmbedding v1 = encode_image(p, random_image(rng, 8, 8));
  const VisualEmbedding v2 = encode_image(p, random_image(rng, 8, 8));
  const Matrix l1 = mlm_logits(p, masked, v1);
  CHECK(l1.rows() == 4);
  CHECK(l1.cols() == c.vocab_size);
  const Matrix probs = row_softmax(l1);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) CHECK(std::abs(probs.row(r).sum() - 1.0) <= 1e-6);
  const Matrix l2 = mlm_logits(p, masked, v2);
  CHECK((l1.row(2) - l2.row(2)).norm() > 1e-9);
}

TEST_CASE("gradient_of: trivial closed forms") {
  const ParamSet p = init_params(tiny_config(), 5);
  const Gradients zero = gradient_of([](Binding& b) { return b.graph().constant(Matrix::Constant(1, 1, 3.0)); }, p);
  CHECK(zero.size() == p.entries().size());
  for (const auto& [name, g] : zero) CHECK(g.isZero());

  const Gradients quad = gradient_of([](Binding& b) { return ad::half_squared_norm(b.graph(), b("mlm.w")); }, p);
  CHECK(quad.at("mlm.w") == p.at("mlm.w").data);
  CHECK(quad.at("itm.w").isZero());

  ParamSet bad = p;
  bad.at("itm.b").data(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(gradient_of([](Binding& b) { return ad::half_squared_norm(b.graph(), b("itm.b")); }, bad),
                       doctest::Contains("itm.b"), NumericError);
}

TEST_CASE("checkpoint round trip is byte stable and rejects bad headers") {
  const ParamSet p = init_params(tiny_config(), 6);
  const std::string bytes = serialize_checkpoint(p);
  CHECK(bytes.substr(0, 4) == "SKLP");
  const ParamSet q = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(q) == bytes);
  CHECK(q.config() == p.config());
  CHECK(q == round_trip_f32(p));

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(wrong_magic), FormatError);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK_THROWS_AS(deserialize_checkpoint(wrong_version), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 2)), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "sklp_test_ckpt.sklp";
  save_checkpoint(p, path);
  CHECK(serialize_checkpoint(load_checkpoint(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_WITH(load_checkpoint(path), doctest::Contains("checkpoint not found"));
}

TEST_CASE("tokenizer and vocabulary") {
  CHECK(tokenize("Three Buildings, north-east.") ==
        std::vector<std::string>{"three", "buildings", ",", "north", "-", "east", "."});
  const std::vector<std::string> corpus{"b a a c", "a b d"};
  const Vocabulary v = Vocabulary::build(corpus, 7);
  CHECK(v.size() == 7);
  CHECK(v.token(4) == "a");  // most frequent
  CHECK(v.token(5) == "b");
  CHECK(v.token(6) == "c");  // tie with d broken lexicographically
  CHECK(v.id("d") == Vocabulary::kUnknown);
  CHECK(v.encode("A b") == std::vector<int>{4, 5});
  CHECK(v.decode(std::vector<int>{4, 6}) == "a c");
  const auto path = std::filesystem::temp_directory_path() / "sklp_vocab.txt";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  std::filesystem::remove(path);
}
