#include "doctest.h"

#include "sklp/checkpoint.hpp"
#include "sklp/errors.hpp"
#include "sklp/rng.hpp"
#include "sklp/scio.hpp"
#include "sklp/synth.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace sklp;
using namespace sklp::scio;

namespace {

const char* kWords[] = {"red", "roof", "dock", "pier", "lake", "road", "field", "hill", "ship", "plane", "two", "three"};

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.embed_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.patch_size = 8;
  c.max_patches = 4;
  c.vocab_size = 32;
  c.max_text_len = 32;
  return c;
}

std::vector<std::string> random_segments(Rng& rng) {
  std::vector<std::string> segs;
  for (int j = 0; j < kSegmentsPerText; ++j) {
    const int len = static_cast<int>(rng.below(4));  // empty segments included
    std::string s;
    for (int k = 0; k < len; ++k) s += (k ? " " : "") + std::string(kWords[rng.below(std::size(kWords))]);
    segs.push_back(s);
  }
  return segs;
}

ad::Matrix random_pixels(Rng& rng) {
  ad::Matrix m(16, 16);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
  return m;
}

objectives::QueueSnapshot random_queue(Rng& rng, int rows, int dim) {
  auto unit_rows = [&](int n) {
    ad::Matrix m(n, dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    m.rowwise().normalize();
    return m;
  };
  objectives::QueueSnapshot q{unit_rows(rows), unit_rows(rows), {}, {}};
  for (int i = 0; i < rows; ++i) {
    q.image_pair_ids.push_back(1000 + i);
    q.text_pair_ids.push_back(1000 + i);
  }
  return q;
}

model::Vocabulary word_vocab() {
  std::vector<std::string> texts;
  for (const char* w : kWords) texts.emplace_back(w);
  return model::Vocabulary::build(texts, 32);
}

struct Fixture {
  model::Vocabulary vocab = word_vocab();
  Snapshot snap;

  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    snap.id = "t";
    snap.params = model::init_params(tiny_model(), seed);
    snap.queue = random_queue(rng, 12, 16);
  }
};

// Removal of segment j rebuilt from the raw segment strings.
std::vector<int> removal_ids(const model::Vocabulary& vocab, const std::vector<std::string>& segs, int j) {
  std::vector<int> ids{model::Vocabulary::kCls};
  for (int k = 0; k < kSegmentsPerText; ++k) {
    if (k == j) continue;
    const auto t = vocab.encode(segs[static_cast<std::size_t>(k)]);
    ids.insert(ids.end(), t.begin(), t.end());
  }
  return ids;
}

train::RunConfig small_run_config() {
  train::RunConfig cfg;
  cfg.model.embed_dim = 16;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 2;
  cfg.model.patch_size = 8;
  cfg.model.vocab_size = 128;
  cfg.model.max_text_len = 64;
  cfg.image_side = 16;
  cfg.batch_size = 4;
  cfg.queue_capacity = 16;
  cfg.queue_warmup_epochs = 0;
  cfg.warmup_steps = 2;
  cfg.stages = {1, 2, 1};
  cfg.seed = 5;
  cfg.validate();
  return cfg;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sklp_test_scio_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::filesystem::path small_corpus(const std::string& name, double noise) {
  synth::SynthOptions so;
  so.out_dir = scratch(name);
  so.n = 16;
  so.side = 16;
  so.noise_rate = noise;
  so.seed = 3;
  so.templates = std::filesystem::path(SKLP_SOURCE_DIR) / "data" / "hcot_templates";
  synth::write_synthetic_corpus(so);
  return so.out_dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("empty segments have zero deltas and single-segment texts cannot be screened") {
  Fixture fx(1);
  Rng rng(2);
  std::vector<std::string> segs(kSegmentsPerText, "");
  segs[0] = "red roof";
  segs[3] = "lake";
  const PairScorer scorer(fx.snap, fx.vocab, random_pixels(rng), segs, 7);
  for (int j : {1, 2, 4, 5, 6, 7}) {
    CHECK(scorer.removal(j) == SegmentDeltas{});
    CHECK(delta_itc_segment(scorer, j) == 0.0);
    CHECK(delta_itm_segment(scorer, j) == 0.0);
  }
  CHECK_FALSE(is_noise(SegmentDeltas{}));

  std::vector<std::string> lone(kSegmentsPerText, "");
  lone[2] = "ship";
  const PairScorer only(fx.snap, fx.vocab, random_pixels(rng), lone, 8);
  CHECK_THROWS_AS(only.removal(2), ScreeningError);
  const ScreenResult r = screen_pair(only);
  CHECK(r.flagged.empty());
  CHECK_FALSE(r.deltas[2].has_value());
  CHECK_FALSE(r.errors[2].empty());
  CHECK_THROWS_AS(only.removal(8), UsageError);
}

TEST_CASE("screening matches a brute-force removal evaluation") {
  Fixture fx(11);
  Rng rng(12);
  int flagged_total = 0;
  for (int t = 0; t < 60; ++t) {
    const auto segs = random_segments(rng);
    const ad::Matrix px = random_pixels(rng);
    const PairScorer scorer(fx.snap, fx.vocab, px, segs, t);
    const ScreenResult got = screen_pair(scorer);

    const auto visual = model::encode_image(fx.snap.params, px);
    std::vector<int> full{model::Vocabulary::kCls};
    for (const auto& s : segs) {
      const auto ids = fx.vocab.encode(s);
      full.insert(full.end(), ids.begin(), ids.end());
    }
    const auto base = train::score_pair(fx.snap.params, visual, full, fx.snap.queue, fx.snap.temperature, t);
    std::vector<int> expect;
    for (int j = 0; j < kSegmentsPerText; ++j) {
      const auto ids = removal_ids(fx.vocab, segs, j);
      if (ids.size() <= 1) {
        CHECK_FALSE(got.deltas[j].has_value());
        continue;
      }
      const auto s = train::score_pair(fx.snap.params, visual, ids, fx.snap.queue, fx.snap.temperature, t);
      const double ditc = ids == full ? 0.0 : s.itc - base.itc;
      const double ditm = ids == full ? 0.0 : s.match - base.match;
      REQUIRE(got.deltas[j].has_value());
      CHECK(got.deltas[j]->itc == ditc);
      CHECK(got.deltas[j]->itm == ditm);
      if (ditc < 0 && ditm > 0) expect.push_back(j);
    }
    CHECK(got.flagged == expect);
    flagged_total += static_cast<int>(expect.size());
  }
  CHECK(flagged_total > 0);
}

TEST_CASE("screening is deterministic and honours the skip list") {
  Fixture fx(21);
  Rng rng(22);
  const auto segs = random_segments(rng);
  const ad::Matrix px = random_pixels(rng);
  const PairScorer a(fx.snap, fx.vocab, px, segs, 3), b(fx.snap, fx.vocab, px, segs, 3);
  const ScreenResult ra = screen_pair(a), rb = screen_pair(b);
  CHECK(ra.flagged == rb.flagged);
  for (int j = 0; j < kSegmentsPerText; ++j) CHECK(ra.deltas[j] == rb.deltas[j]);
  const ScreenResult skipped = screen_pair(a, {0, 5});
  CHECK_FALSE(skipped.deltas[0].has_value());
  CHECK_FALSE(skipped.deltas[5].has_value());
  CHECK(skipped.deltas[1] == ra.deltas[1]);
}

TEST_CASE("noise pool only grows and rejects unflagged entries") {
  NoisePool pool;
  CHECK_THROWS_AS(pool.insert(1, 2, {0.1, 0.2}), ContractError);
  CHECK_THROWS_AS(pool.insert(1, 2, {-0.1, 0.0}), ContractError);
  CHECK_THROWS_AS(pool.insert(1, 2, {0.0, 0.3}), ContractError);
  CHECK(pool.size() == 0);
  CHECK(pool.insert(1, 2, {-0.1, 0.2}));
  CHECK(pool.insert(1, 0, {-0.5, 0.01}));
  CHECK(pool.insert(4, 7, {-1e-12, 1e-12}));
  CHECK_FALSE(pool.insert(1, 2, {-0.9, 0.9}));
  CHECK(pool.size() == 3);
  CHECK(pool.entries().at({1, 2}) == SegmentDeltas{-0.1, 0.2});
  CHECK(pool.segments_of(1) == std::vector<int>{0, 2});
  CHECK(pool.segments_of(4) == std::vector<int>{7});
  CHECK(pool.segments_of(2).empty());
  CHECK(pool.contains(4, 7));
  CHECK_FALSE(pool.contains(4, 6));
  CHECK_THROWS_AS(pool.insert(1, 8, {-1, 1}), UsageError);
}

TEST_CASE("masking covers exactly the flagged span and unmask restores it") {
  const model::Vocabulary vocab = word_vocab();
  const std::vector<std::string> segs{"red roof", "", "dock pier lake", "road", "field", "hill", "ship", "plane two"};
  const EncodedText text = encode_segments(vocab, segs);
  NoisePool pool;
  pool.insert(9, 2, {-1, 1});
  CHECK_THROWS_AS(mask_segment(pool, 9, text, 3), UsageError);
  CHECK_THROWS_AS(mask_segment(pool, 8, text, 2), UsageError);

  const MaskedText m = mask_segment(pool, 9, text, 2);
  CHECK(m.span == text.spans[2]);
  CHECK(m.original == vocab.encode("dock pier lake"));
  for (std::size_t p = 0; p < m.ids.size(); ++p) {
    const bool inside = static_cast<int>(p) >= m.span.first && static_cast<int>(p) < m.span.second;
    if (inside) CHECK(m.ids[p] == model::Vocabulary::kMask);
    else CHECK(m.ids[p] == text.ids[p]);
  }
  CHECK(unmask(m) == text.ids);

  pool.insert(9, 1, {-1, 1});
  const MaskedText empty = mask_segment(pool, 9, text, 1);
  CHECK(empty.ids == text.ids);
  CHECK(empty.original.empty());
}

TEST_CASE("reconstruction follows a peaked head, skips specials and breaks ties low") {
  Fixture fx(31);
  Rng rng(32);
  const std::vector<std::string> segs{"red", "roof dock", "pier", "lake", "road", "field", "hill", "ship"};
  const EncodedText text = encode_segments(fx.vocab, segs);
  NoisePool pool;
  pool.insert(0, 1, {-1, 1});
  const MaskedText m = mask_segment(pool, 0, text, 1);
  const auto visual = model::encode_image(fx.snap.params, random_pixels(rng));

  model::ParamSet p = fx.snap.params;
  p.at("mlm.w").data.setZero();
  p.at("mlm.b").data.setZero();
  CHECK(reconstruct_segment(p, m, visual, fx.vocab) == std::vector<int>{model::Vocabulary::kReserved,
                                                                       model::Vocabulary::kReserved});

  const int target = fx.vocab.id("lake");
  p.at("mlm.b").data(target) = 5.0;
  p.at("mlm.b").data(model::Vocabulary::kMask) = 50.0;
  p.at("mlm.b").data(fx.vocab.size()) = 50.0;  // beyond the vocabulary
  const auto got = reconstruct_segment(p, m, visual, fx.vocab);
  CHECK(got == std::vector<int>{target, target});
  CHECK(fx.vocab.decode(got) == "lake lake");

  const auto a = reconstruct_segment(fx.snap.params, m, visual, fx.vocab);
  CHECK(a == reconstruct_segment(fx.snap.params, m, visual, fx.vocab));
  CHECK(a.size() == 2);
  for (int id : a) CHECK((id >= model::Vocabulary::kReserved && id < fx.vocab.size()));

  MaskedText partial = m;
  partial.ids[static_cast<std::size_t>(m.span.first)] = target;
  CHECK_THROWS_AS(reconstruct_segment(p, partial, visual, fx.vocab), UsageError);
}

TEST_CASE("reconstructions are accepted exactly when both conditions hold") {
  Fixture fx(41);
  Rng rng(42);
  int accepted = 0, rejected = 0;
  for (int t = 0; t < 40; ++t) {
    auto segs = random_segments(rng);
    if (segs[4].empty()) segs[4] = "ship";
    const PairScorer scorer(fx.snap, fx.vocab, random_pixels(rng), segs, t);
    std::vector<int> cand;
    for (int k = 0; k < 1 + static_cast<int>(rng.below(3)); ++k) {
      cand.push_back(model::Vocabulary::kReserved + static_cast<int>(rng.below(fx.vocab.size() - 4)));
    }
    const ScioDecision d = accept_reconstruction(scorer, 4, cand, fx.vocab, "s3");
    const SegmentDeltas expect = scorer.replacement(4, cand);
    CHECK(d.deltas == expect);
    CHECK(d.stage == 3);
    CHECK(d.snapshot_id == "s3");
    CHECK(d.candidate_text == fx.vocab.decode(cand));
    if (expect.itc < 0 && expect.itm > 0) {
      CHECK(d.action == Action::reconstruct_accepted);
      CHECK(d.replacement_text == d.candidate_text);
      ++accepted;
    } else {
      CHECK(d.action == Action::reconstruct_rejected);
      CHECK_FALSE(d.replacement_text.has_value());
      ++rejected;
    }
    d.validate();
  }
  CHECK(accepted > 0);
  CHECK(rejected > 0);
}

TEST_CASE("decisions round trip through JSON and bad records are rejected") {
  ScioDecision keep;
  keep.pair_id = 12;
  keep.segment = 3;
  keep.snapshot_id = "stage2-epoch0";
  keep.deltas = SegmentDeltas{0.25, -0.125};
  ScioDecision err = keep;
  err.deltas.reset();
  err.error = "removing segment 3 of pair 12 leaves no text";
  ScioDecision acc;
  acc.pair_id = 5;
  acc.segment = 7;
  acc.stage = 3;
  acc.action = Action::reconstruct_accepted;
  acc.deltas = SegmentDeltas{-0.1, 0.3};
  acc.candidate_text = "two ships";
  acc.replacement_text = "two ships";
  acc.snapshot_id = "stage3";

  const auto path = scratch("report.jsonl");
  {
    std::ofstream f(path);
    for (const auto& d : {keep, err, acc}) f << to_json(d).dump() << '\n';
  }
  const auto back = read_report(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0] == keep);
  CHECK(back[1] == err);
  CHECK(back[2] == acc);
  CHECK(to_json(err)["delta_itc"].is_null());
  CHECK(to_json(acc)["segment_index"] == 7);

  for (const std::string& s : {"keep", "drop", "reconstruct_accepted", "reconstruct_rejected"}) {
    CHECK(action_name(action_from_name(s)) == s);
  }
  CHECK_THROWS_AS(action_from_name("discard"), FormatError);

  ScioDecision bad = acc;
  bad.replacement_text.reset();
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK_THROWS_AS(decision_from_json(to_json(bad)), FormatError);
  bad = keep;
  bad.action = Action::drop;
  bad.deltas.reset();
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = keep;
  bad.stage = 1;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK_THROWS_AS(decision_from_json(nlohmann::json{{"pair_id", 1}}), FormatError);
}

TEST_CASE("queue snapshots survive the JSON round trip") {
  Rng rng(51);
  const auto q = random_queue(rng, 5, 16);
  const auto back = queue_from_json(nlohmann::json::parse(queue_to_json(q).dump()));
  CHECK(back.images == q.images);
  CHECK(back.texts == q.texts);
  CHECK(back.image_pair_ids == q.image_pair_ids);
  auto j = queue_to_json(q);
  j["text_pair_ids"].erase(0);
  CHECK_THROWS_AS(queue_from_json(j), FormatError);
}

TEST_CASE("an empty stage schedule is a configuration error") {
  ScioOptions o{"/nonexistent", scratch("empty_schedule"), small_run_config()};
  o.config.stages = {0, 0, 0};
  CHECK_THROWS_AS(run_scio(o), ConfigError);
}

TEST_CASE("a small run passes its own audit and repeats byte for byte") {
  const auto corpus = small_corpus("corpus", 0.25);
  ScioOptions o{corpus, scratch("run_a"), small_run_config()};
  const ScioResult r = run_scio(o);

  std::size_t stage2 = 0, stage3 = 0, drops = 0;
  for (const auto& d : r.decisions) {
    stage2 += d.stage == 2;
    stage3 += d.stage == 3;
    drops += d.action == Action::drop;
    if (d.action == Action::drop) CHECK(r.pool.contains(d.pair_id, d.segment));
  }
  CHECK(drops == r.pool.size());
  CHECK(stage3 == r.pool.size());
  CHECK(stage2 >= 16 * kSegmentsPerText);
  CHECK(read_report(o.out_dir / "report.jsonl") == r.decisions);
  for (const auto* f : {"model.sklp", "vocab.txt", "config.txt", "metrics.csv", "corpus.jsonl",
                        "snapshots/stage2-epoch0.sklp", "snapshots/stage2-epoch1.queue.json", "snapshots/stage3.sklp"}) {
    CHECK(std::filesystem::exists(o.out_dir / f));
  }

  const AuditResult audit = audit_report(o.out_dir, corpus, 2);
  CHECK(audit.checked == drops + static_cast<std::size_t>(std::count_if(
                                     r.decisions.begin(), r.decisions.end(),
                                     [](const ScioDecision& d) { return d.action == Action::reconstruct_accepted; })));
  CHECK(audit.violations.empty());

  ScioOptions o2 = o;
  o2.out_dir = scratch("run_b");
  o2.config.threads = 3;
  run_scio(o2);
  for (const auto* f : {"report.jsonl", "model.sklp", "metrics.csv", "corpus.jsonl"}) {
    CHECK(slurp(o.out_dir / f) == slurp(o2.out_dir / f));
  }
}

TEST_CASE("the audit catches a tampered report") {
  const auto corpus = small_corpus("corpus_t", 0.5);
  ScioOptions o{corpus, scratch("run_t"), small_run_config()};
  o.config.stages = {1, 1, 0};
  const ScioResult r = run_scio(o);
  std::vector<ScioDecision> ds = r.decisions;
  auto it = std::find_if(ds.begin(), ds.end(), [](const ScioDecision& d) { return d.action == Action::keep && d.deltas; });
  REQUIRE(it != ds.end());
  it->action = Action::drop;
  {
    std::ofstream f(o.out_dir / "report.jsonl");
    for (const auto& d : ds) f << to_json(d).dump() << '\n';
  }
  const AuditResult audit = audit_report(o.out_dir, corpus);
  CHECK(audit.violations.size() == 1);
}

TEST_CASE("a run can start from an earlier checkpoint") {
  const auto corpus = small_corpus("corpus_i", 0.0);
  train::RunConfig cfg = small_run_config();
  cfg.epochs = 1;
  const auto init = scratch("init");
  const auto trained = train::run_training(corpus, init, cfg);

  ScioOptions o{corpus, scratch("run_i"), cfg, init};
  o.config.stages = {0, 1, 0};
  const ScioResult r = run_scio(o);
  CHECK(model::Vocabulary::load(o.out_dir / "vocab.txt") == trained.vocab);
  const Snapshot snap = load_snapshot("stage2-epoch0", o.out_dir / "snapshots", cfg.temperature);
  CHECK(model::serialize_checkpoint(snap.params) == model::serialize_checkpoint(model::round_trip_f32(trained.params)));

  o.config.model.embed_dim = 32;
  o.config.model.num_heads = 4;
  o.out_dir = scratch("run_i2");
  CHECK_THROWS_AS(run_scio(o), ConfigError);
}
