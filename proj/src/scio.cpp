#include "sklp/scio.hpp"

#include "sklp/checkpoint.hpp"
#include "sklp/errors.hpp"
#include "sklp/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace sklp::scio {

namespace {

void check_segment(int j) {
  if (j < 0 || j >= kSegmentsPerText) throw UsageError("segment index " + std::to_string(j) + " outside [0, 8)");
}

nlohmann::json matrix_rows(const ad::Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

ad::Matrix rows_matrix(const nlohmann::json& rows, Eigen::Index dim) {
  ad::Matrix m(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto row = rows[r].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != dim) throw FormatError("queue row width mismatch");
    for (Eigen::Index c = 0; c < dim; ++c) m(static_cast<Eigen::Index>(r), c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

Snapshot take_snapshot(const train::Trainer& trainer, std::string id) {
  return {std::move(id), model::round_trip_f32(trainer.params()),
          trainer.queue().snapshot(trainer.config().model.embed_dim), trainer.config().temperature};
}

std::string describe(const ScioDecision& d) {
  return "pair " + std::to_string(d.pair_id) + " segment " + std::to_string(d.segment) + " (" +
         action_name(d.action) + ", " + d.snapshot_id + ")";
}

}  // namespace

nlohmann::json queue_to_json(const objectives::QueueSnapshot& q) {
  return {{"dim", std::max(q.images.cols(), q.texts.cols())},
          {"images", matrix_rows(q.images)},
          {"texts", matrix_rows(q.texts)},
          {"image_pair_ids", q.image_pair_ids},
          {"text_pair_ids", q.text_pair_ids}};
}

objectives::QueueSnapshot queue_from_json(const nlohmann::json& j) {
  try {
    const auto dim = j.at("dim").get<Eigen::Index>();
    objectives::QueueSnapshot q{rows_matrix(j.at("images"), dim), rows_matrix(j.at("texts"), dim),
                                j.at("image_pair_ids").get<std::vector<std::int64_t>>(),
                                j.at("text_pair_ids").get<std::vector<std::int64_t>>()};
    if (q.image_pair_ids.size() != static_cast<std::size_t>(q.images.rows()) ||
        q.text_pair_ids.size() != static_cast<std::size_t>(q.texts.rows())) {
      throw FormatError("queue pair ids do not match queue rows");
    }
    return q;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("queue snapshot: ") + e.what());
  }
}

void save_snapshot(const Snapshot& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  model::save_checkpoint(s.params, dir / (s.id + ".sklp"));
  std::ofstream f(dir / (s.id + ".queue.json"), std::ios::binary);
  if (!f) throw IoError("cannot write queue snapshot " + s.id);
  f << queue_to_json(s.queue).dump() << '\n';
}

Snapshot load_snapshot(const std::string& id, const std::filesystem::path& dir, double temperature) {
  Snapshot s;
  s.id = id;
  s.params = model::load_checkpoint(dir / (id + ".sklp"));
  std::ifstream f(dir / (id + ".queue.json"), std::ios::binary);
  if (!f) throw IoError("cannot open queue snapshot " + (dir / (id + ".queue.json")).string());
  try {
    s.queue = queue_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("queue snapshot: ") + e.what());
  }
  s.temperature = temperature;
  return s;
}

// ---- scoring -----------------------------------------------------------------

PairScorer::PairScorer(const Snapshot& snap, const model::Vocabulary& vocab, const ad::Matrix& pixels,
                       std::vector<std::string> segments, std::int64_t pair_id)
    : snap_(snap), vocab_(vocab), segments_(std::move(segments)), pair_id_(pair_id) {
  if (segments_.size() != static_cast<std::size_t>(kSegmentsPerText)) {
    throw DataError("pair " + std::to_string(pair_id) + " does not have 8 segments");
  }
  visual_ = model::encode_image(snap_.params, pixels);
  encoded_ = encode_segments(vocab_, segments_);
  original_ = score(encoded_.ids);
}

train::PairScore PairScorer::score(std::span<const int> ids) const {
  return train::score_pair(snap_.params, visual_, ids, snap_.queue, snap_.temperature, pair_id_);
}

SegmentDeltas PairScorer::removal(int j) const {
  check_segment(j);
  const EncodedText reduced = encode_segments(vocab_, segments_, j);
  if (reduced.ids.size() <= 1) {
    throw ScreeningError("removing segment " + std::to_string(j) + " of pair " + std::to_string(pair_id_) +
                         " leaves no text");
  }
  if (reduced.ids == encoded_.ids) return {};
  const train::PairScore s = score(reduced.ids);
  return {s.itc - original_.itc, s.match - original_.match};
}

SegmentDeltas PairScorer::replacement(int j, std::span<const int> tokens) const {
  check_segment(j);
  const auto [begin, end] = encoded_.spans[static_cast<std::size_t>(j)];
  std::vector<int> ids(encoded_.ids.begin(), encoded_.ids.begin() + begin);
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  ids.insert(ids.end(), encoded_.ids.begin() + end, encoded_.ids.end());
  if (ids.size() <= 1) throw ScreeningError("replacement leaves no text");
  if (ids == encoded_.ids) return {};
  const train::PairScore s = score(ids);
  return {s.itc - original_.itc, s.match - original_.match};
}

double delta_itc_segment(const PairScorer& scorer, int j) { return scorer.removal(j).itc; }
double delta_itm_segment(const PairScorer& scorer, int j) { return scorer.removal(j).itm; }

ScreenResult screen_pair(const PairScorer& scorer, const std::vector<int>& skip) {
  ScreenResult out;
  for (int j = 0; j < kSegmentsPerText; ++j) {
    if (std::find(skip.begin(), skip.end(), j) != skip.end()) continue;
    try {
      const SegmentDeltas d = scorer.removal(j);
      out.deltas[static_cast<std::size_t>(j)] = d;
      if (is_noise(d)) out.flagged.push_back(j);
    } catch (const ScreeningError& e) {
      out.errors[static_cast<std::size_t>(j)] = e.what();
    }
  }
  return out;
}

// ---- noise pool and reconstruction ------------------------------------------

bool NoisePool::insert(std::int64_t pair_id, int segment, SegmentDeltas deltas) {
  check_segment(segment);
  if (!is_noise(deltas)) throw ContractError("noise pool entries must satisfy both flagging conditions");
  return entries_.try_emplace({pair_id, segment}, deltas).second;
}

bool NoisePool::contains(std::int64_t pair_id, int segment) const { return entries_.count({pair_id, segment}) > 0; }

std::vector<int> NoisePool::segments_of(std::int64_t pair_id) const {
  std::vector<int> out;
  for (auto it = entries_.lower_bound({pair_id, std::numeric_limits<int>::min()});
       it != entries_.end() && it->first.first == pair_id; ++it) {
    out.push_back(it->first.second);
  }
  return out;
}

MaskedText mask_segment(const NoisePool& pool, std::int64_t pair_id, const EncodedText& text, int j) {
  check_segment(j);
  if (!pool.contains(pair_id, j)) {
    throw UsageError("segment " + std::to_string(j) + " of pair " + std::to_string(pair_id) + " is not flagged");
  }
  MaskedText m;
  m.ids = text.ids;
  m.span = text.spans.at(static_cast<std::size_t>(j));
  for (int p = m.span.first; p < m.span.second; ++p) {
    m.original.push_back(m.ids[static_cast<std::size_t>(p)]);
    m.ids[static_cast<std::size_t>(p)] = model::Vocabulary::kMask;
  }
  return m;
}

std::vector<int> unmask(const MaskedText& masked) {
  std::vector<int> ids = masked.ids;
  std::copy(masked.original.begin(), masked.original.end(), ids.begin() + masked.span.first);
  return ids;
}

std::vector<int> reconstruct_segment(const model::ParamSet& params, const MaskedText& masked,
                                     const model::VisualEmbedding& visual, const model::Vocabulary& vocab) {
  std::vector<int> ids = masked.ids;
  for (int p = masked.span.first; p < masked.span.second; ++p) {
    if (ids[static_cast<std::size_t>(p)] != model::Vocabulary::kMask) {
      throw UsageError("reconstruction needs a fully masked span");
    }
  }
  const int limit = std::min(vocab.size(), params.config().vocab_size);
  if (limit <= model::Vocabulary::kReserved) throw VocabularyError("vocabulary has no ordinary tokens");
  std::vector<int> out;
  for (int p = masked.span.first; p < masked.span.second; ++p) {
    const ad::Matrix logits = model::mlm_logits(params, ids, visual);
    int best = model::Vocabulary::kReserved;
    for (int id = best + 1; id < limit; ++id) {
      if (logits(p, id) > logits(p, best)) best = id;
    }
    ids[static_cast<std::size_t>(p)] = best;
    out.push_back(best);
  }
  return out;
}

// ---- decisions -------------------------------------------------------------

std::string action_name(Action a) {
  switch (a) {
    case Action::keep: return "keep";
    case Action::drop: return "drop";
    case Action::reconstruct_accepted: return "reconstruct_accepted";
    case Action::reconstruct_rejected: return "reconstruct_rejected";
  }
  return "keep";
}

Action action_from_name(const std::string& name) {
  for (Action a : {Action::keep, Action::drop, Action::reconstruct_accepted, Action::reconstruct_rejected}) {
    if (action_name(a) == name) return a;
  }
  throw FormatError("unknown action '" + name + "'");
}

void ScioDecision::validate() const {
  check_segment(segment);
  if (stage != 2 && stage != 3) throw ContractError("decisions belong to stage 2 or 3");
  if (replacement_text.has_value() != (action == Action::reconstruct_accepted)) {
    throw ContractError("replacement text must be present exactly for accepted reconstructions");
  }
  if ((action == Action::drop || action == Action::reconstruct_accepted) && !deltas) {
    throw ContractError(action_name(action) + " decisions carry their deltas");
  }
}

nlohmann::json to_json(const ScioDecision& d) {
  nlohmann::json j{{"pair_id", d.pair_id},
                   {"segment_index", d.segment},
                   {"stage", d.stage},
                   {"action", action_name(d.action)},
                   {"snapshot_id", d.snapshot_id}};
  j["delta_itc"] = d.deltas ? nlohmann::json(d.deltas->itc) : nlohmann::json(nullptr);
  j["delta_itm"] = d.deltas ? nlohmann::json(d.deltas->itm) : nlohmann::json(nullptr);
  if (d.candidate_text) j["candidate_text"] = *d.candidate_text;
  if (d.replacement_text) j["replacement_text"] = *d.replacement_text;
  if (d.error) j["error"] = *d.error;
  return j;
}

ScioDecision decision_from_json(const nlohmann::json& j) {
  ScioDecision d;
  try {
    d.pair_id = j.at("pair_id").get<std::int64_t>();
    d.segment = j.at("segment_index").get<int>();
    d.stage = j.at("stage").get<int>();
    d.action = action_from_name(j.at("action").get<std::string>());
    d.snapshot_id = j.at("snapshot_id").get<std::string>();
    if (!j.at("delta_itc").is_null()) d.deltas = SegmentDeltas{j["delta_itc"].get<double>(), j.at("delta_itm").get<double>()};
    if (j.contains("candidate_text")) d.candidate_text = j["candidate_text"].get<std::string>();
    if (j.contains("replacement_text")) d.replacement_text = j["replacement_text"].get<std::string>();
    if (j.contains("error")) d.error = j["error"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report record: ") + e.what());
  }
  try {
    d.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("report record: ") + e.what());
  }
  return d;
}

std::vector<ScioDecision> read_report(const std::filesystem::path& jsonl) {
  std::ifstream f(jsonl, std::ios::binary);
  if (!f) throw IoError("cannot open report " + jsonl.string());
  std::vector<ScioDecision> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(decision_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(jsonl.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ScioDecision accept_reconstruction(const PairScorer& scorer, int j, std::span<const int> candidate,
                                   const model::Vocabulary& vocab, const std::string& snapshot_id) {
  ScioDecision d;
  d.pair_id = scorer.pair_id();
  d.segment = j;
  d.stage = 3;
  d.snapshot_id = snapshot_id;
  d.deltas = scorer.replacement(j, candidate);
  d.candidate_text = vocab.decode(candidate);
  if (is_noise(*d.deltas)) {
    d.action = Action::reconstruct_accepted;
    d.replacement_text = d.candidate_text;
  } else {
    d.action = Action::reconstruct_rejected;
  }
  return d;
}

// ---- staged loop -------------------------------------------------------------

ScioResult run_scio(const ScioOptions& o) {
  train::RunConfig cfg = o.config;
  cfg.validate();
  cfg.stages.validate();
  std::vector<CorpusRecord> records = read_corpus(o.corpus_dir / "corpus.jsonl");
  if (records.empty()) throw ConfigError("corpus is empty");

  const std::filesystem::path snap_dir = o.out_dir / "snapshots";
  std::filesystem::create_directories(snap_dir);
  model::ParamSet init;
  model::Vocabulary vocab;
  if (o.init_dir) {
    init = model::load_checkpoint(*o.init_dir / "model.sklp");
    if (!(init.config() == cfg.model)) throw ConfigError("initial checkpoint model config does not match the run config");
    vocab = model::Vocabulary::load(*o.init_dir / "vocab.txt");
  } else {
    vocab = train::build_vocabulary(records, cfg.model.vocab_size);
    init = model::init_params(cfg.model, train::init_seed(cfg));
  }
  vocab.save(o.out_dir / "vocab.txt");
  train::write_config(cfg, o.out_dir / "config.txt");
  std::vector<train::Example> examples = train::make_examples(records, vocab, o.corpus_dir, cfg);
  const std::size_t n = examples.size();

  train::Trainer trainer(cfg, std::move(init), n);
  ScioResult result;
  std::ofstream report(o.out_dir / "report.jsonl", std::ios::binary);
  if (!report) throw IoError("cannot write report in " + o.out_dir.string());
  auto emit = [&](ScioDecision d) {
    d.validate();
    report << to_json(d).dump() << '\n';
    result.decisions.push_back(std::move(d));
  };

  for (int e = 0; e < cfg.stages.stage1; ++e) trainer.run_epoch(examples);

  for (int e = 0; e < cfg.stages.stage2; ++e) {
    const Snapshot snap = take_snapshot(trainer, "stage2-epoch" + std::to_string(e));
    save_snapshot(snap, snap_dir);
    std::vector<ScreenResult> screens(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      const PairScorer scorer(snap, vocab, examples[i].pixels, records[i].segments, records[i].pair_id);
      screens[i] = screen_pair(scorer, result.pool.segments_of(records[i].pair_id));
    });
    for (std::size_t i = 0; i < n; ++i) {
      const std::int64_t pid = records[i].pair_id;
      for (int j = 0; j < kSegmentsPerText; ++j) {
        if (result.pool.contains(pid, j)) continue;
        ScioDecision d;
        d.pair_id = pid;
        d.segment = j;
        d.stage = 2;
        d.snapshot_id = snap.id;
        const auto& delta = screens[i].deltas[static_cast<std::size_t>(j)];
        if (!delta) {
          d.error = screens[i].errors[static_cast<std::size_t>(j)];
        } else {
          d.deltas = *delta;
          if (is_noise(*delta)) {
            d.action = Action::drop;
            result.pool.insert(pid, j, *delta);
            examples[i].mlm_excluded[static_cast<std::size_t>(j)] = 1;
          }
        }
        emit(std::move(d));
      }
    }
    trainer.run_epoch(examples);
  }

  if (cfg.stages.stage3 > 0) {
    const Snapshot snap = take_snapshot(trainer, "stage3");
    save_snapshot(snap, snap_dir);
    std::vector<std::vector<ScioDecision>> per_pair(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      const std::vector<int> flagged = result.pool.segments_of(records[i].pair_id);
      if (flagged.empty()) return;
      const PairScorer scorer(snap, vocab, examples[i].pixels, records[i].segments, records[i].pair_id);
      for (int j : flagged) {
        const MaskedText masked = mask_segment(result.pool, records[i].pair_id, scorer.encoded(), j);
        const std::vector<int> tokens = reconstruct_segment(snap.params, masked, scorer.visual(), vocab);
        per_pair[i].push_back(accept_reconstruction(scorer, j, tokens, vocab, snap.id));
      }
    });
    for (std::size_t i = 0; i < n; ++i) {
      bool changed = false;
      for (ScioDecision& d : per_pair[i]) {
        if (d.action == Action::reconstruct_accepted) {
          records[i].segments[static_cast<std::size_t>(d.segment)] = *d.replacement_text;
          examples[i].mlm_excluded[static_cast<std::size_t>(d.segment)] = 0;
          changed = true;
        }
        emit(std::move(d));
      }
      if (changed) examples[i].text = encode_segments(vocab, records[i].segments);
    }
    for (int e = 0; e < cfg.stages.stage3; ++e) trainer.run_epoch(examples);
  }

  report.close();
  if (!report) throw IoError("failed writing report in " + o.out_dir.string());
  model::save_checkpoint(trainer.params(), o.out_dir / "model.sklp");
  train::write_metrics_csv(o.out_dir / "metrics.csv", trainer.metrics());
  write_corpus(o.out_dir / "corpus.jsonl", records);
  result.params = trainer.params();
  result.corpus = std::move(records);
  return result;
}

AuditResult audit_report(const std::filesystem::path& run_dir, const std::filesystem::path& corpus_dir,
                         unsigned threads) {
  train::RunConfig cfg;
  train::apply_config_file(cfg, run_dir / "config.txt");
  cfg.validate();
  const model::Vocabulary vocab = model::Vocabulary::load(run_dir / "vocab.txt");
  const std::vector<CorpusRecord> records = read_corpus(corpus_dir / "corpus.jsonl");
  std::map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index[records[i].pair_id] = i;

  std::vector<ScioDecision> todo;
  std::map<std::string, Snapshot> snaps;
  for (ScioDecision& d : read_report(run_dir / "report.jsonl")) {
    if (d.action != Action::drop && d.action != Action::reconstruct_accepted) continue;
    if (!snaps.count(d.snapshot_id)) {
      snaps.emplace(d.snapshot_id, load_snapshot(d.snapshot_id, run_dir / "snapshots", cfg.temperature));
    }
    todo.push_back(std::move(d));
  }

  std::vector<std::string> problems(todo.size());
  parallel_for(todo.size(), threads, [&](std::size_t k) {
    const ScioDecision& d = todo[k];
    const auto it = index.find(d.pair_id);
    if (it == index.end()) {
      problems[k] = describe(d) + ": pair missing from corpus";
      return;
    }
    const CorpusRecord& r = records[it->second];
    try {
      const PairScorer scorer(snaps.at(d.snapshot_id), vocab, load_image(corpus_dir / r.image_path), r.segments,
                              r.pair_id);
      const SegmentDeltas got = d.action == Action::drop
                                    ? scorer.removal(d.segment)
                                    : scorer.replacement(d.segment, vocab.encode(*d.replacement_text));
      if (!is_noise(got)) {
        problems[k] = describe(d) + ": recomputed deltas (" + std::to_string(got.itc) + ", " +
                      std::to_string(got.itm) + ") fail the strict inequalities";
      } else if (std::abs(got.itc - d.deltas->itc) > 1e-9 || std::abs(got.itm - d.deltas->itm) > 1e-9) {
        problems[k] = describe(d) + ": recomputed deltas differ from the report";
      }
    } catch (const Error& e) {
      problems[k] = describe(d) + ": " + e.what();
    }
  });

  AuditResult out;
  out.checked = todo.size();
  for (std::string& p : problems) {
    if (!p.empty()) out.violations.push_back(std::move(p));
  }
  return out;
}

}  // namespace sklp::scio
