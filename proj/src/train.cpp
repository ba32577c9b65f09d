#include "sklp/train.hpp"

#include "sklp/checkpoint.hpp"
#include "sklp/errors.hpp"
#include "sklp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>

namespace sklp::train {

using ad::Matrix;
using ad::Var;

void StageSchedule::validate() const {
  if (stage1 < 0 || stage2 < 0 || stage3 < 0) throw ConfigError("stage epochs must be nonnegative");
  if (total() <= 0) throw ConfigError("stage schedule must contain at least one epoch");
}

void RunConfig::validate() {
  if (image_side <= 0 || model.patch_size <= 0 || image_side % model.patch_size != 0) {
    throw ConfigError("image_side must be a positive multiple of patch_size");
  }
  const int grid = image_side / model.patch_size;
  model.max_patches = grid * grid;
  model.validate();
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (queue_capacity <= 0) throw ConfigError("queue_capacity must be positive");
  if (queue_warmup_epochs < 0) throw ConfigError("queue_warmup_epochs must be nonnegative");
  if (!(lr > 0.0) || !(min_lr > 0.0) || min_lr > lr) throw ConfigError("need 0 < min_lr <= lr");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be nonnegative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ConfigError("mask_rate must lie in (0, 1]");
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  objectives::Temperature{temperature}.validate();
  weights.validate();
}

namespace {

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("setting " + key + " expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("setting " + key + " expects a number, got '" + v + "'");
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto i = [&] { return static_cast<int>(to_long(key, value)); };
  auto d = [&] { return to_double(key, value); };
  if (key == "embed_dim") model.embed_dim = i();
  else if (key == "num_layers") model.num_layers = i();
  else if (key == "num_heads") model.num_heads = i();
  else if (key == "patch_size") model.patch_size = i();
  else if (key == "vocab_size") model.vocab_size = i();
  else if (key == "max_text_len") model.max_text_len = i();
  else if (key == "image_side") image_side = i();
  else if (key == "batch_size") batch_size = i();
  else if (key == "queue_capacity") queue_capacity = i();
  else if (key == "queue_warmup_epochs") queue_warmup_epochs = i();
  else if (key == "lr") lr = d();
  else if (key == "warmup_steps") warmup_steps = i();
  else if (key == "weight_decay") weight_decay = d();
  else if (key == "min_lr") min_lr = d();
  else if (key == "lr_decay") lr_decay = d();
  else if (key == "temperature") temperature = d();
  else if (key == "w_itc") weights.itc = d();
  else if (key == "w_itm") weights.itm = d();
  else if (key == "w_mlm") weights.mlm = d();
  else if (key == "mask_rate") mask_rate = d();
  else if (key == "epochs") epochs = i();
  else if (key == "epochs_stage1") stages.stage1 = i();
  else if (key == "epochs_stage2") stages.stage2 = i();
  else if (key == "epochs_stage3") stages.stage3 = i();
  else if (key == "seed") seed = static_cast<std::uint64_t>(to_long(key, value));
  else if (key == "threads") threads = static_cast<unsigned>(std::max(1L, to_long(key, value)));
  else throw UsageError("unknown setting '" + key + "'");
}

std::map<std::string, std::string> RunConfig::to_map() const {
  return {{"embed_dim", std::to_string(model.embed_dim)},
          {"num_layers", std::to_string(model.num_layers)},
          {"num_heads", std::to_string(model.num_heads)},
          {"patch_size", std::to_string(model.patch_size)},
          {"vocab_size", std::to_string(model.vocab_size)},
          {"max_text_len", std::to_string(model.max_text_len)},
          {"image_side", std::to_string(image_side)},
          {"batch_size", std::to_string(batch_size)},
          {"queue_capacity", std::to_string(queue_capacity)},
          {"queue_warmup_epochs", std::to_string(queue_warmup_epochs)},
          {"lr", num(lr)},
          {"warmup_steps", std::to_string(warmup_steps)},
          {"weight_decay", num(weight_decay)},
          {"min_lr", num(min_lr)},
          {"lr_decay", num(lr_decay)},
          {"temperature", num(temperature)},
          {"w_itc", num(weights.itc)},
          {"w_itm", num(weights.itm)},
          {"w_mlm", num(weights.mlm)},
          {"mask_rate", num(mask_rate)},
          {"epochs", std::to_string(epochs)},
          {"epochs_stage1", std::to_string(stages.stage1)},
          {"epochs_stage2", std::to_string(stages.stage2)},
          {"epochs_stage3", std::to_string(stages.stage3)},
          {"seed", std::to_string(seed)},
          {"threads", std::to_string(threads)}};
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  const char* v = std::getenv("SKLP_SEED");
  if (!v || !*v) return fallback;
  return static_cast<std::uint64_t>(to_long("SKLP_SEED", v));
}

double LrSchedule::at(long step) const {
  if (step < warmup_steps) {
    return min_lr + (lr - min_lr) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const long epochs = (step - warmup_steps) / std::max(1L, steps_per_epoch);
  return std::max(min_lr, lr * std::pow(decay, static_cast<double>(epochs)));
}

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(model::ParamSet& params, const model::Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& [name, tensor] : params.entries()) {
    const auto g = grads.find(name);
    if (g == grads.end()) continue;
    Matrix& w = tensor.data;
    auto [mi, fresh] = m_.try_emplace(name, Matrix::Zero(w.rows(), w.cols()));
    Matrix& v = v_.try_emplace(name, Matrix::Zero(w.rows(), w.cols())).first->second;
    Matrix& m = mi->second;
    m = b1_ * m + (1.0 - b1_) * g->second;
    v = b2_ * v + (1.0 - b2_) * g->second.cwiseProduct(g->second);
    if (tensor.shape.size() == 2) w *= 1.0 - lr * wd_;
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

model::Vocabulary build_vocabulary(const std::vector<CorpusRecord>& records, int vocab_size) {
  std::vector<std::string> texts;
  for (const CorpusRecord& r : records) {
    for (const std::string& s : r.segments) texts.push_back(s);
  }
  return model::Vocabulary::build(texts, vocab_size);
}

std::vector<Example> make_examples(const std::vector<CorpusRecord>& records, const model::Vocabulary& vocab,
                                   const std::filesystem::path& corpus_dir, const RunConfig& cfg) {
  std::vector<Example> out;
  for (const CorpusRecord& r : records) {
    Example ex;
    ex.pair_id = r.pair_id;
    ex.pixels = load_image(corpus_dir / r.image_path);
    if (ex.pixels.rows() != cfg.image_side || ex.pixels.cols() != cfg.image_side) {
      throw DataError("image " + r.image_path + " is not " + std::to_string(cfg.image_side) + " pixels square");
    }
    ex.text = encode_segments(vocab, r.segments);
    if (static_cast<int>(ex.text.ids.size()) > cfg.model.max_text_len) {
      throw DataError("pair " + std::to_string(r.pair_id) + " encodes to " + std::to_string(ex.text.ids.size()) +
                      " tokens, above max_text_len");
    }
    ex.mlm_excluded.assign(kSegmentsPerText, 0);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<int> mlm_eligible_positions(const Example& ex) {
  std::vector<int> out;
  for (std::size_t s = 0; s < ex.text.spans.size(); ++s) {
    if (s < ex.mlm_excluded.size() && ex.mlm_excluded[s]) continue;
    for (int p = ex.text.spans[s].first; p < ex.text.spans[s].second; ++p) {
      if (ex.text.ids[static_cast<std::size_t>(p)] >= model::Vocabulary::kReserved) out.push_back(p);
    }
  }
  return out;
}

std::vector<int> choose_mask_positions(const Example& ex, double rate, std::uint64_t seed) {
  std::vector<int> pool = mlm_eligible_positions(ex);
  if (pool.empty()) return pool;
  const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(rate * pool.size())), 1, pool.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, r.lr, r.losses.itc, r.losses.itm,
                r.losses.mlm, r.losses.total);
  return buf;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write metrics " + path.string());
  f << "step,lr,l_itc,l_itm,l_mlm,total\n";
  for (const MetricsRow& r : rows) f << format_metrics_row(r) << '\n';
}

Trainer::Trainer(RunConfig cfg, model::ParamSet params, std::size_t corpus_size)
    : cfg_(std::move(cfg)),
      params_(std::move(params)),
      opt_(cfg_.weight_decay),
      queue_(static_cast<std::size_t>(cfg_.queue_capacity)) {
  cfg_.validate();
  if (corpus_size < static_cast<std::size_t>(cfg_.batch_size)) {
    throw ConfigError("batch_size " + std::to_string(cfg_.batch_size) + " exceeds corpus size " +
                      std::to_string(corpus_size));
  }
  if (!(params_.config() == cfg_.model)) throw ConfigError("parameters were built for a different model config");
  schedule_ = {cfg_.lr, cfg_.min_lr, cfg_.warmup_steps,
               static_cast<long>(corpus_size / static_cast<std::size_t>(cfg_.batch_size)), cfg_.lr_decay};
}

StepLosses Trainer::step(const std::vector<const Example*>& batch) {
  const auto b = static_cast<Eigen::Index>(batch.size());
  if (b < 2) throw ConfigError("a training step needs at least two examples");
  const std::uint64_t step_seed = mix_seed(cfg_.seed, 0x5354455000000000ULL + static_cast<std::uint64_t>(step_));
  const Eigen::Index dim = cfg_.model.embed_dim;
  const objectives::QueueSnapshot snap = epoch_ < cfg_.queue_warmup_epochs
                                             ? objectives::QueueSnapshot{Matrix(0, dim), Matrix(0, dim), {}, {}}
                                             : queue_.snapshot(dim);
  std::vector<std::int64_t> ids;
  for (const Example* ex : batch) ids.push_back(ex->pair_id);

  std::vector<std::vector<int>> masked_positions(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    masked_positions[i] = choose_mask_positions(*batch[i], cfg_.mask_rate, mix_seed(step_seed, i));
  }

  StepLosses losses;
  Matrix image_globals, text_globals;
  const model::LossBuilder builder = [&](model::Binding& bind) {
    ad::Graph& g = bind.graph();
    std::vector<model::VisualNodes> vis;
    std::vector<model::TextNodes> txt;
    std::vector<Var> vg, tg;
    for (const Example* ex : batch) {
      vis.push_back(model::visual_tower(bind, ex->pixels));
      txt.push_back(model::text_tower(bind, ex->text.ids));
      vg.push_back(vis.back().global);
      tg.push_back(txt.back().global);
    }
    Var images = ad::concat_rows(g, vg);
    Var texts = ad::concat_rows(g, tg);
    image_globals = g.value(images);
    text_globals = g.value(texts);
    Var l_itc = objectives::itc_loss(g, images, texts, snap, {cfg_.temperature}, ids);

    // Negative text per image drawn in proportion to exp(similarity / tau).
    Rng rng(mix_seed(step_seed, 0x49544d));
    const Matrix sim = image_globals * text_globals.transpose();
    std::vector<Var> logits;
    std::vector<double> labels;
    for (Eigen::Index i = 0; i < b; ++i) {
      std::vector<double> w(static_cast<std::size_t>(b), 0.0);
      double total = 0.0;
      for (Eigen::Index j = 0; j < b; ++j) {
        if (j == i) continue;
        w[static_cast<std::size_t>(j)] = std::exp((sim(i, j) - 1.0) / cfg_.temperature);
        total += w[static_cast<std::size_t>(j)];
      }
      double u = rng.uniform() * total;
      Eigen::Index neg = (i + 1) % b;
      for (Eigen::Index j = 0; j < b; ++j) {
        if (j == i) continue;
        neg = j;
        u -= w[static_cast<std::size_t>(j)];
        if (u < 0.0) break;
      }
      const std::size_t si = static_cast<std::size_t>(i);
      logits.push_back(model::itm_head(bind, model::fusion_stack(bind, txt[si].tokens, vis[si].patches)));
      labels.push_back(1.0);
      logits.push_back(
          model::itm_head(bind, model::fusion_stack(bind, txt[static_cast<std::size_t>(neg)].tokens, vis[si].patches)));
      labels.push_back(0.0);
    }
    Var l_itm = ad::bce_with_logits(g, ad::concat_rows(g, logits), labels);

    std::vector<Var> mlm_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (masked_positions[i].empty()) continue;
      std::vector<int> masked = batch[i]->text.ids;
      std::vector<int> targets;
      for (int p : masked_positions[i]) {
        targets.push_back(masked[static_cast<std::size_t>(p)]);
        masked[static_cast<std::size_t>(p)] = cfg_.model.mask_token_id;
      }
      model::TextNodes mt = model::text_tower(bind, masked);
      Var states = model::fusion_stack(bind, mt.tokens, vis[i].patches);
      Var rows = ad::gather_rows(g, model::mlm_head(bind, states), masked_positions[i]);
      mlm_terms.push_back(ad::cross_entropy_rows(g, rows, targets));
    }
    Var l_mlm = mlm_terms.empty()
                    ? g.constant(Matrix::Zero(1, 1), "mlm_none")
                    : ad::weighted_sum(g, mlm_terms, std::vector<double>(mlm_terms.size(), 1.0 / mlm_terms.size()));
    losses.itc = g.scalar(l_itc);
    losses.itm = g.scalar(l_itm);
    losses.mlm = g.scalar(l_mlm);
    return objectives::total_loss(g, l_itc, l_itm, l_mlm, cfg_.weights);
  };

  const model::Gradients grads = model::gradient_of(builder, params_, &losses.total);
  if (!std::isfinite(losses.total)) {
    throw NumericError("non-finite training loss at step " + std::to_string(step_));
  }
  const double lr = schedule_.at(step_);
  opt_.step(params_, grads, lr);
  params_.set_version(params_.version() + 1);
  if (!params_.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(step_));

  for (Eigen::Index i = 0; i < b; ++i) {
    queue_.push(image_globals.row(i).transpose(), objectives::Modality::image, ids[static_cast<std::size_t>(i)]);
    queue_.push(text_globals.row(i).transpose(), objectives::Modality::text, ids[static_cast<std::size_t>(i)]);
  }
  metrics_.push_back({step_, lr, losses});
  ++step_;
  return losses;
}

void Trainer::run_epoch(const std::vector<Example>& examples) {
  if (examples.size() < static_cast<std::size_t>(cfg_.batch_size)) throw ConfigError("corpus smaller than batch_size");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(cfg_.seed, 0x45504f4300000000ULL + static_cast<std::uint64_t>(epoch_)));
  rng.shuffle(order);
  const std::size_t bsz = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t start = 0; start + bsz <= order.size(); start += bsz) {
    std::vector<const Example*> batch;
    for (std::size_t k = start; k < start + bsz; ++k) batch.push_back(&examples[order[k]]);
    step(batch);
  }
  ++epoch_;
}

PairScore score_pair(const model::ParamSet& params, const model::VisualEmbedding& visual, std::span<const int> ids,
                     const objectives::QueueSnapshot& queue, double temperature, std::int64_t pair_id) {
  const model::TextEmbedding text = model::encode_text(params, ids);
  PairScore s;
  const std::int64_t pid[] = {pair_id};
  s.itc = objectives::itc_loss(visual.global.transpose(), text.global.transpose(), queue, {temperature}, pid);
  s.match = model::itm_probability(params, model::fuse(params, visual, text));
  return s;
}

std::uint64_t init_seed(const RunConfig& cfg) { return mix_seed(cfg.seed, 0x494e495400000000ULL); }

void write_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write config " + path.string());
  for (const auto& [k, v] : cfg.to_map()) f << k << '=' << v << '\n';
}

TrainOutputs run_training(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                          const RunConfig& config) {
  RunConfig cfg = config;
  cfg.validate();
  const std::vector<CorpusRecord> records = read_corpus(corpus_dir / "corpus.jsonl");
  if (records.empty()) throw ConfigError("corpus is empty");
  std::filesystem::create_directories(out_dir);
  TrainOutputs out{model::ParamSet{}, build_vocabulary(records, cfg.model.vocab_size), {}};
  const std::vector<Example> examples = make_examples(records, out.vocab, corpus_dir, cfg);
  out.vocab.save(out_dir / "vocab.txt");
  write_config(cfg, out_dir / "config.txt");

  Trainer trainer(cfg, model::init_params(cfg.model, init_seed(cfg)), examples.size());
  model::save_checkpoint(trainer.params(), out_dir / "model.sklp");
  try {
    for (int e = 0; e < cfg.epochs; ++e) {
      trainer.run_epoch(examples);
      model::save_checkpoint(trainer.params(), out_dir / "model.sklp");
    }
  } catch (...) {
    write_metrics_csv(out_dir / "metrics.csv", trainer.metrics());
    throw;
  }
  write_metrics_csv(out_dir / "metrics.csv", trainer.metrics());
  out.params = trainer.params();
  out.metrics = trainer.metrics();
  return out;
}

}  // namespace sklp::train
