#include "sklp/checkpoint.hpp"
#include "sklp/errors.hpp"
#include "sklp/ingest.hpp"
#include "sklp/retrieval.hpp"
#include "sklp/scio.hpp"
#include "sklp/stats.hpp"
#include "sklp/synth.hpp"
#include "sklp/train.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using namespace sklp;

namespace {

struct RunArgs {
  std::string config_file;
  std::vector<std::string> sets;
  int epochs = -1;
  long long seed = -1;
  unsigned threads = 0;
};

void add_run_args(CLI::App* app, RunArgs& a) {
  app->add_option("--config", a.config_file, "key=value configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", a.sets, "override one setting, key=value (repeatable)");
  app->add_option("--epochs", a.epochs, "number of epochs");
  app->add_option("--seed", a.seed, "run seed (default: SKLP_SEED or 0)");
  app->add_option("--threads", a.threads, "worker threads");
}

train::RunConfig build_config(const RunArgs& a) {
  train::RunConfig cfg;
  cfg.seed = train::seed_from_env(cfg.seed);
  if (!a.config_file.empty()) train::apply_config_file(cfg, a.config_file);
  for (const std::string& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.threads > 0) cfg.threads = a.threads;
  cfg.validate();
  return cfg;
}

fs::path default_templates() { return fs::path(SKLP_DATA_DIR) / "hcot_templates"; }

int cmd_synth(int n, double noise, long long seed, int side, const fs::path& templates, const fs::path& out,
              unsigned threads) {
  synth::SynthOptions o;
  o.out_dir = out;
  o.n = n;
  o.noise_rate = noise;
  o.seed = seed >= 0 ? static_cast<std::uint64_t>(seed) : train::seed_from_env(0);
  o.side = side;
  o.templates = templates;
  o.threads = threads;
  const auto records = synth::write_synthetic_corpus(o);
  std::size_t planted = 0;
  for (const auto& r : records) planted += r.planted ? r.planted->size() : 0;
  std::printf("wrote %zu pairs (%zu planted segments) to %s\n", records.size(), planted, out.string().c_str());
  return 0;
}

int cmd_eval(const fs::path& run, const fs::path& corpus_dir, const fs::path& out, unsigned threads) {
  const fs::path ckpt = run / "model.sklp";
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  const model::ParamSet params = model::load_checkpoint(ckpt);
  const model::Vocabulary vocab = model::Vocabulary::load(run / "vocab.txt");
  const auto records = read_corpus(corpus_dir / "corpus.jsonl");
  std::vector<ad::Matrix> images;
  std::vector<std::vector<int>> texts;
  for (const auto& r : records) {
    images.push_back(load_image(corpus_dir / r.image_path));
    texts.push_back(encode_segments(vocab, r.segments).ids);
  }
  const auto res = retrieval::eval_retrieval(params, images, texts, threads ? threads : 1);
  std::printf("%s\n", res.to_string().c_str());
  if (!out.empty()) {
    const nlohmann::json j{{"txt_r1", res.txt_r1}, {"txt_r5", res.txt_r5}, {"txt_r10", res.txt_r10},
                           {"img_r1", res.img_r1}, {"img_r5", res.img_r5}, {"img_r10", res.img_r10},
                           {"mean_r", res.mean_r},  {"pairs", records.size()}};
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IoError("cannot write " + out.string());
    f << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_stats(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string body = ss.str();
  const auto first = body.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && body[first] == '{') {
    const auto s = stats::corpus_stats(read_corpus(path));
    std::printf("records %zu\ntokens %zu\nmean_tokens %.4f\nmtld %.4f\n", s.records, s.tokens, s.mean_tokens, s.mtld);
  } else {
    const auto tokens = model::tokenize(body);
    std::printf("tokens %zu\nmtld %.4f\n", tokens.size(), stats::mtld(tokens));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sklp: remote-sensing vision-language pretraining toolkit"};
  app.require_subcommand(1);

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic corpus with planted noise");
  int n = 64, side = 64;
  double noise = 0.0;
  long long synth_seed = -1;
  unsigned synth_threads = 1;
  fs::path synth_out, templates = default_templates();
  synth_cmd->add_option("--n", n, "number of pairs");
  synth_cmd->add_option("--noise", noise, "per-segment contradiction rate");
  synth_cmd->add_option("--seed", synth_seed, "corpus seed (default: SKLP_SEED or 0)");
  synth_cmd->add_option("--side", side, "image side in pixels");
  synth_cmd->add_option("--templates", templates, "prompt layer directory");
  synth_cmd->add_option("--threads", synth_threads, "worker threads");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  auto* ingest_cmd = app.add_subcommand("ingest", "tile, georeference and filter one scene");
  ingest::IngestOptions io;
  ingest_cmd->add_option("--scene", io.scene, "raw f32 payload")->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--sidecar", io.sidecar, "JSON sidecar")->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--out", io.out_dir, "output directory")->required();
  ingest_cmd->add_option("--extent-m", io.extent_m, "tile ground extent in meters");
  ingest_cmd->add_option("--p-low", io.p_low, "lower clip percentile");
  ingest_cmd->add_option("--p-high", io.p_high, "upper clip percentile");
  ingest_cmd->add_option("--levels", io.levels, "GLCM grey levels");
  ingest_cmd->add_option("--patch-size", io.patch_size, "window multiple");
  ingest_cmd->add_option("--k", io.filter.k, "KNN neighbours");
  ingest_cmd->add_option("--entropy-floor", io.filter.entropy_floor, "minimum GLCM entropy");
  ingest_cmd->add_option("--outlier-percentile", io.filter.outlier_percentile, "KNN score cut");
  ingest_cmd->add_option("--threads", io.threads, "worker threads");

  auto* train_cmd = app.add_subcommand("train", "pretrain on a corpus");
  RunArgs train_args;
  fs::path train_corpus, train_out;
  train_cmd->add_option("--corpus", train_corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "run directory")->required();
  add_run_args(train_cmd, train_args);

  auto* scio_cmd = app.add_subcommand("scio", "staged training with segment screening and reconstruction");
  RunArgs scio_args;
  fs::path scio_corpus, scio_out, scio_init;
  scio_cmd->add_option("--corpus", scio_corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  scio_cmd->add_option("--out", scio_out, "run directory")->required();
  scio_cmd->add_option("--init", scio_init, "run directory to start from")->check(CLI::ExistingDirectory);
  add_run_args(scio_cmd, scio_args);

  auto* eval_cmd = app.add_subcommand("eval", "retrieval recall of a trained run");
  fs::path eval_run, eval_corpus, eval_out;
  unsigned eval_threads = 1;
  eval_cmd->add_option("--run", eval_run, "run directory with model.sklp and vocab.txt")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "corpus directory")->required();
  eval_cmd->add_option("--out", eval_out, "write the result as JSON");
  eval_cmd->add_option("--threads", eval_threads, "worker threads");

  auto* stats_cmd = app.add_subcommand("stats", "token counts and MTLD of a corpus or text file");
  fs::path stats_path;
  stats_cmd->add_option("path", stats_path, "corpus.jsonl or plain text")->required();

  auto* audit_cmd = app.add_subcommand("audit", "re-check the drop and accept records of a scio run");
  fs::path audit_run, audit_corpus;
  unsigned audit_threads = 1;
  audit_cmd->add_option("--run", audit_run, "scio run directory")->required()->check(CLI::ExistingDirectory);
  audit_cmd->add_option("--corpus", audit_corpus, "the run's input corpus")->required()->check(CLI::ExistingDirectory);
  audit_cmd->add_option("--threads", audit_threads, "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth_cmd) return cmd_synth(n, noise, synth_seed, side, templates, synth_out, synth_threads);
    if (*ingest_cmd) {
      const auto s = ingest::run_ingest(io);
      std::printf("window %d px, tiles %zu, kept %zu%s\n", s.window_px, s.tiles, s.kept, s.knn_stage_skipped ? " (knn stage skipped)" : "");
      return 0;
    }
    if (*train_cmd) {
      const auto r = train::run_training(train_corpus, train_out, build_config(train_args));
      if (!r.metrics.empty()) std::printf("%s\n", train::format_metrics_row(r.metrics.back()).c_str());
      return 0;
    }
    if (*scio_cmd) {
      scio::ScioOptions o{scio_corpus, scio_out, build_config(scio_args)};
      if (!scio_init.empty()) o.init_dir = scio_init;
      const auto r = scio::run_scio(o);
      std::size_t accepted = 0;
      for (const auto& d : r.decisions) accepted += d.action == scio::Action::reconstruct_accepted;
      std::printf("flagged %zu segments, accepted %zu reconstructions\n", r.pool.size(), accepted);
      return 0;
    }
    if (*eval_cmd) return cmd_eval(eval_run, eval_corpus, eval_out, eval_threads);
    if (*stats_cmd) return cmd_stats(stats_path);
    if (*audit_cmd) {
      const auto a = scio::audit_report(audit_run, audit_corpus, audit_threads);
      for (const auto& v : a.violations) std::printf("violation: %s\n", v.c_str());
      std::printf("checked %zu violations %zu\n", a.checked, a.violations.size());
      return a.violations.empty() ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
