// spanmatch: sample / train / eval / decode / check / synth / experiment.
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spanmatch/checks.hpp"
#include "spanmatch/experiment.hpp"
#include "spanmatch/model_file.hpp"
#include "spanmatch/trainer.hpp"

using namespace spanmatch;
using nlohmann::json;

namespace {

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SPANMATCH_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UserError(std::string("SPANMATCH_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return 0;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UserError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot open '" + path + "' for writing");
  return out;
}

std::vector<Episode> read_episode_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open episode file '" + path + "'");
  return read_episodes(in);
}

// Embeddings come from a file, or from the synthetic embedder over the given sentences.
struct EmbeddingFlags {
  std::string embeddings;
  bool synthetic = false;
  std::string synth_config;

  void add_to(CLI::App* app) {
    app->add_option("--embeddings", embeddings, "token-embedding JSONL file");
    app->add_flag("--synthetic", synthetic, "embed with the deterministic synthetic embedder");
    app->add_option("--synth-config", synth_config, "JSON file with synthetic embedder settings");
  }

  EmbeddingStore load(const std::vector<Sentence>& sentences, std::optional<SynthConfig> fallback) const {
    if (synthetic == !embeddings.empty()) throw UserError("pass exactly one of --embeddings or --synthetic");
    if (!synthetic) return load_embeddings(embeddings);
    SynthConfig sc = fallback.value_or(SynthConfig{});
    if (!synth_config.empty()) sc = read_json_file(synth_config).get<SynthConfig>();
    return synth_store(sentences, sc);
  }
};

struct DecoderFlags {
  std::string post = "bsnms";
  std::string preset;
  std::optional<double> k, delta, u;
  std::optional<int> beam_size;
  std::string path_score;

  void add_to(CLI::App* app) {
    app->add_option("--post", post, "bsnms | softnms | beam | none");
    app->add_option("--preset", preset, "flat | nested");
    app->add_option("--k", k, "IoU threshold for decay");
    app->add_option("--delta", delta, "filter threshold");
    app->add_option("--u", u, "decay ratio");
    app->add_option("--beam-size", beam_size, "beam size");
    app->add_option("--path-score", path_score, "sum | product | mean");
  }

  DecoderConfig config() const {
    DecoderConfig c;
    if (preset == "nested") c = DecoderConfig::nested();
    else if (!preset.empty() && preset != "flat") throw UserError("unknown preset '" + preset + "'");
    c.mode = parse_decode_mode(post);
    if (k) c.iou_threshold = *k;
    if (delta) c.delta = *delta;
    if (u) c.decay = *u;
    if (beam_size) c.beam_size = *beam_size;
    if (!path_score.empty()) c.path_score = parse_path_score(path_score);
    c.validate();
    return c;
  }
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int run_checks(bool gradients, bool oracle, std::size_t instances, std::uint64_t seed) {
  bool ok = true;
  std::size_t grad_total = 0, grad_failed = 0;
  double worst = 0.0;
  if (gradients) {
    for (const auto& c : checks::gradient_checks(seed)) {
      ++grad_total;
      worst = std::max(worst, c.max_rel_error);
      if (!c.passed()) ++grad_failed;
      std::printf("gradient %-26s max_rel_error %.3e over %zu entries %s\n", c.name.c_str(), c.max_rel_error,
                  c.compared, c.passed() ? "ok" : "FAIL");
    }
    ok = ok && grad_failed == 0;
  }
  checks::OracleReport rep;
  if (oracle) {
    rep = checks::decoder_oracle_check(instances, seed);
    for (const auto& m : rep.mismatches) std::printf("decoder-oracle mismatch: %s\n", m.c_str());
    ok = ok && rep.passed();
  }
  std::string summary = ok ? "check: PASS" : "check: FAIL";
  if (gradients) {
    char buf[128];
    std::snprintf(buf, sizeof buf, " | gradients %zu/%zu ok (max rel error %.3e)", grad_total - grad_failed, grad_total,
                  worst);
    summary += buf;
  }
  if (oracle) {
    summary += " | decoder-oracle " + std::to_string(rep.matches) + "/" + std::to_string(rep.instances) + " match";
  }
  std::puts(summary.c_str());
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot span labeling: episodic prototype matching with Beam Soft-NMS decoding"};
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = available cores; 1 = sequential)");

  // sample
  auto* sample = app.add_subcommand("sample", "sample N-way K-shot episodes");
  std::string s_data, s_out, s_prefix = "s", s_shot = "k2k";
  int s_n = 5, s_k = 1, s_q = 1;
  std::size_t s_count = 100;
  std::optional<std::uint64_t> s_seed;
  sample->add_option("--data", s_data, "BIO or episode JSONL corpus")->required();
  sample->add_option("--id-prefix", s_prefix, "sentence id prefix for BIO input");
  sample->add_option("--n", s_n, "classes per episode");
  sample->add_option("--k", s_k, "shots per class");
  sample->add_option("--shot-mode", s_shot, "exact | k2k");
  sample->add_option("--episodes", s_count, "number of episodes");
  sample->add_option("--query-count", s_q, "query sentences per episode");
  sample->add_option("--seed", s_seed, "base seed (episode i uses seed + i)");
  sample->add_option("--out", s_out, "output episode JSONL")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic BIO corpus and its embeddings");
  SynthCorpusSpec y_spec;
  y_spec.id_prefix = "s";
  SynthConfig y_embed;
  int y_classes = 5;
  std::string y_class_prefix = "C", y_bio, y_emb, y_config;
  synth->add_option("--classes", y_classes, "number of classes");
  synth->add_option("--class-prefix", y_class_prefix, "class name prefix");
  synth->add_option("--sentences", y_spec.sentences, "sentence count");
  synth->add_option("--corpus-seed", y_spec.seed, "corpus generator seed");
  synth->add_option("--id-prefix", y_spec.id_prefix, "sentence id prefix (matches the BIO readers by default)");
  synth->add_option("--synth-config", y_config, "JSON file with synthetic embedder settings");
  synth->add_option("--out-bio", y_bio, "BIO output")->required();
  synth->add_option("--out-embeddings", y_emb, "embedding JSONL output");

  // train
  auto* trn = app.add_subcommand("train", "episodic training");
  std::string t_episodes, t_data, t_config, t_model, t_loss, t_val, t_prefix = "s";
  std::optional<std::size_t> t_steps;
  std::optional<std::uint64_t> t_seed;
  EmbeddingFlags t_emb;
  DecoderFlags t_dec;
  trn->add_option("--episodes", t_episodes, "training episode JSONL (cycled)");
  trn->add_option("--data", t_data, "corpus to sample training episodes from");
  trn->add_option("--id-prefix", t_prefix, "sentence id prefix for BIO input");
  trn->add_option("--config", t_config, "JSON config with model / train / episode / synthetic sections");
  trn->add_option("--steps", t_steps, "number of training episodes (overrides config)");
  trn->add_option("--seed", t_seed, "training seed (overrides config)");
  trn->add_option("--validation", t_val, "validation episode JSONL for best-F1 checkpointing");
  trn->add_option("--loss-log", t_loss, "write the loss curve, one value per line");
  trn->add_option("--out-model", t_model, "model file to write")->required();
  t_emb.add_to(trn);
  t_dec.add_to(trn);

  // eval
  auto* evl = app.add_subcommand("eval", "evaluate a model on episodes");
  std::string e_model, e_episodes, e_style = "fewnerd", e_report;
  std::size_t e_batch = 1;
  bool e_no_timing = false;
  EmbeddingFlags e_emb;
  DecoderFlags e_dec;
  evl->add_option("--model", e_model, "model file")->required();
  evl->add_option("--episodes", e_episodes, "episode JSONL")->required();
  evl->add_option("--style", e_style, "fewnerd | snips");
  evl->add_option("--snips-batch", e_batch, "episodes per F1 batch in snips style");
  evl->add_option("--report", e_report, "report JSON output");
  evl->add_flag("--no-timing", e_no_timing, "omit wall-clock timing (byte-stable reports)");
  e_emb.add_to(evl);
  e_dec.add_to(evl);

  // decode
  auto* dec = app.add_subcommand("decode", "resolve conflicts in scored-span records");
  std::string d_in, d_out;
  DecoderFlags d_dec;
  dec->add_option("--input", d_in, "JSONL of {\"spans\": [...], \"config\": {...}} records")->required();
  dec->add_option("--out", d_out, "JSONL output (default stdout)");
  d_dec.add_to(dec);

  // check
  auto* chk = app.add_subcommand("check", "gradient and decoder self-checks");
  bool c_grad = false, c_oracle = false, c_all = false;
  std::size_t c_instances = 500;
  std::optional<std::uint64_t> c_seed;
  chk->add_flag("--gradients", c_grad, "finite-difference gradient checks");
  chk->add_flag("--decoder-oracle", c_oracle, "bsnms versus exhaustive search");
  chk->add_flag("--all", c_all, "both suites");
  chk->add_option("--instances", c_instances, "decoder-oracle instances");
  chk->add_option("--seed", c_seed, "seed");

  // experiment
  auto* exp = app.add_subcommand("experiment", "run a manifest of cells x seeds x noise ratios");
  std::string x_manifest, x_out, x_table;
  exp->add_option("--manifest", x_manifest, "manifest JSON")->required();
  exp->add_option("--out", x_out, "result JSON");
  exp->add_option("--table", x_table, "plain-text table output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sample) {
      EpisodeSpec spec;
      spec.n_way = s_n;
      spec.k_shot = s_k;
      spec.shot_mode = parse_shot_mode(s_shot);
      spec.query_count = s_q;
      spec.validate();
      const auto corpus = read_corpus(s_data, s_prefix);
      const auto eps = sample_eval_episodes(corpus, spec, s_count, resolve_seed(s_seed));
      auto out = open_out(s_out);
      write_episodes(out, eps);
      std::printf("wrote %zu episodes to %s\n", eps.size(), s_out.c_str());
      return 0;
    }

    if (*synth) {
      if (!y_config.empty()) y_embed = read_json_file(y_config).get<SynthConfig>();
      y_spec.classes = class_names(y_class_prefix, 0, y_classes);
      const auto corpus = synthetic_corpus(y_spec);
      auto bio = open_out(y_bio);
      write_bio(bio, corpus);
      if (!y_emb.empty()) {
        auto emb = open_out(y_emb);
        for (const auto& s : corpus) write_embedding_record(emb, s, synth_embed(s, y_embed));
      }
      std::printf("wrote %zu sentences\n", corpus.size());
      return 0;
    }

    if (*trn) {
      json cfg = t_config.empty() ? json::object() : read_json_file(t_config);
      ModelConfig mc = cfg.value("model", json::object()).get<ModelConfig>();
      const bool dw_given = cfg.contains("model") && cfg["model"].contains("d_w");
      TrainConfig tc = cfg.value("train", json::object()).get<TrainConfig>();
      EpisodeSpec es = cfg.value("episode", json::object()).get<EpisodeSpec>();
      std::optional<SynthConfig> sc;
      if (cfg.contains("synthetic")) sc = cfg["synthetic"].get<SynthConfig>();
      if (t_emb.synthetic && !t_emb.synth_config.empty()) sc = read_json_file(t_emb.synth_config).get<SynthConfig>();
      if (t_emb.synthetic && !sc) {
        sc = SynthConfig{};
        sc->d_w = mc.d_w;
      }
      if (t_steps) tc.episodes = *t_steps;
      if (t_seed || std::getenv("SPANMATCH_SEED")) tc.seed = resolve_seed(t_seed);
      if (t_episodes.empty() == t_data.empty()) throw UserError("pass exactly one of --episodes or --data");

      std::vector<Sentence> sentences;
      EpisodeSource source;
      if (!t_episodes.empty()) {
        auto eps = read_episode_file(t_episodes);
        sentences = episode_sentences(eps);
        source = cycle_episodes(std::move(eps));
      } else {
        sentences = read_corpus(t_data, t_prefix);
        source = sample_episodes(sentences, es);
      }
      std::optional<Validation> validation;
      if (!t_val.empty()) {
        Validation v;
        v.episodes = read_episode_file(t_val);
        v.decoder = t_dec.config();
        v.options.threads = threads;
        v.options.timing = false;
        const auto extra = episode_sentences(v.episodes);
        sentences.insert(sentences.end(), extra.begin(), extra.end());
        validation = std::move(v);
        if (tc.eval_every == 0) tc.eval_every = std::max<std::size_t>(1, tc.episodes / 10);
      }
      EmbeddingFlags flags = t_emb;
      flags.synth_config.clear();
      const EmbeddingStore store = flags.load(sentences, sc);
      if (!dw_given && store.dim() > 0) mc.d_w = store.dim();
      if (store.dim() != mc.d_w) {
        throw UserError("embedding width " + std::to_string(store.dim()) + " does not match model d_w " +
                        std::to_string(mc.d_w));
      }

      std::ofstream loss_out;
      if (!t_loss.empty()) loss_out = open_out(t_loss);
      const TrainResult res = train(source, store, mc, tc, validation, std::nullopt, [&](std::size_t, double loss) {
        if (loss_out.is_open()) loss_out << format_double(loss) << '\n';
      });

      ModelFile mf{mc, res.params, json::object()};
      mf.meta["train"] = tc;
      if (sc) mf.meta["synthetic"] = *sc;
      save_model(t_model, mf);
      double tail = 0.0;
      const std::size_t n = std::min<std::size_t>(50, res.losses.size());
      for (std::size_t i = res.losses.size() - n; i < res.losses.size(); ++i) tail += res.losses[i];
      std::printf("trained %zu episodes; mean loss over the last %zu: %.6f", res.losses.size(), n,
                  n ? tail / static_cast<double>(n) : 0.0);
      if (res.best_val_f1) std::printf("; best validation F1 %.4f at step %zu", *res.best_val_f1, res.best_step);
      std::printf("\n");
      return 0;
    }

    if (*evl) {
      const ModelFile mf = load_model(e_model);
      const auto eps = read_episode_file(e_episodes);
      std::optional<SynthConfig> sc;
      if (mf.meta.contains("synthetic")) sc = mf.meta["synthetic"].get<SynthConfig>();
      const EmbeddingStore store = e_emb.load(episode_sentences(eps), sc);
      if (!eps.empty() && store.dim() != mf.config.d_w) {
        throw UserError("embedding width " + std::to_string(store.dim()) + " does not match model d_w " +
                        std::to_string(mf.config.d_w));
      }
      EvalOptions opts;
      opts.style = parse_eval_style(e_style);
      opts.snips_batch = e_batch;
      opts.threads = threads;
      opts.timing = !e_no_timing;
      const EvalReport rep = evaluate(eps, mf.params, mf.config, store, e_dec.config(), opts);
      const std::string doc = report_to_json(rep).dump(2) + "\n";
      if (!e_report.empty()) {
        auto out = open_out(e_report);
        out << doc;
      }
      std::printf("%s %s  P %.4f  R %.4f  F1 %.4f  (tp %zu fp %zu fn %zu; fp-span %zu fp-type %zu)\n",
                  rep.style.c_str(), rep.decode.c_str(), rep.precision, rep.recall, rep.f1, rep.counts.tp,
                  rep.counts.fp, rep.counts.fn, rep.fp_span, rep.fp_type);
      return 0;
    }

    if (*dec) {
      std::ifstream in(d_in);
      if (!in) throw UserError("cannot open '" + d_in + "'");
      std::ofstream file;
      if (!d_out.empty()) file = open_out(d_out);
      std::ostream& out = d_out.empty() ? std::cout : file;
      const DecoderConfig defaults = d_dec.config();
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          out << decode_record(json::parse(line), defaults).dump() << '\n';
        } catch (const json::exception& e) {
          throw UserError("line " + std::to_string(lineno) + ": " + e.what());
        }
      }
      return 0;
    }

    if (*chk) {
      if (c_all) c_grad = c_oracle = true;
      if (!c_grad && !c_oracle) throw UserError("pass --gradients, --decoder-oracle or --all");
      return run_checks(c_grad, c_oracle, c_instances, resolve_seed(c_seed));
    }

    if (*exp) {
      Manifest m = manifest_from_json(read_json_file(x_manifest));
      if (app.get_option("--threads")->count() > 0) m.eval.threads = threads;
      const auto res = run_experiment(m, [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); });
      const std::string table = result_table(res);
      std::fputs(table.c_str(), stdout);
      if (!x_out.empty()) {
        auto out = open_out(x_out);
        out << result_to_json(res).dump(2) << '\n';
      }
      if (!x_table.empty()) {
        auto out = open_out(x_table);
        out << table;
      }
      return 0;
    }
  } catch (const UserError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: malformed input: %s\n", e.what());
    return 1;
  } catch (const InvariantError& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
