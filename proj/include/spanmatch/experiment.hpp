#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/corpus.hpp"
#include "spanmatch/decoder.hpp"
#include "spanmatch/episodes.hpp"
#include "spanmatch/trainer.hpp"

namespace spanmatch {

// A BIO file, or an episode JSONL file (every sentence it mentions).
inline std::vector<Sentence> read_corpus(const std::string& path, const std::string& id_prefix = "s") {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open corpus '" + path + "'");
  char c = 0;
  while (in.get(c) && std::isspace(static_cast<unsigned char>(c))) {
  }
  in.clear();
  in.seekg(0);
  if (c == '{') return episode_sentences(read_episodes(in));
  return parse_bio(in, id_prefix);
}

// Disjoint train and test class sets over the synthetic embedder.
struct SyntheticBenchmark {
  SynthConfig embed;
  int train_classes = 10;
  int test_classes = 5;
  std::size_t train_sentences = 800;
  std::size_t test_sentences = 400;
  std::uint64_t corpus_seed = 1;
};

inline void to_json(nlohmann::json& j, const SyntheticBenchmark& b) {
  j = nlohmann::json{{"embed", b.embed},
                     {"train_classes", b.train_classes},
                     {"test_classes", b.test_classes},
                     {"train_sentences", b.train_sentences},
                     {"test_sentences", b.test_sentences},
                     {"corpus_seed", b.corpus_seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticBenchmark& b) {
  if (j.contains("embed")) b.embed = j["embed"].get<SynthConfig>();
  b.train_classes = j.value("train_classes", b.train_classes);
  b.test_classes = j.value("test_classes", b.test_classes);
  b.train_sentences = j.value("train_sentences", b.train_sentences);
  b.test_sentences = j.value("test_sentences", b.test_sentences);
  b.corpus_seed = j.value("corpus_seed", b.corpus_seed);
}

struct BenchmarkData {
  std::vector<Sentence> train;
  std::vector<Sentence> test;
  EmbeddingStore store;
};

inline BenchmarkData build_benchmark(const SyntheticBenchmark& b) {
  SynthCorpusSpec tr;
  tr.classes = class_names("TR", 0, b.train_classes);
  tr.sentences = b.train_sentences;
  tr.seed = b.corpus_seed;
  tr.id_prefix = "tr";
  SynthCorpusSpec te = tr;
  te.classes = class_names("TE", 0, b.test_classes);
  te.sentences = b.test_sentences;
  te.seed = b.corpus_seed + 1;
  te.id_prefix = "te";
  BenchmarkData d;
  d.train = synthetic_corpus(tr);
  d.test = synthetic_corpus(te);
  std::vector<Sentence> all = d.train;
  all.insert(all.end(), d.test.begin(), d.test.end());
  d.store = synth_store(all, b.embed);
  return d;
}

// Fixed held-out episodes: seeds base, base + 1, ...
inline std::vector<Episode> sample_eval_episodes(const std::vector<Sentence>& corpus, EpisodeSpec spec,
                                                 std::size_t count, std::uint64_t base_seed) {
  std::vector<Episode> out;
  for (std::size_t i = 0; i < count; ++i) {
    spec.seed = base_seed + i;
    out.push_back(sample_episode(corpus, spec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest-driven experiments

struct ExperimentCell {
  std::string name;
  nlohmann::json model = nlohmann::json::object();    // ModelConfig overrides
  nlohmann::json train = nlohmann::json::object();    // TrainConfig overrides
  nlohmann::json decoder = nlohmann::json::object();  // DecoderConfig overrides
};

struct Manifest {
  std::string name = "experiment";
  std::optional<SyntheticBenchmark> synthetic;
  std::string train_path, test_path, embeddings_path;
  ModelConfig model;
  TrainConfig train;
  DecoderConfig decoder;
  EpisodeSpec episode;
  std::size_t eval_episodes = 100;
  std::uint64_t eval_seed = 1000000;
  EvalOptions eval;
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> noise{0.0};
  std::vector<ExperimentCell> cells;
};

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.name = j.value("name", m.name);
    if (j.contains("synthetic")) m.synthetic = j["synthetic"].get<SyntheticBenchmark>();
    if (j.contains("data")) {
      const auto& d = j["data"];
      m.train_path = d.at("train").get<std::string>();
      m.test_path = d.at("test").get<std::string>();
      m.embeddings_path = d.at("embeddings").get<std::string>();
    }
    if (!m.synthetic && m.train_path.empty()) throw UserError("manifest needs either \"synthetic\" or \"data\"");
    if (j.contains("model")) m.model = j["model"].get<ModelConfig>();
    if (m.synthetic && !(j.contains("model") && j["model"].contains("d_w"))) m.model.d_w = m.synthetic->embed.d_w;
    if (j.contains("train")) m.train = j["train"].get<TrainConfig>();
    if (j.contains("decoder")) from_json(j["decoder"], m.decoder);
    if (j.contains("episode")) m.episode = j["episode"].get<EpisodeSpec>();
    m.eval_episodes = j.value("eval_episodes", m.eval_episodes);
    m.eval_seed = j.value("eval_seed", m.eval_seed);
    if (j.contains("style")) m.eval.style = parse_eval_style(j["style"].get<std::string>());
    m.eval.snips_batch = j.value("snips_batch", m.eval.snips_batch);
    m.eval.threads = j.value("threads", m.eval.threads);
    m.eval.timing = j.value("timing", false);
    if (j.contains("seeds")) m.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("noise")) m.noise = j["noise"].get<std::vector<double>>();
    for (const auto& c : j.value("cells", nlohmann::json::array())) {
      ExperimentCell cell;
      cell.name = c.at("name").get<std::string>();
      cell.model = c.value("model", nlohmann::json::object());
      cell.train = c.value("train", nlohmann::json::object());
      cell.decoder = c.value("decoder", nlohmann::json::object());
      m.cells.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    throw UserError(std::string("malformed manifest: ") + e.what());
  }
  if (m.cells.empty()) {
    ExperimentCell cell;
    cell.name = "default";
    m.cells.push_back(std::move(cell));
  }
  if (m.seeds.empty()) throw UserError("manifest lists no seeds");
  for (double r : m.noise)
    if (r < 0.0 || r > 1.0) throw UserError("noise ratios must lie in [0, 1]");
  return m;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  for (double x : xs) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(xs.size()));
  return s;
}

struct CellResult {
  std::string cell;
  double noise = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> reports;  // aligned with seeds
  std::vector<std::pair<std::uint64_t, std::string>> failures;
  Summary precision, recall, f1;
};

struct ExperimentResult {
  std::string name;
  std::vector<CellResult> cells;
};

inline nlohmann::json result_to_json(const ExperimentResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < c.reports.size(); ++i) {
      nlohmann::json run = report_to_json(c.reports[i]);
      run["seed"] = c.seeds[i];
      runs.push_back(std::move(run));
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& [seed, msg] : c.failures) failures.push_back({{"seed", seed}, {"error", msg}});
    cells.push_back({{"cell", c.cell},
                     {"noise", c.noise},
                     {"precision", {{"mean", c.precision.mean}, {"std", c.precision.std}}},
                     {"recall", {{"mean", c.recall.mean}, {"std", c.recall.std}}},
                     {"f1", {{"mean", c.f1.mean}, {"std", c.f1.std}}},
                     {"runs", runs},
                     {"failures", failures}});
  }
  return {{"name", r.name}, {"cells", cells}};
}

inline std::string result_table(const ExperimentResult& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(24) << "cell" << std::setw(8) << "noise" << std::setw(16) << "P" << std::setw(16)
     << "R" << std::setw(16) << "F1"
     << "runs\n";
  auto pm = [](const Summary& s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(2) << 100.0 * s.mean << " +- " << 100.0 * s.std;
    return o.str();
  };
  for (const auto& c : r.cells) {
    os << std::setw(24) << c.cell << std::setw(8) << c.noise << std::setw(16) << pm(c.precision) << std::setw(16)
       << pm(c.recall) << std::setw(16) << pm(c.f1) << c.reports.size();
    if (!c.failures.empty()) os << " (" << c.failures.size() << " failed)";
    os << '\n';
  }
  return os.str();
}

template <typename T>
T with_overrides(const T& base, const nlohmann::json& overrides) {
  nlohmann::json j = base;
  if (!overrides.is_null()) j.merge_patch(overrides);
  return j.get<T>();
}

/// Runs every cell x seed (training once per distinct model/train setting and
/// seed), evaluates each noise ratio on the same held-out episodes, and
/// aggregates over seeds. A failing run is recorded and skipped.
inline ExperimentResult run_experiment(const Manifest& m,
                                       const std::function<void(const std::string&)>& log = nullptr) {
  BenchmarkData data;
  if (m.synthetic) {
    data = build_benchmark(*m.synthetic);
  } else {
    data.train = read_corpus(m.train_path, "train-");
    data.test = read_corpus(m.test_path, "test-");
    data.store = load_embeddings(m.embeddings_path);
  }
  EpisodeSpec eval_spec = m.episode;
  const auto eval_eps = sample_eval_episodes(data.test, eval_spec, m.eval_episodes, m.eval_seed);

  ExperimentResult result;
  result.name = m.name;
  std::map<std::string, Parameters> trained;  // keyed by model + train settings + seed

  for (const auto& cell : m.cells) {
    for (double r_noise : m.noise) {
      CellResult cr;
      cr.cell = cell.name;
      cr.noise = r_noise;
      std::vector<double> ps, rs, fs;
      for (std::uint64_t seed : m.seeds) {
        try {
          const ModelConfig mc = with_overrides(m.model, cell.model);
          TrainConfig tc = with_overrides(m.train, cell.train);
          tc.seed = seed;
          DecoderConfig dc = m.decoder;
          if (!cell.decoder.is_null()) from_json(cell.decoder, dc);
          const std::string key = nlohmann::json{{"m", mc}, {"t", tc}}.dump();
          auto it = trained.find(key);
          if (it == trained.end()) {
            if (log) log("training cell '" + cell.name + "' seed " + std::to_string(seed));
            EpisodeSpec train_spec = m.episode;
            train_spec.seed = m.episode.seed + seed * 1000003ULL;
            it = trained.emplace(key, train(sample_episodes(data.train, train_spec), data.store, mc, tc).params).first;
          }
          std::vector<Episode> eps = eval_eps;
          if (r_noise > 0.0)
            for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = perturb_support(eps[i], r_noise, seed * 7919ULL + i);
          EvalReport rep = evaluate(eps, it->second, mc, data.store, dc, m.eval);
          ps.push_back(rep.precision);
          rs.push_back(rep.recall);
          fs.push_back(rep.f1);
          cr.seeds.push_back(seed);
          cr.reports.push_back(std::move(rep));
        } catch (const std::exception& e) {
          cr.failures.emplace_back(seed, e.what());
          if (log) log("cell '" + cell.name + "' seed " + std::to_string(seed) + " failed: " + e.what());
        }
      }
      cr.precision = summarize(ps);
      cr.recall = summarize(rs);
      cr.f1 = summarize(fs);
      result.cells.push_back(std::move(cr));
    }
  }
  return result;
}

}  // namespace spanmatch
