#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/decoder.hpp"
#include "spanmatch/episodes.hpp"
#include "spanmatch/matcher.hpp"
#include "spanmatch/parameters.hpp"

namespace spanmatch {

// ---------------------------------------------------------------------------
// Metrics

enum class EvalStyle { kFewNerd, kSnips };

inline EvalStyle parse_eval_style(const std::string& s) {
  if (s == "fewnerd") return EvalStyle::kFewNerd;
  if (s == "snips") return EvalStyle::kSnips;
  throw UserError("unknown evaluation style '" + s + "' (expected fewnerd or snips)");
}

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  double precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
  double recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
};

/// Exact boundary-and-label matching, one-to-one.
inline Counts count_matches(const std::vector<LabeledSpan>& predicted, const std::vector<LabeledSpan>& gold) {
  std::multiset<LabeledSpan> pool(gold.begin(), gold.end());
  Counts c;
  for (const auto& p : predicted) {
    auto it = pool.find(p);
    if (it != pool.end()) {
      ++c.tp;
      pool.erase(it);
    } else {
      ++c.fp;
    }
  }
  c.fn = pool.size();
  return c;
}

struct ErrorInstance {
  LabeledSpan predicted;
  bool type_error = false;  // right boundaries, wrong label
};

struct ErrorBreakdown {
  std::size_t fp_span = 0;
  std::size_t fp_type = 0;
  std::vector<ErrorInstance> instances;

  ErrorBreakdown& operator+=(const ErrorBreakdown& o) {
    fp_span += o.fp_span;
    fp_type += o.fp_type;
    instances.insert(instances.end(), o.instances.begin(), o.instances.end());
    return *this;
  }
};

/// A false positive is FP-Type when some gold span has exactly its
/// boundaries (with another label), FP-Span otherwise.
inline ErrorBreakdown classify_errors(const std::vector<LabeledSpan>& predicted, const std::vector<LabeledSpan>& gold) {
  std::multiset<LabeledSpan> pool(gold.begin(), gold.end());
  std::vector<LabeledSpan> fps;
  for (const auto& p : predicted) {
    auto it = pool.find(p);
    if (it != pool.end()) pool.erase(it);
    else fps.push_back(p);
  }
  ErrorBreakdown out;
  for (const auto& p : fps) {
    const bool type = std::any_of(gold.begin(), gold.end(), [&](const LabeledSpan& g) { return g.span == p.span && g.label != p.label; });
    (type ? out.fp_type : out.fp_span) += 1;
    out.instances.push_back({p, type});
  }
  return out;
}

struct EvalReport {
  std::string style;
  std::string decode;
  std::size_t episodes = 0;
  Counts counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<double> episode_f1;
  std::size_t fp_span = 0;
  std::size_t fp_type = 0;
  std::optional<double> ms_per_task;
};

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j = {{"style", r.style},
                      {"decode", r.decode},
                      {"episodes", r.episodes},
                      {"precision", r.precision},
                      {"recall", r.recall},
                      {"f1", r.f1},
                      {"tp", r.counts.tp},
                      {"fp", r.counts.fp},
                      {"fn", r.counts.fn},
                      {"episode_f1", r.episode_f1},
                      {"errors", {{"fp_span", r.fp_span}, {"fp_type", r.fp_type}, {"fn", r.counts.fn}}}};
  j["timing"] = r.ms_per_task ? nlohmann::json{{"ms_per_task", *r.ms_per_task}} : nlohmann::json(nullptr);
  return j;
}

// Required keys and types of a report document.
inline bool report_schema_ok(const nlohmann::json& j) {
  for (const char* k : {"precision", "recall", "f1"})
    if (!j.contains(k) || !j[k].is_number()) return false;
  for (const char* k : {"tp", "fp", "fn", "episodes"})
    if (!j.contains(k) || !j[k].is_number_unsigned()) return false;
  if (!j.contains("episode_f1") || !j["episode_f1"].is_array()) return false;
  if (!j.contains("errors") || !j["errors"].contains("fp_span") || !j["errors"].contains("fp_type")) return false;
  if (!j.contains("timing")) return false;
  return j["errors"]["fp_span"].get<std::size_t>() + j["errors"]["fp_type"].get<std::size_t>() ==
         j["fp"].get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Inference

/// Decoded entity predictions for every query of an episode. A class left
/// without support entities (possible after support noise) gets no prototype
/// and is never predicted.
inline std::vector<std::vector<LabeledSpan>> predict_episode(const Episode& ep, const Parameters& params,
                                                             const ModelConfig& cfg, const EmbeddingStore& store,
                                                             const DecoderConfig& dcfg) {
  Episode supported = ep;
  const auto counts = support_counts(ep);
  std::erase_if(supported.classes, [&](const std::string& c) { return counts.at(c) == 0; });
  if (supported.classes.empty()) throw UserError("no episode class has a support entity");
  const auto scored = score_spans(supported, params, cfg, store);
  std::vector<std::vector<LabeledSpan>> out;
  for (const auto& preds : scored) {
    std::vector<ScoredSpan> cands;
    for (const auto& p : preds)
      if (p.label != kOutsideLabel) cands.push_back({p.span, p.label, p.score});
    const DecodeResult r = decode(cands, dcfg);
    std::vector<LabeledSpan> ents;
    for (const auto& a : r.accepted) ents.push_back({a.span, a.label});
    out.push_back(std::move(ents));
  }
  return out;
}

// Query gold spans restricted to the episode classes (over-long ones included,
// so the model can only miss them).
inline std::vector<LabeledSpan> query_gold(const Episode& ep, const Sentence& q) {
  std::vector<LabeledSpan> out;
  for (const auto& g : q.spans)
    if (std::find(ep.classes.begin(), ep.classes.end(), g.label) != ep.classes.end()) out.push_back(g);
  return out;
}

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) over a small worker pool; results land by index,
// so output never depends on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(resolve_threads(threads), std::max<std::size_t>(n, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct EvalOptions {
  EvalStyle style = EvalStyle::kFewNerd;
  std::size_t snips_batch = 1;  // episodes per F1 batch in snips style
  std::size_t threads = 1;
  bool timing = true;
};

using EpisodePredictions = std::vector<std::vector<LabeledSpan>>;  // one entry per query

/// Scores decoded predictions against the episodes' query gold. fewnerd style
/// pools counts over every episode before computing F1; snips style averages
/// the F1 of consecutive batches of `snips_batch` episodes.
inline EvalReport score_predictions(const std::vector<Episode>& episodes,
                                    const std::vector<EpisodePredictions>& predictions, const EvalOptions& opts = {}) {
  if (predictions.size() != episodes.size()) throw InvariantError("score_predictions: one prediction set per episode");
  EvalReport r;
  r.style = opts.style == EvalStyle::kFewNerd ? "fewnerd" : "snips";
  r.episodes = episodes.size();
  std::vector<Counts> per(episodes.size());
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Episode& ep = episodes[i];
    if (predictions[i].size() != ep.queries.size()) {
      throw InvariantError("score_predictions: one prediction list per query");
    }
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
      const auto gold = query_gold(ep, ep.queries[q]);
      per[i] += count_matches(predictions[i][q], gold);
      const ErrorBreakdown e = classify_errors(predictions[i][q], gold);
      r.fp_span += e.fp_span;
      r.fp_type += e.fp_type;
    }
    r.counts += per[i];
    r.episode_f1.push_back(per[i].f1());
  }
  if (opts.style == EvalStyle::kFewNerd) {
    r.precision = r.counts.precision();
    r.recall = r.counts.recall();
    r.f1 = r.counts.f1();
  } else {
    const std::size_t batch = std::max<std::size_t>(1, opts.snips_batch);
    double p = 0.0, rc = 0.0, f = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < episodes.size(); b += batch) {
      Counts c;
      for (std::size_t i = b; i < std::min(episodes.size(), b + batch); ++i) c += per[i];
      p += c.precision();
      rc += c.recall();
      f += c.f1();
      ++batches;
    }
    if (batches > 0) {
      r.precision = p / static_cast<double>(batches);
      r.recall = rc / static_cast<double>(batches);
      r.f1 = f / static_cast<double>(batches);
    }
  }
  return r;
}

inline EvalReport evaluate(const std::vector<Episode>& episodes, const Parameters& params, const ModelConfig& cfg,
                           const EmbeddingStore& store, const DecoderConfig& dcfg, const EvalOptions& opts = {}) {
  std::vector<EpisodePredictions> preds(episodes.size());
  const auto start = std::chrono::steady_clock::now();
  parallel_for(episodes.size(), opts.threads,
               [&](std::size_t i) { preds[i] = predict_episode(episodes[i], params, cfg, store, dcfg); });
  const double elapsed =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  EvalReport r = score_predictions(episodes, preds, opts);
  r.decode = to_string(dcfg.mode);
  if (opts.timing && !episodes.empty()) r.ms_per_task = elapsed / static_cast<double>(episodes.size());
  return r;
}

// ---------------------------------------------------------------------------
// Episodic training

struct TrainConfig {
  double lr = 5e-4;
  std::size_t episodes = 1000;
  std::optional<double> grad_clip;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0 disables validation checkpoints

  void validate() const {
    if (!(lr >= 0.0)) throw UserError("learning rate must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr}, {"episodes", c.episodes}, {"seed", c.seed}, {"eval_every", c.eval_every}};
  j["grad_clip"] = c.grad_clip ? nlohmann::json(*c.grad_clip) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.episodes = j.value("episodes", c.episodes);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("grad_clip") && !j["grad_clip"].is_null()) c.grad_clip = j["grad_clip"].get<double>();
}

class TrainingDiverged : public InvariantError {
 public:
  using InvariantError::InvariantError;
};

using EpisodeSource = std::function<Episode(std::size_t step)>;

// Cycles through a fixed episode list.
inline EpisodeSource cycle_episodes(std::vector<Episode> episodes) {
  if (episodes.empty()) throw UserError("no training episodes");
  return [eps = std::move(episodes)](std::size_t step) { return eps[step % eps.size()]; };
}

// Samples a fresh episode per step with seed = spec.seed + step.
inline EpisodeSource sample_episodes(std::vector<Sentence> corpus, EpisodeSpec spec) {
  return [corpus = std::move(corpus), spec](std::size_t step) {
    EpisodeSpec s = spec;
    s.seed = spec.seed + step;
    return sample_episode(corpus, s);
  };
}

struct Validation {
  std::vector<Episode> episodes;
  DecoderConfig decoder;
  EvalOptions options;
};

struct TrainResult {
  Parameters params;
  std::vector<double> losses;
  std::optional<double> best_val_f1;
  std::size_t best_step = 0;
};

/// One optimizer step on one episode. Returns the loss before the update.
inline double train_step(Parameters& params, AdamState& adam, const Episode& ep, const EmbeddingStore& store,
                         const ModelConfig& cfg, const TrainConfig& tcfg, std::mt19937_64& rng) {
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  const Dropout dropout(cfg.dropout, &rng);
  EpisodeForward fwd(tape, pv, cfg, ep, store, dropout);
  ad::Var loss = episode_loss_var(fwd);
  const double value = ad::value(loss)(0, 0);
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  Gradients grads = collect_gradients(tape, pv);
  if (tcfg.grad_clip) {
    const double norm = global_norm(grads);
    if (norm > *tcfg.grad_clip && norm > 0.0) {
      const double f = *tcfg.grad_clip / norm;
      for (auto& [name, m] : grads.named())
        for (double& v : m->values()) v *= f;
    }
  }
  adam_step(params, grads, adam, tcfg.lr);
  return value;
}

/// Forward (dropout on), loss, backward and an Adam step per episode.
/// Deterministic given the config seed. With validation episodes, the
/// returned parameters are the best-by-validation-F1 checkpoint.
inline TrainResult train(const EpisodeSource& source, const EmbeddingStore& store, const ModelConfig& cfg,
                         const TrainConfig& tcfg, const std::optional<Validation>& validation = std::nullopt,
                         std::optional<Parameters> init = std::nullopt,
                         const std::function<void(std::size_t, double)>& on_step = nullptr) {
  cfg.validate();
  tcfg.validate();
  TrainResult result;
  Parameters params = init ? *init : init_parameters(cfg, tcfg.seed);
  check_shapes(params, cfg);
  AdamState adam = AdamState::for_parameters(params);
  std::mt19937_64 rng(tcfg.seed ^ 0x5851f42d4c957f2dULL);

  auto run_validation = [&](std::size_t step) {
    const EvalReport rep = evaluate(validation->episodes, params, cfg, store, validation->decoder, validation->options);
    if (!result.best_val_f1 || rep.f1 > *result.best_val_f1) {
      result.best_val_f1 = rep.f1;
      result.best_step = step;
      result.params = params;
    }
  };

  for (std::size_t step = 0; step < tcfg.episodes; ++step) {
    const Episode ep = source(step);
    const double loss = train_step(params, adam, ep, store, cfg, tcfg, rng);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step) + " (episode classes: " +
                             std::to_string(ep.classes.size()) + ", support sentences: " +
                             std::to_string(ep.support.size()) + ")");
    }
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
    if (validation && tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0) run_validation(step + 1);
  }
  if (validation && tcfg.eval_every > 0) {
    if (tcfg.episodes % tcfg.eval_every != 0) run_validation(tcfg.episodes);
  } else {
    result.params = params;
  }
  if (!result.best_val_f1) result.params = params;
  return result;
}

}  // namespace spanmatch
