#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spanmatch/autodiff.hpp"
#include "spanmatch/corpus.hpp"
#include "spanmatch/episodes.hpp"
#include "spanmatch/layers.hpp"
#include "spanmatch/parameters.hpp"
#include "spanmatch/prototypes.hpp"
#include "spanmatch/span_pipeline.hpp"

namespace spanmatch {

inline const std::string kOutsideLabel = "O";

struct SpanPrediction {
  Span span;
  std::string label;  // "O" or an episode class
  double score = 0.0;
  std::vector<double> distribution;  // over [O, class_1, ..., class_N]
};

// Negated (optionally squared) euclidean distances from each query row to its
// prototypes, as a B_q x (N + 1) logit matrix.
inline ad::Var distance_logits(ad::Var queries, std::span<const ad::Var> prototypes, bool squared) {
  std::vector<ad::Var> dists;
  for (const auto& z : prototypes) {
    ad::Var diff = ad::sub(queries, z);
    dists.push_back(squared ? ad::row_sqnorm(diff) : ad::row_norm(diff));
  }
  return ad::scale(ad::hstack(dists), -1.0);
}

/// Softmax over negated distances to [z_o, z_1..z_N] (one query span).
inline std::vector<double> match_probabilities(std::span<const double> query, const PrototypeSet& protos,
                                               bool squared = false) {
  std::vector<const std::vector<double>*> zs{&protos.o};
  for (const auto& z : protos.entities) zs.push_back(&z);
  std::vector<double> logits;
  for (const auto* z : zs) {
    if (z->size() != query.size()) throw InvariantError("match_probabilities: width mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < query.size(); ++i) s += (query[i] - (*z)[i]) * (query[i] - (*z)[i]);
    if (!std::isfinite(s)) throw InvariantError("match_probabilities: non-finite representation");
    logits.push_back(-(squared ? s : std::sqrt(s)));
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
  return logits;
}

/// Mean negative log-probability of the gold index for each span.
inline double episode_loss(const std::vector<std::vector<double>>& distributions,
                           const std::vector<std::size_t>& gold) {
  if (distributions.size() != gold.size()) throw InvariantError("episode_loss: missing gold label for a span");
  if (distributions.empty()) throw InvariantError("episode_loss: no spans");
  double total = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= distributions[i].size()) throw InvariantError("episode_loss: gold index out of range");
    total -= std::log(distributions[i][gold[i]]);
  }
  return total / static_cast<double>(gold.size());
}

// Gold index per query span: 0 for O, 1 + class position otherwise.
inline std::vector<std::size_t> gold_indices(const Sentence& q, const std::vector<Span>& spans,
                                             const std::vector<std::string>& classes) {
  std::map<Span, std::size_t> by_span;
  for (const auto& g : q.spans) {
    const auto it = std::find(classes.begin(), classes.end(), g.label);
    if (it == classes.end()) continue;
    by_span.emplace(g.span, 1 + static_cast<std::size_t>(it - classes.begin()));
  }
  std::vector<std::size_t> out;
  out.reserve(spans.size());
  for (const Span& s : spans) {
    const auto it = by_span.find(s);
    out.push_back(it == by_span.end() ? 0 : it->second);
  }
  return out;
}

struct QueryForward {
  std::vector<Span> spans;
  ad::Var logits;  // B_q x (N + 1)
  std::vector<std::size_t> gold;
};

/// Forward graph for one episode on one tape. Support spans are initialized
/// and passed through ISA once; each query then runs CSA against the stacked
/// support and is matched against its own query-conditioned prototypes.
class EpisodeForward {
 public:
  EpisodeForward(ad::Tape& tape, const ParamVars& pv, const ModelConfig& cfg, const Episode& ep,
                 const EmbeddingStore& store, const Dropout& dropout = {})
      : tape_(tape), pv_(pv), cfg_(cfg), ep_(ep), store_(store), dropout_(dropout) {
    if (ep.support.empty()) throw UserError("episode has an empty support set");
    const int max_len = static_cast<int>(cfg.max_span_len);
    std::vector<ad::Var> reps;
    groups_.classes.resize(ep.classes.size());
    std::size_t row = 0;
    for (const auto& s : ep.support) {
      SpanList list = enumerate_sentence_spans(s, max_len, true);
      const auto kinds = partition_o_spans(s, list.spans);
      for (std::size_t i = 0; i < list.spans.size(); ++i, ++row) {
        if (kinds[i] == SpanKind::kGold) {
          // first annotation wins when a nested sentence repeats a boundary
          const std::string* label = nullptr;
          for (const auto& g : s.spans)
            if (g.span == list.spans[i]) {
              label = &g.label;
              break;
            }
          const auto it = std::find(ep.classes.begin(), ep.classes.end(), *label);
          if (it == ep.classes.end()) {
            throw UserError("support sentence '" + s.id + "' has label '" + *label + "' outside the episode classes");
          }
          groups_.classes[static_cast<std::size_t>(it - ep.classes.begin())].push_back(row);
        } else {
          groups_.o_sub[static_cast<std::size_t>(o_subclass_index(kinds[i]))].push_back(row);
          groups_.o_all.push_back(row);
        }
      }
      ad::Var init = init_span_reps(tape, pv, store.lookup(s), list.spans, dropout);
      reps.push_back(intra_span_attention(init, pv.isa, cfg.use_isa, dropout));
    }
    support_ = ad::vstack(reps);
  }

  QueryForward query(std::size_t qi) const {
    const Sentence& q = ep_.queries.at(qi);
    QueryForward out;
    out.spans = enumerate_spans(q.size(), static_cast<int>(cfg_.max_span_len));
    ad::Var init = init_span_reps(tape_, pv_, store_.lookup(q), out.spans, dropout_);
    ad::Var qreps = intra_span_attention(init, pv_.isa, cfg_.use_isa, dropout_);
    auto [qc, sc] = cross_span_attention(qreps, support_, pv_.csa, cfg_.use_csa, dropout_);
    const auto protos = build_prototypes(qc, sc, groups_, cfg_);
    out.logits = distance_logits(qc, protos, cfg_.squared_distance);
    out.gold = gold_indices(q, out.spans, ep_.classes);
    return out;
  }

  std::size_t query_count() const { return ep_.queries.size(); }

 private:
  ad::Tape& tape_;
  ParamVars pv_;
  const ModelConfig& cfg_;
  const Episode& ep_;
  const EmbeddingStore& store_;
  Dropout dropout_;
  SupportGroups groups_;
  ad::Var support_;
};

// Cross-entropy of one query's spans against their gold indices.
inline ad::Var query_loss(const QueryForward& qf) {
  return ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(qf.logits), qf.gold)), -1.0);
}

/// Episode objective: mean over queries of the per-query span cross-entropy.
inline ad::Var episode_loss_var(const EpisodeForward& fwd) {
  if (fwd.query_count() == 0) throw UserError("episode has no query sentences");
  std::vector<ad::Var> losses;
  for (std::size_t qi = 0; qi < fwd.query_count(); ++qi) losses.push_back(query_loss(fwd.query(qi)));
  return ad::mean(ad::vstack(losses));
}

inline double episode_loss(const Episode& ep, const Parameters& params, const ModelConfig& cfg,
                           const EmbeddingStore& store) {
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  EpisodeForward fwd(tape, pv, cfg, ep, store);
  return ad::value(episode_loss_var(fwd))(0, 0);
}

// Row-wise softmax of a logit matrix into SpanPredictions. Ties go to the
// lowest index (O first, then episode class order).
inline std::vector<SpanPrediction> predictions_from_logits(const Matrix& logits, const std::vector<Span>& spans,
                                                           const std::vector<std::string>& classes) {
  std::vector<SpanPrediction> out;
  out.reserve(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    std::vector<double> p(row.size());
    double z = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      p[k] = std::exp(row[k] - mx);
      z += p[k];
    }
    std::size_t best = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] /= z;
      if (p[k] > p[best]) best = k;
    }
    SpanPrediction sp;
    sp.span = spans[i];
    sp.label = best == 0 ? kOutsideLabel : classes[best - 1];
    sp.score = p[best];
    sp.distribution = std::move(p);
    out.push_back(std::move(sp));
  }
  return out;
}

/// Evaluation-mode scoring of every enumerated span of every query sentence.
inline std::vector<std::vector<SpanPrediction>> score_spans(const Episode& ep, const Parameters& params,
                                                            const ModelConfig& cfg, const EmbeddingStore& store) {
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  EpisodeForward fwd(tape, pv, cfg, ep, store);
  std::vector<std::vector<SpanPrediction>> out;
  for (std::size_t qi = 0; qi < ep.queries.size(); ++qi) {
    const QueryForward qf = fwd.query(qi);
    const Matrix& logits = ad::value(qf.logits);
    if (!all_finite(logits)) throw InvariantError("non-finite span logits");
    out.push_back(predictions_from_logits(logits, qf.spans, ep.classes));
  }
  return out;
}

}  // namespace spanmatch
