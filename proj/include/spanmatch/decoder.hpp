#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/corpus.hpp"
#include "spanmatch/error.hpp"

namespace spanmatch {

enum class DecodeMode { kBsnms, kSoftNms, kBeam, kNone };
enum class PathScore { kSum, kProduct, kMean };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "bsnms") return DecodeMode::kBsnms;
  if (s == "softnms") return DecodeMode::kSoftNms;
  if (s == "beam") return DecodeMode::kBeam;
  if (s == "none") return DecodeMode::kNone;
  throw UserError("unknown decode mode '" + s + "' (expected bsnms, softnms, beam or none)");
}

inline PathScore parse_path_score(const std::string& s) {
  if (s == "sum") return PathScore::kSum;
  if (s == "product") return PathScore::kProduct;
  if (s == "mean") return PathScore::kMean;
  throw UserError("unknown path score combiner '" + s + "' (expected sum, product or mean)");
}

inline std::string to_string(PathScore p) {
  switch (p) {
    case PathScore::kSum: return "sum";
    case PathScore::kProduct: return "product";
    case PathScore::kMean: return "mean";
  }
  return "?";
}

inline std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::kBsnms: return "bsnms";
    case DecodeMode::kSoftNms: return "softnms";
    case DecodeMode::kBeam: return "beam";
    case DecodeMode::kNone: return "none";
  }
  return "?";
}

struct DecoderConfig {
  int beam_size = 5;
  double delta = 0.1;           // filter threshold: a span joins only if its decayed score > delta
  double iou_threshold = 1e-5;  // k: IoU at or above which two spans conflict
  double decay = 1e-5;          // u: multiplicative decay per conflict
  DecodeMode mode = DecodeMode::kBsnms;
  PathScore path_score = PathScore::kSum;
  // Replaces score * u^eta when set. Used to replay additive toy walkthroughs.
  std::function<double(double score, int eta)> decay_fn;

  void validate() const {
    if (!(decay > 0.0 && decay <= 1.0)) throw UserError("decay ratio u must lie in (0, 1]");
    if (!(delta >= 0.0 && delta < 1.0)) throw UserError("filter threshold delta must lie in [0, 1)");
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw UserError("IoU threshold k must lie in (0, 1]");
    if (beam_size < 1) throw UserError("beam size must be >= 1");
  }

  // Settings for data without nested entities: any overlap kills a candidate.
  static DecoderConfig flat() { return DecoderConfig{}; }

  // Settings tuned for nested data.
  static DecoderConfig nested() {
    DecoderConfig c;
    c.iou_threshold = 0.1;
    c.delta = 0.1;
    c.decay = 0.4;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"beam_size", c.beam_size},
                     {"delta", c.delta},
                     {"k", c.iou_threshold},
                     {"u", c.decay},
                     {"path_score", to_string(c.path_score)}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  if (j.contains("preset")) {
    const auto p = j["preset"].get<std::string>();
    if (p == "nested") c = DecoderConfig::nested();
    else if (p == "flat") c = DecoderConfig::flat();
    else throw UserError("unknown decoder preset '" + p + "'");
  }
  if (j.contains("mode")) c.mode = parse_decode_mode(j["mode"].get<std::string>());
  c.beam_size = j.value("beam_size", c.beam_size);
  c.delta = j.value("delta", c.delta);
  c.iou_threshold = j.value("k", j.value("iou_threshold", c.iou_threshold));
  c.decay = j.value("u", j.value("decay", c.decay));
  if (j.contains("path_score")) c.path_score = parse_path_score(j["path_score"].get<std::string>());
}

struct ScoredSpan {
  Span span;
  std::string label;
  double score = 0.0;

  auto operator<=>(const ScoredSpan&) const = default;
};

/// Token-set Jaccard overlap of two inclusive ranges.
inline double iou(Span a, Span b) {
  const int inter = std::min(a.r, b.r) - std::max(a.l, b.l) + 1;
  if (inter <= 0) return 0.0;
  const int uni = a.length() + b.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline int conflict_count(Span candidate, const std::vector<Span>& accepted, double k) {
  int eta = 0;
  for (const Span& t : accepted)
    if (iou(candidate, t) >= k) ++eta;
  return eta;
}

/// score * u^eta, where eta counts accepted spans overlapping the candidate with IoU >= k.
inline double decayed_score(const ScoredSpan& candidate, const std::vector<Span>& accepted,
                            const DecoderConfig& cfg) {
  const int eta = conflict_count(candidate.span, accepted, cfg.iou_threshold);
  if (cfg.decay_fn) return cfg.decay_fn(candidate.score, eta);
  return candidate.score * std::pow(cfg.decay, eta);
}

struct DecodeResult {
  std::vector<ScoredSpan> accepted;     // canonical order, original scores
  std::vector<double> decayed;          // score at acceptance, aligned with accepted
  double path_score = 0.0;
};

namespace detail {

// Canonical candidate order: by span, then label, then score. Makes every
// decoder independent of the input order.
inline std::vector<ScoredSpan> canonical(std::vector<ScoredSpan> c) {
  std::sort(c.begin(), c.end());
  return c;
}

// Path score of a state from its decayed-at-acceptance scores.
inline double path_value(PathScore mode, const std::vector<double>& stored) {
  if (stored.empty()) return 0.0;
  double acc = mode == PathScore::kProduct ? 1.0 : 0.0;
  for (double v : stored) acc = mode == PathScore::kProduct ? acc * v : acc + v;
  return mode == PathScore::kMean ? acc / static_cast<double>(stored.size()) : acc;
}

struct BeamState {
  std::vector<std::size_t> members;   // acceptance order
  std::vector<double> stored;         // decayed score at acceptance
  std::vector<std::size_t> sorted;    // canonical key
  double path_score = 0.0;
  bool expandable = true;
};

// Larger path score first; ties go to the lexicographically smaller index set.
inline bool better(const BeamState& a, const BeamState& b) {
  if (a.path_score != b.path_score) return a.path_score > b.path_score;
  return a.sorted < b.sorted;
}

inline DecodeResult to_result(const std::vector<ScoredSpan>& cands, const BeamState& s) {
  std::vector<std::pair<std::size_t, double>> pairs;
  for (std::size_t i = 0; i < s.members.size(); ++i) pairs.emplace_back(s.members[i], s.stored[i]);
  std::sort(pairs.begin(), pairs.end());
  DecodeResult r;
  for (const auto& [idx, ds] : pairs) {
    r.accepted.push_back(cands[idx]);
    r.decayed.push_back(ds);
  }
  r.path_score = s.path_score;
  return r;
}

// Shared beam search; `hard` turns any conflict into inadmissibility.
inline DecodeResult beam_search(const std::vector<ScoredSpan>& input, const DecoderConfig& cfg, bool hard) {
  cfg.validate();
  const auto cands = canonical(input);

  std::vector<std::size_t> seeds;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (cands[i].score > cfg.delta) seeds.push_back(i);
  std::stable_sort(seeds.begin(), seeds.end(),
                   [&](std::size_t a, std::size_t b) { return cands[a].score > cands[b].score; });
  if (seeds.size() > static_cast<std::size_t>(cfg.beam_size)) seeds.resize(cfg.beam_size);

  std::vector<BeamState> beam;
  for (std::size_t i : seeds) {
    BeamState s;
    s.members = {i};
    s.stored = {cands[i].score};
    s.sorted = {i};
    s.path_score = path_value(cfg.path_score, s.stored);
    beam.push_back(std::move(s));
  }
  std::vector<BeamState> finished;

  while (std::any_of(beam.begin(), beam.end(), [](const BeamState& s) { return s.expandable; })) {
    std::vector<BeamState> next;
    for (BeamState& s : beam) {
      if (!s.expandable) {
        next.push_back(s);
        continue;
      }
      std::vector<Span> taken;
      for (std::size_t m : s.members) taken.push_back(cands[m].span);
      bool grew = false;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        if (std::binary_search(s.sorted.begin(), s.sorted.end(), i)) continue;
        double ds;
        if (hard) {
          if (conflict_count(cands[i].span, taken, cfg.iou_threshold) > 0) continue;
          ds = cands[i].score;
        } else {
          ds = decayed_score(cands[i], taken, cfg);
        }
        if (!(ds > cfg.delta)) continue;
        BeamState child = s;
        child.members.push_back(i);
        child.stored.push_back(ds);
        child.sorted.insert(std::upper_bound(child.sorted.begin(), child.sorted.end(), i), i);
        child.path_score = path_value(cfg.path_score, child.stored);
        next.push_back(std::move(child));
        grew = true;
      }
      if (!grew) {
        s.expandable = false;
        finished.push_back(s);
        next.push_back(s);
      }
    }
    // Drop duplicate sets, keeping the best-scoring representative.
    std::map<std::vector<std::size_t>, BeamState> unique;
    for (auto& s : next) {
      auto it = unique.find(s.sorted);
      if (it == unique.end()) unique.emplace(s.sorted, std::move(s));
      else if (s.path_score > it->second.path_score) it->second = std::move(s);
    }
    beam.clear();
    for (auto& [key, s] : unique) beam.push_back(std::move(s));
    std::sort(beam.begin(), beam.end(), better);
    if (beam.size() > static_cast<std::size_t>(cfg.beam_size)) beam.resize(cfg.beam_size);
  }

  finished.insert(finished.end(), beam.begin(), beam.end());
  if (finished.empty()) return DecodeResult{};
  const auto best = std::min_element(finished.begin(), finished.end(), better);
  return to_result(cands, *best);
}

}  // namespace detail

/// Beam Soft-NMS.
inline DecodeResult bsnms(const std::vector<ScoredSpan>& candidates, const DecoderConfig& cfg) {
  return detail::beam_search(candidates, cfg, false);
}

/// Beam search with hard conflicts: an overlapping candidate is never admissible.
inline DecodeResult beam_decode(const std::vector<ScoredSpan>& candidates, const DecoderConfig& cfg) {
  return detail::beam_search(candidates, cfg, true);
}

/// Greedy Soft-NMS: accept the best remaining span while it clears delta, then
/// decay every remaining span that conflicts with it.
inline DecodeResult softnms(const std::vector<ScoredSpan>& candidates, const DecoderConfig& cfg) {
  cfg.validate();
  const auto cands = detail::canonical(candidates);
  std::vector<double> cur;
  for (const auto& c : cands) cur.push_back(c.score);
  std::vector<bool> alive(cands.size(), true);
  std::vector<std::pair<std::size_t, double>> taken;
  while (true) {
    std::size_t best = cands.size();
    for (std::size_t i = 0; i < cands.size(); ++i)
      if (alive[i] && (best == cands.size() || cur[i] > cur[best])) best = i;
    if (best == cands.size() || !(cur[best] > cfg.delta)) break;
    alive[best] = false;
    taken.emplace_back(best, cur[best]);
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (alive[i] && iou(cands[i].span, cands[best].span) >= cfg.iou_threshold) cur[i] *= cfg.decay;
    }
  }
  std::sort(taken.begin(), taken.end());
  DecodeResult r;
  for (const auto& [idx, s] : taken) {
    r.accepted.push_back(cands[idx]);
    r.decayed.push_back(s);
  }
  r.path_score = detail::path_value(cfg.path_score, r.decayed);
  return r;
}

inline constexpr std::size_t kOracleMaxCandidates = 10;

/// Unbounded search over every admissible acceptance order; returns the
/// terminal set with the largest path score (ties: smaller index set).
inline DecodeResult exhaustive_oracle(const std::vector<ScoredSpan>& candidates, const DecoderConfig& cfg) {
  cfg.validate();
  if (candidates.size() > kOracleMaxCandidates) {
    throw UserError("exhaustive oracle refuses more than " + std::to_string(kOracleMaxCandidates) + " candidates");
  }
  const auto cands = detail::canonical(candidates);

  bool found = false;
  double best_score = 0.0;
  std::vector<std::size_t> best_set;
  std::vector<std::pair<std::size_t, double>> best_pairs;

  std::vector<std::size_t> order;
  std::vector<double> stored;
  std::vector<bool> in(cands.size(), false);

  std::function<void()> visit = [&]() {
    bool extended = false;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (in[i]) continue;
      std::vector<Span> taken;
      for (std::size_t m : order) taken.push_back(cands[m].span);
      const double ds = decayed_score(cands[i], taken, cfg);
      if (!(ds > cfg.delta)) continue;
      extended = true;
      in[i] = true;
      order.push_back(i);
      stored.push_back(ds);
      visit();
      order.pop_back();
      stored.pop_back();
      in[i] = false;
    }
    if (extended || order.empty()) return;
    const double ps = detail::path_value(cfg.path_score, stored);
    std::vector<std::size_t> set = order;
    std::sort(set.begin(), set.end());
    if (!found || ps > best_score || (ps == best_score && set < best_set)) {
      found = true;
      best_score = ps;
      best_set = set;
      best_pairs.clear();
      for (std::size_t k = 0; k < order.size(); ++k) best_pairs.emplace_back(order[k], stored[k]);
    }
  };
  visit();

  DecodeResult r;
  if (!found) return r;
  std::sort(best_pairs.begin(), best_pairs.end());
  for (const auto& [idx, ds] : best_pairs) {
    r.accepted.push_back(cands[idx]);
    r.decayed.push_back(ds);
  }
  r.path_score = best_score;
  return r;
}

/// Dispatch on cfg.mode. kNone passes every candidate through.
inline DecodeResult decode(const std::vector<ScoredSpan>& candidates, const DecoderConfig& cfg) {
  switch (cfg.mode) {
    case DecodeMode::kBsnms: return bsnms(candidates, cfg);
    case DecodeMode::kSoftNms: return softnms(candidates, cfg);
    case DecodeMode::kBeam: return beam_decode(candidates, cfg);
    case DecodeMode::kNone: {
      DecodeResult r;
      r.accepted = detail::canonical(candidates);
      for (const auto& c : r.accepted) r.decayed.push_back(c.score);
      r.path_score = detail::path_value(cfg.path_score, r.decayed);
      return r;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Standalone scored-span interchange:
//   {"spans":[{"l","r","label","score"}], "config":{...}} -> {"accepted":[{"l","r","label"}]}

inline std::vector<ScoredSpan> scored_spans_from_json(const nlohmann::json& j) {
  std::vector<ScoredSpan> out;
  for (const auto& s : j.at("spans")) {
    ScoredSpan sp{{s.at("l").get<int>(), s.at("r").get<int>()}, s.at("label").get<std::string>(),
                  s.at("score").get<double>()};
    if (sp.span.l < 0 || sp.span.l > sp.span.r) throw UserError("scored span has invalid bounds");
    out.push_back(std::move(sp));
  }
  return out;
}

inline nlohmann::json accepted_to_json(const DecodeResult& r) {
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& s : r.accepted) acc.push_back({{"l", s.span.l}, {"r", s.span.r}, {"label", s.label}});
  return {{"accepted", acc}};
}

// Decodes one interchange record; `defaults` supplies settings the record's
// own "config" object does not override.
inline nlohmann::json decode_record(const nlohmann::json& record, const DecoderConfig& defaults) {
  DecoderConfig cfg = defaults;
  if (record.contains("config")) from_json(record["config"], cfg);
  return accepted_to_json(decode(scored_spans_from_json(record), cfg));
}

}  // namespace spanmatch
