#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/corpus.hpp"
#include "spanmatch/error.hpp"

namespace spanmatch {

enum class ShotMode { kExact, kKTo2K };

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  ShotMode shot_mode = ShotMode::kKTo2K;
  int query_count = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_way < 1 || k_shot < 1 || query_count < 1) {
      throw UserError("episode spec needs N >= 1, K >= 1 and query_count >= 1");
    }
  }
  int cap() const { return shot_mode == ShotMode::kExact ? k_shot : 2 * k_shot; }
};

inline ShotMode parse_shot_mode(const std::string& s) {
  if (s == "exact" || s == "exact-k" || s == "k") return ShotMode::kExact;
  if (s == "k2k" || s == "k-to-2k" || s == "K-to-2K") return ShotMode::kKTo2K;
  throw UserError("unknown shot mode '" + s + "' (expected exact or k2k)");
}

inline void to_json(nlohmann::json& j, const EpisodeSpec& s) {
  j = nlohmann::json{{"n_way", s.n_way},
                     {"k_shot", s.k_shot},
                     {"shot_mode", s.shot_mode == ShotMode::kExact ? "exact" : "k2k"},
                     {"query_count", s.query_count},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, EpisodeSpec& s) {
  s.n_way = j.value("n_way", s.n_way);
  s.k_shot = j.value("k_shot", s.k_shot);
  if (j.contains("shot_mode")) s.shot_mode = parse_shot_mode(j["shot_mode"].get<std::string>());
  s.query_count = j.value("query_count", s.query_count);
  s.seed = j.value("seed", s.seed);
}

struct Episode {
  std::vector<std::string> classes;
  std::vector<Sentence> support;
  std::vector<Sentence> queries;

  bool operator==(const Episode&) const = default;
};

// Gold spans whose label is one of `keep`; everything else becomes O.
inline Sentence restrict_labels(const Sentence& s, const std::set<std::string>& keep) {
  Sentence out = s;
  out.spans.clear();
  for (const auto& g : s.spans)
    if (keep.count(g.label)) out.spans.push_back(g);
  return out;
}

/// Greedy N-way K-shot sampling. Sentences are visited in a seeded shuffled
/// order; a sentence joins the support when it carries at least one episode
/// class still below K and would not push any class above the cap (K or 2K).
/// Queries are the next unused sentences mentioning an episode class.
inline Episode sample_episode(const std::vector<Sentence>& corpus, const EpisodeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  std::set<std::string> all_classes;
  for (const auto& s : corpus)
    for (const auto& g : s.spans) all_classes.insert(g.label);
  if (static_cast<int>(all_classes.size()) < spec.n_way) {
    throw UserError("infeasible: corpus has " + std::to_string(all_classes.size()) + " classes, need " +
                    std::to_string(spec.n_way));
  }
  std::vector<std::string> pool(all_classes.begin(), all_classes.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::string> classes(pool.begin(), pool.begin() + spec.n_way);
  const std::set<std::string> chosen(classes.begin(), classes.end());

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::map<std::string, int> count;
  for (const auto& c : classes) count[c] = 0;
  auto satisfied = [&]() {
    return std::all_of(count.begin(), count.end(), [&](const auto& kv) { return kv.second >= spec.k_shot; });
  };

  Episode ep;
  ep.classes = classes;
  std::vector<bool> used(corpus.size(), false);
  for (std::size_t idx : order) {
    if (satisfied()) break;
    std::map<std::string, int> add;
    for (const auto& g : corpus[idx].spans)
      if (chosen.count(g.label)) ++add[g.label];
    if (add.empty()) continue;
    bool helps = false, fits = true;
    for (const auto& [label, n] : add) {
      helps = helps || count[label] < spec.k_shot;
      fits = fits && count[label] + n <= spec.cap();
    }
    if (!helps || !fits) continue;
    for (const auto& [label, n] : add) count[label] += n;
    used[idx] = true;
    ep.support.push_back(restrict_labels(corpus[idx], chosen));
  }
  if (!satisfied()) {
    throw UserError("infeasible: could not reach " + std::to_string(spec.k_shot) +
                    " shots for every class after a full pass over the corpus");
  }
  for (std::size_t idx : order) {
    if (static_cast<int>(ep.queries.size()) == spec.query_count) break;
    if (used[idx]) continue;
    Sentence q = restrict_labels(corpus[idx], chosen);
    if (q.spans.empty()) continue;
    used[idx] = true;
    ep.queries.push_back(std::move(q));
  }
  if (static_cast<int>(ep.queries.size()) < spec.query_count) {
    throw UserError("infeasible: not enough query sentences with episode entities");
  }
  return ep;
}

// Per-class gold-span counts in the support set.
inline std::map<std::string, int> support_counts(const Episode& ep) {
  std::map<std::string, int> out;
  for (const auto& c : ep.classes) out[c] = 0;
  for (const auto& s : ep.support)
    for (const auto& g : s.spans) ++out[g.label];
  return out;
}

/// Relabels floor(r_noise * M) of the M support entities, chosen uniformly,
/// each to a uniformly drawn different episode class. Boundaries and queries
/// are untouched. With a single episode class no relabeling is possible.
inline Episode perturb_support(const Episode& ep, double r_noise, std::uint64_t seed) {
  if (r_noise < 0.0 || r_noise > 1.0) throw UserError("noise ratio must lie in [0, 1]");
  Episode out = ep;
  if (ep.classes.size() < 2) return out;
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t i = 0; i < out.support.size(); ++i)
    for (std::size_t j = 0; j < out.support[i].spans.size(); ++j) slots.emplace_back(i, j);
  const auto flips = static_cast<std::size_t>(std::floor(r_noise * static_cast<double>(slots.size()) + 1e-9));
  std::mt19937_64 rng(seed);
  std::shuffle(slots.begin(), slots.end(), rng);
  std::uniform_int_distribution<std::size_t> other(0, ep.classes.size() - 2);
  for (std::size_t k = 0; k < flips; ++k) {
    auto& label = out.support[slots[k].first].spans[slots[k].second].label;
    const auto cur = std::find(ep.classes.begin(), ep.classes.end(), label);
    const auto cur_idx = static_cast<std::size_t>(cur - ep.classes.begin());
    std::size_t pick = other(rng);
    if (pick >= cur_idx) ++pick;
    label = ep.classes[pick];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode JSON Lines

inline nlohmann::json sentence_to_json(const Sentence& s) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& g : s.spans) spans.push_back({g.span.l, g.span.r, g.label});
  nlohmann::json j = {{"id", s.id}, {"tokens", s.tokens}, {"spans", spans}};
  if (s.nested) j["nested"] = true;
  return j;
}

inline Sentence sentence_from_json(const nlohmann::json& j) {
  Sentence s;
  s.id = j.at("id").get<std::string>();
  s.tokens = j.at("tokens").get<std::vector<std::string>>();
  s.nested = j.value("nested", false);
  for (const auto& sp : j.at("spans")) {
    if (!sp.is_array() || sp.size() != 3) throw UserError("span record must be [l, r, label]");
    s.spans.push_back({{sp[0].get<int>(), sp[1].get<int>()}, sp[2].get<std::string>()});
  }
  validate_sentence(s);
  return s;
}

inline nlohmann::json episode_to_json(const Episode& ep) {
  nlohmann::json support = nlohmann::json::array(), queries = nlohmann::json::array();
  for (const auto& s : ep.support) support.push_back(sentence_to_json(s));
  for (const auto& s : ep.queries) queries.push_back(sentence_to_json(s));
  return {{"classes", ep.classes}, {"support", support}, {"queries", queries}};
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode ep;
  ep.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& s : j.at("support")) ep.support.push_back(sentence_from_json(s));
  for (const auto& s : j.at("queries")) ep.queries.push_back(sentence_from_json(s));
  if (std::find(ep.classes.begin(), ep.classes.end(), "O") != ep.classes.end()) {
    throw UserError("episode class list must not contain O");
  }
  return ep;
}

inline void write_episodes(std::ostream& os, const std::vector<Episode>& episodes) {
  for (const auto& ep : episodes) os << episode_to_json(ep).dump() << '\n';
}

inline std::vector<Episode> read_episodes(std::istream& in) {
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw UserError("episode file line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Every distinct sentence (by id) appearing in a list of episodes, in first-seen order.
inline std::vector<Sentence> episode_sentences(const std::vector<Episode>& episodes) {
  std::vector<Sentence> out;
  std::set<std::string> seen;
  for (const auto& ep : episodes) {
    for (const auto* group : {&ep.support, &ep.queries})
      for (const auto& s : *group)
        if (seen.insert(s.id).second) out.push_back(s);
  }
  return out;
}

}  // namespace spanmatch
