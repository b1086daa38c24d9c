#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>
#include "spanmatch/error.hpp"
#include "spanmatch/matrix.hpp"

namespace spanmatch {

/// Inclusive 0-based token range.
struct Span {
  int l = 0;
  int r = 0;

  int length() const { return r - l + 1; }
  auto operator<=>(const Span&) const = default;
};

struct LabeledSpan {
  Span span;
  std::string label;

  auto operator<=>(const LabeledSpan&) const = default;
};

struct Sentence {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<LabeledSpan> spans;
  bool nested = false;

  int size() const { return static_cast<int>(tokens.size()); }
  bool operator==(const Sentence&) const = default;
};

inline bool overlaps(Span a, Span b) { return !(a.r < b.l || a.l > b.r); }

// Checks index bounds, nonempty labels and (unless nested) pairwise disjointness.
inline void validate_sentence(const Sentence& s) {
  for (const auto& g : s.spans) {
    if (g.span.l < 0 || g.span.l > g.span.r || g.span.r >= s.size()) {
      throw UserError("sentence '" + s.id + "': span out of range");
    }
    if (g.label.empty()) throw UserError("sentence '" + s.id + "': empty span label");
  }
  if (s.nested) return;
  for (std::size_t i = 0; i < s.spans.size(); ++i)
    for (std::size_t j = i + 1; j < s.spans.size(); ++j)
      if (overlaps(s.spans[i].span, s.spans[j].span)) {
        throw UserError("sentence '" + s.id + "': overlapping gold spans in a non-nested sentence");
      }
}

// ---------------------------------------------------------------------------
// BIO ingestion

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\n')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

}  // namespace detail

/// Reads token<TAB>tag lines with blank lines between sentences. A dangling
/// I-X (no open X span) starts a new X span.
inline std::vector<Sentence> parse_bio(std::istream& in, const std::string& id_prefix = "s") {
  std::vector<Sentence> out;
  Sentence cur;
  std::string open_label;
  int open_start = -1;
  auto close_span = [&]() {
    if (open_start >= 0) {
      cur.spans.push_back({{open_start, cur.size() - 1}, open_label});
      open_start = -1;
      open_label.clear();
    }
  };
  auto flush = [&]() {
    if (cur.tokens.empty()) return;
    close_span();
    cur.id = id_prefix + std::to_string(out.size());
    out.push_back(std::move(cur));
    cur = Sentence{};
  };

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view view = detail::trim(line);
    if (view.empty()) {
      flush();
      continue;
    }
    std::size_t cut = view.rfind('\t');
    if (cut == std::string_view::npos) cut = view.rfind(' ');
    if (cut == std::string_view::npos || cut == 0 || cut + 1 >= view.size()) {
      throw UserError("BIO parse error at line " + std::to_string(lineno) + ": expected token<TAB>tag");
    }
    const std::string token(view.substr(0, cut));
    const std::string tag(detail::trim(view.substr(cut + 1)));
    const int pos = cur.size();
    if (tag == "O") {
      close_span();
    } else if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
      const std::string label = tag.substr(2);
      if (tag[0] == 'B' || open_start < 0 || open_label != label) {
        close_span();
        open_start = pos;
        open_label = label;
      }
    } else {
      throw UserError("BIO parse error at line " + std::to_string(lineno) + ": malformed tag '" + tag + "'");
    }
    cur.tokens.push_back(token);
  }
  flush();
  return out;
}

inline std::vector<std::string> spans_to_bio(const Sentence& s) {
  std::vector<std::string> tags(s.tokens.size(), "O");
  std::vector<bool> used(s.tokens.size(), false);
  for (const auto& g : s.spans) {
    if (g.span.l < 0 || g.span.r >= s.size() || g.span.l > g.span.r) {
      throw UserError("sentence '" + s.id + "': span out of range");
    }
    for (int i = g.span.l; i <= g.span.r; ++i) {
      if (used[i]) throw UserError("sentence '" + s.id + "': not BIO-representable (overlapping spans)");
      used[i] = true;
      tags[i] = (i == g.span.l ? "B-" : "I-") + g.label;
    }
  }
  return tags;
}

inline void write_bio(std::ostream& os, const std::vector<Sentence>& sentences) {
  for (const auto& s : sentences) {
    const auto tags = spans_to_bio(s);
    for (std::size_t i = 0; i < s.tokens.size(); ++i) os << s.tokens[i] << '\t' << tags[i] << '\n';
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Frozen token embeddings

class EmbeddingStore {
 public:
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& id) const { return vectors_.count(id) != 0; }

  void add(const std::string& id, Matrix vectors) {
    if (vectors.rows() == 0) throw UserError("embedding record '" + id + "' has no vectors");
    if (dim_ == 0) dim_ = vectors.cols();
    if (vectors.cols() != dim_) {
      throw UserError("embedding record '" + id + "' has dim " + std::to_string(vectors.cols()) +
                      ", store dim is " + std::to_string(dim_));
    }
    vectors_[id] = std::move(vectors);
  }

  const Matrix& at(const std::string& id) const {
    auto it = vectors_.find(id);
    if (it == vectors_.end()) throw UserError("missing embeddings for sentence '" + id + "'");
    return it->second;
  }

  // Lookup that also enforces the row-count invariant against the sentence.
  const Matrix& lookup(const Sentence& s) const {
    const Matrix& m = at(s.id);
    if (m.rows() != s.tokens.size()) {
      throw UserError("embeddings for sentence '" + s.id + "' have " + std::to_string(m.rows()) +
                      " rows but the sentence has " + std::to_string(s.tokens.size()) + " tokens");
    }
    return m;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, m] : vectors_) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, Matrix> vectors_;
};

/// Parses the JSON Lines interchange format:
/// {"id": str, "tokens": [str], "dim": int, "vectors": [[number x dim] x len(tokens)]}
inline EmbeddingStore load_embeddings(std::istream& in) {
  EmbeddingStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw UserError("embedding file line " + std::to_string(lineno) + ": " + e.what());
    }
    const auto where = "embedding file line " + std::to_string(lineno);
    if (!rec.contains("id") || !rec.contains("tokens") || !rec.contains("dim") || !rec.contains("vectors")) {
      throw UserError(where + ": record needs id, tokens, dim and vectors");
    }
    const std::string id = rec["id"].get<std::string>();
    const std::size_t n_tokens = rec["tokens"].size();
    const std::size_t dim = rec["dim"].get<std::size_t>();
    const auto& vecs = rec["vectors"];
    if (vecs.size() != n_tokens) {
      throw UserError(where + ": record '" + id + "' has " + std::to_string(vecs.size()) +
                      " vectors for " + std::to_string(n_tokens) + " tokens");
    }
    Matrix m(n_tokens, dim);
    for (std::size_t i = 0; i < n_tokens; ++i) {
      if (vecs[i].size() != dim) {
        throw UserError(where + ": record '" + id + "' vector " + std::to_string(i) + " has wrong dim");
      }
      for (std::size_t j = 0; j < dim; ++j) m(i, j) = vecs[i][j].get<double>();
    }
    store.add(id, std::move(m));
  }
  return store;
}

inline EmbeddingStore load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open embedding file '" + path + "'");
  return load_embeddings(in);
}

// Shortest decimal that round-trips the value at 32-bit precision.
inline std::string format_float32(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
  return buf;
}

inline void write_embedding_record(std::ostream& os, const Sentence& s, const Matrix& vectors) {
  nlohmann::json tokens = s.tokens;
  os << "{\"id\":" << nlohmann::json(s.id).dump() << ",\"tokens\":" << tokens.dump()
     << ",\"dim\":" << vectors.cols() << ",\"vectors\":[";
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    os << (i ? ",[" : "[");
    for (std::size_t j = 0; j < vectors.cols(); ++j) os << (j ? "," : "") << format_float32(vectors(i, j));
    os << "]";
  }
  os << "]}\n";
}

// ---------------------------------------------------------------------------
// Deterministic synthetic encoder

struct SynthConfig {
  std::size_t d_w = 32;
  std::uint64_t seed = 0;
  double anchor_norm = 1.0;
  double noise_ratio = 0.1;    // entity-token noise norm relative to anchor norm
  double role_ratio = 0.25;    // boundary-role component norm relative to anchor norm
  double other_norm = 1.0;     // norm of non-entity token vectors
  double anchor_overlap = 0.0; // share of a common direction mixed into every class anchor
  int modes_per_class = 1;     // > 1 gives multi-modal classes
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"d_w", c.d_w},
                     {"seed", c.seed},
                     {"anchor_norm", c.anchor_norm},
                     {"noise_ratio", c.noise_ratio},
                     {"role_ratio", c.role_ratio},
                     {"other_norm", c.other_norm},
                     {"anchor_overlap", c.anchor_overlap},
                     {"modes_per_class", c.modes_per_class}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.d_w = j.value("d_w", c.d_w);
  c.seed = j.value("seed", c.seed);
  c.anchor_norm = j.value("anchor_norm", c.anchor_norm);
  c.noise_ratio = j.value("noise_ratio", c.noise_ratio);
  c.role_ratio = j.value("role_ratio", c.role_ratio);
  c.other_norm = j.value("other_norm", c.other_norm);
  c.anchor_overlap = j.value("anchor_overlap", c.anchor_overlap);
  c.modes_per_class = j.value("modes_per_class", c.modes_per_class);
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::string_view tag, std::string_view key, std::uint64_t seed) {
  std::uint64_t h = fnv1a(tag);
  h = fnv1a(key, h ^ 0x9e3779b97f4a7c15ULL);
  return h ^ (seed * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL);
}

// Unit-norm gaussian direction, a pure function of (tag, key, seed).
inline std::vector<double> unit_direction(std::string_view tag, std::string_view key, std::uint64_t seed,
                                          std::size_t dim) {
  std::mt19937_64 rng(mix_seed(tag, key, seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double n2 = 0.0;
  for (double& x : v) {
    x = normal(rng);
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

inline constexpr std::array<std::string_view, 5> kRoles{"begin", "inside", "end", "single", "outside"};

// Orthonormal role directions. Every other synthetic direction is kept out of
// their span, so the role component is not masked by anchor or token variation.
inline const std::vector<std::vector<double>>& role_basis(std::uint64_t seed, std::size_t dim) {
  thread_local std::map<std::pair<std::uint64_t, std::size_t>, std::vector<std::vector<double>>> cache;
  auto [it, fresh] = cache.try_emplace({seed, dim});
  if (!fresh) return it->second;
  for (std::string_view role : kRoles) {
    auto v = unit_direction("role", role, seed, dim);
    for (const auto& b : it->second) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    it->second.push_back(std::move(v));
  }
  return it->second;
}

inline const std::vector<double>& role_direction(std::string_view role, std::uint64_t seed, std::size_t dim) {
  const auto& basis = role_basis(seed, dim);
  for (std::size_t k = 0; k < kRoles.size(); ++k)
    if (kRoles[k] == role) return basis[k];
  throw InvariantError("unknown synthetic role");
}

// Unit direction with the role subspace projected out.
inline std::vector<double> off_role_direction(std::string_view tag, std::string_view key, std::uint64_t seed,
                                              std::size_t dim) {
  auto v = unit_direction(tag, key, seed, dim);
  if (dim <= kRoles.size()) return v;
  for (const auto& b : role_basis(seed, dim)) {
    double dot = 0.0;
    for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
    for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
  }
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

}  // namespace detail

/// Class anchor for (label, mode): unit direction scaled to anchor_norm, with
/// an optional shared component controlling class overlap.
inline std::vector<double> class_anchor(const SynthConfig& cfg, const std::string& label, int mode) {
  const auto own = detail::off_role_direction("anchor", label + "#" + std::to_string(mode), cfg.seed, cfg.d_w);
  const auto shared = detail::off_role_direction("shared", "", cfg.seed, cfg.d_w);
  const double a = std::sqrt(cfg.anchor_overlap), b = std::sqrt(1.0 - cfg.anchor_overlap);
  std::vector<double> v(cfg.d_w);
  double n2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = a * shared[i] + b * own[i];
    n2 += v[i] * v[i];
  }
  const double s = cfg.anchor_norm / std::sqrt(n2);
  for (double& x : v) x *= s;
  return v;
}

/// Token vectors for one sentence. A token inside a gold span of class c gets
/// anchor(c) + a boundary-role vector (begin / inside / end / single) + seeded
/// noise; every other token gets a hash-seeded random vector plus the "outside"
/// role vector. Pure function of the sentence and the config.
inline Matrix synth_embed(const Sentence& s, const SynthConfig& cfg) {
  Matrix out(s.tokens.size(), cfg.d_w);
  std::vector<const LabeledSpan*> owner(s.tokens.size(), nullptr);
  for (const auto& g : s.spans)
    for (int i = g.span.l; i <= g.span.r; ++i)
      if (owner[i] == nullptr) owner[i] = &g;

  const double anchor = cfg.anchor_norm;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    auto row = out.row(i);
    const std::string& tok = s.tokens[i];
    if (owner[i] == nullptr) {
      const auto v = detail::off_role_direction("other", tok, cfg.seed, cfg.d_w);
      const auto& rv = detail::role_direction("outside", cfg.seed, cfg.d_w);
      for (std::size_t j = 0; j < cfg.d_w; ++j) row[j] = cfg.other_norm * v[j] + cfg.role_ratio * anchor * rv[j];
      continue;
    }
    const LabeledSpan& g = *owner[i];
    const int mode = cfg.modes_per_class > 1
                         ? static_cast<int>(detail::fnv1a(tok) % static_cast<std::uint64_t>(cfg.modes_per_class))
                         : 0;
    const auto a = class_anchor(cfg, g.label, mode);
    const int pos = static_cast<int>(i);
    const char* role = g.span.l == g.span.r ? "single" : pos == g.span.l ? "begin" : pos == g.span.r ? "end" : "inside";
    const auto& rv = detail::role_direction(role, cfg.seed, cfg.d_w);
    const auto nv = detail::off_role_direction("noise", tok, cfg.seed, cfg.d_w);
    for (std::size_t j = 0; j < cfg.d_w; ++j) {
      row[j] = a[j] + cfg.role_ratio * anchor * rv[j] + cfg.noise_ratio * anchor * nv[j];
    }
  }
  return out;
}

inline EmbeddingStore synth_store(const std::vector<Sentence>& sentences, const SynthConfig& cfg) {
  EmbeddingStore store;
  for (const auto& s : sentences) {
    if (!store.contains(s.id)) store.add(s.id, synth_embed(s, cfg));
  }
  return store;
}

// Generator for desk-scale labeled corpora.
struct SynthCorpusSpec {
  std::vector<std::string> classes;
  std::size_t sentences = 400;
  int min_tokens = 6;
  int max_tokens = 14;
  int max_entities = 3;
  int max_entity_len = 3;
  int vocab_per_class = 40;
  int other_vocab = 400;
  std::uint64_t seed = 0;
  std::string id_prefix = "syn";
};

inline std::vector<std::string> class_names(const std::string& prefix, int first, int count) {
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(prefix + std::to_string(first + i));
  return out;
}

/// Random non-overlapping entity placements over random filler tokens.
inline std::vector<Sentence> synthetic_corpus(const SynthCorpusSpec& spec) {
  if (spec.classes.empty()) throw UserError("synthetic corpus needs at least one class");
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> len_dist(spec.min_tokens, spec.max_tokens);
  std::uniform_int_distribution<int> n_ent(1, spec.max_entities);
  std::uniform_int_distribution<int> ent_len(1, spec.max_entity_len);
  std::uniform_int_distribution<std::size_t> cls(0, spec.classes.size() - 1);
  std::uniform_int_distribution<int> other_word(0, spec.other_vocab - 1);
  std::uniform_int_distribution<int> class_word(0, spec.vocab_per_class - 1);

  std::vector<Sentence> out;
  out.reserve(spec.sentences);
  for (std::size_t k = 0; k < spec.sentences; ++k) {
    Sentence s;
    s.id = spec.id_prefix + std::to_string(k);
    const int n = len_dist(rng);
    for (int i = 0; i < n; ++i) s.tokens.push_back("w" + std::to_string(other_word(rng)));
    const int want = n_ent(rng);
    std::vector<bool> used(n, false);
    for (int e = 0; e < want; ++e) {
      const int len = std::min(ent_len(rng), n);
      std::uniform_int_distribution<int> start(0, n - len);
      // a handful of placement attempts; crowded sentences just get fewer entities
      for (int attempt = 0; attempt < 8; ++attempt) {
        const int l = start(rng);
        bool free = true;
        // keep one filler token between entities so spans never touch
        for (int i = std::max(0, l - 1); i <= std::min(n - 1, l + len); ++i) free = free && !used[i];
        if (!free) continue;
        const std::string& label = spec.classes[cls(rng)];
        for (int i = l; i < l + len; ++i) {
          used[i] = true;
          s.tokens[i] = label + "_" + std::to_string(class_word(rng));
        }
        s.spans.push_back({{l, l + len - 1}, label});
        break;
      }
    }
    std::sort(s.spans.begin(), s.spans.end());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace spanmatch
