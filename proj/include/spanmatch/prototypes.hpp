#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <vector>

#include "spanmatch/autodiff.hpp"
#include "spanmatch/corpus.hpp"
#include "spanmatch/error.hpp"
#include "spanmatch/layers.hpp"
#include "spanmatch/parameters.hpp"

namespace spanmatch {

// kGold marks spans that exactly match an annotated span. Non-gold spans are
// O1 (disjoint from every gold span), O2 (inside some gold span) or O3
// (crossing a gold boundary).
enum class SpanKind { kGold, kO1, kO2, kO3 };

inline SpanKind classify_o_span(Span s, std::span<const LabeledSpan> gold) {
  for (const auto& g : gold)
    if (g.span == s) return SpanKind::kGold;
  bool disjoint = true;
  for (const auto& g : gold) disjoint = disjoint && (s.r < g.span.l || s.l > g.span.r);
  if (disjoint) return SpanKind::kO1;
  for (const auto& g : gold)
    if (s.l >= g.span.l && s.r <= g.span.r) return SpanKind::kO2;
  return SpanKind::kO3;
}

inline std::vector<SpanKind> partition_o_spans(const Sentence& s, const std::vector<Span>& spans) {
  std::vector<SpanKind> out;
  out.reserve(spans.size());
  for (const Span& sp : spans) out.push_back(classify_o_span(sp, s.spans));
  return out;
}

inline int o_subclass_index(SpanKind k) {
  switch (k) {
    case SpanKind::kO1: return 0;
    case SpanKind::kO2: return 1;
    case SpanKind::kO3: return 2;
    default: return -1;
  }
}

// Class prototype for every query row: attention over the class rows (INSA),
// or their plain mean when INSA is ablated.
inline ad::Var instance_prototypes(ad::Var queries, ad::Var class_rows, bool use_insa) {
  const std::size_t k = ad::value(class_rows).rows();
  if (k == 0) throw InvariantError("instance span attention over an empty class");
  if (use_insa) return ad::attend(queries, class_rows);
  const std::size_t b = ad::value(queries).rows();
  ad::Var avg = queries.tape->constant(Matrix(b, k, 1.0 / static_cast<double>(k)));
  return ad::matmul(avg, class_rows);
}

// Row-wise attention of query row m over {Z_j[m]}_j (Prototypical Span Attention).
inline ad::Var prototype_attention(ad::Var queries, std::span<const ad::Var> candidates) {
  if (candidates.empty()) throw InvariantError("prototype attention over zero candidates");
  if (candidates.size() == 1) return candidates.front();
  std::vector<ad::Var> scores;
  for (const auto& z : candidates) scores.push_back(ad::row_dot(queries, z));
  ad::Var weights = ad::softmax_rows(ad::hstack(scores));
  ad::Var acc = ad::scale_rows(candidates[0], ad::column(weights, 0));
  for (std::size_t j = 1; j < candidates.size(); ++j) {
    acc = ad::add(acc, ad::scale_rows(candidates[j], ad::column(weights, j)));
  }
  return acc;
}

// Row indices into the stacked support span matrix, grouped for prototype building.
struct SupportGroups {
  std::vector<std::vector<std::size_t>> classes;  // one list per episode class
  std::array<std::vector<std::size_t>, 3> o_sub;  // O1, O2, O3
  std::vector<std::size_t> o_all;
};

// Per-query-row prototypes: returns [z_o, z_1, ..., z_N], each B_q x d.
inline std::vector<ad::Var> build_prototypes(ad::Var queries, ad::Var support, const SupportGroups& groups,
                                             const ModelConfig& cfg) {
  std::vector<ad::Var> protos;
  if (groups.o_all.empty()) throw UserError("no-O-prototype: the support set has no O spans");
  if (cfg.use_o_partition) {
    std::vector<ad::Var> subs;
    for (const auto& rows : groups.o_sub) {
      if (rows.empty()) continue;
      subs.push_back(instance_prototypes(queries, ad::gather_rows(support, rows), cfg.use_insa));
    }
    protos.push_back(prototype_attention(queries, subs));
  } else {
    protos.push_back(instance_prototypes(queries, ad::gather_rows(support, groups.o_all), cfg.use_insa));
  }
  for (const auto& rows : groups.classes) {
    if (rows.empty()) throw UserError("an episode class has no support spans");
    protos.push_back(instance_prototypes(queries, ad::gather_rows(support, rows), cfg.use_insa));
  }
  return protos;
}

// ---------------------------------------------------------------------------
// Value-level API for one query span.

struct PrototypeSet {
  std::vector<std::vector<double>> entities;  // z_1..z_N
  std::vector<double> o;                      // z_o
  std::array<bool, 3> o_sub_nonempty{};
};

inline std::vector<double> instance_span_attention(std::span<const double> query, const Matrix& class_reps,
                                                   bool use_insa = true) {
  if (class_reps.rows() == 0) throw InvariantError("instance span attention over an empty class");
  ad::Tape tape;
  const Matrix& out = ad::value(
      instance_prototypes(tape.constant(Matrix::row_vector(query)), tape.constant(class_reps), use_insa));
  return {out.values().begin(), out.values().end()};
}

/// class_reps: one matrix per episode class. o_sub_reps: O1/O2/O3 rows (may be
/// empty; empty sub-classes are skipped).
inline PrototypeSet build_prototype_set(std::span<const double> query, const std::vector<Matrix>& class_reps,
                                        const std::array<Matrix, 3>& o_sub_reps, const ModelConfig& cfg) {
  std::vector<Matrix> parts;
  SupportGroups groups;
  std::size_t row = 0;
  auto append = [&](const Matrix& m, std::vector<std::size_t>& idx) {
    for (std::size_t i = 0; i < m.rows(); ++i) idx.push_back(row++);
    if (m.rows() > 0) parts.push_back(m);
  };
  groups.classes.resize(class_reps.size());
  for (std::size_t c = 0; c < class_reps.size(); ++c) append(class_reps[c], groups.classes[c]);
  for (std::size_t j = 0; j < 3; ++j) {
    append(o_sub_reps[j], groups.o_sub[j]);
    groups.o_all.insert(groups.o_all.end(), groups.o_sub[j].begin(), groups.o_sub[j].end());
  }
  std::sort(groups.o_all.begin(), groups.o_all.end());
  if (parts.empty()) throw UserError("no-O-prototype: the support set has no O spans");

  ad::Tape tape;
  ad::Var q = tape.constant(Matrix::row_vector(query));
  ad::Var support = tape.constant(vstack(parts));
  const auto protos = build_prototypes(q, support, groups, cfg);
  PrototypeSet out;
  const Matrix& o = ad::value(protos[0]);
  out.o.assign(o.values().begin(), o.values().end());
  for (std::size_t c = 1; c < protos.size(); ++c) {
    const Matrix& z = ad::value(protos[c]);
    out.entities.emplace_back(z.values().begin(), z.values().end());
  }
  for (std::size_t j = 0; j < 3; ++j) out.o_sub_nonempty[j] = o_sub_reps[j].rows() > 0;
  return out;
}

}  // namespace spanmatch
