#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spanmatch/autodiff.hpp"
#include "spanmatch/corpus.hpp"
#include "spanmatch/layers.hpp"
#include "spanmatch/parameters.hpp"

namespace spanmatch {

/// All (l, r) with r - l + 1 <= max_len, lexicographic.
inline std::vector<Span> enumerate_spans(int n_tokens, int max_len) {
  if (n_tokens < 1) throw UserError("cannot enumerate spans of an empty sentence");
  if (max_len < 1) throw UserError("max span length must be >= 1");
  std::vector<Span> out;
  for (int l = 0; l < n_tokens; ++l)
    for (int r = l; r < n_tokens && r - l + 1 <= max_len; ++r) out.push_back({l, r});
  return out;
}

inline std::size_t expected_span_count(int n, int max_len) {
  std::size_t total = 0;
  for (int len = 1; len <= std::min(n, max_len); ++len) total += static_cast<std::size_t>(n - len + 1);
  return total;
}

struct SpanList {
  std::vector<Span> spans;
  std::vector<bool> forced;  // gold spans longer than max_len appended for support sentences
};

inline SpanList enumerate_sentence_spans(const Sentence& s, int max_len, bool include_long_gold) {
  SpanList out;
  out.spans = enumerate_spans(s.size(), max_len);
  out.forced.assign(out.spans.size(), false);
  if (include_long_gold) {
    std::vector<Span> extra;
    for (const auto& g : s.spans)
      if (g.span.length() > max_len) extra.push_back(g.span);
    std::sort(extra.begin(), extra.end());
    extra.erase(std::unique(extra.begin(), extra.end()), extra.end());
    for (const Span& sp : extra) {
      out.spans.push_back(sp);
      out.forced.push_back(true);
    }
  }
  return out;
}

// [h_l ; h_r] W_s for every span, computed as h_l W_left + h_r W_right.
inline ad::Var init_span_reps(ad::Tape& tape, const ParamVars& pv, const Matrix& tokens,
                              const std::vector<Span>& spans, const Dropout& dropout = {}) {
  if (tokens.cols() != ad::value(pv.span_proj_left).rows()) {
    throw InvariantError("token embedding width " + std::to_string(tokens.cols()) +
                         " does not match the model's d_w " +
                         std::to_string(ad::value(pv.span_proj_left).rows()));
  }
  ad::Var h = tape.constant(tokens);
  ad::Var left = ad::matmul(h, pv.span_proj_left);
  ad::Var right = ad::matmul(h, pv.span_proj_right);
  std::vector<std::size_t> ls, rs;
  ls.reserve(spans.size());
  rs.reserve(spans.size());
  for (const Span& sp : spans) {
    ls.push_back(static_cast<std::size_t>(sp.l));
    rs.push_back(static_cast<std::size_t>(sp.r));
  }
  return dropout(ad::add(ad::gather_rows(left, std::move(ls)), ad::gather_rows(right, std::move(rs))));
}

// Each span attends over every span of its own sentence (itself included).
inline ad::Var intra_span_attention(ad::Var reps, const BlockVars& isa, bool enabled, const Dropout& dropout = {}) {
  if (!enabled) return reps;
  return residual_ffn(reps, ad::attend(reps, reps), isa, dropout);
}

// Both directions read the pre-CSA snapshot of each side.
inline std::pair<ad::Var, ad::Var> cross_span_attention(ad::Var query, ad::Var support, const BlockVars& csa,
                                                        bool enabled, const Dropout& dropout = {}) {
  if (ad::value(support).rows() == 0) throw InvariantError("cross span attention: empty support span set");
  if (!enabled) return {query, support};
  ad::Var q_hat = ad::attend(query, support);
  ad::Var s_hat = ad::attend(support, query);
  return {residual_ffn(query, q_hat, csa, dropout), residual_ffn(support, s_hat, csa, dropout)};
}

// ---------------------------------------------------------------------------
// Value-level API over SpanBatch (evaluation mode, no tape kept).

struct SpanBatch {
  std::string sentence_id;
  std::vector<Span> spans;
  std::vector<bool> forced;
  Matrix reps;  // spans.size() x d
};

inline SpanBatch init_spans(const Sentence& s, const EmbeddingStore& store, const Parameters& params,
                            const ModelConfig& cfg, bool is_support = false) {
  SpanList list = enumerate_sentence_spans(s, static_cast<int>(cfg.max_span_len), is_support);
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  Matrix reps = ad::value(init_span_reps(tape, pv, store.lookup(s), list.spans));
  return SpanBatch{s.id, std::move(list.spans), std::move(list.forced), std::move(reps)};
}

inline SpanBatch intra_span_attention(const SpanBatch& batch, const Parameters& params, const ModelConfig& cfg) {
  if (batch.spans.empty()) throw InvariantError("intra span attention on an empty batch");
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  SpanBatch out = batch;
  out.reps = ad::value(intra_span_attention(tape.constant(batch.reps), pv.isa, cfg.use_isa));
  return out;
}

/// One query sentence against the concatenation of all support batches.
inline std::pair<SpanBatch, std::vector<SpanBatch>> cross_span_attention(const SpanBatch& query,
                                                                         const std::vector<SpanBatch>& support,
                                                                         const Parameters& params,
                                                                         const ModelConfig& cfg) {
  std::vector<Matrix> parts;
  for (const auto& b : support) parts.push_back(b.reps);
  Matrix stacked = vstack(parts);
  if (stacked.rows() == 0) throw InvariantError("cross span attention: empty support span set");
  ad::Tape tape;
  const ParamVars pv = bind(tape, params);
  auto [q, s] = cross_span_attention(tape.constant(query.reps), tape.constant(stacked), pv.csa, cfg.use_csa);
  SpanBatch q_out = query;
  q_out.reps = ad::value(q);
  std::vector<SpanBatch> s_out = support;
  std::size_t row = 0;
  const Matrix& sv = ad::value(s);
  for (auto& b : s_out) {
    for (std::size_t i = 0; i < b.reps.rows(); ++i, ++row) {
      auto src = sv.row(row);
      std::copy(src.begin(), src.end(), b.reps.row(i).begin());
    }
  }
  return {std::move(q_out), std::move(s_out)};
}

}  // namespace spanmatch
