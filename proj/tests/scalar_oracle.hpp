#pragma once
// Straight-line scalar reimplementation of the forward pass, written against
// nested std::vector only so tests can compare the modular build to it.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "spanmatch/corpus.hpp"
#include "spanmatch/episodes.hpp"
#include "spanmatch/matrix.hpp"
#include "spanmatch/parameters.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const spanmatch::Matrix& m) {
  Mat out(m.rows(), Vec(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline double dot(const Vec& a, const Vec& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

inline Vec softmax(const Vec& x) {
  long double mx = *std::max_element(x.begin(), x.end()), z = 0;
  std::vector<long double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(static_cast<long double>(x[i]) - mx);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / z);
  return out;
}

// phi(q, K) = sum_j softmax(q . K_j) K_j
inline Vec phi(const Vec& q, const Mat& keys) {
  Vec scores;
  for (const auto& k : keys) scores.push_back(dot(q, k));
  const Vec w = softmax(scores);
  Vec out(q.size(), 0.0);
  for (std::size_t j = 0; j < keys.size(); ++j)
    for (std::size_t i = 0; i < q.size(); ++i) out[i] += w[j] * keys[j][i];
  return out;
}

inline Vec mean_rows(const Mat& rows) {
  Vec out(rows[0].size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i] / static_cast<double>(rows.size());
  return out;
}

inline Vec vec_mat(const Vec& x, const Mat& w) {
  Vec out(w[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[i] * w[i][j];
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Vec layer_norm(const Vec& x, const Vec& gain, const Vec& bias) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * gain[i] + bias[i];
  return out;
}

// LayerNorm(x + GELU(a W1) W2)
inline Vec ffn(const Vec& x, const Vec& a, const spanmatch::BlockParams& b) {
  Vec h = vec_mat(a, to_mat(b.w1));
  for (double& v : h) v = gelu(v);
  const Vec f = vec_mat(h, to_mat(b.w2));
  Vec s(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s[i] = x[i] + f[i];
  return layer_norm(s, to_mat(b.ln_gain)[0], to_mat(b.ln_bias)[0]);
}

struct SentenceSpans {
  std::vector<spanmatch::Span> spans;
  Mat reps;
};

inline SentenceSpans initial_spans(const spanmatch::Sentence& s, const Mat& tokens, const spanmatch::Parameters& p,
                                   int max_len, bool with_long_gold) {
  SentenceSpans out;
  const Mat w = to_mat(p.span_proj);
  const std::size_t dw = tokens[0].size();
  const std::size_t d = w[0].size();
  const int n = static_cast<int>(tokens.size());
  for (int l = 0; l < n; ++l)
    for (int r = l; r < n && r - l + 1 <= max_len; ++r) out.spans.push_back({l, r});
  if (with_long_gold)
    for (const auto& g : s.spans)
      if (g.span.r - g.span.l + 1 > max_len &&
          std::find(out.spans.begin(), out.spans.end(), g.span) == out.spans.end())
        out.spans.push_back(g.span);
  for (const auto& sp : out.spans) {
    Vec rep(d, 0.0);
    for (std::size_t i = 0; i < dw; ++i)
      for (std::size_t j = 0; j < d; ++j)
        rep[j] += tokens[sp.l][i] * w[i][j] + tokens[sp.r][i] * w[dw + i][j];
    out.reps.push_back(rep);
  }
  return out;
}

inline Mat isa(const Mat& reps, const spanmatch::Parameters& p) {
  Mat out;
  for (const auto& r : reps) out.push_back(ffn(r, phi(r, reps), p.isa));
  return out;
}

// 0 gold, 1 O1 (disjoint), 2 O2 (inside an entity), 3 O3 (partial overlap)
inline int o_kind(spanmatch::Span s, const std::vector<spanmatch::LabeledSpan>& gold) {
  for (const auto& g : gold)
    if (g.span.l == s.l && g.span.r == s.r) return 0;
  bool disjoint = true;
  for (const auto& g : gold)
    if (!(s.r < g.span.l || s.l > g.span.r)) disjoint = false;
  if (disjoint) return 1;
  for (const auto& g : gold)
    if (s.l >= g.span.l && s.r <= g.span.r) return 2;
  return 3;
}

struct Options {
  int max_len = 8;
  bool use_isa = true, use_csa = true, use_insa = true, use_o_partition = true;
};

// Per query, per enumerated span: the distribution over [O, class_1..class_N].
inline std::vector<Mat> distributions(const spanmatch::Episode& ep, const spanmatch::EmbeddingStore& store,
                                      const spanmatch::Parameters& p, const Options& opt) {
  Mat support;
  std::vector<Mat> cls(ep.classes.size());
  Mat o_sub[3];
  std::vector<std::pair<int, std::size_t>> group;  // (class index or -kind, row)
  for (const auto& s : ep.support) {
    auto ss = initial_spans(s, to_mat(store.at(s.id)), p, opt.max_len, true);
    Mat reps = opt.use_isa ? isa(ss.reps, p) : ss.reps;
    for (std::size_t i = 0; i < ss.spans.size(); ++i) {
      const int kind = o_kind(ss.spans[i], s.spans);
      if (kind == 0) {
        std::string label;
        for (const auto& g : s.spans)
          if (g.span == ss.spans[i]) {
            label = g.label;
            break;
          }
        const auto c = static_cast<int>(std::find(ep.classes.begin(), ep.classes.end(), label) - ep.classes.begin());
        group.push_back({c, support.size()});
      } else {
        group.push_back({-kind, support.size()});
      }
      support.push_back(reps[i]);
    }
  }

  std::vector<Mat> out;
  for (const auto& q : ep.queries) {
    auto qs = initial_spans(q, to_mat(store.at(q.id)), p, opt.max_len, false);
    Mat qr = opt.use_isa ? isa(qs.reps, p) : qs.reps;
    Mat sr = support;
    if (opt.use_csa) {
      Mat qn, sn;
      for (const auto& r : qr) qn.push_back(ffn(r, phi(r, support), p.csa));
      for (const auto& r : support) sn.push_back(ffn(r, phi(r, qr), p.csa));
      qr = qn;
      sr = sn;
    }
    std::vector<Mat> members(ep.classes.size());
    Mat o_members[3], o_all;
    for (const auto& [g, row] : group) {
      if (g >= 0) {
        members[static_cast<std::size_t>(g)].push_back(sr[row]);
      } else {
        o_members[-g - 1].push_back(sr[row]);
        o_all.push_back(sr[row]);
      }
    }
    auto proto = [&](const Vec& qv, const Mat& rows) { return opt.use_insa ? phi(qv, rows) : mean_rows(rows); };
    Mat dist;
    for (const auto& qv : qr) {
      Mat zs;
      if (opt.use_o_partition) {
        Mat subs;
        for (const auto& m : o_members)
          if (!m.empty()) subs.push_back(proto(qv, m));
        zs.push_back(phi(qv, subs));
      } else {
        zs.push_back(proto(qv, o_all));
      }
      for (const auto& m : members) zs.push_back(proto(qv, m));
      Vec logits;
      for (const auto& z : zs) {
        double s = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) s += (qv[i] - z[i]) * (qv[i] - z[i]);
        logits.push_back(-std::sqrt(s));
      }
      dist.push_back(softmax(logits));
    }
    out.push_back(dist);
  }
  return out;
}

// Mean over queries of the mean per-span negative log-likelihood of gold.
inline double loss(const spanmatch::Episode& ep, const std::vector<Mat>& dists, int max_len) {
  double total = 0.0;
  for (std::size_t qi = 0; qi < ep.queries.size(); ++qi) {
    const auto& q = ep.queries[qi];
    double sum = 0.0;
    std::size_t k = 0;
    const int n = q.size();
    for (int l = 0; l < n; ++l)
      for (int r = l; r < n && r - l + 1 <= max_len; ++r, ++k) {
        std::size_t gold = 0;
        for (const auto& g : q.spans)
          if (g.span.l == l && g.span.r == r) {
            const auto it = std::find(ep.classes.begin(), ep.classes.end(), g.label);
            if (it != ep.classes.end()) gold = 1 + static_cast<std::size_t>(it - ep.classes.begin());
            break;
          }
        sum -= std::log(dists[qi][k][gold]);
      }
    total += sum / static_cast<double>(k);
  }
  return total / static_cast<double>(ep.queries.size());
}

}  // namespace oracle
