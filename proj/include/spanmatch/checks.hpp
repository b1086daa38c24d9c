#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spanmatch/autodiff.hpp"
#include "spanmatch/decoder.hpp"
#include "spanmatch/episodes.hpp"
#include "spanmatch/matcher.hpp"
#include "spanmatch/parameters.hpp"

// Self-verification suites: finite-difference gradient checks and
// beam-versus-exhaustive decoder equivalence.
namespace spanmatch::checks {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kMaxRelativeError = 1e-4;
inline constexpr double kGradientFloor = 1e-8;  // entries where both gradients are below this are skipped

struct GradCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t compared = 0;
  bool passed() const { return max_rel_error < kMaxRelativeError; }
};

using LossGraph = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Compares reverse-mode gradients of a scalar graph against central
/// differences over every input entry.
inline GradCheck check_graph(const std::string& name, const std::vector<Matrix>& inputs, const LossGraph& graph) {
  std::vector<Matrix> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
    ad::Var loss = graph(tape, leaves);
    tape.backward(loss);
    for (const auto& v : leaves) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Matrix>& xs) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& m : xs) leaves.push_back(tape.leaf(m));
    return ad::value(graph(tape, leaves))(0, 0);
  };
  GradCheck out{name};
  std::vector<Matrix> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      double& x = xs[k].values()[i];
      const double saved = x;
      x = saved + kFiniteDifferenceStep;
      const double up = eval(xs);
      x = saved - kFiniteDifferenceStep;
      const double down = eval(xs);
      x = saved;
      const double numeric = (up - down) / (2.0 * kFiniteDifferenceStep);
      const double a = analytic[k].values()[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (scale <= kGradientFloor) continue;
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / scale);
      ++out.compared;
    }
  }
  return out;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double spread = 1.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  Matrix m(r, c);
  for (double& v : m.values()) v = u(rng);
  return m;
}

// Projects a matrix-valued op to a scalar through fixed random weights, so
// that every output entry contributes distinctly.
inline LossGraph weighted(std::function<ad::Var(const std::vector<ad::Var>&)> op, std::uint64_t seed) {
  return [op = std::move(op), seed](ad::Tape&, const std::vector<ad::Var>& xs) {
    ad::Var y = op(xs);
    std::mt19937_64 rng(seed);
    const Matrix& v = ad::value(y);
    return ad::sum(ad::mul_const(y, random_matrix(rng, v.rows(), v.cols())));
  };
}

inline ParamVars param_vars_from(const std::vector<ad::Var>& xs, std::size_t d_w) {
  ParamVars pv;
  pv.span_proj = xs.at(0);
  pv.span_proj_left = ad::slice_rows(pv.span_proj, 0, d_w);
  pv.span_proj_right = ad::slice_rows(pv.span_proj, d_w, 2 * d_w);
  pv.isa = BlockVars{xs.at(1), xs.at(2), xs.at(3), xs.at(4)};
  pv.csa = BlockVars{xs.at(5), xs.at(6), xs.at(7), xs.at(8)};
  return pv;
}

inline std::vector<Matrix> flatten(const Parameters& p) {
  std::vector<Matrix> out;
  for (const auto& [name, m] : p.named()) out.push_back(*m);
  return out;
}

// Toy episode for the end-to-end check: d_w = 8, N = 2, one query.
struct ToyProblem {
  ModelConfig model;
  Episode episode;
  EmbeddingStore store;
  Parameters params;
};

inline ToyProblem toy_problem(std::uint64_t seed = 0) {
  ToyProblem t;
  t.model.d_w = 8;
  t.model.d = 6;
  t.model.dropout = 0.0;
  SynthCorpusSpec cs;
  cs.classes = {"A", "B"};
  cs.sentences = 12;
  cs.min_tokens = 4;
  cs.max_tokens = 6;
  cs.max_entities = 2;
  cs.max_entity_len = 2;
  cs.seed = seed + 11;
  cs.id_prefix = "toy";
  const auto corpus = synthetic_corpus(cs);
  EpisodeSpec es;
  es.n_way = 2;
  es.k_shot = 1;
  es.shot_mode = ShotMode::kExact;
  es.seed = seed;
  t.episode = sample_episode(corpus, es);
  SynthConfig sc;
  sc.d_w = 8;
  sc.seed = seed;
  t.store = synth_store(corpus, sc);
  t.params = init_parameters(t.model, seed + 1);
  // non-trivial normalization parameters, so their gradients are exercised
  std::mt19937_64 rng(seed + 2);
  for (auto* m : {&t.params.isa.ln_gain, &t.params.csa.ln_gain})
    for (double& v : m->values()) v = 1.0 + std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  for (auto* m : {&t.params.isa.ln_bias, &t.params.csa.ln_bias})
    for (double& v : m->values()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
  return t;
}

/// Every differentiable op, each module stage, and the episode loss.
inline std::vector<GradCheck> gradient_checks(std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  auto R = [&rng](std::size_t r, std::size_t c) { return random_matrix(rng, r, c); };
  std::vector<GradCheck> out;
  std::uint64_t w = seed * 1000 + 1;
  auto add = [&](const std::string& name, std::vector<Matrix> in, std::function<ad::Var(const std::vector<ad::Var>&)> op) {
    out.push_back(check_graph(name, in, weighted(std::move(op), w++)));
  };
  using V = std::vector<ad::Var>;

  add("matmul", {R(3, 4), R(4, 2)}, [](const V& x) { return ad::matmul(x[0], x[1]); });
  add("matmul_bt", {R(3, 4), R(5, 4)}, [](const V& x) { return ad::matmul_bt(x[0], x[1]); });
  add("add", {R(3, 4), R(3, 4)}, [](const V& x) { return ad::add(x[0], x[1]); });
  add("sub", {R(3, 4), R(3, 4)}, [](const V& x) { return ad::sub(x[0], x[1]); });
  add("scale", {R(3, 4)}, [](const V& x) { return ad::scale(x[0], -1.7); });
  {
    Matrix mask = R(3, 4);
    add("mul_const", {R(3, 4)}, [mask](const V& x) { return ad::mul_const(x[0], mask); });
  }
  add("gelu", {random_matrix(rng, 3, 4, 3.0)}, [](const V& x) { return ad::gelu(x[0]); });
  add("layer_norm", {R(3, 5), R(1, 5), R(1, 5)}, [](const V& x) { return ad::layer_norm(x[0], x[1], x[2]); });
  add("softmax_rows", {random_matrix(rng, 3, 4, 2.0)}, [](const V& x) { return ad::softmax_rows(x[0]); });
  add("log_softmax_rows", {random_matrix(rng, 3, 4, 2.0)}, [](const V& x) { return ad::log_softmax_rows(x[0]); });
  add("gather_rows", {R(4, 3)}, [](const V& x) { return ad::gather_rows(x[0], {2, 0, 2, 3}); });
  add("slice_rows", {R(5, 3)}, [](const V& x) { return ad::slice_rows(x[0], 1, 4); });
  add("vstack", {R(2, 3), R(3, 3)}, [](const V& x) { return ad::vstack(std::vector<ad::Var>{x[0], x[1]}); });
  add("hstack", {R(3, 2), R(3, 1)}, [](const V& x) { return ad::hstack(std::vector<ad::Var>{x[0], x[1]}); });
  add("column", {R(3, 4)}, [](const V& x) { return ad::column(x[0], 2); });
  add("row_dot", {R(3, 4), R(3, 4)}, [](const V& x) { return ad::row_dot(x[0], x[1]); });
  add("scale_rows", {R(3, 4), R(3, 1)}, [](const V& x) { return ad::scale_rows(x[0], x[1]); });
  add("row_norm", {R(3, 4)}, [](const V& x) { return ad::row_norm(x[0]); });
  add("row_sqnorm", {R(3, 4)}, [](const V& x) { return ad::row_sqnorm(x[0]); });
  add("pick", {R(3, 4)}, [](const V& x) { return ad::pick(x[0], {1, 3, 0}); });
  add("sum", {R(3, 4)}, [](const V& x) { return ad::sum(x[0]); });
  add("mean", {R(3, 4)}, [](const V& x) { return ad::mean(x[0]); });
  add("attention", {R(3, 4), R(5, 4)}, [](const V& x) { return ad::attend(x[0], x[1]); });

  const std::size_t d = 4, ff = 6;
  auto block_in = [&]() { return std::vector<Matrix>{R(d, ff), R(ff, d), R(1, d), R(1, d)}; };
  {
    std::vector<Matrix> in{R(3, d), R(3, d)};
    for (auto& m : block_in()) in.push_back(m);
    add("residual_ffn", in, [](const V& x) { return residual_ffn(x[0], x[1], BlockVars{x[2], x[3], x[4], x[5]}); });
  }
  {
    std::vector<Matrix> in{R(4, d)};
    for (auto& m : block_in()) in.push_back(m);
    add("intra_span_attention", in, [](const V& x) {
      return intra_span_attention(x[0], BlockVars{x[1], x[2], x[3], x[4]}, true);
    });
  }
  {
    std::vector<Matrix> in{R(3, d), R(5, d)};
    for (auto& m : block_in()) in.push_back(m);
    add("cross_span_attention", in, [](const V& x) {
      auto [q, s] = cross_span_attention(x[0], x[1], BlockVars{x[2], x[3], x[4], x[5]}, true);
      return ad::vstack(std::vector<ad::Var>{q, s});
    });
  }
  add("instance_span_attention", {R(3, d), R(4, d)}, [](const V& x) { return instance_prototypes(x[0], x[1], true); });
  add("instance_mean", {R(3, d), R(4, d)}, [](const V& x) { return instance_prototypes(x[0], x[1], false); });
  add("prototype_attention", {R(3, d), R(3, d), R(3, d), R(3, d)}, [](const V& x) {
    return prototype_attention(x[0], std::vector<ad::Var>{x[1], x[2], x[3]});
  });
  add("distance_logits", {R(3, d), R(3, d), R(3, d)}, [](const V& x) {
    return distance_logits(x[0], std::vector<ad::Var>{x[1], x[2]}, false);
  });
  add("distance_logits_squared", {R(3, d), R(3, d), R(3, d)}, [](const V& x) {
    return distance_logits(x[0], std::vector<ad::Var>{x[1], x[2]}, true);
  });
  {
    const Matrix tokens = R(4, 3);
    const std::vector<Span> spans = enumerate_spans(4, 2);
    add("span_initialization", {R(6, 3)}, [tokens, spans](const V& x) {
      ParamVars pv;
      pv.span_proj = x[0];
      pv.span_proj_left = ad::slice_rows(x[0], 0, 3);
      pv.span_proj_right = ad::slice_rows(x[0], 3, 6);
      return init_span_reps(*x[0].tape, pv, tokens, spans);
    });
  }

  const ToyProblem toy = toy_problem(seed);
  out.push_back(check_graph("episode_loss", flatten(toy.params), [&toy](ad::Tape& tape, const V& x) {
    const ParamVars pv = param_vars_from(x, toy.model.d_w);
    EpisodeForward fwd(tape, pv, toy.model, toy.episode, toy.store);
    return episode_loss_var(fwd);
  }));
  return out;
}

// ---------------------------------------------------------------------------
// Decoder equivalence

struct OracleReport {
  std::size_t instances = 0;
  std::size_t matches = 0;
  std::vector<std::string> mismatches;  // first few, for diagnostics
  bool passed() const { return matches == instances; }
};

// Random candidate list and decoder settings; mixes the two presets with
// arbitrary thresholds.
inline std::pair<std::vector<ScoredSpan>, DecoderConfig> random_decode_instance(std::mt19937_64& rng,
                                                                                std::size_t max_candidates) {
  std::uniform_int_distribution<std::size_t> count(1, max_candidates);
  std::uniform_int_distribution<int> left(0, 9), len(1, 4), label(0, 2), preset(0, 2);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::vector<ScoredSpan> cands;
  const std::size_t n = count(rng);
  while (cands.size() < n) {
    const int l = left(rng);
    ScoredSpan s{{l, l + len(rng) - 1}, std::string(1, static_cast<char>('A' + label(rng))), score(rng)};
    const bool dup = std::any_of(cands.begin(), cands.end(), [&](const ScoredSpan& c) { return c.span == s.span; });
    if (!dup) cands.push_back(s);
  }
  DecoderConfig cfg;
  switch (preset(rng)) {
    case 0: cfg = DecoderConfig::flat(); break;
    case 1: cfg = DecoderConfig::nested(); break;
    default:
      cfg.delta = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
      cfg.iou_threshold = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
      cfg.decay = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
  }
  return {cands, cfg};
}

inline OracleReport decoder_oracle_check(std::size_t instances, std::uint64_t seed = 0, std::size_t max_candidates = 7,
                                         PathScore path_score = PathScore::kSum) {
  std::mt19937_64 rng(seed);
  OracleReport rep;
  for (std::size_t i = 0; i < instances; ++i) {
    auto [cands, cfg] = random_decode_instance(rng, max_candidates);
    cfg.beam_size = 1 << max_candidates;
    cfg.path_score = path_score;
    const DecodeResult beam = bsnms(cands, cfg);
    const DecodeResult oracle = exhaustive_oracle(cands, cfg);
    ++rep.instances;
    if (beam.accepted == oracle.accepted) {
      ++rep.matches;
    } else if (rep.mismatches.size() < 5) {
      rep.mismatches.push_back("instance " + std::to_string(i) + ": beam kept " + std::to_string(beam.accepted.size()) +
                               " spans, oracle kept " + std::to_string(oracle.accepted.size()));
    }
  }
  return rep;
}

}  // namespace spanmatch::checks
