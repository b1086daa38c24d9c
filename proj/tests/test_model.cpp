#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "scalar_oracle.hpp"
#include "spanmatch/matcher.hpp"
#include "spanmatch/trainer.hpp"

using namespace spanmatch;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.values()) v = n(rng);
  return m;
}

Parameters random_params(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters p = init_parameters(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (Matrix* m : {&p.isa.ln_gain, &p.isa.ln_bias, &p.csa.ln_gain, &p.csa.ln_bias})
    for (double& v : m->values()) v += u(rng);
  return p;
}

void expect_rows_near(const Matrix& got, const oracle::Mat& want, double tol) {
  ASSERT_EQ(got.rows(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].size(); ++j) EXPECT_NEAR(got(i, j), want[i][j], tol) << i << "," << j;
}

}  // namespace

TEST(Spans, EnumerationCounts) {
  EXPECT_EQ(enumerate_spans(3, 8).size(), 6u);
  EXPECT_EQ(enumerate_spans(10, 2).size(), 19u);
  const auto unit = enumerate_spans(5, 1);
  ASSERT_EQ(unit.size(), 5u);
  for (const auto& s : unit) EXPECT_EQ(s.l, s.r);
  for (int n = 1; n < 20; ++n) EXPECT_EQ(enumerate_spans(n, 8).size(), expected_span_count(n, 8));
}

TEST(Spans, SupportKeepsOverlongGold) {
  Sentence s{"s", std::vector<std::string>(12, "t"), {{{0, 10}, "X"}}};
  const auto list = enumerate_sentence_spans(s, 8, true);
  EXPECT_EQ(list.spans.back(), (Span{0, 10}));
  EXPECT_TRUE(list.forced.back());
  EXPECT_EQ(enumerate_sentence_spans(s, 8, false).spans.size(), expected_span_count(12, 8));
}

TEST(SpanInit, IdentityLeftProjectionPicksLeftToken) {
  ModelConfig cfg;
  cfg.d_w = 3;
  cfg.d = 3;
  Parameters p = init_parameters(cfg, 0);
  p.span_proj = Matrix(6, 3, 0.0);
  for (int i = 0; i < 3; ++i) p.span_proj(i, i) = 1.0;
  Sentence s{"a", {"x", "y", "z", "w"}, {}};
  EmbeddingStore store;
  const Matrix tokens = random_matrix(4, 3, 1);
  store.add("a", tokens);
  const SpanBatch b = init_spans(s, store, p, cfg);
  for (std::size_t k = 0; k < b.spans.size(); ++k)
    for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(b.reps(k, j), tokens(b.spans[k].l, j));
}

TEST(SpanInit, ZeroProjectionGivesZeros) {
  ModelConfig cfg;
  cfg.d_w = 3;
  cfg.d = 2;
  Parameters p = init_parameters(cfg, 0);
  p.span_proj = Matrix(6, 2, 0.0);
  Sentence s{"a", {"x", "y"}, {}};
  EmbeddingStore store;
  store.add("a", random_matrix(2, 3, 2));
  const auto init = init_spans(s, store, p, cfg);
  for (double v : init.reps.values()) EXPECT_EQ(v, 0.0);
}

TEST(SpanInit, MatchesScalarRecomputation) {
  ModelConfig cfg;
  cfg.d_w = 4;
  cfg.d = 3;
  const Parameters p = random_params(cfg, 3);
  Sentence s{"a", {"x", "y", "z"}, {}};
  EmbeddingStore store;
  store.add("a", random_matrix(3, 4, 4));
  const auto want = oracle::initial_spans(s, oracle::to_mat(store.at("a")), p, 8, false);
  expect_rows_near(init_spans(s, store, p, cfg).reps, want.reps, 1e-12);
}

TEST(IntraSpan, SingleSpanIsResidualFfnOfItself) {
  ModelConfig cfg;
  cfg.d = 3;
  cfg.d_w = 2;
  const Parameters p = random_params(cfg, 5);
  SpanBatch b{"x", {{0, 0}}, {false}, random_matrix(1, 3, 6)};
  const SpanBatch out = intra_span_attention(b, p, cfg);
  const auto row = b.reps.row(0);
  const std::vector<double> x(row.begin(), row.end());
  expect_rows_near(out.reps, {oracle::ffn(x, x, p.isa)}, 1e-12);
}

TEST(IntraSpan, DisabledIsIdentity) {
  ModelConfig cfg;
  cfg.d = 3;
  cfg.d_w = 2;
  cfg.use_isa = false;
  const Parameters p = random_params(cfg, 5);
  SpanBatch b{"x", {{0, 0}, {0, 1}}, {false, false}, random_matrix(2, 3, 7)};
  EXPECT_EQ(intra_span_attention(b, p, cfg).reps, b.reps);
}

TEST(IntraSpan, TwoSpansMatchScalarRecomputation) {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.d_w = 2;
  const Parameters p = random_params(cfg, 8);
  SpanBatch b{"x", {{0, 0}, {0, 1}}, {false, false}, random_matrix(2, 4, 9)};
  expect_rows_near(intra_span_attention(b, p, cfg).reps, oracle::isa(oracle::to_mat(b.reps), p), 1e-12);
}

TEST(CrossSpan, SingleSupportSpanIsWhatEveryQueryReads) {
  ModelConfig cfg;
  cfg.d = 3;
  cfg.d_w = 2;
  const Parameters p = random_params(cfg, 10);
  SpanBatch q{"q", {{0, 0}, {1, 1}}, {false, false}, random_matrix(2, 3, 11)};
  SpanBatch s{"s", {{0, 0}}, {false}, random_matrix(1, 3, 12)};
  const auto [qo, so] = cross_span_attention(q, {s}, p, cfg);
  const auto srow = s.reps.row(0);
  const std::vector<double> sv(srow.begin(), srow.end());
  oracle::Mat want;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto r = q.reps.row(i);
    want.push_back(oracle::ffn({r.begin(), r.end()}, sv, p.csa));
  }
  expect_rows_near(qo.reps, want, 1e-12);
}

TEST(CrossSpan, DisabledReturnsInputs) {
  ModelConfig cfg;
  cfg.d = 3;
  cfg.d_w = 2;
  cfg.use_csa = false;
  const Parameters p = random_params(cfg, 10);
  SpanBatch q{"q", {{0, 0}}, {false}, random_matrix(1, 3, 13)};
  SpanBatch s{"s", {{0, 0}, {0, 1}}, {false, false}, random_matrix(2, 3, 14)};
  const auto [qo, so] = cross_span_attention(q, {s}, p, cfg);
  EXPECT_EQ(qo.reps, q.reps);
  EXPECT_EQ(so[0].reps, s.reps);
}

TEST(CrossSpan, TwoByThreeMatchesScalarRecomputation) {
  ModelConfig cfg;
  cfg.d = 3;
  cfg.d_w = 2;
  const Parameters p = random_params(cfg, 15);
  SpanBatch q{"q", {{0, 0}, {1, 1}}, {false, false}, random_matrix(2, 3, 16)};
  SpanBatch s1{"s1", {{0, 0}, {0, 1}}, {false, false}, random_matrix(2, 3, 17)};
  SpanBatch s2{"s2", {{0, 0}}, {false}, random_matrix(1, 3, 18)};
  const auto [qo, so] = cross_span_attention(q, {s1, s2}, p, cfg);
  const oracle::Mat qm = oracle::to_mat(q.reps);
  oracle::Mat sm = oracle::to_mat(s1.reps);
  sm.push_back(oracle::to_mat(s2.reps)[0]);
  oracle::Mat qw, sw;
  for (const auto& r : qm) qw.push_back(oracle::ffn(r, oracle::phi(r, sm), p.csa));
  for (const auto& r : sm) sw.push_back(oracle::ffn(r, oracle::phi(r, qm), p.csa));
  expect_rows_near(qo.reps, qw, 1e-12);
  expect_rows_near(so[0].reps, {sw[0], sw[1]}, 1e-12);
  expect_rows_near(so[1].reps, {sw[2]}, 1e-12);
}

TEST(OPartition, AnchorCases) {
  // "Newton studied at Cambridge": "studied at" overlaps no entity
  const std::vector<LabeledSpan> s2{{{0, 0}, "PER"}, {{3, 3}, "ORG"}};
  EXPECT_EQ(classify_o_span({1, 2}, s2), SpanKind::kO1);
  // "Isaac" inside "Isaac Newton"
  const std::vector<LabeledSpan> s1{{{0, 1}, "PER"}};
  EXPECT_EQ(classify_o_span({0, 0}, s1), SpanKind::kO2);
  const std::vector<LabeledSpan> g{{{2, 3}, "X"}};
  EXPECT_EQ(classify_o_span({1, 2}, g), SpanKind::kO3);
  EXPECT_EQ(classify_o_span({2, 3}, g), SpanKind::kGold);
}

TEST(Prototypes, SingleInstanceIsItself) {
  const std::vector<double> q{0.3, -0.1};
  const Matrix rows = Matrix::from_rows({{2.0, 5.0}});
  EXPECT_EQ(instance_span_attention(q, rows), (std::vector<double>{2.0, 5.0}));
}

TEST(Prototypes, MeanWhenInstanceAttentionOff) {
  const std::vector<double> q{9.0, -4.0};
  const auto z = instance_span_attention(q, Matrix::from_rows({{1, 1}, {3, 3}}), false);
  EXPECT_DOUBLE_EQ(z[0], 2.0);
  EXPECT_DOUBLE_EQ(z[1], 2.0);
}

TEST(Prototypes, TwoInstancesMatchScalarPhi) {
  const std::vector<double> q{0.5, -1.0, 0.2};
  const Matrix rows = random_matrix(2, 3, 20);
  const auto z = instance_span_attention(q, rows);
  const auto want = oracle::phi(q, oracle::to_mat(rows));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(z[i], want[i], 1e-12);
}

TEST(Prototypes, OnlyOneOSubclassGivesItsPrototype) {
  ModelConfig cfg;
  const std::vector<double> q{0.1, 0.4};
  const Matrix o2 = random_matrix(3, 2, 21);
  const auto set = build_prototype_set(q, {random_matrix(1, 2, 22)}, {Matrix(0, 2), o2, Matrix(0, 2)}, cfg);
  const auto want = instance_span_attention(q, o2);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(set.o[i], want[i], 1e-12);
}

TEST(Prototypes, WithoutPartitionOIsInstanceAttentionOverAll) {
  ModelConfig cfg;
  cfg.use_o_partition = false;
  const std::vector<double> q{0.7, -0.2};
  const Matrix o1 = random_matrix(2, 2, 23), o3 = random_matrix(2, 2, 24);
  const auto set = build_prototype_set(q, {random_matrix(1, 2, 25)}, {o1, Matrix(0, 2), o3}, cfg);
  oracle::Mat all = oracle::to_mat(o1);
  for (const auto& r : oracle::to_mat(o3)) all.push_back(r);
  const auto want = oracle::phi(q, all);
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(set.o[i], want[i], 1e-12);
}

TEST(Prototypes, ThreeSubclassesMatchNestedPhi) {
  ModelConfig cfg;
  const std::vector<double> q{0.3, 0.9, -0.4};
  const Matrix o1 = random_matrix(2, 3, 26), o2 = random_matrix(3, 3, 27), o3 = random_matrix(1, 3, 28);
  const auto set = build_prototype_set(q, {random_matrix(2, 3, 29)}, {o1, o2, o3}, cfg);
  const oracle::Mat subs{oracle::phi(q, oracle::to_mat(o1)), oracle::phi(q, oracle::to_mat(o2)),
                         oracle::phi(q, oracle::to_mat(o3))};
  const auto want = oracle::phi(q, subs);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(set.o[i], want[i], 1e-12);
}

TEST(Prototypes, NoOSpansRejected) {
  ModelConfig cfg;
  const std::vector<double> q{0.1, 0.2};
  EXPECT_THROW(build_prototype_set(q, {random_matrix(1, 2, 30)}, {Matrix(0, 2), Matrix(0, 2), Matrix(0, 2)}, cfg),
               UserError);
}

TEST(Matching, EquidistantPrototypesSplitEvenly) {
  PrototypeSet ps;
  ps.o = {1.0, 0.0};
  ps.entities = {{-1.0, 0.0}};
  const auto p = match_probabilities(std::vector<double>{0.0, 0.0}, ps);
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(Matching, CoincidentPrototypeWins) {
  PrototypeSet ps;
  ps.o = {3.0, 3.0};
  ps.entities = {{1.0, 1.0}, {0.2, -0.5}};
  const auto p = match_probabilities(std::vector<double>{0.2, -0.5}, ps);
  EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), 2);
}

TEST(Matching, DistancesOneAndTwo) {
  PrototypeSet ps;
  ps.o = {1.0, 0.0};
  ps.entities = {{0.0, 2.0}};
  const auto p = match_probabilities(std::vector<double>{0.0, 0.0}, ps);
  const long double e = std::exp(1.0L);
  EXPECT_NEAR(p[0], static_cast<double>(e / (e + 1.0L)), 1e-14);
  EXPECT_NEAR(p[1], static_cast<double>(1.0L / (e + 1.0L)), 1e-14);
}

TEST(Loss, OneHotIsZero) {
  EXPECT_DOUBLE_EQ(episode_loss({{0.0, 1.0, 0.0}, {1.0, 0.0, 0.0}}, {1, 0}), 0.0);
}

TEST(Loss, UniformOverThreeIsLogThree) {
  const double t = 1.0 / 3.0;
  EXPECT_NEAR(episode_loss({{t, t, t}, {t, t, t}}, {0, 2}), std::log(3.0), 1e-15);
}

TEST(Loss, TwoSpanHandSum) {
  const double want = -(std::log(0.7) + std::log(0.25)) / 2.0;
  EXPECT_NEAR(episode_loss({{0.7, 0.2, 0.1}, {0.5, 0.25, 0.25}}, {0, 2}), want, 1e-15);
}

namespace {

struct Toy {
  Episode ep;
  EmbeddingStore store;
};

Toy toy_episode(std::size_t dw, std::uint64_t seed) {
  Toy t;
  t.ep.classes = {"PER", "LOC"};
  t.ep.support = {{"s0", {"a", "b", "c", "d"}, {{{0, 1}, "PER"}}},
                  {"s1", {"e", "f", "g"}, {{{2, 2}, "LOC"}, {{0, 0}, "PER"}}}};
  t.ep.queries = {{"q0", {"h", "i", "j"}, {{{1, 2}, "LOC"}}}, {"q1", {"k", "l"}, {{{0, 0}, "PER"}}}};
  std::uint64_t k = seed;
  for (const auto* group : {&t.ep.support, &t.ep.queries})
    for (const auto& s : *group) t.store.add(s.id, random_matrix(s.tokens.size(), dw, ++k));
  return t;
}

}  // namespace

TEST(EndToEnd, MatchesStraightLineOracle) {
  ModelConfig cfg;
  cfg.d_w = 5;
  cfg.d = 4;
  cfg.max_span_len = 3;
  for (int variant = 0; variant < 4; ++variant) {
    cfg.use_insa = variant != 1;
    cfg.use_o_partition = variant != 2;
    cfg.use_isa = cfg.use_csa = variant != 3;
    const Toy t = toy_episode(cfg.d_w, 40 + variant);
    const Parameters p = random_params(cfg, 50 + variant);
    oracle::Options opt;
    opt.max_len = 3;
    opt.use_insa = cfg.use_insa;
    opt.use_o_partition = cfg.use_o_partition;
    opt.use_isa = opt.use_csa = cfg.use_isa;
    const auto want = oracle::distributions(t.ep, t.store, p, opt);
    const auto got = score_spans(t.ep, p, cfg, t.store);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t q = 0; q < got.size(); ++q) {
      ASSERT_EQ(got[q].size(), want[q].size());
      for (std::size_t s = 0; s < got[q].size(); ++s)
        for (std::size_t c = 0; c < 3; ++c)
          EXPECT_NEAR(got[q][s].distribution[c], want[q][s][c], 1e-10) << "variant " << variant;
    }
    EXPECT_NEAR(episode_loss(t.ep, p, cfg, t.store), oracle::loss(t.ep, want, 3), 1e-10) << "variant " << variant;
  }
}

TEST(EndToEnd, DeterministicPredictions) {
  ModelConfig cfg;
  cfg.d_w = 5;
  cfg.d = 4;
  const Toy t = toy_episode(5, 60);
  const Parameters p = random_params(cfg, 61);
  const auto a = predict_episode(t.ep, p, cfg, t.store, DecoderConfig::flat());
  const auto b = predict_episode(t.ep, p, cfg, t.store, DecoderConfig::flat());
  EXPECT_EQ(a, b);
}

TEST(EndToEnd, CollapsedSupportReducesToNearestPrototype) {
  ModelConfig cfg;
  cfg.d_w = 2;
  cfg.d = 2;
  cfg.max_span_len = 1;
  cfg.use_isa = cfg.use_csa = cfg.use_insa = cfg.use_o_partition = false;
  Parameters p = init_parameters(cfg, 0);
  p.span_proj = Matrix::from_rows({{0.5, 0}, {0, 0.5}, {0.5, 0}, {0, 0.5}});
  Episode ep;
  ep.classes = {"A", "B"};
  ep.support = {{"s", {"a", "o", "b", "a"}, {{{0, 0}, "A"}, {{2, 2}, "B"}, {{3, 3}, "A"}}}};
  ep.queries = {{"q", {"x", "y", "z"}, {}}};
  EmbeddingStore store;
  store.add("s", Matrix::from_rows({{4, 0}, {0, 0}, {0, 4}, {4, 0}}));
  store.add("q", Matrix::from_rows({{3.5, 0.2}, {0.1, 0.3}, {0.4, 3.0}}));
  const auto scored = score_spans(ep, p, cfg, store);
  ASSERT_EQ(scored[0].size(), 3u);
  EXPECT_EQ(scored[0][0].label, "A");
  EXPECT_EQ(scored[0][1].label, kOutsideLabel);
  EXPECT_EQ(scored[0][2].label, "B");
}

TEST(EndToEnd, ClassWithoutSupportIsNeverPredicted) {
  ModelConfig cfg;
  cfg.d_w = 5;
  cfg.d = 4;
  Toy t = toy_episode(5, 70);
  t.ep.classes.push_back("ORG");
  const Parameters p = random_params(cfg, 71);
  for (const auto& q : predict_episode(t.ep, p, cfg, t.store, DecoderConfig::flat()))
    for (const auto& s : q) EXPECT_NE(s.label, "ORG");
}
