#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "spanmatch/corpus.hpp"

using namespace spanmatch;

namespace {

std::vector<Sentence> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_bio(in);
}

// conlleval-style chunk extraction, used as the reference for the BIO reader.
std::vector<LabeledSpan> reference_chunks(const std::vector<std::string>& tags) {
  std::vector<LabeledSpan> out;
  std::string prev_type;
  char prev_tag = 'O';
  int start = -1;
  for (int i = 0; i <= static_cast<int>(tags.size()); ++i) {
    const std::string tag = i < static_cast<int>(tags.size()) ? tags[i] : "O";
    const char t = tag[0];
    const std::string type = t == 'O' ? "" : tag.substr(2);
    const bool chunk_end = prev_tag != 'O' && (t == 'O' || t == 'B' || type != prev_type);
    const bool chunk_start = t == 'B' || (t == 'I' && (prev_tag == 'O' || type != prev_type));
    if (chunk_end) out.push_back({{start, i - 1}, prev_type});
    if (chunk_start) start = i;
    prev_tag = t;
    prev_type = type;
  }
  return out;
}

}  // namespace

TEST(Bio, BeginInsideMakesOneSpan) {
  const auto s = parse("Albert\tB-PER\nEinstein\tI-PER\nwas\tO\n");
  ASSERT_EQ(s.size(), 1u);
  ASSERT_EQ(s[0].spans.size(), 1u);
  EXPECT_EQ(s[0].spans[0].span, (Span{0, 1}));
  EXPECT_EQ(s[0].spans[0].label, "PER");
}

TEST(Bio, AllOutsideHasNoSpans) {
  const auto s = parse("a\tO\nb\tO\n\n");
  ASSERT_EQ(s.size(), 1u);
  EXPECT_TRUE(s[0].spans.empty());
}

TEST(Bio, StrayInsideStartsSpan) {
  const auto s = parse("x\tO\ny\tI-PER\nz\tI-PER\n");
  ASSERT_EQ(s[0].spans.size(), 1u);
  EXPECT_EQ(s[0].spans[0].span, (Span{1, 2}));
}

TEST(Bio, MalformedTagNamesLine) {
  try {
    parse("a\tO\nb\tX-PER\n");
    FAIL();
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Bio, FuzzedTagsMatchReferenceChunker) {
  std::mt19937_64 rng(42);
  const std::vector<std::string> pool{"O", "B-PER", "I-PER", "B-LOC", "I-LOC"};
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::uniform_int_distribution<int> len(1, 12);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> tags(len(rng));
    std::string text;
    for (std::size_t i = 0; i < tags.size(); ++i) {
      tags[i] = pool[pick(rng)];
      text += "t" + std::to_string(i) + "\t" + tags[i] + "\n";
    }
    const auto s = parse(text);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].spans, reference_chunks(tags)) << text;
  }
}

TEST(Bio, WriteMarksBeginAndInside) {
  Sentence s{"x", {"a", "b", "c"}, {{{0, 1}, "PER"}}};
  EXPECT_EQ(spans_to_bio(s), (std::vector<std::string>{"B-PER", "I-PER", "O"}));
  s.spans.clear();
  EXPECT_EQ(spans_to_bio(s), (std::vector<std::string>{"O", "O", "O"}));
}

TEST(Bio, RandomSentencesRoundTrip) {
  SynthCorpusSpec spec;
  spec.classes = class_names("K", 0, 4);
  spec.sentences = 100;
  spec.seed = 9;
  spec.id_prefix = "s";
  const auto corpus = synthetic_corpus(spec);
  std::ostringstream out;
  write_bio(out, corpus);
  std::istringstream in(out.str());
  EXPECT_EQ(parse_bio(in, "s"), corpus);
}

TEST(Embeddings, AcceptsMatchingRecord) {
  std::istringstream in(R"({"id":"a","tokens":["x","y","z"],"dim":8,"vectors":[[0,0,0,0,0,0,0,1],[1,0,0,0,0,0,0,0],[0,1,0,0,0,0,0,0]]})");
  const auto store = load_embeddings(in);
  EXPECT_EQ(store.dim(), 8u);
  EXPECT_EQ(store.at("a").rows(), 3u);
}

TEST(Embeddings, RejectsTooFewVectors) {
  std::istringstream in(R"({"id":"a","tokens":["x","y","z"],"dim":2,"vectors":[[0,1],[1,0]]})");
  EXPECT_THROW(load_embeddings(in), UserError);
}

TEST(Embeddings, MissingSentenceNamesId) {
  EmbeddingStore store;
  try {
    store.at("nowhere7");
    FAIL();
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find("nowhere7"), std::string::npos);
  }
}

TEST(Embeddings, ExportRoundTripKeepsFloat32Values) {
  Sentence s{"r", {"a", "b"}, {}};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Matrix m(2, 5);
  for (double& v : m.values()) v = n(rng);
  std::ostringstream out;
  write_embedding_record(out, s, m);
  std::istringstream in(out.str());
  const auto store = load_embeddings(in);
  const Matrix& back = store.at("r");
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(static_cast<float>(back.values()[i]), static_cast<float>(m.values()[i]));
  }
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

std::vector<Sentence> synth_sample(std::uint64_t seed) {
  SynthCorpusSpec spec;
  spec.classes = class_names("C", 0, 5);
  spec.sentences = 200;
  spec.seed = seed;
  return synthetic_corpus(spec);
}

}  // namespace

TEST(SynthEmbedder, Deterministic) {
  const auto corpus = synth_sample(1);
  SynthConfig cfg;
  cfg.seed = 4;
  for (int i = 0; i < 5; ++i) EXPECT_EQ(synth_embed(corpus[i], cfg), synth_embed(corpus[i], cfg));
}

TEST(SynthEmbedder, SameClassTokensAreClose) {
  const auto corpus = synth_sample(2);
  SynthConfig cfg;
  cfg.seed = 5;
  std::map<std::string, std::vector<std::vector<double>>> by_class;
  for (const auto& s : corpus) {
    const Matrix m = synth_embed(s, cfg);
    for (const auto& g : s.spans)
      for (int i = g.span.l; i <= g.span.r; ++i) {
        auto row = m.row(i);
        by_class[g.label].emplace_back(row.begin(), row.end());
      }
  }
  int checked = 0;
  std::mt19937_64 rng(8);
  for (auto& [label, rows] : by_class) {
    ASSERT_GE(rows.size(), 21u);
    std::uniform_int_distribution<std::size_t> pick(0, rows.size() - 1);
    for (int k = 0; k < 20; ++k, ++checked) {
      std::size_t a = pick(rng), b = pick(rng);
      while (b == a) b = pick(rng);
      EXPECT_GT(cosine(rows[a], rows[b]), 0.9) << label;
    }
  }
  EXPECT_EQ(checked, 100);
}

TEST(SynthEmbedder, ClassAnchorsSeparatedBeyondNoise) {
  SynthConfig cfg;
  cfg.seed = 6;
  const auto names = class_names("C", 0, 10);
  const double noise = cfg.noise_ratio * cfg.anchor_norm;
  int checked = 0;
  for (std::size_t a = 0; a < names.size(); ++a)
    for (std::size_t b = a + 1; b < names.size(); ++b, ++checked) {
      const auto x = class_anchor(cfg, names[a], 0);
      const auto y = class_anchor(cfg, names[b], 0);
      double d = 0;
      for (std::size_t i = 0; i < x.size(); ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
      EXPECT_GE(std::sqrt(d), 2.0 * noise);
    }
  EXPECT_GE(checked, 45);
}
