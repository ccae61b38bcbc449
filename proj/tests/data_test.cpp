#include <gtest/gtest.h>

#include <clocale>
#include <cmath>
#include <random>

#include "ssnt/data.hpp"
#include "ssnt/trellis.hpp"

namespace ssnt {
namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("ssnt_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CorpusConfig small_config() {
  CorpusConfig c;
  c.K = 4;
  c.D = 3;
  c.d_min = 2;
  c.d_max = 4;
  c.sigma_n = 0.1;
  c.L_min = 2;
  c.L_max = 5;
  c.n_train = 6;
  c.n_val = 2;
  c.n_test = 2;
  c.seed = 3;
  return c;
}

TEST(Features, SingleValue) {
  fs::path dir = temp_dir("single");
  write_text_file(dir / "a.csv", "0.5");
  Tensor y = read_features(dir / "a.csv");
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y(0, 0), 0.5);
}

TEST(Features, RoundTripIsExact) {
  fs::path dir = temp_dir("roundtrip");
  std::mt19937_64 rng(0);
  std::normal_distribution<double> nd(0.0, 100.0);
  Tensor y({20, 8});
  for (double& v : y.data()) v = nd(rng);
  y(0, 0) = 1e-300;
  y(0, 1) = -0.1;
  write_features(y, dir / "f.csv");
  EXPECT_EQ(read_features(dir / "f.csv"), y);
}

TEST(Features, IgnoresProcessLocale) {
  // Decimal point stays '.' even when the C locale would use ','.
  const char* old = std::setlocale(LC_NUMERIC, nullptr);
  std::string saved = old ? old : "C";
  std::setlocale(LC_NUMERIC, "de_DE.UTF-8");
  const std::string text = features_to_csv(Tensor::matrix(1, 2, {1.5, -2.25}));
  EXPECT_EQ(text, "1.5,-2.25\n");
  EXPECT_EQ(features_from_csv(text, "mem"), Tensor::matrix(1, 2, {1.5, -2.25}));
  std::setlocale(LC_NUMERIC, saved.c_str());
}

TEST(Features, RaggedRowNamesLine) {
  try {
    features_from_csv("1,2\n3,4\n5\n", "f.csv");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("f.csv:3"), std::string::npos) << e.what();
  }
}

TEST(Features, EmptyAndMalformed) {
  EXPECT_THROW(features_from_csv("", "e.csv"), IoError);
  EXPECT_THROW(features_from_csv("\n\n", "e.csv"), IoError);
  EXPECT_THROW(features_from_csv("1,abc\n", "e.csv"), IoError);
  EXPECT_THROW(read_features("/nonexistent/dir/x.csv"), IoError);
}

TEST(Transcripts, MapsTokens) {
  Vocabulary v({"a", "b"});
  auto t = transcripts_from_text("u1\ta b a\n", v, "t.tsv");
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].id, "u1");
  EXPECT_EQ(t[0].symbols, (std::vector<std::size_t>{1, 2, 1}));
}

TEST(Transcripts, AcceptsCrlf) {
  Vocabulary v({"a", "b"});
  auto lf = transcripts_from_text("u1\ta b\nu2\tb\n", v, "t");
  auto crlf = transcripts_from_text("u1\ta b\r\nu2\tb\r\n", v, "t");
  ASSERT_EQ(crlf.size(), 2u);
  EXPECT_EQ(lf[0].symbols, crlf[0].symbols);
  EXPECT_EQ(lf[1].symbols, crlf[1].symbols);
  EXPECT_EQ(crlf[1].id, "u2");
}

TEST(Transcripts, Errors) {
  Vocabulary v({"a", "b"});
  EXPECT_THROW(transcripts_from_text("u1\t\n", v, "t"), IoError);
  EXPECT_THROW(transcripts_from_text("u1\ta\nu1\tb\n", v, "t"), IoError);
  try {
    transcripts_from_text("u1\ta\nu2\ta zz\n", v, "t.tsv");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'zz'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("t.tsv:2"), std::string::npos) << msg;
  }
}

TEST(Corpus, NoiselessSingleSymbolRepeatsPrototype) {
  CorpusConfig c;
  c.K = 2;
  c.D = 4;
  c.d_min = c.d_max = 3;
  c.sigma_n = 0.0;
  c.L_min = c.L_max = 1;
  c.n_train = 1;
  c.pad_frames = 0;
  Corpus corpus = generate_corpus(c);
  const Utterance& u = corpus.train.at(0);
  ASSERT_EQ(u.symbols.size(), 3u);  // pads get one frame each at minimum
  EXPECT_EQ(u.features.rows(), 5u);
  for (std::size_t f = 1; f < 4; ++f)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(u.features(f, d), corpus.prototypes(u.symbols[1] - 1, d));
}

TEST(Corpus, SameSeedIsByteIdentical) {
  fs::path a = temp_dir("corpus_a"), b = temp_dir("corpus_b");
  write_corpus(generate_corpus(small_config()), a);
  write_corpus(generate_corpus(small_config()), b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    EXPECT_EQ(read_text_file(e.path()), read_text_file(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 3u + 2u + 2u * 10u);
  CorpusConfig other = small_config();
  other.seed = 4;
  EXPECT_NE(generate_corpus(other).train[0].features, generate_corpus(small_config()).train[0].features);
}

TEST(Corpus, NoiseStatistics) {
  CorpusConfig c = small_config();
  c.sigma_n = 0.3;
  c.n_train = 3000;
  c.n_val = c.n_test = 0;
  Corpus corpus = generate_corpus(c);
  double ss = 0.0, n = 0.0;
  for (const auto& u : corpus.train)
    for (std::size_t f = 0; f < u.features.rows() && n < 1e5 * c.D; ++f)
      for (std::size_t d = 0; d < c.D; ++d) {
        const double e = u.features(f, d) - corpus.prototypes(u.symbols[u.frame_symbol[f] - 1] - 1, d);
        ss += e * e;
        n += 1.0;
      }
  ASSERT_GE(n, 1e5);
  EXPECT_NEAR(std::sqrt(ss / n), 0.3, 0.3 * 0.02);
}

TEST(Corpus, ReferenceAlignmentsAreMonotone) {
  CorpusConfig c = small_config();
  c.pause = 0.5;
  Corpus corpus = generate_corpus(c);
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test})
    for (const auto& u : *split) {
      EXPECT_TRUE(AlignmentPath{u.frame_symbol}.valid_for(u.symbols.size())) << u.id;
      EXPECT_EQ(u.frame_symbol.size(), u.features.rows());
      EXPECT_EQ(u.symbols.front(), corpus.vocab.id(kBeginPad));
      EXPECT_EQ(u.symbols.back(), corpus.vocab.id(kEndPad));
    }
}

TEST(Corpus, PausesAreLong) {
  CorpusConfig c = small_config();
  c.pause = 1.0;
  c.n_train = 50;
  Corpus corpus = generate_corpus(c);
  const std::size_t pau = corpus.vocab.id(kPause);
  std::size_t pauses = 0;
  for (const auto& u : corpus.train) {
    auto d = durations_from_alignment(u.frame_symbol, u.symbols.size());
    for (std::size_t i = 0; i < u.symbols.size(); ++i) {
      if (u.symbols[i] == pau) {
        ++pauses;
        EXPECT_GE(d[i], 3 * c.d_min);
        EXPECT_LE(d[i], 5 * c.d_max);
      } else if (i > 0 && i + 1 < u.symbols.size()) {
        EXPECT_LE(d[i], c.d_max);
      }
    }
  }
  EXPECT_GT(pauses, 0u);
}

TEST(Corpus, LoadSplitRoundTrip) {
  fs::path dir = temp_dir("load");
  Corpus corpus = generate_corpus(small_config());
  write_corpus(corpus, dir);
  Vocabulary v = read_vocab(dir / "vocab.txt");
  EXPECT_EQ(v.tokens, corpus.vocab.tokens);
  auto train = load_split(dir, "train", v);
  ASSERT_EQ(train.size(), corpus.train.size());
  for (std::size_t k = 0; k < train.size(); ++k) {
    EXPECT_EQ(train[k].id, corpus.train[k].id);
    EXPECT_EQ(train[k].symbols, corpus.train[k].symbols);
    EXPECT_EQ(train[k].features, corpus.train[k].features);
    EXPECT_EQ(train[k].frame_symbol, corpus.train[k].frame_symbol);
  }
  EXPECT_EQ(read_features(dir / "prototypes.csv"), corpus.prototypes);
}

TEST(Corpus, ConfigValidation) {
  CorpusConfig c = small_config();
  c.d_min = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.sigma_n = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace ssnt
