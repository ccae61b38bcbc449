#include <gtest/gtest.h>

#include <cmath>

#include "ssnt/eval.hpp"

namespace ssnt {
namespace {

TEST(Boundaries, GroupPathsExpandToFrames) {
  EXPECT_EQ(frames_from_groups({1, 1, 2}, 5, 2), (std::vector<std::size_t>{1, 1, 1, 1, 2}));
  EXPECT_EQ(boundaries({1, 1, 2, 2, 2, 3}), (std::vector<std::size_t>{2, 5}));
}

TEST(Boundaries, ToleranceCountsNearMisses) {
  const std::vector<std::size_t> ref{1, 1, 2, 2, 2, 3, 3, 3, 3, 4};
  const std::vector<std::size_t> pred{1, 1, 1, 1, 2, 3, 3, 4, 4, 4};
  // Reference boundaries 2, 5, 9; predicted 4, 5, 7.
  EXPECT_EQ(boundaries_within(pred, ref, 2), 3u);
  EXPECT_EQ(boundaries_within(pred, ref, 1), 1u);
  EXPECT_EQ(boundaries_within(ref, ref, 0), 3u);
}

TEST(Median, OddEvenEmpty) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_TRUE(std::isnan(median({})));
}

TEST(DurationError, TwoUtteranceFixture) {
  const Vocabulary v({kBeginPad, kEndPad, "s1", "s2", kPause});
  const std::size_t b = 1, e = 2, s1 = 3, s2 = 4, pau = 5;
  DurationErrors d;
  add_duration_errors(v, {b, s1, pau, s2, e}, {2, 3, 9, 2, 2}, {5, 4, 12, 2, 1}, d);
  add_duration_errors(v, {b, s2, s1, e}, {2, 4, 2, 2}, {2, 2, 3, 2}, d);
  // Regular: s1 |4-3|/3, s2 0, s2 |2-4|/4, s1 |3-2|/2. Pause: |12-9|/9.
  ASSERT_EQ(d.regular.size(), 4u);
  ASSERT_EQ(d.pause.size(), 1u);
  EXPECT_DOUBLE_EQ(median(d.regular), (1.0 / 3.0 + 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(median(d.pause), 1.0 / 3.0);

  DurationErrors partial;
  add_duration_errors(v, {b, s1, pau, s2, e}, {2, 3, 9, 2, 2}, {2, 3, 30, 0, 0}, partial, 3);
  EXPECT_EQ(partial.regular, (std::vector<double>{0.0}));
  EXPECT_EQ(partial.pause, (std::vector<double>{21.0 / 9.0}));
}

ModelConfig small_model(std::size_t vocab_size, std::size_t D) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = 4;
  c.enc_hidden = 4;
  c.prenet1 = 4;
  c.prenet2 = 4;
  c.dec_hidden = 6;
  c.joint_dim = 6;
  c.feature_dim = D;
  return c;
}

TEST(Alignment, SquareGridIsDiagonal) {
  ModelConfig c = small_model(5, 2);
  ParameterStore s = init_parameters(c, 0);
  Tensor y({4, 2}, 0.3);
  AlignmentAnalysis a = analyze_alignment(c, s, {1, 2, 3, 4}, y);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.gamma(i, j), i == j ? 1.0 : 0.0, 1e-12);
  EXPECT_EQ(a.best.z, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(gamma_pgm(a.gamma), "P2\n4 4\n255\n255 0 0 0\n0 255 0 0\n0 0 255 0\n0 0 0 255\n");
}

TEST(Alignment, PosteriorColumnsSumToOne) {
  ModelConfig c = small_model(5, 2);
  ParameterStore s = init_parameters(c, 3);
  Tensor y({9, 2});
  for (std::size_t k = 0; k < y.numel(); ++k) y[k] = std::sin(0.7 * k);
  AlignmentAnalysis a = analyze_alignment(c, s, {4, 1, 3}, y);
  for (std::size_t j = 0; j < 9; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) sum += a.gamma(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-10);
  }
  EXPECT_TRUE(a.best.valid_for(3));
  EXPECT_EQ(best_path_csv(AlignmentPath{{1, 1, 2}}), "group_index,input_position\n1,1\n2,1\n3,2\n");
}

TEST(Evaluate, UntrainedModelGivesFiniteRepeatableReport) {
  CorpusConfig cc;
  cc.K = 3;
  cc.D = 2;
  cc.d_min = 2;
  cc.d_max = 3;
  cc.sigma_n = 0.1;
  cc.L_min = 2;
  cc.L_max = 3;
  cc.n_train = 0;
  cc.n_val = 0;
  cc.n_test = 5;
  cc.pause = 0.5;
  Corpus corpus = generate_corpus(cc);
  ModelConfig c = small_model(corpus.vocab.model_vocab_size(), 2);
  ParameterStore s = init_parameters(c, 0);
  EvalOptions o;
  o.threads = 2;
  EvalReport a = evaluate(c, s, corpus.vocab, corpus.prototypes, corpus.test, o);
  EvalReport b = evaluate(c, s, corpus.vocab, corpus.prototypes, corpus.test, o);
  EXPECT_EQ(a.utterances, 5u);
  EXPECT_TRUE(std::isfinite(a.nll_per_frame));
  EXPECT_GE(a.boundary_accuracy(), 0.0);
  EXPECT_LE(a.boundary_accuracy(), 1.0);
  EXPECT_GE(a.decode_mse, 0.0);
  EXPECT_EQ(format_report(a), format_report(b));
}

}  // namespace
}  // namespace ssnt
