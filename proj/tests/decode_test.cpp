#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ssnt/decode.hpp"
#include "ssnt/train.hpp"

namespace ssnt {
namespace {

ModelConfig tiny_model(std::size_t reduction = 1) {
  ModelConfig c;
  c.vocab_size = 6;
  c.embed_dim = 4;
  c.enc_hidden = 4;
  c.prenet1 = 4;
  c.prenet2 = 4;
  c.dec_hidden = 8;
  c.joint_dim = 8;
  c.feature_dim = 3;
  c.reduction = reduction;
  return c;
}

/// Parameters scaled up so emit probabilities spread away from 0.5.
ParameterStore spread_params(const ModelConfig& c, std::uint64_t seed, double scale = 20.0) {
  ParameterStore s = init_parameters(c, seed);
  for (auto& [name, t] : s)
    if (name.rfind("joint.", 0) == 0)
      for (double& v : t.data()) v *= scale;
  return s;
}

bool valid_alignment(const AlignmentPath& a, std::size_t I) {
  if (a.z.empty() || a.z.front() != 1) return false;
  for (std::size_t j = 1; j < a.z.size(); ++j)
    if (a.z[j] < a.z[j - 1] || a.z[j] - a.z[j - 1] > 1) return false;
  return a.z.back() <= I;
}

TEST(AdvanceProbability, Arithmetic) {
  EXPECT_NEAR(advance_probability(0.8, 0.2, 0.5), 0.1 / 0.9, 1e-15);
  EXPECT_NEAR(advance_probability(0.8, 0.2, 0.5), 0.11111, 1e-5);
  EXPECT_NEAR(advance_probability(0.5, 0.5, 0.5), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(advance_probability(1.0 - 1e-12, 1e-12, 0.9), 0.0, 1e-11);
}

TEST(AdvanceProbability, AlwaysAValidProbability) {
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> u(1e-9, 1.0 - 1e-9);
  for (int k = 0; k < 10000; ++k) {
    const double a = u(rng), b = u(rng);
    const double p = advance_probability(a, 1.0 - a, b);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(Synthesize, SingleSymbolStaysAtOne) {
  ModelConfig c = tiny_model();
  ParameterStore s = init_parameters(c, 0);
  DecodeConfig d;
  d.max_groups = 7;
  DecodeResult r = synthesize(c, s, {3}, d);
  ASSERT_FALSE(r.alignment.z.empty());
  for (std::size_t z : r.alignment.z) EXPECT_EQ(z, 1u);
  for (double p : r.advance_prob) EXPECT_EQ(p, 0.0);
  EXPECT_TRUE(r.terminated);
  EXPECT_EQ(r.y_hat.shape(), (Shape{r.alignment.z.size(), 3}));
}

TEST(Synthesize, GreedyIsDeterministic) {
  ModelConfig c = tiny_model();
  ParameterStore s = spread_params(c, 1);
  DecodeConfig d;
  DecodeResult a = synthesize(c, s, {1, 4, 2, 5}, d);
  d.seed = 99;  // greedy ignores the seed
  DecodeResult b = synthesize(c, s, {1, 4, 2, 5}, d);
  EXPECT_EQ(a.y_hat, b.y_hat);
  EXPECT_EQ(a.alignment, b.alignment);
}

TEST(Synthesize, SampledAlignmentsAreMonotone) {
  ModelConfig c = tiny_model();
  ParameterStore s = spread_params(c, 2);
  DecodeConfig d;
  d.mode = DecodeMode::kSample;
  d.max_groups = 30;
  const std::vector<std::size_t> x{1, 2, 3, 4, 5};
  std::size_t distinct = 0;
  AlignmentPath first;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    d.seed = seed;
    DecodeResult r = synthesize(c, s, x, d);
    ASSERT_TRUE(valid_alignment(r.alignment, x.size())) << "seed " << seed;
    EXPECT_EQ(r.terminated, r.alignment.z.back() == x.size());
    if (r.stopped) {
      EXPECT_TRUE(r.terminated);
    }
    if (seed == 0) first = r.alignment;
    distinct += !(r.alignment == first);
  }
  EXPECT_GT(distinct, 0u);
}

TEST(Synthesize, AdvanceFrequencyMatchesProbability) {
  ModelConfig c = tiny_model();
  ParameterStore s = spread_params(c, 3, 8.0);
  DecodeConfig d;
  d.mode = DecodeMode::kSample;
  d.max_groups = 2;
  const std::vector<std::size_t> x{2, 3};
  // The step-2 decision is always taken from position 1 with the same inputs.
  d.seed = 0;
  const double p = synthesize(c, s, x, d).advance_prob.at(1);
  ASSERT_GT(p, 0.05);
  ASSERT_LT(p, 0.95);
  const int n = 1000;
  int advanced = 0;
  for (int k = 0; k < n; ++k) {
    d.seed = 1000 + k;
    DecodeResult r = synthesize(c, s, x, d);
    EXPECT_EQ(r.advance_prob.at(1), p);
    advanced += r.alignment.z.at(1) == 2;
  }
  const double freq = static_cast<double>(advanced) / n, se = std::sqrt(p * (1 - p) / n);
  EXPECT_LT(std::abs(freq - p), 3 * se) << "freq " << freq << " p " << p;
}

TEST(Synthesize, OutputsMatchTeacherForcedGraph) {
  // Feeding the decoded frames back under teacher forcing reproduces every
  // emitted mean and every advance probability.
  for (std::size_t r : {1u, 2u}) {
    ModelConfig c = tiny_model(r);
    ParameterStore s = spread_params(c, 4, 10.0);
    DecodeConfig d;
    d.mode = DecodeMode::kSample;
    d.seed = 5;
    d.max_groups = 12;
    const std::vector<std::size_t> x{1, 3, 5};
    DecodeResult res = synthesize(c, s, x, d);
    const std::size_t J = res.alignment.z.size();
    ASSERT_EQ(res.y_hat.rows(), J * r);

    Tape tape;
    auto bound = s.bind(tape, false);
    ModelParams m = bind_model(c, bound, tape);
    Var enc = encode(m.encoder, x);
    Var dec = decoder_states(c, m, tape, res.y_hat, false);
    JointCellOutputs grid = joint_grid(c, m, enc, dec);
    FeatureGroups g = group_features(res.y_hat, r);
    for (std::size_t j = 0; j < J; ++j) {
      const std::size_t i = res.alignment.z[j] - 1;
      for (std::size_t k = 0; k < c.group_dim(); ++k) {
        EXPECT_NEAR(grid.mean(i * J + j, k), g.values(j, k), 1e-12) << "group " << j;
      }
      if (j > 0) {
        const std::size_t prev = res.alignment.z[j - 1] - 1;
        const double want = prev + 1 < x.size()
                                ? advance_probability(grid.emit_prob(prev, j), 1.0 - grid.emit_prob(prev, j),
                                                      grid.emit_prob(prev + 1, j))
                                : 0.0;
        EXPECT_NEAR(res.advance_prob[j], want, 1e-12);
      }
    }
  }
}

TEST(Synthesize, LimitBelowInputLengthIsRejected) {
  ModelConfig c = tiny_model();
  ParameterStore s = init_parameters(c, 0);
  DecodeConfig d;
  d.max_groups = 2;
  EXPECT_THROW(synthesize(c, s, {1, 2, 3}, d), ConfigError);
  d.max_groups = 0;
  d.r = 2;
  EXPECT_THROW(synthesize(c, s, {1, 2, 3}, d), ConfigError);
}

TEST(Synthesize, NonTerminatingRunIsReported) {
  // Emit probability pinned near 1: the alignment never advances.
  ModelConfig c = tiny_model();
  ParameterStore s = init_parameters(c, 0);
  for (double& v : s.at("joint.emit.weight").data()) v = 0.0;
  s.at("joint.emit.bias")[0] = 40.0;
  DecodeConfig d;
  d.max_groups = 9;
  DecodeResult r = synthesize(c, s, {1, 2, 3}, d);
  EXPECT_FALSE(r.terminated);
  EXPECT_FALSE(r.stopped);
  EXPECT_EQ(r.alignment.z.size(), 9u);
}

TEST(ExportAlignment, SingleGroupSingleRow) {
  DecodeResult r;
  r.alignment.z = {1};
  r.advance_prob = {0.0};
  const std::string csv = alignment_export_csv(r);
  EXPECT_EQ(csv, "group_index,input_position,advance_prob\n1,1,0\n");
  EXPECT_EQ(parse_alignment_csv(csv, "mem").size(), 1u);
}

TEST(ExportAlignment, RoundTrip) {
  ModelConfig c = tiny_model();
  ParameterStore s = spread_params(c, 6);
  DecodeConfig d;
  d.mode = DecodeMode::kSample;
  d.seed = 3;
  DecodeResult r = synthesize(c, s, {5, 4, 3, 2}, d);
  fs::path dir = fs::temp_directory_path() / "ssnt_decode_test";
  fs::create_directories(dir);
  export_alignment(r, dir / "a.csv");
  const std::string text = read_text_file(dir / "a.csv");
  auto rows = parse_alignment_csv(text, "a.csv");
  ASSERT_EQ(rows.size(), r.alignment.z.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    EXPECT_EQ(rows[j].group, j + 1);
    EXPECT_EQ(rows[j].position, r.alignment.z[j]);
    EXPECT_EQ(rows[j].advance_prob, r.advance_prob[j]);
  }
  EXPECT_THROW(export_alignment(r, dir / "a.csv" / "b.csv"), IoError);
}

}  // namespace
}  // namespace ssnt
