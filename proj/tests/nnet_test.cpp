#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ssnt/nnet.hpp"
#include "reference.hpp"

namespace ssnt {
namespace {

using ref::sigm;

void reference_lstm_step(const Tensor& w_ih, const Tensor& w_hh, const Tensor& b, const std::vector<double>& x,
                         std::vector<double>& h, std::vector<double>& c) {
  ref::lstm_step(w_ih, w_hh, b, x, h, c);
}

ParameterStore lstm_store(std::size_t d, std::size_t h, std::uint64_t seed, double scale = 0.05) {
  ParameterStore s;
  ParamInit init(seed);
  s.add("cell.w_ih", init.uniform({4 * h, d}, scale));
  s.add("cell.w_hh", init.uniform({4 * h, h}, scale));
  Tensor b = init.uniform({4 * h}, scale);
  s.add("cell.bias", b);
  return s;
}

TEST(LstmStep, ZeroWeightsGiveZeroOutput) {
  ParameterStore s;
  s.add("cell.w_ih", Tensor({8, 3}));
  s.add("cell.w_hh", Tensor({8, 2}));
  s.add("cell.bias", Tensor({8}));
  Tape tape;
  auto cell = bind_lstm(s.bind(tape), "cell");
  auto st = lstm_step(cell, tape.constant(Tensor::matrix(1, 3, {1.0, -2.0, 0.5})), lstm_zero_state(tape, 2));
  for (double v : st.h.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LstmStep, ForgetBiasCarriesCell) {
  ParameterStore s;
  ParamInit init(0);
  add_lstm_params(s, init, "cell", 3, 2);
  for (auto& [name, t] : s)
    for (double& v : t.data()) v = 0.0;
  Tensor& b = s.at("cell.bias");
  b[2] = b[3] = 1.0;
  Tape tape;
  auto cell = bind_lstm(s.bind(tape), "cell");
  LstmState st{tape.constant(Tensor({1, 2})), tape.constant(Tensor({1, 2}, 1.0))};
  auto out = lstm_step(cell, tape.constant(Tensor({1, 3}, 0.3)), st);
  EXPECT_NEAR(out.c.value()[0], sigm(1.0), 1e-15);
  EXPECT_NEAR(out.c.value()[0], 0.731, 1e-3);
}

TEST(LstmStep, InitSetsForgetBiasToOne) {
  ParameterStore s;
  ParamInit init(0);
  add_lstm_params(s, init, "cell", 3, 2);
  const Tensor& b = s.at("cell.bias");
  EXPECT_EQ(b[2], 1.0);
  EXPECT_EQ(b[3], 1.0);
  EXPECT_LT(std::abs(b[0]), 0.05);
}

TEST(LstmStep, ThreeStepsMatchScalarReference) {
  ParameterStore s = lstm_store(3, 4, 0, 0.5);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> xs(3, std::vector<double>(3));
  for (auto& x : xs)
    for (double& v : x) v = nd(rng);

  Tape tape;
  auto cell = bind_lstm(s.bind(tape), "cell");
  LstmState st = lstm_zero_state(tape, 4);
  std::vector<double> h(4, 0.0), c(4, 0.0);
  for (const auto& x : xs) {
    st = lstm_step(cell, tape.constant(Tensor::matrix(1, 3, x)), st);
    reference_lstm_step(s.at("cell.w_ih"), s.at("cell.w_hh"), s.at("cell.bias"), x, h, c);
    for (std::size_t u = 0; u < 4; ++u) {
      EXPECT_NEAR(st.h.value()[u], h[u], 1e-14);
      EXPECT_NEAR(st.c.value()[u], c[u], 1e-14);
    }
  }
}

TEST(LstmStep, DimensionMismatch) {
  ParameterStore s = lstm_store(3, 2, 0);
  Tape tape;
  auto cell = bind_lstm(s.bind(tape), "cell");
  EXPECT_THROW(lstm_step(cell, tape.constant(Tensor({1, 4})), lstm_zero_state(tape, 2)), ShapeError);
  EXPECT_THROW(lstm_step(cell, tape.constant(Tensor({1, 3})), lstm_zero_state(tape, 3)), ShapeError);
}

TEST(LstmStep, GradientMatchesFiniteDifferences) {
  ParameterStore s = lstm_store(3, 4, 0, 0.5);
  auto f = [](Tape& t, const BoundParameters& p) {
    auto cell = bind_lstm(p, "cell");
    LstmState st{t.constant(Tensor::matrix(1, 4, {0.1, -0.2, 0.3, 0.05})),
                 t.constant(Tensor::matrix(1, 4, {0.4, 0.2, -0.6, 0.1}))};
    st = lstm_step(cell, t.constant(Tensor::matrix(1, 3, {0.7, -1.1, 0.2})), st);
    st = lstm_step(cell, t.constant(Tensor::matrix(1, 3, {-0.3, 0.5, 0.9})), st);
    return add(sum(st.h), sum(mul(st.c, st.c)));
  };
  auto r = grad_check(f, s, 1e-5, 1e-6);
  EXPECT_TRUE(r.passed) << r.max_relative_error << " at " << r.worst_entry;
}

struct BiFixture {
  ParameterStore store;
  BiFixture(std::size_t d, std::size_t h, bool tied) {
    ParamInit init(0);
    add_lstm_params(store, init, "fwd", d, h);
    if (tied) {
      for (const char* n : {"w_ih", "w_hh", "bias"}) store.add(std::string("bwd.") + n, store.at(std::string("fwd.") + n));
    } else {
      add_lstm_params(store, init, "bwd", d, h);
    }
    for (auto& [_, t] : store)
      for (double& v : t.data()) v *= 10.0;  // larger weights so outputs are clearly input-dependent
  }
};

TEST(BiLstm, SingleFrame) {
  BiFixture fx(3, 2, true);
  Tape tape;
  auto p = fx.store.bind(tape);
  BiLstmParams bi{bind_lstm(p, "fwd"), bind_lstm(p, "bwd")};
  Var out = bilstm_apply(bi, tape.constant(Tensor::matrix(1, 3, {0.2, -0.4, 0.9})));
  ASSERT_EQ(out.shape(), (Shape{1, 4}));
  // Tied cells on a single frame give identical halves.
  EXPECT_EQ(out.value()[0], out.value()[2]);
  EXPECT_EQ(out.value()[1], out.value()[3]);
}

TEST(BiLstm, PalindromeWithTiedCellsIsMirrorSymmetric) {
  BiFixture fx(2, 3, true);
  Tape tape;
  auto p = fx.store.bind(tape);
  BiLstmParams bi{bind_lstm(p, "fwd"), bind_lstm(p, "bwd")};
  Tensor x = Tensor::matrix(5, 2, {0.1, 0.5, -0.3, 0.2, 0.8, -0.7, -0.3, 0.2, 0.1, 0.5});
  Tensor out = bilstm_apply(bi, tape.constant(x)).value();
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t u = 0; u < 3; ++u) EXPECT_NEAR(out(t, u), out(4 - t, 3 + u), 1e-15);
}

TEST(BiLstm, EqualsTwoUnidirectionalRuns) {
  BiFixture fx(3, 2, false);
  std::mt19937_64 rng(0);
  std::normal_distribution<double> nd;
  Tensor x({4, 3});
  for (double& v : x.data()) v = nd(rng);

  Tape tape;
  auto p = fx.store.bind(tape);
  Tensor out = bilstm_apply({bind_lstm(p, "fwd"), bind_lstm(p, "bwd")}, tape.constant(x)).value();

  auto run = [&](const char* prefix, bool reverse) {
    std::vector<double> h(2, 0.0), c(2, 0.0);
    std::vector<std::vector<double>> rows(4);
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t t = reverse ? 3 - k : k;
      std::vector<double> xt(x.data().begin() + 3 * t, x.data().begin() + 3 * t + 3);
      reference_lstm_step(fx.store.at(std::string(prefix) + ".w_ih"), fx.store.at(std::string(prefix) + ".w_hh"),
                          fx.store.at(std::string(prefix) + ".bias"), xt, h, c);
      rows[t] = h;
    }
    return rows;
  };
  auto f = run("fwd", false);
  auto b = run("bwd", true);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t u = 0; u < 2; ++u) {
      EXPECT_NEAR(out(t, u), f[t][u], 1e-14);
      EXPECT_NEAR(out(t, 2 + u), b[t][u], 1e-14);
    }
}

TEST(BiLstm, EmptyInputIsAnError) {
  EXPECT_THROW(Tensor({0, 3}), ShapeError);
}

ParameterStore prenet_store(std::size_t d, std::size_t p1, std::size_t p2) {
  ParameterStore s;
  ParamInit init(0);
  add_dense_params(s, init, "fc1", d, p1);
  add_dense_params(s, init, "fc2", p1, p2);
  for (auto& [_, t] : s)
    for (double& v : t.data()) v *= 20.0;
  return s;
}

TEST(Prenet, NoDropoutIsTwoLayerMlp) {
  ParameterStore s = prenet_store(3, 4, 2);
  Tape tape;
  auto p = s.bind(tape);
  PrenetParams pn{bind_dense(p, "fc1"), bind_dense(p, "fc2"), 0.0};
  std::vector<double> x{0.5, -1.0, 2.0};
  Tensor out = prenet_apply(pn, tape.constant(Tensor::matrix(1, 3, x)), true).value();
  const Tensor &w1 = s.at("fc1.weight"), &b1 = s.at("fc1.bias"), &w2 = s.at("fc2.weight"), &b2 = s.at("fc2.bias");
  std::vector<double> h(4);
  for (std::size_t r = 0; r < 4; ++r) {
    double a = b1[r];
    for (std::size_t k = 0; k < 3; ++k) a += w1(r, k) * x[k];
    h[r] = std::max(a, 0.0);
  }
  for (std::size_t r = 0; r < 2; ++r) {
    double a = b2[r];
    for (std::size_t k = 0; k < 4; ++k) a += w2(r, k) * h[k];
    EXPECT_NEAR(out[r], std::max(a, 0.0), 1e-14);
  }
}

TEST(Prenet, NegativePreactivationsGiveZero) {
  ParameterStore s;
  s.add("fc1.weight", Tensor({4, 3}, 0.0));
  s.add("fc1.bias", Tensor({4}, 1.0));
  s.add("fc2.weight", Tensor({2, 4}, -1.0));
  s.add("fc2.bias", Tensor({2}, -0.5));
  Tape tape;
  auto p = s.bind(tape);
  Var out = prenet_apply({bind_dense(p, "fc1"), bind_dense(p, "fc2"), 0.0}, tape.constant(Tensor({1, 3}, 1.0)), false);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Prenet, DropoutKeepsHalfOnAverage) {
  Tape tape(0);
  Var x = tape.constant(Tensor({100000}, 1.0));
  Var y = dropout(x, 0.5);
  double kept = 0.0, mean = 0.0;
  for (double v : y.value().data()) {
    kept += v != 0.0;
    mean += v;
  }
  kept /= 1e5;
  mean /= 1e5;
  EXPECT_NEAR(kept, 0.5, 0.005);
  EXPECT_NEAR(mean, 1.0, 0.01);
}

TEST(Prenet, InferenceWithoutDropoutIsDeterministic) {
  ParameterStore s = prenet_store(3, 8, 8);
  auto run = [&](std::uint64_t seed, bool drop) {
    Tape tape(seed);
    auto p = s.bind(tape);
    PrenetParams pn{bind_dense(p, "fc1"), bind_dense(p, "fc2"), 0.5};
    return prenet_apply(pn, tape.constant(Tensor({1, 3}, 0.4)), drop).value();
  };
  EXPECT_EQ(run(1, false), run(2, false));
  EXPECT_NE(run(1, true), run(2, true));
}

ParameterStore encoder_store(std::size_t V, std::size_t e, std::size_t n_ff, std::size_t h) {
  ParameterStore s;
  ParamInit init(0);
  add_encoder_params(s, init, V, e, n_ff, h);
  for (auto& [name, t] : s)
    if (name != "encoder.embedding")
      for (double& v : t.data()) v *= 10.0;
  return s;
}

TEST(Encode, ShapeContract) {
  ParameterStore s = encoder_store(5, 4, 1, 3);
  Tape tape;
  auto enc = bind_encoder(s.bind(tape), 1);
  EXPECT_EQ(encode(enc, {2}).shape(), (Shape{1, 6}));
  EXPECT_EQ(encode(enc, {2, 4, 1, 1}).shape(), (Shape{4, 6}));
}

TEST(Encode, SharedPrefixSeesDifferentSuffix) {
  ParameterStore s = encoder_store(5, 4, 1, 3);
  Tape tape;
  auto enc = bind_encoder(s.bind(tape), 1);
  Tensor a = encode(enc, {1, 2, 3}).value();
  Tensor b = encode(enc, {1, 2, 4}).value();
  bool differs = false;
  for (std::size_t u = 0; u < 6; ++u) differs |= a(0, u) != b(0, u);
  EXPECT_TRUE(differs);
  // Forward halves on the shared prefix agree.
  for (std::size_t u = 0; u < 3; ++u) EXPECT_EQ(a(1, u), b(1, u));
}

TEST(Encode, MatchesComposedOracle) {
  ParameterStore s = encoder_store(4, 3, 1, 2);
  const std::vector<std::size_t> ids{3, 0, 2};
  Tape tape;
  Tensor out = encode(bind_encoder(s.bind(tape), 1), ids).value();

  const Tensor& emb = s.at("encoder.embedding");
  const Tensor &w = s.at("encoder.ff0.weight"), &b = s.at("encoder.ff0.bias");
  std::vector<std::vector<double>> x(3, std::vector<double>(3));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t r = 0; r < 3; ++r) {
      double a = b[r];
      for (std::size_t k = 0; k < 3; ++k) a += w(r, k) * emb(ids[t], k);
      x[t][r] = std::tanh(a);
    }
  for (int dir = 0; dir < 2; ++dir) {
    const std::string p = dir == 0 ? "encoder.bilstm.fwd" : "encoder.bilstm.bwd";
    std::vector<double> h(2, 0.0), c(2, 0.0);
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t t = dir == 0 ? k : 2 - k;
      reference_lstm_step(s.at(p + ".w_ih"), s.at(p + ".w_hh"), s.at(p + ".bias"), x[t], h, c);
      for (std::size_t u = 0; u < 2; ++u) EXPECT_NEAR(out(t, dir * 2 + u), h[u], 1e-14);
    }
  }
}

TEST(Encode, UnknownIdNamesPosition) {
  ParameterStore s = encoder_store(4, 3, 0, 2);
  Tape tape;
  auto enc = bind_encoder(s.bind(tape), 0);
  try {
    encode(enc, {1, 2, 7});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("position 3"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace ssnt
