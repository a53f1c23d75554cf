#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "deskalign/autodiff.hpp"
#include "deskalign/params.hpp"

using namespace deskalign;
using namespace deskalign::tn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Softmax, UniformLogits) {
  auto p = softmax(std::vector<double>{0, 0, 0});
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogRatiosGiveOneTwoThreeSixths) {
  auto p = softmax(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)});
  EXPECT_NEAR(p[0], 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(p[1], 2.0 / 6.0, 1e-12);
  EXPECT_NEAR(p[2], 3.0 / 6.0, 1e-12);
}

TEST(Softmax, HighTemperatureFlattens) {
  // At T = 1000 the split is exactly sigmoid(0.005); the 1e-3 band is reached
  // a little further into the limit.
  auto p = softmax(std::vector<double>{5, 0}, 1000.0);
  EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-0.005)), 1e-15);
  for (double t : {2000.0, 1e4, 1e6}) {
    auto q = softmax(std::vector<double>{5, 0}, t);
    EXPECT_NEAR(q[0], 0.5, 1e-3);
    EXPECT_NEAR(q[1], 0.5, 1e-3);
  }
}

TEST(Softmax, RejectsBadInput) {
  EXPECT_THROW(softmax(std::vector<double>{1, 2}, 0.0), std::invalid_argument);
  EXPECT_THROW(softmax(std::vector<double>{1, NAN}), std::invalid_argument);
  EXPECT_THROW(softmax(std::vector<double>{1, INFINITY}), std::invalid_argument);
}

TEST(Softmax, ValidDistributionForExtremeLogits) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> l(7);
    for (auto& v : l) v = rng.normal() * 300.0;
    auto p = softmax(l, rng.uniform(0.01, 5.0));
    double s = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, UniformOverElevenBuckets) {
  Var l = leaf(Tensor({11}, 0.0));
  EXPECT_NEAR(cross_entropy(l, 4)->value.item(), std::log(11.0), 1e-12);
  EXPECT_NEAR(std::log(11.0), 2.3979, 1e-4);
}

TEST(CrossEntropy, ConfidentTargetGivesZeroLoss) {
  Var l = leaf(Tensor({5}, std::vector<double>{0, 0, 200, 0, 0}));
  EXPECT_LT(cross_entropy(l, 2)->value.item(), 1e-12);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Rng rng(11);
  Var l = leaf(random_tensor({5}, rng));
  Var loss = cross_entropy(l, 3);
  backward(loss);
  auto p = softmax(l->value.data);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(l->grad[i], p[i] - (i == 3 ? 1.0 : 0.0), 1e-14);
}

TEST(CrossEntropy, FiniteDifferenceOracle) {
  Rng rng(12);
  ParameterSet ps;
  ps.add("l", random_tensor({5}, rng));
  const double err = grad_check([](ParameterSet& p) { return cross_entropy(p.get("l"), 1); }, ps, 1e-5, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
  Var l = leaf(Tensor({3}, 0.0));
  EXPECT_THROW(cross_entropy(l, 3), std::out_of_range);
}

// ---- attention ---------------------------------------------------------------

namespace {

struct AttnFixture {
  std::size_t seq, dim, heads;
  ParameterSet ps;
  AttnFixture(std::size_t s, std::size_t d, std::size_t h, Rng& rng) : seq(s), dim(d), heads(h) {
    ps.add("x", random_tensor({s, d}, rng));
    ps.add("w_qkv", random_tensor({d, 3 * d}, rng, 0.4));
    // Frozen: a key bias shifts every score in a row equally, so its true
    // gradient is zero and a relative-error check on it measures only noise.
    ps.add("b_qkv", random_tensor({3 * d}, rng, 0.1), false);
    ps.add("w_out", random_tensor({d, d}, rng, 0.4));
  }
  Var forward(ParameterSet& p) const {
    Var qkv = linear(p.get("x"), p.get("w_qkv"), p.get("b_qkv"));
    return matmul(causal_attention(qkv, 1, seq, heads), p.get("w_out"));
  }
};

}  // namespace

TEST(Attention, PrefixIsInvariantToSuffixPerturbation) {
  Rng rng(21);
  AttnFixture f(6, 8, 2, rng);
  NoGradGuard ng;
  const Tensor base = f.forward(f.ps)->value;
  for (std::size_t t = 0; t < f.seq; ++t) {
    ParameterSet q = f.ps;
    for (std::size_t c = 0; c < f.dim; ++c) q.get("x")->value.at(t, c) += 0.37 * (c + 1);
    const Tensor out = f.forward(q)->value;
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < f.dim; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c)) << "row " << r << " perturb " << t;
    }
    bool changed = false;
    for (std::size_t c = 0; c < f.dim; ++c) changed |= out.at(t, c) != base.at(t, c);
    EXPECT_TRUE(changed);
  }
}

TEST(Attention, SingleStepReturnsValues) {
  Rng rng(22);
  const std::size_t d = 8;
  Var qkv = leaf(random_tensor({1, 3 * d}, rng));
  Var out = causal_attention(qkv, 1, 1, 2);
  for (std::size_t c = 0; c < d; ++c) EXPECT_DOUBLE_EQ(out->value[c], qkv->value[2 * d + c]);
}

TEST(Attention, FiniteDifferenceOracle) {
  Rng rng(23);
  AttnFixture f(4, 8, 2, rng);
  Tensor probe = random_tensor({4, 8}, rng);
  auto loss = [&](ParameterSet& p) { return sum(mul(f.forward(p), constant(probe))); };
  EXPECT_LT(grad_check(loss, f.ps, 1e-5, rng, 1000), 1e-4);
}

TEST(Attention, BatchedSequencesAreIndependent) {
  Rng rng(24);
  const std::size_t d = 8, s = 3;
  Tensor a = random_tensor({s, 3 * d}, rng), b = random_tensor({s, 3 * d}, rng);
  Tensor both({2 * s, 3 * d});
  std::copy(a.data.begin(), a.data.end(), both.data.begin());
  std::copy(b.data.begin(), b.data.end(), both.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  NoGradGuard ng;
  const Tensor joint = causal_attention(constant(both), 2, s, 4)->value;
  const Tensor only_b = causal_attention(constant(b), 1, s, 4)->value;
  for (std::size_t i = 0; i < only_b.size(); ++i) EXPECT_EQ(joint[s * d + i], only_b[i]);
}

TEST(Attention, RejectsIndivisibleHeads) {
  Var qkv = leaf(Tensor({2, 3 * 6}, 0.0));
  EXPECT_THROW(causal_attention(qkv, 1, 2, 4), std::invalid_argument);
  EXPECT_THROW(causal_attention(qkv, 1, 3, 2), std::invalid_argument);
}

// ---- other differentiable ops -----------------------------------------------

TEST(GradCheck, LayerNormGeluMlp) {
  Rng rng(31);
  ParameterSet ps;
  ps.add("x", random_tensor({5, 6}, rng));
  ps.add("g", random_tensor({6}, rng, 0.3));
  ps.add("b", random_tensor({6}, rng, 0.3));
  ps.add("w1", random_tensor({6, 10}, rng, 0.5));
  ps.add("b1", random_tensor({10}, rng, 0.1));
  ps.add("w2", random_tensor({10, 3}, rng, 0.5));
  Tensor probe = random_tensor({5, 3}, rng);
  auto loss = [&](ParameterSet& p) {
    Var h = layer_norm(p.get("x"), add_scalar(p.get("g"), 1.0), p.get("b"));
    h = gelu(linear(h, p.get("w1"), p.get("b1")));
    return sum(mul(matmul(h, p.get("w2")), constant(probe)));
  };
  EXPECT_LT(grad_check(loss, ps, 1e-5, rng, 1000), 1e-4);
}

TEST(GradCheck, LinearFunctionIsExact) {
  Rng rng(32);
  ParameterSet ps;
  ps.add("w", random_tensor({12, 12}, rng));
  Tensor probe = random_tensor({12, 12}, rng);
  auto loss = [&](ParameterSet& p) { return sum(mul(p.get("w"), constant(probe))); };
  EXPECT_LT(grad_check(loss, ps, 1e-3, rng), 1e-9);
}

TEST(GradCheck, RejectsBadEps) {
  Rng rng(33);
  ParameterSet ps;
  ps.add("w", Tensor({1}, 0.0));
  auto loss = [](ParameterSet& p) { return sum(p.get("w")); };
  EXPECT_THROW(grad_check(loss, ps, 0.0, rng), std::invalid_argument);
  EXPECT_THROW(grad_check(loss, ps, 0.1, rng), std::invalid_argument);
}

TEST(GradCheck, EmbeddingSumAndGather) {
  Rng rng(34);
  ParameterSet ps;
  ps.add("table", random_tensor({7, 4}, rng));
  const std::vector<std::int64_t> idx{0, 3, -1, 6, 6, 2, 1, -1, -1};
  const std::vector<std::size_t> rows{2, 0, 2};
  Tensor probe = random_tensor({3, 4}, rng);
  auto loss = [&](ParameterSet& p) {
    Var e = embedding_sum(p.get("table"), idx, 3);
    return sum(mul(square(gather_rows(e, rows)), constant(probe)));
  };
  EXPECT_LT(grad_check(loss, ps, 1e-5, rng), 1e-4);
}

TEST(GradCheck, CategoricalNllAndKl) {
  Rng rng(35);
  const std::size_t comps = 3, k = 5, rows = 4;
  ParameterSet ps;
  ps.add("logits", random_tensor({rows, comps * k}, rng));
  Tensor ref = random_tensor({rows, comps * k}, rng);
  const std::vector<std::int64_t> targets{0, 4, 2, 1, -1, 3, 2, 2, 2, 4, 0, 1};
  const std::vector<double> w{1.0, 0.5, 0.0, 2.0};
  auto loss = [&](ParameterSet& p) {
    return add(categorical_nll(p.get("logits"), targets, w, comps, k),
               scale(categorical_kl(p.get("logits"), ref, w, comps, k), 0.7));
  };
  EXPECT_LT(grad_check(loss, ps, 1e-5, rng), 1e-4);
}

TEST(GradCheck, SoftplusSubMeanReshape) {
  Rng rng(36);
  ParameterSet ps;
  ps.add("a", random_tensor({3, 4}, rng, 3.0));
  ps.add("b", random_tensor({3, 4}, rng));
  auto loss = [&](ParameterSet& p) {
    return mean(softplus(reshape(sub(p.get("a"), mul(p.get("b"), p.get("b"))), {12})));
  };
  EXPECT_LT(grad_check(loss, ps, 1e-5, rng), 1e-4);
}

TEST(CategoricalNll, EqualsSumOfCrossEntropies) {
  Rng rng(37);
  const std::size_t comps = 3, k = 11;
  Tensor logits = random_tensor({2, comps * k}, rng);
  const std::vector<std::int64_t> targets{1, 5, 10, 0, 7, 3};
  const std::vector<double> w{1.0, 1.0};
  NoGradGuard ng;
  const double joint = categorical_nll(constant(logits), targets, w, comps, k)->value.item();
  double separate = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < comps; ++c) {
      Tensor block({k}, std::vector<double>(logits.row(r).begin() + c * k, logits.row(r).begin() + (c + 1) * k));
      separate += cross_entropy(constant(block), static_cast<std::size_t>(targets[r * comps + c]))->value.item();
    }
  }
  EXPECT_NEAR(joint, separate, 1e-12);
}

TEST(CategoricalKl, ZeroWhenLogitsMatchReference) {
  Rng rng(38);
  Tensor logits = random_tensor({3, 22}, rng);
  const std::vector<double> w{1.0, 1.0, 1.0};
  EXPECT_EQ(categorical_kl(leaf(logits), logits, w, 2, 11)->value.item(), 0.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Var x = leaf(Tensor({1}, std::vector<double>{3.0}));
  Var y = mul(x, x);
  Var z = add(y, mul(y, x));  // x^2 + x^3
  backward(z);
  EXPECT_DOUBLE_EQ(x->grad[0], 2 * 3.0 + 3 * 9.0);
}

TEST(Backward, NoGradGuardBuildsNoGraph) {
  Var x = leaf(Tensor({2}, 1.0));
  NoGradGuard ng;
  Var y = mul(x, x);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

// ---- optimizer ---------------------------------------------------------------

TEST(AdamW, ZeroGradientZeroDecayIsIdentity) {
  ParameterSet ps;
  ps.add("w", Tensor({3}, std::vector<double>{1, -2, 3}));
  ps.zero_grad();
  OptimizerState st;
  st.config.weight_decay = 0.0;
  adamw_step(ps, st);
  EXPECT_EQ(ps.get("w")->value, Tensor({3}, std::vector<double>({1, -2, 3})));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterSet ps;
  ps.add("w", Tensor({1}, 0.0));
  ps.zero_grad();
  ps.get("w")->grad[0] = 1.0;
  OptimizerState st;
  st.config.lr = 0.1;
  st.config.weight_decay = 0.0;
  adamw_step(ps, st);
  EXPECT_NEAR(ps.get("w")->value[0], -0.1, 1e-7);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, FrozenParameterUntouched) {
  ParameterSet ps;
  ps.add("a", Tensor({2}, 1.0));
  ps.add("b", Tensor({2}, 1.0), false);
  ps.zero_grad();
  ps.get("a")->grad = Tensor({2}, 0.5);
  ps.get("b")->grad = Tensor({2}, 9.0);
  OptimizerState st;
  adamw_step(ps, st);
  EXPECT_EQ(ps.get("b")->value, Tensor({2}, 1.0));
  EXPECT_NE(ps.get("a")->value, Tensor({2}, 1.0));
}

TEST(AdamW, ZeroLearningRateIsIdentity) {
  Rng rng(41);
  ParameterSet ps;
  ps.add("w", random_tensor({4, 4}, rng));
  const ParameterSet before = ps;
  ps.zero_grad();
  for (auto& g : ps.get("w")->grad.data) g = rng.normal();
  OptimizerState st;
  st.config.lr = 0.0;
  adamw_step(ps, st);
  EXPECT_TRUE(ps.same_values(before));
}

TEST(AdamW, MissingGradientThrows) {
  ParameterSet ps;
  ps.add("w", Tensor({2}, 0.0));
  OptimizerState st;
  EXPECT_THROW(adamw_step(ps, st), std::logic_error);
}

TEST(AdamW, ClipsByGlobalNorm) {
  ParameterSet a, b;
  a.add("w", Tensor({1}, 0.0));
  b.add("w", Tensor({1}, 0.0));
  a.zero_grad();
  b.zero_grad();
  a.get("w")->grad[0] = 50.0;
  b.get("w")->grad[0] = 1.0;
  OptimizerState sa, sb;
  EXPECT_DOUBLE_EQ(adamw_step(a, sa), 50.0);
  adamw_step(b, sb);
  // After clipping both see a unit gradient.
  EXPECT_DOUBLE_EQ(a.get("w")->value[0], b.get("w")->value[0]);
  EXPECT_DOUBLE_EQ(sa.first_moment["w"][0], sb.first_moment["w"][0]);
}

TEST(ParameterSet, CopiesAreDeep) {
  ParameterSet a;
  a.add("w", Tensor({2}, 1.0));
  ParameterSet b = a;
  b.get("w")->value[0] = 5.0;
  EXPECT_EQ(a.get("w")->value[0], 1.0);
  EXPECT_THROW(a.add("w", Tensor({1})), std::invalid_argument);
  EXPECT_THROW(a.get("nope"), std::out_of_range);
}

// ---- sampling ----------------------------------------------------------------

TEST(SampleCategorical, OneHotAlwaysPicksIt) {
  Rng rng(51);
  const std::vector<double> p{0, 0, 1, 0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(sample_categorical(p, rng), 2u);
}

TEST(SampleCategorical, FairCoinWithinThreeSigma) {
  Rng rng(52);
  const std::vector<double> p{0.5, 0.5};
  int zeros = 0;
  for (int i = 0; i < 10000; ++i) zeros += sample_categorical(p, rng) == 0;
  EXPECT_NEAR(zeros, 5000, 150);
}

TEST(SampleCategorical, DeterministicGivenState) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  Rng a(53), b(53);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_categorical(p, a), sample_categorical(p, b));
}

TEST(SampleCategorical, RejectsInvalidDistribution) {
  Rng rng(54);
  EXPECT_THROW(sample_categorical(std::vector<double>{0.5, 0.4}, rng), std::invalid_argument);
  EXPECT_THROW(sample_categorical(std::vector<double>{1.5, -0.5}, rng), std::invalid_argument);
  EXPECT_THROW(sample_categorical(std::vector<double>{}, rng), std::invalid_argument);
}

// ---- checkpoint container ----------------------------------------------------

TEST(CheckpointFile, RoundTripIsBitExact) {
  Rng rng(61);
  Checkpoint c;
  c.header = R"({"kind":"test"})";
  c.params.add("a.w", random_tensor({3, 5}, rng));
  c.params.add("b", Tensor({1}, std::vector<double>{-0.0}), false);
  c.params.add("c", Tensor({2}, std::vector<double>{1e-308, 0.1 + 0.2}));
  const auto path = (std::filesystem::temp_directory_path() / "deskalign_ckpt_test.bin").string();
  write_checkpoint(path, c);
  Checkpoint r = read_checkpoint(path);
  EXPECT_EQ(r.header, c.header);
  EXPECT_TRUE(r.params.same_values(c.params));
  EXPECT_FALSE(r.params.entries()[1].trainable);
  EXPECT_TRUE(std::signbit(r.params.get("b")->value[0]));
  EXPECT_EQ(encode_checkpoint(r), encode_checkpoint(c));
  std::filesystem::remove(path);
}

TEST(CheckpointFile, RejectsCorruption) {
  Checkpoint c;
  c.params.add("w", Tensor({4}, 1.0));
  std::string bytes = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), std::runtime_error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), std::runtime_error);
}
