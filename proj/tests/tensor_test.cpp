#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include "entmask/autograd.hpp"
#include "entmask/rng.hpp"
#include "entmask/tensor.hpp"
#include "oracles.hpp"

using namespace entmask;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> dims, double lo = -1.0,
                     double hi = 1.0, bool requires_grad = true) {
  std::vector<float> v(static_cast<size_t>(numel_of(dims)));
  for (float& x : v) {
    x = static_cast<float>(lo + (hi - lo) * rng.uniform());
  }
  return Tensor::from_values(std::move(dims), std::move(v), requires_grad);
}

// Scalarizes an op output with a fixed random projection so every element
// of the output influences the loss.
Tensor weigh(Tape* tape, const Tensor& t, const Tensor& w) {
  return sum(tape, mul(tape, t, w));
}

void check_gradients(const std::function<Tensor(Tape*)>& build,
                     std::vector<Tensor> inputs, const char* label) {
  for (Tensor& in : inputs) in.drop_grad();
  Tape tape;
  Tensor loss = build(&tape);
  ASSERT_EQ(loss.numel(), 1) << label;
  tape.backward(loss);
  auto forward = [&]() { return static_cast<double>(build(nullptr).values()[0]); };
  for (size_t which = 0; which < inputs.size(); ++which) {
    Tensor& in = inputs[which];
    for (int64_t i = 0; i < in.numel(); ++i) {
      const double analytic = in.has_grad() ? in.grad()[static_cast<size_t>(i)] : 0.0;
      const double fd = oracle::central_diff(forward, &in.values()[static_cast<size_t>(i)]);
      EXPECT_TRUE(oracle::grads_agree(analytic, fd))
          << label << ": input " << which << " coord " << i << " analytic "
          << analytic << " fd " << fd;
    }
  }
}

}  // namespace

TEST(Rng, SubstreamsAreDistinctAndStable) {
  const uint64_t base = 1234;
  EXPECT_EQ(derive_seed(base, "shuffle"), derive_seed(base, "shuffle"));
  EXPECT_NE(derive_seed(base, "shuffle"), derive_seed(base, "dropout"));
  EXPECT_NE(derive_seed(base, "shuffle", 0), derive_seed(base, "shuffle", 1));
  EXPECT_NE(derive_seed(base, "dropout", 3, 4), derive_seed(base, "dropout", 4, 3));
  EXPECT_NE(derive_seed(base, "shuffle"), derive_seed(base + 1, "shuffle"));
}

TEST(Rng, DeterministicStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformBounds) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const uint64_t x = rng.uniform_below(17);
    EXPECT_LT(x, 17u);
    const int y = rng.uniform_int(-3, 5);
    EXPECT_GE(y, -3);
    EXPECT_LE(y, 5);
  }
  EXPECT_THROW(rng.uniform_below(0), ContractError);
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  const int n = 20000;
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    mean += x;
    sq += x * x;
  }
  mean /= n;
  const double var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Rng, TruncatedNormalRespectsClip) {
  Rng rng(13);
  for (int i = 0; i < 5000; ++i) {
    EXPECT_LE(std::abs(rng.truncated_normal(0.02)), 0.04 + 1e-12);
  }
}

TEST(Rng, SampleWithoutReplacement) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 30);
    const int k = rng.uniform_int(0, n);
    std::vector<int> s = rng.sample_without_replacement(n, k);
    EXPECT_EQ(static_cast<int>(s.size()), k);
    std::set<int> uniq(s.begin(), s.end());
    EXPECT_EQ(static_cast<int>(uniq.size()), k);
    for (int v : s) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, n);
    }
  }
  EXPECT_THROW(rng.sample_without_replacement(3, 4), ContractError);
}

TEST(Rng, ShuffleDeterministic) {
  std::vector<int> a(20), b(20);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), 0);
  Rng r1(99), r2(99);
  r1.shuffle(a);
  r2.shuffle(b);
  EXPECT_EQ(a, b);
  std::vector<int> c(20);
  std::iota(c.begin(), c.end(), 0);
  Rng r3(100);
  r3.shuffle(c);
  EXPECT_NE(a, c);
}

TEST(Tensor, ShapeAndAccess) {
  Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2);
  EXPECT_EQ(t.cols(), 3);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_FLOAT_EQ(t.at(1, 2), 6.0f);
  EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
  Tensor bad = Tensor::from_values({2}, {1.0f, std::nanf("")});
  EXPECT_THROW(check_finite(bad, "bad"), NumericError);
}

TEST(Matmul, IdentityAndScalar) {
  Tensor id = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from_values({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(nullptr, id, b);
  for (int64_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(c.data()[i], b.data()[i]);
  Tensor s = matmul(nullptr, Tensor::from_values({1, 1}, {2}),
                    Tensor::from_values({1, 1}, {3}));
  EXPECT_FLOAT_EQ(s.data()[0], 6.0f);
}

TEST(Matmul, MatchesNaiveOracle) {
  Rng rng(21);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tensor c = matmul(nullptr, a, b);
  std::vector<double> ad(a.values().begin(), a.values().end());
  std::vector<double> bd(b.values().begin(), b.values().end());
  std::vector<double> ref = oracle::matmul(ad, bd, 3, 4, 2);
  for (int64_t i = 0; i < c.numel(); ++i) {
    EXPECT_NEAR(c.data()[i], ref[static_cast<size_t>(i)], 1e-6);
  }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(nullptr, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
  }
}

TEST(Softmax, FrozenCases) {
  Tensor z = softmax_rows(nullptr, Tensor::from_values({1, 2}, {0, 0}));
  EXPECT_NEAR(z.data()[0], 0.5, 1e-7);
  EXPECT_NEAR(z.data()[1], 0.5, 1e-7);
  Tensor big = softmax_rows(nullptr, Tensor::from_values({1, 2}, {1000, 0}));
  EXPECT_NEAR(big.data()[0], 1.0, 1e-6);
  EXPECT_NEAR(big.data()[1], 0.0, 1e-6);
  EXPECT_TRUE(std::isfinite(big.data()[0]));
  Tensor t = softmax_rows(nullptr, Tensor::from_values({1, 3}, {1, 2, 3}));
  std::vector<double> ref = oracle::softmax({1, 2, 3});
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(t.data()[j], ref[static_cast<size_t>(j)], 1e-6);
}

TEST(Softmax, RowsSumToOneAndStayPositive) {
  Rng rng(31);
  Tensor x = random_tensor(rng, {8, 16}, -30.0, 30.0, false);
  Tensor p = softmax_rows(nullptr, x);
  for (int i = 0; i < 8; ++i) {
    double s = 0.0;
    for (int j = 0; j < 16; ++j) {
      EXPECT_GT(p.at(i, j), 0.0f);
      s += p.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, FrozenCases) {
  Tensor uniform = Tensor::from_values({1, 4}, {0, 0, 0, 0});
  Tensor l1 = cross_entropy(nullptr, uniform, {2});
  EXPECT_NEAR(l1.data()[0], std::log(4.0), 1e-6);
  Tensor confident = Tensor::from_values({1, 2}, {50, 0});
  Tensor l2 = cross_entropy(nullptr, confident, {0});
  EXPECT_NEAR(l2.data()[0], 0.0, 1e-6);
  EXPECT_THROW(cross_entropy(nullptr, uniform, {4}), IndexError);
}

TEST(CrossEntropy, MatchesHighPrecisionOracle) {
  Rng rng(41);
  Tensor logits = random_tensor(rng, {2, 5}, -3.0, 3.0, false);
  std::vector<int> targets = {3, 1};
  Tensor loss = cross_entropy(nullptr, logits, targets);
  double ref = 0.0;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> row(5);
    for (int j = 0; j < 5; ++j) row[static_cast<size_t>(j)] = logits.at(i, j);
    ref += oracle::cross_entropy(row, targets[static_cast<size_t>(i)]);
  }
  ref /= 2.0;
  EXPECT_NEAR(loss.data()[0], ref, 1e-5);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from_values({3}, {5, -1, 2}, true);
  Tape tape;
  Tensor loss = sum(&tape, x);
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(x.grad()[static_cast<size_t>(i)], 1.0f);
}

TEST(Backward, ElementwiseQuadratic) {
  Tensor x = Tensor::from_values({2}, {2, 3}, true);
  Tape tape;
  Tensor loss = sum(&tape, mul(&tape, x, x));
  tape.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 4.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 6.0f);
}

TEST(Backward, AccumulatesAcrossUses) {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tape tape;
  Tensor loss = add(&tape, sum(&tape, x), sum(&tape, mul(&tape, x, x)));
  tape.backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f + 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 1.0f + 4.0f);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tape tape;
  Tensor y = mul(&tape, x, x);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Gradients, Matmul) {
  Rng rng(101);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tensor w = random_tensor(rng, {3, 2}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, matmul(t, a, b), w); }, {a, b}, "matmul");
}

TEST(Gradients, AddAndBias) {
  Rng rng(102);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  Tensor bias = random_tensor(rng, {4});
  Tensor w = random_tensor(rng, {3, 4}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, add_bias(t, add(t, a, b), bias), w); },
      {a, b, bias}, "add/add_bias");
}

TEST(Gradients, MulAndScale) {
  Rng rng(103);
  Tensor a = random_tensor(rng, {2, 5});
  Tensor b = random_tensor(rng, {2, 5});
  Tensor w = random_tensor(rng, {2, 5}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, scale(t, mul(t, a, b), 1.7), w); },
      {a, b}, "mul/scale");
}

TEST(Gradients, SoftmaxRows) {
  Rng rng(104);
  Tensor a = random_tensor(rng, {3, 5}, -2.0, 2.0);
  Tensor w = random_tensor(rng, {3, 5}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, softmax_rows(t, a), w); }, {a}, "softmax");
}

TEST(Gradients, GeluAndRelu) {
  Rng rng(105);
  Tensor a = random_tensor(rng, {2, 6}, -2.0, 2.0);
  for (float& v : a.values()) {
    if (std::abs(v) < 0.05f) v = 0.25f;
  }
  Tensor w = random_tensor(rng, {2, 6}, -0.5, 0.5, false);
  check_gradients([&](Tape* t) { return weigh(t, gelu(t, a), w); }, {a}, "gelu");
  check_gradients([&](Tape* t) { return weigh(t, relu(t, a), w); }, {a}, "relu");
}

TEST(Gradients, LayerNorm) {
  Rng rng(106);
  Tensor a = random_tensor(rng, {3, 8});
  Tensor gamma = random_tensor(rng, {8}, 0.5, 1.5);
  Tensor beta = random_tensor(rng, {8}, -0.2, 0.2);
  Tensor w = random_tensor(rng, {3, 8}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, layer_norm(t, a, gamma, beta), w); },
      {a, gamma, beta}, "layer_norm");
}

TEST(Gradients, GatherRows) {
  Rng rng(107);
  Tensor table = random_tensor(rng, {6, 4});
  std::vector<int> idx = {0, 3, 3, 5};
  Tensor w = random_tensor(rng, {4, 4}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, gather_rows(t, table, idx), w); }, {table},
      "gather_rows");
  EXPECT_THROW(gather_rows(nullptr, table, {6}), IndexError);
}

TEST(Gradients, ShapeMoves) {
  Rng rng(108);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor w = random_tensor(rng, {2, 6}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) {
        Tensor tr = transpose(t, a);
        Tensor rs = reshape(t, tr, {2, 6});
        return weigh(t, rs, w);
      },
      {a}, "transpose/reshape");
  Tensor w2 = random_tensor(rng, {3, 4}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) {
        Tensor left = slice_cols(t, a, 0, 2);
        Tensor right = slice_cols(t, a, 2, 4);
        return weigh(t, concat_cols(t, {right, left}), w2);
      },
      {a}, "slice/concat");
}

TEST(Gradients, DropoutSeeded) {
  Rng rng(109);
  Tensor a = random_tensor(rng, {4, 4});
  Tensor w = random_tensor(rng, {4, 4}, -0.5, 0.5, false);
  check_gradients(
      [&](Tape* t) { return weigh(t, dropout(t, a, 0.5, 77), w); }, {a},
      "dropout");
  Tensor d1 = dropout(nullptr, a, 0.5, 77);
  Tensor d2 = dropout(nullptr, a, 0.5, 77);
  EXPECT_EQ(0, std::memcmp(d1.data(), d2.data(), sizeof(float) * 16));
  Tensor d3 = dropout(nullptr, a, 0.5, 78);
  EXPECT_NE(0, std::memcmp(d1.data(), d3.data(), sizeof(float) * 16));
  EXPECT_THROW(dropout(nullptr, a, 1.0, 1), ContractError);
}

TEST(Gradients, CrossEntropy) {
  Rng rng(110);
  Tensor logits = random_tensor(rng, {4, 6}, -2.0, 2.0);
  std::vector<int> targets = {1, 0, 5, 2};
  check_gradients(
      [&](Tape* t) { return cross_entropy(t, logits, targets); }, {logits},
      "cross_entropy");
}

TEST(Gradients, MaskedCrossEntropyZeroOutsideSelection) {
  Rng rng(111);
  Tensor logits = random_tensor(rng, {5, 7}, -2.0, 2.0);
  std::vector<int> targets = {1, 0, 5, 2, 3};
  std::vector<uint8_t> selected = {1, 0, 1, 0, 0};
  Tape tape;
  Tensor loss = masked_cross_entropy(&tape, logits, targets, selected);
  tape.backward(loss);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 7; ++j) {
      const float g = logits.grad()[static_cast<size_t>(i) * 7 + j];
      if (!selected[static_cast<size_t>(i)]) {
        EXPECT_EQ(g, 0.0f) << "row " << i << " col " << j;
      }
    }
  }
  check_gradients(
      [&](Tape* t) { return masked_cross_entropy(t, logits, targets, selected); },
      {logits}, "masked_cross_entropy");
  EXPECT_THROW(
      masked_cross_entropy(nullptr, logits, targets, {0, 0, 0, 0, 0}),
      ContractError);
}

TEST(Gradients, SoftCrossEntropy) {
  Rng rng(112);
  Tensor logits = random_tensor(rng, {3, 6}, -2.0, 2.0);
  Tensor teacher = softmax_rows(nullptr, random_tensor(rng, {3, 6}, -2.0, 2.0, false));
  std::vector<uint8_t> selected = {1, 1, 0};
  Tensor loss = soft_cross_entropy(nullptr, logits, teacher, selected);
  double ref = 0.0;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> row(6), q(6);
    for (int j = 0; j < 6; ++j) {
      row[static_cast<size_t>(j)] = logits.at(i, j);
      q[static_cast<size_t>(j)] = teacher.at(i, j);
    }
    ref += oracle::soft_cross_entropy(row, q);
  }
  ref /= 2.0;
  EXPECT_NEAR(loss.data()[0], ref, 1e-5);
  check_gradients(
      [&](Tape* t) { return soft_cross_entropy(t, logits, teacher, selected); },
      {logits}, "soft_cross_entropy");
}

TEST(Gradients, FrozenInputGetsNone) {
  Rng rng(113);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor frozen = random_tensor(rng, {2, 3});
  frozen.set_requires_grad(false);
  Tape tape;
  Tensor loss = sum(&tape, mul(&tape, a, frozen));
  tape.backward(loss);
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Forward, BitIdenticalReruns) {
  Rng rng(114);
  Tensor a = random_tensor(rng, {4, 8});
  Tensor b = random_tensor(rng, {8, 8});
  auto run = [&]() {
    Tensor h = matmul(nullptr, a, b);
    h = dropout(nullptr, h, 0.2, 55);
    h = gelu(nullptr, h);
    return softmax_rows(nullptr, h);
  };
  Tensor r1 = run();
  Tensor r2 = run();
  EXPECT_EQ(0, std::memcmp(r1.data(), r2.data(),
                           sizeof(float) * static_cast<size_t>(r1.numel())));
}
