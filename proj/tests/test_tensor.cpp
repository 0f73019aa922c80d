#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "msfet/gradcheck.hpp"
#include "msfet/ops.hpp"
#include "msfet/optim.hpp"
#include "msfet/serialize.hpp"
#include "oracles.hpp"

using namespace msfet;

namespace {

template <typename T>
Tensor<T> rnd(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool grad = false) {
  auto v = oracle::uniform(shape_numel(s), lo, hi, seed);
  return Tensor<T>::from(s, std::vector<T>(v.begin(), v.end()), grad);
}

/// Values pushed at least `gap` away from zero, for ops with a kink there.
template <typename T>
Tensor<T> away_from_zero(const Shape& s, std::uint64_t seed, double gap = 0.05) {
  auto v = oracle::uniform(shape_numel(s), -1.0, 1.0, seed);
  for (auto& x : v) x = x < 0 ? x - gap : x + gap;
  return Tensor<T>::from(s, std::vector<T>(v.begin(), v.end()));
}

std::vector<double> to_vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

// ---------------------------------------------------------------- tensor core

TEST(Tensor, ShapeAndFactories) {
  auto t = Tensor<float>::full({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_THROW(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, NonFiniteResultThrows) {
  auto a = Tensor<double>::from({1}, {1.0});
  auto z = Tensor<double>::from({1}, {0.0});
  EXPECT_THROW(ops::div(a, z), NumericError);
  EXPECT_THROW(ops::exp(Tensor<double>::from({1}, {1000.0})), NumericError);
}

TEST(Backward, LinearAndSquareRules) {
  auto w = rnd<double>({5}, 1, -1, 1, true);
  auto x = rnd<double>({5}, 2);
  backward(ops::sum(ops::mul(w, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(w.grad()[i], x.data()[i]);

  auto y = rnd<double>({4}, 3, -1, 1, true);
  backward(ops::sum(ops::square(y)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.grad()[i], 2 * y.data()[i]);
}

TEST(Backward, AccumulatesAcrossCalls) {
  auto w = rnd<double>({3, 3}, 4, -1, 1, true);
  auto f = [&] { return ops::sum(ops::tanh(ops::matmul(w, w))); };
  backward(f());
  std::vector<double> once(w.grad().begin(), w.grad().end());
  backward(f());
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_DOUBLE_EQ(w.grad()[i], 2 * once[i]);
  w.zero_grad();
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Tensor<double>::from({1}, {3.0}, true);
  auto y = ops::mul(x, x);
  auto z = ops::add(y, y);
  backward(ops::sum(z));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, RejectsNonScalarAndOffTape) {
  auto x = rnd<double>({3}, 5, -1, 1, true);
  EXPECT_THROW(backward(ops::square(x)), ArgumentError);
  EXPECT_THROW(backward(Tensor<double>::scalar(1.0)), ArgumentError);
}

TEST(NoGrad, GuardSkipsTape) {
  auto x = rnd<double>({3}, 6, -1, 1, true);
  NoGradGuard g;
  auto y = ops::sum(ops::square(x));
  EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------- op oracles

TEST(Conv2d, OneByOneMixesChannels) {
  auto x = rnd<double>({2, 4, 4}, 7);
  auto w = Tensor<double>::from({2, 2, 1, 1}, {0, 1, 1, 0});
  auto y = ops::conv2d(x, w, Tensor<double>(), 1, 0);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(y.data()[i], x.data()[16 + i]);
    EXPECT_EQ(y.data()[16 + i], x.data()[i]);
  }
}

TEST(Conv2d, AllOnesKernelOnConstant) {
  auto y = ops::conv2d(Tensor<double>::full({1, 5, 5}, 2.0), Tensor<double>::full({1, 1, 3, 3}, 1.0),
                       Tensor<double>::from({1}, {0.5}), 1, 1);
  EXPECT_DOUBLE_EQ(y.data()[2 * 5 + 2], 9 * 2.0 + 0.5);
  EXPECT_DOUBLE_EQ(y.data()[0], 4 * 2.0 + 0.5);
}

TEST(Conv2d, StrideTwoShape) {
  auto y = ops::conv2d(Tensor<float>::zeros({3, 8, 8}), Tensor<float>::zeros({6, 3, 3, 3}), Tensor<float>::zeros({6}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{6, 4, 4}));
  EXPECT_THROW(ops::conv2d(Tensor<float>::zeros({2, 8, 8}), Tensor<float>::zeros({6, 3, 3, 3}), Tensor<float>(), 1, 1),
               ShapeError);
}

TEST(Conv2d, MatchesNaiveOracle) {
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{7, 4, 3}, std::tuple{1, 1, 0}, std::tuple{5, 2, 0}}) {
    auto x = rnd<double>({3, 11, 9}, 8);
    auto w = rnd<double>({4, 3, std::size_t(k), std::size_t(k)}, 9);
    auto b = rnd<double>({4}, 10);
    auto y = ops::conv2d(x, w, b, s, p);
    auto ref = oracle::conv2d(oracle::make(3, 11, 9, to_vec(x)), to_vec(w), to_vec(b), 4, k, s, p);
    ASSERT_EQ(y.shape(), (Shape{4, ref.h, ref.w}));
    for (std::size_t i = 0; i < ref.v.size(); ++i) EXPECT_NEAR(y.data()[i], ref.v[i], 1e-12);
  }
}

TEST(Linear, AffineExamples) {
  auto x = rnd<double>({3, 2}, 11);
  auto id = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto y = ops::linear(x, id, Tensor<double>::zeros({2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
  auto b = Tensor<double>::from({2}, {0.25, -1});
  auto z = ops::linear(x, Tensor<double>::zeros({2, 2}), b);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(z.data()[r * 2], 0.25);
    EXPECT_EQ(z.data()[r * 2 + 1], -1.0);
  }
  auto s = ops::linear(Tensor<double>::from({1, 1}, {2}), Tensor<double>::from({1, 1}, {3}), Tensor<double>::from({1}, {1}));
  EXPECT_EQ(s.item(), 7.0);
  EXPECT_THROW(ops::linear(x, Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2})), ShapeError);
}

TEST(Activations, PointValues) {
  EXPECT_FLOAT_EQ(ops::leaky_relu(Tensor<float>::from({1}, {-1.f}), 0.01f).item(), -0.01f);
  EXPECT_EQ(ops::swish(Tensor<float>::from({1}, {0.f})).item(), 0.0f);
  EXPECT_EQ(ops::gelu(Tensor<float>::from({1}, {0.f})).item(), 0.0f);
  EXPECT_EQ(ops::sigmoid(Tensor<float>::from({1}, {0.f})).item(), 0.5f);
  EXPECT_NEAR(ops::gelu(Tensor<double>::from({1}, {1.0})).item(), 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(ops::swish(Tensor<double>::from({1}, {2.0})).item(), 2.0 / (1 + std::exp(-2.0)), 1e-15);
}

TEST(Softmax, OracleRows) {
  auto s = ops::softmax(Tensor<double>::from({2, 2}, {0, 0, 1, 0}));
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
  EXPECT_NEAR(s.data()[2], std::exp(1.0) / (std::exp(1.0) + 1), 1e-15);
  EXPECT_NEAR(s.data()[2], 0.7311, 1e-4);
  EXPECT_NEAR(s.data()[3], 0.2689, 1e-4);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  auto x = rnd<float>({16, 40}, 12, -30, 30);
  auto s = ops::softmax(x);
  std::vector<float> shifted(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 40; ++c) shifted[r * 40 + c] += static_cast<float>(r) * 3.5f;
  auto s2 = ops::softmax(Tensor<float>::from(x.shape(), shifted));
  for (std::size_t r = 0; r < 16; ++r) {
    double sum = 0.0;
    std::size_t a1 = 0, a2 = 0;
    for (std::size_t c = 0; c < 40; ++c) {
      sum += s.data()[r * 40 + c];
      if (s.data()[r * 40 + c] > s.data()[r * 40 + a1]) a1 = c;
      if (s2.data()[r * 40 + c] > s2.data()[r * 40 + a2]) a2 = c;
      EXPECT_NEAR(s.data()[r * 40 + c], s2.data()[r * 40 + c], 1e-6);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(a1, a2);
  }
}

TEST(LayerNorm, Examples) {
  auto g = Tensor<double>::full({4}, 1.0), b = Tensor<double>::zeros({4});
  auto flat = ops::layer_norm(Tensor<double>::full({2, 4}, 3.0), g, b);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  auto y = ops::layer_norm(Tensor<double>::from({1, 2}, {1, -1}), Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-5);
  EXPECT_NEAR(y.data()[1], -1.0, 1e-5);
  auto x = rnd<double>({3, 4}, 13);
  auto beta = Tensor<double>::from({4}, {0.5, -2, 1, 0});
  auto y0 = ops::layer_norm(x, g, b), y1 = ops::layer_norm(x, g, beta);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 4; ++c) m += y0.data()[r * 4 + c];
    for (std::size_t c = 0; c < 4; ++c) v += y0.data()[r * 4 + c] * y0.data()[r * 4 + c];
    EXPECT_NEAR(m / 4, 0.0, 1e-12);
    EXPECT_NEAR(v / 4, 1.0, 1e-3);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y1.data()[r * 4 + c], y0.data()[r * 4 + c] + beta.data()[c]);
  }
}

TEST(Upsample, ConstantAndOracle) {
  auto up = ops::bilinear_upsample2x(Tensor<float>::full({2, 2, 2}, 0.7f));
  for (float v : up.data()) EXPECT_FLOAT_EQ(v, 0.7f);
  EXPECT_EQ(ops::bilinear_upsample2x(Tensor<float>::zeros({3, 2, 2})).shape(), (Shape{3, 4, 4}));
  auto x = rnd<double>({2, 3, 5}, 14);
  auto y = ops::bilinear_upsample2x(x);
  auto ref = oracle::upsample2x(oracle::make(2, 3, 5, to_vec(x)));
  for (std::size_t i = 0; i < ref.v.size(); ++i) EXPECT_NEAR(y.data()[i], ref.v[i], 1e-14);
}

TEST(Upsample, RampStaysRampInInterior) {
  std::vector<double> v(6 * 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) v[i * 6 + j] = 2.0 * static_cast<double>(j);
  auto y = ops::bilinear_upsample2x(Tensor<double>::from({1, 6, 6}, v));
  // Output column q samples input coordinate (q + 0.5) / 2 - 0.5.
  for (std::size_t q = 1; q + 1 < 12; ++q) EXPECT_NEAR(y.data()[5 * 12 + q], 2.0 * ((q + 0.5) / 2.0 - 0.5), 1e-12);
}

TEST(Warp, IdentityShiftAndClamp) {
  auto img = rnd<float>({2, 5, 6}, 15);
  auto same = ops::bilinear_warp(img, Tensor<float>::zeros({2, 5, 6}));
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(same.data()[i], img.data()[i]);

  std::vector<float> f(2 * 5 * 6, 0.0f);
  for (std::size_t i = 0; i < 30; ++i) f[i] = 1.0f;
  auto shifted = ops::bilinear_warp(img, Tensor<float>::from({2, 5, 6}, f));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x + 1 < 6; ++x) EXPECT_EQ(shifted.data()[(c * 5 + y) * 6 + x], img.data()[(c * 5 + y) * 6 + x + 1]);

  auto off = ops::bilinear_warp(img, Tensor<float>::full({2, 5, 6}, -100.0f));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(off.data()[c * 30 + i], img.data()[c * 30]);
}

TEST(Shapes, ConcatReshapeReduce) {
  auto a = rnd<float>({2, 3, 3}, 16), b = rnd<float>({1, 3, 3}, 17);
  auto c = ops::concat<float>({a, b}, 0);
  EXPECT_EQ(c.shape(), (Shape{3, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(c.data()[18 + i], b.data()[i]);
  auto r = ops::reshape(c, {27});
  for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(r.data()[i], c.data()[i]);
  EXPECT_EQ(ops::mean(Tensor<float>::full({4, 4}, 1.0f)).item(), 1.0f);
  EXPECT_THROW(ops::reshape(c, {26}), ShapeError);
}

TEST(Shapes, PadReflectAndCrop) {
  auto x = Tensor<double>::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = ops::pad_reflect(x, 1, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 3, 5}));
  const std::vector<double> expect{1, 2, 3, 2, 1, 4, 5, 6, 5, 4, 1, 2, 3, 2, 1};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(p.data()[i], expect[i]);
  auto back = ops::crop(p, 2, 3);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
  EXPECT_THROW(ops::pad_reflect(Tensor<double>::zeros({2, 3}), 1, 1), ShapeError);
}

TEST(Shapes, PadReflectWiderThanInput) {
  auto x = Tensor<double>::from({1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = ops::pad_reflect(x, 3, 5);
  ASSERT_EQ(p.shape(), (Shape{1, 5, 8}));
  const std::size_t rows[] = {0, 1, 0, 1, 0}, cols[] = {0, 1, 2, 1, 0, 1, 2, 1};
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(p.data()[i * 8 + j], x.data()[rows[i] * 3 + cols[j]]);
  auto one = ops::pad_reflect(Tensor<double>::from({1, 1, 1}, {7.0}), 4, 2);
  for (double v : one.data()) EXPECT_EQ(v, 7.0);
}

// ---------------------------------------------------------------- gradients

namespace {

template <typename T>
Tensor<T> weights_for(const char* tag) {
  if (std::string(tag) == "conv") return rnd<T>({3, 2, 3, 3}, 20, -0.5, 0.5);
  if (std::string(tag) == "lin") return rnd<T>({5, 6}, 21, -0.5, 0.5);
  return rnd<T>({6}, 22, 0.5, 1.5);
}

template <typename T>
std::function<Tensor<T>(const Tensor<T>&)> make_case(const std::string& name) {
  const auto probe = rnd<T>({1024}, 99, -1, 1);
  auto dot = [probe](const Tensor<T>& y) {
    auto p = ops::reshape(ops::narrow(probe, 0, 0, y.numel()), y.shape());
    return ops::sum(ops::mul(y, p));
  };
  if (name == "conv2d") {
    auto w = weights_for<T>("conv");
    auto b = rnd<T>({3}, 23);
    return [=](const Tensor<T>& x) { return dot(ops::conv2d(x, w, b, 2, 1)); };
  }
  if (name == "linear") {
    auto w = weights_for<T>("lin");
    auto b = rnd<T>({5}, 24);
    return [=](const Tensor<T>& x) { return dot(ops::linear(x, w, b)); };
  }
  if (name == "leaky_relu") return [=](const Tensor<T>& x) { return dot(ops::leaky_relu(x, T(0.01))); };
  if (name == "swish") return [=](const Tensor<T>& x) { return dot(ops::swish(x)); };
  if (name == "gelu") return [=](const Tensor<T>& x) { return dot(ops::gelu(x)); };
  if (name == "sigmoid") return [=](const Tensor<T>& x) { return dot(ops::sigmoid(x)); };
  if (name == "tanh") return [=](const Tensor<T>& x) { return dot(ops::tanh(x)); };
  if (name == "softmax") return [=](const Tensor<T>& x) { return dot(ops::softmax(x)); };
  if (name == "layer_norm") {
    auto g = weights_for<T>("ln");
    auto b = rnd<T>({6}, 25);
    return [=](const Tensor<T>& x) { return dot(ops::layer_norm(x, g, b)); };
  }
  if (name == "upsample") return [=](const Tensor<T>& x) { return dot(ops::bilinear_upsample2x(x)); };
  if (name == "warp") {
    auto flow = rnd<T>({2, 4, 6}, 26, -2, 2);
    return [=](const Tensor<T>& x) { return dot(ops::bilinear_warp(x, flow)); };
  }
  if (name == "abs") return [=](const Tensor<T>& x) { return dot(ops::abs(x)); };
  if (name == "mul_div") {
    auto other = rnd<T>({4, 6}, 27, 0.5, 2.0);
    return [=](const Tensor<T>& x) { return dot(ops::div(ops::mul(x, x), other)); };
  }
  if (name == "concat_narrow_transpose") {
    auto other = rnd<T>({4, 6}, 28);
    return [=](const Tensor<T>& x) {
      return dot(ops::transpose(ops::narrow(ops::concat<T>({x, other}, 1), 1, 3, 6)));
    };
  }
  if (name == "matmul") {
    auto other = rnd<T>({6, 3}, 29);
    return [=](const Tensor<T>& x) { return dot(ops::matmul(x, other)); };
  }
  if (name == "mean_square_exp") return [=](const Tensor<T>& x) { return ops::mean(ops::exp(ops::square(x))); };
  if (name == "pad_crop") {
    return [=](const Tensor<T>& x) { return dot(ops::crop(ops::pad_reflect(x, 3, 2), 3, 5)); };
  }
  throw std::runtime_error("unknown case " + name);
}

Shape shape_for(const std::string& name) {
  if (name == "conv2d") return {2, 6, 6};
  if (name == "linear") return {4, 6};
  if (name == "upsample") return {2, 3, 4};
  if (name == "warp") return {2, 4, 6};
  if (name == "pad_crop") return {1, 4, 6};
  return {4, 6};
}

}  // namespace

class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, FiniteDifferencesF64AndF32) {
  const std::string name = GetParam();
  const Shape s = shape_for(name);
  Tensor<double> xd;
  Tensor<float> xf;
  double hf = 1e-2;
  if (name == "leaky_relu" || name == "abs") {
    // Piecewise linear: a wide step stays exact as long as it cannot cross 0.
    xd = away_from_zero<double>(s, 30, 0.1);
    xf = away_from_zero<float>(s, 30, 0.1);
    hf = 5e-2;
  } else if (name == "gelu") {
    // gelu' vanishes near -0.7518; relative error there is unbounded in f32.
    auto v = oracle::uniform(shape_numel(s), -1.0, 1.0, 30);
    for (auto& x : v)
      if (std::abs(x + 0.7518) < 0.1) x += 0.2;
    xd = Tensor<double>::from(s, v);
    xf = Tensor<float>::from(s, std::vector<float>(v.begin(), v.end()));
  } else {
    xd = rnd<double>(s, 30);
    xf = rnd<float>(s, 30);
  }
  EXPECT_LE(finite_diff_check<double>(make_case<double>(name), xd, 1e-4), 1e-6) << name;
  EXPECT_LE(finite_diff_check<float>(make_case<float>(name), xf, hf), 1e-3) << name;
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient,
                         ::testing::Values("conv2d", "linear", "leaky_relu", "swish", "gelu", "sigmoid", "tanh",
                                           "softmax", "layer_norm", "upsample", "warp", "abs",
                                           "mul_div", "concat_narrow_transpose", "matmul", "mean_square_exp",
                                           "pad_crop"));

TEST(FiniteDiffCheck, OracleExamples) {
  auto x = Tensor<double>::from({2}, {1, 2});
  EXPECT_LE(finite_diff_check<double>([](const Tensor<double>& v) { return ops::sum(ops::square(v)); }, x), 1e-8);
  EXPECT_EQ(finite_diff_check<double>([](const Tensor<double>&) { return Tensor<double>::scalar(3.0); }, x), 0.0);
  EXPECT_LE(finite_diff_check<double>(
                [](const Tensor<double>& v) {
                  auto g = Tensor<double>::full({4}, 1.0);
                  auto b = Tensor<double>::zeros({4});
                  auto p = Tensor<double>::from({2, 4}, {1, -2, 3, 0.5, -1, 2, 0.25, 1});
                  return ops::sum(ops::mul(ops::layer_norm(ops::softmax(v), g, b), p));
                },
                rnd<double>({2, 4}, 31)),
            1e-4);
}

TEST(FiniteDiffCheck, DetectsWrongGradient) {
  // The function lies about its value under NoGradGuard, so numeric and
  // analytic gradients disagree.
  auto f = [](const Tensor<double>& v) {
    auto y = ops::sum(ops::square(v));
    return grad_enabled() ? y : ops::mul_scalar(y, 1.1);
  };
  EXPECT_GT(finite_diff_check<double>(f, rnd<double>({3}, 32)), 1e-2);
}

TEST(Determinism, BitwiseIdenticalOutputs) {
  auto x = rnd<float>({3, 16, 16}, 33);
  auto w = rnd<float>({8, 3, 3, 3}, 34);
  auto b = rnd<float>({8}, 35);
  auto y1 = ops::conv2d(x, w, b, 1, 1), y2 = ops::conv2d(x, w, b, 1, 1);
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}

// ---------------------------------------------------------------- Adam

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterStore<double> store;
  auto p = store.add("p", {3});
  auto before = std::vector<double>{0, 0, 0};
  p.mutable_data()[0] = 1.0;
  before[0] = 1.0;
  p.zero_grad();
  Adam<double> opt;
  opt.step(store.params());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.data()[i], before[i]);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  ParameterStore<double> store;
  auto p = store.add("p", {4});
  auto x = Tensor<double>::from({4}, {3, -0.2, 1e-3, -50});
  backward(ops::sum(ops::mul(p, x)));
  Adam<double> opt(AdamOptions{0.01});
  opt.step(store.params());
  for (std::size_t i = 0; i < 4; ++i) {
    const double sign = x.data()[i] > 0 ? -1.0 : 1.0;
    EXPECT_NEAR(p.data()[i], sign * 0.01, 0.01 * 1e-4);
  }
}

TEST(Adam, DescendsConvexQuadratic) {
  ParameterStore<double> store;
  auto p = store.add("p", {1});
  p.mutable_data()[0] = 2.0;
  Adam<double> opt(AdamOptions{0.1});
  double prev = 4.0;
  for (int s = 0; s < 2; ++s) {
    store.zero_grad();
    backward(ops::sum(ops::square(p)));
    opt.step(store.params());
    const double f = p.data()[0] * p.data()[0];
    EXPECT_LT(f, prev);
    prev = f;
  }
}

// ---------------------------------------------------------------- serialization

TEST(Parameters, UniqueNames) {
  ParameterStore<float> store;
  store.add("a.weight", {2});
  EXPECT_THROW(store.add("a.weight", {2}), ConfigError);
}

TEST(WeightsFile, BitExactRoundTrip) {
  ParameterStore<float> store;
  auto a = store.add("layer.weight", {2, 3});
  auto b = store.add("layer.bias", {3});
  auto rng = parameter_rng(5, "x");
  fill_uniform(a, 1.0, rng);
  fill_uniform(b, 1.0, rng);
  auto bytes = encode_weights(snapshot_weights(store, {{"k", "v"}}));
  auto file = decode_weights(std::string_view(bytes.data(), bytes.size()));
  EXPECT_EQ(file.manifest.at("k"), "v");
  ParameterStore<float> other;
  auto a2 = other.add("layer.weight", {2, 3});
  auto b2 = other.add("layer.bias", {3});
  restore_weights(other, file);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a2.data()[i], a.data()[i]);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(b2.data()[i], b.data()[i]);
  auto again = encode_weights(snapshot_weights(other, {{"k", "v"}}));
  EXPECT_EQ(again, bytes);
}

TEST(WeightsFile, LayoutAndErrors) {
  ParameterStore<float> store;
  store.add("w", {2}).mutable_data()[1] = 1.0f;
  auto bytes = encode_weights(snapshot_weights(store));
  // magic, u32 count, u16 len, "w", u8 rank, u32 dim, 2 x f32
  ASSERT_EQ(bytes.size(), 4u + 4 + 2 + 1 + 1 + 4 + 8);
  EXPECT_EQ(std::string(bytes.data(), 4), "WTS1");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[10], 'w');
  EXPECT_THROW(decode_weights(std::string_view(bytes.data(), bytes.size() - 2)), ParseError);
  ParameterStore<float> wrong;
  wrong.add("w", {3});
  EXPECT_THROW(restore_weights(wrong, decode_weights(std::string_view(bytes.data(), bytes.size()))), ShapeError);
  ParameterStore<float> missing;
  missing.add("v", {2});
  EXPECT_THROW(restore_weights(missing, decode_weights(std::string_view(bytes.data(), bytes.size()))), ConfigError);
}
