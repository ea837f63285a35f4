#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "ofa/alphamod.hpp"
#include "ofa/rng.hpp"

namespace {

using ofa::Matrix;
using ofa::Rng;
namespace ad = ofa::ad;

constexpr double kTop = ofa::kLambdaLimit - ofa::kLambdaOpenEps;

std::vector<double> random_alpha(Rng& rng, std::size_t T) {
  std::vector<double> a(T);
  for (double& v : a) v = rng.uniform();
  return a;
}

void expect_near(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

double total(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v;
  return s;
}

TEST(ModifyAlpha, Examples) {
  const std::vector<double> a{0.2, 0.8};
  expect_near(ofa::modify_alpha(a, 0.0), {1.0, 1.0}, 0.0);
  expect_near(ofa::modify_alpha(a, 0.5), {0.6, 0.9}, 1e-15);
  const std::vector<double> b{0.8, 0.6, 0.6};
  expect_near(ofa::modify_alpha(b, 1.5), {0.4, 0.3, 0.3}, 1e-15);
  const auto top = ofa::modify_alpha(b, 1.9);
  expect_near(top, {0.4, 0.3, 0.3}, 1e-12);
  EXPECT_NEAR(total(top), 1.0, 1e-12);
  EXPECT_EQ(ofa::fire_count(top), 1u);
}

TEST(ModifyAlpha, IdentityAtOne) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_alpha(rng, 1 + rng.below(64));
    EXPECT_EQ(ofa::modify_alpha(a, 1.0), a);
  }
  const std::vector<double> light{0.1, 0.2};
  EXPECT_EQ(ofa::modify_alpha(light, 1.0), light);
}

TEST(ModifyAlpha, RejectsLambdaOutOfRange) {
  const std::vector<double> a{0.5};
  EXPECT_THROW(ofa::modify_alpha(a, -0.1), ofa::Error);
  EXPECT_THROW(ofa::modify_alpha(a, 2.0), ofa::Error);
  EXPECT_THROW(ofa::modify_alpha(a, std::nan("")), ofa::Error);
}

TEST(ModifyAlpha, ZeroMassFallsBackToRaw) {
  const std::vector<double> z{0.0, 0.0, 0.0};
  EXPECT_EQ(ofa::modify_alpha(z, 1.5), z);
  EXPECT_EQ(ofa::fire_count(ofa::modify_alpha(z, 1.5)), 1u);
}

TEST(ModifyAlpha, RangeAndMonotonicity) {
  Rng rng(2);
  std::vector<double> lambdas;
  for (int k = 0; k < 50; ++k) lambdas.push_back(kTop * k / 49.0);
  for (int i = 0; i < 300; ++i) {
    const auto a = random_alpha(rng, 1 + rng.below(64));
    double prev_mass = INFINITY;
    std::size_t prev_fires = a.size() + 1;
    for (double l : lambdas) {
      const auto m = ofa::modify_alpha(a, l);
      for (double v : m) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
      const double mass = total(m);
      EXPECT_LE(mass, prev_mass + 1e-12) << "lambda " << l;
      const std::size_t fires = ofa::fire_count(m);
      EXPECT_LE(fires, prev_fires) << "lambda " << l;
      prev_mass = mass;
      prev_fires = fires;
    }
    EXPECT_EQ(ofa::fire_count(ofa::modify_alpha(a, 0.0)), a.size());
    EXPECT_EQ(ofa::fire_count(ofa::modify_alpha(a, kTop)), 1u);
  }
}

TEST(ModifyAlpha, ContinuousAtOne) {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto a = random_alpha(rng, 1 + rng.below(64));
    const auto lo = ofa::modify_alpha(a, 1.0 - 1e-6);
    const auto hi = ofa::modify_alpha(a, 1.0 + 1e-6);
    expect_near(lo, hi, 1e-5);
  }
}

TEST(ModifyAlpha, ContinuousAtMinSwitch) {
  const std::vector<double> a{0.9, 0.7, 0.4};  // mass 2, switch at lambda = 1.5
  const auto lo = ofa::modify_alpha(a, 1.5 - 1e-9);
  const auto hi = ofa::modify_alpha(a, 1.5 + 1e-9);
  expect_near(lo, hi, 1e-8);
}

TEST(ModifyAlpha, TapeMatchesValuesBitwise) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_alpha(rng, 1 + rng.below(32));
    const double l = rng.uniform(0.0, kTop);
    ad::Tape t;
    const Matrix out = ad::modify_alpha(t.constant(Matrix::column(a)), t.constant(Matrix::scalar(l))).value();
    EXPECT_EQ(out.values(), ofa::modify_alpha(a, l)) << "lambda " << l;
  }
}

TEST(ModifyAlpha, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  int checked = 0;
  while (checked < 100) {
    const auto a = random_alpha(rng, 2 + rng.below(12));
    const double l = rng.uniform(0.0, 1.98);
    // Stay clear of the case split at 1 and of the min switch.
    if (std::fabs(l - 1.0) < 1e-3) continue;
    if (l > 1.0 && std::fabs((2.0 - l) * total(a) - 1.0) < 1e-3) continue;
    Rng prng(static_cast<std::uint64_t>(checked));
    Matrix proj(a.size(), 1);
    for (double& v : proj.data()) v = prng.uniform(-1.0, 1.0);
    ofa::testing::Builder f = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::sum(ad::mul(ad::modify_alpha(v[0], v[1]), t.constant(proj)));
    };
    const auto r = ofa::testing::check_gradients(f, {Matrix::column(a), Matrix::scalar(l)});
    EXPECT_LE(r.max_rel_error, 1e-3) << "lambda " << l;
    ++checked;
  }
}

TEST(ModifyAlpha, ThetaGradientMatchesFiniteDifferences) {
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto a = random_alpha(rng, 3 + rng.below(10));
    const double theta = rng.uniform(-3.0, 3.0);
    const double l = ofa::lambda_from_theta(theta, kTop);
    if (std::fabs(l - 1.0) < 1e-3 || (l > 1.0 && std::fabs((2.0 - l) * total(a) - 1.0) < 1e-3)) continue;
    ofa::testing::Builder f = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
      ad::Var alpha = t.constant(Matrix::column(a));
      return ad::sum(ad::mul(ad::modify_alpha(alpha, ad::lambda_from_theta(v[0], kTop)), alpha));
    };
    EXPECT_LE(ofa::testing::check_gradients(f, {Matrix::scalar(theta)}).max_rel_error, 1e-3);
  }
}

TEST(SampleLambda, DeterministicAndBounded) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(ofa::sample_lambda(a, ofa::SampleRange::full()),
                                           ofa::sample_lambda(b, ofa::SampleRange::full()));
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const double l = ofa::sample_lambda(rng, ofa::SampleRange::unit());
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
  }
  EXPECT_EQ(ofa::sample_lambda(rng, ofa::SampleRange::fixed(0.7)), 0.7);
}

TEST(SampleLambda, UniformMean) {
  Rng rng(8);
  double s = 0.0;
  constexpr int n = 100000;
  for (int i = 0; i < n; ++i) s += ofa::sample_lambda(rng, ofa::SampleRange::full());
  EXPECT_NEAR(s / n, 1.0, 0.01);
}

TEST(SampleRange, Parse) {
  EXPECT_EQ(ofa::SampleRange::parse("0:1"), ofa::SampleRange::unit());
  EXPECT_EQ(ofa::SampleRange::parse("0:1.5"), ofa::SampleRange::one_and_half());
  EXPECT_EQ(ofa::SampleRange::parse("0:2"), ofa::SampleRange::full());
  EXPECT_EQ(ofa::SampleRange::parse("0.5:0.5"), ofa::SampleRange::fixed(0.5));
  for (const char* bad : {"", "1", "a:b", "1:0", "-1:1", "0:3"}) {
    try {
      ofa::SampleRange::parse(bad);
      ADD_FAILURE() << bad;
    } catch (const ofa::Error& e) {
      EXPECT_EQ(e.code(), ofa::ErrorCode::config) << bad;
    }
  }
}

TEST(LambdaFromTheta, Examples) {
  EXPECT_DOUBLE_EQ(ofa::lambda_from_theta(0.0, 2.0), 1.0);
  EXPECT_NEAR(ofa::lambda_from_theta(2.0, 2.0), 1.7615941559557649, 1e-15);
  EXPECT_NEAR(ofa::lambda_from_theta(-800.0, 2.0), 0.0, 1e-300);
  EXPECT_THROW(ofa::lambda_from_theta(0.0, 0.0), ofa::Error);
  EXPECT_THROW(ofa::lambda_from_theta(0.0, 2.5), ofa::Error);
  EXPECT_NEAR(ofa::theta_from_lambda(ofa::lambda_from_theta(0.3, 1.5), 1.5), 0.3, 1e-12);
}

TEST(LambdaControl, Modes) {
  auto f = ofa::LambdaControl::fixed(0.4);
  EXPECT_EQ(f.value(), 0.4);
  EXPECT_THROW(f.set_theta(1.0), ofa::Error);
  EXPECT_THROW(ofa::LambdaControl::fixed(2.0), ofa::Error);

  auto t = ofa::LambdaControl::trainable(50.0, 2.0);
  EXPECT_LT(t.value(), 2.0);
  EXPECT_LE(t.value(), t.lambda_max());
  t.set_theta(0.0);
  EXPECT_DOUBLE_EQ(t.value(), t.lambda_max() / 2.0);

  auto s = ofa::LambdaControl::sampled(ofa::SampleRange::one_and_half());
  Rng rng(9);
  for (int i = 0; i < 100; ++i) EXPECT_LE(s.resample(rng, ofa::SampleRange::one_and_half()), 1.5);
  EXPECT_THROW(t.resample(rng, ofa::SampleRange::unit()), ofa::Error);
}

}  // namespace
