#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "e2e_check.hpp"
#include "ofa/model.hpp"
#include "ofa/profile.hpp"
#include "ofa/rng.hpp"

namespace {

using ofa::Matrix;
using ofa::Rng;
namespace ad = ofa::ad;

ofa::FeatureSequence random_features(Rng& rng, std::size_t T, std::size_t D) {
  ofa::FeatureSequence f;
  f.frames = Matrix(T, D);
  for (double& v : f.frames.data()) v = rng.normal();
  return f;
}

struct Fixture {
  ofa::ModelDims dims;
  ofa::StudentModel student;
  ofa::TeacherModel teacher;
};

Fixture make(std::uint64_t seed) {
  Rng rng(seed);
  Fixture f;
  f.student = ofa::StudentModel::initialize(f.dims, rng);
  f.teacher = ofa::TeacherModel::initialize(f.dims, rng);
  return f;
}

TEST(AlphaModule, ZeroParamsGiveHalf) {
  Fixture f = make(1);
  f.student.param("alpha.weight") = Matrix(f.dims.hidden, 1);
  Rng rng(2);
  const auto out = ofa::student_forward(f.student, random_features(rng, 10, f.dims.input_dim), 1.0);
  for (double a : out.alpha_raw) EXPECT_EQ(a, 0.5);
  EXPECT_EQ(out.segmentation.size(), 5u);
}

TEST(AlphaModule, LargeNegativeBiasForcesOneFire) {
  Fixture f = make(3);
  f.student.param("alpha.bias")(0, 0) = -50.0;
  Rng rng(4);
  const auto out = ofa::student_forward(f.student, random_features(rng, 12, f.dims.input_dim), 1.0);
  for (double a : out.alpha_raw) EXPECT_LT(a, 1e-15);
  EXPECT_EQ(out.segmentation.size(), 1u);
  EXPECT_EQ(out.heads[0].rows(), 1u);
}

TEST(StudentForward, LengthsFollowLambda) {
  Fixture f = make(5);
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const std::size_t T = 5 + rng.below(60);
    const auto x = random_features(rng, T, f.dims.input_dim);
    const auto full = ofa::student_forward(f.student, x, 0.0);
    EXPECT_EQ(full.segmentation.size(), T);
    const auto one = ofa::student_forward(f.student, x, 2.0 - 1e-6);
    EXPECT_EQ(one.segmentation.size(), 1u);
    for (double l : {0.0, 0.6, 1.0, 1.4, 1.9}) {
      const auto out = ofa::student_forward(f.student, x, l);
      ASSERT_EQ(out.heads.size(), f.dims.teacher_layers);
      for (const auto& h : out.heads) {
        EXPECT_EQ(h.rows(), out.segmentation.size());
        EXPECT_EQ(h.cols(), f.dims.teacher_dim);
      }
      EXPECT_EQ(out.representation.rows(), out.segmentation.size());
    }
  }
}

TEST(StudentForward, LambdaOneMatchesUnmodifiedPipeline) {
  Fixture f = make(7);
  Rng rng(8);
  const auto x = random_features(rng, 30, f.dims.input_dim);
  const auto out = ofa::student_forward(f.student, x, 1.0);
  EXPECT_EQ(out.alpha_mod, out.alpha_raw);
  // Rebuild by hand without modification.
  ad::Tape t;
  auto s = ofa::bind(t, f.student, false);
  ad::Var enc = ofa::encoder_forward(s, t.constant(x.frames));
  ad::Var alpha = ofa::alpha_module(s, enc);
  const auto seg = ofa::integrate_and_fire(alpha.value().data());
  ad::Var pooled = ad::matmul(ad::pooling_weights(alpha, seg), enc);
  ad::Var rep = ofa::mixer_forward(s, pooled);
  EXPECT_EQ(out.representation, rep.value());
  EXPECT_EQ(out.heads[0], ad::add(ad::matmul(rep, s.heads[0].first), s.heads[0].second).value());
}

TEST(StudentForward, Deterministic) {
  Fixture a = make(9), b = make(9);
  EXPECT_EQ(a.student, b.student);
  EXPECT_EQ(a.teacher, b.teacher);
  Rng r1(10), r2(10);
  const auto x1 = random_features(r1, 20, a.dims.input_dim);
  const auto x2 = random_features(r2, 20, a.dims.input_dim);
  const auto o1 = ofa::student_forward(a.student, x1, 1.3);
  const auto o2 = ofa::student_forward(b.student, x2, 1.3);
  EXPECT_EQ(o1.alpha_raw, o2.alpha_raw);
  EXPECT_EQ(o1.heads, o2.heads);
  EXPECT_NE(make(11).student, a.student);
}

TEST(Teacher, FrozenAndDeterministic) {
  Fixture f = make(12);
  Rng rng(13);
  const auto x = random_features(rng, 15, f.dims.input_dim);
  const auto l1 = ofa::teacher_forward(f.teacher, x);
  EXPECT_EQ(l1, ofa::teacher_forward(f.teacher, x));
  ASSERT_EQ(l1.size(), f.dims.teacher_layers);
  for (const auto& l : l1) {
    EXPECT_EQ(l.rows(), 15u);
    EXPECT_EQ(l.cols(), f.dims.teacher_dim);
  }
}

TEST(StudentForward, CountedMacsMatchCostModel) {
  Fixture f = make(14);
  Rng rng(15);
  const ofa::MacsConfig cfg = ofa::MacsConfig::for_model(f.dims);
  for (int i = 0; i < 30; ++i) {
    const std::size_t T = 1 + rng.below(64);
    const auto x = random_features(rng, T, f.dims.input_dim);
    ad::Tape t;
    auto s = ofa::bind(t, f.student, false);
    const double lambda = rng.uniform(0.0, 1.99);
    auto g = ofa::student_forward(t, s, x.frames, t.constant(Matrix::scalar(lambda)), {}, false);
    const std::uint64_t n = g.segmentation.size();
    EXPECT_EQ(g.counted_macs, ofa::transformer_macs(n, cfg, T).total) << "T=" << T << " n=" << n;
  }
}

TEST(Checkpoint, RoundTrip) {
  Fixture f = make(16);
  ofa::Checkpoint ck{f.dims, f.student, f.teacher, ofa::SampleRange::one_and_half(), {}};
  const std::string bytes = ofa::encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "OFAC");
  const ofa::Checkpoint back = ofa::decode_checkpoint(bytes);
  EXPECT_TRUE(back == ck);
  EXPECT_EQ(ofa::encode_checkpoint(back), bytes);

  const std::string path = ::testing::TempDir() + "model_test.ofac";
  ofa::save_checkpoint(path, ck);
  EXPECT_TRUE(ofa::load_checkpoint(path) == ck);
}

TEST(Checkpoint, Errors) {
  Fixture f = make(17);
  const std::string bytes = ofa::encode_checkpoint({f.dims, f.student, f.teacher, {}, {}});
  auto code = [](const std::string& b) {
    try {
      ofa::decode_checkpoint(b);
    } catch (const ofa::Error& e) {
      return e.code();
    }
    return ofa::ErrorCode::invalid_argument;
  };
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(code(bad), ofa::ErrorCode::bad_magic);
  EXPECT_EQ(code("OF"), ofa::ErrorCode::bad_magic);
  bad = bytes;
  bad[4] = 9;
  EXPECT_EQ(code(bad), ofa::ErrorCode::unsupported_version);
  EXPECT_EQ(code(bytes.substr(0, bytes.size() - 3)), ofa::ErrorCode::truncated);
  EXPECT_THROW(ofa::load_checkpoint("/nonexistent/ckpt"), ofa::Error);
}

TEST(EndToEnd, GradientsMatchFiniteDifferences) {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 10; ++seed) {
    auto c = ofa::testing::make_end_to_end_case(seed);
    if (!c) continue;
    const auto r = ofa::testing::check_end_to_end(*c);
    EXPECT_LE(r.max_rel_error, 1e-3) << "seed " << seed;
    ++checked;
  }
}

}  // namespace
