#pragma once

// Quick invariant suite behind `ofa selftest`. Reuses the oracles from tests/.

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "cif_oracle.hpp"
#include "e2e_check.hpp"
#include "macs_oracle.hpp"
#include "ofa/ofa.hpp"

namespace ofa::selftest {

struct Check {
  const char* name;
  std::function<std::string()> run;  // empty string on success
};

inline std::vector<double> random_alpha(Rng& rng, std::size_t T) {
  std::vector<double> a(T);
  for (double& v : a) v = rng.uniform();
  return a;
}

inline std::string alpha_algebra() {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto alpha = random_alpha(rng, 1 + rng.below(64));
    if (modify_alpha(alpha, 1.0) != alpha) return "identity at lambda=1";
    double prev_mass = 1e300;
    std::size_t prev_fires = alpha.size() + 1;
    for (int k = 0; k < 25; ++k) {
      const double lambda = (kLambdaLimit - kLambdaOpenEps) * k / 24.0;
      const auto mod = modify_alpha(alpha, lambda);
      double m = 0.0;
      for (double a : mod) {
        if (!(a >= 0.0 && a <= 1.0)) return "output outside [0,1]";
        m += a;
      }
      if (m > prev_mass + 1e-12) return "mass increased with lambda";
      const std::size_t fires = fire_count(mod);
      if (fires > prev_fires) return "fire count increased with lambda";
      if (k == 0 && fires != alpha.size()) return "lambda=0 does not keep every frame";
      if (k == 24 && fires != 1) return "lambda near 2 does not give one frame";
      prev_mass = m;
      prev_fires = fires;
    }
  }
  return {};
}

inline std::string cif_oracle() {
  const std::vector<double> worked{0.4, 0.5, 0.3, 0.6};
  const Matrix ramp{{1.0}, {2.0}, {3.0}, {4.0}};
  const auto pooled = pool_segments(ramp, worked, integrate_and_fire(worked)).frames;
  if (pooled.rows() != 2 || std::fabs(pooled(0, 0) - 1.7) > 1e-12 || std::fabs(pooled(1, 0) - 3.0) > 1e-12)
    return "worked example";
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const std::size_t T = 1 + rng.below(16);
    const auto alpha = random_alpha(rng, T);
    Matrix x(T, 2);
    for (double& v : x.data()) v = rng.uniform(-2.0, 2.0);
    const auto oracle = testing::oracle_cif(alpha);
    const auto seg = integrate_and_fire(alpha);
    if (seg.size() != oracle.size()) return "fire count differs from the hand-trace oracle";
    if (pool_segments(x, alpha, seg).frames != testing::oracle_pool(oracle, x)) return "pooled frames differ";
  }
  return {};
}

inline std::string gradients() {
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 8; ++seed) {
    auto c = testing::make_end_to_end_case(seed);
    if (!c) continue;
    const auto r = testing::check_end_to_end(*c);
    if (r.max_rel_error > 1e-3) return "seed " + std::to_string(seed) + " rel error " + std::to_string(r.max_rel_error);
    ++checked;
  }
  return {};
}

inline std::string guidance_invariance() {
  ModelDims dims;
  Rng rng(3);
  const StudentModel student = StudentModel::initialize(dims, rng);
  SyntheticSpec spec;
  spec.num_utterances = 3;
  for (const auto& u : generate_corpus(spec)) {
    const double base = guidance_loss(student_forward(student, u.features, 1.0).alpha_raw, u.targets, GuidanceMode::both);
    for (double lambda : {0.0, 0.7, 1.3, 1.99}) {
      const auto out = student_forward(student, u.features, lambda);
      if (guidance_loss(out.alpha_raw, u.targets, GuidanceMode::both) != base) return "guidance changed with lambda";
    }
  }
  return {};
}

inline std::string macs() {
  const MacsConfig ref = MacsConfig::reference();
  if (transformer_macs(500, ref).total != 8730624000ull) return "reference total";
  const double r90 = macs_reduction(500, frames_for_period(500, 90.0, 20.0), ref);
  const double r960 = macs_reduction(500, frames_for_period(500, 960.0, 20.0), ref);
  if (std::fabs(r90 - 0.687) > 0.05 || std::fabs(r960 - 0.906) > 0.05) return "reductions off";
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    const std::size_t T = 1 + rng.below(24), n = 1 + rng.below(T), d = 1 + rng.below(6), f = 1 + rng.below(8);
    testing::CountingMixer counter;
    if (transformer_macs(n, {d, f, 1, d, 20.0, 1000.0}, T).total != counter.run(T, n, d, f, 1, rng))
      return "cost model differs from op counting";
  }
  double prev = -1.0;
  for (std::uint64_t n = 500; n >= 1; --n) {
    const double r = macs_reduction(500, n, ref);
    if (r < prev) return "reduction not monotone";
    prev = r;
  }
  return {};
}

inline std::string round_trips() {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const std::size_t T = 1 + rng.below(40), D = 1 + rng.below(8);
    FeatureSequence seq{Matrix(T, D), static_cast<float>(rng.uniform(5.0, 40.0))};
    for (double& v : seq.frames.data()) v = static_cast<float>(rng.normal());
    std::vector<std::uint8_t> bits(T);
    for (auto& b : bits) b = rng.below(2);
    const auto g = GuidanceTargets::from_boundaries(bits);
    const auto back = decode_features(encode_features(seq, &g));
    if (back.features.frames != seq.frames || !back.targets || *back.targets != g) return "feature file";
  }
  ModelDims dims;
  Rng init(6);
  Checkpoint ck{dims, StudentModel::initialize(dims, init), TeacherModel::initialize(dims, init), {}, {}};
  const std::string bytes = encode_checkpoint(ck);
  if (!(decode_checkpoint(bytes) == ck) || encode_checkpoint(decode_checkpoint(bytes)) != bytes) return "checkpoint";
  return {};
}

inline std::string determinism() {
  SyntheticSpec spec;
  spec.num_utterances = 6;
  spec.seed = 9;
  const Corpus a = generate_corpus(spec), b = generate_corpus(spec);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (encode_features(a[i].features, &a[i].targets) != encode_features(b[i].features, &b[i].targets))
      return "corpus differs";
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.seed = 9;
  auto run = [&] {
    Rng rng(10);
    StudentModel s = StudentModel::initialize(cfg.dims, rng);
    TeacherModel t = TeacherModel::initialize(cfg.dims, rng);
    return ofa_pretrain(cfg, a, s, t);
  };
  const auto r1 = run(), r2 = run();
  if (r1.trace != r2.trace || !(r1.student == r2.student)) return "pretraining differs";
  return {};
}

inline int run_all(std::FILE* out) {
  const std::vector<Check> checks{{"alpha-modification algebra", alpha_algebra},
                                  {"integrate-and-fire vs hand trace", cif_oracle},
                                  {"end-to-end gradients", gradients},
                                  {"guidance ignores lambda", guidance_invariance},
                                  {"MACs cost model", macs},
                                  {"file round trips", round_trips},
                                  {"seeded determinism", determinism}};
  int failed = 0;
  for (const auto& c : checks) {
    std::string err;
    try {
      err = c.run();
    } catch (const std::exception& e) {
      err = e.what();
    }
    if (err.empty()) {
      std::fprintf(out, "ok    %s\n", c.name);
    } else {
      std::fprintf(out, "FAIL  %s: %s\n", c.name, err.c_str());
      ++failed;
    }
  }
  return failed;
}

}  // namespace ofa::selftest
