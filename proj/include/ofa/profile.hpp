#pragma once

// Analytic compute model for the transformer layers plus the alpha module.
//
// Per layer and sequence length n:
//   4 n d^2   Q, K, V and output projections
//   2 n^2 d   attention scores and attention-weighted mix
//   2 n d f   feed-forward in and out
// The alpha module runs before subsampling, so it is always charged at the
// full input length.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ofa/alphamod.hpp"
#include "ofa/data_io.hpp"
#include "ofa/error.hpp"
#include "ofa/model.hpp"
#include "ofa/training.hpp"

namespace ofa {

struct MacsConfig {
  std::uint64_t hidden = 768;
  std::uint64_t ffn = 3072;
  std::uint64_t layers = 2;
  // Alpha module cost per input frame; the reference is a kernel-3 convolution
  // over hidden channels (3 d^2).
  std::uint64_t alpha_macs_per_frame = 3 * 768 * 768;
  double base_period_ms = 20.0;
  // Utterance length used for reduction tables.
  double utterance_ms = 10000.0;

  static MacsConfig reference() { return {}; }

  // Matches the toy student: linear alpha module, d MACs per frame.
  static MacsConfig for_model(const ModelDims& dims) {
    return {dims.hidden, dims.ffn, dims.blocks, dims.hidden, 20.0, 10000.0};
  }

  void validate() const {
    if (hidden == 0 || ffn == 0 || layers == 0) throw Error(ErrorCode::config, "hidden, ffn and layers must be positive");
    if (!(base_period_ms > 0.0) || !(utterance_ms >= base_period_ms))
      throw Error(ErrorCode::config, "need 0 < base_period_ms <= utterance_ms");
  }

  std::uint64_t base_frames() const {
    return static_cast<std::uint64_t>(std::llround(utterance_ms / base_period_ms));
  }
};

struct MacsReport {
  std::uint64_t attention_quadratic = 0;
  std::uint64_t attention_linear = 0;
  std::uint64_t ffn = 0;
  std::uint64_t alpha_module = 0;
  std::uint64_t total = 0;
};

inline MacsReport transformer_macs(std::uint64_t n, const MacsConfig& cfg, std::uint64_t alpha_frames) {
  if (n == 0) throw Error(ErrorCode::invalid_argument, "sequence length must be >= 1");
  const std::uint64_t d = cfg.hidden;
  MacsReport r;
  r.attention_linear = cfg.layers * 4 * n * d * d;
  r.attention_quadratic = cfg.layers * 2 * n * n * d;
  r.ffn = cfg.layers * 2 * n * d * cfg.ffn;
  r.alpha_module = alpha_frames * cfg.alpha_macs_per_frame;
  r.total = r.attention_linear + r.attention_quadratic + r.ffn + r.alpha_module;
  return r;
}

inline MacsReport transformer_macs(std::uint64_t n, const MacsConfig& cfg) { return transformer_macs(n, cfg, n); }

struct MacsComparison {
  MacsReport base;
  MacsReport compressed;
  double reduction = 0.0;
};

inline MacsComparison compare_macs(std::uint64_t n_base, std::uint64_t n_comp, const MacsConfig& cfg) {
  if (n_comp > n_base) throw Error(ErrorCode::invalid_argument, "compressed length exceeds base length");
  MacsComparison c;
  c.base = transformer_macs(n_base, cfg, n_base);
  c.compressed = transformer_macs(n_comp, cfg, n_base);
  c.reduction = 1.0 - static_cast<double>(c.compressed.total) / static_cast<double>(c.base.total);
  return c;
}

inline double macs_reduction(std::uint64_t n_base, std::uint64_t n_comp, const MacsConfig& cfg) {
  return compare_macs(n_base, n_comp, cfg).reduction;
}

inline double frame_period(double input_frames, double fires, double base_period_ms) {
  if (!(fires >= 1.0)) throw Error(ErrorCode::invalid_argument, "need at least one output frame");
  return base_period_ms * input_frames / fires;
}

// Output length for a target frame period, rounded to the nearest frame.
inline std::uint64_t frames_for_period(std::uint64_t n_base, double period_ms, double base_period_ms) {
  const double n = static_cast<double>(n_base) * base_period_ms / period_ms;
  return std::clamp<std::uint64_t>(static_cast<std::uint64_t>(std::llround(n)), 1, n_base);
}

struct ProfileRow {
  double period_ms = 0.0;
  std::uint64_t n_base = 0;
  std::uint64_t n_comp = 0;
  std::uint64_t base_macs = 0;
  std::uint64_t compressed_macs = 0;
  double reduction = 0.0;
};

inline std::vector<ProfileRow> profile_periods(const MacsConfig& cfg, const std::vector<double>& periods) {
  cfg.validate();
  std::vector<ProfileRow> rows;
  const std::uint64_t n_base = cfg.base_frames();
  for (double p : periods) {
    if (!(p >= cfg.base_period_ms))
      throw Error(ErrorCode::invalid_argument, "period " + std::to_string(p) + " ms below the base period");
    const std::uint64_t n = frames_for_period(n_base, p, cfg.base_period_ms);
    MacsComparison c = compare_macs(n_base, n, cfg);
    rows.push_back({p, n_base, n, c.base.total, c.compressed.total, c.reduction});
  }
  return rows;
}

struct SweepRow {
  double lambda = 0.0;
  double frame_period_ms = 0.0;
  double mean_fires = 0.0;
  double loss = 0.0;
  double macs_reduction = 0.0;
  bool extrapolated = false;
};

// Forward-only evaluation of each lambda; rows sorted by lambda. macs_reduction
// is averaged over utterances using the student's own dimensions.
inline std::vector<SweepRow> sweep(const StudentModel& student, const TeacherModel& teacher, const Corpus& corpus,
                                   std::vector<double> lambdas, const SampleRange& trained_range,
                                   const CifOptions& cif = {}, double cosine_weight = 1.0) {
  if (corpus.empty()) throw Error(ErrorCode::invalid_argument, "empty corpus");
  std::sort(lambdas.begin(), lambdas.end());
  const MacsConfig macs = MacsConfig::for_model(student.dims());
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    check_lambda(lambda);
    SweepRow row;
    row.lambda = lambda;
    row.extrapolated = !trained_range.contains(lambda);
    for (const auto& utt : corpus) {
      ad::Tape tape;
      BoundStudent s = bind(tape, student, false);
      const auto layers = teacher.forward(utt.features.frames);
      UtteranceLoss l = utterance_loss(tape, s, utt, layers, tape.constant(Matrix::scalar(lambda)), cosine_weight, cif);
      const std::uint64_t T = utt.features.length();
      row.loss += l.distill.scalar();
      row.mean_fires += static_cast<double>(l.fires);
      row.frame_period_ms += frame_period(static_cast<double>(T), static_cast<double>(l.fires), utt.features.frame_period_ms);
      row.macs_reduction += macs_reduction(T, l.fires, macs);
    }
    const double n = static_cast<double>(corpus.size());
    row.loss /= n;
    row.mean_fires /= n;
    row.frame_period_ms /= n;
    row.macs_reduction /= n;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ofa
