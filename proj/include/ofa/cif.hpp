#pragma once

// Continuous integrate-and-fire.
//
// Per-frame weights alpha are accumulated left to right. When the accumulator
// reaches the threshold a fire event is emitted at that frame: the part of
// alpha_t needed to complete the threshold (left weight) closes the current
// segment, and the remainder (residual) opens the next one. A leftover
// accumulation of at least tail_threshold at the end fires one more (tail)
// frame; an utterance that never fires gets one forced event covering all of
// it.
//
// Each output frame is the alpha-weighted sum of the input frames in its
// segment, with boundary frames split between neighbouring segments.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"
#include "ofa/matrix.hpp"

namespace ofa {

using AlphaWeights = std::vector<double>;

// T x D features plus the frame period they were sampled at.
struct FeatureSequence {
  Matrix frames;
  double frame_period_ms = 20.0;

  std::size_t length() const noexcept { return frames.rows(); }
  std::size_t dim() const noexcept { return frames.cols(); }
};

struct CifOptions {
  double threshold = 1.0;
  double tail_threshold = 0.5;
  double eps = 1e-9;
};

struct FireEvent {
  std::size_t frame = 0;
  // Part of alpha[frame] that completes the current segment. For tail and
  // forced events, the whole pending accumulation.
  double left_weight = 0.0;
  bool is_tail = false;
  // The accumulator landed within eps below the threshold, so the whole
  // alpha[frame] was consumed and nothing carried over.
  bool saturated = false;

  friend bool operator==(const FireEvent&, const FireEvent&) = default;
};

struct Segmentation {
  std::vector<FireEvent> events;
  std::size_t source_length = 0;
  double threshold = 1.0;

  std::size_t size() const noexcept { return events.size(); }

  friend bool operator==(const Segmentation&, const Segmentation&) = default;
};

// Frames [start, end] contributing to one output frame, with their weights.
struct SegmentSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::vector<double> weights;

  friend bool operator==(const SegmentSpan&, const SegmentSpan&) = default;
};

struct CompressedSequence {
  Matrix frames;
  std::vector<SegmentSpan> spans;
};

namespace detail {

inline void validate_alpha(std::span<const double> alpha, const CifOptions& opts) {
  if (alpha.empty()) throw Error(ErrorCode::invalid_argument, "alpha must have at least one frame");
  if (!(opts.threshold > 0.0)) throw Error(ErrorCode::invalid_argument, "threshold must be positive");
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    const double a = alpha[t];
    if (!std::isfinite(a)) throw Error(ErrorCode::non_finite, "alpha[" + std::to_string(t) + "] is not finite");
    if (a < 0.0) throw Error(ErrorCode::invalid_argument, "alpha[" + std::to_string(t) + "] is negative");
    if (a > opts.threshold)
      throw Error(ErrorCode::invalid_argument,
                  "alpha[" + std::to_string(t) + "] exceeds the fire threshold (one fire per frame)");
  }
}

enum class FrameStep : std::uint8_t { accumulate, fire, fire_saturated };

// Pooling weights rebuilt from alpha and a segmentation, plus the per-frame
// record needed to differentiate them.
struct WeightPlan {
  Matrix weights;                 // N x T
  std::vector<FrameStep> steps;   // per frame
  std::vector<std::size_t> row;   // output row open when the frame starts
  std::vector<bool> mean_rows;    // rows replaced by a plain mean
};

inline std::size_t span_start(const Segmentation& seg, std::size_t k) {
  return k == 0 ? 0 : seg.events[k - 1].frame;
}

inline WeightPlan plan_weights(std::span<const double> alpha, const Segmentation& seg) {
  const std::size_t T = alpha.size();
  const std::size_t N = seg.events.size();
  if (seg.source_length != T)
    throw Error(ErrorCode::dimension_mismatch, "segmentation source length " + std::to_string(seg.source_length) +
                                                   " != alpha length " + std::to_string(T));
  if (N == 0) throw Error(ErrorCode::invalid_argument, "segmentation has no events");

  WeightPlan plan{Matrix(N, T), std::vector<FrameStep>(T), std::vector<std::size_t>(T), std::vector<bool>(N)};
  std::size_t k = 0;
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    plan.row[t] = k;
    const bool fires = k < N && !seg.events[k].is_tail && seg.events[k].frame == t;
    if (fires) {
      const FireEvent& ev = seg.events[k];
      const double left = ev.saturated ? alpha[t] : seg.threshold - acc;
      plan.weights(k, t) = left;
      const double residual = alpha[t] - left;
      ++k;
      if (k < N) plan.weights(k, t) = residual;
      acc = residual;
      plan.steps[t] = ev.saturated ? FrameStep::fire_saturated : FrameStep::fire;
    } else {
      if (k < N) plan.weights(k, t) = alpha[t];
      acc += alpha[t];
      plan.steps[t] = FrameStep::accumulate;
    }
  }

  for (std::size_t r = 0; r < N; ++r) {
    const std::size_t start = span_start(seg, r);
    const std::size_t end = seg.events[r].frame;
    double total = 0.0;
    for (std::size_t t = start; t <= end; ++t) total += plan.weights(r, t);
    if (total == 0.0) {
      plan.mean_rows[r] = true;
      const double w = 1.0 / static_cast<double>(end - start + 1);
      for (std::size_t t = start; t <= end; ++t) plan.weights(r, t) = w;
    }
  }
  return plan;
}

inline std::vector<SegmentSpan> spans_of(const Matrix& weights, const Segmentation& seg) {
  std::vector<SegmentSpan> spans;
  spans.reserve(seg.events.size());
  for (std::size_t k = 0; k < seg.events.size(); ++k) {
    SegmentSpan s{span_start(seg, k), seg.events[k].frame, {}};
    for (std::size_t t = s.start; t <= s.end; ++t) s.weights.push_back(weights(k, t));
    spans.push_back(std::move(s));
  }
  return spans;
}

}  // namespace detail

inline Segmentation integrate_and_fire(std::span<const double> alpha, const CifOptions& opts = {}) {
  detail::validate_alpha(alpha, opts);
  const std::size_t T = alpha.size();
  Segmentation seg{{}, T, opts.threshold};
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double a = alpha[t];
    if (acc + a >= opts.threshold - opts.eps) {
      const double gap = opts.threshold - acc;
      const bool saturated = gap > a;
      const double left = saturated ? a : gap;
      seg.events.push_back({t, left, false, saturated});
      acc = a - left;
    } else {
      acc += a;
    }
  }
  if (acc >= opts.tail_threshold) {
    seg.events.push_back({T - 1, acc, true, false});
  } else if (seg.events.empty()) {
    seg.events.push_back({T - 1, acc, true, false});
  }
  return seg;
}

inline std::size_t fire_count(std::span<const double> alpha, const CifOptions& opts = {}) {
  return integrate_and_fire(alpha, opts).size();
}

// N x T pooling matrix for a fixed segmentation.
inline Matrix pooling_weights(std::span<const double> alpha, const Segmentation& seg) {
  return detail::plan_weights(alpha, seg).weights;
}

inline CompressedSequence pool_segments(const Matrix& features, std::span<const double> alpha,
                                        const Segmentation& seg) {
  if (features.rows() != alpha.size())
    throw Error(ErrorCode::dimension_mismatch, "features have " + std::to_string(features.rows()) +
                                                   " frames but alpha has " + std::to_string(alpha.size()));
  Matrix w = pooling_weights(alpha, seg);
  CompressedSequence out{matmul(w, features), detail::spans_of(w, seg)};
  return out;
}

inline CompressedSequence pool_segments(const FeatureSequence& features, std::span<const double> alpha,
                                        const Segmentation& seg) {
  return pool_segments(features.frames, alpha, seg);
}

// Applies the student's segmentation to every teacher layer.
inline std::vector<CompressedSequence> pool_teacher(const std::vector<Matrix>& teacher_layers,
                                                    std::span<const double> alpha, const Segmentation& seg) {
  std::vector<CompressedSequence> out;
  out.reserve(teacher_layers.size());
  for (std::size_t l = 0; l < teacher_layers.size(); ++l) {
    if (teacher_layers[l].rows() != seg.source_length)
      throw Error(ErrorCode::dimension_mismatch, "teacher layer " + std::to_string(l) + " has " +
                                                     std::to_string(teacher_layers[l].rows()) + " frames, expected " +
                                                     std::to_string(seg.source_length));
    out.push_back(pool_segments(teacher_layers[l], alpha, seg));
  }
  return out;
}

namespace ad {

// Differentiable N x T pooling matrix. alpha is a T x 1 node. The segmentation
// is held fixed: gradients flow through the weights, not event positions.
inline Var pooling_weights(Var alpha, const Segmentation& seg) {
  Tape& t = detail::tape_of(alpha);
  const Matrix& av = alpha.value();
  if (av.cols() != 1) throw Error(ErrorCode::dimension_mismatch, "alpha must be a T x 1 column");
  ofa::detail::WeightPlan plan = ofa::detail::plan_weights(av.data(), seg);
  Matrix w = plan.weights;
  return t.record(std::move(w), {alpha}, [alpha, plan = std::move(plan)](Tape& tp, std::size_t self) {
    if (!tp.tracks(alpha.id)) return;
    const Matrix& g = tp.grad_buffer(self);
    Matrix& ga = tp.grad_buffer(alpha.id);
    const std::size_t N = g.rows();
    const std::size_t T = g.cols();
    auto gw = [&](std::size_t r, std::size_t t) { return (r < N && !plan.mean_rows[r]) ? g(r, t) : 0.0; };
    double g_acc = 0.0;  // d loss / d accumulator after frame t
    for (std::size_t t = T; t-- > 0;) {
      const std::size_t k = plan.row[t];
      switch (plan.steps[t]) {
        case ofa::detail::FrameStep::accumulate:
          ga(t, 0) += gw(k, t) + g_acc;
          break;
        case ofa::detail::FrameStep::fire:
          // left = thr - acc; residual = alpha - thr + acc; acc' = residual.
          ga(t, 0) += gw(k + 1, t) + g_acc;
          g_acc = -gw(k, t) + gw(k + 1, t) + g_acc;
          break;
        case ofa::detail::FrameStep::fire_saturated:
          ga(t, 0) += gw(k, t);
          g_acc = 0.0;
          break;
      }
    }
  });
}

// pooled = W(alpha) * features.
inline Var pool_segments(Var features, Var alpha, const Segmentation& seg) {
  return matmul(pooling_weights(alpha, seg), features);
}

}  // namespace ad

}  // namespace ofa
