#pragma once

// Pre-training and downstream adaptation loops.
//
// Pre-training draws one lambda per optimisation step and shares it across the
// batch. Guidance terms always see the unmodified alpha. The teacher is pooled
// with the student's own pooling matrix so both sides have N frames.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ofa/alphamod.hpp"
#include "ofa/cif.hpp"
#include "ofa/data_io.hpp"
#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"
#include "ofa/losses.hpp"
#include "ofa/model.hpp"
#include "ofa/rng.hpp"

namespace ofa {

struct LossWeights {
  double distill = 1.0;
  double guidance = 1.0;
  double quantity = 0.5;
  double cosine = 1.0;
};

struct TrainConfig {
  SampleRange range = SampleRange::full();
  double learning_rate = 0.05;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  LossWeights weights;
  GuidanceMode guidance_mode = GuidanceMode::both;
  CifOptions cif;
  ModelDims dims;
  std::uint64_t seed = 0;

  void validate() const {
    range.validate();
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::config, "learning_rate must be positive");
    if (batch_size == 0) throw Error(ErrorCode::config, "batch_size must be positive");
    if (weights.distill < 0 || weights.guidance < 0 || weights.quantity < 0 || weights.cosine < 0)
      throw Error(ErrorCode::config, "loss weights must be >= 0");
    dims.validate();
  }
};

struct TraceRow {
  std::size_t step = 0;
  double lambda = 0.0;
  double distill = 0.0;
  double guidance = 0.0;
  double quantity = 0.0;
  double total = 0.0;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct PretrainResult {
  StudentModel student;
  std::vector<TraceRow> trace;
};

// Per-utterance loss terms recorded on a shared tape.
struct UtteranceLoss {
  ad::Var distill;
  ad::Var guidance;
  ad::Var quantity;
  std::size_t fires = 0;
};

inline UtteranceLoss utterance_loss(ad::Tape& tape, const BoundStudent& s, const Utterance& utt,
                                    const std::vector<Matrix>& teacher_layers, ad::Var lambda, double cosine_weight,
                                    const CifOptions& cif) {
  StudentGraph g = student_forward(tape, s, utt.features.frames, lambda, cif);
  std::vector<ad::Var> targets;
  for (const Matrix& layer : teacher_layers) targets.push_back(ad::matmul(g.pooling, tape.constant(layer)));
  GuidanceTerms gt = guidance_terms(g.alpha_raw, utt.targets);
  return {distill_loss(g.heads, targets, cosine_weight), gt.bce, gt.quantity, g.segmentation.size()};
}

inline std::vector<std::vector<Matrix>> teacher_cache(const TeacherModel& teacher, const Corpus& corpus) {
  std::vector<std::vector<Matrix>> cache;
  cache.reserve(corpus.size());
  for (const auto& u : corpus) cache.push_back(teacher.forward(u.features.frames));
  return cache;
}

// Draws the lambda for one step.
using LambdaSchedule = std::function<double(Rng&)>;

inline LambdaSchedule uniform_schedule(const SampleRange& range) {
  return [range](Rng& rng) { return sample_lambda(rng, range); };
}

inline LambdaSchedule constant_schedule(double lambda) {
  check_lambda(lambda);
  return [lambda](Rng&) { return lambda; };
}

// Shared loop. The lambda stream and the batch stream use separate generators,
// so a degenerate sampler reproduces a fixed-lambda run exactly.
inline PretrainResult pretrain(const TrainConfig& cfg, const LambdaSchedule& schedule, const Corpus& corpus,
                               StudentModel student, const TeacherModel& teacher) {
  cfg.validate();
  if (corpus.empty()) throw Error(ErrorCode::invalid_argument, "empty corpus");
  PretrainResult result;
  Rng root(cfg.seed);
  Rng lambda_rng(root.fork());
  Rng batch_rng(root.fork());
  const auto teacher_layers = teacher_cache(teacher, corpus);

  double w_guidance = cfg.weights.guidance;
  double w_quantity = cfg.weights.quantity;
  if (cfg.guidance_mode == GuidanceMode::boundary_bce) w_quantity = 0.0;
  if (cfg.guidance_mode == GuidanceMode::quantity) w_guidance = 0.0;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lambda = schedule(lambda_rng);
    check_lambda(lambda);

    ad::Tape tape;
    BoundStudent s = bind(tape, student, true);
    ad::Var lam = tape.constant(Matrix::scalar(lambda));
    const std::size_t batch = std::min(cfg.batch_size, corpus.size());
    ad::Var distill_sum, guidance_sum, quantity_sum;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        // Fisher-Yates with the portable generator.
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[batch_rng.below(i)]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      UtteranceLoss l = utterance_loss(tape, s, corpus[idx], teacher_layers[idx], lam, cfg.weights.cosine, cfg.cif);
      distill_sum = distill_sum.valid() ? ad::add(distill_sum, l.distill) : l.distill;
      guidance_sum = guidance_sum.valid() ? ad::add(guidance_sum, l.guidance) : l.guidance;
      quantity_sum = quantity_sum.valid() ? ad::add(quantity_sum, l.quantity) : l.quantity;
    }
    const double inv = 1.0 / static_cast<double>(batch);
    ad::Var distill = ad::scale(distill_sum, inv);
    ad::Var guidance = ad::scale(guidance_sum, inv);
    ad::Var quantity = ad::scale(quantity_sum, inv);
    ad::Var total = ad::add(ad::add(ad::scale(distill, cfg.weights.distill), ad::scale(guidance, w_guidance)),
                            ad::scale(quantity, w_quantity));

    TraceRow row{step, lambda, distill.scalar(), guidance.scalar(), quantity.scalar(), total.scalar()};
    if (!std::isfinite(row.total))
      throw Error(ErrorCode::divergence,
                  "non-finite loss at step " + std::to_string(step) + " (lambda " + std::to_string(lambda) + ")");
    result.trace.push_back(row);

    tape.backward(total);
    auto& params = student.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = s.all[i].grad();
      Matrix& p = params[i].value;
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= cfg.learning_rate * g[j];
      if (!p.all_finite())
        throw Error(ErrorCode::divergence, "parameter '" + params[i].name + "' became non-finite at step " +
                                               std::to_string(step) + " (lambda " + std::to_string(lambda) + ")");
    }
  }
  result.student = std::move(student);
  return result;
}

inline PretrainResult ofa_pretrain(const TrainConfig& cfg, const Corpus& corpus, StudentModel student,
                                   const TeacherModel& teacher) {
  return pretrain(cfg, uniform_schedule(cfg.range), corpus, std::move(student), teacher);
}

inline PretrainResult fixed_lambda_pretrain(const TrainConfig& cfg, double lambda, const Corpus& corpus,
                                            StudentModel student, const TeacherModel& teacher) {
  return pretrain(cfg, constant_schedule(lambda), corpus, std::move(student), teacher);
}

struct EvalStats {
  double distill = 0.0;
  double mean_fires = 0.0;
  double mean_frames = 0.0;
  // Mean over utterances of base_period * T / N.
  double frame_period_ms = 0.0;
};

// Forward-only evaluation at a fixed lambda.
inline EvalStats evaluate(const StudentModel& student, const TeacherModel& teacher, const Corpus& corpus, double lambda,
                          double cosine_weight = 1.0, const CifOptions& cif = {}) {
  check_lambda(lambda);
  EvalStats stats;
  for (const auto& utt : corpus) {
    ad::Tape tape;
    BoundStudent s = bind(tape, student, false);
    const auto layers = teacher.forward(utt.features.frames);
    UtteranceLoss l = utterance_loss(tape, s, utt, layers, tape.constant(Matrix::scalar(lambda)), cosine_weight, cif);
    const double T = static_cast<double>(utt.features.length());
    const double N = static_cast<double>(l.fires);
    stats.distill += l.distill.scalar();
    stats.mean_fires += N;
    stats.mean_frames += T;
    stats.frame_period_ms += utt.features.frame_period_ms * T / N;
  }
  const double n = static_cast<double>(corpus.size());
  stats.distill /= n;
  stats.mean_fires /= n;
  stats.mean_frames /= n;
  stats.frame_period_ms /= n;
  return stats;
}

// ---------------------------------------------------------------------------
// Downstream adaptation: frozen student, trainable head and theta.

enum class TaskKind { utterance, frame };

struct DownstreamHead {
  Matrix weight;  // hidden x classes
  Matrix bias;    // 1 x classes
};

enum class ThetaGradient { analytic, smoothed };

struct AdaptConfig {
  double theta_learning_rate = 1e-3;
  double momentum = 0.9;
  double head_learning_rate = 0.1;
  // Weight of the soft compute constraint: mean(alpha_mod) per utterance.
  double rate_weight = 0.0;
  std::size_t steps = 200;
  // Head-only steps before theta starts moving; a random head gives theta
  // no useful signal.
  std::size_t warmup_steps = 0;
  std::size_t batch_size = 8;
  double lambda_max = kLambdaLimit - kLambdaOpenEps;
  CifOptions cif;
  std::uint64_t seed = 0;
  // analytic: backpropagate through the fixed segmentation. smoothed: central
  // difference over +-smoothing in theta, which also sees fire-count changes.
  ThetaGradient theta_gradient = ThetaGradient::smoothed;
  // Half-width in theta, decayed geometrically from smoothing to
  // smoothing_final over the theta-training steps (coarse basin first).
  double smoothing = 1.5;
  double smoothing_final = 0.5;
  // When set, theta is not trained and lambda stays at this value.
  std::optional<double> fixed_lambda;
};

struct AdaptStep {
  std::size_t step = 0;
  double lambda = 0.0;
  double loss = 0.0;
};

struct TaskMetric {
  double loss = 0.0;       // task cross-entropy + rate_weight * fires / T
  double accuracy = 0.0;
  double mean_fires = 0.0;
};

struct AdaptResult {
  double lambda = 0.0;
  double theta = 0.0;
  std::vector<AdaptStep> trajectory;
  DownstreamHead head;
  TaskMetric metric;
  bool saturation_warning = false;
};

namespace detail {

struct TaskGraph {
  ad::Var task_loss;
  ad::Var rate;
  ad::Var logits;
  std::size_t fires = 0;
};

inline TaskGraph task_forward(ad::Tape& tape, const BoundStudent& s, const Utterance& utt, TaskKind kind,
                              ad::Var head_w, ad::Var head_b, ad::Var lambda, const CifOptions& cif) {
  StudentGraph g = student_forward(tape, s, utt.features.frames, lambda, cif, false);
  TaskGraph out;
  out.fires = g.segmentation.size();
  if (kind == TaskKind::utterance) {
    // Output frames weighted by the alpha mass they pooled, so a light tail
    // frame does not count as much as a full one.
    ad::Var mass = ad::matmul(g.pooling, tape.constant(Matrix(g.pooling.cols(), 1, 1.0)));
    ad::Var summary = ad::divide_by(ad::matmul(ad::transpose(mass), g.representation), ad::sum(mass));
    out.logits = ad::add(ad::matmul(summary, head_w), head_b);
    const int label = utt.utterance_label;
    out.task_loss = ad::cross_entropy(out.logits, std::span<const int>(&label, 1));
  } else {
    // Each input frame takes the mix of the output frames it was pooled into,
    // weighted by its share in each (rows of W^T normalised to sum to 1).
    ad::Var spread = ad::transpose(g.pooling);
    const std::size_t N = g.pooling.rows();
    ad::Var share = ad::matmul(spread, tape.constant(Matrix(N, 1, 1.0)));
    ad::Var inv = ad::exp(ad::scale(ad::log(ad::clamp(share, 1e-12, 1e300)), -1.0));
    ad::Var norm = ad::mul(spread, ad::matmul(inv, tape.constant(Matrix(1, N, 1.0))));
    ad::Var frames = ad::matmul(norm, g.representation);
    out.logits = ad::add(ad::matmul(frames, head_w), head_b);
    out.task_loss = ad::cross_entropy(out.logits, utt.frame_labels);
  }
  out.rate = ad::mean(g.alpha_mod);
  return out;
}

inline std::size_t count_correct(const Matrix& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    correct += static_cast<int>(best) == labels[i];
  }
  return correct;
}

}  // namespace detail

inline std::size_t task_classes(const Corpus& data, TaskKind kind) {
  int m = 0;
  for (const auto& u : data) {
    if (kind == TaskKind::utterance) m = std::max(m, u.utterance_label);
    else
      for (int l : u.frame_labels) m = std::max(m, l);
  }
  return static_cast<std::size_t>(m) + 1;
}

// Metric at a fixed lambda: mean task loss plus the discrete compute term.
inline TaskMetric evaluate_task(const StudentModel& student, const DownstreamHead& head, const Corpus& data,
                                TaskKind kind, double lambda, double rate_weight, const CifOptions& cif = {}) {
  TaskMetric m;
  double total_items = 0.0;
  for (const auto& utt : data) {
    ad::Tape tape;
    BoundStudent s = bind(tape, student, false);
    detail::TaskGraph g = detail::task_forward(tape, s, utt, kind, tape.constant(head.weight),
                                               tape.constant(head.bias), tape.constant(Matrix::scalar(lambda)), cif);
    const double T = static_cast<double>(utt.features.length());
    m.loss += g.task_loss.scalar() + rate_weight * static_cast<double>(g.fires) / T;
    m.mean_fires += static_cast<double>(g.fires);
    if (kind == TaskKind::utterance) {
      const int label = utt.utterance_label;
      m.accuracy += static_cast<double>(detail::count_correct(g.logits.value(), std::span<const int>(&label, 1)));
      total_items += 1.0;
    } else {
      m.accuracy += static_cast<double>(detail::count_correct(g.logits.value(), utt.frame_labels));
      total_items += T;
    }
  }
  const double n = static_cast<double>(data.size());
  m.loss /= n;
  m.mean_fires /= n;
  m.accuracy /= total_items;
  return m;
}

inline AdaptResult adapt_lambda(const StudentModel& student, const Corpus& train, const Corpus& eval, TaskKind kind,
                                const AdaptConfig& cfg, double init_theta) {
  if (train.empty() || eval.empty()) throw Error(ErrorCode::invalid_argument, "empty downstream data");
  if (!(cfg.theta_learning_rate >= 0.0) || !(cfg.head_learning_rate > 0.0) || cfg.batch_size == 0)
    throw Error(ErrorCode::config, "adapt: learning rates must be >= 0 (head > 0) and batch_size positive");
  if (!(cfg.lambda_max > 0.0 && cfg.lambda_max < kLambdaLimit))
    throw Error(ErrorCode::config, "adapt: lambda_max must lie in (0, 2)");
  if (cfg.fixed_lambda) check_lambda(*cfg.fixed_lambda);
  if (!(cfg.smoothing > 0.0) || !(cfg.smoothing_final > 0.0))
    throw Error(ErrorCode::config, "adapt: smoothing widths must be positive");

  Rng root(cfg.seed);
  Rng head_rng(root.fork());
  Rng batch_rng(root.fork());
  const std::size_t classes = std::max(task_classes(train, kind), task_classes(eval, kind));
  const std::size_t hidden = student.dims().hidden;
  DownstreamHead head{detail::glorot(hidden, classes, head_rng), Matrix(1, classes)};
  Matrix head_vw(hidden, classes), head_vb(1, classes);

  double theta = init_theta;
  double theta_velocity = 0.0;
  const bool train_theta = !cfg.fixed_lambda && cfg.theta_learning_rate > 0.0;
  auto current_lambda = [&] { return cfg.fixed_lambda ? *cfg.fixed_lambda : lambda_from_theta(theta, cfg.lambda_max); };

  AdaptResult result;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, (train.size() + cfg.batch_size - 1) / cfg.batch_size);
  bool any_theta_grad = false;
  std::size_t epoch_steps = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ad::Tape tape;
    BoundStudent s = bind(tape, student, false);
    ad::Var w = tape.parameter(head.weight);
    ad::Var b = tape.parameter(head.bias);
    ad::Var th = tape.parameter(Matrix::scalar(theta));
    ad::Var lam = cfg.fixed_lambda ? tape.constant(Matrix::scalar(*cfg.fixed_lambda))
                                   : ad::lambda_from_theta(th, cfg.lambda_max);
    const double lambda_now = lam.scalar();

    const std::size_t batch = std::min(cfg.batch_size, train.size());
    std::vector<const Utterance*> picked;
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[batch_rng.below(j)]);
        cursor = 0;
      }
      picked.push_back(&train[order[cursor++]]);
    }
    ad::Var sum;
    for (const Utterance* utt : picked) {
      detail::TaskGraph g = detail::task_forward(tape, s, *utt, kind, w, b, lam, cfg.cif);
      ad::Var l = ad::add(g.task_loss, ad::scale(g.rate, cfg.rate_weight));
      sum = sum.valid() ? ad::add(sum, l) : l;
    }
    ad::Var loss = ad::scale(sum, 1.0 / static_cast<double>(batch));
    if (!std::isfinite(loss.scalar()))
      throw Error(ErrorCode::divergence, "non-finite downstream loss at step " + std::to_string(step));
    result.trajectory.push_back({step, lambda_now, loss.scalar()});
    tape.backward(loss);

    auto momentum_step = [&](Matrix& p, Matrix& v, const Matrix& g, double lr) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        v[j] = cfg.momentum * v[j] + g[j];
        p[j] -= lr * v[j];
      }
    };
    momentum_step(head.weight, head_vw, w.grad(), cfg.head_learning_rate);
    momentum_step(head.bias, head_vb, b.grad(), cfg.head_learning_rate);
    if (!head.weight.all_finite() || !head.bias.all_finite())
      throw Error(ErrorCode::divergence, "downstream head became non-finite at step " + std::to_string(step));
    if (train_theta && step >= cfg.warmup_steps) {
      double g = th.grad()[0];
      if (cfg.theta_gradient == ThetaGradient::smoothed) {
        // Central difference of the batch loss with the segmentation re-run
        // at each end, so changes in the number of output frames count.
        auto batch_loss = [&](double th_value) {
          ad::Tape t;
          BoundStudent sv = bind(t, student, false);
          ad::Var l = t.constant(Matrix::scalar(lambda_from_theta(th_value, cfg.lambda_max)));
          double total = 0.0;
          for (const Utterance* utt : picked) {
            detail::TaskGraph tg = detail::task_forward(t, sv, *utt, kind, t.constant(w.value()), t.constant(b.value()), l, cfg.cif);
            total += tg.task_loss.scalar() + cfg.rate_weight * tg.rate.scalar();
          }
          return total / static_cast<double>(batch);
        };
        const double progress = cfg.steps > cfg.warmup_steps + 1
                                    ? static_cast<double>(step - cfg.warmup_steps) /
                                          static_cast<double>(cfg.steps - cfg.warmup_steps - 1)
                                    : 1.0;
        const double h = cfg.smoothing * std::pow(cfg.smoothing_final / cfg.smoothing, progress);
        g = (batch_loss(theta + h) - batch_loss(theta - h)) / (2.0 * h);
      }
      any_theta_grad = any_theta_grad || g != 0.0;
      theta_velocity = cfg.momentum * theta_velocity + g;
      theta -= cfg.theta_learning_rate * theta_velocity;
      if (!std::isfinite(theta)) throw Error(ErrorCode::divergence, "theta became non-finite at step " + std::to_string(step));
      if (++epoch_steps == steps_per_epoch) {
        if (!any_theta_grad) result.saturation_warning = true;
        any_theta_grad = false;
        epoch_steps = 0;
      }
    }
  }
  result.theta = theta;
  result.lambda = current_lambda();
  result.head = head;
  result.metric = evaluate_task(student, head, eval, kind, result.lambda, cfg.rate_weight, cfg.cif);
  return result;
}

struct GridPoint {
  double lambda = 0.0;
  TaskMetric metric;
};

// Trains a head at each fixed lambda with the same budget as adapt_lambda.
inline std::vector<GridPoint> grid_search(const StudentModel& student, const Corpus& train, const Corpus& eval,
                                          TaskKind kind, AdaptConfig cfg, std::span<const double> lambdas) {
  std::vector<GridPoint> out;
  for (double lambda : lambdas) {
    cfg.fixed_lambda = lambda;
    AdaptResult r = adapt_lambda(student, train, eval, kind, cfg, 0.0);
    out.push_back({lambda, r.metric});
  }
  return out;
}

}  // namespace ofa
