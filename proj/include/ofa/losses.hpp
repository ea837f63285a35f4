#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ofa/cif.hpp"
#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"

namespace ofa {

// Segment supervision for one utterance. A 1 marks the last frame of a
// segment, so num_segments is the number of ones.
struct GuidanceTargets {
  std::vector<std::uint8_t> boundaries;
  std::size_t num_segments = 0;

  static GuidanceTargets from_boundaries(std::vector<std::uint8_t> bits) {
    GuidanceTargets g;
    for (auto b : bits) {
      if (b > 1) throw Error(ErrorCode::invalid_argument, "boundary bits must be 0 or 1");
      g.num_segments += b;
    }
    g.boundaries = std::move(bits);
    return g;
  }

  friend bool operator==(const GuidanceTargets&, const GuidanceTargets&) = default;
};

enum class GuidanceMode { boundary_bce, quantity, both };

struct GuidanceWeights {
  double bce = 1.0;
  double quantity = 0.5;
};

inline constexpr double kBceClamp = 1e-7;

struct GuidanceTerms {
  ad::Var bce;
  ad::Var quantity;
};

// Both guidance terms from the unmodified alpha (T x 1).
inline GuidanceTerms guidance_terms(ad::Var alpha_raw, const GuidanceTargets& targets) {
  ad::Tape& tape = *alpha_raw.tape;
  const std::size_t T = alpha_raw.value().rows();
  if (targets.boundaries.size() != T || alpha_raw.value().cols() != 1)
    throw Error(ErrorCode::dimension_mismatch, "guidance targets length " + std::to_string(targets.boundaries.size()) +
                                                   " != alpha length " + std::to_string(T));
  Matrix b(T, 1);
  for (std::size_t t = 0; t < T; ++t) b(t, 0) = targets.boundaries[t];
  Matrix not_b = b;
  for (double& v : not_b.data()) v = 1.0 - v;
  ad::Var a = ad::clamp(alpha_raw, kBceClamp, 1.0 - kBceClamp);
  ad::Var log_a = ad::log(a);
  ad::Var log_not_a = ad::log(ad::affine(a, -1.0, 1.0));
  ad::Var ll = ad::add(ad::mul(tape.constant(std::move(b)), log_a), ad::mul(tape.constant(std::move(not_b)), log_not_a));
  GuidanceTerms terms;
  terms.bce = ad::scale(ad::mean(ll), -1.0);
  terms.quantity = ad::abs(ad::affine(ad::sum(alpha_raw), 1.0, -static_cast<double>(targets.num_segments)));
  return terms;
}

inline ad::Var guidance_loss(ad::Var alpha_raw, const GuidanceTargets& targets, GuidanceMode mode,
                             const GuidanceWeights& w = {}) {
  GuidanceTerms t = guidance_terms(alpha_raw, targets);
  switch (mode) {
    case GuidanceMode::boundary_bce: return t.bce;
    case GuidanceMode::quantity: return t.quantity;
    case GuidanceMode::both: break;
  }
  return ad::add(ad::scale(t.bce, w.bce), ad::scale(t.quantity, w.quantity));
}

inline double guidance_loss(std::span<const double> alpha_raw, const GuidanceTargets& targets, GuidanceMode mode,
                            const GuidanceWeights& w = {}) {
  ad::Tape tape;
  return guidance_loss(tape.constant(Matrix::column(alpha_raw)), targets, mode, w).scalar();
}

// Mean over heads of L1(pred, target) - w_cos * mean_frames log sigmoid(cos).
inline ad::Var distill_loss(const std::vector<ad::Var>& heads, const std::vector<ad::Var>& targets,
                            double cosine_weight = 1.0) {
  if (heads.empty() || heads.size() != targets.size())
    throw Error(ErrorCode::dimension_mismatch, "distill_loss: " + std::to_string(heads.size()) + " heads vs " +
                                                   std::to_string(targets.size()) + " targets");
  ad::Var total;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    if (!heads[k].value().same_shape(targets[k].value()))
      throw Error(ErrorCode::dimension_mismatch,
                  "distill_loss: head " + std::to_string(k) + " is " + heads[k].value().shape_string() +
                      " but its target is " + targets[k].value().shape_string() +
                      " (teacher pooled with a different segmentation?)");
    ad::Var term = ad::l1(heads[k], targets[k]);
    if (cosine_weight != 0.0) {
      ad::Var cos_term = ad::mean(ad::log_sigmoid(ad::cosine_similarity(heads[k], targets[k])));
      term = ad::sub(term, ad::scale(cos_term, cosine_weight));
    }
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(heads.size()));
}

inline double distill_loss(const std::vector<Matrix>& heads, const std::vector<Matrix>& targets,
                           double cosine_weight = 1.0) {
  ad::Tape tape;
  std::vector<ad::Var> h, t;
  for (const auto& m : heads) h.push_back(tape.constant(m));
  for (const auto& m : targets) t.push_back(tape.constant(m));
  return distill_loss(h, t, cosine_weight).scalar();
}

inline double distill_loss(const std::vector<CompressedSequence>& heads,
                           const std::vector<CompressedSequence>& pooled_teacher, double cosine_weight = 1.0) {
  std::vector<Matrix> h, t;
  for (const auto& c : heads) h.push_back(c.frames);
  for (const auto& c : pooled_teacher) t.push_back(c.frames);
  return distill_loss(h, t, cosine_weight);
}

}  // namespace ofa
