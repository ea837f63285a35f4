#pragma once

// Synthetic segment-structured corpora and the binary feature file format.
//
// Feature file, little-endian:
//   "OFAF" | u32 version | u32 T | u32 D | f32 frame_period_ms | T*D f32
//   optional: u32 0x0B00DA11 | T bytes of {0,1} boundary bits

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/cif.hpp"
#include "ofa/error.hpp"
#include "ofa/losses.hpp"
#include "ofa/matrix.hpp"
#include "ofa/model.hpp"
#include "ofa/rng.hpp"

namespace ofa {

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::uint32_t kBoundaryMarker = 0x0B00DA11;

struct Utterance {
  FeatureSequence features;
  GuidanceTargets targets;
  // Latent vocabulary id of every frame.
  std::vector<int> frame_labels;
  // Class derived from the utterance-level mean feature.
  int utterance_label = 0;
};

using Corpus = std::vector<Utterance>;

struct SyntheticSpec {
  std::size_t num_utterances = 100;
  std::size_t min_frames = 24;
  std::size_t max_frames = 64;
  std::size_t feature_dim = 8;
  std::size_t min_segment = 2;
  std::size_t max_segment = 6;
  std::size_t vocab_size = 8;
  std::size_t utterance_classes = 2;
  double noise = 0.1;
  double frame_period_ms = 20.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_utterances == 0) throw Error(ErrorCode::config, "num_utterances must be positive");
    if (min_frames == 0 || min_frames > max_frames) throw Error(ErrorCode::config, "need 1 <= min_frames <= max_frames");
    if (min_segment == 0 || min_segment > max_segment)
      throw Error(ErrorCode::config, "need 1 <= min_segment <= max_segment");
    if (feature_dim == 0 || vocab_size == 0 || utterance_classes == 0)
      throw Error(ErrorCode::config, "feature_dim, vocab_size and utterance_classes must be positive");
    if (!(noise >= 0.0)) throw Error(ErrorCode::config, "noise must be >= 0");
    if (!(frame_period_ms > 0.0)) throw Error(ErrorCode::config, "frame_period_ms must be positive");
  }
};

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

// Every value is rounded to float precision so the corpus survives the f32
// file format bit for bit.
inline Corpus generate_corpus(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng vocab_rng(root.fork());
  Rng class_rng(root.fork());
  Rng utt_rng(root.fork());

  Matrix vocab(spec.vocab_size, spec.feature_dim);
  for (double& v : vocab.data()) v = vocab_rng.normal();
  Matrix directions(spec.utterance_classes, spec.feature_dim);
  for (double& v : directions.data()) v = class_rng.normal();

  Corpus corpus;
  corpus.reserve(spec.num_utterances);
  for (std::size_t u = 0; u < spec.num_utterances; ++u) {
    const std::size_t T = spec.min_frames + utt_rng.below(spec.max_frames - spec.min_frames + 1);
    Utterance utt;
    utt.features.frame_period_ms = spec.frame_period_ms;
    utt.features.frames = Matrix(T, spec.feature_dim);
    std::vector<std::uint8_t> bits(T, 0);
    utt.frame_labels.assign(T, 0);
    std::size_t t = 0;
    int prev = -1;
    while (t < T) {
      const std::size_t len = spec.min_segment + utt_rng.below(spec.max_segment - spec.min_segment + 1);
      int id = static_cast<int>(utt_rng.below(spec.vocab_size));
      if (spec.vocab_size > 1 && id == prev) id = static_cast<int>((id + 1) % spec.vocab_size);
      prev = id;
      const std::size_t end = std::min(T, t + len);
      for (; t < end; ++t) {
        utt.frame_labels[t] = id;
        for (std::size_t j = 0; j < spec.feature_dim; ++j)
          utt.features.frames(t, j) = detail::to_f32(vocab(id, j) + spec.noise * utt_rng.normal());
      }
      bits[end - 1] = 1;
    }
    utt.targets = GuidanceTargets::from_boundaries(std::move(bits));

    std::vector<double> mean(spec.feature_dim, 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < spec.feature_dim; ++j) mean[j] += utt.features.frames(i, j) / static_cast<double>(T);
    double best = -1e300;
    for (std::size_t c = 0; c < spec.utterance_classes; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < spec.feature_dim; ++j) s += mean[j] * directions(c, j);
      if (s > best) {
        best = s;
        utt.utterance_label = static_cast<int>(c);
      }
    }
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

// ---------------------------------------------------------------------------

struct FeatureFileContents {
  FeatureSequence features;
  std::optional<GuidanceTargets> targets;
};

inline std::string encode_features(const FeatureSequence& seq, const GuidanceTargets* targets = nullptr) {
  std::string out = "OFAF";
  const std::size_t T = seq.length();
  detail::put<std::uint32_t>(out, kFeatureFileVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(T));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.dim()));
  detail::put<float>(out, static_cast<float>(seq.frame_period_ms));
  for (double v : seq.frames.data()) detail::put<float>(out, static_cast<float>(v));
  if (targets) {
    if (targets->boundaries.size() != T)
      throw Error(ErrorCode::dimension_mismatch, "boundary block length must equal T");
    detail::put<std::uint32_t>(out, kBoundaryMarker);
    for (auto b : targets->boundaries) out.push_back(static_cast<char>(b));
  }
  return out;
}

inline FeatureFileContents decode_features(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || bytes.substr(0, 4) != "OFAF") throw Error(ErrorCode::bad_magic, "not a feature file (expected OFAF)");
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFeatureFileVersion)
    throw Error(ErrorCode::unsupported_version, "feature file version " + std::to_string(version));
  const auto T = r.get<std::uint32_t>("T");
  const auto D = r.get<std::uint32_t>("D");
  if (T == 0 || D == 0) throw Error(ErrorCode::invalid_argument, "feature file with empty shape");
  const float period = r.get<float>("frame period");
  if (static_cast<std::uint64_t>(T) * D * sizeof(float) > r.remaining())
    throw Error(ErrorCode::truncated, "payload shorter than " + std::to_string(T) + "x" + std::to_string(D));
  FeatureFileContents c;
  c.features.frame_period_ms = period;
  c.features.frames = Matrix(T, D);
  for (double& v : c.features.frames.data()) v = r.get<float>("payload");
  if (!r.done()) {
    const auto marker = r.get<std::uint32_t>("boundary marker");
    if (marker != kBoundaryMarker) throw Error(ErrorCode::bad_magic, "unknown trailing block");
    std::string_view raw = r.take(T, "boundary block");
    std::vector<std::uint8_t> bits(raw.begin(), raw.end());
    c.targets = GuidanceTargets::from_boundaries(std::move(bits));
    if (!r.done()) throw Error(ErrorCode::invalid_argument, "trailing bytes after boundary block");
  }
  return c;
}

inline void write_features(const std::string& path, const FeatureSequence& seq,
                           const GuidanceTargets* targets = nullptr) {
  detail::write_file(path, encode_features(seq, targets));
}

inline FeatureFileContents read_features(const std::string& path) { return decode_features(detail::read_file(path)); }

}  // namespace ofa
