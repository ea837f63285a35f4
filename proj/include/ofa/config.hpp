#pragma once

// JSON configuration. Keys mirror the struct fields in snake_case; unknown
// keys are rejected so typos surface as config errors.

#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "ofa/alphamod.hpp"
#include "ofa/data_io.hpp"
#include "ofa/error.hpp"
#include "ofa/profile.hpp"
#include "ofa/training.hpp"

namespace ofa {

using Json = nlohmann::json;

namespace detail {

inline void reject_unknown(const Json& j, std::initializer_list<std::string_view> known, const char* section) {
  if (!j.is_object()) throw Error(ErrorCode::config, std::string(section) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw Error(ErrorCode::config, "unknown key '" + key + "' in " + section);
  }
}

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("bad value for '") + key + "': " + e.what());
  }
}

// Accepts either the section itself or a document holding it under `name`.
inline const Json& section(const Json& doc, const char* name) {
  if (doc.is_object() && doc.contains(name)) return doc.at(name);
  return doc;
}

}  // namespace detail

inline SyntheticSpec synthetic_spec_from_json(const Json& doc) {
  const Json& j = detail::section(doc, "synthetic");
  detail::reject_unknown(j,
                         {"num_utterances", "min_frames", "max_frames", "feature_dim", "min_segment", "max_segment",
                          "vocab_size", "utterance_classes", "noise", "frame_period_ms", "seed"},
                         "synthetic spec");
  SyntheticSpec s;
  detail::read(j, "num_utterances", s.num_utterances);
  detail::read(j, "min_frames", s.min_frames);
  detail::read(j, "max_frames", s.max_frames);
  detail::read(j, "feature_dim", s.feature_dim);
  detail::read(j, "min_segment", s.min_segment);
  detail::read(j, "max_segment", s.max_segment);
  detail::read(j, "vocab_size", s.vocab_size);
  detail::read(j, "utterance_classes", s.utterance_classes);
  detail::read(j, "noise", s.noise);
  detail::read(j, "frame_period_ms", s.frame_period_ms);
  detail::read(j, "seed", s.seed);
  s.validate();
  return s;
}

inline Json to_json(const SyntheticSpec& s) {
  return {{"num_utterances", s.num_utterances}, {"min_frames", s.min_frames},   {"max_frames", s.max_frames},
          {"feature_dim", s.feature_dim},       {"min_segment", s.min_segment}, {"max_segment", s.max_segment},
          {"vocab_size", s.vocab_size},         {"utterance_classes", s.utterance_classes},
          {"noise", s.noise},                   {"frame_period_ms", s.frame_period_ms},
          {"seed", s.seed}};
}

inline GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "boundary_bce") return GuidanceMode::boundary_bce;
  if (s == "quantity") return GuidanceMode::quantity;
  if (s == "both") return GuidanceMode::both;
  throw Error(ErrorCode::config, "guidance_mode must be boundary_bce, quantity or both");
}

inline TrainConfig train_config_from_json(const Json& doc) {
  const Json& j = detail::section(doc, "train");
  detail::reject_unknown(j,
                         {"range", "learning_rate", "steps", "batch_size", "weights", "guidance_mode", "cif", "dims",
                          "seed"},
                         "train config");
  TrainConfig c;
  if (j.contains("range")) {
    std::string r;
    detail::read(j, "range", r);
    c.range = SampleRange::parse(r);
  }
  detail::read(j, "learning_rate", c.learning_rate);
  detail::read(j, "steps", c.steps);
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "seed", c.seed);
  if (j.contains("guidance_mode")) {
    std::string m;
    detail::read(j, "guidance_mode", m);
    c.guidance_mode = parse_guidance_mode(m);
  }
  if (j.contains("weights")) {
    const Json& w = j.at("weights");
    detail::reject_unknown(w, {"distill", "guidance", "quantity", "cosine"}, "weights");
    detail::read(w, "distill", c.weights.distill);
    detail::read(w, "guidance", c.weights.guidance);
    detail::read(w, "quantity", c.weights.quantity);
    detail::read(w, "cosine", c.weights.cosine);
  }
  if (j.contains("cif")) {
    const Json& w = j.at("cif");
    detail::reject_unknown(w, {"threshold", "tail_threshold", "eps"}, "cif");
    detail::read(w, "threshold", c.cif.threshold);
    detail::read(w, "tail_threshold", c.cif.tail_threshold);
    detail::read(w, "eps", c.cif.eps);
  }
  if (j.contains("dims")) {
    const Json& w = j.at("dims");
    detail::reject_unknown(w, {"input_dim", "hidden", "ffn", "blocks", "teacher_dim", "teacher_layers"}, "dims");
    detail::read(w, "input_dim", c.dims.input_dim);
    detail::read(w, "hidden", c.dims.hidden);
    detail::read(w, "ffn", c.dims.ffn);
    detail::read(w, "blocks", c.dims.blocks);
    detail::read(w, "teacher_dim", c.dims.teacher_dim);
    detail::read(w, "teacher_layers", c.dims.teacher_layers);
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::config, e.what());
  }
  return c;
}

inline MacsConfig macs_config_from_json(const Json& doc) {
  const Json& j = detail::section(doc, "macs");
  detail::reject_unknown(j, {"hidden", "ffn", "layers", "alpha_macs_per_frame", "base_period_ms", "utterance_ms"},
                         "macs config");
  MacsConfig c;
  detail::read(j, "hidden", c.hidden);
  detail::read(j, "ffn", c.ffn);
  detail::read(j, "layers", c.layers);
  detail::read(j, "alpha_macs_per_frame", c.alpha_macs_per_frame);
  detail::read(j, "base_period_ms", c.base_period_ms);
  detail::read(j, "utterance_ms", c.utterance_ms);
  c.validate();
  return c;
}

inline AdaptConfig adapt_config_from_json(const Json& doc) {
  const Json& j = detail::section(doc, "adapt");
  detail::reject_unknown(j,
                         {"theta_learning_rate", "momentum", "head_learning_rate", "rate_weight", "steps",
                          "warmup_steps", "batch_size", "lambda_max", "seed", "theta_gradient", "smoothing",
                          "smoothing_final"},
                         "adapt config");
  AdaptConfig c;
  detail::read(j, "theta_learning_rate", c.theta_learning_rate);
  detail::read(j, "momentum", c.momentum);
  detail::read(j, "head_learning_rate", c.head_learning_rate);
  detail::read(j, "rate_weight", c.rate_weight);
  detail::read(j, "steps", c.steps);
  detail::read(j, "warmup_steps", c.warmup_steps);
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "lambda_max", c.lambda_max);
  detail::read(j, "seed", c.seed);
  detail::read(j, "smoothing", c.smoothing);
  detail::read(j, "smoothing_final", c.smoothing_final);
  if (j.contains("theta_gradient")) {
    const Json& g = j.at("theta_gradient");
    if (g == "analytic")
      c.theta_gradient = ThetaGradient::analytic;
    else if (g == "smoothed")
      c.theta_gradient = ThetaGradient::smoothed;
    else
      throw Error(ErrorCode::config, "adapt config: theta_gradient must be \"analytic\" or \"smoothed\"");
  }
  return c;
}

inline Json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, "cannot open config '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, "invalid JSON in '" + path + "': " + e.what());
  }
}

}  // namespace ofa
