#pragma once

// A corpus on disk: one feature file per utterance plus manifest.json holding
// the file list, lengths and the downstream labels.

#include <cstdio>
#include <filesystem>
#include <string>

#include "ofa/config.hpp"
#include "ofa/data_io.hpp"
#include "ofa/error.hpp"

namespace ofa {

inline constexpr const char* kManifestName = "manifest.json";

inline std::string utterance_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "utt_%05zu.ofaf", i);
  return buf;
}

inline Json manifest_for(const Corpus& corpus, const Json& spec) {
  Json list = Json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Utterance& u = corpus[i];
    list.push_back({{"file", utterance_file_name(i)},
                    {"frames", u.features.length()},
                    {"segments", u.targets.num_segments},
                    {"utterance_label", u.utterance_label},
                    {"frame_labels", u.frame_labels}});
  }
  return {{"format_version", kFeatureFileVersion}, {"spec", spec}, {"utterances", list}};
}

inline void write_dataset(const std::string& dir, const Corpus& corpus, const Json& spec = Json::object()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create '" + dir + "': " + ec.message());
  const std::filesystem::path root(dir);
  for (std::size_t i = 0; i < corpus.size(); ++i)
    write_features((root / utterance_file_name(i)).string(), corpus[i].features, &corpus[i].targets);
  detail::write_file((root / kManifestName).string(), manifest_for(corpus, spec).dump(2) + "\n");
}

// Labels are optional; utterances without them get label 0 / all-zero frames.
inline Corpus read_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  Json manifest;
  try {
    manifest = Json::parse(detail::read_file((root / kManifestName).string()));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::io, "invalid manifest in '" + dir + "': " + e.what());
  }
  Corpus corpus;
  try {
    for (const Json& entry : manifest.at("utterances")) {
      const auto file = entry.at("file").get<std::string>();
      FeatureFileContents c = read_features((root / file).string());
      const std::size_t T = c.features.length();
      if (entry.contains("frames") && entry.at("frames").get<std::size_t>() != T)
        throw Error(ErrorCode::dimension_mismatch, file + ": manifest length disagrees with the file header");
      if (!c.targets) throw Error(ErrorCode::io, file + ": no boundary targets");
      Utterance u{std::move(c.features), std::move(*c.targets), std::vector<int>(T, 0), 0};
      if (entry.contains("utterance_label")) u.utterance_label = entry.at("utterance_label").get<int>();
      if (entry.contains("frame_labels")) {
        u.frame_labels = entry.at("frame_labels").get<std::vector<int>>();
        if (u.frame_labels.size() != T) throw Error(ErrorCode::dimension_mismatch, file + ": frame_labels length");
      }
      corpus.push_back(std::move(u));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::io, "malformed manifest in '" + dir + "': " + e.what());
  }
  if (corpus.empty()) throw Error(ErrorCode::io, "'" + dir + "' lists no utterances");
  return corpus;
}

}  // namespace ofa
