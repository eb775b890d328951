#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emosup/numerics.hpp"

namespace emosup {

// PCMF feature file: 4-byte magic "PCMF", little-endian uint32 dim, then a
// flat little-endian float32 payload. The payload length must be a multiple
// of dim; a file holds one or more vectors.
void write_feature_file(const std::filesystem::path& path,
                        std::span<const Vector> vectors);
std::vector<Vector> read_feature_file(const std::filesystem::path& path);

struct FeatureRecord {
  std::string id;
  std::string identity;
  std::string emotion;
  std::string feature_file;  // relative to the manifest directory
};

// {"dim": int, "samples": [...], "text_embeddings": {emotion: path}}
struct FeatureManifest {
  int dim = 0;
  std::vector<FeatureRecord> samples;
  std::map<std::string, std::string> text_embeddings;
};

FeatureManifest read_feature_manifest(const std::filesystem::path& path);
void write_feature_manifest(const std::filesystem::path& path,
                            const FeatureManifest& manifest);

// Loads every vector referenced by a feature manifest (or every vector in a
// bare PCMF file), in manifest order.
std::vector<Vector> load_feature_set(const std::filesystem::path& path);

// Writes `text` to `path`, creating parent directories. Throws LoadError on
// failure so callers can map it to a validation exit code.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace emosup
