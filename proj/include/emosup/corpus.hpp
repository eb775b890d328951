#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emosup/emotion.hpp"
#include "emosup/encoders.hpp"
#include "emosup/rng.hpp"
#include "json.hpp"

namespace emosup {

struct Sample {
  std::string id;
  std::string identity;
  Emotion emotion = Emotion::kNeutral;
  std::string image_ref;    // resolvable by the EncoderSuite
  std::string neutral_ref;  // id of a neutral sample of the same identity

  bool operator==(const Sample&) const = default;
};

enum class Split { kTrain, kVal };

std::string_view split_name(Split s);
std::optional<Split> parse_split(std::string_view s);

class CorpusManifest {
 public:
  CorpusManifest() = default;
  CorpusManifest(std::vector<Sample> samples, std::vector<Split> splits,
                 std::optional<SyntheticWorldConfig> world = std::nullopt);

  const std::vector<Sample>& samples() const { return samples_; }
  const std::vector<Split>& splits() const { return splits_; }
  const std::optional<SyntheticWorldConfig>& world() const { return world_; }
  std::size_t size() const { return samples_.size(); }

  std::vector<std::size_t> indices(Split s) const;
  const Sample* find(const std::string& id) const;
  // Throws LookupError naming the id.
  const Sample& at(const std::string& id) const;
  std::vector<std::size_t> neutral_indices(const std::string& identity) const;
  // In order of first appearance.
  std::vector<std::string> identities() const;

  // neutral_ref resolution, per-identity neutral coverage, unique ids.
  void validate() const;

  bool operator==(const CorpusManifest& o) const {
    return samples_ == o.samples_ && splits_ == o.splits_ && world_ == o.world_;
  }

 private:
  std::vector<Sample> samples_;
  std::vector<Split> splits_;
  std::optional<SyntheticWorldConfig> world_;
  std::map<std::string, std::size_t> by_id_;
};

nlohmann::json to_json(const CorpusManifest& m);
CorpusManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const CorpusManifest& m);
CorpusManifest load_manifest(const std::filesystem::path& path);

// n_identities x 7 x per_cell samples with a 90/10 split stratified by
// identity (lowest split-hashes of each identity go to val).
CorpusManifest generate_synthetic_corpus(const SyntheticWorldSpec& world,
                                         int per_identity_per_emotion);

inline constexpr double kValFraction = 0.1;

struct NegativePoolTable {
  std::array<std::vector<Emotion>, kNumEmotions> pools;  // sorted by code

  const std::vector<Emotion>& pool(Emotion e) const { return pools[code(e)]; }
  bool contains(Emotion anchor, Emotion negative) const;
  // No pool contains its own key; no pool is empty.
  void validate() const;
  bool operator==(const NegativePoolTable&) const = default;

  static NegativePoolTable all_others();
};

nlohmann::json to_json(const NegativePoolTable& t);
NegativePoolTable pools_from_json(const nlohmann::json& j);

struct ContrastiveEntry {
  Sample anchor;
  Emotion positive_prompt = Emotion::kNeutral;
  Emotion negative_prompt = Emotion::kNeutral;
  Sample reference;
};

struct ContrastiveBatch {
  std::vector<ContrastiveEntry> entries;

  // Throws ContractError on the first violated entry.
  void validate(const NegativePoolTable& pools) const;
};

// Anchors uniform over the train split, negatives uniform over the anchor's
// pool, reference uniform over the anchor identity's neutral samples. Draws
// only from `rng`, in that order per entry.
ContrastiveBatch sample_contrastive_batch(const CorpusManifest& manifest,
                                          const NegativePoolTable& pools,
                                          int batch_size, Rng& rng);

}  // namespace emosup
