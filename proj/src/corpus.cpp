#include "emosup/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"

namespace emosup {
using nlohmann::json;

std::string_view split_name(Split s) {
  return s == Split::kTrain ? "train" : "val";
}

std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  return std::nullopt;
}

CorpusManifest::CorpusManifest(std::vector<Sample> samples,
                               std::vector<Split> splits,
                               std::optional<SyntheticWorldConfig> world)
    : samples_(std::move(samples)),
      splits_(std::move(splits)),
      world_(std::move(world)) {
  require(samples_.size() == splits_.size(),
          "CorpusManifest: one split tag per sample required");
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (!by_id_.emplace(samples_[i].id, i).second) {
      throw ContractError("CorpusManifest: duplicate sample id '" +
                          samples_[i].id + "'");
    }
  }
}

std::vector<std::size_t> CorpusManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (splits_[i] == s) out.push_back(i);
  }
  return out;
}

const Sample* CorpusManifest::find(const std::string& id) const {
  const auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &samples_[it->second];
}

const Sample& CorpusManifest::at(const std::string& id) const {
  const Sample* s = find(id);
  if (s == nullptr) throw LookupError("unknown sample id '" + id + "'");
  return *s;
}

std::vector<std::size_t> CorpusManifest::neutral_indices(
    const std::string& identity) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i].identity == identity &&
        samples_[i].emotion == Emotion::kNeutral) {
      out.push_back(i);
    }
  }
  return out;
}

std::vector<std::string> CorpusManifest::identities() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : samples_) {
    if (seen.insert(s.identity).second) out.push_back(s.identity);
  }
  return out;
}

void CorpusManifest::validate() const {
  for (const auto& identity : identities()) {
    if (neutral_indices(identity).empty()) {
      throw ContractError("CorpusManifest: identity '" + identity +
                          "' has no neutral sample");
    }
  }
  for (const auto& s : samples_) {
    const Sample* ref = find(s.neutral_ref);
    if (ref == nullptr) {
      throw ContractError("CorpusManifest: neutral_ref '" + s.neutral_ref +
                          "' of sample '" + s.id + "' does not resolve");
    }
    if (ref->emotion != Emotion::kNeutral || ref->identity != s.identity) {
      throw ContractError("CorpusManifest: neutral_ref of '" + s.id +
                          "' is not a neutral sample of identity '" +
                          s.identity + "'");
    }
  }
}

json to_json(const CorpusManifest& m) {
  json j;
  j["format_version"] = 1;
  j["world"] = m.world() ? to_json(*m.world()) : json(nullptr);
  j["samples"] = json::array();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Sample& s = m.samples()[i];
    j["samples"].push_back({{"id", s.id},
                            {"identity", s.identity},
                            {"emotion", std::string(emotion_name(s.emotion))},
                            {"image_ref", s.image_ref},
                            {"neutral_ref", s.neutral_ref},
                            {"split", std::string(split_name(m.splits()[i]))}});
  }
  return j;
}

CorpusManifest manifest_from_json(const json& j) {
  std::vector<Sample> samples;
  std::vector<Split> splits;
  std::optional<SyntheticWorldConfig> world;
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw LoadError("corpus manifest: unsupported format_version");
    }
    if (j.contains("world") && !j.at("world").is_null()) {
      world = world_config_from_json(j.at("world"));
    }
    for (const auto& s : j.at("samples")) {
      Sample sample;
      sample.id = s.at("id").get<std::string>();
      sample.identity = s.at("identity").get<std::string>();
      const auto e = parse_emotion(s.at("emotion").get<std::string>());
      if (!e) throw LoadError("corpus manifest: unknown emotion for " + sample.id);
      sample.emotion = *e;
      sample.image_ref = s.at("image_ref").get<std::string>();
      sample.neutral_ref = s.at("neutral_ref").get<std::string>();
      const auto sp = parse_split(s.at("split").get<std::string>());
      if (!sp) throw LoadError("corpus manifest: unknown split for " + sample.id);
      samples.push_back(std::move(sample));
      splits.push_back(*sp);
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("corpus manifest: ") + e.what());
  }
  return CorpusManifest(std::move(samples), std::move(splits), world);
}

void save_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
  write_text_file(path, to_json(m).dump(2) + "\n");
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  CorpusManifest m = manifest_from_json(j);
  m.validate();
  return m;
}

CorpusManifest generate_synthetic_corpus(const SyntheticWorldSpec& world,
                                         int per_cell) {
  require(per_cell >= 1, "generate_synthetic_corpus: per_identity_per_emotion >= 1");
  const auto& cfg = world.config;
  std::vector<Sample> samples;
  std::vector<Split> splits;
  for (int i = 0; i < cfg.n_identities; ++i) {
    const std::string identity = "id" + std::to_string(i);
    const std::string neutral_ref = identity + "_neutral_0";
    const std::size_t first = samples.size();
    for (Emotion e : kAllEmotions) {
      for (int j = 0; j < per_cell; ++j) {
        Sample s;
        s.id = identity + "_" + std::string(emotion_name(e)) + "_" +
               std::to_string(j);
        s.identity = identity;
        s.emotion = e;
        s.image_ref = synthetic_image_ref(i, e, j);
        s.neutral_ref = neutral_ref;
        samples.push_back(std::move(s));
        splits.push_back(Split::kTrain);
      }
    }
    // Within the identity, the samples with the lowest split hash go to val.
    const std::size_t n = samples.size() - first;
    const auto n_val = static_cast<std::size_t>(
        std::lround(kValFraction * static_cast<double>(n)));
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    for (std::size_t k = first; k < samples.size(); ++k) {
      keyed.emplace_back(mix_seed(cfg.seed, "split:" + samples[k].id), k);
    }
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t k = 0; k < n_val && k < keyed.size(); ++k) {
      splits[keyed[k].second] = Split::kVal;
    }
  }
  CorpusManifest m(std::move(samples), std::move(splits), cfg);
  m.validate();
  return m;
}

bool NegativePoolTable::contains(Emotion anchor, Emotion negative) const {
  const auto& p = pool(anchor);
  return std::find(p.begin(), p.end(), negative) != p.end();
}

void NegativePoolTable::validate() const {
  for (Emotion e : kAllEmotions) {
    const auto& p = pool(e);
    if (p.empty()) {
      throw ContractError("negative pool for '" + std::string(emotion_name(e)) +
                          "' is empty");
    }
    if (std::find(p.begin(), p.end(), e) != p.end()) {
      throw ContractError("negative pool for '" + std::string(emotion_name(e)) +
                          "' contains its own emotion");
    }
    if (!std::is_sorted(p.begin(), p.end()) ||
        std::adjacent_find(p.begin(), p.end()) != p.end()) {
      throw ContractError("negative pool for '" + std::string(emotion_name(e)) +
                          "' must be sorted and duplicate free");
    }
  }
}

NegativePoolTable NegativePoolTable::all_others() {
  NegativePoolTable t;
  for (Emotion a : kAllEmotions) {
    for (Emotion b : kAllEmotions) {
      if (a != b) t.pools[code(a)].push_back(b);
    }
  }
  return t;
}

json to_json(const NegativePoolTable& t) {
  json j = json::object();
  for (Emotion e : kAllEmotions) {
    json arr = json::array();
    for (Emotion n : t.pool(e)) arr.push_back(std::string(emotion_name(n)));
    j[std::string(emotion_name(e))] = arr;
  }
  return j;
}

NegativePoolTable pools_from_json(const json& j) {
  NegativePoolTable t;
  try {
    for (Emotion e : kAllEmotions) {
      for (const auto& name : j.at(std::string(emotion_name(e)))) {
        const auto n = parse_emotion(name.get<std::string>());
        if (!n) throw LoadError("negative pools: unknown emotion in pool");
        t.pools[code(e)].push_back(*n);
      }
      std::sort(t.pools[code(e)].begin(), t.pools[code(e)].end());
    }
  } catch (const json::exception& ex) {
    throw LoadError(std::string("negative pools: ") + ex.what());
  }
  t.validate();
  return t;
}

void ContrastiveBatch::validate(const NegativePoolTable& pools) const {
  for (const auto& e : entries) {
    require(e.positive_prompt == e.anchor.emotion,
            "ContrastiveBatch: positive prompt differs from anchor emotion");
    require(pools.contains(e.anchor.emotion, e.negative_prompt),
            "ContrastiveBatch: negative prompt outside the anchor's pool");
    require(e.reference.emotion == Emotion::kNeutral &&
                e.reference.identity == e.anchor.identity,
            "ContrastiveBatch: reference is not a neutral sample of the "
            "anchor identity");
  }
}

ContrastiveBatch sample_contrastive_batch(const CorpusManifest& manifest,
                                          const NegativePoolTable& pools,
                                          int batch_size, Rng& rng) {
  require(batch_size >= 1, "sample_contrastive_batch: batch_size >= 1");
  pools.validate();
  const auto train = manifest.indices(Split::kTrain);
  require(!train.empty(), "sample_contrastive_batch: empty train split");

  std::map<std::string, std::vector<std::size_t>> neutrals;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples()[i];
    if (s.emotion == Emotion::kNeutral) neutrals[s.identity].push_back(i);
  }

  ContrastiveBatch batch;
  batch.entries.reserve(batch_size);
  for (int b = 0; b < batch_size; ++b) {
    const Sample& anchor = manifest.samples()[train[rng.index(train.size())]];
    const auto& pool = pools.pool(anchor.emotion);
    const Emotion negative = pool[rng.index(pool.size())];
    const auto it = neutrals.find(anchor.identity);
    if (it == neutrals.end()) {
      throw SamplingError("identity '" + anchor.identity +
                          "' has no neutral sample to use as reference");
    }
    const Sample& ref = manifest.samples()[it->second[rng.index(it->second.size())]];
    batch.entries.push_back({anchor, anchor.emotion, negative, ref});
  }
  return batch;
}

}  // namespace emosup
