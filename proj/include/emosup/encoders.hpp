#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "emosup/emotion.hpp"
#include "emosup/numerics.hpp"
#include "json.hpp"

namespace emosup {

struct TokenSequence {
  std::vector<Vector> tokens;

  std::size_t length() const { return tokens.size(); }
  int token_dim() const {
    return tokens.empty() ? 0 : static_cast<int>(tokens.front().size());
  }
  // length >= 1 and uniform token dim, else ContractError.
  void validate() const;
};

// The frozen side of the system: a vision-language encoder pair sharing an
// embedding space, its prompt tokenizer, and an identity backbone. All maps
// are deterministic and stateless after construction.
class EncoderSuite {
 public:
  virtual ~EncoderSuite() = default;

  virtual int embed_dim() const = 0;
  virtual int backbone_dim() const = 0;
  virtual int token_dim() const = 0;

  virtual Vector visual_encode(const std::string& image_ref) const = 0;
  virtual Vector backbone_identity(const std::string& image_ref) const = 0;
  virtual TokenSequence tokenize(std::string_view prompt) const = 0;
  virtual Vector text_encode(const TokenSequence& seq) const = 0;

  // d <upstream, text_encode(seq)> / d seq.tokens[position]. The encoder
  // stays frozen; this is how gradients reach a prepended learned token.
  virtual Vector text_token_gradient(const TokenSequence& seq, int position,
                                     const Vector& upstream) const = 0;
};

struct SyntheticWorldConfig {
  std::uint64_t seed = 1;
  int n_identities = 4;
  int d_latent = 16;
  int d_e = 64;
  int d_b = 32;
  int d_tok = 32;
  double noise_sigma = 0.05;
  double gap = 1.0;                // norm of the modality offset g
  double emotion_scale = 1.0;      // mean prototype norm
  double text_perturbation = 0.3;  // text map = visual map + this * noise

  void validate() const;
  bool operator==(const SyntheticWorldConfig&) const = default;
};

nlohmann::json to_json(const SyntheticWorldConfig& c);
SyntheticWorldConfig world_config_from_json(const nlohmann::json& j);

// Latent coordinates [0, identity_dims) carry identity, the rest carry
// emotion. Visual embedding of (identity z, emotion k):
//   A (z + e_k) + g + noise_sigma * n,  n ~ N(0, I) seeded by the image ref.
// Text embedding of the plain prompt for emotion k: B e_k + c_text, where
// c_text collects the template words.
struct SyntheticWorldSpec {
  SyntheticWorldConfig config;
  int identity_dims = 0;
  std::array<Vector, kNumEmotions> prototypes;  // e_k, zero on identity coords
  std::vector<Vector> identities;               // unit z, zero on emotion coords
  Matrix visual_map;       // A: d_e x d_latent, orthonormal columns
  Matrix text_map;         // B: d_e x d_latent, zero identity columns
  Matrix backbone_map;     // C: d_b x d_latent, zero emotion columns
  Vector modality_offset;  // g, orthogonal to range(A)
  Matrix token_map;        // P: d_tok x d_latent, emotion word token = P e_k
  Matrix text_projection;  // d_e x d_tok, frozen text encoder weights

  bool identical_to(const SyntheticWorldSpec& other) const;
};

// Throws GenerationError if a mixing map stays rank deficient after 10 draws.
SyntheticWorldSpec build_synthetic_world(const SyntheticWorldConfig& config);

// Positional weight of the synthetic text encoder, 1 / sqrt(1 + p).
double position_weight(int position);

struct SyntheticImageKey {
  int identity = 0;
  Emotion emotion = Emotion::kNeutral;
  int instance = 0;
};

std::string synthetic_image_ref(int identity, Emotion emotion, int instance);
std::optional<SyntheticImageKey> parse_synthetic_image_ref(std::string_view ref);

class SyntheticSuite final : public EncoderSuite {
 public:
  explicit SyntheticSuite(SyntheticWorldSpec world);

  int embed_dim() const override { return world_.config.d_e; }
  int backbone_dim() const override { return world_.config.d_b; }
  int token_dim() const override { return world_.config.d_tok; }

  Vector visual_encode(const std::string& image_ref) const override;
  Vector backbone_identity(const std::string& image_ref) const override;
  TokenSequence tokenize(std::string_view prompt) const override;
  Vector text_encode(const TokenSequence& seq) const override;
  Vector text_token_gradient(const TokenSequence& seq, int position,
                             const Vector& upstream) const override;

  const SyntheticWorldSpec& world() const { return world_; }

  // A (z + e_k) + g without noise.
  Vector clean_visual(int identity, Emotion emotion) const;
  Vector word_token(std::string_view word) const;

 private:
  SyntheticImageKey resolve(const std::string& image_ref) const;

  SyntheticWorldSpec world_;
};

// Serves externally computed features. Image refs are sample ids. Emotion
// words tokenize to the stored prompt embedding of that emotion, other words
// to zero, and text_encode sums the tokens, so a prepended token acts as an
// additive offset on the stored text embedding. The identity backbone returns
// the stored visual feature of the reference image.
class PrecomputedSuite final : public EncoderSuite {
 public:
  PrecomputedSuite(int dim, std::map<std::string, Vector> visual,
                   std::map<Emotion, Vector> text);

  int embed_dim() const override { return dim_; }
  int backbone_dim() const override { return dim_; }
  int token_dim() const override { return dim_; }

  Vector visual_encode(const std::string& image_ref) const override;
  Vector backbone_identity(const std::string& image_ref) const override;
  TokenSequence tokenize(std::string_view prompt) const override;
  Vector text_encode(const TokenSequence& seq) const override;
  Vector text_token_gradient(const TokenSequence& seq, int position,
                             const Vector& upstream) const override;

  std::size_t size() const { return visual_.size(); }

 private:
  int dim_;
  std::map<std::string, Vector> visual_;
  std::map<Emotion, Vector> text_;
};

// Reads a feature manifest (see feature_io.hpp). Throws LoadError on dim
// inconsistencies.
std::unique_ptr<PrecomputedSuite> load_precomputed_features(
    const std::filesystem::path& manifest_path);

}  // namespace emosup
