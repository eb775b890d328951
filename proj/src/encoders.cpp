#include "emosup/encoders.hpp"

#include <cmath>
#include <sstream>

#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"

namespace emosup {
namespace {

constexpr int kMaxRedraws = 10;

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

Matrix gaussian(int rows, int cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  }
  return m;
}

bool full_column_rank(const Matrix& m) {
  if (m.rows() < m.cols()) return false;
  Eigen::ColPivHouseholderQR<Matrix> qr(m);
  return qr.rank() == m.cols();
}

// Gaussian draw with full column rank, redrawn up to kMaxRedraws times.
Matrix draw_full_rank(int rows, int cols, Rng& rng, double scale,
                      const char* name) {
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Matrix m = gaussian(rows, cols, rng, scale);
    if (full_column_rank(m)) return m;
  }
  throw GenerationError(std::string("synthetic world: mixing map ") + name +
                        " (" + std::to_string(rows) + "x" +
                        std::to_string(cols) +
                        ") rank deficient after 10 redraws");
}

Matrix orthonormal_columns(const Matrix& m) {
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
  // Fix column signs so the result does not depend on Householder details.
  const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (r(c, c) < 0) q.col(c) *= -1.0;
  }
  return q;
}

Vector random_unit(int dim, Rng& rng) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  return v / v.norm();
}

}  // namespace

void TokenSequence::validate() const {
  require(!tokens.empty(), "TokenSequence: length must be >= 1");
  const auto d = tokens.front().size();
  require(d > 0, "TokenSequence: zero token dimension");
  for (const auto& t : tokens) {
    require(t.size() == d, "TokenSequence: non-uniform token dimensions");
  }
}

void SyntheticWorldConfig::validate() const {
  require(n_identities >= 2, "synthetic world: n_identities must be >= 2");
  require(d_latent >= 4, "synthetic world: d_latent must be >= 4");
  require(d_e > 0 && d_b > 0 && d_tok > 0,
          "synthetic world: dimensions must be positive");
  require(noise_sigma >= 0.0 && std::isfinite(noise_sigma),
          "synthetic world: noise_sigma must be finite and >= 0");
  require(gap >= 0.0 && std::isfinite(gap),
          "synthetic world: gap must be finite and >= 0");
  require(emotion_scale > 0.0, "synthetic world: emotion_scale must be > 0");
  require(text_perturbation >= 0.0,
          "synthetic world: text_perturbation must be >= 0");
}

nlohmann::json to_json(const SyntheticWorldConfig& c) {
  return {{"seed", c.seed},
          {"n_identities", c.n_identities},
          {"d_latent", c.d_latent},
          {"d_e", c.d_e},
          {"d_b", c.d_b},
          {"d_tok", c.d_tok},
          {"noise_sigma", c.noise_sigma},
          {"gap", c.gap},
          {"emotion_scale", c.emotion_scale},
          {"text_perturbation", c.text_perturbation}};
}

SyntheticWorldConfig world_config_from_json(const nlohmann::json& j) {
  SyntheticWorldConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_identities = j.at("n_identities").get<int>();
    c.d_latent = j.at("d_latent").get<int>();
    c.d_e = j.at("d_e").get<int>();
    c.d_b = j.at("d_b").get<int>();
    c.d_tok = j.at("d_tok").get<int>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    c.gap = j.at("gap").get<double>();
    c.emotion_scale = j.value("emotion_scale", c.emotion_scale);
    c.text_perturbation = j.value("text_perturbation", c.text_perturbation);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed world config: ") + e.what());
  }
  return c;
}

bool SyntheticWorldSpec::identical_to(const SyntheticWorldSpec& o) const {
  if (!(config == o.config) || identity_dims != o.identity_dims) return false;
  for (int k = 0; k < kNumEmotions; ++k) {
    if (prototypes[k] != o.prototypes[k]) return false;
  }
  if (identities.size() != o.identities.size()) return false;
  for (std::size_t i = 0; i < identities.size(); ++i) {
    if (identities[i] != o.identities[i]) return false;
  }
  return visual_map == o.visual_map && text_map == o.text_map &&
         backbone_map == o.backbone_map &&
         modality_offset == o.modality_offset && token_map == o.token_map &&
         text_projection == o.text_projection;
}

double position_weight(int position) {
  return 1.0 / std::sqrt(1.0 + static_cast<double>(position));
}

SyntheticWorldSpec build_synthetic_world(const SyntheticWorldConfig& config) {
  config.validate();
  SyntheticWorldSpec w;
  w.config = config;
  Rng rng(mix_seed(config.seed, "synthetic-world"));

  const int d_lat = config.d_latent;
  const int d_id = d_lat / 2;
  const int d_emo = d_lat - d_id;
  w.identity_dims = d_id;

  // Prototypes: centred across the seven emotions, rescaled to the requested
  // mean norm.
  std::array<Vector, kNumEmotions> raw;
  Vector centre = Vector::Zero(d_emo);
  for (auto& e : raw) {
    e.resize(d_emo);
    for (int i = 0; i < d_emo; ++i) e(i) = rng.normal();
    centre += e;
  }
  centre /= kNumEmotions;
  double mean_norm = 0.0;
  for (auto& e : raw) {
    e -= centre;
    mean_norm += e.norm() / kNumEmotions;
  }
  for (int k = 0; k < kNumEmotions; ++k) {
    w.prototypes[k] = Vector::Zero(d_lat);
    w.prototypes[k].tail(d_emo) = raw[k] * (config.emotion_scale / mean_norm);
  }
  for (int a = 0; a < kNumEmotions; ++a) {
    for (int b = a + 1; b < kNumEmotions; ++b) {
      if ((w.prototypes[a] - w.prototypes[b]).norm() < 1e-9) {
        throw GenerationError("synthetic world: duplicate emotion prototypes");
      }
    }
  }

  w.identities.reserve(config.n_identities);
  for (int i = 0; i < config.n_identities; ++i) {
    Vector z = Vector::Zero(d_lat);
    z.head(d_id) = random_unit(d_id, rng);
    w.identities.push_back(std::move(z));
  }

  // A: orthonormal columns, so |A z| = |z| = 1 for every identity.
  w.visual_map =
      orthonormal_columns(draw_full_rank(config.d_e, d_lat, rng, 1.0, "A"));

  // B: the visual map on emotion coordinates plus a text-specific
  // perturbation, so text and image emotion directions agree only partly.
  const Matrix perturb =
      draw_full_rank(config.d_e, d_emo, rng,
                     config.text_perturbation / std::sqrt(config.d_e), "B");
  w.text_map = Matrix::Zero(config.d_e, d_lat);
  w.text_map.rightCols(d_emo) = w.visual_map.rightCols(d_emo) + perturb;
  if (!full_column_rank(w.text_map.rightCols(d_emo))) {
    throw GenerationError("synthetic world: text map B is rank deficient");
  }

  w.backbone_map = Matrix::Zero(config.d_b, d_lat);
  w.backbone_map.leftCols(d_id) =
      draw_full_rank(config.d_b, d_id, rng, 1.0 / std::sqrt(d_id), "C");

  w.modality_offset = Vector::Zero(config.d_e);
  if (config.gap > 0.0) {
    if (config.d_e <= d_lat) {
      throw GenerationError(
          "synthetic world: d_e must exceed d_latent to place an offset "
          "orthogonal to the visual map");
    }
    Vector g(config.d_e);
    for (int i = 0; i < config.d_e; ++i) g(i) = rng.normal();
    g -= w.visual_map * (w.visual_map.transpose() * g);
    w.modality_offset = config.gap * g / g.norm();
  }

  // Token space: the emotion word token is P e_k with P orthonormal on the
  // emotion coordinates. The text projection maps P e_k back onto B e_k at
  // the plain-prompt emotion position and acts randomly on the complement.
  const Matrix p_emo =
      orthonormal_columns(draw_full_rank(config.d_tok, d_emo, rng, 1.0, "P"));
  w.token_map = Matrix::Zero(config.d_tok, d_lat);
  w.token_map.rightCols(d_emo) = p_emo;
  const Matrix residual = draw_full_rank(config.d_e, config.d_tok, rng,
                                         1.0 / std::sqrt(config.d_tok), "R");
  const Matrix complement =
      Matrix::Identity(config.d_tok, config.d_tok) - p_emo * p_emo.transpose();
  w.text_projection =
      (1.0 / position_weight(kPromptEmotionPosition)) * w.text_map *
          w.token_map.transpose() +
      residual * complement;
  return w;
}

std::string synthetic_image_ref(int identity, Emotion emotion, int instance) {
  return "syn/" + std::to_string(identity) + "/" +
         std::string(emotion_name(emotion)) + "/" + std::to_string(instance);
}

std::optional<SyntheticImageKey> parse_synthetic_image_ref(std::string_view ref) {
  if (!ref.starts_with("syn/")) return std::nullopt;
  std::string rest(ref.substr(4));
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto slash = rest.find('/', start);
    parts.push_back(rest.substr(start, slash - start));
    if (slash == std::string::npos) break;
    start = slash + 1;
  }
  if (parts.size() != 3) return std::nullopt;
  SyntheticImageKey key;
  try {
    std::size_t used = 0;
    key.identity = std::stoi(parts[0], &used);
    if (used != parts[0].size() || key.identity < 0) return std::nullopt;
    key.instance = std::stoi(parts[2], &used);
    if (used != parts[2].size() || key.instance < 0) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  const auto e = parse_emotion(parts[1]);
  if (!e) return std::nullopt;
  key.emotion = *e;
  return key;
}

SyntheticSuite::SyntheticSuite(SyntheticWorldSpec world)
    : world_(std::move(world)) {
  require(world_.visual_map.rows() == world_.text_projection.rows(),
          "SyntheticSuite: visual and text paths must share d_e");
}

SyntheticImageKey SyntheticSuite::resolve(const std::string& image_ref) const {
  const auto key = parse_synthetic_image_ref(image_ref);
  if (!key || key->identity >= world_.config.n_identities) {
    throw LookupError("unknown synthetic image ref '" + image_ref + "'");
  }
  return *key;
}

Vector SyntheticSuite::clean_visual(int identity, Emotion emotion) const {
  require(identity >= 0 && identity < world_.config.n_identities,
          "clean_visual: identity out of range");
  return world_.visual_map *
             (world_.identities[identity] + world_.prototypes[code(emotion)]) +
         world_.modality_offset;
}

Vector SyntheticSuite::visual_encode(const std::string& image_ref) const {
  const SyntheticImageKey key = resolve(image_ref);
  Vector x = clean_visual(key.identity, key.emotion);
  if (world_.config.noise_sigma > 0.0) {
    Rng rng(mix_seed(world_.config.seed, "noise:" + image_ref));
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x(i) += world_.config.noise_sigma * rng.normal();
    }
  }
  return x;
}

Vector SyntheticSuite::backbone_identity(const std::string& image_ref) const {
  const SyntheticImageKey key = resolve(image_ref);
  return world_.backbone_map * world_.identities[key.identity];
}

Vector SyntheticSuite::word_token(std::string_view word) const {
  if (const auto e = parse_emotion(word)) {
    return world_.token_map * world_.prototypes[code(*e)];
  }
  Rng rng(mix_seed(world_.config.seed, "word:" + std::string(word)));
  Vector t(world_.config.d_tok);
  const double scale = 1.0 / std::sqrt(world_.config.d_tok);
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = scale * rng.normal();
  return t;
}

TokenSequence SyntheticSuite::tokenize(std::string_view prompt) const {
  const auto words = split_words(prompt);
  require(!words.empty(), "tokenize: empty prompt");
  TokenSequence seq;
  seq.tokens.reserve(words.size());
  for (const auto& w : words) seq.tokens.push_back(word_token(w));
  return seq;
}

Vector SyntheticSuite::text_encode(const TokenSequence& seq) const {
  seq.validate();
  require(seq.token_dim() == world_.config.d_tok,
          "text_encode: token dim mismatch");
  Vector pooled = Vector::Zero(world_.config.d_tok);
  for (std::size_t p = 0; p < seq.length(); ++p) {
    pooled += position_weight(static_cast<int>(p)) * seq.tokens[p];
  }
  return world_.text_projection * pooled;
}

Vector SyntheticSuite::text_token_gradient(const TokenSequence& seq,
                                           int position,
                                           const Vector& upstream) const {
  require(position >= 0 && static_cast<std::size_t>(position) < seq.length(),
          "text_token_gradient: position out of range");
  require(upstream.size() == world_.config.d_e,
          "text_token_gradient: upstream dim mismatch");
  return position_weight(position) *
         (world_.text_projection.transpose() * upstream);
}

PrecomputedSuite::PrecomputedSuite(int dim, std::map<std::string, Vector> visual,
                                   std::map<Emotion, Vector> text)
    : dim_(dim), visual_(std::move(visual)), text_(std::move(text)) {
  require(dim_ > 0, "PrecomputedSuite: dim must be positive");
  for (const auto& [id, v] : visual_) {
    if (v.size() != dim_) throw LoadError("feature for '" + id + "' has wrong dim");
  }
  for (const auto& [e, v] : text_) {
    if (v.size() != dim_) {
      throw LoadError("text embedding for '" + std::string(emotion_name(e)) +
                      "' has wrong dim");
    }
  }
}

Vector PrecomputedSuite::visual_encode(const std::string& image_ref) const {
  const auto it = visual_.find(image_ref);
  if (it == visual_.end()) {
    throw LookupError("no stored feature for sample id '" + image_ref + "'");
  }
  return it->second;
}

Vector PrecomputedSuite::backbone_identity(const std::string& image_ref) const {
  return visual_encode(image_ref);
}

TokenSequence PrecomputedSuite::tokenize(std::string_view prompt) const {
  const auto words = split_words(prompt);
  require(!words.empty(), "tokenize: empty prompt");
  TokenSequence seq;
  bool found = false;
  for (const auto& w : words) {
    const auto e = parse_emotion(w);
    if (e) {
      const auto it = text_.find(*e);
      if (it == text_.end()) {
        throw LookupError("no stored text embedding for emotion '" + w + "'");
      }
      seq.tokens.push_back(it->second);
      found = true;
    } else {
      seq.tokens.push_back(Vector::Zero(dim_));
    }
  }
  if (!found) {
    throw LookupError("prompt '" + std::string(prompt) +
                      "' names no emotion with a stored embedding");
  }
  return seq;
}

Vector PrecomputedSuite::text_encode(const TokenSequence& seq) const {
  seq.validate();
  require(seq.token_dim() == dim_, "text_encode: token dim mismatch");
  Vector sum = Vector::Zero(dim_);
  for (const auto& t : seq.tokens) sum += t;
  return sum;
}

Vector PrecomputedSuite::text_token_gradient(const TokenSequence& seq,
                                             int position,
                                             const Vector& upstream) const {
  require(position >= 0 && static_cast<std::size_t>(position) < seq.length(),
          "text_token_gradient: position out of range");
  require(upstream.size() == dim_, "text_token_gradient: upstream dim mismatch");
  return upstream;
}

std::unique_ptr<PrecomputedSuite> load_precomputed_features(
    const std::filesystem::path& manifest_path) {
  const FeatureManifest m = read_feature_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  auto load_one = [&](const std::string& rel) {
    const auto vs = read_feature_file(base / rel);
    if (vs.size() != 1) {
      throw LoadError(rel + ": expected exactly one vector, found " +
                      std::to_string(vs.size()));
    }
    if (vs.front().size() != m.dim) {
      throw LoadError(rel + ": dim " + std::to_string(vs.front().size()) +
                      " != manifest dim " + std::to_string(m.dim));
    }
    return vs.front();
  };
  std::map<std::string, Vector> visual;
  for (const auto& s : m.samples) {
    if (visual.contains(s.id)) throw LoadError("duplicate sample id '" + s.id + "'");
    visual.emplace(s.id, load_one(s.feature_file));
  }
  std::map<Emotion, Vector> text;
  for (const auto& [name, rel] : m.text_embeddings) {
    const auto e = parse_emotion(name);
    if (!e) throw LoadError("unknown emotion '" + name + "' in text_embeddings");
    text.emplace(*e, load_one(rel));
  }
  return std::make_unique<PrecomputedSuite>(m.dim, std::move(visual),
                                            std::move(text));
}

}  // namespace emosup
