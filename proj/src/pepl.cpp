#include "emosup/pepl.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <map>

#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"
#include "emosup/vtedc.hpp"

namespace emosup {
using nlohmann::json;

std::string_view projector_mode_name(ProjectorMode m) {
  return m == ProjectorMode::kMulti ? "multi" : "single_conditional";
}

std::optional<ProjectorMode> parse_projector_mode(std::string_view s) {
  if (s == "multi") return ProjectorMode::kMulti;
  if (s == "single_conditional") return ProjectorMode::kSingleConditional;
  return std::nullopt;
}

std::vector<int> projector_dims(int d_e, ProjectorMode mode) {
  require(d_e >= 2, "projector_dims: d_e >= 2");
  const int in = mode == ProjectorMode::kMulti ? d_e : d_e + kNumEmotions;
  return {in, d_e, d_e / 2, d_e, d_e};
}

EmotionProjectorBank::EmotionProjectorBank(ProjectorMode mode,
                                           std::vector<MlpParams> nets)
    : mode_(mode), nets_(std::move(nets)) {
  const std::size_t want = mode_ == ProjectorMode::kMulti ? kNumEmotions : 1;
  require(nets_.size() == want,
          "EmotionProjectorBank: expected " + std::to_string(want) +
              " networks in " + std::string(projector_mode_name(mode_)) +
              " mode, got " + std::to_string(nets_.size()));
  const int d_e = nets_.front().output_dim();
  const int in = mode_ == ProjectorMode::kMulti ? d_e : d_e + kNumEmotions;
  for (const auto& n : nets_) {
    require(n.output_dim() == d_e && n.input_dim() == in,
            "EmotionProjectorBank: inconsistent projector dims");
  }
}

EmotionProjectorBank EmotionProjectorBank::random(ProjectorMode mode, int d_e,
                                                  Rng& rng) {
  const auto dims = projector_dims(d_e, mode);
  std::vector<MlpParams> nets;
  const int n = mode == ProjectorMode::kMulti ? kNumEmotions : 1;
  for (int i = 0; i < n; ++i) nets.push_back(make_mlp(dims, rng));
  return EmotionProjectorBank(mode, std::move(nets));
}

EmotionProjectorBank EmotionProjectorBank::identity(ProjectorMode mode, int d_e,
                                                    Activation hidden) {
  const int in = mode == ProjectorMode::kMulti ? d_e : d_e + kNumEmotions;
  auto square = [&](int cols, Activation a) {
    DenseLayer l;
    l.weights = Matrix::Identity(d_e, cols);
    l.bias = Vector::Zero(d_e);
    l.activation = a;
    return l;
  };
  std::vector<DenseLayer> layers{square(in, hidden), square(d_e, hidden),
                                 square(d_e, hidden),
                                 square(d_e, Activation::kIdentity)};
  std::vector<MlpParams> nets;
  const int n = mode == ProjectorMode::kMulti ? kNumEmotions : 1;
  for (int i = 0; i < n; ++i) nets.emplace_back(layers);
  return EmotionProjectorBank(mode, std::move(nets));
}

int EmotionProjectorBank::embed_dim() const {
  return nets_.empty() ? 0 : nets_.front().output_dim();
}

std::size_t EmotionProjectorBank::net_index(Emotion e) const {
  const int c = code(e);
  require(c >= 0 && c < kNumEmotions, "unknown emotion code " + std::to_string(c));
  return mode_ == ProjectorMode::kMulti ? static_cast<std::size_t>(c) : 0;
}

Vector EmotionProjectorBank::input_for(Emotion e, const Vector& visual) const {
  require(visual.size() == embed_dim(),
          "emotion projector: visual feature dim mismatch");
  if (mode_ == ProjectorMode::kMulti) return visual;
  Vector x = Vector::Zero(visual.size() + kNumEmotions);
  x.head(visual.size()) = visual;
  x(visual.size() + code(e)) = 1.0;
  return x;
}

PeplCheckpoint::PeplCheckpoint(VisualGuider guider,
                               EmotionProjectorBank projectors, int d_e,
                               int d_b, int d_tok)
    : guider_(std::move(guider)),
      projectors_(std::move(projectors)),
      d_e_(d_e),
      d_b_(d_b),
      d_tok_(d_tok) {
  require(guider_.num_tokens >= 1, "PeplCheckpoint: guider needs >= 1 token");
  require(guider_.head.input_dim() == d_b_,
          "PeplCheckpoint: guider head input must equal backbone dim");
  require(guider_.head.output_dim() == guider_.num_tokens * d_tok_,
          "PeplCheckpoint: guider head output must equal tokens * token dim");
  require(projectors_.embed_dim() == d_e_,
          "PeplCheckpoint: projector output must equal embedding dim");
}

PeplCheckpoint PeplCheckpoint::random_init(const EncoderSuite& suite,
                                           ProjectorMode mode,
                                           int guider_hidden,
                                           int guider_tokens, Rng& rng) {
  require(guider_hidden >= 1 && guider_tokens >= 1,
          "random_init: guider sizes must be positive");
  const std::vector<int> gdims{suite.backbone_dim(), guider_hidden,
                               guider_tokens * suite.token_dim()};
  VisualGuider g{make_mlp(gdims, rng), guider_tokens};
  auto bank = EmotionProjectorBank::random(mode, suite.embed_dim(), rng);
  return PeplCheckpoint(std::move(g), std::move(bank), suite.embed_dim(),
                        suite.backbone_dim(), suite.token_dim());
}

void PeplCheckpoint::require_mutable(const char* what) const {
  if (frozen_) {
    throw ContractError(std::string(what) + ": checkpoint is frozen");
  }
}

VisualGuider& PeplCheckpoint::mutable_guider() {
  require_mutable("mutable_guider");
  return guider_;
}

EmotionProjectorBank& PeplCheckpoint::mutable_projectors() {
  require_mutable("mutable_projectors");
  return projectors_;
}

void PeplCheckpoint::set_metadata(PeplMetadata m) {
  require_mutable("set_metadata");
  metadata_ = std::move(m);
}

std::vector<double> PeplCheckpoint::parameters() const {
  std::vector<double> out = guider_.head.flatten();
  for (std::size_t i = 0; i < projectors_.num_nets(); ++i) {
    const auto f = projectors_.net(i).flatten();
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

std::string PeplCheckpoint::parameter_hash() const {
  return hash_doubles(parameters());
}

// ---- serialization ----

json to_json(const MlpParams& p) {
  json layers = json::array();
  for (const auto& l : p.layers()) {
    json w = json::array();
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) row.push_back(l.weights(r, c));
      w.push_back(std::move(row));
    }
    json b = json::array();
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) b.push_back(l.bias(r));
    layers.push_back({{"activation", l.activation == Activation::kRelu ? "relu" : "identity"},
                      {"weights", std::move(w)},
                      {"bias", std::move(b)}});
  }
  return {{"layers", std::move(layers)}};
}

MlpParams mlp_from_json(const json& j) {
  std::vector<DenseLayer> layers;
  try {
    for (const auto& jl : j.at("layers")) {
      DenseLayer l;
      const auto act = jl.at("activation").get<std::string>();
      if (act == "relu") {
        l.activation = Activation::kRelu;
      } else if (act == "identity") {
        l.activation = Activation::kIdentity;
      } else {
        throw LoadError("mlp: unknown activation '" + act + "'");
      }
      const auto& w = jl.at("weights");
      const auto rows = static_cast<Eigen::Index>(w.size());
      const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(w.at(0).size());
      l.weights.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(w.at(r).size()) != cols) {
          throw LoadError("mlp: ragged weight matrix");
        }
        for (Eigen::Index c = 0; c < cols; ++c) l.weights(r, c) = w.at(r).at(c).get<double>();
      }
      const auto& b = jl.at("bias");
      l.bias.resize(static_cast<Eigen::Index>(b.size()));
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = b.at(r).get<double>();
      layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("mlp: ") + e.what());
  }
  try {
    return MlpParams(std::move(layers));
  } catch (const ContractError& e) {
    throw LoadError(std::string("mlp: ") + e.what());
  }
}

json to_json(const PeplCheckpoint& c) {
  json nets = json::array();
  for (std::size_t i = 0; i < c.projectors().num_nets(); ++i) {
    nets.push_back(to_json(c.projectors().net(i)));
  }
  const auto& m = c.metadata();
  return {{"format_version", 1},
          {"dims", {{"d_e", c.embed_dim()}, {"d_b", c.backbone_dim()}, {"d_tok", c.token_dim()}}},
          {"metadata",
           {{"seed", m.seed},
            {"epochs", m.epochs},
            {"steps_per_epoch", m.steps_per_epoch},
            {"batch_size", m.batch_size},
            {"final_loss", m.final_loss},
            {"objective", m.objective}}},
          {"frozen", c.frozen()},
          {"guider", {{"num_tokens", c.guider().num_tokens}, {"head", to_json(c.guider().head)}}},
          {"projectors",
           {{"mode", std::string(projector_mode_name(c.projectors().mode()))},
            {"nets", std::move(nets)}}}};
}

PeplCheckpoint checkpoint_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw LoadError("checkpoint: unsupported format_version");
    }
    const auto& d = j.at("dims");
    const auto mode = parse_projector_mode(j.at("projectors").at("mode").get<std::string>());
    if (!mode) throw LoadError("checkpoint: unknown projector mode");
    std::vector<MlpParams> nets;
    for (const auto& n : j.at("projectors").at("nets")) nets.push_back(mlp_from_json(n));
    VisualGuider g{mlp_from_json(j.at("guider").at("head")),
                   j.at("guider").at("num_tokens").get<int>()};
    PeplCheckpoint c(std::move(g), EmotionProjectorBank(*mode, std::move(nets)),
                     d.at("d_e").get<int>(), d.at("d_b").get<int>(),
                     d.at("d_tok").get<int>());
    const auto& jm = j.at("metadata");
    PeplMetadata m;
    m.seed = jm.at("seed").get<std::uint64_t>();
    m.epochs = jm.at("epochs").get<int>();
    m.steps_per_epoch = jm.at("steps_per_epoch").get<int>();
    m.batch_size = jm.at("batch_size").get<int>();
    m.final_loss = jm.at("final_loss").get<double>();
    m.objective = jm.at("objective").get<std::string>();
    c.set_metadata(std::move(m));
    if (j.at("frozen").get<bool>()) c.freeze();
    return c;
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const PeplCheckpoint& c) {
  write_text_file(path, to_json(c).dump() + "\n");
}

PeplCheckpoint load_checkpoint(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---- forward ops ----

std::vector<Vector> guider_tokens(const VisualGuider& guider,
                                  const Vector& backbone_feature,
                                  MlpCache* cache) {
  require(backbone_feature.size() == guider.head.input_dim(),
          "visual guider: backbone feature dim mismatch");
  const Vector out = mlp_forward(guider.head, backbone_feature, cache);
  const auto d = out.size() / guider.num_tokens;
  std::vector<Vector> tokens;
  for (int t = 0; t < guider.num_tokens; ++t) tokens.push_back(out.segment(t * d, d));
  return tokens;
}

TokenSequence personalize(const std::vector<Vector>& tokens, Emotion emotion,
                          const EncoderSuite& suite) {
  TokenSequence prompt = suite.tokenize(emotion_prompt(emotion));
  TokenSequence seq;
  seq.tokens.reserve(tokens.size() + prompt.length());
  for (const auto& t : tokens) {
    require(t.size() == suite.token_dim(), "personalize: guider token dim mismatch");
    seq.tokens.push_back(t);
  }
  for (auto& t : prompt.tokens) seq.tokens.push_back(std::move(t));
  return seq;
}

TokenSequence build_personalized_prompt(const VisualGuider& guider,
                                        const Sample& reference,
                                        Emotion emotion,
                                        const EncoderSuite& suite) {
  if (reference.emotion != Emotion::kNeutral) {
    throw ContractError("build_personalized_prompt: reference '" + reference.id +
                        "' is " + std::string(emotion_name(reference.emotion)) +
                        ", not neutral");
  }
  return personalize(
      guider_tokens(guider, suite.backbone_identity(reference.image_ref)),
      emotion, suite);
}

Vector personalized_text_embedding(const TokenSequence& prompt,
                                   const EncoderSuite& suite) {
  prompt.validate();
  require(prompt.token_dim() == suite.token_dim(),
          "personalized_text_embedding: token dim mismatch");
  return suite.text_encode(prompt);
}

Vector emotion_visual_embedding(const EmotionProjectorBank& bank,
                                const Vector& visual_feature, Emotion emotion) {
  return mlp_forward(bank.net(bank.net_index(emotion)),
                     bank.input_for(emotion, visual_feature));
}

Vector emotion_visual_embedding(const EmotionProjectorBank& bank,
                                const Sample& sample, const EncoderSuite& suite) {
  return emotion_visual_embedding(bank, suite.visual_encode(sample.image_ref),
                                  sample.emotion);
}

L1Loss contrastive_loss_l1(const Vector& t_pos, const Vector& t_neg,
                           const Vector& i_vis) {
  require(t_pos.size() == i_vis.size() && t_neg.size() == i_vis.size(),
          "contrastive_loss_l1: dim mismatch");
  const Similarity p = cosine_similarity(t_pos, i_vis);
  const Similarity n = cosine_similarity(t_neg, i_vis);
  return {(1.0 - p.value) + n.value, p.degenerate, n.degenerate};
}

L1Gradient contrastive_loss_l1_gradient(const Vector& t_pos, const Vector& t_neg,
                                        const Vector& i_vis) {
  require(t_pos.size() == i_vis.size() && t_neg.size() == i_vis.size(),
          "contrastive_loss_l1: dim mismatch");
  const CosineGradient p = cosine_similarity_gradient(t_pos, i_vis);
  const CosineGradient n = cosine_similarity_gradient(t_neg, i_vis);
  L1Gradient g;
  g.loss = {(1.0 - p.value) + n.value, p.degenerate, n.degenerate};
  g.wrt_t_pos = -p.wrt_a;
  g.wrt_t_neg = n.wrt_a;
  g.wrt_i_vis = n.wrt_b - p.wrt_b;
  return g;
}

// ---- gradients ----

namespace {

// Gradient of the guider head output given upstream gradients on the text
// embeddings of several prompts that all start with the same guider tokens.
Vector guider_upstream(const VisualGuider& guider, const EncoderSuite& suite,
                       const std::vector<std::pair<const TokenSequence*, Vector>>& parts) {
  const int d = suite.token_dim();
  Vector up = Vector::Zero(static_cast<Eigen::Index>(guider.num_tokens) * d);
  for (const auto& [seq, g] : parts) {
    for (int t = 0; t < guider.num_tokens; ++t) {
      up.segment(t * d, d) += suite.text_token_gradient(*seq, t, g);
    }
  }
  return up;
}

void add_projector_grad(PeplGradient* out, std::size_t index, MlpGrads g) {
  for (auto& [i, existing] : out->projectors) {
    if (i == index) {
      existing.add_scaled(g, 1.0);
      return;
    }
  }
  out->projectors.emplace_back(index, std::move(g));
}

template <class Entry, class Fn>
BatchGradient reduce_batch(const PeplCheckpoint& ckpt,
                           const std::vector<Entry>& entries, bool parallel,
                           Fn&& example) {
  require(!entries.empty(), "batch gradient: empty batch");
  const auto n = static_cast<long>(entries.size());
  std::vector<PeplGradient> per(entries.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(static) if (parallel)
  for (long i = 0; i < n; ++i) {
    try {
      per[i] = example(entries[i]);
    } catch (...) {
#pragma omp critical(emosup_batch_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  BatchGradient out;
  out.guider = MlpGrads::zeros_like(ckpt.guider().head);
  for (std::size_t i = 0; i < ckpt.projectors().num_nets(); ++i) {
    out.projectors.push_back(MlpGrads::zeros_like(ckpt.projectors().net(i)));
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (const auto& g : per) {
    out.mean_loss += g.loss;
    out.guider.add_scaled(g.guider, inv);
    for (const auto& [idx, pg] : g.projectors) out.projectors[idx].add_scaled(pg, inv);
  }
  out.mean_loss *= inv;
  return out;
}

}  // namespace

PeplGradient l1_example_gradient(const PeplCheckpoint& ckpt,
                                 const ContrastiveEntry& entry,
                                 const EncoderSuite& suite) {
  require(entry.reference.emotion == Emotion::kNeutral,
          "l1_example_gradient: reference must be neutral");
  const auto& guider = ckpt.guider();
  const auto& bank = ckpt.projectors();

  MlpCache gcache;
  const auto tokens = guider_tokens(
      guider, suite.backbone_identity(entry.reference.image_ref), &gcache);
  const TokenSequence pos = personalize(tokens, entry.positive_prompt, suite);
  const TokenSequence neg = personalize(tokens, entry.negative_prompt, suite);
  const Vector t_pos = suite.text_encode(pos);
  const Vector t_neg = suite.text_encode(neg);

  const Emotion e = entry.anchor.emotion;
  const std::size_t pi = bank.net_index(e);
  MlpCache pcache;
  const Vector i_vis =
      mlp_forward(bank.net(pi),
                  bank.input_for(e, suite.visual_encode(entry.anchor.image_ref)),
                  &pcache);

  const L1Gradient lg = contrastive_loss_l1_gradient(t_pos, t_neg, i_vis);
  PeplGradient out;
  out.loss = lg.loss.value;
  out.degenerate = lg.loss.positive_degenerate || lg.loss.negative_degenerate;
  out.guider = mlp_backward(
      guider.head, gcache,
      guider_upstream(guider, suite, {{&pos, lg.wrt_t_pos}, {&neg, lg.wrt_t_neg}}));
  out.projectors.emplace_back(pi, mlp_backward(bank.net(pi), pcache, lg.wrt_i_vis));
  return out;
}

PeplGradient l2_example_gradient(const PeplCheckpoint& ckpt,
                                 const DifferenceEntry& entry,
                                 const EncoderSuite& suite) {
  require(entry.reference.emotion == Emotion::kNeutral,
          "l2_example_gradient: reference must be neutral");
  const auto& guider = ckpt.guider();
  const auto& bank = ckpt.projectors();

  MlpCache gcache;
  const auto tokens = guider_tokens(
      guider, suite.backbone_identity(entry.reference.image_ref), &gcache);
  const TokenSequence seq_s = personalize(tokens, entry.source.emotion, suite);
  const TokenSequence seq_t = personalize(tokens, entry.target.emotion, suite);

  const std::size_t ps = bank.net_index(entry.source.emotion);
  const std::size_t pt = bank.net_index(entry.target.emotion);
  MlpCache cs;
  MlpCache ct;
  const Vector i_s = mlp_forward(
      bank.net(ps),
      bank.input_for(entry.source.emotion, suite.visual_encode(entry.source.image_ref)),
      &cs);
  const Vector i_t = mlp_forward(
      bank.net(pt),
      bank.input_for(entry.target.emotion, suite.visual_encode(entry.target.image_ref)),
      &ct);

  DifferencePair dp;
  dp.I_diff = i_s - i_t;
  dp.T_diff = suite.text_encode(seq_s) - suite.text_encode(seq_t);
  dp.degenerate = dp.I_diff.norm() < kNormEpsilon || dp.T_diff.norm() < kNormEpsilon;
  const L2Gradient lg = vtedc_loss_l2_gradient(dp);

  PeplGradient out;
  out.loss = lg.loss.value;
  out.degenerate = lg.loss.degenerate;
  out.guider = mlp_backward(
      guider.head, gcache,
      guider_upstream(guider, suite,
                      {{&seq_s, lg.wrt_t_diff}, {&seq_t, -lg.wrt_t_diff}}));
  add_projector_grad(&out, ps, mlp_backward(bank.net(ps), cs, lg.wrt_i_diff));
  add_projector_grad(&out, pt, mlp_backward(bank.net(pt), ct, -lg.wrt_i_diff));
  return out;
}

BatchGradient l1_batch_gradient(const PeplCheckpoint& ckpt,
                                const ContrastiveBatch& batch,
                                const EncoderSuite& suite, bool parallel) {
  return reduce_batch(ckpt, batch.entries, parallel,
                      [&](const ContrastiveEntry& e) {
                        return l1_example_gradient(ckpt, e, suite);
                      });
}

BatchGradient l2_batch_gradient(const PeplCheckpoint& ckpt,
                                const std::vector<DifferenceEntry>& batch,
                                const EncoderSuite& suite, bool parallel) {
  return reduce_batch(ckpt, batch, parallel, [&](const DifferenceEntry& e) {
    return l2_example_gradient(ckpt, e, suite);
  });
}

std::vector<DifferenceEntry> sample_difference_batch(
    const CorpusManifest& manifest, int batch_size, Rng& rng) {
  require(batch_size >= 1, "sample_difference_batch: batch_size >= 1");
  const auto train = manifest.indices(Split::kTrain);
  require(!train.empty(), "sample_difference_batch: empty train split");
  std::map<std::string, std::vector<std::size_t>> by_identity;
  std::map<std::string, std::vector<std::size_t>> neutrals;
  for (std::size_t i : train) by_identity[manifest.samples()[i].identity].push_back(i);
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const Sample& s = manifest.samples()[i];
    if (s.emotion == Emotion::kNeutral) neutrals[s.identity].push_back(i);
  }

  std::vector<DifferenceEntry> out;
  out.reserve(batch_size);
  std::vector<std::size_t> candidates;
  for (int b = 0; b < batch_size; ++b) {
    const Sample& src = manifest.samples()[train[rng.index(train.size())]];
    candidates.clear();
    for (std::size_t i : by_identity[src.identity]) {
      if (manifest.samples()[i].emotion != src.emotion) candidates.push_back(i);
    }
    if (candidates.empty()) {
      throw SamplingError("identity '" + src.identity +
                          "' has no train sample with a second emotion");
    }
    const Sample& tgt = manifest.samples()[candidates[rng.index(candidates.size())]];
    const auto it = neutrals.find(src.identity);
    if (it == neutrals.end()) {
      throw SamplingError("identity '" + src.identity +
                          "' has no neutral sample to use as reference");
    }
    const Sample& ref = manifest.samples()[it->second[rng.index(it->second.size())]];
    out.push_back({src, tgt, ref});
  }
  return out;
}

// ---- training ----

void PeplTrainConfig::validate() const {
  require(epochs >= 1, "train config: epochs >= 1");
  require(steps_per_epoch >= 1, "train config: steps_per_epoch >= 1");
  require(batch_size >= 1, "train config: batch_size >= 1");
  require(std::isfinite(base_lr) && base_lr > 0.0, "train config: base lr > 0");
  require(std::isfinite(decay_factor) && decay_factor > 0.0,
          "train config: decay factor > 0");
  require(momentum >= 0.0 && momentum < 1.0, "train config: momentum in [0, 1)");
  require(guider_hidden >= 1, "train config: guider_hidden >= 1");
  require(guider_tokens >= 1, "train config: guider_tokens >= 1");
  for (int e : decay_epochs) require(e >= 0, "train config: decay epochs >= 0");
}

json to_json(const PeplTrainConfig& c) {
  return {{"seed", c.seed},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"decay_epochs", c.decay_epochs},
          {"decay_factor", c.decay_factor},
          {"momentum", c.momentum},
          {"projector_mode", std::string(projector_mode_name(c.projector_mode))},
          {"guider_hidden", c.guider_hidden},
          {"guider_tokens", c.guider_tokens}};
}

PeplTrainConfig train_config_from_json(const json& j, PeplTrainConfig c) {
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("steps_per_epoch")) c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("base_lr")) c.base_lr = j.at("base_lr").get<double>();
    if (j.contains("decay_epochs")) c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
    if (j.contains("decay_factor")) c.decay_factor = j.at("decay_factor").get<double>();
    if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
    if (j.contains("projector_mode")) {
      const auto m = parse_projector_mode(j.at("projector_mode").get<std::string>());
      if (!m) throw ContractError("train config: unknown projector_mode");
      c.projector_mode = *m;
    }
    if (j.contains("guider_hidden")) c.guider_hidden = j.at("guider_hidden").get<int>();
    if (j.contains("guider_tokens")) c.guider_tokens = j.at("guider_tokens").get<int>();
  } catch (const json::exception& e) {
    throw ContractError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate_at(const PeplTrainConfig& config, int epoch) {
  double lr = config.base_lr;
  for (int d : config.decay_epochs) {
    if (epoch >= d) lr /= config.decay_factor;
  }
  return lr;
}

std::vector<double> LossCurve::epoch_means() const {
  std::vector<double> sums;
  std::vector<int> counts;
  for (const auto& p : points) {
    if (static_cast<std::size_t>(p.epoch) >= sums.size()) {
      sums.resize(p.epoch + 1, 0.0);
      counts.resize(p.epoch + 1, 0);
    }
    sums[p.epoch] += p.loss;
    ++counts[p.epoch];
  }
  for (std::size_t i = 0; i < sums.size(); ++i) {
    if (counts[i] > 0) sums[i] /= counts[i];
  }
  return sums;
}

std::string LossCurve::to_csv() const {
  std::string out = "epoch,step,loss,lr\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g\n", p.epoch, p.step, p.loss, p.lr);
    out += buf;
  }
  return out;
}

namespace {

struct Velocities {
  MlpGrads guider;
  std::vector<MlpGrads> projectors;
};

template <class StepGrad>
PeplTrainResult train_loop(const CorpusManifest& manifest,
                           const EncoderSuite& suite,
                           const PeplTrainConfig& config,
                           const std::string& objective, StepGrad&& step_grad) {
  config.validate();
  manifest.validate();
  Rng init_rng(mix_seed(config.seed, "pepl-init"));
  Rng batch_rng(mix_seed(config.seed, "pepl-batches"));
  PeplCheckpoint ckpt = PeplCheckpoint::random_init(
      suite, config.projector_mode, config.guider_hidden, config.guider_tokens,
      init_rng);

  Velocities vel{MlpGrads::zeros_like(ckpt.guider().head), {}};
  for (std::size_t i = 0; i < ckpt.projectors().num_nets(); ++i) {
    vel.projectors.push_back(MlpGrads::zeros_like(ckpt.projectors().net(i)));
  }

  LossCurve curve;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch);
    for (int step = 0; step < config.steps_per_epoch; ++step) {
      const BatchGradient g = step_grad(ckpt, batch_rng);
      const auto context = [&] {
        return " at epoch " + std::to_string(epoch) + " step " + std::to_string(step);
      };
      if (!std::isfinite(g.mean_loss)) {
        throw NumericalError(objective + " loss is not finite" + context());
      }
      try {
        auto& guider = ckpt.mutable_guider();
        guider.head = sgd_step(guider.head,
                               momentum_update(&vel.guider, g.guider, config.momentum), lr);
        auto& bank = ckpt.mutable_projectors();
        for (std::size_t i = 0; i < bank.num_nets(); ++i) {
          bank.mutable_net(i) = sgd_step(
              bank.net(i),
              momentum_update(&vel.projectors[i], g.projectors[i], config.momentum), lr);
        }
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + context());
      }
      curve.points.push_back({epoch, step, g.mean_loss, lr});
    }
  }

  PeplMetadata m;
  m.seed = config.seed;
  m.epochs = config.epochs;
  m.steps_per_epoch = config.steps_per_epoch;
  m.batch_size = config.batch_size;
  m.final_loss = curve.epoch_means().back();
  m.objective = objective;
  ckpt.set_metadata(std::move(m));
  ckpt.freeze();
  return {std::move(ckpt), std::move(curve)};
}

}  // namespace

PeplTrainResult pretrain_pepl(const CorpusManifest& manifest,
                              const NegativePoolTable& pools,
                              const EncoderSuite& suite,
                              const PeplTrainConfig& config) {
  pools.validate();
  return train_loop(manifest, suite, config, "l1",
                    [&](const PeplCheckpoint& ckpt, Rng& rng) {
                      const ContrastiveBatch b = sample_contrastive_batch(
                          manifest, pools, config.batch_size, rng);
                      return l1_batch_gradient(ckpt, b, suite);
                    });
}

PeplTrainResult pretrain_with_vtedc_objective(const CorpusManifest& manifest,
                                              const NegativePoolTable& pools,
                                              const EncoderSuite& suite,
                                              const PeplTrainConfig& config) {
  pools.validate();
  return train_loop(manifest, suite, config, "l2",
                    [&](const PeplCheckpoint& ckpt, Rng& rng) {
                      const auto b = sample_difference_batch(manifest, config.batch_size, rng);
                      return l2_batch_gradient(ckpt, b, suite);
                    });
}

double retrieval_accuracy(const PeplCheckpoint& ckpt,
                          const CorpusManifest& manifest, Split split,
                          const EncoderSuite& suite) {
  require(ckpt.frozen(), "retrieval_accuracy: checkpoint must be frozen");
  const auto idx = manifest.indices(split);
  require(!idx.empty(), "retrieval_accuracy: empty split");
  std::map<std::string, std::vector<Vector>> text_by_ref;
  std::size_t correct = 0;
  for (std::size_t i : idx) {
    const Sample& s = manifest.samples()[i];
    auto it = text_by_ref.find(s.neutral_ref);
    if (it == text_by_ref.end()) {
      const Sample& ref = manifest.at(s.neutral_ref);
      std::vector<Vector> texts;
      for (Emotion e : kAllEmotions) {
        texts.push_back(personalized_text_embedding(
            build_personalized_prompt(ckpt.guider(), ref, e, suite), suite));
      }
      it = text_by_ref.emplace(s.neutral_ref, std::move(texts)).first;
    }
    const Vector iv = emotion_visual_embedding(ckpt.projectors(), s, suite);
    int best = 0;
    double best_sim = -2.0;
    for (int k = 0; k < kNumEmotions; ++k) {
      const double sim = cosine_similarity(it->second[k], iv).value;
      if (sim > best_sim) {
        best_sim = sim;
        best = k;
      }
    }
    if (best == code(s.emotion)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

}  // namespace emosup
