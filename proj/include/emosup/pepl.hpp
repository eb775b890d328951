#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emosup/corpus.hpp"
#include "emosup/encoders.hpp"
#include "emosup/numerics.hpp"
#include "json.hpp"

namespace emosup {

enum class ProjectorMode { kMulti, kSingleConditional };

std::string_view projector_mode_name(ProjectorMode m);
std::optional<ProjectorMode> parse_projector_mode(std::string_view s);

// {in, d_e, d_e/2, d_e, d_e}: three hidden layers in the 2:1:2 shape of the
// reference [512, 256, 512] projector. `in` is d_e, or d_e + 7 in
// single-conditional mode.
std::vector<int> projector_dims(int d_e, ProjectorMode mode);

class EmotionProjectorBank {
 public:
  EmotionProjectorBank() = default;
  EmotionProjectorBank(ProjectorMode mode, std::vector<MlpParams> nets);

  static EmotionProjectorBank random(ProjectorMode mode, int d_e, Rng& rng);
  // Square identity layers (one-hot columns zero in conditional mode).
  static EmotionProjectorBank identity(ProjectorMode mode, int d_e,
                                       Activation hidden = Activation::kRelu);

  ProjectorMode mode() const { return mode_; }
  int embed_dim() const;
  std::size_t num_nets() const { return nets_.size(); }
  std::size_t net_index(Emotion e) const;
  const MlpParams& net(std::size_t i) const { return nets_.at(i); }
  MlpParams& mutable_net(std::size_t i) { return nets_.at(i); }

  // The visual feature, with the one-hot emotion code appended in
  // single-conditional mode.
  Vector input_for(Emotion e, const Vector& visual) const;

 private:
  ProjectorMode mode_ = ProjectorMode::kMulti;
  std::vector<MlpParams> nets_;
};

// Frozen identity backbone (served by the EncoderSuite) plus a learnable head
// producing `num_tokens` prompt tokens from the backbone feature.
struct VisualGuider {
  MlpParams head;  // d_b -> num_tokens * d_tok
  int num_tokens = 1;
};

struct PeplMetadata {
  std::uint64_t seed = 0;
  int epochs = 0;
  int steps_per_epoch = 0;
  int batch_size = 0;
  double final_loss = 0.0;
  std::string objective = "l1";
};

class PeplCheckpoint {
 public:
  PeplCheckpoint() = default;
  PeplCheckpoint(VisualGuider guider, EmotionProjectorBank projectors,
                 int d_e, int d_b, int d_tok);

  static PeplCheckpoint random_init(const EncoderSuite& suite,
                                    ProjectorMode mode, int guider_hidden,
                                    int guider_tokens, Rng& rng);

  const VisualGuider& guider() const { return guider_; }
  const EmotionProjectorBank& projectors() const { return projectors_; }
  const PeplMetadata& metadata() const { return metadata_; }
  int embed_dim() const { return d_e_; }
  int backbone_dim() const { return d_b_; }
  int token_dim() const { return d_tok_; }

  // Each throws ContractError once the checkpoint is frozen.
  VisualGuider& mutable_guider();
  EmotionProjectorBank& mutable_projectors();
  void set_metadata(PeplMetadata m);

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Every parameter, guider head first, then projectors in index order.
  std::vector<double> parameters() const;
  std::string parameter_hash() const;

 private:
  void require_mutable(const char* what) const;

  VisualGuider guider_;
  EmotionProjectorBank projectors_;
  PeplMetadata metadata_;
  int d_e_ = 0;
  int d_b_ = 0;
  int d_tok_ = 0;
  bool frozen_ = false;
};

nlohmann::json to_json(const MlpParams& p);
MlpParams mlp_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PeplCheckpoint& c);
PeplCheckpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const PeplCheckpoint& c);
PeplCheckpoint load_checkpoint(const std::filesystem::path& path);

// Guider tokens for a backbone feature.
std::vector<Vector> guider_tokens(const VisualGuider& guider,
                                  const Vector& backbone_feature,
                                  MlpCache* cache = nullptr);

// concat(E(I_r), F_t(prompt)). Throws ContractError for a non-neutral
// reference.
TokenSequence build_personalized_prompt(const VisualGuider& guider,
                                        const Sample& reference,
                                        Emotion emotion,
                                        const EncoderSuite& suite);

// Prepends precomputed guider tokens to the tokenized prompt of `emotion`.
TokenSequence personalize(const std::vector<Vector>& tokens, Emotion emotion,
                          const EncoderSuite& suite);

Vector personalized_text_embedding(const TokenSequence& prompt,
                                   const EncoderSuite& suite);

Vector emotion_visual_embedding(const EmotionProjectorBank& bank,
                                const Sample& sample, const EncoderSuite& suite);
Vector emotion_visual_embedding(const EmotionProjectorBank& bank,
                                const Vector& visual_feature, Emotion emotion);

struct L1Loss {
  double value = 0.0;
  bool positive_degenerate = false;
  bool negative_degenerate = false;
};

// (1 - sim(t_pos, i_vis)) + sim(t_neg, i_vis), in [-1, 3].
L1Loss contrastive_loss_l1(const Vector& t_pos, const Vector& t_neg,
                           const Vector& i_vis);

struct L1Gradient {
  L1Loss loss;
  Vector wrt_t_pos;
  Vector wrt_t_neg;
  Vector wrt_i_vis;
};

L1Gradient contrastive_loss_l1_gradient(const Vector& t_pos, const Vector& t_neg,
                                        const Vector& i_vis);

// Per-example parameter gradients. Projector gradients are listed per
// network index actually touched.
struct PeplGradient {
  double loss = 0.0;
  bool degenerate = false;
  MlpGrads guider;
  std::vector<std::pair<std::size_t, MlpGrads>> projectors;
};

PeplGradient l1_example_gradient(const PeplCheckpoint& ckpt,
                                 const ContrastiveEntry& entry,
                                 const EncoderSuite& suite);

// A (source, target) pair from one identity for the difference objective.
struct DifferenceEntry {
  Sample source;
  Sample target;
  Sample reference;
};

PeplGradient l2_example_gradient(const PeplCheckpoint& ckpt,
                                 const DifferenceEntry& entry,
                                 const EncoderSuite& suite);

// Batch mean of the loss and of every gradient. Example gradients are
// computed in parallel and summed in example order, so the result does not
// depend on the thread count; parallel = false gives the serial reference.
struct BatchGradient {
  double mean_loss = 0.0;
  MlpGrads guider;
  std::vector<MlpGrads> projectors;  // one per network
};

BatchGradient l1_batch_gradient(const PeplCheckpoint& ckpt,
                                const ContrastiveBatch& batch,
                                const EncoderSuite& suite, bool parallel = true);
BatchGradient l2_batch_gradient(const PeplCheckpoint& ckpt,
                                const std::vector<DifferenceEntry>& batch,
                                const EncoderSuite& suite, bool parallel = true);

// Same-identity train pairs with distinct emotions; reference uniform over
// the identity's neutral samples.
std::vector<DifferenceEntry> sample_difference_batch(
    const CorpusManifest& manifest, int batch_size, Rng& rng);

struct PeplTrainConfig {
  std::uint64_t seed = 1;
  int epochs = 10;
  int steps_per_epoch = 100;
  int batch_size = 32;
  double base_lr = 0.1;
  std::vector<int> decay_epochs{2, 4, 6};  // lr /= decay_factor at the start
  double decay_factor = 10.0;
  double momentum = 0.0;
  ProjectorMode projector_mode = ProjectorMode::kMulti;
  int guider_hidden = 64;
  int guider_tokens = 1;

  void validate() const;
};

nlohmann::json to_json(const PeplTrainConfig& c);
PeplTrainConfig train_config_from_json(const nlohmann::json& j,
                                       PeplTrainConfig defaults = {});

// Epochs are counted from 0.
double learning_rate_at(const PeplTrainConfig& config, int epoch);

struct LossPoint {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct LossCurve {
  std::vector<LossPoint> points;

  std::vector<double> epoch_means() const;
  // Header "epoch,step,loss,lr"; values with 17 significant digits.
  std::string to_csv() const;
};

struct PeplTrainResult {
  PeplCheckpoint checkpoint;  // frozen
  LossCurve curve;
};

// Minimizes the batch-mean contrastive loss by SGD. Throws NumericalError
// with epoch/step context on a non-finite loss.
PeplTrainResult pretrain_pepl(const CorpusManifest& manifest,
                              const NegativePoolTable& pools,
                              const EncoderSuite& suite,
                              const PeplTrainConfig& config);

// The same loop driven by the difference-alignment loss instead.
PeplTrainResult pretrain_with_vtedc_objective(const CorpusManifest& manifest,
                                              const NegativePoolTable& pools,
                                              const EncoderSuite& suite,
                                              const PeplTrainConfig& config);

// Fraction of `split` samples whose own-emotion personalized text embedding
// is the most similar of the seven. Requires a frozen checkpoint.
double retrieval_accuracy(const PeplCheckpoint& ckpt,
                          const CorpusManifest& manifest, Split split,
                          const EncoderSuite& suite);

}  // namespace emosup
