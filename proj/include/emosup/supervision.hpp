#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "emosup/corpus.hpp"
#include "emosup/encoders.hpp"
#include "emosup/numerics.hpp"
#include "emosup/pepl.hpp"
#include "json.hpp"

namespace emosup {

struct LambdaConfig {
  double value = 0.0;
  std::string baseline_tag = "toy";

  void validate() const;  // finite, >= 0
};

// ned 0.4, icface 0.05, sserd 0.2, toy 0.4. Throws ContractError otherwise.
LambdaConfig default_lambda(std::string_view baseline_tag);

struct LossAndGrad {
  double value = 0.0;
  Vector grad;
};

// (generated, ground truth) -> loss and its gradient w.r.t. generated.
using BaseLossHook = std::function<LossAndGrad(const Vector&, const Vector&)>;

// |generated - truth|^2 / d, the per-coordinate mean squared error.
BaseLossHook squared_error_loss();

// base + lambda * l2, gradients likewise. lambda == 0 returns the base value
// and gradient untouched.
LossAndGrad total_loss(double base, const Vector& base_grad, double l2,
                       const Vector& l2_grad, const LambdaConfig& lambda);

// (source visual embedding ++ target one-hot) -> generated visual embedding.
struct ToyGenerator {
  MlpParams params;
  bool residual = true;  // output = source + MLP(...)

  Vector generate(const Vector& source, Emotion target, MlpCache* cache = nullptr) const;
};

struct SupervisionConfig {
  std::uint64_t seed = 1;
  int steps = 300;
  int batch_size = 16;
  double lr = 0.5;
  int hidden = 64;
  bool residual = true;
  bool vtedc_enabled = true;  // false drops the L2 path entirely
  BaseLossHook base_loss;     // empty means squared_error_loss()

  void validate() const;
};

nlohmann::json to_json(const SupervisionConfig& c);
SupervisionConfig supervision_config_from_json(const nlohmann::json& j,
                                               SupervisionConfig defaults = {});

// Validation figures of one trained toy generator.
struct DemoRun {
  double lambda = 0.0;
  double base_loss = 0.0;         // mean over val pairs
  double l2_loss = 0.0;           // mean over val pairs, frozen PEPL
  double emotion_accuracy = 0.0;  // nearest identity centroid by cosine
  std::uint64_t seed = 0;
  std::string generator_hash;
};

struct DemoReport {
  std::string baseline_tag;
  DemoRun baseline;    // lambda = 0
  DemoRun supervised;  // requested lambda
};

// Trains one generator at `lambda` and evaluates it on val pairs. Every
// source of randomness derives from config.seed, so runs at different
// lambdas see the same initialization and batches.
DemoRun run_toy_supervision(const CorpusManifest& manifest,
                            const PeplCheckpoint& ckpt, double lambda,
                            const EncoderSuite& suite,
                            const SupervisionConfig& config);

DemoReport supervise_demo(const CorpusManifest& manifest,
                          const PeplCheckpoint& ckpt, const LambdaConfig& lambda,
                          const EncoderSuite& suite,
                          const SupervisionConfig& config);

std::vector<DemoRun> sweep_lambda(const CorpusManifest& manifest,
                                  const PeplCheckpoint& ckpt,
                                  const std::vector<double>& grid,
                                  const EncoderSuite& suite,
                                  const SupervisionConfig& config);

// Columns lambda,base_loss,l2_loss,emotion_accuracy,seed.
std::string demo_runs_to_csv(const std::vector<DemoRun>& runs);
nlohmann::json to_json(const DemoRun& r);
nlohmann::json to_json(const DemoReport& r);

}  // namespace emosup
