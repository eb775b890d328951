#include "emosup/supervision.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <map>

#include "emosup/errors.hpp"
#include "emosup/hashing.hpp"
#include "emosup/vtedc.hpp"

namespace emosup {
using nlohmann::json;

void LambdaConfig::validate() const {
  require(std::isfinite(value) && value >= 0.0,
          "lambda must be finite and >= 0, got " + std::to_string(value));
}

LambdaConfig default_lambda(std::string_view tag) {
  if (tag == "ned") return {0.4, "ned"};
  if (tag == "icface") return {0.05, "icface"};
  if (tag == "sserd") return {0.2, "sserd"};
  if (tag == "toy") return {0.4, "toy"};
  throw ContractError("unknown baseline tag '" + std::string(tag) +
                      "' (expected ned, icface, sserd or toy)");
}

BaseLossHook squared_error_loss() {
  return [](const Vector& generated, const Vector& truth) {
    require(generated.size() == truth.size(), "squared error: dim mismatch");
    const Vector d = generated - truth;
    const auto n = static_cast<double>(d.size());
    return LossAndGrad{d.squaredNorm() / n, (2.0 / n) * d};
  };
}

LossAndGrad total_loss(double base, const Vector& base_grad, double l2,
                       const Vector& l2_grad, const LambdaConfig& lambda) {
  lambda.validate();
  require(base_grad.size() == l2_grad.size(), "total_loss: gradient dims differ");
  require(std::isfinite(base) && std::isfinite(l2) && all_finite(base_grad) &&
              all_finite(l2_grad),
          "total_loss: non-finite input");
  if (lambda.value == 0.0) return {base, base_grad};
  return {base + lambda.value * l2, base_grad + lambda.value * l2_grad};
}

Vector ToyGenerator::generate(const Vector& source, Emotion target,
                              MlpCache* cache) const {
  require(params.input_dim() == source.size() + kNumEmotions,
          "toy generator: source dim mismatch");
  Vector x = Vector::Zero(params.input_dim());
  x.head(source.size()) = source;
  x(source.size() + code(target)) = 1.0;
  Vector out = mlp_forward(params, x, cache);
  if (residual) out += source;
  return out;
}

void SupervisionConfig::validate() const {
  require(steps >= 1, "supervision config: steps >= 1");
  require(batch_size >= 1, "supervision config: batch_size >= 1");
  require(std::isfinite(lr) && lr > 0.0, "supervision config: lr > 0");
  require(hidden >= 1, "supervision config: hidden >= 1");
}

json to_json(const SupervisionConfig& c) {
  return {{"seed", c.seed},         {"steps", c.steps},
          {"batch_size", c.batch_size}, {"lr", c.lr},
          {"hidden", c.hidden},     {"residual", c.residual},
          {"vtedc_enabled", c.vtedc_enabled}};
}

SupervisionConfig supervision_config_from_json(const json& j, SupervisionConfig c) {
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("steps")) c.steps = j.at("steps").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<int>();
    if (j.contains("residual")) c.residual = j.at("residual").get<bool>();
    if (j.contains("vtedc_enabled")) c.vtedc_enabled = j.at("vtedc_enabled").get<bool>();
  } catch (const json::exception& e) {
    throw ContractError(std::string("supervision config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct Pair {
  const Sample* source;
  Emotion target;
  const Sample* truth;
};

// Everything the demo reads from the frozen side, computed once.
struct DemoContext {
  const CorpusManifest& manifest;
  const PeplCheckpoint& ckpt;
  const EncoderSuite& suite;
  std::map<std::string, Vector> visual;                       // by image ref
  std::map<std::string, std::array<Vector, kNumEmotions>> text;  // by identity
  std::map<std::string, std::array<Vector, kNumEmotions>> centroids;
  // (identity, emotion) -> train samples / all samples
  std::map<std::pair<std::string, Emotion>, std::vector<const Sample*>> train_cells;
  std::map<std::pair<std::string, Emotion>, std::vector<const Sample*>> all_cells;

  DemoContext(const CorpusManifest& m, const PeplCheckpoint& c, const EncoderSuite& s)
      : manifest(m), ckpt(c), suite(s) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Sample& smp = m.samples()[i];
      visual.emplace(smp.image_ref, s.visual_encode(smp.image_ref));
      all_cells[{smp.identity, smp.emotion}].push_back(&smp);
      if (m.splits()[i] == Split::kTrain) train_cells[{smp.identity, smp.emotion}].push_back(&smp);
    }
    for (const auto& identity : m.identities()) {
      const Sample& ref = m.samples()[m.neutral_indices(identity).front()];
      const auto tokens = guider_tokens(c.guider(), s.backbone_identity(ref.image_ref));
      auto& t = text[identity];
      auto& cent = centroids[identity];
      for (Emotion e : kAllEmotions) {
        t[code(e)] = personalized_text_embedding(personalize(tokens, e, s), s);
        cent[code(e)] = Vector::Zero(s.embed_dim());
        const auto it = all_cells.find({identity, e});
        if (it == all_cells.end()) continue;
        for (const Sample* p : it->second) cent[code(e)] += visual.at(p->image_ref);
        cent[code(e)] /= static_cast<double>(it->second.size());
      }
    }
  }

  bool has_cell(const std::string& identity, Emotion e) const {
    return all_cells.count({identity, e}) > 0;
  }
};

struct PairResult {
  double base = 0.0;
  double l2 = 0.0;
  MlpGrads grads;
};

PairResult pair_forward(const DemoContext& ctx, const ToyGenerator& gen,
                        const Pair& p, double lambda, const SupervisionConfig& cfg,
                        const BaseLossHook& base_hook, bool want_grads) {
  const Vector& src = ctx.visual.at(p.source->image_ref);
  MlpCache cache;
  const Vector out = gen.generate(src, p.target, want_grads ? &cache : nullptr);
  const LossAndGrad base = base_hook(out, ctx.visual.at(p.truth->image_ref));
  require(base.grad.size() == out.size(), "base loss hook: gradient dim mismatch");

  PairResult r;
  r.base = base.value;
  Vector l2_grad = Vector::Zero(out.size());
  if (cfg.vtedc_enabled) {
    const auto& bank = ctx.ckpt.projectors();
    const auto& text = ctx.text.at(p.source->identity);
    const std::size_t pt = bank.net_index(p.target);
    MlpCache pcache;
    DifferencePair dp;
    dp.I_diff = emotion_visual_embedding(bank, src, p.source->emotion) -
                mlp_forward(bank.net(pt), bank.input_for(p.target, out), &pcache);
    dp.T_diff = text[code(p.source->emotion)] - text[code(p.target)];
    dp.degenerate = dp.I_diff.norm() < kNormEpsilon || dp.T_diff.norm() < kNormEpsilon;
    const L2Gradient lg = vtedc_loss_l2_gradient(dp);
    r.l2 = lg.loss.value;
    if (want_grads) {
      // The generated embedding enters I_diff with a minus sign.
      l2_grad = mlp_backward(bank.net(pt), pcache, -lg.wrt_i_diff).input.head(out.size());
    }
  }
  if (want_grads) {
    const LossAndGrad total =
        total_loss(base.value, base.grad, r.l2, l2_grad, {lambda, "toy"});
    if (!std::isfinite(total.value)) throw NumericalError("toy supervision: non-finite loss");
    r.grads = mlp_backward(gen.params, cache, total.grad);
  }
  return r;
}

std::vector<Pair> sample_pairs(const DemoContext& ctx, int n, Rng& rng) {
  const auto train = ctx.manifest.indices(Split::kTrain);
  require(!train.empty(), "supervise_demo: empty train split");
  std::vector<Pair> out;
  std::vector<Emotion> targets;
  while (static_cast<int>(out.size()) < n) {
    const Sample& s = ctx.manifest.samples()[train[rng.index(train.size())]];
    targets.clear();
    for (Emotion e : kAllEmotions) {
      if (e != s.emotion && ctx.train_cells.count({s.identity, e}) > 0) targets.push_back(e);
    }
    if (targets.empty()) {
      throw SamplingError("identity '" + s.identity + "' has a single trained emotion");
    }
    const Emotion t = targets[rng.index(targets.size())];
    const auto& cell = ctx.train_cells.at({s.identity, t});
    out.push_back({&s, t, cell[rng.index(cell.size())]});
  }
  return out;
}

std::vector<Pair> val_pairs(const DemoContext& ctx) {
  std::vector<Pair> out;
  for (std::size_t i : ctx.manifest.indices(Split::kVal)) {
    const Sample& s = ctx.manifest.samples()[i];
    for (Emotion t : kAllEmotions) {
      if (t == s.emotion || !ctx.has_cell(s.identity, t)) continue;
      out.push_back({&s, t, ctx.all_cells.at({s.identity, t}).front()});
    }
  }
  require(!out.empty(), "supervise_demo: no val pairs");
  return out;
}

}  // namespace

DemoRun run_toy_supervision(const CorpusManifest& manifest,
                            const PeplCheckpoint& ckpt, double lambda,
                            const EncoderSuite& suite,
                            const SupervisionConfig& config) {
  config.validate();
  LambdaConfig{lambda, "toy"}.validate();
  require(ckpt.frozen(), "supervise_demo: checkpoint must be frozen");
  manifest.validate();
  const BaseLossHook base_hook = config.base_loss ? config.base_loss : squared_error_loss();
  const DemoContext ctx(manifest, ckpt, suite);

  Rng init_rng(mix_seed(config.seed, "toy-init"));
  Rng batch_rng(mix_seed(config.seed, "toy-batches"));
  const int d = suite.embed_dim();
  const std::vector<int> dims{d + kNumEmotions, config.hidden, d};
  ToyGenerator gen{make_mlp(dims, init_rng), config.residual};
  if (config.residual) {
    // Start near the identity map so early steps refine the source.
    auto& last = gen.params.mutable_layer(gen.params.num_layers() - 1);
    last.weights *= 0.1;
  }

  for (int step = 0; step < config.steps; ++step) {
    const auto batch = sample_pairs(ctx, config.batch_size, batch_rng);
    const auto n = static_cast<long>(batch.size());
    std::vector<PairResult> per(batch.size());
    std::exception_ptr failure;
#pragma omp parallel for schedule(static)
    for (long i = 0; i < n; ++i) {
      try {
        per[i] = pair_forward(ctx, gen, batch[i], lambda, config, base_hook, true);
      } catch (...) {
#pragma omp critical(emosup_toy_failure)
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) {
      try {
        std::rethrow_exception(failure);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
      }
    }
    MlpGrads sum = MlpGrads::zeros_like(gen.params);
    for (const auto& r : per) sum.add_scaled(r.grads, 1.0 / static_cast<double>(n));
    gen.params = sgd_step(gen.params, sum, config.lr);
  }

  DemoRun run;
  run.lambda = lambda;
  run.seed = config.seed;
  run.generator_hash = hash_doubles(gen.params.flatten());
  const auto pairs = val_pairs(ctx);
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    SupervisionConfig eval_cfg = config;
    eval_cfg.vtedc_enabled = true;
    const PairResult r = pair_forward(ctx, gen, p, lambda, eval_cfg, base_hook, false);
    run.base_loss += r.base;
    run.l2_loss += r.l2;
    const Vector out = gen.generate(ctx.visual.at(p.source->image_ref), p.target);
    const auto& cent = ctx.centroids.at(p.source->identity);
    int best = -1;
    double best_sim = -2.0;
    for (Emotion e : kAllEmotions) {
      if (!ctx.has_cell(p.source->identity, e)) continue;
      const double s = cosine_similarity(out, cent[code(e)]).value;
      if (s > best_sim) {
        best_sim = s;
        best = code(e);
      }
    }
    if (best == code(p.target)) ++correct;
  }
  const double n = static_cast<double>(pairs.size());
  run.base_loss /= n;
  run.l2_loss /= n;
  run.emotion_accuracy = static_cast<double>(correct) / n;
  return run;
}

DemoReport supervise_demo(const CorpusManifest& manifest,
                          const PeplCheckpoint& ckpt, const LambdaConfig& lambda,
                          const EncoderSuite& suite,
                          const SupervisionConfig& config) {
  lambda.validate();
  DemoReport r;
  r.baseline_tag = lambda.baseline_tag;
  r.baseline = run_toy_supervision(manifest, ckpt, 0.0, suite, config);
  r.supervised = run_toy_supervision(manifest, ckpt, lambda.value, suite, config);
  return r;
}

std::vector<DemoRun> sweep_lambda(const CorpusManifest& manifest,
                                  const PeplCheckpoint& ckpt,
                                  const std::vector<double>& grid,
                                  const EncoderSuite& suite,
                                  const SupervisionConfig& config) {
  require(!grid.empty(), "sweep_lambda: empty grid");
  for (double l : grid) LambdaConfig{l, "toy"}.validate();
  std::vector<DemoRun> out;
  for (double l : grid) out.push_back(run_toy_supervision(manifest, ckpt, l, suite, config));
  return out;
}

std::string demo_runs_to_csv(const std::vector<DemoRun>& runs) {
  std::string out = "lambda,base_loss,l2_loss,emotion_accuracy,seed\n";
  char buf[160];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%llu\n", r.lambda,
                  r.base_loss, r.l2_loss, r.emotion_accuracy,
                  static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

json to_json(const DemoRun& r) {
  return {{"lambda", r.lambda},
          {"base_loss", r.base_loss},
          {"l2_loss", r.l2_loss},
          {"emotion_accuracy", r.emotion_accuracy},
          {"seed", r.seed},
          {"generator_hash", r.generator_hash}};
}

json to_json(const DemoReport& r) {
  return {{"baseline_tag", r.baseline_tag},
          {"baseline", to_json(r.baseline)},
          {"supervised", to_json(r.supervised)}};
}

}  // namespace emosup
