#include <doctest.h>

#include <filesystem>

#include "emosup/analysis.hpp"
#include "emosup/errors.hpp"
#include "emosup/pepl.hpp"
#include "oracles.hpp"
#include "worlds.hpp"

using namespace emosup;

namespace {

Vector flat_grads(const MlpGrads& g) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    for (Eigen::Index r = 0; r < g.weights[i].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weights[i].cols(); ++c) out.push_back(g.weights[i](r, c));
    for (Eigen::Index r = 0; r < g.bias[i].size(); ++r) out.push_back(g.bias[i](r));
  }
  return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Vector as_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

// Loss of one contrastive entry assembled from the public forward ops.
double l1_forward(const PeplCheckpoint& c, const ContrastiveEntry& e, const EncoderSuite& s) {
  const auto tokens = guider_tokens(c.guider(), s.backbone_identity(e.reference.image_ref));
  const Vector tp = personalized_text_embedding(personalize(tokens, e.positive_prompt, s), s);
  const Vector tn = personalized_text_embedding(personalize(tokens, e.negative_prompt, s), s);
  const Vector iv = emotion_visual_embedding(c.projectors(), e.anchor, s);
  return contrastive_loss_l1(tp, tn, iv).value;
}

double l2_forward(const PeplCheckpoint& c, const DifferenceEntry& e, const EncoderSuite& s) {
  const auto tokens = guider_tokens(c.guider(), s.backbone_identity(e.reference.image_ref));
  const Vector ts = personalized_text_embedding(personalize(tokens, e.source.emotion, s), s);
  const Vector tt = personalized_text_embedding(personalize(tokens, e.target.emotion, s), s);
  const Vector is = emotion_visual_embedding(c.projectors(), e.source, s);
  const Vector it = emotion_visual_embedding(c.projectors(), e.target, s);
  return 1.0 - oracle::cosine(is - it, ts - tt);
}

struct Tiny {
  SyntheticSuite suite{build_synthetic_world(worlds::tiny_config())};
  CorpusManifest manifest{generate_synthetic_corpus(suite.world(), 2)};
};

PeplCheckpoint tiny_checkpoint(const EncoderSuite& suite, ProjectorMode mode, std::uint64_t seed) {
  Rng rng(seed);
  PeplCheckpoint c = PeplCheckpoint::random_init(suite, mode, 7, 1, rng);
  // Nonzero biases keep ReLU kinks away from the probes.
  for (std::size_t i = 0; i < c.projectors().num_nets(); ++i) {
    auto flat = c.projectors().net(i).flatten();
    for (auto& v : flat) v += 0.05 * rng.normal();
    c.mutable_projectors().mutable_net(i).assign_flat(flat);
  }
  return c;
}

// With `guider_cancels` the guider gradient is zero analytically and the
// finite-difference one is only rounding noise.
void check_full_path(PeplCheckpoint ckpt, const PeplGradient& g,
                     const std::function<double(const PeplCheckpoint&)>& loss,
                     bool guider_cancels = false) {
  const Vector theta = as_vector(ckpt.guider().head.flatten());
  const Vector num = oracle::numeric_gradient(
      [&](const Vector& th) {
        ckpt.mutable_guider().head.assign_flat(as_span(th));
        return loss(ckpt);
      },
      theta);
  ckpt.mutable_guider().head.assign_flat(as_span(theta));
  if (guider_cancels) {
    CHECK(flat_grads(g.guider).norm() < 1e-12);
    CHECK(num.norm() < 1e-7);
  } else {
    CHECK(oracle::relative_error(flat_grads(g.guider), num, 1e-6) < 1e-4);
  }
  for (const auto& [idx, pg] : g.projectors) {
    const Vector p0 = as_vector(ckpt.projectors().net(idx).flatten());
    const Vector pn = oracle::numeric_gradient(
        [&](const Vector& th) {
          ckpt.mutable_projectors().mutable_net(idx).assign_flat(as_span(th));
          return loss(ckpt);
        },
        p0);
    ckpt.mutable_projectors().mutable_net(idx).assign_flat(as_span(p0));
    // Summed over duplicate entries for the same net.
    Vector ana = Vector::Zero(pn.size());
    for (const auto& [j, q] : g.projectors)
      if (j == idx) ana += flat_grads(q);
    CHECK(oracle::relative_error(ana, pn, 1e-6) < 1e-4);
  }
}

}  // namespace

TEST_CASE("personalized prompts prepend the guider token to the six-word template") {
  Tiny t;
  Rng rng(1);
  const PeplCheckpoint c = PeplCheckpoint::random_init(t.suite, ProjectorMode::kMulti, 8, 1, rng);
  const Sample& ref = t.manifest.at("id0_neutral_0");
  const TokenSequence seq = build_personalized_prompt(c.guider(), ref, Emotion::kHappy, t.suite);
  CHECK(seq.length() == 7);
  const TokenSequence plain = t.suite.tokenize(emotion_prompt(Emotion::kHappy));
  for (int p = 1; p < 7; ++p) CHECK(seq.tokens[p] == plain.tokens[p - 1]);
  CHECK(seq.tokens[0] == guider_tokens(c.guider(), t.suite.backbone_identity(ref.image_ref))[0]);
  CHECK_THROWS_AS(build_personalized_prompt(c.guider(), t.manifest.at("id0_happy_0"),
                                            Emotion::kHappy, t.suite),
                  ContractError);

  Rng rng2(1);
  const PeplCheckpoint c3 = PeplCheckpoint::random_init(t.suite, ProjectorMode::kMulti, 8, 3, rng2);
  CHECK(build_personalized_prompt(c3.guider(), ref, Emotion::kSad, t.suite).length() == 9);
}

TEST_CASE("contrastive loss takes its extreme and midpoint values") {
  const Vector i = Vector::Unit(3, 0);
  const Vector j = Vector::Unit(3, 1);
  CHECK(contrastive_loss_l1(i, -i, i).value == doctest::Approx(-1.0));
  CHECK(contrastive_loss_l1(-i, i, i).value == doctest::Approx(3.0));
  CHECK(contrastive_loss_l1(j, j, i).value == doctest::Approx(1.0));
  CHECK(contrastive_loss_l1(2.0 * i, j, i).value == doctest::Approx(0.0));
  const L1Loss d = contrastive_loss_l1(Vector::Zero(3), j, i);
  CHECK(d.positive_degenerate);
  CHECK_FALSE(d.negative_degenerate);
  CHECK(d.value == doctest::Approx(1.0));
}

TEST_CASE("contrastive loss gradient matches finite differences") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const Vector a = oracle::random_vector(rng, 6);
    const Vector b = oracle::random_vector(rng, 6);
    const Vector c = oracle::random_vector(rng, 6);
    const L1Gradient g = contrastive_loss_l1_gradient(a, b, c);
    auto f = [&](const Vector& x, int which) {
      return contrastive_loss_l1(which == 0 ? x : a, which == 1 ? x : b, which == 2 ? x : c).value;
    };
    CHECK(oracle::relative_error(g.wrt_t_pos, oracle::numeric_gradient([&](const Vector& x) { return f(x, 0); }, a)) < 1e-6);
    CHECK(oracle::relative_error(g.wrt_t_neg, oracle::numeric_gradient([&](const Vector& x) { return f(x, 1); }, b)) < 1e-6);
    CHECK(oracle::relative_error(g.wrt_i_vis, oracle::numeric_gradient([&](const Vector& x) { return f(x, 2); }, c)) < 1e-6);
  }
}

TEST_CASE("contrastive objective gradients match finite differences through guider and projector") {
  Tiny t;
  for (ProjectorMode mode : {ProjectorMode::kMulti, ProjectorMode::kSingleConditional}) {
    CAPTURE(projector_mode_name(mode));
    const PeplCheckpoint c = tiny_checkpoint(t.suite, mode, 4);
    Rng rng(6);
    const auto batch = sample_contrastive_batch(t.manifest, NegativePoolTable::all_others(), 3, rng);
    for (const auto& e : batch.entries) {
      const PeplGradient g = l1_example_gradient(c, e, t.suite);
      CHECK(g.loss == doctest::Approx(l1_forward(c, e, t.suite)).epsilon(1e-12));
      REQUIRE(g.projectors.size() == 1);
      CHECK(g.projectors[0].first == c.projectors().net_index(e.anchor.emotion));
      check_full_path(c, g, [&](const PeplCheckpoint& k) { return l1_forward(k, e, t.suite); });
    }
  }
}

TEST_CASE("difference objective gradients match finite differences") {
  Tiny t;
  for (ProjectorMode mode : {ProjectorMode::kMulti, ProjectorMode::kSingleConditional}) {
    const PeplCheckpoint c = tiny_checkpoint(t.suite, mode, 8);
    Rng rng(2);
    for (const auto& e : sample_difference_batch(t.manifest, 3, rng)) {
      const PeplGradient g = l2_example_gradient(c, e, t.suite);
      CHECK(g.loss == doctest::Approx(l2_forward(c, e, t.suite)).epsilon(1e-12));
      // Both prompts share the guider token at the same position.
      check_full_path(c, g, [&](const PeplCheckpoint& k) { return l2_forward(k, e, t.suite); }, true);
    }
  }
}

TEST_CASE("an example only moves the projector of its own emotion") {
  Tiny t;
  const PeplCheckpoint c = tiny_checkpoint(t.suite, ProjectorMode::kMulti, 5);
  ContrastiveEntry e{t.manifest.at("id1_sad_0"), Emotion::kSad, Emotion::kHappy,
                     t.manifest.at("id1_neutral_0")};
  ContrastiveBatch b{{e}};
  const BatchGradient g = l1_batch_gradient(c, b, t.suite);
  for (std::size_t i = 0; i < 7; ++i) {
    CAPTURE(i);
    CHECK(g.projectors[i].is_zero() == (i != code(Emotion::kSad)));
  }
}

TEST_CASE("batch gradients are the same in parallel and serial") {
  Tiny t;
  const PeplCheckpoint c = tiny_checkpoint(t.suite, ProjectorMode::kMulti, 5);
  Rng rng(3);
  const auto batch = sample_contrastive_batch(t.manifest, NegativePoolTable::all_others(), 17, rng);
  const BatchGradient p = l1_batch_gradient(c, batch, t.suite, true);
  const BatchGradient s = l1_batch_gradient(c, batch, t.suite, false);
  CHECK(p.mean_loss == s.mean_loss);
  CHECK(flat_grads(p.guider) == flat_grads(s.guider));
  for (std::size_t i = 0; i < 7; ++i) CHECK(flat_grads(p.projectors[i]) == flat_grads(s.projectors[i]));
  double mean = 0.0;
  for (const auto& e : batch.entries) mean += l1_example_gradient(c, e, t.suite).loss / 17.0;
  CHECK(p.mean_loss == doctest::Approx(mean).epsilon(1e-14));
}

TEST_CASE("a frozen checkpoint refuses mutation") {
  Tiny t;
  Rng rng(1);
  PeplCheckpoint c = PeplCheckpoint::random_init(t.suite, ProjectorMode::kMulti, 8, 1, rng);
  c.mutable_guider();
  c.freeze();
  CHECK_THROWS_AS(c.mutable_guider(), ContractError);
  CHECK_THROWS_AS(c.mutable_projectors(), ContractError);
  CHECK_THROWS_AS(c.set_metadata({}), ContractError);
}

TEST_CASE("the learning rate drops tenfold at the start of epochs 2, 4 and 6") {
  const PeplTrainConfig cfg;
  CHECK(learning_rate_at(cfg, 0) == doctest::Approx(0.1));
  CHECK(learning_rate_at(cfg, 1) == doctest::Approx(0.1));
  CHECK(learning_rate_at(cfg, 2) == doctest::Approx(0.01));
  CHECK(learning_rate_at(cfg, 5) == doctest::Approx(0.001));
  CHECK(learning_rate_at(cfg, 6) == doctest::Approx(0.0001));
  CHECK(learning_rate_at(cfg, 9) == doctest::Approx(0.0001));
  PeplTrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  const PeplTrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
}

TEST_CASE("checkpoints round trip through JSON with identical parameter bytes") {
  Tiny t;
  for (ProjectorMode mode : {ProjectorMode::kMulti, ProjectorMode::kSingleConditional}) {
    PeplCheckpoint c = tiny_checkpoint(t.suite, mode, 9);
    c.set_metadata({5, 2, 3, 4, 0.25, "l1"});
    c.freeze();
    const auto dir = std::filesystem::temp_directory_path() / "emosup_test_pepl";
    save_checkpoint(dir / "c.json", c);
    const PeplCheckpoint back = load_checkpoint(dir / "c.json");
    CHECK(back.parameters() == c.parameters());
    CHECK(back.parameter_hash() == c.parameter_hash());
    CHECK(back.frozen());
    CHECK(back.metadata().final_loss == 0.25);
    CHECK(back.projectors().mode() == mode);
    CHECK(to_json(back).dump() == to_json(c).dump());
  }
  nlohmann::json j = to_json(tiny_checkpoint(t.suite, ProjectorMode::kMulti, 9));
  j["format_version"] = 7;
  CHECK_THROWS_AS(checkpoint_from_json(j), LoadError);
}

TEST_CASE("random checkpoints retrieve at chance level") {
  // Accuracy of an untrained checkpoint, averaged over many draws, stays
  // within 4 sigma of 1/7.
  const worlds::DefaultSetup s;
  const auto train = s.manifest.indices(Split::kTrain);
  const int draws = 40;
  double acc = 0.0;
  for (int d = 0; d < draws; ++d) {
    Rng rng(1000 + d);
    PeplCheckpoint c = PeplCheckpoint::random_init(s.suite, ProjectorMode::kMulti, 64, 1, rng);
    c.freeze();
    acc += retrieval_accuracy(c, s.manifest, Split::kTrain, s.suite) / draws;
  }
  const double p = 1.0 / 7.0;
  const double sigma = std::sqrt(p * (1 - p) / (draws * static_cast<double>(train.size())));
  CHECK(std::abs(acc - p) < 4 * sigma);
}

TEST_CASE("retrieval accuracy needs a frozen checkpoint") {
  Tiny t;
  Rng rng(1);
  const PeplCheckpoint c = PeplCheckpoint::random_init(t.suite, ProjectorMode::kMulti, 8, 1, rng);
  CHECK_THROWS_AS(retrieval_accuracy(c, t.manifest, Split::kVal, t.suite), ContractError);
}

TEST_CASE("short training runs are deterministic and reduce the loss") {
  Tiny t;
  PeplTrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 20;
  cfg.batch_size = 8;
  cfg.guider_hidden = 8;
  const auto a = pretrain_pepl(t.manifest, NegativePoolTable::all_others(), t.suite, cfg);
  const auto b = pretrain_pepl(t.manifest, NegativePoolTable::all_others(), t.suite, cfg);
  CHECK(a.checkpoint.frozen());
  CHECK(a.checkpoint.parameter_hash() == b.checkpoint.parameter_hash());
  CHECK(a.curve.to_csv() == b.curve.to_csv());
  CHECK(a.curve.points.size() == 40);
  CHECK(a.curve.to_csv().rfind("epoch,step,loss,lr\n", 0) == 0);
  const auto means = a.curve.epoch_means();
  CHECK(means[1] < means[0]);
  cfg.seed = 2;
  const auto other = pretrain_pepl(t.manifest, NegativePoolTable::all_others(), t.suite, cfg);
  CHECK(other.checkpoint.parameter_hash() != a.checkpoint.parameter_hash());
}

TEST_CASE("a diverging run reports the epoch and step") {
  Tiny t;
  PeplTrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 50;
  cfg.base_lr = 1e300;
  cfg.guider_hidden = 8;
  try {
    pretrain_pepl(t.manifest, NegativePoolTable::all_others(), t.suite, cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("at epoch 0 step") != std::string::npos);
  }
}

TEST_CASE("personalized text embeddings depend on identity") {
  const worlds::DefaultSetup s;
  Rng rng(3);
  const PeplCheckpoint c = PeplCheckpoint::random_init(s.suite, ProjectorMode::kMulti, 64, 1, rng);
  const Vector a = personalized_text_embedding(
      build_personalized_prompt(c.guider(), s.manifest.at("id0_neutral_0"), Emotion::kHappy, s.suite), s.suite);
  const Vector b = personalized_text_embedding(
      build_personalized_prompt(c.guider(), s.manifest.at("id1_neutral_0"), Emotion::kHappy, s.suite), s.suite);
  CHECK((a - b).norm() > 1e-6);
}
