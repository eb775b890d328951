// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emosup/analysis.hpp"
#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"
#include "emosup/metrics.hpp"
#include "emosup/pepl.hpp"
#include "emosup/supervision.hpp"
#include "emosup/vtedc.hpp"
#include "gap_oracle.hpp"
#include "oracles.hpp"
#include "worlds.hpp"

using namespace emosup;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

Vector flat(const MlpGrads& g) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    for (Eigen::Index r = 0; r < g.weights[i].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weights[i].cols(); ++c) out.push_back(g.weights[i](r, c));
    for (Eigen::Index r = 0; r < g.bias[i].size(); ++r) out.push_back(g.bias[i](r));
  }
  return Eigen::Map<Vector>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Vector to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::span<const double> span_of(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

// ---- 1 ----
Outcome gradients() {
  Outcome o;
  Rng rng(101);
  double worst = 0.0;
  for (int arch = 0; arch < 25; ++arch) {
    const int depth = 1 + static_cast<int>(rng.index(4));
    std::vector<int> dims{1 + static_cast<int>(rng.index(8))};
    for (int i = 0; i < depth; ++i) dims.push_back(1 + static_cast<int>(rng.index(10)));
    MlpParams p = make_mlp(dims, rng);
    auto th = p.flatten();
    for (auto& v : th) v += 0.1 * rng.normal();
    p.assign_flat(th);
    const Vector x = oracle::random_vector(rng, p.input_dim());
    const Vector up = oracle::random_vector(rng, p.output_dim());
    MlpCache cache;
    mlp_forward(p, x, &cache);
    const MlpGrads g = mlp_backward(p, cache, up);
    MlpParams probe = p;
    const Vector num = oracle::numeric_gradient(
        [&](const Vector& t) {
          probe.assign_flat(span_of(t));
          return oracle::dot(mlp_forward(probe, x), up);
        },
        to_vec(p.flatten()));
    worst = std::max(worst, oracle::relative_error(flat(g), num));
  }

  // Full contrastive path: guider head and projector.
  const SyntheticSuite suite(build_synthetic_world(worlds::tiny_config()));
  const CorpusManifest m = generate_synthetic_corpus(suite.world(), 2);
  Rng r2(7);
  PeplCheckpoint ckpt = PeplCheckpoint::random_init(suite, ProjectorMode::kMulti, 7, 1, r2);
  const auto batch = sample_contrastive_batch(m, load_paper_pools(), 4, r2);
  auto loss = [&](const PeplCheckpoint& c, const ContrastiveEntry& e) {
    const auto tok = guider_tokens(c.guider(), suite.backbone_identity(e.reference.image_ref));
    return contrastive_loss_l1(suite.text_encode(personalize(tok, e.positive_prompt, suite)),
                               suite.text_encode(personalize(tok, e.negative_prompt, suite)),
                               emotion_visual_embedding(c.projectors(), e.anchor, suite))
        .value;
  };
  for (const auto& e : batch.entries) {
    const PeplGradient g = l1_example_gradient(ckpt, e, suite);
    const Vector g0 = to_vec(ckpt.guider().head.flatten());
    const Vector gn = oracle::numeric_gradient(
        [&](const Vector& t) {
          ckpt.mutable_guider().head.assign_flat(span_of(t));
          return loss(ckpt, e);
        },
        g0);
    ckpt.mutable_guider().head.assign_flat(span_of(g0));
    worst = std::max(worst, oracle::relative_error(flat(g.guider), gn, 1e-6));
    const std::size_t pi = g.projectors.front().first;
    const Vector p0 = to_vec(ckpt.projectors().net(pi).flatten());
    const Vector pn = oracle::numeric_gradient(
        [&](const Vector& t) {
          ckpt.mutable_projectors().mutable_net(pi).assign_flat(span_of(t));
          return loss(ckpt, e);
        },
        p0);
    ckpt.mutable_projectors().mutable_net(pi).assign_flat(span_of(p0));
    worst = std::max(worst, oracle::relative_error(flat(g.projectors.front().second), pn, 1e-6));
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "25 MLPs + 4 full-path examples, worst rel err %.2e", worst);
  o.expect(worst < 1e-4, buf);
  if (o.pass) o.detail = buf;
  return o;
}

// ---- 2 ----
Outcome loss_bounds() {
  Outcome o;
  Rng rng(202);
  int degenerate_seen = 0;
  for (int t = 0; t < 10000; ++t) {
    const int d = 1 + static_cast<int>(rng.index(8));
    Vector a = oracle::random_vector(rng, d);
    Vector b = oracle::random_vector(rng, d);
    Vector c = oracle::random_vector(rng, d);
    if (t % 10 == 0) a.setZero();
    if (t % 15 == 0) c.setZero();
    if (t % 7 == 0) b = -c;
    const L1Loss l1 = contrastive_loss_l1(a, b, c);
    o.expect(l1.value >= -1.0 && l1.value <= 3.0, "L1 out of range");
    DifferencePair dp;
    dp.I_diff = c;
    dp.T_diff = (t % 3 == 0) ? Vector(-c) : b;
    dp.degenerate = dp.I_diff.norm() < kNormEpsilon || dp.T_diff.norm() < kNormEpsilon;
    const L2Loss l2 = vtedc_loss_l2(dp);
    o.expect(l2.value >= 0.0 && l2.value <= 2.0, "L2 out of range");
    if (l2.degenerate) {
      ++degenerate_seen;
      o.expect(l2.value == 1.0, "degenerate L2 != 1");
    }
    if (a.norm() == 0.0) o.expect(l1.positive_degenerate, "zero t_pos not flagged");
  }
  o.expect(degenerate_seen > 0, "no degenerate case exercised");
  if (o.pass) o.detail = "10^4 inputs, " + std::to_string(degenerate_seen) + " degenerate";
  return o;
}

// ---- 3 ----
Outcome offset_cancellation() {
  Outcome o;
  Rng rng(303);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    PairEmbeddings pe;
    pe.I_s_f = oracle::random_vector(rng, 32);
    pe.I_t_f = oracle::random_vector(rng, 32);
    pe.T_s_f = oracle::random_vector(rng, 32);
    pe.T_t_f = oracle::random_vector(rng, 32);
    PairEmbeddings sh = pe;
    const Vector ci = oracle::random_vector(rng, 32, 2.0);
    const Vector ct = oracle::random_vector(rng, 32, 2.0);
    sh.I_s_f += ci;
    sh.I_t_f += ci;
    sh.T_s_f += ct;
    sh.T_t_f += ct;
    worst = std::max(worst, std::abs(vtedc_loss_l2(diff_vectors(sh)).value -
                                     vtedc_loss_l2(diff_vectors(pe)).value));
  }
  o.expect(worst < 1e-12, "max |delta| " + std::to_string(worst));
  if (o.pass) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "10^3 pairs, max |delta| %.2e", worst);
    o.detail = buf;
  }
  return o;
}

// ---- 4 ----
Outcome identity_cancellation() {
  Outcome o;
  SyntheticWorldConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.n_identities = 6;
  const SyntheticWorldSpec w = build_synthetic_world(cfg);
  const SyntheticSuite suite(w);
  const CorpusManifest m = generate_synthetic_corpus(w, 1);
  Rng rng(4);
  const PeplCheckpoint init = PeplCheckpoint::random_init(suite, ProjectorMode::kMulti, 16, 1, rng);
  PeplCheckpoint ckpt(init.guider(),
                      EmotionProjectorBank::identity(ProjectorMode::kMulti, cfg.d_e, Activation::kIdentity),
                      cfg.d_e, cfg.d_b, cfg.d_tok);
  ckpt.freeze();
  std::map<std::pair<Emotion, Emotion>, Vector> first;
  double worst = 0.0;
  for (const DiffRow& r : collect_diffs(ckpt, m, suite)) {
    const auto key = std::make_pair(r.source_emotion, r.target_emotion);
    const auto it = first.find(key);
    if (it == first.end()) {
      first.emplace(key, r.I_diff);
    } else {
      worst = std::max(worst, (r.I_diff - it->second).cwiseAbs().maxCoeff());
    }
  }
  o.expect(first.size() == 42, "expected 42 emotion pairs");
  o.expect(worst < 1e-9, "max spread " + std::to_string(worst));
  if (o.pass) {
    char buf[80];
    std::snprintf(buf, sizeof buf, "6 identities x 42 pairs, max spread %.2e", worst);
    o.detail = buf;
  }
  return o;
}

// ---- 5 ----
Outcome fad_oracle() {
  Outcome o;
  const GaussianFit a{Vector::Zero(1), Matrix::Identity(1, 1)};
  const GaussianFit b{Vector::Constant(1, 3.0), Matrix::Identity(1, 1) * 4.0};
  const double one_d = fad(a, b);
  o.expect(std::abs(one_d - 10.0) < 1e-6, "1-D value " + std::to_string(one_d));
  Vector shift(4);
  shift << 1.0, -1.0, 2.0, 0.5;
  Rng rng(505);
  Matrix x(4, 9);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 9; ++j) x(i, j) = rng.normal();
  const Matrix s = x * x.transpose() / 9.0;
  const double shifted = fad(GaussianFit{Vector::Zero(4), s}, GaussianFit{shift, s});
  o.expect(std::abs(shifted - shift.squaredNorm()) < 1e-6, "shift case " + std::to_string(shifted));
  FeatureSet fa, fb;
  for (int i = 0; i < 60; ++i) {
    fa.vectors.push_back(oracle::random_vector(rng, 5));
    fb.vectors.push_back(oracle::random_vector(rng, 5) + Vector::Constant(5, 0.4));
  }
  const GaussianFit ga = fit_gaussian(fa), gb = fit_gaussian(fb);
  const double general = fad(fa, fb);
  o.expect(std::abs(general - oracle::frechet(ga.mean, ga.covariance, gb.mean, gb.covariance)) < 1e-6,
           "general case disagrees with oracle");
  const double self = fad(fa, fa);
  o.expect(std::abs(self) < 1e-9, "fad(A,A) " + std::to_string(self));
  if (o.pass) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "1-D %.12g, shift %.12g (want %.12g), self %.1e", one_d,
                  shifted, shift.squaredNorm(), self);
    o.detail = buf;
  }
  return o;
}

// ---- 6 ----
Outcome pools() {
  Outcome o;
  const PoolComparison c =
      compare_pools(derive_negative_pools(reference_similarity_matrix(), 1), load_paper_pools());
  const std::vector<Emotion> want_match{Emotion::kAngry, Emotion::kDisgusted, Emotion::kFear,
                                        Emotion::kHappy, Emotion::kSad};
  const std::vector<Emotion> want_disc{Emotion::kNeutral, Emotion::kSurprised};
  o.expect(c.matching == want_match, "matching set differs");
  o.expect(c.discrepant == want_disc, "discrepant set differs");
  if (o.pass) o.detail = "5 matching, discrepant {neutral, surprised}";
  return o;
}

// ---- 7 ----
Outcome gap_report() {
  Outcome o;
  const GapReport ref = reference_gap_table();
  const GapRow& angry = ref.rows[code(Emotion::kAngry)];
  o.expect(angry.s_image == 0.821 && angry.s_match == 0.452 && angry.gap == 0.369, "angry row");
  o.expect(ref.average.s_image == 0.856 && ref.average.s_match == 0.512 && ref.average.gap == 0.344,
           "average row");
  for (const auto& r : ref.rows) {
    o.expect(std::abs(r.gap - (r.s_image - r.s_match)) < 1e-9, "row gap != s_image - s_match");
  }
  o.expect(ref.consistent(5e-4), "averages disagree with row means beyond rounding");
  const fs::path fixture = fs::path(EMOSUP_SOURCE_DIR) / "data" / "fixtures" / "modality_gap.csv";
  const GapReport file = gap_report_from_csv(read_text_file(fixture));
  o.expect(gap_report_to_csv(file) == gap_report_to_csv(ref), "fixture file differs from built-in");

  SyntheticWorldConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.n_identities = 1429;
  const SyntheticWorldSpec w = build_synthetic_world(cfg);
  const SyntheticSuite suite(w);
  const CorpusManifest m = generate_synthetic_corpus(w, 1);
  const TextByEmotion text = plain_text_embeddings(suite);
  const GapReport measured = modality_gap_report(collect_features(m, suite), text);
  const oracle::GapExpectation want = oracle::expected_gap(w, text, cfg.n_identities);
  const double z = (measured.average.gap - want.average_gap) / want.sigma;
  o.expect(std::abs(z) < 3.0, "synthetic gap off by " + std::to_string(z) + " sigma");
  char buf[128];
  std::snprintf(buf, sizeof buf, "fixture consistent; synthetic gap %.5f vs %.5f (%.2f sigma, n=%zu)",
                measured.average.gap, want.average_gap, z, m.size());
  if (o.pass) o.detail = buf;
  return o;
}

// ---- 8, 9, 11 share one trained checkpoint ----
struct Trained {
  worlds::DefaultSetup setup;
  PeplTrainResult result;
  double seconds = 0.0;
};

Trained& trained() {
  static Trained t = [] {
    Trained x;
    const auto t0 = std::chrono::steady_clock::now();
    x.result = pretrain_pepl(x.setup.manifest, load_paper_pools(), x.setup.suite, PeplTrainConfig{});
    x.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return x;
  }();
  return t;
}

Outcome convergence() {
  Outcome o;
  Trained& t = trained();
  const auto means = t.result.curve.epoch_means();
  const double acc = retrieval_accuracy(t.result.checkpoint, t.setup.manifest, Split::kVal, t.setup.suite);
  o.expect(means.size() == 10, "expected 10 epochs");
  o.expect(means.back() < 0.1 * means.front(), "final mean not below 0.1 x epoch-0 mean");
  o.expect(acc > 0.95, "val retrieval " + std::to_string(acc));
  o.expect(t.seconds < 120.0, "training took " + std::to_string(t.seconds) + " s");
  o.expect(std::abs(means.front() - 0.9487795199261653) < 1e-9 &&
               std::abs(means.back() - -0.12742825533949914) < 1e-9,
           "curve differs from the pinned run");
  char buf[128];
  std::snprintf(buf, sizeof buf, "epoch-0 %.4f, final %.4f, val retrieval %.3f, %.1f s",
                means.front(), means.back(), acc, t.seconds);
  if (o.pass) o.detail = buf;
  return o;
}

std::string frozen_before;
std::vector<double> frozen_bytes;

Outcome supervision_effect() {
  Outcome o;
  Trained& t = trained();
  frozen_before = t.result.checkpoint.parameter_hash();
  frozen_bytes = t.result.checkpoint.parameters();
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    SupervisionConfig cfg;
    cfg.seed = seed;
    const DemoReport r = supervise_demo(t.setup.manifest, t.result.checkpoint,
                                        default_lambda("toy"), t.setup.suite, cfg);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%sseed %llu: %.3f -> %.3f", detail.empty() ? "" : ", ",
                  static_cast<unsigned long long>(seed), r.baseline.emotion_accuracy,
                  r.supervised.emotion_accuracy);
    detail += buf;
    o.expect(r.supervised.emotion_accuracy > r.baseline.emotion_accuracy,
             "seed " + std::to_string(seed) + " not strictly better");
  }
  o.detail = o.pass ? detail : o.detail + " (" + detail + ")";
  return o;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(EMOSUP_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = git_blob_hash_file(e.path());
  }
  return out;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "emosup_acceptance";
  fs::remove_all(root);
  const std::string corpus = (root / "corpus").string();
  const std::string manifest = corpus + "/manifest.json";
  const std::string features = corpus + "/features.json";
  const std::string ckpt = (root / "pepl_pretrain-pepl").string() + "/checkpoint.json";
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-corpus", ""},
      {"pretrain-pepl", "--manifest " + manifest},
      {"pretrain-vtedc-ablation", "--manifest " + manifest + " --epochs 3"},
      {"analyze-gap", "--manifest " + manifest},
      {"derive-pools", "--k 1"},
      {"eval-metrics", "--real " + features + " --gen " + features},
      {"supervise-demo", "--manifest " + manifest + " --checkpoint " + ckpt},
      {"sweep-lambda", "--manifest " + manifest + " --checkpoint " + ckpt + " --grid 0,0.05,0.2,0.4"},
      {"export-diffs", "--manifest " + manifest + " --checkpoint " + ckpt + " --non-corresponding"},
  };
  int files = 0;
  for (const auto& [name, args] : commands) {
    const fs::path out = name == "gen-corpus" ? root / "corpus" : root / ("pepl_" + name);
    const std::string line = name + " --out " + out.string() + " " + args;
    if (cli(line) != 0) {
      o.expect(false, name + " failed");
      continue;
    }
    const auto first = snapshot(out);
    const fs::path again = root / ("again_" + name);
    fs::rename(out, again);
    if (cli(line) != 0) {
      o.expect(false, name + " failed on rerun");
      fs::rename(again, out);
      continue;
    }
    o.expect(snapshot(out) == first, name + " outputs differ");
    files += static_cast<int>(first.size());
  }
  if (o.pass) o.detail = "9 commands rerun, " + std::to_string(files) + " files byte-identical";
  return o;
}

Outcome frozen_contract() {
  Outcome o;
  const Trained& t = trained();
  o.expect(!frozen_bytes.empty(), "supervision check did not run");
  o.expect(t.result.checkpoint.parameter_hash() == frozen_before, "parameter hash changed");
  o.expect(t.result.checkpoint.parameters() == frozen_bytes, "parameter bytes changed");
  // The CLI path: the checkpoint file is byte-identical after supervise-demo.
  const fs::path root = fs::temp_directory_path() / "emosup_acceptance";
  const fs::path ckpt = root / "pepl_pretrain-pepl" / "checkpoint.json";
  if (fs::exists(ckpt)) {
    const std::string before = git_blob_hash_file(ckpt);
    o.expect(cli("supervise-demo --out " + (root / "frozen").string() + " --manifest " +
                 (root / "corpus" / "manifest.json").string() + " --checkpoint " + ckpt.string() +
                 " --lambda 0.4") == 0,
             "supervise-demo failed");
    o.expect(git_blob_hash_file(ckpt) == before, "checkpoint file changed");
  }
  PeplCheckpoint copy = t.result.checkpoint;
  bool refused = false;
  try {
    copy.mutable_guider();
  } catch (const ContractError&) {
    refused = true;
  }
  o.expect(refused, "frozen checkpoint accepted mutation");
  if (o.pass) o.detail = "hash " + frozen_before + " unchanged after 6 runs + CLI demo";
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"loss bounds", loss_bounds},
      {"offset cancellation", offset_cancellation},
      {"identity cancellation", identity_cancellation},
      {"FAD oracle", fad_oracle},
      {"negative-pool reproduction", pools},
      {"gap report", gap_report},
      {"pre-training convergence", convergence},
      {"supervision effect", supervision_effect},
      {"determinism", determinism},
      {"frozen-module contract", frozen_contract},
  };
  const std::map<int, double> budget{{1, 30.0}, {2, 5.0}, {5, 5.0}, {8, 120.0}, {9, 180.0}};
  int failed = 0;
  int index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (const auto it = budget.find(index); it != budget.end() && secs > it->second) {
      o.expect(false, "over the " + std::to_string(static_cast<int>(it->second)) + " s budget");
    }
    if (!o.pass) ++failed;
    std::printf("%-4s %2d %-28s %6.2fs  %s\n", o.pass ? "PASS" : "FAIL", index, name.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
