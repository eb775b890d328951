#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "emosup/analysis.hpp"
#include "emosup/errors.hpp"
#include "emosup/feature_io.hpp"
#include "emosup/hashing.hpp"
#include "gap_oracle.hpp"
#include "oracles.hpp"

using namespace emosup;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = fs::path(EMOSUP_SOURCE_DIR) / "data" / "fixtures";

FeaturesByEmotion random_features(Rng& rng, int per, int d) {
  FeaturesByEmotion f;
  for (auto& v : f)
    for (int i = 0; i < per; ++i) v.push_back(oracle::random_vector(rng, d));
  return f;
}

TextByEmotion random_text(Rng& rng, int d) {
  TextByEmotion t;
  for (auto& v : t) v = oracle::random_vector(rng, d);
  return t;
}

std::vector<Emotion> emotions(std::initializer_list<Emotion> es) { return es; }

}  // namespace

TEST_CASE("identical images equal to their text give a zero gap") {
  TextByEmotion text;
  FeaturesByEmotion f;
  for (int k = 0; k < kNumEmotions; ++k) {
    text[k] = Vector::Unit(kNumEmotions, k);
    f[k] = {text[k], text[k], text[k]};
  }
  const GapReport r = modality_gap_report(f, text);
  for (const auto& row : r.rows) {
    CHECK(row.s_image == doctest::Approx(1.0));
    CHECK(row.s_match == doctest::Approx(1.0));
    CHECK(row.gap == doctest::Approx(0.0));
  }
  CHECK(r.consistent());
  const CrossModalSimilarityMatrix m = cross_modal_matrix(f, text);
  CHECK((m.values - Matrix::Identity(7, 7)).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(m.n_per_cell[3] == 3);
}

TEST_CASE("report and matrix agree with brute-force loops") {
  Rng rng(2);
  const FeaturesByEmotion f = random_features(rng, 9, 5);
  const TextByEmotion t = random_text(rng, 5);
  const GapReport r = modality_gap_report(f, t);
  const CrossModalSimilarityMatrix m = cross_modal_matrix(f, t);
  CHECK(r.consistent());
  for (int k = 0; k < kNumEmotions; ++k) {
    double pairs = 0.0;
    int np = 0;
    for (int i = 0; i < 9; ++i)
      for (int j = i + 1; j < 9; ++j, ++np) pairs += oracle::cosine(f[k][i], f[k][j]);
    CHECK(r.rows[k].s_image == doctest::Approx(pairs / np).epsilon(1e-12));
    for (int c = 0; c < kNumEmotions; ++c) {
      double s = 0.0;
      for (const auto& x : f[k]) s += oracle::cosine(x, t[c]);
      CHECK(m.values(k, c) == doctest::Approx(s / 9).epsilon(1e-12));
    }
    CHECK(r.rows[k].s_match == doctest::Approx(m.values(k, k)).epsilon(1e-12));
  }
  FeaturesByEmotion thin = f;
  thin[4].resize(1);
  CHECK_THROWS_AS(modality_gap_report(thin, t), ContractError);
  CHECK_THROWS_AS(cross_modal_matrix(thin, t), ContractError);
}

TEST_CASE("derived pools drop exactly the k most similar other emotions") {
  Rng rng(3);
  const CrossModalSimilarityMatrix m =
      cross_modal_matrix(random_features(rng, 4, 6), random_text(rng, 6));
  for (int k = 0; k <= 5; ++k) {
    const NegativePoolTable t = derive_negative_pools(m, k);
    for (int i = 0; i < kNumEmotions; ++i) {
      const auto& pool = t.pools[i];
      CHECK(pool.size() == static_cast<std::size_t>(6 - k));
      // Every excluded other emotion is at least as similar as every kept one.
      for (int j = 0; j < kNumEmotions; ++j) {
        if (j == i || t.contains(emotion_from_code(i), emotion_from_code(j))) continue;
        for (Emotion kept : pool) CHECK(m.values(i, j) >= m.values(i, code(kept)));
      }
    }
  }
  CHECK(derive_negative_pools(m, 0) == NegativePoolTable::all_others());
  CHECK_THROWS_AS(derive_negative_pools(m, 6), ContractError);
  CHECK_THROWS_AS(derive_negative_pools(m, -1), ContractError);
}

TEST_CASE("pool derivation breaks ties toward the lower code") {
  CrossModalSimilarityMatrix m;
  m.values.setConstant(0.5);
  const NegativePoolTable t = derive_negative_pools(m, 1);
  CHECK(t.pool(Emotion::kNeutral).front() == Emotion::kDisgusted);  // angry dropped
  CHECK(t.pool(Emotion::kAngry).front() == Emotion::kDisgusted);    // neutral dropped
}

TEST_CASE("top-1 exclusion on the reference matrix reproduces five reference pools") {
  const NegativePoolTable derived = derive_negative_pools(reference_similarity_matrix(), 1);
  const PoolComparison c = compare_pools(derived, load_paper_pools());
  CHECK(c.matching == emotions({Emotion::kAngry, Emotion::kDisgusted, Emotion::kFear,
                                Emotion::kHappy, Emotion::kSad}));
  CHECK(c.discrepant == emotions({Emotion::kNeutral, Emotion::kSurprised}));
  CHECK_FALSE(derived.contains(Emotion::kAngry, Emotion::kDisgusted));
  CHECK_FALSE(derived.contains(Emotion::kNeutral, Emotion::kHappy));
  CHECK_FALSE(derived.contains(Emotion::kSurprised, Emotion::kFear));
  const auto j = to_json(c);
  CHECK(j["discrepant"] == nlohmann::json::array({"neutral", "surprised"}));
}

TEST_CASE("built-in reference tables equal the shipped fixture files") {
  const std::string gap_csv = read_text_file(kFixtures / "modality_gap.csv");
  const std::string mat_csv = read_text_file(kFixtures / "similarity_matrix.csv");
  const GapReport g = gap_report_from_csv(gap_csv);
  const GapReport ref = reference_gap_table();
  for (int k = 0; k < kNumEmotions; ++k) {
    CHECK(g.rows[k].s_image == ref.rows[k].s_image);
    CHECK(g.rows[k].s_match == ref.rows[k].s_match);
    CHECK(g.rows[k].gap == ref.rows[k].gap);
  }
  CHECK(g.average.gap == ref.average.gap);
  CHECK(ref.rows[code(Emotion::kAngry)].s_image == 0.821);
  CHECK(ref.rows[code(Emotion::kAngry)].s_match == 0.452);
  CHECK(ref.rows[code(Emotion::kAngry)].gap == 0.369);
  CHECK(ref.average.s_image == 0.856);
  CHECK(ref.average.s_match == 0.512);
  CHECK(ref.average.gap == 0.344);
  // Printed to three decimals: rows subtract exactly, averages within rounding.
  CHECK(ref.consistent(5e-4));
  CHECK_FALSE(ref.consistent(1e-12));
  CHECK(matrix_from_csv(mat_csv).values == reference_similarity_matrix().values);
  CHECK(reference_similarity_matrix().values(code(Emotion::kNeutral), code(Emotion::kHappy)) == 0.349);
  const auto pools = pools_from_json(nlohmann::json::parse(read_text_file(kFixtures / "negative_pools.json")));
  CHECK(pools == load_paper_pools());
  CHECK(load_paper_pools().pool(Emotion::kHappy) ==
        emotions({Emotion::kAngry, Emotion::kDisgusted, Emotion::kFear, Emotion::kSad, Emotion::kSurprised}));
  CHECK(load_paper_pools().pool(Emotion::kNeutral).size() == 6);
}

TEST_CASE("fixture files match their recorded checksums") {
  const std::string sums = read_text_file(kFixtures / "CHECKSUMS");
  std::istringstream in(sums);
  std::string hash, name;
  int n = 0;
  while (in >> hash >> name) {
    CAPTURE(name);
    CHECK(git_blob_hash_file(kFixtures / name) == hash);
    ++n;
  }
  CHECK(n == 3);
}

TEST_CASE("CSV writers and readers round trip") {
  Rng rng(4);
  const FeaturesByEmotion f = random_features(rng, 3, 4);
  const TextByEmotion t = random_text(rng, 4);
  const GapReport r = modality_gap_report(f, t);
  const GapReport back = gap_report_from_csv(gap_report_to_csv(r));
  for (int k = 0; k < kNumEmotions; ++k) CHECK(back.rows[k].gap == r.rows[k].gap);
  const CrossModalSimilarityMatrix m = cross_modal_matrix(f, t);
  CHECK(matrix_from_csv(matrix_to_csv(m)).values == m.values);
  CHECK_THROWS_AS(gap_report_from_csv("emotion,a,b,c\nangry,1,2\n"), LoadError);
  CHECK_THROWS_AS(matrix_from_csv("x,y\n"), LoadError);
  CHECK_THROWS_AS(gap_report_from_csv("emotion,a,b,c\nangry,1,2,zz\n"), LoadError);
}

TEST_CASE("measured gap of a noise-free synthetic world matches its analytic expectation") {
  SyntheticWorldConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.n_identities = 1429;  // ~10^4 images at one per cell
  const SyntheticWorldSpec w = build_synthetic_world(cfg);
  const SyntheticSuite suite(w);
  const CorpusManifest m = generate_synthetic_corpus(w, 1);
  const TextByEmotion text = plain_text_embeddings(suite);
  const GapReport r = modality_gap_report(collect_features(m, suite), text);
  const oracle::GapExpectation want = oracle::expected_gap(w, text, cfg.n_identities);
  CAPTURE(r.average.gap);
  CAPTURE(want.average_gap);
  CAPTURE(want.sigma);
  CHECK(std::abs(r.average.gap - want.average_gap) < 3.0 * want.sigma);
  CHECK(want.average_gap > 0.0);
  for (int k = 0; k < kNumEmotions; ++k) {
    CHECK(std::abs(r.rows[k].s_image - want.s_image[k]) < 0.01);
    CHECK(std::abs(r.rows[k].s_match - want.s_match[k]) < 0.02);
  }
}
