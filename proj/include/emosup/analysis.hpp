#pragma once

#include <array>
#include <string>
#include <vector>

#include "emosup/corpus.hpp"
#include "emosup/emotion.hpp"
#include "emosup/encoders.hpp"
#include "emosup/numerics.hpp"
#include "json.hpp"

namespace emosup {

// Indexed by emotion code.
using FeaturesByEmotion = std::array<std::vector<Vector>, kNumEmotions>;
using TextByEmotion = std::array<Vector, kNumEmotions>;

struct GapRow {
  double s_image = 0.0;
  double s_match = 0.0;
  double gap = 0.0;
};

struct GapReport {
  std::array<GapRow, kNumEmotions> rows;  // by emotion code
  GapRow average;

  // gap == s_image - s_match for every row, averages equal the row means,
  // both within `tol`.
  bool consistent(double tol = 1e-12) const;
};

// S_image(k): mean cosine over distinct image pairs of emotion k.
// S_match(k): mean cosine between emotion-k images and the emotion-k text.
GapReport modality_gap_report(const FeaturesByEmotion& features,
                              const TextByEmotion& text);

struct CrossModalSimilarityMatrix {
  Matrix values = Matrix::Zero(kNumEmotions, kNumEmotions);  // image x text
  std::array<std::size_t, kNumEmotions> n_per_cell{};
};

CrossModalSimilarityMatrix cross_modal_matrix(const FeaturesByEmotion& features,
                                              const TextByEmotion& text);

// For each image emotion, every other emotion except the k most similar
// off-diagonal cells of its row (ties go to the lower code).
NegativePoolTable derive_negative_pools(const CrossModalSimilarityMatrix& m, int k);

// Built-in reference tables (three-decimal values as printed).
GapReport reference_gap_table();
CrossModalSimilarityMatrix reference_similarity_matrix();
NegativePoolTable load_paper_pools();

struct PoolComparison {
  std::vector<Emotion> matching;
  std::vector<Emotion> discrepant;
};

PoolComparison compare_pools(const NegativePoolTable& derived,
                             const NegativePoolTable& reference);

// Visual features grouped by the samples' emotion, and plain-prompt text
// embeddings, from an encoder suite.
FeaturesByEmotion collect_features(const CorpusManifest& manifest,
                                   const EncoderSuite& suite);
TextByEmotion plain_text_embeddings(const EncoderSuite& suite);

// CSV with a header row and one labelled row per emotion, in code order.
std::string gap_report_to_csv(const GapReport& r);
std::string matrix_to_csv(const CrossModalSimilarityMatrix& m);
nlohmann::json to_json(const GapReport& r);
nlohmann::json to_json(const CrossModalSimilarityMatrix& m);
nlohmann::json to_json(const PoolComparison& c);

GapReport gap_report_from_csv(const std::string& csv);
CrossModalSimilarityMatrix matrix_from_csv(const std::string& csv);

}  // namespace emosup
