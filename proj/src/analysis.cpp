#include "emosup/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "emosup/errors.hpp"
#include "emosup/kernels.hpp"

namespace emosup {
using nlohmann::json;

namespace {

void check_inputs(const FeaturesByEmotion& features, const TextByEmotion& text) {
  const Eigen::Index d = text[0].size();
  require(d > 0, "analysis: empty text embedding");
  for (Emotion e : kAllEmotions) {
    const auto& fs = features[code(e)];
    require(fs.size() >= 2, "analysis: emotion '" + std::string(emotion_name(e)) +
                                "' has fewer than 2 image features");
    require(text[code(e)].size() == d, "analysis: text embedding dims differ");
    for (const auto& v : fs) require(v.size() == d, "analysis: feature dim mismatch");
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double parse_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw LoadError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw LoadError("bad number '" + s + "'");
  }
}

// Rows keyed by emotion name; returns the numeric cells of each, in code
// order, plus the average row if present.
std::vector<std::vector<double>> read_labelled_rows(const std::string& csv,
                                                   std::size_t cells,
                                                   std::vector<double>* average) {
  std::stringstream ss(csv);
  std::string line;
  std::vector<std::vector<double>> rows(kNumEmotions);
  std::vector<bool> seen(kNumEmotions, false);
  bool header = true;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto parts = split_csv_line(line);
    if (parts.size() != cells + 1) throw LoadError("csv: wrong cell count in '" + line + "'");
    std::vector<double> vals;
    for (std::size_t i = 1; i < parts.size(); ++i) vals.push_back(parse_double(parts[i]));
    if (parts[0] == "average") {
      if (average != nullptr) *average = vals;
      continue;
    }
    const auto e = parse_emotion(parts[0]);
    if (!e) throw LoadError("csv: unknown row label '" + parts[0] + "'");
    rows[code(*e)] = std::move(vals);
    seen[code(*e)] = true;
  }
  for (Emotion e : kAllEmotions) {
    if (!seen[code(e)]) throw LoadError("csv: missing row '" + std::string(emotion_name(e)) + "'");
  }
  return rows;
}

}  // namespace

bool GapReport::consistent(double tol) const {
  GapRow mean;
  for (const auto& r : rows) {
    if (std::abs(r.gap - (r.s_image - r.s_match)) > tol) return false;
    mean.s_image += r.s_image / kNumEmotions;
    mean.s_match += r.s_match / kNumEmotions;
    mean.gap += r.gap / kNumEmotions;
  }
  return std::abs(mean.s_image - average.s_image) <= tol &&
         std::abs(mean.s_match - average.s_match) <= tol &&
         std::abs(mean.gap - average.gap) <= tol &&
         std::abs(average.gap - (average.s_image - average.s_match)) <= tol;
}

GapReport modality_gap_report(const FeaturesByEmotion& features,
                              const TextByEmotion& text) {
  check_inputs(features, text);
  GapReport r;
  double si = 0.0;
  double sm = 0.0;
  for (Emotion e : kAllEmotions) {
    const int k = code(e);
    GapRow& row = r.rows[k];
    row.s_image = kernels::mean_pairwise_cosine(features[k]);
    const std::array<Vector, 1> target{text[k]};
    row.s_match = kernels::mean_cosine_to_targets(features[k], target)(0);
    row.gap = row.s_image - row.s_match;
    si += row.s_image;
    sm += row.s_match;
  }
  r.average.s_image = si / kNumEmotions;
  r.average.s_match = sm / kNumEmotions;
  r.average.gap = r.average.s_image - r.average.s_match;
  return r;
}

CrossModalSimilarityMatrix cross_modal_matrix(const FeaturesByEmotion& features,
                                              const TextByEmotion& text) {
  check_inputs(features, text);
  CrossModalSimilarityMatrix m;
  for (Emotion e : kAllEmotions) {
    const int i = code(e);
    m.values.row(i) = kernels::mean_cosine_to_targets(features[i], text).transpose();
    m.n_per_cell[i] = features[i].size();
  }
  return m;
}

NegativePoolTable derive_negative_pools(const CrossModalSimilarityMatrix& m, int k) {
  require(k >= 0 && k <= kNumEmotions - 2,
          "derive_negative_pools: k must be in [0, 5], got " + std::to_string(k));
  NegativePoolTable t;
  for (int i = 0; i < kNumEmotions; ++i) {
    std::vector<int> others;
    for (int j = 0; j < kNumEmotions; ++j) {
      if (j != i) others.push_back(j);
    }
    // Most similar first; stable sort keeps the lower code first on ties.
    std::stable_sort(others.begin(), others.end(), [&](int a, int b) {
      return m.values(i, a) > m.values(i, b);
    });
    std::vector<Emotion> pool;
    for (std::size_t n = k; n < others.size(); ++n) pool.push_back(emotion_from_code(others[n]));
    std::sort(pool.begin(), pool.end());
    t.pools[i] = std::move(pool);
  }
  t.validate();
  return t;
}

GapReport reference_gap_table() {
  GapReport r;
  auto set = [&](Emotion e, double si, double sm, double gap) {
    r.rows[code(e)] = {si, sm, gap};
  };
  set(Emotion::kAngry, 0.821, 0.452, 0.369);
  set(Emotion::kDisgusted, 0.805, 0.431, 0.374);
  set(Emotion::kFear, 0.853, 0.485, 0.368);
  set(Emotion::kHappy, 0.862, 0.553, 0.309);
  set(Emotion::kNeutral, 0.915, 0.601, 0.314);
  set(Emotion::kSad, 0.884, 0.524, 0.360);
  set(Emotion::kSurprised, 0.849, 0.538, 0.311);
  r.average = {0.856, 0.512, 0.344};
  return r;
}

CrossModalSimilarityMatrix reference_similarity_matrix() {
  // Printed order: angry, disgusted, fear, happy, neutral, sad, surprised.
  constexpr std::array<Emotion, kNumEmotions> order{
      Emotion::kAngry, Emotion::kDisgusted, Emotion::kFear, Emotion::kHappy,
      Emotion::kNeutral, Emotion::kSad, Emotion::kSurprised};
  constexpr double printed[kNumEmotions][kNumEmotions] = {
      {0.452, 0.418, 0.315, 0.221, 0.289, 0.334, 0.321},
      {0.409, 0.431, 0.320, 0.215, 0.291, 0.340, 0.318},
      {0.311, 0.318, 0.485, 0.255, 0.301, 0.312, 0.402},
      {0.225, 0.218, 0.258, 0.553, 0.352, 0.267, 0.288},
      {0.292, 0.299, 0.305, 0.349, 0.601, 0.330, 0.308},
      {0.338, 0.342, 0.315, 0.271, 0.333, 0.524, 0.319},
      {0.325, 0.321, 0.411, 0.285, 0.310, 0.315, 0.538}};
  CrossModalSimilarityMatrix m;
  for (int r = 0; r < kNumEmotions; ++r) {
    for (int c = 0; c < kNumEmotions; ++c) {
      m.values(code(order[r]), code(order[c])) = printed[r][c];
    }
  }
  return m;
}

NegativePoolTable load_paper_pools() {
  using E = Emotion;
  NegativePoolTable t;
  auto set = [&](E e, std::vector<E> pool) {
    std::sort(pool.begin(), pool.end());
    t.pools[code(e)] = std::move(pool);
  };
  set(E::kAngry, {E::kFear, E::kHappy, E::kNeutral, E::kSad, E::kSurprised});
  set(E::kDisgusted, {E::kFear, E::kHappy, E::kNeutral, E::kSad, E::kSurprised});
  set(E::kFear, {E::kAngry, E::kDisgusted, E::kHappy, E::kNeutral, E::kSad});
  set(E::kHappy, {E::kAngry, E::kDisgusted, E::kFear, E::kSad, E::kSurprised});
  set(E::kNeutral, {E::kAngry, E::kDisgusted, E::kFear, E::kHappy, E::kSad, E::kSurprised});
  set(E::kSad, {E::kAngry, E::kFear, E::kHappy, E::kNeutral, E::kSurprised});
  set(E::kSurprised, {E::kAngry, E::kDisgusted, E::kFear, E::kHappy, E::kNeutral, E::kSad});
  t.validate();
  return t;
}

PoolComparison compare_pools(const NegativePoolTable& derived,
                             const NegativePoolTable& reference) {
  PoolComparison c;
  for (Emotion e : kAllEmotions) {
    (derived.pool(e) == reference.pool(e) ? c.matching : c.discrepant).push_back(e);
  }
  return c;
}

FeaturesByEmotion collect_features(const CorpusManifest& manifest,
                                   const EncoderSuite& suite) {
  FeaturesByEmotion out;
  for (const auto& s : manifest.samples()) {
    out[code(s.emotion)].push_back(suite.visual_encode(s.image_ref));
  }
  return out;
}

TextByEmotion plain_text_embeddings(const EncoderSuite& suite) {
  TextByEmotion out;
  for (Emotion e : kAllEmotions) {
    out[code(e)] = suite.text_encode(suite.tokenize(emotion_prompt(e)));
  }
  return out;
}

std::string gap_report_to_csv(const GapReport& r) {
  std::string out = "emotion,s_image,s_match,gap\n";
  for (Emotion e : kAllEmotions) {
    const auto& row = r.rows[code(e)];
    out += std::string(emotion_name(e)) + "," + fmt(row.s_image) + "," +
           fmt(row.s_match) + "," + fmt(row.gap) + "\n";
  }
  out += "average," + fmt(r.average.s_image) + "," + fmt(r.average.s_match) + "," +
         fmt(r.average.gap) + "\n";
  return out;
}

std::string matrix_to_csv(const CrossModalSimilarityMatrix& m) {
  std::string out = "image_emotion";
  for (Emotion e : kAllEmotions) out += "," + std::string(emotion_name(e));
  out += "\n";
  for (Emotion r : kAllEmotions) {
    out += std::string(emotion_name(r));
    for (Emotion c : kAllEmotions) out += "," + fmt(m.values(code(r), code(c)));
    out += "\n";
  }
  return out;
}

GapReport gap_report_from_csv(const std::string& csv) {
  std::vector<double> avg;
  const auto rows = read_labelled_rows(csv, 3, &avg);
  if (avg.size() != 3) throw LoadError("gap csv: missing average row");
  GapReport r;
  for (int k = 0; k < kNumEmotions; ++k) r.rows[k] = {rows[k][0], rows[k][1], rows[k][2]};
  r.average = {avg[0], avg[1], avg[2]};
  return r;
}

CrossModalSimilarityMatrix matrix_from_csv(const std::string& csv) {
  std::stringstream ss(csv);
  std::string header;
  std::getline(ss, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const auto cols = split_csv_line(header);
  if (cols.size() != kNumEmotions + 1) throw LoadError("matrix csv: bad header");
  std::vector<int> col_code;
  for (std::size_t i = 1; i < cols.size(); ++i) {
    const auto e = parse_emotion(cols[i]);
    if (!e) throw LoadError("matrix csv: unknown column '" + cols[i] + "'");
    col_code.push_back(code(*e));
  }
  const auto rows = read_labelled_rows(csv, kNumEmotions, nullptr);
  CrossModalSimilarityMatrix m;
  for (int r = 0; r < kNumEmotions; ++r) {
    for (int c = 0; c < kNumEmotions; ++c) m.values(r, col_code[c]) = rows[r][c];
  }
  return m;
}

json to_json(const GapReport& r) {
  json rows = json::object();
  for (Emotion e : kAllEmotions) {
    const auto& row = r.rows[code(e)];
    rows[std::string(emotion_name(e))] = {
        {"s_image", row.s_image}, {"s_match", row.s_match}, {"gap", row.gap}};
  }
  return {{"rows", rows},
          {"average",
           {{"s_image", r.average.s_image},
            {"s_match", r.average.s_match},
            {"gap", r.average.gap}}}};
}

json to_json(const CrossModalSimilarityMatrix& m) {
  json rows = json::object();
  json counts = json::object();
  for (Emotion r : kAllEmotions) {
    json row = json::object();
    for (Emotion c : kAllEmotions) row[std::string(emotion_name(c))] = m.values(code(r), code(c));
    rows[std::string(emotion_name(r))] = row;
    counts[std::string(emotion_name(r))] = m.n_per_cell[code(r)];
  }
  return {{"values", rows}, {"n_per_cell", counts}};
}

json to_json(const PoolComparison& c) {
  json matching = json::array();
  json discrepant = json::array();
  for (Emotion e : c.matching) matching.push_back(std::string(emotion_name(e)));
  for (Emotion e : c.discrepant) discrepant.push_back(std::string(emotion_name(e)));
  return {{"matching", matching}, {"discrepant", discrepant}};
}

}  // namespace emosup
