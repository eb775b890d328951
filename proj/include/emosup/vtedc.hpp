#pragma once

#include <string>
#include <vector>

#include "emosup/corpus.hpp"
#include "emosup/numerics.hpp"
#include "emosup/pepl.hpp"

namespace emosup {

struct PairEmbeddings {
  Vector I_s_f;
  Vector T_s_f;
  Vector I_t_f;
  Vector T_t_f;
  Emotion source_emotion = Emotion::kNeutral;
  Emotion target_emotion = Emotion::kNeutral;
};

struct DifferencePair {
  Vector I_diff;
  Vector T_diff;
  bool degenerate = false;  // either norm below kNormEpsilon
};

// Projects both images and builds both prompts from the one shared neutral
// reference. Requires a frozen checkpoint and a same-identity neutral
// reference.
PairEmbeddings embed_pair(const PeplCheckpoint& ckpt, const Sample& source,
                          const std::string& target_image,
                          Emotion target_emotion, const Sample& reference,
                          const EncoderSuite& suite);

// Source minus target on both sides.
DifferencePair diff_vectors(const PairEmbeddings& pe);

struct L2Loss {
  double value = 1.0;
  bool degenerate = false;
};

// 1 - sim(I_diff, T_diff); 1 with the flag set for a degenerate pair.
L2Loss vtedc_loss_l2(const DifferencePair& dp);

struct L2Gradient {
  L2Loss loss;
  Vector wrt_i_diff;  // zero when degenerate
  Vector wrt_t_diff;
};

L2Gradient vtedc_loss_l2_gradient(const DifferencePair& dp);

struct DiffRow {
  std::string identity;
  Emotion source_emotion = Emotion::kNeutral;
  Emotion target_emotion = Emotion::kNeutral;
  // Text side of a non-corresponding row uses `text_emotion` instead of the
  // target emotion.
  Emotion text_emotion = Emotion::kNeutral;
  Vector I_diff;
  Vector T_diff;
};

// One row per ordered pair of distinct emotions for each identity, using the
// first sample of each (identity, emotion) cell and the identity's first
// neutral sample as reference. With `non_corresponding`, every other text
// emotion is also exported against the same image difference.
std::vector<DiffRow> collect_diffs(const PeplCheckpoint& ckpt,
                                   const CorpusManifest& manifest,
                                   const EncoderSuite& suite,
                                   bool non_corresponding = false);

// Header: identity,source_emotion,target_emotion,text_emotion,kind,
// i_0..i_{d-1},t_0..t_{d-1}
std::string diffs_to_csv(const std::vector<DiffRow>& rows);

}  // namespace emosup
