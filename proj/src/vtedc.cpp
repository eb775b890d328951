#include "emosup/vtedc.hpp"

#include <cstdio>
#include <map>

#include "emosup/errors.hpp"

namespace emosup {

PairEmbeddings embed_pair(const PeplCheckpoint& ckpt, const Sample& source,
                          const std::string& target_image,
                          Emotion target_emotion, const Sample& reference,
                          const EncoderSuite& suite) {
  require(ckpt.frozen(), "embed_pair: checkpoint must be frozen");
  require(reference.identity == source.identity,
          "embed_pair: reference identity differs from source identity");
  if (reference.emotion != Emotion::kNeutral) {
    throw ContractError("embed_pair: reference '" + reference.id + "' is not neutral");
  }
  const auto tokens = guider_tokens(ckpt.guider(),
                                    suite.backbone_identity(reference.image_ref));
  PairEmbeddings pe;
  pe.source_emotion = source.emotion;
  pe.target_emotion = target_emotion;
  pe.I_s_f = emotion_visual_embedding(ckpt.projectors(), source, suite);
  pe.I_t_f = emotion_visual_embedding(ckpt.projectors(),
                                      suite.visual_encode(target_image), target_emotion);
  pe.T_s_f = personalized_text_embedding(personalize(tokens, source.emotion, suite), suite);
  pe.T_t_f = personalized_text_embedding(personalize(tokens, target_emotion, suite), suite);
  return pe;
}

DifferencePair diff_vectors(const PairEmbeddings& pe) {
  require(pe.I_s_f.size() == pe.I_t_f.size() && pe.T_s_f.size() == pe.T_t_f.size() &&
              pe.I_s_f.size() == pe.T_s_f.size(),
          "diff_vectors: embedding dims differ");
  DifferencePair dp;
  dp.I_diff = pe.I_s_f - pe.I_t_f;
  dp.T_diff = pe.T_s_f - pe.T_t_f;
  dp.degenerate = dp.I_diff.norm() < kNormEpsilon || dp.T_diff.norm() < kNormEpsilon;
  return dp;
}

L2Loss vtedc_loss_l2(const DifferencePair& dp) {
  require(dp.I_diff.size() == dp.T_diff.size(), "vtedc_loss_l2: dim mismatch");
  const Similarity s = cosine_similarity(dp.I_diff, dp.T_diff);
  return {1.0 - s.value, s.degenerate || dp.degenerate};
}

L2Gradient vtedc_loss_l2_gradient(const DifferencePair& dp) {
  require(dp.I_diff.size() == dp.T_diff.size(), "vtedc_loss_l2: dim mismatch");
  const CosineGradient c = cosine_similarity_gradient(dp.I_diff, dp.T_diff);
  L2Gradient g;
  g.loss = {1.0 - c.value, c.degenerate || dp.degenerate};
  g.wrt_i_diff = -c.wrt_a;
  g.wrt_t_diff = -c.wrt_b;
  return g;
}

std::vector<DiffRow> collect_diffs(const PeplCheckpoint& ckpt,
                                   const CorpusManifest& manifest,
                                   const EncoderSuite& suite,
                                   bool non_corresponding) {
  require(ckpt.frozen(), "collect_diffs: checkpoint must be frozen");
  // First sample of every (identity, emotion) cell, in manifest order.
  std::map<std::string, std::map<Emotion, const Sample*>> cells;
  for (const auto& s : manifest.samples()) {
    auto& slot = cells[s.identity][s.emotion];
    if (slot == nullptr) slot = &s;
  }
  std::vector<DiffRow> rows;
  for (const auto& identity : manifest.identities()) {
    const auto& cell = cells[identity];
    const auto neutral = cell.find(Emotion::kNeutral);
    if (neutral == cell.end()) {
      throw ContractError("collect_diffs: identity '" + identity + "' has no neutral sample");
    }
    const Sample& ref = *neutral->second;
    const auto tokens = guider_tokens(ckpt.guider(),
                                      suite.backbone_identity(ref.image_ref));
    std::map<Emotion, Vector> text;
    for (Emotion e : kAllEmotions) {
      text[e] = personalized_text_embedding(personalize(tokens, e, suite), suite);
    }
    for (const auto& [es, src] : cell) {
      for (const auto& [et, tgt] : cell) {
        if (es == et) continue;
        const Vector i_diff = emotion_visual_embedding(ckpt.projectors(), *src, suite) -
                              emotion_visual_embedding(ckpt.projectors(), *tgt, suite);
        for (Emotion ek : kAllEmotions) {
          if (ek == es || (ek != et && !non_corresponding)) continue;
          rows.push_back({identity, es, et, ek, i_diff, text[es] - text[ek]});
        }
      }
    }
  }
  return rows;
}

std::string diffs_to_csv(const std::vector<DiffRow>& rows) {
  std::string out = "identity,source_emotion,target_emotion,text_emotion,kind";
  const Eigen::Index d = rows.empty() ? 0 : rows.front().I_diff.size();
  for (Eigen::Index i = 0; i < d; ++i) out += ",i_" + std::to_string(i);
  for (Eigen::Index i = 0; i < d; ++i) out += ",t_" + std::to_string(i);
  out += "\n";
  char buf[40];
  for (const auto& r : rows) {
    out += r.identity + "," + std::string(emotion_name(r.source_emotion)) + "," +
           std::string(emotion_name(r.target_emotion)) + "," +
           std::string(emotion_name(r.text_emotion)) + "," +
           (r.text_emotion == r.target_emotion ? "corresponding" : "non_corresponding");
    for (const Vector* v : {&r.I_diff, &r.T_diff}) {
      for (Eigen::Index i = 0; i < v->size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.17g", (*v)(i));
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace emosup
