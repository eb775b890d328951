#include "emosup/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "emosup/errors.hpp"
#include "emosup/kernels.hpp"

namespace emosup {

void FeatureSet::validate(std::size_t min_size) const {
  require(vectors.size() >= min_size,
          "feature set '" + source_tag + "': need at least " +
              std::to_string(min_size) + " vectors, got " +
              std::to_string(vectors.size()));
  for (const auto& v : vectors) {
    require(v.size() == dim(), "feature set '" + source_tag + "': mixed dims");
  }
}

GaussianFit fit_gaussian(const FeatureSet& fs) {
  fs.validate(2);
  GaussianFit g;
  g.mean = kernels::mean(fs.vectors);
  const Matrix c = kernels::covariance(fs.vectors, g.mean);
  g.covariance = 0.5 * (c + c.transpose());
  return g;
}

double fad(const GaussianFit& real, const GaussianFit& gen, FadDiagnostics* diag) {
  require(real.mean.size() == gen.mean.size(), "fad: feature dims differ");
  double clamped = 0.0;
  const double cross = psd_sqrt_trace(real.covariance, gen.covariance, &clamped);
  const double trace = real.covariance.trace() + gen.covariance.trace();
  const double value = (real.mean - gen.mean).squaredNorm() + trace - 2.0 * cross;
  if (diag != nullptr) {
    diag->clamped_mass = clamped;
    diag->trace = trace;
    diag->warn = clamped > 1e-6 * std::max(trace, 1e-300);
  }
  if (!std::isfinite(value)) throw NumericalError("fad: non-finite result");
  return value;
}

double fad(const FeatureSet& real, const FeatureSet& gen, FadDiagnostics* diag) {
  require(real.dim() == gen.dim(), "fad: feature dims differ");
  return fad(fit_gaussian(real), fit_gaussian(gen), diag);
}

double lse_d(const std::vector<Vector>& audio, const std::vector<Vector>& visual) {
  require(!audio.empty(), "lse_d: need at least one window");
  require(audio.size() == visual.size(),
          "lse_d: length mismatch (" + std::to_string(audio.size()) + " vs " +
              std::to_string(visual.size()) + ")");
  double sum = 0.0;
  for (std::size_t t = 0; t < audio.size(); ++t) {
    require(audio[t].size() == visual[t].size(), "lse_d: dim mismatch");
    sum += (audio[t] - visual[t]).norm();
  }
  return sum / static_cast<double>(audio.size());
}

double csim(const std::vector<Vector>& gen, const std::vector<Vector>& real) {
  require(!gen.empty(), "csim: need at least one pair");
  require(gen.size() == real.size(),
          "csim: length mismatch (" + std::to_string(gen.size()) + " vs " +
              std::to_string(real.size()) + ")");
  double sum = 0.0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    require(gen[i].size() == real[i].size(), "csim: dim mismatch");
    sum += cosine_similarity(gen[i], real[i]).value;
  }
  return sum / static_cast<double>(gen.size());
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"fad", r.fad},
          {"lse_d", r.lse_d},
          {"csim", r.csim},
          {"n_real", r.n_real},
          {"n_gen", r.n_gen}};
}

}  // namespace emosup
