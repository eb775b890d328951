#pragma once

#include <string>
#include <vector>

#include "emosup/numerics.hpp"
#include "json.hpp"

namespace emosup {

struct FeatureSet {
  std::vector<Vector> vectors;
  std::string source_tag;

  int dim() const {
    return vectors.empty() ? 0 : static_cast<int>(vectors.front().size());
  }
  // Uniform dim; at least `min_size` vectors.
  void validate(std::size_t min_size = 2) const;
};

struct GaussianFit {
  Vector mean;
  Matrix covariance;  // unbiased, symmetrized
};

GaussianFit fit_gaussian(const FeatureSet& fs);

struct FadDiagnostics {
  double clamped_mass = 0.0;  // |negative eigenvalues| removed by clamping
  double trace = 0.0;         // Tr(Sigma_r) + Tr(Sigma_g)
  bool warn = false;          // clamped mass above 1e-6 of the trace
};

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})
double fad(const GaussianFit& real, const GaussianFit& gen,
           FadDiagnostics* diag = nullptr);
double fad(const FeatureSet& real, const FeatureSet& gen,
           FadDiagnostics* diag = nullptr);

// Mean Euclidean distance over aligned windows.
double lse_d(const std::vector<Vector>& audio, const std::vector<Vector>& visual);

// Mean cosine similarity over aligned pairs.
double csim(const std::vector<Vector>& gen, const std::vector<Vector>& real);

struct MetricReport {
  double fad = 0.0;
  double lse_d = 0.0;
  double csim = 0.0;
  std::size_t n_real = 0;
  std::size_t n_gen = 0;
};

nlohmann::json to_json(const MetricReport& r);

}  // namespace emosup
