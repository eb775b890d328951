#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

#include "emosup/rng.hpp"

namespace emosup {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Norms below this count as zero for cosine similarity.
inline constexpr double kNormEpsilon = 1e-12;

struct Similarity {
  double value = 0.0;
  bool degenerate = false;  // an input norm was below kNormEpsilon
};

// dot(a,b) / (|a| |b|), or {0, degenerate} when either norm vanishes.
Similarity cosine_similarity(const Vector& a, const Vector& b);

struct CosineGradient {
  double value = 0.0;
  bool degenerate = false;
  Vector wrt_a;  // zero when degenerate
  Vector wrt_b;
};

CosineGradient cosine_similarity_gradient(const Vector& a, const Vector& b);

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

enum class Activation { kRelu, kIdentity };

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::kIdentity;
};

// A stack of dense layers. Every mutation gets a fresh version so that a
// forward cache taken before the change is rejected by mlp_backward().
class MlpParams {
 public:
  MlpParams() = default;
  explicit MlpParams(std::vector<DenseLayer> layers);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::size_t num_layers() const { return layers_.size(); }
  int input_dim() const;
  int output_dim() const;
  std::size_t parameter_count() const;
  std::uint64_t version() const { return version_; }

  DenseLayer& mutable_layer(std::size_t i);

  // Row-major weights then bias, layer by layer.
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  bool same_values(const MlpParams& other) const;

 private:
  void validate() const;

  std::vector<DenseLayer> layers_;
  std::uint64_t version_ = 0;
};

// He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias.
// dims = {in, hidden..., out}; hidden layers use `hidden`, the last layer is
// always identity.
MlpParams make_mlp(std::span<const int> dims, Rng& rng,
                   Activation hidden = Activation::kRelu);

struct MlpCache {
  std::vector<Vector> inputs;           // input to each layer
  std::vector<Vector> pre_activations;  // W x + b for each layer
  std::uint64_t version = 0;
  bool valid = false;
};

Vector mlp_forward(const MlpParams& params, const Vector& x,
                   MlpCache* cache = nullptr);

struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<Vector> bias;
  Vector input;

  static MlpGrads zeros_like(const MlpParams& params);
  void add_scaled(const MlpGrads& other, double scale);
  void scale(double s);
  bool all_finite() const;
  bool is_zero() const;
};

// Gradients of dot(output, upstream) w.r.t. every weight, bias, and the input.
MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      const Vector& upstream);

// param <- param - lr * grad. Throws NumericalError (leaving nothing changed)
// if any gradient entry is non-finite.
MlpParams sgd_step(const MlpParams& params, const MlpGrads& grads, double lr);

// Classical momentum: velocity <- mu * velocity + grads, returns the velocity
// to feed to sgd_step. mu = 0 returns grads unchanged.
const MlpGrads& momentum_update(MlpGrads* velocity, const MlpGrads& grads,
                                double mu);

// Symmetric PSD square root via eigendecomposition, negative eigenvalues
// clamped to zero. `clamped` receives the sum of |clamped eigenvalues|.
Matrix psd_sqrt(const Matrix& a, double* clamped = nullptr);

// Tr((a^{1/2} b a^{1/2})^{1/2}) which equals Tr((ab)^{1/2}) for PSD a, b.
// Throws ContractError when either input is asymmetric beyond 1e-8 (relative
// to its largest entry, floor 1).
double psd_sqrt_trace(const Matrix& a, const Matrix& b,
                      double* clamped = nullptr);

bool is_symmetric(const Matrix& m, double tol = 1e-8);

}  // namespace emosup
