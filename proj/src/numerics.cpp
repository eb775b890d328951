#include "emosup/numerics.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "emosup/errors.hpp"

namespace emosup {
namespace {

std::uint64_t next_version() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

void require_same_dim(const Vector& a, const Vector& b, const char* what) {
  if (a.size() != b.size()) {
    throw ContractError(std::string(what) + ": dimension mismatch (" +
                        std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  }
}

}  // namespace

Similarity cosine_similarity(const Vector& a, const Vector& b) {
  require_same_dim(a, b, "cosine_similarity");
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kNormEpsilon || nb < kNormEpsilon) return {0.0, true};
  const double c = a.dot(b) / (na * nb);
  return {std::clamp(c, -1.0, 1.0), false};
}

CosineGradient cosine_similarity_gradient(const Vector& a, const Vector& b) {
  require_same_dim(a, b, "cosine_similarity_gradient");
  CosineGradient out;
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kNormEpsilon || nb < kNormEpsilon) {
    out.degenerate = true;
    out.wrt_a = Vector::Zero(a.size());
    out.wrt_b = Vector::Zero(b.size());
    return out;
  }
  // Unclamped for the gradient; the value is clamped for reporting only.
  const double c = a.dot(b) / (na * nb);
  out.value = std::clamp(c, -1.0, 1.0);
  out.wrt_a = b / (na * nb) - (c / (na * na)) * a;
  out.wrt_b = a / (na * nb) - (c / (nb * nb)) * b;
  return out;
}

bool all_finite(const Vector& v) { return v.allFinite(); }
bool all_finite(const Matrix& m) { return m.allFinite(); }

MlpParams::MlpParams(std::vector<DenseLayer> layers)
    : layers_(std::move(layers)), version_(next_version()) {
  validate();
}

void MlpParams::validate() const {
  require(!layers_.empty(), "MlpParams: at least one layer required");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const DenseLayer& l = layers_[i];
    require(l.weights.rows() > 0 && l.weights.cols() > 0,
            "MlpParams: empty weight matrix in layer " + std::to_string(i));
    require(l.bias.size() == l.weights.rows(),
            "MlpParams: bias dim != weight rows in layer " + std::to_string(i));
    if (i + 1 < layers_.size()) {
      require(layers_[i + 1].weights.cols() == l.weights.rows(),
              "MlpParams: layer " + std::to_string(i) +
                  " output does not chain into the next layer");
    }
  }
  require(layers_.back().activation == Activation::kIdentity,
          "MlpParams: last layer must use the identity activation");
}

int MlpParams::input_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weights.cols());
}

int MlpParams::output_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.back().weights.rows());
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

DenseLayer& MlpParams::mutable_layer(std::size_t i) {
  version_ = next_version();
  return layers_.at(i);
}

std::vector<double> MlpParams::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) {
        out.push_back(l.weights(r, c));
      }
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) out.push_back(l.bias(r));
  }
  return out;
}

void MlpParams::assign_flat(std::span<const double> values) {
  require(values.size() == parameter_count(),
          "MlpParams::assign_flat: size mismatch");
  std::size_t k = 0;
  for (auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) {
        l.weights(r, c) = values[k++];
      }
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = values[k++];
  }
  version_ = next_version();
}

bool MlpParams::same_values(const MlpParams& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.activation != b.activation) return false;
    if (a.weights.rows() != b.weights.rows() ||
        a.weights.cols() != b.weights.cols()) {
      return false;
    }
    if (a.weights != b.weights || a.bias != b.bias) return false;
  }
  return true;
}

MlpParams make_mlp(std::span<const int> dims, Rng& rng, Activation hidden) {
  require(dims.size() >= 2, "make_mlp: need at least input and output dims");
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i];
    const int out = dims[i + 1];
    require(in > 0 && out > 0, "make_mlp: dims must be positive");
    const double bound = std::sqrt(6.0 / in);
    DenseLayer layer;
    layer.weights.resize(out, in);
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) layer.weights(r, c) = rng.uniform(-bound, bound);
    }
    layer.bias = Vector::Zero(out);
    layer.activation =
        (i + 2 == dims.size()) ? Activation::kIdentity : hidden;
    layers.push_back(std::move(layer));
  }
  return MlpParams(std::move(layers));
}

Vector mlp_forward(const MlpParams& params, const Vector& x, MlpCache* cache) {
  require(params.num_layers() > 0, "mlp_forward: empty network");
  if (x.size() != params.input_dim()) {
    throw ContractError("mlp_forward: input dim " + std::to_string(x.size()) +
                        " != " + std::to_string(params.input_dim()));
  }
  if (cache != nullptr) {
    cache->inputs.clear();
    cache->pre_activations.clear();
    cache->version = params.version();
    cache->valid = true;
  }
  Vector h = x;
  for (const DenseLayer& l : params.layers()) {
    Vector z = l.weights * h + l.bias;
    if (cache != nullptr) {
      cache->inputs.push_back(h);
      cache->pre_activations.push_back(z);
    }
    if (l.activation == Activation::kRelu) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

MlpGrads MlpGrads::zeros_like(const MlpParams& params) {
  MlpGrads g;
  for (const auto& l : params.layers()) {
    g.weights.push_back(Matrix::Zero(l.weights.rows(), l.weights.cols()));
    g.bias.push_back(Vector::Zero(l.bias.size()));
  }
  g.input = Vector::Zero(params.input_dim());
  return g;
}

void MlpGrads::add_scaled(const MlpGrads& other, double scale) {
  require(weights.size() == other.weights.size(),
          "MlpGrads::add_scaled: shape mismatch");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] += scale * other.weights[i];
    bias[i] += scale * other.bias[i];
  }
  if (input.size() == other.input.size()) input += scale * other.input;
}

void MlpGrads::scale(double s) {
  for (auto& w : weights) w *= s;
  for (auto& b : bias) b *= s;
  input *= s;
}

bool MlpGrads::all_finite() const {
  for (const auto& w : weights) {
    if (!w.allFinite()) return false;
  }
  for (const auto& b : bias) {
    if (!b.allFinite()) return false;
  }
  return input.allFinite();
}

bool MlpGrads::is_zero() const {
  for (const auto& w : weights) {
    if (!w.isZero(0.0)) return false;
  }
  for (const auto& b : bias) {
    if (!b.isZero(0.0)) return false;
  }
  return true;
}

MlpGrads mlp_backward(const MlpParams& params, const MlpCache& cache,
                      const Vector& upstream) {
  if (!cache.valid || cache.version != params.version() ||
      cache.inputs.size() != params.num_layers()) {
    throw ContractError("mlp_backward: cache does not match these parameters");
  }
  if (upstream.size() != params.output_dim()) {
    throw ContractError("mlp_backward: upstream dim mismatch");
  }
  MlpGrads g = MlpGrads::zeros_like(params);
  Vector delta = upstream;
  for (std::size_t i = params.num_layers(); i-- > 0;) {
    const DenseLayer& l = params.layers()[i];
    if (l.activation == Activation::kRelu) {
      delta = delta.cwiseProduct(
          (cache.pre_activations[i].array() > 0.0).cast<double>().matrix());
    }
    g.weights[i].noalias() = delta * cache.inputs[i].transpose();
    g.bias[i] = delta;
    delta = l.weights.transpose() * delta;
  }
  g.input = std::move(delta);
  return g;
}

MlpParams sgd_step(const MlpParams& params, const MlpGrads& grads, double lr) {
  require(std::isfinite(lr) && lr >= 0.0, "sgd_step: lr must be finite and >= 0");
  require(grads.weights.size() == params.num_layers(),
          "sgd_step: gradient/parameter layer count mismatch");
  for (std::size_t i = 0; i < params.num_layers(); ++i) {
    const auto& l = params.layers()[i];
    require(grads.weights[i].rows() == l.weights.rows() &&
                grads.weights[i].cols() == l.weights.cols() &&
                grads.bias[i].size() == l.bias.size(),
            "sgd_step: gradient shape mismatch in layer " + std::to_string(i));
    if (!grads.weights[i].allFinite() || !grads.bias[i].allFinite()) {
      throw NumericalError("sgd_step: non-finite gradient in layer " +
                           std::to_string(i) + "; step aborted");
    }
  }
  MlpParams out = params;
  for (std::size_t i = 0; i < out.num_layers(); ++i) {
    DenseLayer& l = out.mutable_layer(i);
    l.weights -= lr * grads.weights[i];
    l.bias -= lr * grads.bias[i];
  }
  return out;
}

const MlpGrads& momentum_update(MlpGrads* velocity, const MlpGrads& grads,
                                double mu) {
  if (mu == 0.0) return grads;
  if (velocity->weights.size() != grads.weights.size()) {
    *velocity = grads;
    return *velocity;
  }
  velocity->scale(mu);
  velocity->add_scaled(grads, 1.0);
  return *velocity;
}

bool is_symmetric(const Matrix& m, double tol) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

Matrix psd_sqrt(const Matrix& a, double* clamped) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(a);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("psd_sqrt: eigendecomposition failed");
  }
  Vector ev = solver.eigenvalues();
  double lost = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < 0.0) {
      lost += -ev(i);
      ev(i) = 0.0;
    }
    ev(i) = std::sqrt(ev(i));
  }
  if (clamped != nullptr) *clamped = lost;
  const Matrix& q = solver.eigenvectors();
  return q * ev.asDiagonal() * q.transpose();
}

double psd_sqrt_trace(const Matrix& a, const Matrix& b, double* clamped) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          "psd_sqrt_trace: dimension mismatch");
  require(is_symmetric(a), "psd_sqrt_trace: first argument is not symmetric");
  require(is_symmetric(b), "psd_sqrt_trace: second argument is not symmetric");
  double lost_a = 0.0;
  const Matrix root_a = psd_sqrt(0.5 * (a + a.transpose()), &lost_a);
  Matrix m = root_a * b * root_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("psd_sqrt_trace: eigendecomposition failed");
  }
  double trace = 0.0;
  double lost = lost_a;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const double ev = solver.eigenvalues()(i);
    if (ev < 0.0) {
      lost += -ev;
    } else {
      trace += std::sqrt(ev);
    }
  }
  if (clamped != nullptr) *clamped = lost;
  return trace;
}

}  // namespace emosup
