#include "emosup/kernels.hpp"

#include <omp.h>

#include <vector>

#include "emosup/errors.hpp"

namespace emosup::kernels {
namespace {

void require_uniform(std::span<const Vector> xs, const char* what) {
  require(!xs.empty(), std::string(what) + ": empty input");
  const auto d = xs.front().size();
  for (const auto& x : xs) {
    require(x.size() == d, std::string(what) + ": non-uniform dimensions");
  }
}

// Unit vectors; degenerate inputs become zero so that their cosines are 0.
std::vector<Vector> normalized(std::span<const Vector> xs) {
  std::vector<Vector> out(xs.size());
  const auto n = static_cast<std::ptrdiff_t>(xs.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double nrm = xs[i].norm();
    out[i] = nrm < kNormEpsilon ? Vector::Zero(xs[i].size()) : Vector(xs[i] / nrm);
  }
  return out;
}

}  // namespace

namespace serial {

double mean_pairwise_cosine(std::span<const Vector> xs) {
  require_uniform(xs, "mean_pairwise_cosine");
  require(xs.size() >= 2, "mean_pairwise_cosine: need at least two vectors");
  double sum = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t j = i + 1; j < xs.size(); ++j) {
      sum += cosine_similarity(xs[i], xs[j]).value;
    }
  }
  const double pairs = 0.5 * static_cast<double>(xs.size()) *
                       static_cast<double>(xs.size() - 1);
  return sum / pairs;
}

Vector mean_cosine_to_targets(std::span<const Vector> items,
                              std::span<const Vector> targets) {
  require_uniform(items, "mean_cosine_to_targets");
  require_uniform(targets, "mean_cosine_to_targets");
  Vector out = Vector::Zero(static_cast<Eigen::Index>(targets.size()));
  for (std::size_t j = 0; j < targets.size(); ++j) {
    double s = 0.0;
    for (const auto& x : items) s += cosine_similarity(x, targets[j]).value;
    out(static_cast<Eigen::Index>(j)) = s / static_cast<double>(items.size());
  }
  return out;
}

Vector mean(std::span<const Vector> xs) {
  require_uniform(xs, "mean");
  Vector mu = Vector::Zero(xs.front().size());
  for (const auto& x : xs) mu += x;
  return mu / static_cast<double>(xs.size());
}

Matrix covariance(std::span<const Vector> xs, const Vector& mu) {
  require_uniform(xs, "covariance");
  require(xs.size() >= 2, "covariance: need at least two vectors");
  const auto d = mu.size();
  Matrix cov = Matrix::Zero(d, d);
  for (const auto& x : xs) {
    const Vector c = x - mu;
    cov += c * c.transpose();
  }
  return cov / static_cast<double>(xs.size() - 1);
}

}  // namespace serial

double mean_pairwise_cosine(std::span<const Vector> xs) {
  require_uniform(xs, "mean_pairwise_cosine");
  require(xs.size() >= 2, "mean_pairwise_cosine: need at least two vectors");
  const std::vector<Vector> u = normalized(xs);
  const auto n = static_cast<std::ptrdiff_t>(u.size());
  std::vector<double> row(u.size(), 0.0);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::ptrdiff_t j = i + 1; j < n; ++j) s += u[i].dot(u[j]);
    row[i] = s;
  }
  double sum = 0.0;
  for (double r : row) sum += r;
  return sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

Vector mean_cosine_to_targets(std::span<const Vector> items,
                              std::span<const Vector> targets) {
  require_uniform(items, "mean_cosine_to_targets");
  require_uniform(targets, "mean_cosine_to_targets");
  const std::vector<Vector> u = normalized(items);
  const std::vector<Vector> t = normalized(targets);
  const auto n = static_cast<std::ptrdiff_t>(u.size());
  const auto k = static_cast<Eigen::Index>(t.size());
  Matrix per_item(k, n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) per_item(j, i) = u[i].dot(t[j]);
  }
  Vector out(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::ptrdiff_t i = 0; i < n; ++i) s += per_item(j, i);
    out(j) = s / static_cast<double>(n);
  }
  return out;
}

Vector mean(std::span<const Vector> xs) {
  // O(n d); the serial loop is already memory bound.
  return serial::mean(xs);
}

Matrix covariance(std::span<const Vector> xs, const Vector& mu) {
  require_uniform(xs, "covariance");
  require(xs.size() >= 2, "covariance: need at least two vectors");
  const auto d = mu.size();
  const auto n = static_cast<std::ptrdiff_t>(xs.size());
  // One column per coordinate, so every entry below is a contiguous dot.
  Matrix centered(n, d);
  for (std::ptrdiff_t i = 0; i < n; ++i) centered.row(i) = (xs[i] - mu).transpose();
  Matrix cov(d, d);
  // Each (r, c) entry is an independent dot product with a fixed order.
#pragma omp parallel for schedule(dynamic, 4)
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = r; c < d; ++c) {
      const double s = centered.col(r).dot(centered.col(c));
      cov(r, c) = s;
      cov(c, r) = s;
    }
  }
  return cov / static_cast<double>(n - 1);
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace emosup::kernels
