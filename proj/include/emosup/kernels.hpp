#pragma once

#include <span>

#include "emosup/numerics.hpp"

// Data-parallel reductions over embedding sets. Each kernel exists twice: a
// straight-line serial reference under kernels::serial, and an OpenMP version
// whose partial sums are reduced in a fixed order, so results do not depend on
// the thread count. Tests hold the two within 1e-12 of each other.
namespace emosup::kernels {

namespace serial {

// Mean cosine similarity over unordered distinct pairs i < j.
double mean_pairwise_cosine(std::span<const Vector> xs);

// out(j) = mean_i cos(items[i], targets[j]).
Vector mean_cosine_to_targets(std::span<const Vector> items,
                              std::span<const Vector> targets);

Vector mean(std::span<const Vector> xs);

// Unbiased (n - 1) sample covariance around `mu`.
Matrix covariance(std::span<const Vector> xs, const Vector& mu);

}  // namespace serial

double mean_pairwise_cosine(std::span<const Vector> xs);
Vector mean_cosine_to_targets(std::span<const Vector> items,
                              std::span<const Vector> targets);
Vector mean(std::span<const Vector> xs);
Matrix covariance(std::span<const Vector> xs, const Vector& mu);

// Threads OpenMP will use for the parallel kernels.
int max_threads();

}  // namespace emosup::kernels
