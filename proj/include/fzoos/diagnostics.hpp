#pragma once

// Read-only measurements of estimate quality: gradient disparity, the
// disparity-minimizing correction length, cosine similarity, and the
// contraction ratio of gradient uncertainty along a growing trajectory.

#include "fzoos/core.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>

namespace fzoos {

struct DisparityRecord {
  int round = 0;
  int iteration = 0;
  int client = 0;
  double xi = 0.0;
  std::optional<double> cosine;
  double gamma_used = 0.0;
  std::optional<double> gamma_star;
};

/// |g_hat - grad_F|^2.
inline double gradient_disparity(const Vector& g_hat, const Vector& grad_f) {
  require_same_dim(g_hat.size(), grad_f.size(), "gradient_disparity");
  return (g_hat - grad_f).squaredNorm();
}

/// argmin over gamma of |g + gamma c - grad_F|^2 = (grad_F - g)^T c / |c|^2.
/// Not clamped to [0, 1].
inline double optimal_gamma(const Vector& grad_f, const Vector& g, const Vector& correction) {
  require_same_dim(grad_f.size(), g.size(), "optimal_gamma");
  require_same_dim(g.size(), correction.size(), "optimal_gamma");
  const double denom = correction.squaredNorm();
  if (!(denom > 0.0)) throw InputError("optimal_gamma: undefined for a zero correction vector");
  return (grad_f - g).dot(correction) / denom;
}

inline double cosine_similarity(const Vector& u, const Vector& v) {
  require_same_dim(u.size(), v.size(), "cosine_similarity");
  const double nu = u.norm();
  const double nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw InputError("cosine_similarity: undefined for a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

/// Cosine when both vectors are nonzero, otherwise absent.
inline std::optional<double> try_cosine_similarity(const Vector& u, const Vector& v) {
  if (u.norm() > 0.0 && v.norm() > 0.0) return cosine_similarity(u, v);
  return std::nullopt;
}

/// Largest consecutive ratio s_{k+1} / s_k of an uncertainty sequence. This is
/// an empirical proxy for the supremum over the domain, not the supremum.
inline double rho_estimate(std::span<const double> uncertainty) {
  if (uncertainty.size() < 2) throw InputError("rho_estimate: need at least two values");
  double worst = 0.0;
  for (std::size_t k = 0; k < uncertainty.size(); ++k) {
    if (!(uncertainty[k] > 0.0)) throw InputError("rho_estimate: values must be positive");
  }
  for (std::size_t k = 1; k < uncertainty.size(); ++k) {
    worst = std::max(worst, uncertainty[k] / uncertainty[k - 1]);
  }
  return worst;
}

}  // namespace fzoos
