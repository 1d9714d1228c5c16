#pragma once

// Reference implementations used only by the tests. They are written
// independently of the library: scalar loops, explicit inverses and textbook
// formulas, never the library's factorizations or batched paths.

#include "fzoos/core.hpp"
#include "fzoos/kernel_rff.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using fzoos::Matrix;
using fzoos::Vector;

inline double se(const Vector& x, const Vector& y, double l) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < x.size(); ++j) s += (x[j] - y[j]) * (x[j] - y[j]);
  return std::exp(-s / (2.0 * l * l));
}

inline Vector se_grad(const Vector& x, const Vector& y, double l) {
  Vector g(x.size());
  const double k = se(x, y, l);
  for (Eigen::Index j = 0; j < x.size(); ++j) g[j] = -(x[j] - y[j]) / (l * l) * k;
  return g;
}

inline Vector features(const fzoos::RFFBasis& b, const Vector& x) {
  const auto m = b.frequencies.rows();
  Vector out(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    double z = b.phases[j];
    for (Eigen::Index k = 0; k < x.size(); ++k) z += b.frequencies(j, k) * x[k];
    out[j] = std::sqrt(2.0 / static_cast<double>(m)) * std::cos(z);
  }
  return out;
}

inline Matrix jacobian(const fzoos::RFFBasis& b, const Vector& x) {
  const auto m = b.frequencies.rows();
  Matrix out(m, x.size());
  for (Eigen::Index j = 0; j < m; ++j) {
    double z = b.phases[j];
    for (Eigen::Index k = 0; k < x.size(); ++k) z += b.frequencies(j, k) * x[k];
    const double s = -std::sqrt(2.0 / static_cast<double>(m)) * std::sin(z);
    for (Eigen::Index k = 0; k < x.size(); ++k) out(j, k) = s * b.frequencies(j, k);
  }
  return out;
}

/// Exact GP with SE kernel, built with an explicit inverse.
struct ExactGP {
  std::vector<Vector> xs;
  Vector y;
  double noise = 0.0;
  double l = 1.0;
  Matrix kinv;
  Vector alpha;

  ExactGP(std::vector<Vector> inputs, Vector values, double s2, double lengthscale)
      : xs(std::move(inputs)), y(std::move(values)), noise(s2), l(lengthscale) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    Matrix k(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
      for (Eigen::Index b = 0; b < n; ++b) k(a, b) = se(xs[a], xs[b], l) + (a == b ? noise : 0.0);
    }
    kinv = k.fullPivLu().inverse();
    alpha = kinv * y;
  }

  double mean(const Vector& x) const {
    double acc = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) acc += se(x, xs[t], l) * alpha[static_cast<Eigen::Index>(t)];
    return acc;
  }

  Vector grad_mean(const Vector& x) const {
    Vector g = Vector::Zero(x.size());
    for (std::size_t t = 0; t < xs.size(); ++t) g += se_grad(x, xs[t], l) * alpha[static_cast<Eigen::Index>(t)];
    return g;
  }

  Matrix grad_cov(const Vector& x) const {
    const auto d = x.size();
    Matrix j(static_cast<Eigen::Index>(xs.size()), d);
    for (std::size_t t = 0; t < xs.size(); ++t) j.row(static_cast<Eigen::Index>(t)) = se_grad(x, xs[t], l).transpose();
    return Matrix::Identity(d, d) / (l * l) - j.transpose() * kinv * j;
  }
};

/// RFF-approximate posterior gradient sum_tau grad_phi(x)^T phi(x_tau) alpha_tau,
/// with alpha = (Phi Phi^T + s2 I)^{-1} y from an explicit inverse.
inline Vector rff_posterior_gradient(const fzoos::RFFBasis& b, const std::vector<Vector>& xs, const Vector& y,
                                     double s2, const Vector& x) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  std::vector<Vector> phis;
  for (const auto& p : xs) phis.push_back(features(b, p));
  Matrix k(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index c = 0; c < n; ++c) k(a, c) = phis[a].dot(phis[c]) + (a == c ? s2 : 0.0);
  }
  const Vector alpha = k.fullPivLu().inverse() * y;
  const Matrix jac = jacobian(b, x);
  Vector g = Vector::Zero(x.size());
  for (Eigen::Index t = 0; t < n; ++t) g += jac.transpose() * phis[t] * alpha[t];
  return g;
}

inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x, double eps) {
  Vector g(x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector xp = x;
    Vector xm = x;
    xp[j] += eps;
    xm[j] -= eps;
    g[j] = (f(xp) - f(xm)) / (2.0 * eps);
  }
  return g;
}

inline Vector uniform_vector(Eigen::Index d, fzoos::Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(d);
  for (Eigen::Index j = 0; j < d; ++j) v[j] = u(rng);
  return v;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace oracle
