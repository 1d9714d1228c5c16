#pragma once

// Shift-invariant kernels, their input gradients, and the random Fourier
// feature basis shared by every client and the server.

#include "fzoos/core.hpp"

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

namespace fzoos {

/// Hyperparameters of a unit-variance shift-invariant kernel.
///
/// The variance is fixed at 1 so k(x, x) = 1. For the squared exponential
/// kernel the derived bounds are
///   kappa = 1 / l^2        (norm of d_z d_z' k at z = z'), and
///   L     = e^{-1/2} / l   (sup of |d_z k(z, x')|), which no computation uses.
struct KernelParams {
  double lengthscale = 1.0;

  void validate() const {
    if (!(lengthscale > 0.0) || !std::isfinite(lengthscale)) {
      throw ConfigError("lengthscale", "must be a positive finite number");
    }
  }
};

/// Operations a kernel must provide to back a derived-GP gradient posterior.
template <class K>
concept ShiftInvariantKernel = requires(const K& k, const Vector& x, Eigen::Index d) {
  { k(x, x) } -> std::convertible_to<double>;
  { k.grad_first(x, x) } -> std::convertible_to<Vector>;
  { k.cross_hessian(x, x) } -> std::convertible_to<Matrix>;
  { k.prior_gradient_covariance(d) } -> std::convertible_to<Matrix>;
};

/// A kernel whose spectral measure can be sampled for random Fourier features.
template <class K>
concept SpectralKernel = ShiftInvariantKernel<K> && requires(const K& k, Matrix& freq, Rng& rng) {
  k.sample_frequencies(freq, rng);
};

/// k(x, x') = exp(-|x - x'|^2 / (2 l^2)).
class SquaredExponentialKernel {
 public:
  SquaredExponentialKernel() = default;
  explicit SquaredExponentialKernel(KernelParams params) : params_(params) {
    params_.validate();
    inv_l2_ = 1.0 / (params_.lengthscale * params_.lengthscale);
  }

  const KernelParams& params() const noexcept { return params_; }
  double kappa() const noexcept { return inv_l2_; }

  double operator()(const Vector& x, const Vector& y) const {
    require_same_dim(x.size(), y.size(), "kernel_eval");
    return std::exp(-0.5 * (x - y).squaredNorm() * inv_l2_);
  }

  /// Gradient with respect to the first argument: -(x - y) / l^2 * k(x, y).
  Vector grad_first(const Vector& x, const Vector& y) const {
    require_same_dim(x.size(), y.size(), "kernel_grad_first");
    const Vector diff = x - y;
    const double k = std::exp(-0.5 * diff.squaredNorm() * inv_l2_);
    return (-k * inv_l2_) * diff;
  }

  /// Row tau is grad_first(x, points.row(tau)).
  Matrix grad_first_rows(const Vector& x, const Matrix& points) const {
    require_same_dim(x.size(), points.cols(), "kernel_grad_first");
    Matrix diff = (-points).rowwise() + x.transpose();
    const Vector k = (-0.5 * inv_l2_ * diff.rowwise().squaredNorm()).array().exp();
    return (-inv_l2_) * (k.asDiagonal() * diff);
  }

  /// d_z d_z' k(z, z') = k (I / l^2 - (z - z')(z - z')^T / l^4).
  Matrix cross_hessian(const Vector& z, const Vector& zp) const {
    require_same_dim(z.size(), zp.size(), "kernel_cross_hessian");
    const Vector diff = z - zp;
    const double k = std::exp(-0.5 * diff.squaredNorm() * inv_l2_);
    Matrix h = Matrix::Identity(z.size(), z.size()) * inv_l2_;
    h.noalias() -= (inv_l2_ * inv_l2_) * diff * diff.transpose();
    return k * h;
  }

  /// Prior covariance of the gradient at any point: cross_hessian(x, x) = I / l^2.
  Matrix prior_gradient_covariance(Eigen::Index d) const {
    return Matrix::Identity(d, d) * inv_l2_;
  }

  /// Fills `freq` (M x d, pre-sized) with draws from N(0, I / l^2), row by row.
  void sample_frequencies(Matrix& freq, Rng& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0 / params_.lengthscale);
    for (Eigen::Index j = 0; j < freq.rows(); ++j) {
      for (Eigen::Index k = 0; k < freq.cols(); ++k) freq(j, k) = normal(rng);
    }
  }

 private:
  KernelParams params_{};
  double inv_l2_ = 1.0;
};

static_assert(SpectralKernel<SquaredExponentialKernel>);

inline double kernel_eval(const Vector& x, const Vector& y, const KernelParams& params) {
  return SquaredExponentialKernel(params)(x, y);
}

inline Vector kernel_grad_first(const Vector& x, const Vector& y, const KernelParams& params) {
  return SquaredExponentialKernel(params).grad_first(x, y);
}

/// Random Fourier features phi_j(x) = sqrt(2/M) cos(v_j^T x + b_j).
struct RFFBasis {
  Matrix frequencies;  // M x d, row j is v_j
  Vector phases;       // M, uniform on [0, 2 pi)
  std::uint64_t seed = 0;

  Eigen::Index feature_count() const noexcept { return frequencies.rows(); }
  Eigen::Index dimension() const noexcept { return frequencies.cols(); }
  double amplitude() const { return std::sqrt(2.0 / static_cast<double>(feature_count())); }
};

/// Frequencies and phases come from independent child streams of `seed`, and
/// frequencies are drawn row by row, so a basis of size M is a prefix of any
/// larger basis with the same seed.
template <SpectralKernel K>
RFFBasis sample_rff_basis(Eigen::Index feature_count, Eigen::Index dim, const K& kernel,
                          std::uint64_t seed) {
  if (feature_count < 1) throw ConfigError("feature_count", "must be >= 1");
  if (dim < 1) throw ConfigError("dimension", "must be >= 1");
  RFFBasis basis;
  basis.seed = seed;
  basis.frequencies.resize(feature_count, dim);
  Rng freq_rng = make_rng(seed, {stream::kFrequencies});
  kernel.sample_frequencies(basis.frequencies, freq_rng);
  Rng phase_rng = make_rng(seed, {stream::kPhases});
  std::uniform_real_distribution<double> uniform(0.0, 2.0 * std::numbers::pi);
  basis.phases.resize(feature_count);
  for (Eigen::Index j = 0; j < feature_count; ++j) basis.phases[j] = uniform(phase_rng);
  return basis;
}

inline RFFBasis sample_rff_basis(Eigen::Index feature_count, Eigen::Index dim,
                                 const KernelParams& params, std::uint64_t seed) {
  return sample_rff_basis(feature_count, dim, SquaredExponentialKernel(params), seed);
}

namespace detail {
// Plain loops over std::cos / std::sin; the libm calls run far faster than
// Eigen's generic array cos() for double.
template <class Dense>
void scaled_cos_in_place(Dense& z, double scale) {
  double* p = z.data();
  for (Eigen::Index k = 0; k < z.size(); ++k) p[k] = scale * std::cos(p[k]);
}
template <class Dense>
void scaled_sin_in_place(Dense& z, double scale) {
  double* p = z.data();
  for (Eigen::Index k = 0; k < z.size(); ++k) p[k] = scale * std::sin(p[k]);
}

// v_j^T x + b_j summed in a fixed order, so a point's features do not depend
// on which batch it was evaluated in.
template <class Row>
double rff_argument(const RFFBasis& basis, Eigen::Index j, const Row& x) {
  double z = 0.0;
  for (Eigen::Index k = 0; k < basis.frequencies.cols(); ++k) z += basis.frequencies(j, k) * x(k);
  return z + basis.phases[j];
}

inline Vector rff_arguments(const RFFBasis& basis, const Vector& x) {
  Vector z(basis.feature_count());
  for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rff_argument(basis, j, x);
  return z;
}
}  // namespace detail

inline Vector rff_features(const RFFBasis& basis, const Vector& x) {
  require_same_dim(x.size(), basis.dimension(), "rff_features");
  Vector z = detail::rff_arguments(basis, x);
  detail::scaled_cos_in_place(z, basis.amplitude());
  return z;
}

/// Feature map for every row of `points` (n x d); returns n x M.
inline Matrix rff_feature_rows(const RFFBasis& basis, const Matrix& points) {
  require_same_dim(points.cols(), basis.dimension(), "rff_feature_rows");
  Matrix z(points.rows(), basis.feature_count());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = detail::rff_argument(basis, j, points.row(i));
  }
  detail::scaled_cos_in_place(z, basis.amplitude());
  return z;
}

/// M x d Jacobian of rff_features; row j = -sqrt(2/M) sin(v_j^T x + b_j) v_j^T.
inline Matrix rff_feature_jacobian(const RFFBasis& basis, const Vector& x) {
  require_same_dim(x.size(), basis.dimension(), "rff_feature_jacobian");
  Vector s = detail::rff_arguments(basis, x);
  detail::scaled_sin_in_place(s, -basis.amplitude());
  return s.asDiagonal() * basis.frequencies;
}

/// grad_phi(x)^T c without materializing the Jacobian.
inline Vector rff_jacobian_transpose_times(const RFFBasis& basis, const Vector& x, const Vector& c) {
  require_same_dim(x.size(), basis.dimension(), "rff_jacobian_transpose_times");
  require_same_dim(c.size(), basis.feature_count(), "rff_jacobian_transpose_times");
  Vector s = detail::rff_arguments(basis, x);
  detail::scaled_sin_in_place(s, -basis.amplitude());
  s.array() *= c.array();
  return basis.frequencies.transpose() * s;
}

}  // namespace fzoos
