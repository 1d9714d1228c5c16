#pragma once

// Trajectory-conditioned gradient surrogates.
//
// The exact surrogate is the derived GP over grad f obtained by conditioning a
// zero-mean GP prior on a client's query history:
//
//   mean(x) = dk(x)^T (K + s2 I)^{-1} y
//   cov(x)  = d_z d_z' k(x, x) - dk(x)^T (K + s2 I)^{-1} dk(x)
//
// where dk(x) is the n x d matrix whose row tau is d_x k(x, x_tau). Only the
// diagonal slice cov(x) = cov(x, x) of the full cross-covariance is
// implemented; it is the only one the optimizer and diagnostics consume.
//
// The compressed surrogate replaces k with its random-feature approximation,
// which folds the whole trajectory into one M-vector
//
//   w = Phi (Phi^T Phi + s2 I)^{-1} y,     mean_hat(x) = grad_phi(x)^T w,
//
// and is what clients exchange with the server.

#include "fzoos/core.hpp"
#include "fzoos/kernel_rff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

namespace fzoos {

/// Append-only history of (input, noisy value) pairs for one client.
///
/// An optional window restricts the surrogate to the most recent `window`
/// observations; the full history is retained either way.
class TrajectoryDataset {
 public:
  static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

  TrajectoryDataset(Eigen::Index dim, double noise_variance, std::size_t window = kUnlimited)
      : dim_(dim), noise_variance_(noise_variance), window_(window) {
    if (dim < 1) throw InputError("TrajectoryDataset: dimension must be >= 1");
    if (!(noise_variance > 0.0) || !std::isfinite(noise_variance)) {
      throw ConfigError("gp_noise_variance", "must be positive (K + s2 I must be invertible)");
    }
    if (window == 0) throw ConfigError("trajectory_window", "must be >= 1");
  }

  void append(const Vector& x, double y) {
    require_same_dim(x.size(), dim_, "TrajectoryDataset::append");
    inputs_.insert(inputs_.end(), x.data(), x.data() + dim_);
    values_.push_back(y);
  }

  Eigen::Index dim() const noexcept { return dim_; }
  double noise_variance() const noexcept { return noise_variance_; }
  std::size_t window() const noexcept { return window_; }
  std::size_t total_size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  /// Number of observations the surrogate conditions on.
  std::size_t size() const noexcept { return std::min(values_.size(), window_); }

  /// Active inputs as an n x d matrix, oldest first.
  Matrix inputs() const {
    const std::size_t n = size();
    const std::size_t first = values_.size() - n;
    Matrix out(static_cast<Eigen::Index>(n), dim_);
    for (std::size_t r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < dim_; ++c) {
        out(static_cast<Eigen::Index>(r), c) = inputs_[(first + r) * dim_ + c];
      }
    }
    return out;
  }

  Vector values() const {
    const std::size_t n = size();
    const std::size_t first = values_.size() - n;
    Vector out(static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) out[static_cast<Eigen::Index>(r)] = values_[first + r];
    return out;
  }

  Vector input(std::size_t global_index) const {
    return Eigen::Map<const Vector>(inputs_.data() + global_index * dim_, dim_);
  }
  double value(std::size_t global_index) const { return values_.at(global_index); }

 private:
  Eigen::Index dim_;
  double noise_variance_;
  std::size_t window_;
  std::vector<double> inputs_;
  std::vector<double> values_;
};

/// Gradient posterior at one query point.
struct GradientPosterior {
  Vector mean;
  Matrix covariance;
  Vector query_point;
};

/// Cholesky of a symmetric positive-definite matrix. On failure, adds
/// 1e-8 * (trace / n) to the diagonal and retries once.
inline Eigen::LLT<Matrix> factorize_with_jitter(Matrix a) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() == Eigen::Success) return llt;
  const double n = static_cast<double>(a.rows());
  const double jitter = 1e-8 * a.trace() / n;
  a.diagonal().array() += jitter;
  llt.compute(a);
  if (llt.info() == Eigen::Success) return llt;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  std::ostringstream msg;
  msg << "Cholesky factorization failed after jitter " << jitter << " (n=" << a.rows()
      << ", eigenvalue range [" << ev.minCoeff() << ", " << ev.maxCoeff()
      << "], condition estimate " << (ev.minCoeff() > 0 ? ev.maxCoeff() / ev.minCoeff()
                                                        : std::numeric_limits<double>::infinity())
      << ")";
  throw NumericalError(msg.str());
}

/// Exact derived-GP posterior over the gradient, factorized once for a fixed
/// trajectory and evaluated at any number of points.
template <ShiftInvariantKernel K = SquaredExponentialKernel>
class GradientPosteriorModel {
 public:
  GradientPosteriorModel(const TrajectoryDataset& traj, K kernel)
      : kernel_(std::move(kernel)), dim_(traj.dim()), inputs_(traj.inputs()) {
    prior_ = kernel_.prior_gradient_covariance(dim_);
    const Eigen::Index n = inputs_.rows();
    if (n == 0) return;
    Matrix gram(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
      gram(a, a) = kernel_(inputs_.row(a).transpose(), inputs_.row(a).transpose());
      for (Eigen::Index b = 0; b < a; ++b) {
        const double k = kernel_(inputs_.row(a).transpose(), inputs_.row(b).transpose());
        gram(a, b) = k;
        gram(b, a) = k;
      }
    }
    gram.diagonal().array() += traj.noise_variance();
    llt_ = factorize_with_jitter(std::move(gram));
    alpha_ = llt_.solve(traj.values());
  }

  Eigen::Index dim() const noexcept { return dim_; }
  Eigen::Index observation_count() const noexcept { return inputs_.rows(); }
  const K& kernel() const noexcept { return kernel_; }

  /// Posterior mean of f itself, k(x)^T (K + s2 I)^{-1} y.
  double mean_value(const Vector& x) const {
    require_same_dim(x.size(), dim_, "posterior mean");
    double acc = 0.0;
    for (Eigen::Index t = 0; t < inputs_.rows(); ++t) {
      acc += kernel_(x, inputs_.row(t).transpose()) * alpha_[t];
    }
    return acc;
  }

  Vector mean_gradient(const Vector& x) const {
    require_same_dim(x.size(), dim_, "posterior_gradient");
    if (inputs_.rows() == 0) return Vector::Zero(dim_);
    return kernel_gradients(x).transpose() * alpha_;
  }

  Matrix covariance(const Vector& x) const {
    require_same_dim(x.size(), dim_, "posterior_gradient");
    if (inputs_.rows() == 0) return prior_;
    Matrix z = kernel_gradients(x);
    llt_.matrixL().solveInPlace(z);
    Matrix cov = prior_;
    cov.noalias() -= z.transpose() * z;
    return cov;
  }

  GradientPosterior posterior(const Vector& x) const {
    return GradientPosterior{mean_gradient(x), covariance(x), x};
  }

  /// Spectral norm of the gradient covariance at each candidate, with one
  /// triangular solve shared by all candidates.
  std::vector<double> uncertainty_norms(std::span<const Vector> candidates) const {
    std::vector<double> out;
    out.reserve(candidates.size());
    const Eigen::Index n = inputs_.rows();
    if (n == 0) {
      const double prior_norm = spectral_norm_symmetric(prior_);
      out.assign(candidates.size(), prior_norm);
      return out;
    }
    const auto c = static_cast<Eigen::Index>(candidates.size());
    Matrix stacked(n, c * dim_);
    for (Eigen::Index i = 0; i < c; ++i) {
      require_same_dim(candidates[i].size(), dim_, "uncertainty_norms");
      stacked.middleCols(i * dim_, dim_) = kernel_gradients(candidates[i]);
    }
    llt_.matrixL().solveInPlace(stacked);
    Matrix cov(dim_, dim_);
    for (Eigen::Index i = 0; i < c; ++i) {
      const auto block = stacked.middleCols(i * dim_, dim_);
      cov = prior_;
      cov.noalias() -= block.transpose() * block;
      out.push_back(spectral_norm_symmetric(cov));
    }
    return out;
  }

 private:
  /// n x d matrix of d_x k(x, x_tau).
  Matrix kernel_gradients(const Vector& x) const {
    if constexpr (requires { kernel_.grad_first_rows(x, inputs_); }) {
      return kernel_.grad_first_rows(x, inputs_);
    } else {
      Matrix j(inputs_.rows(), dim_);
      for (Eigen::Index t = 0; t < inputs_.rows(); ++t) {
        j.row(t) = kernel_.grad_first(x, inputs_.row(t).transpose()).transpose();
      }
      return j;
    }
  }

  K kernel_;
  Eigen::Index dim_;
  Matrix inputs_;
  Matrix prior_;
  Eigen::LLT<Matrix> llt_;
  Vector alpha_;
};

template <ShiftInvariantKernel K>
GradientPosterior posterior_gradient(const TrajectoryDataset& traj, const K& kernel, const Vector& x) {
  return GradientPosteriorModel<K>(traj, kernel).posterior(x);
}

inline GradientPosterior posterior_gradient(const TrajectoryDataset& traj, const KernelParams& params,
                                            const Vector& x) {
  return posterior_gradient(traj, SquaredExponentialKernel(params), x);
}

inline double uncertainty_norm(const GradientPosterior& posterior) {
  return spectral_norm_symmetric(posterior.covariance);
}

/// Compressed surrogate exchanged between clients and the server.
struct WeightVector {
  Vector weights;
  std::uint64_t basis_seed = 0;
  std::uint64_t observation_count = 0;
};

/// w = Phi (K_hat + s2 I)^{-1} y from precomputed feature rows (n x M, one per
/// windowed observation); only the n x n system is ever formed.
inline WeightVector compute_weight_vector(const TrajectoryDataset& traj, const RFFBasis& basis,
                                          const Matrix& feature_rows) {
  if (traj.empty()) throw InputError("compute_weight_vector: trajectory is empty");
  require_same_dim(traj.dim(), basis.dimension(), "compute_weight_vector");
  const auto n = static_cast<Eigen::Index>(traj.size());
  if (feature_rows.rows() != n || feature_rows.cols() != basis.feature_count()) {
    throw InputError("compute_weight_vector: feature rows do not match the trajectory window");
  }
  Matrix gram = Matrix::Zero(n, n);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(feature_rows);
  gram = gram.selfadjointView<Eigen::Lower>();
  gram.diagonal().array() += traj.noise_variance();
  const Vector beta = factorize_with_jitter(std::move(gram)).solve(traj.values());
  WeightVector w;
  w.weights = feature_rows.transpose() * beta;
  w.basis_seed = basis.seed;
  w.observation_count = static_cast<std::uint64_t>(n);
  return w;
}

inline WeightVector compute_weight_vector(const TrajectoryDataset& traj, const RFFBasis& basis) {
  if (traj.empty()) throw InputError("compute_weight_vector: trajectory is empty");
  require_same_dim(traj.dim(), basis.dimension(), "compute_weight_vector");
  return compute_weight_vector(traj, basis, rff_feature_rows(basis, traj.inputs()));
}

/// Feature rows of a growing trajectory, computed once per observation and
/// trimmed to the trajectory window.
class FeatureCache {
 public:
  explicit FeatureCache(const RFFBasis& basis) : basis_(&basis) {}

  /// Rows for the current window of `traj`, in window order.
  const Matrix& rows(const TrajectoryDataset& traj) {
    require_same_dim(traj.dim(), basis_->dimension(), "FeatureCache");
    const std::size_t total = traj.total_size();
    if (total < synced_) throw InputError("FeatureCache: trajectory shrank");
    if (total == synced_) return rows_;
    const std::size_t n = traj.size();
    const std::size_t first = total - n;
    const std::size_t fresh_begin = std::max(synced_, first);
    Matrix fresh_inputs(static_cast<Eigen::Index>(total - fresh_begin), traj.dim());
    for (std::size_t g = fresh_begin; g < total; ++g) {
      fresh_inputs.row(static_cast<Eigen::Index>(g - fresh_begin)) = traj.input(g).transpose();
    }
    const Matrix fresh = rff_feature_rows(*basis_, fresh_inputs);
    const auto kept = static_cast<Eigen::Index>(fresh_begin - first);
    Matrix next(static_cast<Eigen::Index>(n), basis_->feature_count());
    if (kept > 0) next.topRows(kept) = rows_.bottomRows(kept);
    next.bottomRows(fresh.rows()) = fresh;
    rows_ = std::move(next);
    synced_ = total;
    return rows_;
  }

 private:
  const RFFBasis* basis_;
  Matrix rows_;
  std::size_t synced_ = 0;
};

inline Vector surrogate_gradient_from_weights(const RFFBasis& basis, const WeightVector& w, const Vector& x) {
  if (w.weights.size() != basis.feature_count()) {
    throw InputError("surrogate_gradient_from_weights: weight length " + std::to_string(w.weights.size()) +
                     " does not match basis size " + std::to_string(basis.feature_count()));
  }
  if (w.basis_seed != basis.seed) throw InputError("surrogate_gradient_from_weights: weights were built on another basis");
  return rff_jacobian_transpose_times(basis, x, w.weights);
}

/// Mean of equally sized vectors accumulated in index order as
/// v_0 + sum_i (v_i - v_0) / N, which returns v_0 exactly when all inputs agree.
inline Vector ordered_mean(std::span<const Vector> vs) {
  if (vs.empty()) throw InputError("mean of an empty list");
  const Vector& first = vs.front();
  Vector acc = Vector::Zero(first.size());
  for (const auto& v : vs) {
    require_same_dim(v.size(), first.size(), "mean");
    acc += v - first;
  }
  return first + acc / static_cast<double>(vs.size());
}

/// Global surrogate weights: elementwise mean in client-index order.
inline WeightVector aggregate_weight_vectors(std::span<const WeightVector> locals) {
  if (locals.empty()) throw InputError("aggregate_weight_vectors: empty list");
  std::vector<Vector> ws;
  ws.reserve(locals.size());
  std::uint64_t obs = 0;
  for (const auto& w : locals) {
    if (w.basis_seed != locals.front().basis_seed) {
      throw InputError("aggregate_weight_vectors: clients use different basis seeds");
    }
    require_same_dim(w.weights.size(), locals.front().weights.size(), "aggregate_weight_vectors");
    ws.push_back(w.weights);
    obs += w.observation_count;
  }
  return WeightVector{ordered_mean(ws), locals.front().basis_seed, obs};
}

// Dump format: basis_seed (u64) | M (u32) | M weights (f64), all little-endian.
namespace detail {
template <class T>
void put_le(std::vector<std::byte>& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::byte>((v >> (8 * b)) & 0xff));
}
template <class T>
T get_le(std::span<const std::byte> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InputError("weight vector dump is truncated");
  T v = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) v |= static_cast<T>(std::to_integer<unsigned>(in[pos + b])) << (8 * b);
  pos += sizeof(T);
  return v;
}
}  // namespace detail

inline std::vector<std::byte> serialize_weight_vector(const WeightVector& w) {
  std::vector<std::byte> out;
  out.reserve(12 + 8 * static_cast<std::size_t>(w.weights.size()));
  detail::put_le<std::uint64_t>(out, w.basis_seed);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.weights.size()));
  for (Eigen::Index j = 0; j < w.weights.size(); ++j) {
    detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(w.weights[j]));
  }
  return out;
}

/// Inverse of serialize_weight_vector. observation_count is not part of the dump.
inline WeightVector deserialize_weight_vector(std::span<const std::byte> bytes) {
  std::size_t pos = 0;
  WeightVector w;
  w.basis_seed = detail::get_le<std::uint64_t>(bytes, pos);
  const auto m = detail::get_le<std::uint32_t>(bytes, pos);
  w.weights.resize(m);
  for (std::uint32_t j = 0; j < m; ++j) {
    w.weights[j] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
  }
  if (pos != bytes.size()) throw InputError("weight vector dump has trailing bytes");
  return w;
}

}  // namespace fzoos
