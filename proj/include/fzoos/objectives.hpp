#pragma once

// Federated black-box objectives. Optimization always runs on the normalized
// box [0, 1]^d; a DomainMap converts to the objective's raw coordinates, and
// every gradient the library reports is taken with respect to normalized
// coordinates.

#include "fzoos/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>

namespace fzoos {

/// Affine map between a raw box and [0, 1]^d.
class DomainMap {
 public:
  DomainMap(Vector lower, Vector upper) : lower_(std::move(lower)), upper_(std::move(upper)) {
    require_same_dim(lower_.size(), upper_.size(), "DomainMap");
    if (!((upper_ - lower_).array() > 0.0).all()) throw InputError("DomainMap: upper must exceed lower");
  }

  static DomainMap uniform(Eigen::Index d, double lo, double hi) {
    return DomainMap(Vector::Constant(d, lo), Vector::Constant(d, hi));
  }

  Eigen::Index dim() const noexcept { return lower_.size(); }
  const Vector& lower() const noexcept { return lower_; }
  const Vector& upper() const noexcept { return upper_; }
  Vector scale() const { return upper_ - lower_; }

  Vector to_raw(const Vector& x_norm) const {
    require_same_dim(x_norm.size(), dim(), "DomainMap::to_raw");
    return lower_ + scale().cwiseProduct(x_norm);
  }
  Vector to_normalized(const Vector& x_raw) const {
    require_same_dim(x_raw.size(), dim(), "DomainMap::to_normalized");
    return (x_raw - lower_).cwiseQuotient(scale());
  }

 private:
  Vector lower_;
  Vector upper_;
};

/// Tolerance within which out-of-box inputs are clamped instead of rejected.
inline constexpr double kDomainSlack = 1e-9;

/// Validates x_norm against [0, 1]^d, clamping excursions up to kDomainSlack.
/// Returns true when a clamp happened.
inline bool clamp_to_unit_box(Vector& x_norm) {
  bool clamped = false;
  for (Eigen::Index j = 0; j < x_norm.size(); ++j) {
    const double v = x_norm[j];
    if (!std::isfinite(v) || v < -kDomainSlack || v > 1.0 + kDomainSlack) {
      throw InputError("input outside the normalized domain at coordinate " + std::to_string(j) + ": " +
                       std::to_string(v));
    }
    if (v < 0.0 || v > 1.0) {
      x_norm[j] = std::clamp(v, 0.0, 1.0);
      clamped = true;
    }
  }
  return clamped;
}

/// An objective split across N clients, queried through noisy local evaluations.
///
/// Implementations count every local query; counters are atomic so client
/// workers may evaluate concurrently.
class FederatedObjective {
 public:
  FederatedObjective(DomainMap domain, int clients, double noise_std)
      : domain_(std::move(domain)),
        clients_(clients),
        noise_std_(noise_std),
        queries_(std::make_unique<std::atomic<std::uint64_t>[]>(static_cast<std::size_t>(clients))) {
    if (clients < 1) throw ConfigError("clients", "must be >= 1");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std", "must be >= 0");
    for (int i = 0; i < clients; ++i) queries_[static_cast<std::size_t>(i)] = 0;
  }
  virtual ~FederatedObjective() = default;
  FederatedObjective(const FederatedObjective&) = delete;
  FederatedObjective& operator=(const FederatedObjective&) = delete;

  Eigen::Index dimension() const noexcept { return domain_.dim(); }
  int client_count() const noexcept { return clients_; }
  double noise_std() const noexcept { return noise_std_; }
  const DomainMap& domain() const noexcept { return domain_; }

  /// Noiseless local value at a raw input.
  virtual double local_value_raw(int client, const Vector& x_raw) const = 0;

  /// y_i(x) = f_i(x) + zeta, zeta ~ N(0, noise_std^2), drawn from the caller's stream.
  double evaluate_local(int client, const Vector& x_norm, Rng& rng) {
    if (client < 0 || client >= clients_) throw InputError("evaluate_local: client index out of range");
    require_same_dim(x_norm.size(), dimension(), "evaluate_local");
    Vector x = x_norm;
    if (clamp_to_unit_box(x)) clamp_warnings_.fetch_add(1, std::memory_order_relaxed);
    queries_[static_cast<std::size_t>(client)].fetch_add(1, std::memory_order_relaxed);
    double y = local_value_raw(client, domain_.to_raw(x));
    if (noise_std_ > 0.0) {
      std::normal_distribution<double> noise(0.0, noise_std_);
      y += noise(rng);
    }
    return y;
  }

  /// Noiseless global objective F = (1/N) sum_i f_i at a normalized input.
  virtual double global_value(const Vector& x_norm) const {
    const Vector raw = domain_.to_raw(x_norm);
    double acc = 0.0;
    for (int i = 0; i < clients_; ++i) acc += local_value_raw(i, raw);
    return acc / clients_;
  }

  /// Analytic grad F in normalized coordinates, when the objective knows it.
  virtual std::optional<Vector> global_gradient(const Vector& /*x_norm*/) const { return std::nullopt; }
  /// Analytic grad f_i in normalized coordinates, when known.
  virtual std::optional<Vector> local_gradient(int /*client*/, const Vector& /*x_norm*/) const {
    return std::nullopt;
  }
  /// Known optimal value F*, when available.
  virtual std::optional<double> global_minimum() const { return std::nullopt; }

  std::uint64_t queries(int client) const {
    return queries_[static_cast<std::size_t>(client)].load(std::memory_order_relaxed);
  }
  std::uint64_t total_queries() const {
    std::uint64_t sum = 0;
    for (int i = 0; i < clients_; ++i) sum += queries(i);
    return sum;
  }
  std::uint64_t clamp_warnings() const { return clamp_warnings_.load(std::memory_order_relaxed); }

 private:
  DomainMap domain_;
  int clients_;
  double noise_std_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> queries_;
  std::atomic<std::uint64_t> clamp_warnings_{0};
};

/// Plug-in objective backed by an arbitrary callable f(client, x_raw).
class BlackBoxObjective final : public FederatedObjective {
 public:
  using LocalFunction = std::function<double(int client, const Vector& x_raw)>;

  BlackBoxObjective(DomainMap domain, int clients, double noise_std, LocalFunction f)
      : FederatedObjective(std::move(domain), clients, noise_std), f_(std::move(f)) {
    if (!f_) throw InputError("BlackBoxObjective: empty function");
  }

  double local_value_raw(int client, const Vector& x_raw) const override { return f_(client, x_raw); }

 private:
  LocalFunction f_;
};

/// Synthetic heterogeneous quadratics on [-10, 10]^d:
///
///   f_i(x) = ( sum_j [ (1 + C(a_ij - 1/N)) x_j^2 + (1 + C(b_ij - 1/N)) x_j ] + 1 ) / (10 d)
///
/// with each column (a_1j .. a_Nj) and (b_1j .. b_Nj) drawn from Dir(1/N, ..., 1/N),
/// so the client average is always F(x) = (sum_j [x_j^2 + x_j] + 1) / (10 d).
class QuadraticSuite final : public FederatedObjective {
 public:
  static constexpr double kRawLower = -10.0;
  static constexpr double kRawUpper = 10.0;

  QuadraticSuite(Matrix a, Matrix b, double heterogeneity, double noise_std, std::uint64_t seed)
      : FederatedObjective(DomainMap::uniform(a.cols(), kRawLower, kRawUpper), static_cast<int>(a.rows()),
                           noise_std),
        a_(std::move(a)),
        b_(std::move(b)),
        heterogeneity_(heterogeneity),
        seed_(seed) {
    if (a_.rows() != b_.rows() || a_.cols() != b_.cols()) throw InputError("QuadraticSuite: a and b differ in shape");
    const double inv_n = 1.0 / static_cast<double>(a_.rows());
    quad_ = (heterogeneity_ * (a_.array() - inv_n) + 1.0).matrix();
    lin_ = (heterogeneity_ * (b_.array() - inv_n) + 1.0).matrix();
  }

  double heterogeneity() const noexcept { return heterogeneity_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const Matrix& dirichlet_a() const noexcept { return a_; }
  const Matrix& dirichlet_b() const noexcept { return b_; }

  double local_value_raw(int client, const Vector& x) const override {
    const double d = static_cast<double>(dimension());
    const auto qa = quad_.row(client).transpose().array();
    const auto qb = lin_.row(client).transpose().array();
    return ((qa * x.array().square() + qb * x.array()).sum() + 1.0) / (10.0 * d);
  }

  double global_value(const Vector& x_norm) const override {
    const Vector x = domain().to_raw(x_norm);
    return global_value_raw(x);
  }

  double global_value_raw(const Vector& x) const {
    const double d = static_cast<double>(dimension());
    return ((x.array().square() + x.array()).sum() + 1.0) / (10.0 * d);
  }

  /// grad F in normalized coordinates: (2 x_j + 1) / (10 d) times the raw-box width.
  std::optional<Vector> global_gradient(const Vector& x_norm) const override {
    const Vector x = domain().to_raw(x_norm);
    const double d = static_cast<double>(dimension());
    return ((2.0 * x.array() + 1.0) / (10.0 * d) * domain().scale().array()).matrix();
  }

  std::optional<Vector> local_gradient(int client, const Vector& x_norm) const override {
    const Vector x = domain().to_raw(x_norm);
    const double d = static_cast<double>(dimension());
    const auto qa = quad_.row(client).transpose().array();
    const auto qb = lin_.row(client).transpose().array();
    return ((2.0 * qa * x.array() + qb) / (10.0 * d) * domain().scale().array()).matrix();
  }

  /// F is minimized at raw x_j = -1/2 with F* = (1 - d/4) / (10 d).
  std::optional<double> global_minimum() const override {
    const double d = static_cast<double>(dimension());
    return (1.0 - 0.25 * d) / (10.0 * d);
  }

  Vector minimizer_normalized() const {
    return domain().to_normalized(Vector::Constant(dimension(), -0.5));
  }

 private:
  Matrix a_;
  Matrix b_;
  Matrix quad_;
  Matrix lin_;
  double heterogeneity_;
  std::uint64_t seed_;
};

namespace detail {
/// One draw from Dir(alpha, ..., alpha) over `n` categories.
inline Vector sample_dirichlet(int n, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  Vector v(n);
  for (;;) {
    for (int i = 0; i < n; ++i) v[i] = gamma(rng);
    const double s = v.sum();
    if (s > 0.0 && std::isfinite(s)) return v / s;
  }
}
}  // namespace detail

inline std::unique_ptr<QuadraticSuite> make_quadratic_suite(int d, int n, double heterogeneity, double noise_std,
                                                            std::uint64_t seed) {
  if (d < 1) throw ConfigError("dimension", "must be >= 1");
  if (n < 1) throw ConfigError("clients", "must be >= 1");
  if (!(heterogeneity >= 0.0) || !std::isfinite(heterogeneity)) throw ConfigError("heterogeneity", "must be >= 0");
  Rng rng = make_rng(seed, {stream::kSuite});
  const double alpha = 1.0 / static_cast<double>(n);
  Matrix a(n, d);
  Matrix b(n, d);
  for (int j = 0; j < d; ++j) {
    a.col(j) = detail::sample_dirichlet(n, alpha, rng);
    b.col(j) = detail::sample_dirichlet(n, alpha, rng);
  }
  return std::make_unique<QuadraticSuite>(std::move(a), std::move(b), heterogeneity, noise_std, seed);
}

/// grad F in normalized coordinates; throws when the objective has no oracle.
inline Vector true_global_gradient(const FederatedObjective& objective, const Vector& x_norm) {
  auto g = objective.global_gradient(x_norm);
  if (!g) throw InputError("objective has no analytic global gradient");
  return *g;
}

/// Empirical heterogeneity bound: max over uniformly sampled points of
/// (1/N) sum_i |grad f_i(x) - grad F(x)|^2.
inline double heterogeneity_G(const FederatedObjective& objective, int sample_count, Rng& rng) {
  if (sample_count < 1) throw ConfigError("sample_count", "must be >= 1");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Eigen::Index d = objective.dimension();
  double worst = 0.0;
  for (int s = 0; s < sample_count; ++s) {
    Vector x(d);
    for (Eigen::Index j = 0; j < d; ++j) x[j] = unit(rng);
    const Vector gf = true_global_gradient(objective, x);
    double acc = 0.0;
    for (int i = 0; i < objective.client_count(); ++i) {
      auto gi = objective.local_gradient(i, x);
      if (!gi) throw InputError("objective has no analytic local gradients");
      acc += (*gi - gf).squaredNorm();
    }
    worst = std::max(worst, acc / objective.client_count());
  }
  return worst;
}

}  // namespace fzoos
