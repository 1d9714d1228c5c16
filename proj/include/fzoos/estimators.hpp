#pragma once

// Per-iteration gradient estimates. Every estimator has the unified form
//
//   g_hat = g + gamma * correction
//
// with g a local gradient estimate, correction a global-minus-local gradient
// difference and gamma in [0, 1] the correction length. The specialized
// functions below all route through combine() so each one agrees bitwise with
// the generic form.

#include "fzoos/core.hpp"
#include "fzoos/kernel_rff.hpp"
#include "fzoos/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fzoos {

inline Vector combine(const Vector& g, const Vector& correction, double gamma) {
  require_same_dim(g.size(), correction.size(), "gradient estimate");
  return g + gamma * correction;
}

/// Parameters of the correction-length bound used by the theoretical schedule.
struct GammaTheoryParams {
  double heterogeneity = 0.0;  // G
  double omega = 1.0;
  double kappa = 1.0;
  double rho = 1.0;
  double rff_error = 0.0;  // epsilon
  int clients = 1;         // N
  int local_iterations = 1;  // T
};

struct GammaSchedule {
  enum class Kind { Constant, InverseIteration, Theoretical };

  Kind kind = Kind::InverseIteration;
  double constant_value = 1.0;
  GammaTheoryParams theory{};

  static GammaSchedule constant(double value) { return {Kind::Constant, value, {}}; }
  static GammaSchedule inverse_iteration() { return {Kind::InverseIteration, 1.0, {}}; }
  static GammaSchedule theoretical(GammaTheoryParams p) { return {Kind::Theoretical, 1.0, p}; }

  void validate() const {
    switch (kind) {
      case Kind::Constant:
        if (!(constant_value >= 0.0 && constant_value <= 1.0)) {
          throw ConfigError("gamma_constant", "must lie in [0, 1]");
        }
        break;
      case Kind::InverseIteration:
        break;
      case Kind::Theoretical:
        if (!(theory.heterogeneity >= 0.0)) throw ConfigError("gamma_theory_G", "must be >= 0");
        if (!(theory.omega > 0.0)) throw ConfigError("gamma_theory_omega", "must be > 0");
        if (!(theory.kappa > 0.0)) throw ConfigError("gamma_theory_kappa", "must be > 0");
        if (!(theory.rho > 0.0 && theory.rho <= 1.0)) throw ConfigError("gamma_theory_rho", "must lie in (0, 1]");
        if (!(theory.rff_error >= 0.0)) throw ConfigError("gamma_theory_epsilon", "must be >= 0");
        if (theory.clients < 1) throw ConfigError("gamma_theory_N", "must be >= 1");
        if (theory.local_iterations < 1) throw ConfigError("gamma_theory_T", "must be >= 1");
        break;
    }
  }
};

inline std::string_view to_string(GammaSchedule::Kind kind) {
  switch (kind) {
    case GammaSchedule::Kind::Constant: return "constant";
    case GammaSchedule::Kind::InverseIteration: return "inverse_iteration";
    case GammaSchedule::Kind::Theoretical: return "theoretical";
  }
  return "?";
}

/// Correction length at round r >= 1, local iteration t >= 1, clamped to [0, 1].
///
/// theoretical: G / (G + 2 omega kappa rho^{(r-1)T} + 2 N eps).
inline double gamma_value(const GammaSchedule& schedule, int round, int iteration) {
  if (round < 1 || iteration < 1) throw InputError("gamma_value: round and iteration start at 1");
  schedule.validate();
  double g = 0.0;
  switch (schedule.kind) {
    case GammaSchedule::Kind::Constant:
      g = schedule.constant_value;
      break;
    case GammaSchedule::Kind::InverseIteration:
      g = 1.0 / static_cast<double>(iteration);
      break;
    case GammaSchedule::Kind::Theoretical: {
      const auto& p = schedule.theory;
      if (p.heterogeneity == 0.0) return 0.0;
      const double decay = std::pow(p.rho, static_cast<double>(round - 1) * p.local_iterations);
      g = p.heterogeneity /
          (p.heterogeneity + 2.0 * p.omega * p.kappa * decay + 2.0 * p.clients * p.rff_error);
      break;
    }
  }
  return std::clamp(g, 0.0, 1.0);
}

struct FDParams {
  double smoothing = 0.01;  // lambda, in normalized input units
  int directions = 20;      // Q

  void validate() const {
    if (!(smoothing > 0.0) || !std::isfinite(smoothing)) throw ConfigError("fd_smoothing", "must be > 0");
    if (directions < 1) throw ConfigError("fd_directions", "must be >= 1");
  }
};

struct FDResult {
  Vector gradient;
  int queries_used = 0;
};

template <class F>
concept NoisyEvaluator = std::invocable<F&, const Vector&> &&
                         std::convertible_to<std::invoke_result_t<F&, const Vector&>, double>;

/// Forward differences along the given directions; y(x) is queried once and
/// reused, so the call costs directions.size() + 1 queries.
template <NoisyEvaluator F>
FDResult fd_gradient(F&& query, const Vector& x, double smoothing, std::span<const Vector> directions) {
  if (!(smoothing > 0.0)) throw ConfigError("fd_smoothing", "must be > 0");
  if (directions.empty()) throw ConfigError("fd_directions", "must be >= 1");
  const double base = query(x);
  Vector acc = Vector::Zero(x.size());
  for (const auto& u : directions) {
    require_same_dim(u.size(), x.size(), "fd_gradient");
    const double y = query(x + smoothing * u);
    acc += ((y - base) / smoothing) * u;
  }
  return FDResult{acc / static_cast<double>(directions.size()),
                  static_cast<int>(directions.size()) + 1};
}

/// Gaussian directions u_q ~ N(0, I) drawn from `rng`.
inline std::vector<Vector> sample_directions(Eigen::Index dim, int count, Rng& rng) {
  std::vector<Vector> dirs;
  dirs.reserve(static_cast<std::size_t>(count));
  for (int q = 0; q < count; ++q) dirs.push_back(standard_normal_vector(dim, rng));
  return dirs;
}

template <NoisyEvaluator F>
FDResult fd_gradient(F&& query, const Vector& x, const FDParams& params, Rng& rng) {
  params.validate();
  const auto dirs = sample_directions(x.size(), params.directions, rng);
  return fd_gradient(std::forward<F>(query), x, params.smoothing, std::span<const Vector>(dirs));
}

/// gamma = 0: the finite-difference estimate as is.
inline Vector fedzo_gradient(const Vector& delta) {
  return combine(delta, Vector::Zero(delta.size()), 0.0);
}

/// Proximal pull toward the round-start iterate: delta + gamma (x - anchor).
inline Vector fedprox_gradient(const Vector& delta, const Vector& x, const Vector& anchor, double gamma) {
  require_same_dim(x.size(), anchor.size(), "fedprox_gradient");
  require_same_dim(delta.size(), x.size(), "fedprox_gradient");
  return combine(delta, x - anchor, gamma);
}

/// delta + (mean over clients of anchor estimates - own anchor estimate).
inline Vector scaffold1_gradient(const Vector& delta, const Vector& global_anchor, const Vector& local_anchor) {
  require_same_dim(global_anchor.size(), local_anchor.size(), "scaffold1_gradient");
  require_same_dim(delta.size(), global_anchor.size(), "scaffold1_gradient");
  return combine(delta, global_anchor - local_anchor, 1.0);
}

/// delta + (previous-round mean over all clients - previous-round own mean).
inline Vector scaffold2_gradient(const Vector& delta, const Vector& mean_all, const Vector& mean_self) {
  require_same_dim(mean_all.size(), mean_self.size(), "scaffold2_gradient");
  require_same_dim(delta.size(), mean_all.size(), "scaffold2_gradient");
  return combine(delta, mean_all - mean_self, 1.0);
}

/// End-of-previous-round surrogates a client corrects with.
struct PreviousSurrogates {
  const WeightVector& global;
  const WeightVector& self;
};

/// grad_phi(x)^T w_global - grad_phi(x)^T w_self at the current iterate,
/// evaluated as grad_phi(x)^T (w_global - w_self).
inline Vector fzoos_correction(const RFFBasis& basis, const PreviousSurrogates& prev, const Vector& x) {
  if (prev.global.basis_seed != prev.self.basis_seed || prev.global.basis_seed != basis.seed) {
    throw InputError("fzoos_gradient: weight vectors were built on different bases");
  }
  require_same_dim(prev.global.weights.size(), prev.self.weights.size(), "fzoos_correction");
  const WeightVector diff{prev.global.weights - prev.self.weights, basis.seed, 0};
  return surrogate_gradient_from_weights(basis, diff, x);
}

/// local_exact_grad + gamma * (global surrogate - own surrogate) at x. Without
/// previous-round surrogates (round 1) gamma is forced to 0.
inline Vector fzoos_gradient(const Vector& local_exact_grad, const RFFBasis& basis,
                             const std::optional<PreviousSurrogates>& prev, const Vector& x, double gamma) {
  if (!prev) return combine(local_exact_grad, Vector::Zero(local_exact_grad.size()), 0.0);
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("fzoos_gradient: gamma must lie in [0, 1]");
  return combine(local_exact_grad, fzoos_correction(basis, *prev, x), gamma);
}

/// Local update rule x <- x - step(g).
struct StepRule {
  enum class Kind { GradientDescent, Adam };
  Kind kind = Kind::GradientDescent;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-client optimizer state; reset at the start of every round.
class LocalOptimizer {
 public:
  LocalOptimizer(StepRule rule, double learning_rate, Eigen::Index dim)
      : rule_(rule), lr_(learning_rate), m_(Vector::Zero(dim)), v_(Vector::Zero(dim)) {}

  void step(Vector& x, const Vector& g) {
    require_same_dim(x.size(), g.size(), "optimizer step");
    if (rule_.kind == StepRule::Kind::GradientDescent) {
      x -= lr_ * g;
      return;
    }
    ++t_;
    m_ = rule_.beta1 * m_ + (1.0 - rule_.beta1) * g;
    v_ = rule_.beta2 * v_ + (1.0 - rule_.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(rule_.beta1, t_);
    const double c2 = 1.0 - std::pow(rule_.beta2, t_);
    x.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + rule_.epsilon);
  }

 private:
  StepRule rule_;
  double lr_;
  Vector m_;
  Vector v_;
  int t_ = 0;
};

}  // namespace fzoos
