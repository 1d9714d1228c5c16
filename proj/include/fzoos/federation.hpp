#pragma once

// Simulated federation: parallel client rounds, server aggregation of
// iterates and surrogate weights, and an exact ledger of queries and scalars
// transmitted.
//
// Every client owns a private random stream derived from the master seed, so a
// run is a function of (config, seeds) only, independent of how many worker
// threads execute the clients.

#include "fzoos/core.hpp"
#include "fzoos/diagnostics.hpp"
#include "fzoos/estimators.hpp"
#include "fzoos/kernel_rff.hpp"
#include "fzoos/objectives.hpp"
#include "fzoos/surrogate.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace fzoos {

enum class Algorithm { FedZO, FedProx, Scaffold1, Scaffold2, FZooS };

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::FedZO, Algorithm::FedProx, Algorithm::Scaffold1,
                                               Algorithm::Scaffold2, Algorithm::FZooS};

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FedZO: return "FedZO";
    case Algorithm::FedProx: return "FedProx";
    case Algorithm::Scaffold1: return "SCAFFOLD1";
    case Algorithm::Scaffold2: return "SCAFFOLD2";
    case Algorithm::FZooS: return "FZooS";
  }
  return "?";
}

inline std::optional<Algorithm> parse_algorithm(std::string_view name) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
  };
  const std::string key = lower(name);
  for (Algorithm a : kAllAlgorithms) {
    if (lower(to_string(a)) == key) return a;
  }
  return std::nullopt;
}

/// Uncertainty-driven extra queries around a point.
struct ActiveQueryParams {
  int candidates = 100;
  double radius = 0.01;
  int select = 5;
  bool enabled = true;  // per local iteration

  void validate() const {
    if (select < 1) throw ConfigError("active_select", "must be >= 1");
    if (candidates < select) throw ConfigError("active_candidates", "must be >= active_select");
    if (!(radius > 0.0)) throw ConfigError("active_radius", "must be > 0");
  }
};

struct FederationConfig {
  Algorithm algorithm = Algorithm::FZooS;
  int rounds = 50;
  int local_iterations = 10;
  double learning_rate = 0.01;
  StepRule step_rule{};
  GammaSchedule gamma = GammaSchedule::inverse_iteration();  // FZooS correction length
  double fedprox_gamma = 0.1;
  FDParams fd{};
  bool scaffold2_shared_directions = false;
  ActiveQueryParams active_query{};
  bool neighborhood_query = true;  // one selection pass around x_r after aggregation
  int feature_count = 10000;
  KernelParams kernel{};
  double gp_noise_variance = 1e-4;
  std::size_t trajectory_window = TrajectoryDataset::kUnlimited;
  std::uint64_t master_seed = 0;
  int workers = 1;
  bool shared_client_seeds = false;
  bool record_iterations = false;
  int rho_probes = 10;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds", "must be >= 1");
    if (local_iterations < 1) throw ConfigError("local_iterations", "must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate", "must be > 0");
    gamma.validate();
    if (!(fedprox_gamma >= 0.0 && fedprox_gamma <= 1.0)) throw ConfigError("fedprox_gamma", "must lie in [0, 1]");
    fd.validate();
    active_query.validate();
    if (feature_count < 1) throw ConfigError("feature_count", "must be >= 1");
    kernel.validate();
    if (!(gp_noise_variance > 0.0)) throw ConfigError("gp_noise_variance", "must be > 0");
    if (trajectory_window == 0) throw ConfigError("trajectory_window", "must be >= 1");
    if (workers < 1) throw ConfigError("workers", "must be >= 1");
    if (rho_probes < 0) throw ConfigError("rho_probes", "must be >= 0");
  }
};

/// A module error raised inside a round, tagged with where it happened.
class FederationError : public std::runtime_error {
 public:
  FederationError(int round, int client, const std::string& cause)
      : std::runtime_error("round " + std::to_string(round) +
                           (client >= 0 ? ", client " + std::to_string(client) : std::string(", server")) + ": " +
                           cause),
        round_(round),
        client_(client),
        cause_(cause) {}

  int round() const noexcept { return round_; }
  int client() const noexcept { return client_; }  // -1 for the server phase
  const std::string& cause() const noexcept { return cause_; }

 private:
  int round_;
  int client_;
  std::string cause_;
};

struct ClientState {
  int id = 0;
  Rng rng;
  TrajectoryDataset trajectory;
  std::optional<WeightVector> previous_weights;  // FZooS, own surrogate at end of previous round
  Vector anchor_gradient;                        // SCAFFOLD1, this round
  std::optional<Vector> previous_round_mean;     // SCAFFOLD2, own mean of last round's estimates
  Vector round_estimate_sum;                     // SCAFFOLD2 accumulator
  std::vector<Vector> shared_directions;         // SCAFFOLD2 with shared directions
  std::vector<std::vector<double>> probe_uncertainty;  // per probe, one entry per round
  std::optional<FeatureCache> features;               // FZooS

  ClientState(int client_id, std::uint64_t seed, TrajectoryDataset traj)
      : id(client_id), rng(seed), trajectory(std::move(traj)) {}
};

/// What the server broadcasts for one round.
struct RoundContext {
  int round = 1;
  Vector x_start;
  const RFFBasis* basis = nullptr;                 // FZooS
  const WeightVector* global_weights = nullptr;    // FZooS, w_{r-1}
  Vector global_anchor;                            // SCAFFOLD1
  std::optional<Vector> previous_mean_all;         // SCAFFOLD2
};

struct IterationRecord {
  int round = 0;
  int iteration = 0;
  int client = 0;
  Vector point;       // x_{r,t-1}
  Vector estimate;    // g_hat
  Vector base;        // g
  Vector correction;  // global - local correction vector
  double gamma = 0.0;
  std::optional<double> xi;
  std::optional<double> cosine;
  std::optional<double> gamma_star;
};

struct LocalRoundResult {
  Vector x_final;
  std::vector<IterationRecord> iterations;
};

struct RoundRecord {
  int round = 0;
  Vector iterate;
  double f_value = 0.0;
  std::optional<double> convergence_error;
  std::uint64_t cumulative_queries = 0;
  std::uint64_t cumulative_scalars = 0;
  std::optional<double> mean_disparity;
  std::optional<double> mean_gamma;
};

struct OptimizationTrace {
  Algorithm algorithm = Algorithm::FedZO;
  std::vector<RoundRecord> rounds;  // rounds[0] is the starting point
  std::vector<IterationRecord> iterations;  // filled when record_iterations is set
  std::optional<double> rho;  // FZooS only, mean over clients of the per-client estimate
};

/// Candidates x + delta with delta ~ U[-radius, radius]^d (clamped to the unit
/// box), ranked by gradient-uncertainty norm; returns the `select` most
/// uncertain. Ties keep candidate order.
template <ShiftInvariantKernel K>
std::vector<Vector> active_query_selection(const TrajectoryDataset& traj, const K& kernel, const Vector& center,
                                           const ActiveQueryParams& params, Rng& rng) {
  params.validate();
  require_same_dim(center.size(), traj.dim(), "active_query_selection");
  std::uniform_real_distribution<double> offset(-params.radius, params.radius);
  std::vector<Vector> candidates;
  candidates.reserve(static_cast<std::size_t>(params.candidates));
  for (int c = 0; c < params.candidates; ++c) {
    Vector p = center;
    for (Eigen::Index j = 0; j < p.size(); ++j) p[j] = std::clamp(p[j] + offset(rng), 0.0, 1.0);
    candidates.push_back(std::move(p));
  }
  const GradientPosteriorModel<K> model(traj, kernel);
  const auto scores = model.uncertainty_norms(candidates);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(params.select));
  for (int s = 0; s < params.select; ++s) out.push_back(candidates[order[static_cast<std::size_t>(s)]]);
  return out;
}

inline std::vector<Vector> active_query_selection(const TrajectoryDataset& traj, const KernelParams& kernel,
                                                  const Vector& center, const ActiveQueryParams& params, Rng& rng) {
  return active_query_selection(traj, SquaredExponentialKernel(kernel), center, params, rng);
}

struct AggregateResult {
  Vector iterate;
  std::optional<WeightVector> weights;
};

/// x_r = mean of client iterates; w_r = mean of client weights when given.
inline AggregateResult server_aggregate(std::span<const Vector> client_iterates,
                                        std::optional<std::span<const WeightVector>> client_weights = std::nullopt) {
  AggregateResult out{ordered_mean(client_iterates), std::nullopt};
  if (client_weights) {
    if (client_weights->size() != client_iterates.size()) {
      throw InputError("server_aggregate: weight and iterate counts differ");
    }
    out.weights = aggregate_weight_vectors(*client_weights);
  }
  return out;
}

namespace detail {

inline void project_to_unit_box(Vector& x) { x = x.cwiseMax(0.0).cwiseMin(1.0); }

/// Fills diagnostics for one local iteration.
inline void annotate(IterationRecord& rec, const FederatedObjective& objective) {
  auto grad_f = objective.global_gradient(rec.point);
  if (!grad_f) return;
  rec.xi = gradient_disparity(rec.estimate, *grad_f);
  rec.cosine = try_cosine_similarity(rec.estimate, *grad_f);
  if (rec.correction.squaredNorm() > 0.0) rec.gamma_star = optimal_gamma(*grad_f, rec.base, rec.correction);
}

/// Runs fn(i) for every client on up to `workers` threads and rethrows the
/// lowest-index failure as a FederationError.
inline void for_each_client(int clients, int workers, int round, const std::function<void(int)>& fn) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(clients));
  auto run = [&](int i) {
    try {
      fn(i);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  };
  const int threads = std::min(workers, clients);
  if (threads <= 1) {
    for (int i = 0; i < clients; ++i) run(i);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (int i = w; i < clients; i += threads) run(i);
      });
    }
  }
  for (int i = 0; i < clients; ++i) {
    if (!errors[static_cast<std::size_t>(i)]) continue;
    try {
      std::rethrow_exception(errors[static_cast<std::size_t>(i)]);
    } catch (const FederationError&) {
      throw;
    } catch (const std::exception& e) {
      throw FederationError(round, i, e.what());
    }
  }
}

}  // namespace detail

/// T local steps on one client starting from ctx.x_start.
///
/// FZooS appends the query at the current iterate (and, when enabled, the
/// active queries around it) to the trajectory before conditioning the
/// gradient posterior on it. Baselines spend Q + 1 queries per step on finite
/// differences.
inline LocalRoundResult client_local_round(ClientState& state, const RoundContext& ctx, const FederationConfig& cfg,
                                           FederatedObjective& objective) {
  const int i = state.id;
  const Eigen::Index d = objective.dimension();
  require_same_dim(ctx.x_start.size(), d, "client_local_round");
  auto query = [&](const Vector& p) {
    Vector q = p;
    detail::project_to_unit_box(q);
    return objective.evaluate_local(i, q, state.rng);
  };

  LocalRoundResult result;
  Vector x = ctx.x_start;
  LocalOptimizer optimizer(cfg.step_rule, cfg.learning_rate, d);
  const SquaredExponentialKernel kernel(cfg.kernel);
  if (cfg.algorithm == Algorithm::Scaffold2) state.round_estimate_sum = Vector::Zero(d);

  std::optional<PreviousSurrogates> previous;
  if (cfg.algorithm == Algorithm::FZooS && ctx.global_weights && state.previous_weights) {
    previous.emplace(PreviousSurrogates{*ctx.global_weights, *state.previous_weights});
  }

  for (int t = 1; t <= cfg.local_iterations; ++t) {
    IterationRecord rec;
    rec.round = ctx.round;
    rec.iteration = t;
    rec.client = i;
    rec.point = x;

    if (cfg.algorithm == Algorithm::FZooS) {
      state.trajectory.append(x, objective.evaluate_local(i, x, state.rng));
      if (cfg.active_query.enabled) {
        for (const auto& p : active_query_selection(state.trajectory, kernel, x, cfg.active_query, state.rng)) {
          state.trajectory.append(p, objective.evaluate_local(i, p, state.rng));
        }
      }
      rec.base = GradientPosteriorModel<SquaredExponentialKernel>(state.trajectory, kernel).mean_gradient(x);
      if (previous) {
        rec.correction = fzoos_correction(*ctx.basis, *previous, x);
        rec.gamma = gamma_value(cfg.gamma, ctx.round, t);
      } else {
        rec.correction = Vector::Zero(d);
        rec.gamma = 0.0;
      }
      rec.estimate = combine(rec.base, rec.correction, rec.gamma);
    } else {
      FDResult fd = state.shared_directions.empty()
                        ? fd_gradient(query, x, cfg.fd, state.rng)
                        : fd_gradient(query, x, cfg.fd.smoothing, std::span<const Vector>(state.shared_directions));
      rec.base = fd.gradient;
      switch (cfg.algorithm) {
        case Algorithm::FedZO:
          rec.correction = Vector::Zero(d);
          rec.gamma = 0.0;
          rec.estimate = fedzo_gradient(rec.base);
          break;
        case Algorithm::FedProx:
          rec.correction = x - ctx.x_start;
          rec.gamma = cfg.fedprox_gamma;
          rec.estimate = fedprox_gradient(rec.base, x, ctx.x_start, cfg.fedprox_gamma);
          break;
        case Algorithm::Scaffold1:
          rec.correction = ctx.global_anchor - state.anchor_gradient;
          rec.gamma = 1.0;
          rec.estimate = scaffold1_gradient(rec.base, ctx.global_anchor, state.anchor_gradient);
          break;
        case Algorithm::Scaffold2: {
          const Vector zero = Vector::Zero(d);
          const Vector& all = ctx.previous_mean_all ? *ctx.previous_mean_all : zero;
          const Vector& self = state.previous_round_mean ? *state.previous_round_mean : zero;
          rec.correction = all - self;
          rec.gamma = 1.0;
          rec.estimate = scaffold2_gradient(rec.base, all, self);
          state.round_estimate_sum += rec.base;
          break;
        }
        case Algorithm::FZooS:
          break;
      }
    }

    detail::annotate(rec, objective);
    optimizer.step(x, rec.estimate);
    detail::project_to_unit_box(x);
    result.iterations.push_back(std::move(rec));
  }
  result.x_final = x;
  return result;
}

/// Fixed probe points for the contraction-ratio diagnostic.
inline std::vector<Vector> rho_probe_points(std::uint64_t master_seed, Eigen::Index d, int count) {
  Rng rng = make_rng(master_seed, {stream::kProbes});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vector> probes;
  for (int p = 0; p < count; ++p) {
    Vector x(d);
    for (Eigen::Index j = 0; j < d; ++j) x[j] = unit(rng);
    probes.push_back(std::move(x));
  }
  return probes;
}

/// Runs R rounds from x0 and records one trace row per round plus round 0.
///
/// Scalars transmitted per client per round: d up and d down for the iterate,
/// plus M up and M down for FZooS weights, plus d up and d down for
/// SCAFFOLD1 anchor gradients.
inline OptimizationTrace run_federated_optimization(const FederationConfig& cfg, FederatedObjective& objective,
                                                    const Vector& x0) {
  cfg.validate();
  const Eigen::Index d = objective.dimension();
  const int n = objective.client_count();
  require_same_dim(x0.size(), d, "run_federated_optimization");
  if (((x0.array() < 0.0) || (x0.array() > 1.0)).any()) throw InputError("x0 must lie in [0, 1]^d");

  const SquaredExponentialKernel kernel(cfg.kernel);
  const bool fzoos = cfg.algorithm == Algorithm::FZooS;
  std::optional<RFFBasis> basis;
  if (fzoos) basis = sample_rff_basis(cfg.feature_count, d, kernel, derive_seed(cfg.master_seed, {stream::kBasis}));

  std::vector<ClientState> clients;
  clients.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto tag = static_cast<std::uint64_t>(cfg.shared_client_seeds ? 0 : i);
    clients.emplace_back(i, derive_seed(cfg.master_seed, {stream::kClient, tag}),
                         TrajectoryDataset(d, cfg.gp_noise_variance, cfg.trajectory_window));
  }
  if (cfg.algorithm == Algorithm::Scaffold2 && cfg.scaffold2_shared_directions) {
    Rng dir_rng = make_rng(cfg.master_seed, {stream::kSharedDirections});
    const auto dirs = sample_directions(d, cfg.fd.directions, dir_rng);
    for (auto& c : clients) c.shared_directions = dirs;
  }
  const auto probes = fzoos ? rho_probe_points(cfg.master_seed, d, cfg.rho_probes) : std::vector<Vector>{};

  const auto f_star = objective.global_minimum();
  const std::uint64_t queries_at_start = objective.total_queries();
  std::uint64_t scalars = 0;

  OptimizationTrace trace;
  trace.algorithm = cfg.algorithm;
  auto record_round = [&](int r, const Vector& x, std::optional<double> disparity, std::optional<double> gamma) {
    RoundRecord rec;
    rec.round = r;
    rec.iterate = x;
    rec.f_value = objective.global_value(x);
    if (f_star) rec.convergence_error = rec.f_value - *f_star;
    rec.cumulative_queries = objective.total_queries() - queries_at_start;
    rec.cumulative_scalars = scalars;
    rec.mean_disparity = disparity;
    rec.mean_gamma = gamma;
    trace.rounds.push_back(std::move(rec));
  };
  record_round(0, x0, std::nullopt, std::nullopt);

  Vector x = x0;
  std::optional<WeightVector> global_weights;
  std::optional<Vector> previous_mean_all;
  const auto un = static_cast<std::size_t>(n);
  const auto per_client_iterate = static_cast<std::uint64_t>(2 * d);

  for (int r = 1; r <= cfg.rounds; ++r) {
    RoundContext ctx;
    ctx.round = r;
    ctx.x_start = x;
    ctx.basis = basis ? &*basis : nullptr;
    ctx.global_weights = global_weights ? &*global_weights : nullptr;
    ctx.previous_mean_all = previous_mean_all;

    if (cfg.algorithm == Algorithm::Scaffold1) {
      detail::for_each_client(n, cfg.workers, r, [&](int i) {
        auto& c = clients[static_cast<std::size_t>(i)];
        auto query = [&](const Vector& p) {
          Vector q = p;
          detail::project_to_unit_box(q);
          return objective.evaluate_local(i, q, c.rng);
        };
        c.anchor_gradient = fd_gradient(query, x, cfg.fd, c.rng).gradient;
      });
      std::vector<Vector> anchors;
      for (const auto& c : clients) anchors.push_back(c.anchor_gradient);
      ctx.global_anchor = ordered_mean(anchors);
      scalars += un * per_client_iterate;
    }

    std::vector<LocalRoundResult> results(un);
    detail::for_each_client(n, cfg.workers, r, [&](int i) {
      results[static_cast<std::size_t>(i)] = client_local_round(clients[static_cast<std::size_t>(i)], ctx, cfg, objective);
    });

    std::vector<Vector> iterates;
    iterates.reserve(un);
    for (const auto& res : results) iterates.push_back(res.x_final);
    try {
      x = server_aggregate(iterates).iterate;
    } catch (const std::exception& e) {
      throw FederationError(r, -1, e.what());
    }
    scalars += un * per_client_iterate;

    if (cfg.algorithm == Algorithm::Scaffold2) {
      std::vector<Vector> means;
      for (auto& c : clients) {
        c.previous_round_mean = c.round_estimate_sum / static_cast<double>(cfg.local_iterations);
        means.push_back(*c.previous_round_mean);
      }
      previous_mean_all = ordered_mean(means);
    }

    if (fzoos) {
      std::vector<WeightVector> locals(un);
      detail::for_each_client(n, cfg.workers, r, [&](int i) {
        auto& c = clients[static_cast<std::size_t>(i)];
        if (cfg.neighborhood_query) {
          for (const auto& p : active_query_selection(c.trajectory, kernel, x, cfg.active_query, c.rng)) {
            c.trajectory.append(p, objective.evaluate_local(i, p, c.rng));
          }
        }
        if (!c.features) c.features.emplace(*basis);
        locals[static_cast<std::size_t>(i)] = compute_weight_vector(c.trajectory, *basis, c.features->rows(c.trajectory));
        if (!probes.empty()) {
          const auto u = GradientPosteriorModel<SquaredExponentialKernel>(c.trajectory, kernel).uncertainty_norms(probes);
          c.probe_uncertainty.resize(probes.size());
          for (std::size_t p = 0; p < probes.size(); ++p) c.probe_uncertainty[p].push_back(u[p]);
        }
      });
      try {
        global_weights = aggregate_weight_vectors(locals);
      } catch (const std::exception& e) {
        throw FederationError(r, -1, e.what());
      }
      for (std::size_t i = 0; i < un; ++i) clients[i].previous_weights = std::move(locals[i]);
      scalars += un * static_cast<std::uint64_t>(2 * cfg.feature_count);
    }

    std::optional<double> disparity;
    double xi_sum = 0.0;
    double gamma_sum = 0.0;
    std::size_t xi_count = 0;
    std::size_t count = 0;
    for (auto& res : results) {
      for (auto& it : res.iterations) {
        gamma_sum += it.gamma;
        ++count;
        if (it.xi) {
          xi_sum += *it.xi;
          ++xi_count;
        }
        if (cfg.record_iterations) trace.iterations.push_back(std::move(it));
      }
    }
    if (xi_count > 0) disparity = xi_sum / static_cast<double>(xi_count);
    record_round(r, x, disparity, count > 0 ? std::optional<double>(gamma_sum / static_cast<double>(count)) : std::nullopt);
  }

  if (fzoos && !probes.empty() && cfg.rounds >= 2) {
    double acc = 0.0;
    for (const auto& c : clients) {
      double worst = 0.0;
      for (const auto& seq : c.probe_uncertainty) worst = std::max(worst, rho_estimate(seq));
      acc += worst;
    }
    trace.rho = acc / static_cast<double>(n);
  }
  return trace;
}

}  // namespace fzoos
