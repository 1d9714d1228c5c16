#include "fzoos/federation.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <cmath>

using fzoos::Algorithm;
using fzoos::FederationConfig;
using fzoos::OptimizationTrace;
using fzoos::Vector;

namespace {

FederationConfig small_config(Algorithm a) {
  FederationConfig cfg;
  cfg.algorithm = a;
  cfg.rounds = 3;
  cfg.local_iterations = 2;
  cfg.fd.directions = 4;
  cfg.feature_count = 200;
  cfg.active_query.candidates = 6;
  cfg.active_query.select = 2;
  cfg.master_seed = 17;
  cfg.rho_probes = 3;
  return cfg;
}

OptimizationTrace run(const FederationConfig& cfg, int d, int n, double c, double noise, std::uint64_t suite_seed,
                      double x0 = 0.3) {
  auto suite = fzoos::make_quadratic_suite(d, n, c, noise, suite_seed);
  return fzoos::run_federated_optimization(cfg, *suite, Vector::Constant(d, x0));
}

void expect_same_trace(const OptimizationTrace& a, const OptimizationTrace& b) {
  ASSERT_EQ(a.rounds.size(), b.rounds.size());
  for (std::size_t r = 0; r < a.rounds.size(); ++r) {
    EXPECT_EQ(a.rounds[r].iterate, b.rounds[r].iterate) << "round " << r;
    EXPECT_EQ(a.rounds[r].f_value, b.rounds[r].f_value);
    EXPECT_EQ(a.rounds[r].cumulative_queries, b.rounds[r].cumulative_queries);
    EXPECT_EQ(a.rounds[r].cumulative_scalars, b.rounds[r].cumulative_scalars);
    EXPECT_EQ(a.rounds[r].mean_disparity, b.rounds[r].mean_disparity);
    EXPECT_EQ(a.rounds[r].mean_gamma, b.rounds[r].mean_gamma);
  }
  EXPECT_EQ(a.rho, b.rho);
}

}  // namespace

TEST(AlgorithmNames, RoundTripCaseInsensitive) {
  for (Algorithm a : fzoos::kAllAlgorithms) {
    EXPECT_EQ(fzoos::parse_algorithm(fzoos::to_string(a)), a);
  }
  EXPECT_EQ(fzoos::parse_algorithm("fzoos"), Algorithm::FZooS);
  EXPECT_EQ(fzoos::parse_algorithm("scaffold1"), Algorithm::Scaffold1);
  EXPECT_FALSE(fzoos::parse_algorithm("fedavg").has_value());
}

TEST(FederationConfig, Defaults) {
  const FederationConfig cfg;
  EXPECT_EQ(cfg.learning_rate, 0.01);
  EXPECT_EQ(cfg.local_iterations, 10);
  EXPECT_EQ(cfg.feature_count, 10000);
  EXPECT_EQ(cfg.gamma.kind, fzoos::GammaSchedule::Kind::InverseIteration);
  EXPECT_EQ(cfg.active_query.candidates, 100);
  EXPECT_EQ(cfg.active_query.radius, 0.01);
  EXPECT_EQ(cfg.active_query.select, 5);
  EXPECT_EQ(cfg.kernel.lengthscale, 1.0);
  EXPECT_EQ(cfg.fd.directions, 20);
}

TEST(FederationConfig, ValidationNamesField) {
  FederationConfig cfg;
  cfg.rounds = 0;
  try {
    cfg.validate();
    FAIL();
  } catch (const fzoos::ConfigError& e) {
    EXPECT_EQ(e.field(), "rounds");
  }
  cfg = FederationConfig{};
  cfg.learning_rate = -1;
  EXPECT_THROW(cfg.validate(), fzoos::ConfigError);
  cfg = FederationConfig{};
  cfg.active_query.candidates = 3;
  EXPECT_THROW(cfg.validate(), fzoos::ConfigError);
}

TEST(ServerAggregate, Examples) {
  Vector x(3);
  x << 0.1, -0.4, 2.0;
  const std::vector<Vector> one{x};
  EXPECT_EQ(fzoos::server_aggregate(one).iterate, x);
  const std::vector<Vector> pair{x, -x};
  EXPECT_EQ(fzoos::server_aggregate(pair).iterate, Vector::Zero(3));
  EXPECT_FALSE(fzoos::server_aggregate(pair).weights.has_value());
}

TEST(ServerAggregate, CanonicalOrderAfterPermutation) {
  fzoos::Rng rng(4);
  std::vector<std::pair<int, Vector>> tagged;
  for (int i = 0; i < 7; ++i) tagged.emplace_back(i, oracle::uniform_vector(5, rng));
  std::vector<Vector> ordered;
  for (const auto& [i, v] : tagged) ordered.push_back(v);
  const Vector reference = fzoos::server_aggregate(ordered).iterate;
  std::shuffle(tagged.begin(), tagged.end(), rng);
  std::sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Vector> canonical;
  for (const auto& [i, v] : tagged) canonical.push_back(v);
  EXPECT_EQ(fzoos::server_aggregate(canonical).iterate, reference);
}

TEST(ServerAggregate, AveragesWeightsAndChecksCounts) {
  const std::vector<Vector> xs{Vector::Zero(2), Vector::Ones(2)};
  const std::vector<fzoos::WeightVector> ws{{Vector::Constant(3, 1.0), 5, 1}, {Vector::Constant(3, 3.0), 5, 1}};
  const auto agg = fzoos::server_aggregate(xs, std::span<const fzoos::WeightVector>(ws));
  EXPECT_EQ(agg.iterate, Vector::Constant(2, 0.5));
  EXPECT_EQ(agg.weights->weights, Vector::Constant(3, 2.0));
  const std::vector<fzoos::WeightVector> one{ws[0]};
  EXPECT_THROW(fzoos::server_aggregate(xs, std::span<const fzoos::WeightVector>(one)), fzoos::InputError);
}

TEST(ActiveQuery, SelectAllReturnsCandidatesByDescendingUncertainty) {
  fzoos::TrajectoryDataset traj(2, 1e-3);
  fzoos::Rng data(1);
  for (int i = 0; i < 6; ++i) traj.append(Vector::Constant(2, 0.5) + oracle::uniform_vector(2, data, -0.01, 0.01), 0.0);
  fzoos::ActiveQueryParams p{12, 0.01, 12, true};
  fzoos::Rng rng(3);
  const auto picked = fzoos::active_query_selection(traj, fzoos::KernelParams{1.0}, Vector::Constant(2, 0.5), p, rng);
  ASSERT_EQ(picked.size(), 12u);
  const fzoos::GradientPosteriorModel<> model(traj, fzoos::SquaredExponentialKernel({1.0}));
  const auto u = model.uncertainty_norms(picked);
  for (std::size_t k = 1; k < u.size(); ++k) EXPECT_GE(u[k - 1], u[k]);
}

TEST(ActiveQuery, EmptyTrajectoryTiesKeepCandidateOrder) {
  fzoos::TrajectoryDataset traj(3, 1e-3);
  fzoos::ActiveQueryParams p{10, 0.05, 4, true};
  const Vector center = Vector::Constant(3, 0.99);
  fzoos::Rng rng(8);
  fzoos::Rng replay(8);
  const auto picked = fzoos::active_query_selection(traj, fzoos::KernelParams{1.0}, center, p, rng);
  std::uniform_real_distribution<double> offset(-0.05, 0.05);
  ASSERT_EQ(picked.size(), 4u);
  for (int c = 0; c < 4; ++c) {
    Vector expected = center;
    for (int j = 0; j < 3; ++j) expected[j] = std::clamp(expected[j] + offset(replay), 0.0, 1.0);
    EXPECT_EQ(picked[c], expected);
    EXPECT_LE(picked[c].maxCoeff(), 1.0);
  }
}

TEST(ActiveQuery, QueryingTopCandidateNeverRaisesItsUncertainty) {
  fzoos::Rng data(2);
  for (int trial = 0; trial < 5; ++trial) {
    fzoos::TrajectoryDataset traj(2, 1e-4);
    for (int i = 0; i < 8; ++i) traj.append(oracle::uniform_vector(2, data), 0.0);
    fzoos::ActiveQueryParams p{20, 0.05, 20, true};
    fzoos::Rng rng(static_cast<std::uint64_t>(trial));
    const auto ranked =
        fzoos::active_query_selection(traj, fzoos::KernelParams{1.0}, Vector::Constant(2, 0.5), p, rng);
    const double before =
        fzoos::GradientPosteriorModel<>(traj, fzoos::SquaredExponentialKernel({1.0})).uncertainty_norms(ranked)[0];
    traj.append(ranked[0], 0.0);
    const double after =
        fzoos::GradientPosteriorModel<>(traj, fzoos::SquaredExponentialKernel({1.0})).uncertainty_norms(ranked)[0];
    EXPECT_LE(after, before);
  }
}

TEST(Federation, SingleGradientDescentStepOnLinearFunction) {
  fzoos::BlackBoxObjective obj(fzoos::DomainMap::uniform(1, -10, 10), 1, 0.0,
                               [](int, const Vector& raw) { return raw[0]; });
  FederationConfig cfg;
  cfg.algorithm = Algorithm::FedZO;
  cfg.rounds = 1;
  cfg.local_iterations = 1;
  cfg.fd = {1e-3, 2000};
  const auto trace = fzoos::run_federated_optimization(cfg, obj, Vector::Constant(1, 0.5));
  EXPECT_NEAR(trace.rounds.back().iterate[0], 0.3, 0.02);
}

TEST(Federation, TraceHasRoundZeroAndMonotoneCounters) {
  for (Algorithm a : fzoos::kAllAlgorithms) {
    const auto cfg = small_config(a);
    auto suite = fzoos::make_quadratic_suite(3, 2, 5.0, 1e-3, 1);
    const Vector x0 = Vector::Constant(3, 0.3);
    const auto trace = fzoos::run_federated_optimization(cfg, *suite, x0);
    ASSERT_EQ(trace.rounds.size(), 4u);
    EXPECT_EQ(trace.rounds[0].round, 0);
    EXPECT_EQ(trace.rounds[0].iterate, x0);
    EXPECT_EQ(trace.rounds[0].f_value, suite->global_value(x0));
    EXPECT_EQ(trace.rounds[0].cumulative_queries, 0u);
    for (std::size_t r = 1; r < trace.rounds.size(); ++r) {
      EXPECT_EQ(trace.rounds[r].round, static_cast<int>(r));
      EXPECT_GT(trace.rounds[r].cumulative_queries, trace.rounds[r - 1].cumulative_queries);
      EXPECT_GT(trace.rounds[r].cumulative_scalars, trace.rounds[r - 1].cumulative_scalars);
      EXPECT_NEAR(*trace.rounds[r].convergence_error, trace.rounds[r].f_value - *suite->global_minimum(), 1e-15);
      EXPECT_GE(trace.rounds[r].iterate.minCoeff(), 0.0);
      EXPECT_LE(trace.rounds[r].iterate.maxCoeff(), 1.0);
    }
  }
}

TEST(Federation, QueryAndTransmissionLedgersMatchFormulas) {
  const std::uint64_t n = 2, r = 3, t = 2, q = 4, d = 3, m = 200, sel = 2;
  auto expect_ledger = [&](const FederationConfig& cfg, std::uint64_t queries, std::uint64_t scalars) {
    auto suite = fzoos::make_quadratic_suite(static_cast<int>(d), static_cast<int>(n), 5.0, 1e-3, 1);
    const auto trace = fzoos::run_federated_optimization(cfg, *suite, Vector::Constant(3, 0.3));
    EXPECT_EQ(trace.rounds.back().cumulative_queries, queries) << fzoos::to_string(cfg.algorithm);
    EXPECT_EQ(trace.rounds.back().cumulative_scalars, scalars) << fzoos::to_string(cfg.algorithm);
    EXPECT_EQ(suite->queries(0), queries / n);
    EXPECT_EQ(suite->queries(1), queries / n);
  };
  for (Algorithm a : {Algorithm::FedZO, Algorithm::FedProx, Algorithm::Scaffold2}) {
    expect_ledger(small_config(a), n * r * t * (q + 1), n * r * 2 * d);
  }
  auto s2 = small_config(Algorithm::Scaffold2);
  s2.scaffold2_shared_directions = true;
  expect_ledger(s2, n * r * t * (q + 1), n * r * 2 * d);
  expect_ledger(small_config(Algorithm::Scaffold1), n * r * (t + 1) * (q + 1), n * r * 4 * d);
  expect_ledger(small_config(Algorithm::FZooS), n * r * t * (1 + sel) + n * r * sel, n * r * (2 * d + 2 * m));
  auto no_active = small_config(Algorithm::FZooS);
  no_active.active_query.enabled = false;
  expect_ledger(no_active, n * r * t + n * r * sel, n * r * (2 * d + 2 * m));
  no_active.neighborhood_query = false;
  expect_ledger(no_active, n * r * t, n * r * (2 * d + 2 * m));
}

TEST(Federation, IdenticalClientsStayIdenticalWithoutCorrection) {
  auto cfg = small_config(Algorithm::FZooS);
  cfg.gamma = fzoos::GammaSchedule::constant(0.0);
  cfg.shared_client_seeds = true;
  cfg.record_iterations = true;
  const auto trace = run(cfg, 3, 3, 0.0, 1e-3, 2);
  std::map<std::pair<int, int>, const fzoos::IterationRecord*> first;
  for (const auto& it : trace.iterations) {
    const auto [pos, fresh] = first.emplace(std::make_pair(it.round, it.iteration), &it);
    if (fresh) continue;
    EXPECT_EQ(it.point, pos->second->point);
    EXPECT_EQ(it.estimate, pos->second->estimate);
  }
  EXPECT_EQ(first.size(), 6u);
}

TEST(Federation, HomogeneousCollapseToSingleClient) {
  for (Algorithm a : fzoos::kAllAlgorithms) {
    auto cfg = small_config(a);
    cfg.shared_client_seeds = true;
    cfg.record_iterations = true;
    const auto many = run(cfg, 3, 4, 0.0, 1e-3, 5);
    const auto one = run(cfg, 3, 1, 0.0, 1e-3, 5);
    for (std::size_t r = 0; r < many.rounds.size(); ++r) {
      EXPECT_EQ(many.rounds[r].iterate, one.rounds[r].iterate) << fzoos::to_string(a) << " round " << r;
    }
    if (a != Algorithm::FZooS) continue;
    for (const auto& it : many.iterations) EXPECT_EQ(it.correction, Vector::Zero(3));
  }
}

TEST(Federation, DeterministicAcrossWorkerCounts) {
  for (Algorithm a : fzoos::kAllAlgorithms) {
    auto cfg = small_config(a);
    cfg.record_iterations = true;
    const auto serial = run(cfg, 3, 4, 5.0, 1e-3, 9);
    cfg.workers = 4;
    const auto parallel = run(cfg, 3, 4, 5.0, 1e-3, 9);
    expect_same_trace(serial, parallel);
    ASSERT_EQ(serial.iterations.size(), parallel.iterations.size());
    for (std::size_t k = 0; k < serial.iterations.size(); ++k) {
      EXPECT_EQ(serial.iterations[k].estimate, parallel.iterations[k].estimate);
    }
  }
}

TEST(Federation, ErrorsCarryRoundAndClient) {
  std::atomic<int> calls{0};
  fzoos::BlackBoxObjective obj(fzoos::DomainMap::uniform(2, -1, 1), 3, 0.0, [&](int client, const Vector& raw) {
    if (client == 1 && ++calls > 25) throw std::runtime_error("evaluator failed");
    return raw.squaredNorm();
  });
  auto cfg = small_config(Algorithm::FedZO);
  cfg.workers = 3;
  try {
    fzoos::run_federated_optimization(cfg, obj, Vector::Constant(2, 0.5));
    FAIL();
  } catch (const fzoos::FederationError& e) {
    EXPECT_EQ(e.round(), 3);
    EXPECT_EQ(e.client(), 1);
    EXPECT_EQ(e.cause(), "evaluator failed");
  }
}

TEST(Federation, RejectsOutOfBoxStart) {
  auto suite = fzoos::make_quadratic_suite(2, 2, 1.0, 0.0, 1);
  EXPECT_THROW(fzoos::run_federated_optimization(small_config(Algorithm::FedZO), *suite, Vector::Constant(2, 1.5)),
               fzoos::InputError);
}

TEST(Federation, RhoWithinContractionBracket) {
  auto cfg = small_config(Algorithm::FZooS);
  cfg.rounds = 4;
  const auto trace = run(cfg, 3, 2, 5.0, 1e-3, 1);
  ASSERT_TRUE(trace.rho.has_value());
  EXPECT_LE(*trace.rho, 1.0 + 1e-6);
  EXPECT_GE(*trace.rho, 1.0 / (1.0 + 1.0 / cfg.gp_noise_variance) - 1e-6);
}

TEST(Federation, FirstRoundUsesNoCorrection) {
  auto cfg = small_config(Algorithm::FZooS);
  cfg.record_iterations = true;
  const auto trace = run(cfg, 3, 2, 5.0, 1e-3, 1);
  for (const auto& it : trace.iterations) {
    if (it.round == 1) {
      EXPECT_EQ(it.gamma, 0.0);
      EXPECT_EQ(it.estimate, it.base);
    } else {
      EXPECT_EQ(it.gamma, 1.0 / it.iteration);
    }
  }
}

TEST(Federation, SurrogateEstimateAlignsBetterThanFiniteDifferences) {
  auto mean_cosine = [](Algorithm a) {
    FederationConfig cfg;
    cfg.algorithm = a;
    cfg.rounds = 3;
    cfg.local_iterations = 10;
    cfg.feature_count = 2000;
    cfg.record_iterations = true;
    cfg.rho_probes = 0;
    double acc = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      cfg.master_seed = seed;
      const auto trace = run(cfg, 5, 3, 5.0, 1e-4, seed, 0.8);
      for (const auto& it : trace.iterations) {
        acc += it.cosine.value_or(0.0);
        ++count;
      }
    }
    return acc / count;
  };
  EXPECT_GT(mean_cosine(Algorithm::FZooS), mean_cosine(Algorithm::FedZO));
}
