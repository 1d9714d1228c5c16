#pragma once

// Config-driven experiment runner behind the fedzoo command line tool.
//
// A config is one flat JSON object. Every key is optional and unknown keys are
// rejected. Outputs are CSV files written atomically, plus optional SVG plots.

#include "fzoos/federation.hpp"
#include "fzoos/objectives.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fzoos {

inline constexpr const char* kOutputDirEnv = "FEDZOO_OUTPUT_DIR";

enum class Verbosity { Off, Round, Iteration };

struct SuiteParams {
  int dimension = 30;
  int clients = 5;
  double heterogeneity = 5.0;
  double noise_std = 1e-4;
};

/// Theoretical-schedule inputs that may be left to the harness: G is measured
/// on the suite when `heterogeneity` is unset.
struct GammaTheoryOverrides {
  std::optional<double> heterogeneity;
  double omega = 1.0;
  std::optional<double> kappa;  // defaults to 1 / l^2
  double rho = 0.9;
  double rff_error = 0.0;
};

/// Library defaults with the experiment settings layered on top: Adam steps,
/// a near-noiseless GP likelihood and a 50-point trajectory window.
inline FederationConfig experiment_federation_defaults() {
  FederationConfig fed;
  fed.step_rule.kind = StepRule::Kind::Adam;
  fed.gp_noise_variance = 1e-6;
  fed.trajectory_window = 50;
  return fed;
}

struct ExperimentConfig {
  SuiteParams suite{};
  FederationConfig federation = experiment_federation_defaults();
  GammaTheoryOverrides gamma_theory{};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<Algorithm> algorithms{std::begin(kAllAlgorithms), std::end(kAllAlgorithms)};
  std::optional<double> initial_point;  // constant coordinate; uniform draw per seed when unset
  double error_threshold = 0.05;
  std::string output_dir = "fedzoo_out";
  bool emit_plots = false;
  Verbosity diagnostics_verbosity = Verbosity::Off;
  bool dump_coefficients = false;
};

namespace detail {

/// Reads keys from a flat JSON object and remembers which ones were used.
class FieldReader {
 public:
  explicit FieldReader(const nlohmann::json& j) : j_(j) {
    if (!j_.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(key, j_.at(key));
  }

  template <class T>
  void read(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    out = convert<T>(key, j_.at(key));
  }

  const nlohmann::json& raw(const std::string& key) const { return j_.at(key); }

  bool explicit_null(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && j_.at(key).is_null();
  }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(it.key(), "unknown key");
    }
  }

  template <class T>
  static T convert(const std::string& key, const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (v.is_number_integer()) {
        if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError(key, "must be >= 0");
        }
        return v.get<T>();
      }
      if (v.is_number_float()) {
        const double x = v.get<double>();
        if (std::floor(x) == x && std::abs(x) < 9.0e15) return static_cast<T>(x);
      }
      throw ConfigError(key, "expected an integer");
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  const nlohmann::json& j_;
  std::set<std::string> used_;
};

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace detail

/// Builds and validates an ExperimentConfig. Throws ConfigError naming the
/// offending key.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  detail::FieldReader in(j);
  ExperimentConfig cfg;
  auto& fed = cfg.federation;

  in.read("dimension", cfg.suite.dimension);
  in.read("clients", cfg.suite.clients);
  in.read("heterogeneity", cfg.suite.heterogeneity);
  in.read("noise_std", cfg.suite.noise_std);

  if (in.has("algorithm")) {
    const auto name = detail::FieldReader::convert<std::string>("algorithm", in.raw("algorithm"));
    const auto a = parse_algorithm(name);
    if (!a) throw ConfigError("algorithm", "unknown algorithm '" + name + "'");
    fed.algorithm = *a;
    cfg.algorithms = {*a};
  }
  if (in.has("algorithms")) {
    const auto& list = in.raw("algorithms");
    if (!list.is_array() || list.empty()) throw ConfigError("algorithms", "expected a non-empty list of names");
    cfg.algorithms.clear();
    for (const auto& item : list) {
      const auto name = detail::FieldReader::convert<std::string>("algorithms", item);
      const auto a = parse_algorithm(name);
      if (!a) throw ConfigError("algorithms", "unknown algorithm '" + name + "'");
      cfg.algorithms.push_back(*a);
    }
  }

  in.read("rounds", fed.rounds);
  in.read("local_iterations", fed.local_iterations);
  in.read("learning_rate", fed.learning_rate);
  if (in.has("step_rule")) {
    const auto rule = detail::lowercase(detail::FieldReader::convert<std::string>("step_rule", in.raw("step_rule")));
    if (rule == "gd") {
      fed.step_rule.kind = StepRule::Kind::GradientDescent;
    } else if (rule == "adam") {
      fed.step_rule.kind = StepRule::Kind::Adam;
    } else {
      throw ConfigError("step_rule", "expected \"gd\" or \"adam\"");
    }
  }
  in.read("adam_beta1", fed.step_rule.beta1);
  in.read("adam_beta2", fed.step_rule.beta2);
  in.read("adam_epsilon", fed.step_rule.epsilon);

  if (in.has("gamma_schedule")) {
    const auto kind = detail::lowercase(
        detail::FieldReader::convert<std::string>("gamma_schedule", in.raw("gamma_schedule")));
    if (kind == "inverse_iteration") {
      fed.gamma.kind = GammaSchedule::Kind::InverseIteration;
    } else if (kind == "constant") {
      fed.gamma.kind = GammaSchedule::Kind::Constant;
    } else if (kind == "theoretical") {
      fed.gamma.kind = GammaSchedule::Kind::Theoretical;
    } else {
      throw ConfigError("gamma_schedule", "expected \"inverse_iteration\", \"constant\" or \"theoretical\"");
    }
  }
  in.read("gamma_constant", fed.gamma.constant_value);
  in.read("gamma_theory_G", cfg.gamma_theory.heterogeneity);
  in.read("gamma_theory_omega", cfg.gamma_theory.omega);
  in.read("gamma_theory_kappa", cfg.gamma_theory.kappa);
  in.read("gamma_theory_rho", cfg.gamma_theory.rho);
  in.read("gamma_theory_epsilon", cfg.gamma_theory.rff_error);

  in.read("fedprox_gamma", fed.fedprox_gamma);
  in.read("fd_smoothing", fed.fd.smoothing);
  in.read("fd_directions", fed.fd.directions);
  in.read("scaffold2_shared_directions", fed.scaffold2_shared_directions);
  in.read("active_query", fed.active_query.enabled);
  in.read("active_candidates", fed.active_query.candidates);
  in.read("active_radius", fed.active_query.radius);
  in.read("active_select", fed.active_query.select);
  in.read("neighborhood_query", fed.neighborhood_query);
  in.read("feature_count", fed.feature_count);
  in.read("lengthscale", fed.kernel.lengthscale);
  in.read("gp_noise_variance", fed.gp_noise_variance);
  if (in.explicit_null("trajectory_window")) {
    fed.trajectory_window = TrajectoryDataset::kUnlimited;
  } else if (in.has("trajectory_window")) {
    const auto w = detail::FieldReader::convert<std::int64_t>("trajectory_window", in.raw("trajectory_window"));
    if (w < 1) throw ConfigError("trajectory_window", "must be >= 1 (or null for unlimited)");
    fed.trajectory_window = static_cast<std::size_t>(w);
  }
  in.read("workers", fed.workers);
  in.read("shared_client_seeds", fed.shared_client_seeds);
  in.read("rho_probes", fed.rho_probes);

  if (in.has("seeds")) {
    const auto& list = in.raw("seeds");
    if (!list.is_array() || list.empty()) throw ConfigError("seeds", "expected a non-empty list of integers");
    cfg.seeds.clear();
    for (const auto& s : list) cfg.seeds.push_back(detail::FieldReader::convert<std::uint64_t>("seeds", s));
  }
  in.read("initial_point", cfg.initial_point);
  in.read("error_threshold", cfg.error_threshold);
  in.read("output_dir", cfg.output_dir);
  in.read("emit_plots", cfg.emit_plots);
  if (in.has("diagnostics_verbosity")) {
    const auto v = detail::lowercase(
        detail::FieldReader::convert<std::string>("diagnostics_verbosity", in.raw("diagnostics_verbosity")));
    if (v == "off") {
      cfg.diagnostics_verbosity = Verbosity::Off;
    } else if (v == "round") {
      cfg.diagnostics_verbosity = Verbosity::Round;
    } else if (v == "iteration") {
      cfg.diagnostics_verbosity = Verbosity::Iteration;
    } else {
      throw ConfigError("diagnostics_verbosity", "expected \"off\", \"round\" or \"iteration\"");
    }
  }
  in.read("dump_coefficients", cfg.dump_coefficients);
  in.reject_unknown();

  // Validation of everything before any work starts.
  if (cfg.suite.dimension < 1) throw ConfigError("dimension", "must be >= 1");
  if (cfg.suite.clients < 1) throw ConfigError("clients", "must be >= 1");
  if (!(cfg.suite.heterogeneity >= 0.0) || !std::isfinite(cfg.suite.heterogeneity)) {
    throw ConfigError("heterogeneity", "must be >= 0");
  }
  if (!(cfg.suite.noise_std >= 0.0) || !std::isfinite(cfg.suite.noise_std)) {
    throw ConfigError("noise_std", "must be >= 0");
  }
  if (!(fed.step_rule.beta1 >= 0.0 && fed.step_rule.beta1 < 1.0)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
  if (!(fed.step_rule.beta2 >= 0.0 && fed.step_rule.beta2 < 1.0)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
  if (!(fed.step_rule.epsilon > 0.0)) throw ConfigError("adam_epsilon", "must be > 0");
  if (cfg.gamma_theory.heterogeneity && !(*cfg.gamma_theory.heterogeneity >= 0.0)) {
    throw ConfigError("gamma_theory_G", "must be >= 0");
  }
  if (!(cfg.gamma_theory.omega > 0.0)) throw ConfigError("gamma_theory_omega", "must be > 0");
  if (cfg.gamma_theory.kappa && !(*cfg.gamma_theory.kappa > 0.0)) throw ConfigError("gamma_theory_kappa", "must be > 0");
  if (!(cfg.gamma_theory.rho > 0.0 && cfg.gamma_theory.rho <= 1.0)) {
    throw ConfigError("gamma_theory_rho", "must lie in (0, 1]");
  }
  if (!(cfg.gamma_theory.rff_error >= 0.0)) throw ConfigError("gamma_theory_epsilon", "must be >= 0");
  if (cfg.initial_point && !(*cfg.initial_point >= 0.0 && *cfg.initial_point <= 1.0)) {
    throw ConfigError("initial_point", "must lie in [0, 1]");
  }
  if (!(cfg.error_threshold > 0.0)) throw ConfigError("error_threshold", "must be > 0");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  fed.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("<file>", "cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

/// Applies FEDZOO_OUTPUT_DIR, if set, over the configured output directory.
inline void apply_environment_overrides(ExperimentConfig& cfg) {
  if (const char* dir = std::getenv(kOutputDirEnv); dir && *dir) cfg.output_dir = dir;
}

/// Creates the output directory and checks that a file can be written there.
inline void ensure_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("output_dir", "cannot create " + dir + ": " + ec.message());
  const auto probe = std::filesystem::path(dir) / ".fedzoo_write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("output_dir", dir + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

// ---------------------------------------------------------------------------
// CSV output

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

/// Writes `content` to `path` through a temporary file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << content;
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string trace_csv(const OptimizationTrace& trace) {
  std::ostringstream out;
  out << "round,cum_queries,cum_scalars_tx,F_value,conv_error,mean_disparity,gamma\n";
  for (const auto& r : trace.rounds) {
    out << r.round << ',' << r.cumulative_queries << ',' << r.cumulative_scalars << ',' << format_double(r.f_value)
        << ',' << format_optional(r.convergence_error) << ',' << format_optional(r.mean_disparity) << ','
        << format_optional(r.mean_gamma) << '\n';
  }
  return out.str();
}

inline std::string iteration_diagnostics_csv(const OptimizationTrace& trace) {
  std::ostringstream out;
  out << "r,t,i,xi,cosine,gamma_used,gamma_star\n";
  for (const auto& it : trace.iterations) {
    out << it.round << ',' << it.iteration << ',' << it.client << ',' << format_optional(it.xi) << ','
        << format_optional(it.cosine) << ',' << format_double(it.gamma) << ',' << format_optional(it.gamma_star)
        << '\n';
  }
  return out.str();
}

inline std::string round_diagnostics_csv(const OptimizationTrace& trace) {
  struct Acc {
    double xi = 0, cos = 0, gamma = 0, gstar = 0;
    int n_xi = 0, n_cos = 0, n = 0, n_gstar = 0;
  };
  std::map<int, Acc> rounds;
  for (const auto& it : trace.iterations) {
    auto& a = rounds[it.round];
    a.gamma += it.gamma;
    ++a.n;
    if (it.xi) a.xi += *it.xi, ++a.n_xi;
    if (it.cosine) a.cos += *it.cosine, ++a.n_cos;
    if (it.gamma_star) a.gstar += *it.gamma_star, ++a.n_gstar;
  }
  auto mean = [](double s, int n) { return n > 0 ? std::optional<double>(s / n) : std::nullopt; };
  std::ostringstream out;
  out << "r,mean_xi,mean_cosine,mean_gamma_used,mean_gamma_star\n";
  for (const auto& [r, a] : rounds) {
    out << r << ',' << format_optional(mean(a.xi, a.n_xi)) << ',' << format_optional(mean(a.cos, a.n_cos)) << ','
        << format_optional(mean(a.gamma, a.n)) << ',' << format_optional(mean(a.gstar, a.n_gstar)) << '\n';
  }
  return out.str();
}

inline std::string matrix_csv(const Matrix& m) {
  std::ostringstream out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_double(m(r, c));
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Runs

struct SeedRun {
  Algorithm algorithm = Algorithm::FedZO;
  std::uint64_t seed = 0;
  OptimizationTrace trace;
};

/// First round whose convergence error is at or below `threshold`.
inline std::optional<int> rounds_to_threshold(const OptimizationTrace& trace, double threshold) {
  for (const auto& r : trace.rounds) {
    if (r.convergence_error && *r.convergence_error <= threshold) return r.round;
  }
  return std::nullopt;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Starting point for a seed: the configured constant, or a uniform draw.
inline Vector initial_point(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(cfg.suite.dimension);
  if (cfg.initial_point) return Vector::Constant(d, *cfg.initial_point);
  Rng rng = make_rng(seed, {stream::kInitialPoint});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector x0(d);
  for (Eigen::Index j = 0; j < d; ++j) x0[j] = unit(rng);
  return x0;
}

/// Every algorithm run with the same seed faces the same suite and start.
inline std::unique_ptr<QuadraticSuite> build_suite(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_quadratic_suite(cfg.suite.dimension, cfg.suite.clients, cfg.suite.heterogeneity, cfg.suite.noise_std,
                              seed);
}

inline FederationConfig federation_for(const ExperimentConfig& cfg, Algorithm algorithm, std::uint64_t seed,
                                       const QuadraticSuite& suite) {
  FederationConfig fed = cfg.federation;
  fed.algorithm = algorithm;
  fed.master_seed = seed;
  fed.record_iterations = fed.record_iterations || cfg.diagnostics_verbosity != Verbosity::Off;
  if (fed.gamma.kind == GammaSchedule::Kind::Theoretical) {
    GammaTheoryParams p;
    if (cfg.gamma_theory.heterogeneity) {
      p.heterogeneity = *cfg.gamma_theory.heterogeneity;
    } else {
      Rng rng = make_rng(seed, {stream::kProbes, 1});
      p.heterogeneity = heterogeneity_G(suite, 1000, rng);
    }
    p.omega = cfg.gamma_theory.omega;
    p.kappa = cfg.gamma_theory.kappa.value_or(SquaredExponentialKernel(fed.kernel).kappa());
    p.rho = cfg.gamma_theory.rho;
    p.rff_error = cfg.gamma_theory.rff_error;
    p.clients = cfg.suite.clients;
    p.local_iterations = fed.local_iterations;
    fed.gamma.theory = p;
  }
  return fed;
}

inline SeedRun run_seed(const ExperimentConfig& cfg, Algorithm algorithm, std::uint64_t seed) {
  auto suite = build_suite(cfg, seed);
  const FederationConfig fed = federation_for(cfg, algorithm, seed, *suite);
  return SeedRun{algorithm, seed, run_federated_optimization(fed, *suite, initial_point(cfg, seed))};
}

// ---------------------------------------------------------------------------
// Plots

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Static line chart with a log-scale y axis; non-positive values are skipped.
inline std::string svg_line_plot(const std::string& title, const std::string& x_label,
                                 const std::vector<PlotSeries>& series) {
  constexpr double W = 720, H = 440, L = 70, R = 170, T = 40, B = 50;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!(s.y[k] > 0.0) || !std::isfinite(s.y[k])) continue;
      xmin = std::min(xmin, s.x[k]);
      xmax = std::max(xmax, s.x[k]);
      ymin = std::min(ymin, std::log10(s.y[k]));
      ymax = std::max(ymax, std::log10(s.y[k]));
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = -1, ymax = 0;
  if (xmax == xmin) xmax = xmin + 1;
  ymin = std::floor(ymin);
  ymax = std::ceil(ymax);
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double ly) { return H - B - (ly - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); ++e) {
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(e) + 4 << "\" text-anchor=\"end\">1e" << e << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << py(e) << "\" x2=\"" << W - R << "\" y2=\"" << py(e)
        << "\" stroke=\"#ddd\"/>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    out << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_double(std::round(xv))
        << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label
      << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % std::size(colors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < series[s].x.size(); ++k) {
      const double y = series[s].y[k];
      if (!(y > 0.0) || !std::isfinite(y)) continue;
      out << px(series[s].x[k]) << ',' << py(std::log10(y)) << ' ';
    }
    out << "\"/>\n";
    out << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (s + 1) << "\" fill=\"" << color << "\">"
        << series[s].label << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Experiment drivers

struct ExperimentResult {
  std::vector<SeedRun> runs;
  std::vector<std::filesystem::path> files;
};

namespace detail {

inline void write_run_files(const ExperimentConfig& cfg, const SeedRun& run, ExperimentResult& result) {
  const std::filesystem::path dir(cfg.output_dir);
  const std::string tag = std::string(to_string(run.algorithm)) + "_" + std::to_string(run.seed);
  auto emit = [&](const std::string& name, const std::string& content) {
    write_file_atomic(dir / name, content);
    result.files.push_back(dir / name);
  };
  emit("trace_" + tag + ".csv", trace_csv(run.trace));
  if (cfg.diagnostics_verbosity == Verbosity::Iteration) emit("diagnostics_" + tag + ".csv", iteration_diagnostics_csv(run.trace));
  if (cfg.diagnostics_verbosity == Verbosity::Round) emit("diagnostics_" + tag + ".csv", round_diagnostics_csv(run.trace));
}

inline std::string summary_csv(const ExperimentConfig& cfg, const std::vector<SeedRun>& runs) {
  std::ostringstream out;
  out << "algorithm,seed,final_F,final_conv_error,cum_queries,cum_scalars_tx,rounds_to_threshold,rho\n";
  for (Algorithm a : cfg.algorithms) {
    std::vector<double> errors, f_values, hits;
    for (const auto& run : runs) {
      if (run.algorithm != a) continue;
      const auto& last = run.trace.rounds.back();
      const auto hit = rounds_to_threshold(run.trace, cfg.error_threshold);
      out << to_string(a) << ',' << run.seed << ',' << format_double(last.f_value) << ','
          << format_optional(last.convergence_error) << ',' << last.cumulative_queries << ','
          << last.cumulative_scalars << ',' << (hit ? std::to_string(*hit) : std::string()) << ','
          << format_optional(run.trace.rho) << '\n';
      f_values.push_back(last.f_value);
      if (last.convergence_error) errors.push_back(*last.convergence_error);
      hits.push_back(hit ? static_cast<double>(*hit) : std::numeric_limits<double>::infinity());
    }
    if (f_values.empty()) continue;
    const double hit_median = median(hits);
    out << to_string(a) << ",median," << format_double(median(f_values)) << ','
        << (errors.empty() ? std::string() : format_double(median(errors))) << ",,,"
        << (std::isfinite(hit_median) ? format_double(hit_median) : std::string()) << ",\n";
  }
  return out.str();
}

inline std::vector<double> median_curve(const std::vector<const SeedRun*>& runs,
                                        double (*value)(const RoundRecord&)) {
  std::vector<double> out;
  if (runs.empty()) return out;
  for (std::size_t r = 0; r < runs.front()->trace.rounds.size(); ++r) {
    std::vector<double> v;
    for (const auto* run : runs) v.push_back(value(run->trace.rounds[r]));
    out.push_back(median(std::move(v)));
  }
  return out;
}

inline void write_plots(const ExperimentConfig& cfg, const std::vector<SeedRun>& runs, ExperimentResult& result) {
  const std::filesystem::path dir(cfg.output_dir);
  std::vector<PlotSeries> by_round, by_queries;
  for (Algorithm a : cfg.algorithms) {
    std::vector<const SeedRun*> sel;
    for (const auto& run : runs) {
      if (run.algorithm == a) sel.push_back(&run);
    }
    if (sel.empty()) continue;
    auto err = median_curve(sel, [](const RoundRecord& r) { return r.convergence_error.value_or(r.f_value); });
    auto q = median_curve(sel, [](const RoundRecord& r) { return static_cast<double>(r.cumulative_queries); });
    std::vector<double> rounds(err.size());
    for (std::size_t k = 0; k < rounds.size(); ++k) rounds[k] = static_cast<double>(k);
    by_round.push_back({std::string(to_string(a)), rounds, err});
    by_queries.push_back({std::string(to_string(a)), q, err});
  }
  write_file_atomic(dir / "convergence_rounds.svg",
                    svg_line_plot("median convergence error", "round", by_round));
  write_file_atomic(dir / "convergence_queries.svg",
                    svg_line_plot("median convergence error", "cumulative queries", by_queries));
  result.files.push_back(dir / "convergence_rounds.svg");
  result.files.push_back(dir / "convergence_queries.svg");
}

inline std::string comparison_csv(const ExperimentConfig& cfg, const std::vector<SeedRun>& runs) {
  std::ostringstream out;
  out << "round";
  std::vector<const SeedRun*> cols;
  for (Algorithm a : cfg.algorithms) {
    for (const auto& run : runs) {
      if (run.algorithm != a) continue;
      out << ',' << to_string(a) << '_' << run.seed;
      cols.push_back(&run);
    }
  }
  out << '\n';
  const std::size_t rounds = cols.empty() ? 0 : cols.front()->trace.rounds.size();
  for (std::size_t r = 0; r < rounds; ++r) {
    out << r;
    for (const auto* c : cols) {
      const auto& rec = c->trace.rounds[r];
      out << ',' << format_double(rec.convergence_error.value_or(rec.f_value));
    }
    out << '\n';
  }
  return out.str();
}

inline std::string resolved_config_json(const ExperimentConfig& cfg) {
  const auto& fed = cfg.federation;
  nlohmann::ordered_json j;
  j["dimension"] = cfg.suite.dimension;
  j["clients"] = cfg.suite.clients;
  j["heterogeneity"] = cfg.suite.heterogeneity;
  j["noise_std"] = cfg.suite.noise_std;
  std::vector<std::string> algs;
  for (Algorithm a : cfg.algorithms) algs.emplace_back(to_string(a));
  j["algorithms"] = algs;
  j["rounds"] = fed.rounds;
  j["local_iterations"] = fed.local_iterations;
  j["learning_rate"] = fed.learning_rate;
  j["step_rule"] = fed.step_rule.kind == StepRule::Kind::Adam ? "adam" : "gd";
  j["adam_beta1"] = fed.step_rule.beta1;
  j["adam_beta2"] = fed.step_rule.beta2;
  j["adam_epsilon"] = fed.step_rule.epsilon;
  j["gamma_schedule"] = std::string(to_string(fed.gamma.kind));
  j["gamma_constant"] = fed.gamma.constant_value;
  j["gamma_theory_G"] = cfg.gamma_theory.heterogeneity ? nlohmann::ordered_json(*cfg.gamma_theory.heterogeneity)
                                                       : nlohmann::ordered_json(nullptr);
  j["gamma_theory_omega"] = cfg.gamma_theory.omega;
  j["gamma_theory_kappa"] =
      cfg.gamma_theory.kappa ? nlohmann::ordered_json(*cfg.gamma_theory.kappa) : nlohmann::ordered_json(nullptr);
  j["gamma_theory_rho"] = cfg.gamma_theory.rho;
  j["gamma_theory_epsilon"] = cfg.gamma_theory.rff_error;
  j["fedprox_gamma"] = fed.fedprox_gamma;
  j["fd_smoothing"] = fed.fd.smoothing;
  j["fd_directions"] = fed.fd.directions;
  j["scaffold2_shared_directions"] = fed.scaffold2_shared_directions;
  j["active_query"] = fed.active_query.enabled;
  j["active_candidates"] = fed.active_query.candidates;
  j["active_radius"] = fed.active_query.radius;
  j["active_select"] = fed.active_query.select;
  j["neighborhood_query"] = fed.neighborhood_query;
  j["feature_count"] = fed.feature_count;
  j["lengthscale"] = fed.kernel.lengthscale;
  j["gp_noise_variance"] = fed.gp_noise_variance;
  j["trajectory_window"] = fed.trajectory_window == TrajectoryDataset::kUnlimited
                               ? nlohmann::ordered_json(nullptr)
                               : nlohmann::ordered_json(fed.trajectory_window);
  j["shared_client_seeds"] = fed.shared_client_seeds;
  j["rho_probes"] = fed.rho_probes;
  j["seeds"] = cfg.seeds;
  j["initial_point"] = cfg.initial_point ? nlohmann::ordered_json(*cfg.initial_point) : nlohmann::ordered_json(nullptr);
  j["error_threshold"] = cfg.error_threshold;
  j["emit_plots"] = cfg.emit_plots;
  j["diagnostics_verbosity"] = cfg.diagnostics_verbosity == Verbosity::Off     ? "off"
                               : cfg.diagnostics_verbosity == Verbosity::Round ? "round"
                                                                               : "iteration";
  j["dump_coefficients"] = cfg.dump_coefficients;
  return j.dump(2) + "\n";
}

}  // namespace detail

/// Runs every configured algorithm for every seed and writes traces,
/// summary.csv and the resolved config (plus comparison.csv when asked).
/// The worker count and output directory are left out of the resolved config
/// so reruns compare byte for byte.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_comparison = false) {
  ensure_output_dir(cfg.output_dir);
  ExperimentResult result;
  const std::filesystem::path dir(cfg.output_dir);
  for (Algorithm a : cfg.algorithms) {
    for (std::uint64_t seed : cfg.seeds) {
      result.runs.push_back(run_seed(cfg, a, seed));
      detail::write_run_files(cfg, result.runs.back(), result);
    }
  }
  if (cfg.dump_coefficients) {
    for (std::uint64_t seed : cfg.seeds) {
      const auto suite = build_suite(cfg, seed);
      const std::string tag = std::to_string(seed);
      write_file_atomic(dir / ("suite_a_" + tag + ".csv"), matrix_csv(suite->dirichlet_a()));
      write_file_atomic(dir / ("suite_b_" + tag + ".csv"), matrix_csv(suite->dirichlet_b()));
      result.files.push_back(dir / ("suite_a_" + tag + ".csv"));
      result.files.push_back(dir / ("suite_b_" + tag + ".csv"));
    }
  }
  write_file_atomic(dir / "summary.csv", detail::summary_csv(cfg, result.runs));
  result.files.push_back(dir / "summary.csv");
  if (write_comparison) {
    write_file_atomic(dir / "comparison.csv", detail::comparison_csv(cfg, result.runs));
    result.files.push_back(dir / "comparison.csv");
  }
  write_file_atomic(dir / "config.json", detail::resolved_config_json(cfg));
  result.files.push_back(dir / "config.json");
  if (cfg.emit_plots) detail::write_plots(cfg, result.runs, result);
  return result;
}

/// run_experiment over an explicit algorithm list, with the wide comparison CSV.
inline ExperimentResult compare_algorithms(ExperimentConfig cfg, const std::vector<Algorithm>& algorithms) {
  if (algorithms.empty()) throw ConfigError("algorithms", "expected at least one algorithm");
  cfg.algorithms = algorithms;
  return run_experiment(cfg, true);
}

}  // namespace fzoos
