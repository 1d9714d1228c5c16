#pragma once

// Shared vocabulary for the fzoos library: linear algebra aliases, the error
// hierarchy and seeded random streams.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fzoos {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Every random stream in the library. Child streams are derived with
/// derive_seed so results never depend on thread scheduling.
using Rng = std::mt19937_64;

/// Malformed arguments: dimension mismatch, out-of-domain inputs, basis mismatch.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A factorization or other numerical routine could not complete.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration value violates a documented precondition. `field` names it.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw InputError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                     " vs " + std::to_string(b) + ")");
  }
}

/// Deterministically mixes a parent seed with a list of tags into a child seed.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * tags.size());
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffULL));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(parent);
  for (auto t : tags) push(t);
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

inline Rng make_rng(std::uint64_t parent, std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(parent, tags));
}

/// Stream tags used when deriving child seeds.
namespace stream {
inline constexpr std::uint64_t kFrequencies = 1;
inline constexpr std::uint64_t kPhases = 2;
inline constexpr std::uint64_t kSuite = 3;
inline constexpr std::uint64_t kClient = 4;
inline constexpr std::uint64_t kInitialPoint = 5;
inline constexpr std::uint64_t kProbes = 6;
inline constexpr std::uint64_t kSharedDirections = 7;
inline constexpr std::uint64_t kBasis = 8;
}  // namespace stream

inline Vector standard_normal_vector(Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector u(d);
  for (Eigen::Index k = 0; k < d; ++k) u[k] = normal(rng);
  return u;
}

namespace detail {
/// Number of eigenvalues of the symmetric tridiagonal (diag, sub) below x.
inline Eigen::Index sturm_count(const Vector& diag, const Vector& sub, double x) {
  Eigen::Index count = 0;
  double q = 1.0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    const double off = i > 0 ? sub[i - 1] * sub[i - 1] : 0.0;
    q = diag[i] - x - (i > 0 ? off / q : 0.0);
    if (q == 0.0) q = -std::numeric_limits<double>::epsilon() * (std::abs(x) + 1.0);
    if (q < 0.0) ++count;
  }
  return count;
}
}  // namespace detail

/// Spectral norm of a symmetric matrix (largest eigenvalue magnitude).
///
/// Householder tridiagonalization followed by Sturm bisection for the two
/// extreme eigenvalues, bisected down to adjacent doubles.
inline double spectral_norm_symmetric(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  if (m.rows() != m.cols()) throw std::invalid_argument("spectral_norm_symmetric: matrix is not square");
  const Eigen::Index n = m.rows();
  if (n == 1) return std::abs(m(0, 0));
  const Eigen::Tridiagonalization<Matrix> tri(m);
  const Vector diag = tri.diagonal();
  const Vector sub = tri.subDiagonal();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = (i > 0 ? std::abs(sub[i - 1]) : 0.0) + (i + 1 < n ? std::abs(sub[i]) : 0.0);
    lo = std::min(lo, diag[i] - r);
    hi = std::max(hi, diag[i] + r);
  }
  // Smallest x with at least `k` eigenvalues below it, i.e. eigenvalue k-1 (ascending).
  auto bisect = [&](Eigen::Index k) {
    double a = lo;
    double b = hi;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (a + b);
      if (mid <= a || mid >= b) break;
      if (detail::sturm_count(diag, sub, mid) >= k) {
        b = mid;
      } else {
        a = mid;
      }
    }
    return 0.5 * (a + b);
  };
  const double top = bisect(n);
  // The bottom eigenvalue only matters when it can exceed the top one in magnitude.
  if (-lo <= std::abs(top)) return std::abs(top);
  return std::max(std::abs(top), std::abs(bisect(1)));
}

}  // namespace fzoos
