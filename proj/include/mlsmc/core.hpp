#pragma once
/// Shared aliases, error types, random streams and the data-parallel loop.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace mlsmc {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument or configuration problem detected before any computation.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numerical routine failed (factorization, eigen-solver, linear solver).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// All incremental weights at a level vanished.
class WeightDegeneracy : public Error {
 public:
  WeightDegeneracy(int level, const std::string& what)
      : Error(what), level_(level) {}
  int level() const { return level_; }

 private:
  int level_;
};

void require(bool condition, const std::string& message);

// ---------------------------------------------------------------------------
// logging: a single process-wide sink for warnings; the harness collects them
// into meta.json, the default writes to stderr.

using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

// ---------------------------------------------------------------------------
// randomness

/// Source of standard normal variates (lets tests substitute a degenerate source).
class NormalSource {
 public:
  virtual ~NormalSource() = default;
  virtual double normal() = 0;
};

/// Always returns zero: turns every proposal/extension into its conditional mean.
class ZeroNormalSource final : public NormalSource {
 public:
  double normal() override { return 0.0; }
};

std::uint64_t splitmix64(std::uint64_t x);

/// Independent stream keyed by a path of integers, e.g. (seed, level, stage, particle).
class RandomStream final : public NormalSource {
 public:
  explicit RandomStream(std::uint64_t seed);
  static RandomStream derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

  double normal() override { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t bits() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

Vec draw_normals(NormalSource& src, Index n);

// Named stream tags so different consumers of one seed never collide.
namespace stream {
inline constexpr std::uint64_t kPrior = 1;
inline constexpr std::uint64_t kMutation = 2;
inline constexpr std::uint64_t kResample = 3;
inline constexpr std::uint64_t kExtension = 4;
inline constexpr std::uint64_t kData = 5;
inline constexpr std::uint64_t kLanczos = 6;
}  // namespace stream

// ---------------------------------------------------------------------------
// parallelism

/// Number of workers used by parallel_for (0 = hardware concurrency).
void set_worker_count(unsigned workers);
unsigned worker_count();

/// Runs body(i) for i in [0, n). Work is split into contiguous blocks; bodies
/// must only write to slot i, so results never depend on the worker count.
void parallel_for(Index n, const std::function<void(Index)>& body);

// ---------------------------------------------------------------------------
// small numerics

double logsumexp(const Vec& x);

/// Symmetric square root / function of a symmetric matrix via eigendecomposition.
Mat symmetric_function(const Mat& s, const std::function<double(double)>& f);

}  // namespace mlsmc
