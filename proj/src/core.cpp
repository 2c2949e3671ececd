#include "mlsmc/core.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iostream>
#include <limits>
#include <mutex>
#include <thread>
#include <vector>

namespace mlsmc {

void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

namespace {
std::mutex g_warn_mutex;
WarningSink g_sink;
unsigned g_workers = 0;
}  // namespace

void set_warning_sink(WarningSink sink) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  g_sink = std::move(sink);
}

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_warn_mutex);
  if (g_sink)
    g_sink(message);
  else
    std::cerr << "warning: " << message << '\n';
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RandomStream::RandomStream(std::uint64_t seed) : engine_(splitmix64(seed)) {}

RandomStream RandomStream::derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return RandomStream(h);
}

Vec draw_normals(NormalSource& src, Index n) {
  Vec w(n);
  for (Index i = 0; i < n; ++i) w[i] = src.normal();
  return w;
}

void set_worker_count(unsigned workers) { g_workers = workers; }

unsigned worker_count() {
  if (g_workers > 0) return g_workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(Index n, const std::function<void(Index)>& body) {
  const Index workers = std::min<Index>(worker_count(), n);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const Index block = (n + workers - 1) / workers;
  for (Index w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (Index i = w * block; i < std::min(n, (w + 1) * block); ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double logsumexp(const Vec& x) {
  const double m = x.size() ? x.maxCoeff() : -std::numeric_limits<double>::infinity();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

Mat symmetric_function(const Mat& s, const std::function<double(double)>& f) {
  if (s.size() == 0) return s;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (s + s.transpose()));
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigendecomposition failed");
  Vec fv = es.eigenvalues().unaryExpr(f);
  return es.eigenvectors() * fv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace mlsmc
