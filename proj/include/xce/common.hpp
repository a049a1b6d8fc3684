#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace xce {

/// Thrown when tensor/matrix operands have incompatible shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown by linear solvers on non-square, mismatched, or numerically
/// singular systems.
class SingularMatrixError : public std::runtime_error {
 public:
  explicit SingularMatrixError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown by file readers/writers on malformed or truncated artifacts.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when an experiment configuration fails validation.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Worker-count cap: XCE_THREADS if set, else hardware concurrency.
inline int worker_threads() {
  if (const char* env = std::getenv("XCE_THREADS")) {
    long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<int>(n);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n). Each index is independent, so results do not
/// depend on the worker count; exceptions rethrow on the caller's thread.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  const int workers = std::min<size_t>(worker_threads(), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errs(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errs[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace xce
