#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "xce/common.hpp"

namespace xce {

using cplx = std::complex<double>;
using CVec = std::vector<cplx>;

/// Dense complex matrix, row-major.
struct CMat {
  int rows = 0;
  int cols = 0;
  std::vector<cplx> data;

  CMat() = default;
  CMat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c) {}

  cplx& operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  const cplx& operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

  static CMat identity(int n) {
    CMat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  CVec col(int j) const {
    CVec v(rows);
    for (int i = 0; i < rows; ++i) v[i] = (*this)(i, j);
    return v;
  }
};

inline double norm2(const CVec& v) {
  double s = 0;
  for (const cplx& x : v) s += std::norm(x);
  return std::sqrt(s);
}

inline double norm2_sq(const CVec& v) {
  double s = 0;
  for (const cplx& x : v) s += std::norm(x);
  return s;
}

/// Inner product conj(a)·b.
inline cplx cdot(const CVec& a, const CVec& b) {
  cplx s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
  return s;
}

inline CVec matvec(const CMat& a, const CVec& x) {
  if (a.cols != static_cast<int>(x.size()))
    throw ShapeError("matvec: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                     " times vector of length " + std::to_string(x.size()));
  CVec y(a.rows, 0.0);
  for (int i = 0; i < a.rows; ++i) {
    cplx s = 0;
    const cplx* row = a.data.data() + static_cast<size_t>(i) * a.cols;
    for (int j = 0; j < a.cols; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

/// xoshiro256++ seeded through splitmix64. The raw 64-bit stream is
/// bit-exact for a given seed on every platform; derived doubles go
/// through (x >> 11) * 2^-53 and Box-Muller.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; pairs are generated together and the
  /// spare is cached, so the stream is a pure function of the seed.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  /// Circularly symmetric complex Gaussian with E|x|^2 = variance.
  cplx cnormal(double variance) {
    double s = std::sqrt(variance / 2.0);
    double re = s * normal();
    double im = s * normal();
    return {re, im};
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Deterministic seed derivation for sub-streams (dataset noise regeneration,
/// per-point sweeps). Chained splitmix64 over the inputs.
inline uint64_t seed_mix(uint64_t a, uint64_t b, uint64_t c = 0) {
  auto step = [](uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  uint64_t x = a;
  uint64_t h = step(x);
  x ^= b + 0x9e3779b97f4a7c15ULL + (h << 6);
  h ^= step(x);
  x ^= c + 0x9e3779b97f4a7c15ULL + (h << 6);
  return step(x);
}

/// n i.i.d. CN(0, variance) samples.
inline CVec sample_complex_gaussian(Rng& rng, size_t n, double variance) {
  if (n == 0) throw std::invalid_argument("sample_complex_gaussian: n must be >= 1");
  if (!(variance > 0)) throw std::invalid_argument("sample_complex_gaussian: variance must be > 0");
  CVec v(n);
  for (auto& x : v) x = rng.cnormal(variance);
  return v;
}

/// Cholesky factorization A = L L^H for Hermitian positive-definite A.
/// Pivots below 1e-12 * max diagonal raise SingularMatrixError.
inline CMat cholesky(const CMat& a) {
  if (a.rows != a.cols)
    throw SingularMatrixError("cholesky: matrix is " + std::to_string(a.rows) + "x" +
                              std::to_string(a.cols) + ", expected square");
  const int n = a.rows;
  double max_diag = 0.0;
  for (int i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i).real()));
  const double tol = 1e-12 * std::max(max_diag, 1e-300);

  CMat l(n, n);
  for (int j = 0; j < n; ++j) {
    double d = a(j, j).real();
    for (int k = 0; k < j; ++k) d -= std::norm(l(j, k));
    if (!(d > tol)) throw SingularMatrixError("cholesky: pivot " + std::to_string(d) +
                                              " at index " + std::to_string(j));
    l(j, j) = std::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      cplx s = a(i, j);
      for (int k = 0; k < j; ++k) s -= l(i, k) * std::conj(l(j, k));
      l(i, j) = s / l(j, j).real();
    }
  }
  return l;
}

/// Solves L y = b then L^H x = y given a Cholesky factor L.
inline CVec cholesky_solve(const CMat& l, const CVec& b) {
  const int n = l.rows;
  CVec y(n);
  for (int i = 0; i < n; ++i) {
    cplx s = b[i];
    for (int k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i).real();
  }
  CVec x(n);
  for (int i = n - 1; i >= 0; --i) {
    cplx s = y[i];
    for (int k = i + 1; k < n; ++k) s -= std::conj(l(k, i)) * x[k];
    x[i] = s / l(i, i).real();
  }
  return x;
}

/// Solves A X = B for Hermitian positive-definite A via Cholesky.
inline CMat hermitian_solve(const CMat& a, const CMat& b) {
  if (a.rows != a.cols)
    throw SingularMatrixError("hermitian_solve: A is " + std::to_string(a.rows) + "x" +
                              std::to_string(a.cols) + ", expected square");
  if (b.rows != a.rows)
    throw SingularMatrixError("hermitian_solve: B has " + std::to_string(b.rows) +
                              " rows, expected " + std::to_string(a.rows));
  CMat l = cholesky(a);
  CMat x(b.rows, b.cols);
  CVec col(b.rows);
  for (int j = 0; j < b.cols; ++j) {
    for (int i = 0; i < b.rows; ++i) col[i] = b(i, j);
    CVec xj = cholesky_solve(l, col);
    for (int i = 0; i < b.rows; ++i) x(i, j) = xj[i];
  }
  return x;
}

inline CVec hermitian_solve(const CMat& a, const CVec& b) {
  if (a.rows != a.cols)
    throw SingularMatrixError("hermitian_solve: A is " + std::to_string(a.rows) + "x" +
                              std::to_string(a.cols) + ", expected square");
  if (static_cast<int>(b.size()) != a.rows)
    throw SingularMatrixError("hermitian_solve: b has length " + std::to_string(b.size()) +
                              ", expected " + std::to_string(a.rows));
  return cholesky_solve(cholesky(a), b);
}

/// M x M matrix whose k-th column is the plane-wave response at
/// sin(theta) = -1 + 2k/M. Columns are orthonormal.
inline CMat dft_matrix(int m) {
  if (m < 1) throw std::invalid_argument("dft_matrix: M must be >= 1");
  CMat a(m, m);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (int k = 0; k < m; ++k) {
    double sin_theta = -1.0 + 2.0 * k / m;
    for (int i = 0; i < m; ++i) {
      double phase = -std::numbers::pi * i * sin_theta;
      a(i, k) = scale * cplx(std::cos(phase), std::sin(phase));
    }
  }
  return a;
}

}  // namespace xce
