#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "xce/numerics.hpp"

using namespace xce;

TEST(Rng, DeterministicStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(42), d(43);
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs |= (c.next_u64() != d.next_u64());
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformRange) {
  Rng rng(7);
  for (int i = 0; i < 100000; ++i) {
    double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
  Rng rng2(8);
  double mean = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) mean += rng2.uniform(-2.0, 6.0);
  mean /= n;
  EXPECT_NEAR(mean, 2.0, 0.05);
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  const int n = 400000;
  double m1 = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    m1 += x;
    m2 += x * x;
  }
  m1 /= n;
  m2 /= n;
  EXPECT_NEAR(m1, 0.0, 0.01);
  EXPECT_NEAR(m2, 1.0, 0.02);
}

TEST(Numerics, ComplexGaussianPower) {
  Rng rng(123);
  const size_t n = 200000;
  CVec v = sample_complex_gaussian(rng, n, 1.0);
  double p = 0;
  for (auto& x : v) p += std::norm(x);
  p /= n;
  EXPECT_GE(p, 0.99);
  EXPECT_LE(p, 1.01);

  Rng rng2(124);
  CVec w = sample_complex_gaussian(rng2, n, 4.0);
  double p4 = 0;
  for (auto& x : w) p4 += std::norm(x);
  p4 /= n;
  EXPECT_GE(p4, 3.96);
  EXPECT_LE(p4, 4.04);
}

TEST(Numerics, ComplexGaussianRejectsBadArgs) {
  Rng rng(1);
  EXPECT_THROW(sample_complex_gaussian(rng, 0, 1.0), std::invalid_argument);
  EXPECT_THROW(sample_complex_gaussian(rng, 4, 0.0), std::invalid_argument);
  EXPECT_THROW(sample_complex_gaussian(rng, 4, -1.0), std::invalid_argument);
}

TEST(Numerics, HermitianSolveIdentity) {
  CMat a = CMat::identity(5);
  Rng rng(5);
  CVec b = sample_complex_gaussian(rng, 5, 1.0);
  CVec x = hermitian_solve(a, b);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(x[i].real(), b[i].real(), 1e-14);
    EXPECT_NEAR(x[i].imag(), b[i].imag(), 1e-14);
  }
}

TEST(Numerics, HermitianSolveDiagonal) {
  const int n = 6;
  CMat a(n, n);
  for (int i = 0; i < n; ++i) a(i, i) = 1.0 + i;
  CVec b(n);
  for (int i = 0; i < n; ++i) b[i] = cplx(i, -i);
  CVec x = hermitian_solve(a, b);
  for (int i = 0; i < n; ++i) {
    EXPECT_NEAR(x[i].real(), i / (1.0 + i), 1e-14);
    EXPECT_NEAR(x[i].imag(), -i / (1.0 + i), 1e-14);
  }
}

// Random Hermitian PD built as Q diag(lambda) Q^H with Q from Gram-Schmidt.
TEST(Numerics, HermitianSolveRandomSpd) {
  const int n = 24;
  Rng rng(99);
  CMat q(n, n);
  for (int j = 0; j < n; ++j) {
    CVec v = sample_complex_gaussian(rng, n, 1.0);
    for (int k = 0; k < j; ++k) {
      CVec qk = q.col(k);
      cplx proj = cdot(qk, v);
      for (int i = 0; i < n; ++i) v[i] -= proj * qk[i];
    }
    double nv = norm2(v);
    ASSERT_GT(nv, 1e-8);
    for (int i = 0; i < n; ++i) q(i, j) = v[i] / nv;
  }
  CMat a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      cplx s = 0;
      for (int k = 0; k < n; ++k) {
        double lambda = 0.5 + k;
        s += q(i, k) * lambda * std::conj(q(j, k));
      }
      a(i, j) = s;
    }
  CVec b = sample_complex_gaussian(rng, n, 1.0);
  CVec x = hermitian_solve(a, b);
  CVec r = matvec(a, x);
  double err = 0;
  for (int i = 0; i < n; ++i) err += std::norm(r[i] - b[i]);
  EXPECT_LE(std::sqrt(err), 1e-10);
}

TEST(Numerics, CholeskyRejectsSingular) {
  CMat a(3, 3);
  a(0, 0) = 1.0;
  a(1, 1) = 1.0;
  a(2, 2) = 0.0;  // zero pivot
  EXPECT_THROW(hermitian_solve(a, CVec(3, cplx(1, 0))), SingularMatrixError);

  CMat rank1(2, 2);
  rank1(0, 0) = 1.0;
  rank1(0, 1) = 1.0;
  rank1(1, 0) = 1.0;
  rank1(1, 1) = 1.0;
  EXPECT_THROW(hermitian_solve(rank1, CVec(2, cplx(1, 0))), SingularMatrixError);
}

TEST(Numerics, HermitianSolveShapeChecks) {
  CMat a(3, 4);
  EXPECT_THROW(hermitian_solve(a, CVec(3)), SingularMatrixError);
  CMat sq = CMat::identity(3);
  EXPECT_THROW(hermitian_solve(sq, CVec(2)), SingularMatrixError);
}

TEST(Numerics, DftOrthonormal) {
  for (int m : {1, 4, 16, 64, 256}) {
    CMat f = dft_matrix(m);
    for (int j = 0; j < m; ++j) {
      CVec cj = f.col(j);
      EXPECT_NEAR(norm2(cj), 1.0, 1e-12) << "M=" << m << " col=" << j;
    }
    // Spot-check orthogonality on a few pairs (full check is O(M^3)).
    for (int j = 1; j < m; j = 2 * j + 1) {
      cplx ip = cdot(f.col(0), f.col(j));
      EXPECT_NEAR(std::abs(ip), 0.0, 1e-12) << "M=" << m << " pair=(0," << j << ")";
    }
  }
}

TEST(Numerics, SeedMixSpreads) {
  EXPECT_NE(seed_mix(1, 2), seed_mix(2, 1));
  EXPECT_NE(seed_mix(0, 0), seed_mix(0, 1));
  EXPECT_NE(seed_mix(5, 7, 1), seed_mix(5, 7, 2));
  EXPECT_EQ(seed_mix(5, 7, 1), seed_mix(5, 7, 1));
}

TEST(Numerics, WorkerThreadsEnv) {
  setenv("XCE_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3);
  setenv("XCE_THREADS", "0", 1);
  EXPECT_GE(worker_threads(), 1);
  unsetenv("XCE_THREADS");
  EXPECT_GE(worker_threads(), 1);
}
