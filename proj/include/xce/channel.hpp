#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xce/common.hpp"
#include "xce/numerics.hpp"

namespace xce::channel {

/// Uniform linear array, half-wavelength spacing.
struct ArrayConfig {
  int M;
  double wavelength;
  double spacing;

  ArrayConfig(int m, double lambda) : M(m), wavelength(lambda), spacing(lambda / 2.0) {
    if (m < 1) throw std::invalid_argument("ArrayConfig: M must be >= 1");
    if (!(lambda > 0)) throw std::invalid_argument("ArrayConfig: wavelength must be > 0");
  }

  /// Signed offset of antenna m (0-based) from the array center, in units of
  /// the spacing: delta = m - (M-1)/2, symmetric about zero.
  double delta(int m) const { return m - (M - 1) / 2.0; }
};

enum class PathKind { FarField, NearField };

struct PathParams {
  PathKind kind = PathKind::FarField;
  double theta = 0.0;  // radians, [-pi/2, pi/2]
  double r = 0.0;      // meters, NearField only
  cplx gain{1.0, 0.0};

  static PathParams far(double theta, cplx gain) {
    check_theta(theta);
    return {PathKind::FarField, theta, 0.0, gain};
  }
  static PathParams near(double theta, double r, cplx gain) {
    check_theta(theta);
    if (!(r > 0)) throw std::invalid_argument("PathParams: near-field r must be > 0");
    return {PathKind::NearField, theta, r, gain};
  }

 private:
  static void check_theta(double theta) {
    constexpr double half_pi = std::numbers::pi / 2.0;
    if (!(theta >= -half_pi && theta <= half_pi))
      throw std::invalid_argument("PathParams: theta out of [-pi/2, pi/2]");
  }
};

struct ChannelSample {
  CVec h_true;   // power-normalized, ||h||^2 = M
  CVec h_ls;     // h_true + n/sqrt(P)
  double snr_linear = 1.0;
  std::vector<PathParams> paths;
  uint64_t seed = 0;
};

struct DatasetSpec {
  ArrayConfig array;
  int L = 6;
  int L0 = 1;
  std::pair<double, double> r_range{10.0, 80.0};
  std::pair<double, double> snr_range_db{-5.0, 20.0};  // lo == hi pins the SNR
  size_t n_samples = 0;
  uint64_t base_seed = 0;

  void validate() const {
    if (L < 1) throw std::invalid_argument("DatasetSpec: L must be >= 1");
    if (L0 < 0 || L0 > L) throw std::invalid_argument("DatasetSpec: need 0 <= L0 <= L");
    if (!(r_range.first > 0) || !(r_range.second >= r_range.first))
      throw std::invalid_argument("DatasetSpec: bad r_range");
    if (!(snr_range_db.second >= snr_range_db.first))
      throw std::invalid_argument("DatasetSpec: bad snr_range_db");
  }
};

inline double rayleigh_distance(const ArrayConfig& array) {
  return static_cast<double>(array.M) * array.M * array.wavelength / 2.0;
}

/// Plane-wave response: entry m = (1/sqrt(M)) exp(-j 2pi (d/lambda) m sin(theta)).
inline CVec steer_far(const ArrayConfig& array, double theta) {
  constexpr double half_pi = std::numbers::pi / 2.0;
  if (!(theta >= -half_pi && theta <= half_pi))
    throw std::invalid_argument("steer_far: theta out of [-pi/2, pi/2]");
  const int m = array.M;
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  const double k = 2.0 * std::numbers::pi * array.spacing / array.wavelength * std::sin(theta);
  CVec a(m);
  for (int i = 0; i < m; ++i) {
    double phase = -k * i;
    a[i] = scale * cplx(std::cos(phase), std::sin(phase));
  }
  return a;
}

/// Spherical-wave response for a source at (theta, r) measured from the array
/// center. Antenna m sits at signed offset u_m = delta_m * d along the array;
/// its distance to the source is
///   dist_m = sqrt(r^2 + u_m^2 + 2 r u_m sin(theta)),
/// and entry m carries phase -(2pi/lambda)(dist_m - dist_0), referenced to
/// antenna 0 so that the r -> inf limit reproduces steer_far entry-wise
/// (dist_m - dist_0 -> m*d*sin(theta)), not merely up to a global phase.
inline CVec steer_near(const ArrayConfig& array, double theta, double r) {
  constexpr double half_pi = std::numbers::pi / 2.0;
  if (!(theta >= -half_pi && theta <= half_pi))
    throw std::invalid_argument("steer_near: theta out of [-pi/2, pi/2]");
  if (!(r > 0)) throw std::invalid_argument("steer_near: r must be > 0");
  const int m = array.M;
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  const double s = std::sin(theta);
  const double k = 2.0 * std::numbers::pi / array.wavelength;
  auto dist = [&](int i) {
    double u = array.delta(i) * array.spacing;
    return std::sqrt(r * r + u * u + 2.0 * r * u * s);
  };
  const double d0 = dist(0);
  CVec a(m);
  for (int i = 0; i < m; ++i) {
    double phase = -k * (dist(i) - d0);
    a[i] = scale * cplx(std::cos(phase), std::sin(phase));
  }
  return a;
}

inline CVec steer(const ArrayConfig& array, const PathParams& p) {
  return p.kind == PathKind::FarField ? steer_far(array, p.theta)
                                      : steer_near(array, p.theta, p.r);
}

/// sqrt(M/L) * sum_l g_l a(theta_l[, r_l]).
inline CVec gen_hybrid_channel(const ArrayConfig& array, const std::vector<PathParams>& paths) {
  if (paths.empty()) throw std::invalid_argument("gen_hybrid_channel: empty path list");
  const int m = array.M;
  CVec h(m, 0.0);
  for (const auto& p : paths) {
    CVec a = steer(array, p);
    for (int i = 0; i < m; ++i) h[i] += p.gain * a[i];
  }
  const double scale = std::sqrt(static_cast<double>(m) / paths.size());
  for (auto& x : h) x *= scale;
  return h;
}

/// Rescales h so ||h||^2 = M exactly.
inline CVec normalize_power(const CVec& h) {
  double n = norm2(h);
  if (!(n > 0)) throw std::domain_error("normalize_power: degenerate zero channel");
  double scale = std::sqrt(static_cast<double>(h.size())) / n;
  CVec out(h.size());
  for (size_t i = 0; i < h.size(); ++i) out[i] = h[i] * scale;
  return out;
}

/// h + n/sqrt(P), n ~ CN(0, I) per entry, P = snr_linear.
inline CVec observe_ls(const CVec& h, double snr_linear, Rng& rng) {
  if (!(snr_linear > 0)) throw std::invalid_argument("observe_ls: snr_linear must be > 0");
  const double amp = 1.0 / std::sqrt(snr_linear);
  CVec y(h.size());
  for (size_t i = 0; i < h.size(); ++i) y[i] = h[i] + amp * rng.cnormal(1.0);
  return y;
}

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double linear_to_db(double lin) { return 10.0 * std::log10(lin); }

/// Sample i of a dataset; depends only on (spec, base_seed + i). Draw order
/// per sample is fixed: L0 far paths (theta, gain), then L - L0 near paths
/// (theta, r, gain), then SNR in dB if the range is non-degenerate, then the
/// LS noise.
inline ChannelSample make_sample(const DatasetSpec& spec, size_t i) {
  spec.validate();
  constexpr double half_pi = std::numbers::pi / 2.0;
  const uint64_t seed = spec.base_seed + i;
  Rng rng(seed);

  std::vector<PathParams> paths;
  paths.reserve(spec.L);
  for (int l = 0; l < spec.L0; ++l) {
    double theta = rng.uniform(-half_pi, half_pi);
    paths.push_back(PathParams::far(theta, rng.cnormal(1.0)));
  }
  for (int l = spec.L0; l < spec.L; ++l) {
    double theta = rng.uniform(-half_pi, half_pi);
    double r = rng.uniform(spec.r_range.first, spec.r_range.second);
    paths.push_back(PathParams::near(theta, r, rng.cnormal(1.0)));
  }

  ChannelSample s;
  s.paths = std::move(paths);
  s.seed = seed;
  s.h_true = normalize_power(gen_hybrid_channel(spec.array, s.paths));
  double snr_db = spec.snr_range_db.first == spec.snr_range_db.second
                      ? spec.snr_range_db.first
                      : rng.uniform(spec.snr_range_db.first, spec.snr_range_db.second);
  s.snr_linear = db_to_linear(snr_db);
  s.h_ls = observe_ls(s.h_true, s.snr_linear, rng);
  return s;
}

/// Per-sample seeding keeps the result independent of the worker count.
inline std::vector<ChannelSample> make_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<ChannelSample> out(spec.n_samples);
  parallel_for(spec.n_samples, [&](size_t i) { out[i] = make_sample(spec, i); });
  return out;
}

}  // namespace xce::channel
