#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "xce/channel.hpp"
#include "xce/common.hpp"
#include "xce/numerics.hpp"

namespace xce::baselines {

/// ||h_true - h_hat||^2 / ||h_true||^2, per sample. Callers average over
/// samples in the linear domain before any dB conversion.
inline double nmse(const CVec& h_true, const CVec& h_hat) {
  if (h_true.size() != h_hat.size())
    throw std::invalid_argument("nmse: length mismatch " + std::to_string(h_true.size()) +
                                " vs " + std::to_string(h_hat.size()));
  double denom = norm2_sq(h_true);
  if (!(denom > 0)) throw std::invalid_argument("nmse: zero reference channel");
  double num = 0;
  for (size_t i = 0; i < h_true.size(); ++i) num += std::norm(h_true[i] - h_hat[i]);
  return num / denom;
}

struct LmmseModel {
  CMat R_h;
  int M = 0;
};

/// Sample covariance (1/N) sum h h^H, Hermitian-symmetrized, with a
/// 1e-9 * trace/M diagonal jitter so the Wiener solve stays factorable
/// even when N < M.
inline LmmseModel fit_lmmse(const std::vector<CVec>& channels) {
  if (channels.size() < 2)
    throw std::invalid_argument("fit_lmmse: need at least 2 training channels");
  const int m = static_cast<int>(channels[0].size());
  for (const auto& h : channels)
    if (static_cast<int>(h.size()) != m)
      throw std::invalid_argument("fit_lmmse: training channels have mixed lengths");

  CMat r(m, m);
  for (const auto& h : channels)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) r(i, j) += h[i] * std::conj(h[j]);
  const double inv_n = 1.0 / channels.size();
  for (auto& x : r.data) x *= inv_n;

  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) {
      cplx sym = 0.5 * (r(i, j) + std::conj(r(j, i)));
      r(i, j) = sym;
      r(j, i) = std::conj(sym);
    }
  double trace = 0;
  for (int i = 0; i < m; ++i) trace += r(i, i).real();
  const double jitter = 1e-9 * trace / m;
  for (int i = 0; i < m; ++i) r(i, i) += jitter;
  return {std::move(r), m};
}

/// Wiener filter of the LS observation: R (R + I/snr)^{-1} h_ls.
inline CVec lmmse_estimate(const LmmseModel& model, const CVec& h_ls, double snr_linear) {
  if (static_cast<int>(h_ls.size()) != model.M)
    throw std::invalid_argument("lmmse_estimate: observation length " +
                                std::to_string(h_ls.size()) + " vs model M=" +
                                std::to_string(model.M));
  if (!(snr_linear > 0)) throw std::invalid_argument("lmmse_estimate: snr_linear must be > 0");
  CMat a = model.R_h;
  const double eps = 1.0 / snr_linear;
  for (int i = 0; i < model.M; ++i) a(i, i) += eps;
  CVec y = hermitian_solve(a, h_ls);
  return matvec(model.R_h, y);
}

struct HyOmpConfig {
  int far_grid = 0;
  int near_angle_grid = 0;
  std::vector<double> near_dist_samples;
  int sparsity_far = 0;
  int sparsity_near = 0;
  // Optional residual-threshold early stop. The threshold has no reference
  // value in the source material; it is a config knob, off by default.
  bool adaptive = false;
  double residual_threshold = 1e-3;

  void validate() const {
    if (far_grid < 0 || near_angle_grid < 0)
      throw std::invalid_argument("HyOmpConfig: negative grid size");
    if (far_grid == 0 && (near_angle_grid == 0 || near_dist_samples.empty()))
      throw std::invalid_argument("HyOmpConfig: both dictionaries empty");
    for (size_t i = 0; i < near_dist_samples.size(); ++i) {
      if (!(near_dist_samples[i] > 0))
        throw std::invalid_argument("HyOmpConfig: near distances must be > 0");
      if (i > 0 && !(near_dist_samples[i] > near_dist_samples[i - 1]))
        throw std::invalid_argument("HyOmpConfig: near distances must be strictly increasing");
    }
    if (sparsity_far < 0 || sparsity_near < 0)
      throw std::invalid_argument("HyOmpConfig: negative sparsity");
  }
};

/// Defaults: M-point angular far grid, M angles x 8 log-spaced distances for
/// the near grid, genie sparsity equal to the scenario's true path split.
inline HyOmpConfig default_hyomp_config(const channel::ArrayConfig& array, int l0, int l,
                                        std::pair<double, double> r_range) {
  HyOmpConfig cfg;
  cfg.far_grid = array.M;
  cfg.near_angle_grid = array.M;
  cfg.near_dist_samples.resize(8);
  double lo = r_range.first, hi = r_range.second;
  for (int k = 0; k < 8; ++k)
    cfg.near_dist_samples[k] = lo * std::pow(hi / lo, k / 7.0);
  cfg.sparsity_far = l0;
  cfg.sparsity_near = l - l0;
  return cfg;
}

struct AtomMeta {
  bool is_near = false;
  double theta = 0.0;
  double r = 0.0;  // meaningful only when is_near
};

struct HybridDicts {
  CMat far;   // M x far_grid
  CMat near;  // M x (near_angle_grid * |near_dist_samples|)
  std::vector<AtomMeta> meta;  // global column index: far columns, then near
  int M = 0;

  int n_far() const { return far.cols; }
  int n_total() const { return far.cols + near.cols; }
  CVec atom(int j) const { return j < far.cols ? far.col(j) : near.col(j - far.cols); }
};

/// Far columns sample sin(theta) = -1 + 2k/far_grid; near columns sweep the
/// same style of angular grid crossed with near_dist_samples, angle-major.
inline HybridDicts build_hybrid_dictionaries(const channel::ArrayConfig& array,
                                             const HyOmpConfig& cfg) {
  cfg.validate();
  const int m = array.M;
  HybridDicts d;
  d.M = m;
  d.far = CMat(m, cfg.far_grid);
  for (int k = 0; k < cfg.far_grid; ++k) {
    double theta = std::asin(-1.0 + 2.0 * k / cfg.far_grid);
    CVec a = channel::steer_far(array, theta);
    for (int i = 0; i < m; ++i) d.far(i, k) = a[i];
    d.meta.push_back({false, theta, 0.0});
  }
  const int nd = static_cast<int>(cfg.near_dist_samples.size());
  d.near = CMat(m, cfg.near_angle_grid * nd);
  int col = 0;
  for (int k = 0; k < cfg.near_angle_grid; ++k) {
    double theta = std::asin(-1.0 + 2.0 * k / cfg.near_angle_grid);
    for (int q = 0; q < nd; ++q, ++col) {
      double r = cfg.near_dist_samples[q];
      CVec a = channel::steer_near(array, theta, r);
      for (int i = 0; i < m; ++i) d.near(i, col) = a[i];
      d.meta.push_back({true, theta, r});
    }
  }
  return d;
}

namespace detail {

/// Least-squares coefficients of y against the selected atoms. Normal
/// equations via the Hermitian solver; a singular Gram matrix (nearly
/// parallel atoms) falls back to a minimum-norm solve.
inline CVec refit(const HybridDicts& d, const std::vector<int>& selected, const CVec& y) {
  const int m = d.M;
  const int k = static_cast<int>(selected.size());
  CMat a(m, k);
  for (int j = 0; j < k; ++j) {
    CVec col = d.atom(selected[j]);
    for (int i = 0; i < m; ++i) a(i, j) = col[i];
  }
  CMat gram(k, k);
  CVec rhs(k);
  for (int p = 0; p < k; ++p) {
    for (int q = 0; q < k; ++q) {
      cplx s = 0;
      for (int i = 0; i < m; ++i) s += std::conj(a(i, p)) * a(i, q);
      gram(p, q) = s;
    }
    cplx s = 0;
    for (int i = 0; i < m; ++i) s += std::conj(a(i, p)) * y[i];
    rhs[p] = s;
  }
  try {
    return hermitian_solve(gram, rhs);
  } catch (const SingularMatrixError&) {
    Eigen::MatrixXcd ae(m, k);
    Eigen::VectorXcd ye(m);
    for (int i = 0; i < m; ++i) {
      ye(i) = y[i];
      for (int j = 0; j < k; ++j) ae(i, j) = a(i, j);
    }
    Eigen::VectorXcd x = ae.completeOrthogonalDecomposition().solve(ye);
    CVec out(k);
    for (int j = 0; j < k; ++j) out[j] = x(j);
    return out;
  }
}

inline CVec synth(const HybridDicts& d, const std::vector<int>& selected, const CVec& coef) {
  CVec h(d.M, 0.0);
  for (size_t j = 0; j < selected.size(); ++j) {
    CVec col = d.atom(selected[j]);
    for (int i = 0; i < d.M; ++i) h[i] += coef[j] * col[i];
  }
  return h;
}

}  // namespace detail

/// Two-stage OMP: greedy atom selection against the far dictionary, then the
/// near dictionary, with a joint least-squares refit over everything selected
/// so far after every pick (so the final coefficients are jointly fitted
/// across both stages). Ties in |correlation| go to the lowest column index.
inline CVec hyomp_estimate(const CVec& h_ls, const HybridDicts& dicts, const HyOmpConfig& cfg,
                           std::vector<double>* residual_history = nullptr) {
  cfg.validate();
  if (static_cast<int>(h_ls.size()) != dicts.M)
    throw std::invalid_argument("hyomp_estimate: observation length " +
                                std::to_string(h_ls.size()) + " vs dictionary M=" +
                                std::to_string(dicts.M));
  if (cfg.sparsity_far + cfg.sparsity_near < 1)
    throw std::invalid_argument("hyomp_estimate: total sparsity must be >= 1");
  if (cfg.sparsity_far > dicts.far.cols || cfg.sparsity_near > dicts.near.cols)
    throw std::invalid_argument("hyomp_estimate: sparsity exceeds dictionary size");

  const double y_norm = norm2(h_ls);
  std::vector<int> selected;
  std::vector<char> taken(dicts.n_total(), 0);
  CVec residual = h_ls;
  CVec coef;
  if (residual_history) {
    residual_history->clear();
    residual_history->push_back(norm2(residual));
  }

  auto run_stage = [&](int lo, int hi, int picks) {
    for (int t = 0; t < picks; ++t) {
      if (cfg.adaptive && norm2(residual) <= cfg.residual_threshold * y_norm) return;
      int best = -1;
      double best_corr = -1.0;
      for (int j = lo; j < hi; ++j) {
        if (taken[j]) continue;
        CVec a = dicts.atom(j);
        double corr = std::abs(cdot(a, residual));
        if (corr > best_corr) {
          best_corr = corr;
          best = j;
        }
      }
      if (best < 0) return;
      taken[best] = 1;
      selected.push_back(best);
      coef = detail::refit(dicts, selected, h_ls);
      CVec fit = detail::synth(dicts, selected, coef);
      for (int i = 0; i < dicts.M; ++i) residual[i] = h_ls[i] - fit[i];
      if (residual_history) residual_history->push_back(norm2(residual));
    }
  };

  run_stage(0, dicts.n_far(), cfg.sparsity_far);
  run_stage(dicts.n_far(), dicts.n_total(), cfg.sparsity_near);

  if (selected.empty()) return CVec(dicts.M, 0.0);
  return detail::synth(dicts, selected, coef);
}

}  // namespace xce::baselines
