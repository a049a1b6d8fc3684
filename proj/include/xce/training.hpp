#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xce/autograd.hpp"
#include "xce/baselines.hpp"
#include "xce/channel.hpp"
#include "xce/common.hpp"
#include "xce/model.hpp"
#include "xce/numerics.hpp"

namespace xce::training {

namespace ag = xce::autograd;

struct TrainConfig {
  int batch_size = 64;
  int epochs = 200;
  double lr0 = 0.001;
  double decay_factor = 0.1;
  int decay_every = 50;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(lr0 >= 0)) throw ConfigError("train: lr0 must be >= 0");
    if (!(decay_factor > 0)) throw ConfigError("train: decay_factor must be > 0");
    if (decay_every < 1) throw ConfigError("train: decay_every must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("train: betas must lie in [0, 1)");
    if (!(eps_adam > 0)) throw ConfigError("train: eps_adam must be > 0");
  }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return cfg.lr0 * std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

/// Moment slots run parallel to ModelParams::params; frozen entries stay
/// empty so the optimizer cannot touch them even by accident.
struct OptimizerState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  long t = 0;
};

inline OptimizerState make_optimizer(const model::ModelParams& p) {
  OptimizerState s;
  s.slots.resize(p.params.size());
  for (size_t i = 0; i < p.params.size(); ++i) {
    if (!p.params[i].trainable) continue;
    s.slots[i].m.assign(p.params[i].tensor.numel(), 0.0);
    s.slots[i].v.assign(p.params[i].tensor.numel(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam step over the trainable parameters; consumes
/// (zeroes) their gradients. A trainable parameter with no gradient means
/// the caller skipped backward: that is a contract violation, not a no-op.
inline void adam_step(model::ModelParams& p, OptimizerState& opt, double lr,
                      const TrainConfig& cfg) {
  if (opt.slots.size() != p.params.size())
    throw std::logic_error("adam_step: optimizer built for a different parameter set");
  ++opt.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(opt.t));
  for (size_t i = 0; i < p.params.size(); ++i) {
    auto& par = p.params[i];
    if (!par.trainable) continue;
    if (!par.tensor.has_grad())
      throw std::logic_error("adam_step: trainable parameter '" + par.name + "' has no gradient");
    auto& g = par.tensor.grad();
    auto& w = par.tensor.data();
    auto& m = opt.slots[i].m;
    auto& v = opt.slots[i].v;
    for (size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps_adam);
    }
    par.tensor.zero_grad();
  }
}

struct NmseReport {
  double linear = 0;
  double db = 0;
  std::vector<double> per_sample;
};

/// Forward in fixed chunks, NMSE against h_true per sample, mean in the
/// linear domain, then dB with a -300 dB floor.
inline NmseReport evaluate_nmse(model::ModelParams& p,
                                const std::vector<channel::ChannelSample>& set,
                                int chunk = 64) {
  if (set.empty()) throw std::invalid_argument("evaluate_nmse: empty set");
  NmseReport rep;
  rep.per_sample.reserve(set.size());
  for (size_t at = 0; at < set.size(); at += chunk) {
    const size_t n = std::min<size_t>(chunk, set.size() - at);
    std::vector<CVec> ls(n);
    for (size_t i = 0; i < n; ++i) ls[i] = set[at + i].h_ls;
    ag::Tensor out = model::forward_batch(p, ls);
    for (size_t i = 0; i < n; ++i)
      rep.per_sample.push_back(
          baselines::nmse(set[at + i].h_true, model::complex_from_grid(out, int(i))));
  }
  rep.linear = std::accumulate(rep.per_sample.begin(), rep.per_sample.end(), 0.0) /
               double(rep.per_sample.size());
  rep.db = rep.linear > 1e-30 ? 10.0 * std::log10(rep.linear) : -300.0;
  return rep;
}

struct EpochRow {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_nmse_db = 0;
};

struct TrainLog {
  std::vector<EpochRow> rows;
  int best_epoch = -1;
  double best_val_nmse_db = std::numeric_limits<double>::infinity();
};

inline void write_training_log(std::ostream& os, const TrainLog& log) {
  os << "epoch,lr,train_loss,val_nmse_db\n";
  char buf[160];
  for (const auto& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.train_loss,
                  r.val_nmse_db);
    os << buf;
  }
}

/// MSE training with per-epoch reshuffle (seed cfg.seed + epoch), stepped
/// learning rate, and best-validation checkpointing: on return the params
/// hold the epoch snapshot with the lowest validation NMSE.
inline TrainLog train(model::ModelParams& p, const std::vector<channel::ChannelSample>& train_set,
                      const std::vector<channel::ChannelSample>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train: empty train or validation set");

  OptimizerState opt = make_optimizer(p);
  TrainLog log;
  std::vector<std::vector<double>> best;

  std::vector<size_t> order(train_set.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle_rng(cfg.seed + uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform() * double(i))]);

    double loss_sum = 0;
    size_t seen = 0;
    for (size_t at = 0, batch_idx = 0; at < order.size(); at += cfg.batch_size, ++batch_idx) {
      const size_t n = std::min<size_t>(cfg.batch_size, order.size() - at);
      std::vector<CVec> ls(n), truth(n);
      for (size_t i = 0; i < n; ++i) {
        ls[i] = train_set[order[at + i]].h_ls;
        truth[i] = train_set[order[at + i]].h_true;
      }
      ag::Tensor target = model::grids_from_batch(truth, p.cfg);
      ag::Tensor loss = ag::mse_loss(model::forward_batch(p, ls), target);
      const double value = loss.data()[0];
      if (!std::isfinite(value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch_idx));
      ag::backward(loss);
      adam_step(p, opt, lr, cfg);
      loss_sum += value * double(n);
      seen += n;
    }

    NmseReport val = evaluate_nmse(p, val_set);
    log.rows.push_back({epoch, lr, loss_sum / double(seen), val.db});
    if (val.db < log.best_val_nmse_db) {
      log.best_val_nmse_db = val.db;
      log.best_epoch = epoch;
      best.clear();
      for (const auto& par : p.params) best.push_back(par.tensor.data());
    }
  }

  for (size_t i = 0; i < p.params.size(); ++i) p.params[i].tensor.data() = best[i];
  return log;
}

}  // namespace xce::training
