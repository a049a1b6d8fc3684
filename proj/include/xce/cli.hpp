#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "xce/baselines.hpp"
#include "xce/channel.hpp"
#include "xce/common.hpp"
#include "xce/config.hpp"
#include "xce/dataset_io.hpp"
#include "xce/model.hpp"
#include "xce/training.hpp"

namespace xce::cli {

enum class Estimator { ls, lmmse, hyomp, llm4xce };

inline const char* estimator_name(Estimator e) {
  switch (e) {
    case Estimator::ls: return "ls";
    case Estimator::lmmse: return "lmmse";
    case Estimator::hyomp: return "hyomp";
    case Estimator::llm4xce: return "llm4xce";
  }
  return "?";
}

inline std::vector<Estimator> parse_estimators(const std::string& list) {
  std::vector<Estimator> out;
  std::stringstream ss(list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "ls")
      out.push_back(Estimator::ls);
    else if (tok == "lmmse")
      out.push_back(Estimator::lmmse);
    else if (tok == "hyomp")
      out.push_back(Estimator::hyomp);
    else if (tok == "llm4xce")
      out.push_back(Estimator::llm4xce);
    else
      throw ConfigError("unknown estimator '" + tok + "' (valid: ls, lmmse, hyomp, llm4xce)");
  }
  if (out.empty()) throw ConfigError("estimator list is empty (valid: ls, lmmse, hyomp, llm4xce)");
  return out;
}

struct EvalRow {
  std::string estimator;
  double snr_db = 0;
  int L = 0;
  int L0 = 0;
  size_t n_samples = 0;
  double nmse_linear = 0;
  double nmse_db = 0;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  return quoted + "\"";
}

inline void write_results_csv(const std::string& path, const ExperimentConfig& cfg,
                              const std::vector<EvalRow>& rows) {
  channel::detail::atomic_write(path, [&](std::ostream& os) {
    os << "# config_hash=" << config_hash(cfg) << "\n";
    os << "# config=" << config_to_json(cfg).dump() << "\n";
    os << "estimator,snr_db,L,L0,n_samples,nmse_linear,nmse_db\n";
    for (const auto& r : rows)
      os << csv_field(r.estimator) << ',' << fmt_double(r.snr_db) << ',' << r.L << ',' << r.L0
         << ',' << r.n_samples << ',' << fmt_double(r.nmse_linear) << ','
         << fmt_double(r.nmse_db) << "\n";
  });
}

inline double to_db(double linear) { return linear > 1e-30 ? 10.0 * std::log10(linear) : -300.0; }

/// Context shared by the estimator dispatch: fitted LMMSE model, HY-OMP
/// dictionaries, and (optionally) network weights.
struct EvalContext {
  const ExperimentConfig* cfg = nullptr;
  baselines::LmmseModel lmmse;
  bool lmmse_ready = false;
  baselines::HybridDicts dicts;
  bool dicts_ready = false;
  model::ModelParams* net = nullptr;
};

inline void require_weights(const EvalContext& ctx) {
  if (!ctx.net)
    throw ConfigError("estimator 'llm4xce' needs --weights pointing at an XCEW1 file");
}

inline void attach_weights(EvalContext& ctx, model::ModelParams& net,
                           const ExperimentConfig& cfg, const std::string& path) {
  if (path.empty()) return;
  net = model::load_weights(path);
  if (net.cfg.M != cfg.array.M)
    throw ConfigError("weights " + path + " have M=" + std::to_string(net.cfg.M) +
                      " but the config says M=" + std::to_string(cfg.array.M));
  ctx.net = &net;
}

/// Covariance fit on freshly drawn true channels of the given mix. The fit
/// stream is separate from every dataset split.
inline baselines::LmmseModel fit_lmmse_for(const ExperimentConfig& cfg, int l0) {
  channel::DatasetSpec spec{channel::ArrayConfig(cfg.array.M, cfg.array.lambda)};
  spec.L = cfg.dataset.L;
  spec.L0 = l0;
  spec.r_range = {cfg.dataset.r_min, cfg.dataset.r_max};
  spec.snr_range_db = {cfg.dataset.snr_min_db, cfg.dataset.snr_max_db};
  spec.n_samples =
      cfg.eval.lmmse_fit_samples > 0 ? cfg.eval.lmmse_fit_samples : cfg.dataset.n_train;
  spec.base_seed = seed_mix(cfg.dataset.seed, 5, uint64_t(l0));
  auto samples = channel::make_dataset(spec);
  std::vector<CVec> channels(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) channels[i] = std::move(samples[i].h_true);
  return baselines::fit_lmmse(channels);
}

inline double mean_nmse(Estimator est, const std::vector<channel::ChannelSample>& set,
                        EvalContext& ctx, int genie_l0) {
  std::vector<double> per(set.size());
  switch (est) {
    case Estimator::ls:
      parallel_for(set.size(), [&](size_t i) {
        per[i] = baselines::nmse(set[i].h_true, set[i].h_ls);
      });
      break;
    case Estimator::lmmse: {
      if (!ctx.lmmse_ready) {
        ctx.lmmse = fit_lmmse_for(*ctx.cfg, genie_l0);
        ctx.lmmse_ready = true;
      }
      parallel_for(set.size(), [&](size_t i) {
        per[i] = baselines::nmse(
            set[i].h_true, baselines::lmmse_estimate(ctx.lmmse, set[i].h_ls, set[i].snr_linear));
      });
      break;
    }
    case Estimator::hyomp: {
      const auto& cfg = *ctx.cfg;
      channel::ArrayConfig arr(cfg.array.M, cfg.array.lambda);
      // Grids depend only on the array and range, so the dictionaries are
      // shared across sweep points; only the genie sparsity changes.
      baselines::HyOmpConfig hc = baselines::default_hyomp_config(
          arr, genie_l0, cfg.dataset.L, {cfg.dataset.r_min, cfg.dataset.r_max});
      if (!ctx.dicts_ready) {
        ctx.dicts = baselines::build_hybrid_dictionaries(arr, hc);
        ctx.dicts_ready = true;
      }
      parallel_for(set.size(), [&](size_t i) {
        per[i] = baselines::nmse(set[i].h_true,
                                 baselines::hyomp_estimate(set[i].h_ls, ctx.dicts, hc));
      });
      break;
    }
    case Estimator::llm4xce: {
      require_weights(ctx);
      training::NmseReport rep = training::evaluate_nmse(*ctx.net, set);
      per = std::move(rep.per_sample);
      break;
    }
  }
  return std::accumulate(per.begin(), per.end(), 0.0) / double(per.size());
}

}  // namespace detail

inline std::string split_path(const std::string& prefix, Split split) {
  switch (split) {
    case Split::train: return prefix + ".train.xced";
    case Split::val: return prefix + ".val.xced";
    case Split::test: return prefix + ".test.xced";
  }
  return prefix;
}

/// gen: write the three split files under one prefix.
inline int cmd_gen(const ExperimentConfig& cfg, const std::string& out_prefix,
                   std::ostream& diag) {
  cfg.validate();
  for (Split split : {Split::train, Split::val, Split::test}) {
    channel::DatasetSpec spec = dataset_spec(cfg, split);
    auto samples = channel::make_dataset(spec);
    const std::string path = split_path(out_prefix, split);
    channel::write_dataset(path, spec, samples);
    diag << path << ": " << spec.n_samples << " samples, base_seed=" << spec.base_seed << "\n";
  }
  return 0;
}

namespace detail {

inline channel::Dataset read_split(const ExperimentConfig& cfg, const std::string& prefix,
                                   Split split) {
  channel::Dataset ds = channel::read_dataset(split_path(prefix, split));
  if (ds.spec.array.M != cfg.array.M)
    throw ConfigError("dataset " + split_path(prefix, split) + " has M=" +
                      std::to_string(ds.spec.array.M) + " but the config says M=" +
                      std::to_string(cfg.array.M));
  return ds;
}

}  // namespace detail

/// train: freeze partition, run the loop, write best weights + epoch log.
inline int cmd_train(const ExperimentConfig& cfg, const std::string& dataset_prefix,
                     const std::string& weights_out, const std::string& log_out,
                     std::ostream& diag) {
  cfg.validate();
  channel::Dataset tr = detail::read_split(cfg, dataset_prefix, Split::train);
  channel::Dataset va = detail::read_split(cfg, dataset_prefix, Split::val);

  model::ModelParams params = model::init_model(cfg.model, cfg.train.seed);
  model::ParamCount pc = model::param_count(params);
  diag << "model: " << pc.trainable << " trainable / " << pc.frozen << " frozen parameters\n";

  training::TrainLog log = training::train(params, tr.samples, va.samples, cfg.train);
  model::save_weights(params, weights_out);
  channel::detail::atomic_write(log_out, [&](std::ostream& os) {
    os << "# config_hash=" << config_hash(cfg) << "\n";
    os << "# config=" << config_to_json(cfg).dump() << "\n";
    training::write_training_log(os, log);
  });
  diag << "best epoch " << log.best_epoch << " (val NMSE " << log.best_val_nmse_db
       << " dB); wrote " << weights_out << " and " << log_out << "\n";
  return 0;
}

/// eval: one row per estimator on the stored test set.
inline int cmd_eval(const ExperimentConfig& cfg, const std::string& weights_path,
                    const std::string& dataset_prefix, const std::vector<Estimator>& estimators,
                    const std::string& out_csv, std::ostream& diag) {
  cfg.validate();
  if (estimators.empty()) throw ConfigError("estimator list is empty");
  channel::Dataset test = detail::read_split(cfg, dataset_prefix, Split::test);

  model::ModelParams net;
  detail::EvalContext ctx;
  ctx.cfg = &cfg;
  detail::attach_weights(ctx, net, cfg, weights_path);

  const bool fixed_snr = test.spec.snr_range_db.first == test.spec.snr_range_db.second;
  const double snr_col = fixed_snr ? test.spec.snr_range_db.first
                                   : std::numeric_limits<double>::quiet_NaN();
  std::vector<EvalRow> rows;
  for (Estimator est : estimators) {
    double lin = detail::mean_nmse(est, test.samples, ctx, test.spec.L0);
    rows.push_back({estimator_name(est), snr_col, test.spec.L, test.spec.L0,
                    test.samples.size(), lin, detail::to_db(lin)});
    diag << estimator_name(est) << ": " << detail::to_db(lin) << " dB\n";
  }
  detail::write_results_csv(out_csv, cfg, rows);
  return 0;
}

/// sweep-snr: same channel and unit-noise draws at every grid point, noise
/// rescaled per SNR. That isolates the SNR effect and keeps curves smooth.
inline int cmd_sweep_snr(const ExperimentConfig& cfg, const std::string& weights_path,
                         const std::vector<Estimator>& estimators, const std::string& out_csv,
                         std::ostream& diag) {
  cfg.validate();
  if (estimators.empty()) throw ConfigError("estimator list is empty");

  model::ModelParams net;
  detail::EvalContext ctx;
  ctx.cfg = &cfg;
  detail::attach_weights(ctx, net, cfg, weights_path);

  std::vector<EvalRow> rows;
  for (double snr_db : cfg.eval.snr_grid_db) {
    channel::DatasetSpec spec = dataset_spec(cfg, Split::test);
    spec.n_samples = cfg.eval.samples_per_point;
    spec.snr_range_db = {snr_db, snr_db};
    spec.base_seed = seed_mix(cfg.dataset.seed, 3);
    auto samples = channel::make_dataset(spec);
    for (Estimator est : estimators) {
      double lin = detail::mean_nmse(est, samples, ctx, cfg.dataset.L0);
      rows.push_back({estimator_name(est), snr_db, spec.L, spec.L0, samples.size(), lin,
                      detail::to_db(lin)});
    }
    diag << "snr " << snr_db << " dB done\n";
  }
  detail::write_results_csv(out_csv, cfg, rows);
  return 0;
}

/// sweep-paths: fixed SNR, fresh channels per path-mix point, genie
/// sparsity (L0, L-L0) handed to HY-OMP and a matched covariance to LMMSE.
inline int cmd_sweep_paths(const ExperimentConfig& cfg, const std::string& weights_path,
                           const std::vector<Estimator>& estimators, const std::string& out_csv,
                           std::ostream& diag) {
  cfg.validate();
  if (estimators.empty()) throw ConfigError("estimator list is empty");

  model::ModelParams net;
  detail::EvalContext ctx;
  ctx.cfg = &cfg;
  detail::attach_weights(ctx, net, cfg, weights_path);

  std::vector<EvalRow> rows;
  for (int l0 : cfg.resolved_l0_grid()) {
    channel::DatasetSpec spec = dataset_spec(cfg, Split::test);
    spec.n_samples = cfg.eval.samples_per_point;
    spec.L0 = l0;
    spec.snr_range_db = {cfg.eval.snr_db, cfg.eval.snr_db};
    spec.base_seed = seed_mix(cfg.dataset.seed, 4, uint64_t(l0));
    auto samples = channel::make_dataset(spec);
    ctx.lmmse_ready = false;  // covariance is mix-dependent, refit per point
    for (Estimator est : estimators) {
      double lin = detail::mean_nmse(est, samples, ctx, l0);
      rows.push_back({estimator_name(est), cfg.eval.snr_db, spec.L, l0, samples.size(), lin,
                      detail::to_db(lin)});
    }
    diag << "L0 " << l0 << " done\n";
  }
  detail::write_results_csv(out_csv, cfg, rows);
  return 0;
}

}  // namespace xce::cli
