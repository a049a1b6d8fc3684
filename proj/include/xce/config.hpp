#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xce/channel.hpp"
#include "xce/common.hpp"
#include "xce/model.hpp"
#include "xce/training.hpp"

namespace xce::cli {

/// One document drives every command. Unknown keys are rejected rather than
/// ignored so a typo cannot silently fall back to a default; missing keys
/// take documented defaults; the fully resolved form (config_to_json) is
/// echoed into every output file.
struct ExperimentConfig {
  struct ArraySection {
    int M = 256;
    double lambda = 0.01;
  } array;

  struct DatasetSection {
    int L = 6;
    int L0 = 1;
    double r_min = 10.0;
    double r_max = 80.0;
    double snr_min_db = -5.0;
    double snr_max_db = 20.0;
    size_t n_train = 45000;
    size_t n_val = 5000;
    size_t n_test = 2000;
    uint64_t seed = 1;
  } dataset;

  model::ModelConfig model;  // model.M mirrors array.M after resolution

  training::TrainConfig train;

  struct EvalSection {
    std::vector<double> snr_grid_db{-5, 0, 5, 10, 15, 20};
    double snr_db = 15.0;
    std::vector<int> l0_grid;  // empty: 0..L
    size_t samples_per_point = 1000;
    size_t lmmse_fit_samples = 0;  // 0: use dataset.n_train
  } eval;

  std::vector<int> resolved_l0_grid() const {
    if (!eval.l0_grid.empty()) return eval.l0_grid;
    std::vector<int> g;
    for (int l0 = 0; l0 <= dataset.L; ++l0) g.push_back(l0);
    return g;
  }

  void validate() const {
    channel::ArrayConfig arr(array.M, array.lambda);  // checks M/lambda
    channel::DatasetSpec probe{arr};
    probe.L = dataset.L;
    probe.L0 = dataset.L0;
    probe.r_range = {dataset.r_min, dataset.r_max};
    probe.snr_range_db = {dataset.snr_min_db, dataset.snr_max_db};
    probe.n_samples = 1;
    probe.validate();
    if (dataset.n_train == 0 || dataset.n_val == 0 || dataset.n_test == 0)
      throw ConfigError("config: dataset sizes must all be >= 1");
    model.validate();
    if (model.M != array.M)
      throw ConfigError("config: model.M (" + std::to_string(model.M) +
                        ") out of sync with array.M (" + std::to_string(array.M) + ")");
    train.validate();
    if (eval.snr_grid_db.empty()) throw ConfigError("config: eval.snr_grid_db must be non-empty");
    if (eval.samples_per_point == 0)
      throw ConfigError("config: eval.samples_per_point must be >= 1");
    for (int l0 : resolved_l0_grid())
      if (l0 < 0 || l0 > dataset.L)
        throw ConfigError("config: eval.l0_grid entry " + std::to_string(l0) +
                          " outside [0, L=" + std::to_string(dataset.L) + "]");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("config: section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok |= key == a;
    if (!ok) {
      std::string names;
      for (const char* a : allowed) names += std::string(names.empty() ? "" : ", ") + a;
      throw ConfigError("config: unknown key '" + key + "' in section '" + section +
                        "' (allowed: " + names + ")");
    }
  }
}

template <typename T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["array"] = {{"M", c.array.M}, {"lambda", c.array.lambda}};
  j["dataset"] = {{"L", c.dataset.L},
                  {"L0", c.dataset.L0},
                  {"r_min", c.dataset.r_min},
                  {"r_max", c.dataset.r_max},
                  {"snr_min_db", c.dataset.snr_min_db},
                  {"snr_max_db", c.dataset.snr_max_db},
                  {"n_train", c.dataset.n_train},
                  {"n_val", c.dataset.n_val},
                  {"n_test", c.dataset.n_test},
                  {"seed", c.dataset.seed}};
  j["model"] = {{"F", c.model.F},
                {"I", c.model.I},
                {"d", c.model.d},
                {"n_layers", c.model.n_layers},
                {"n_tuned", c.model.n_tuned},
                {"ffn_mult", c.model.ffn_mult},
                {"causal", c.model.causal},
                {"backbone_heads", c.model.backbone_heads},
                {"d_s", c.model.d_s}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"lr0", c.train.lr0},
                {"decay_factor", c.train.decay_factor},
                {"decay_every", c.train.decay_every},
                {"betas", {c.train.beta1, c.train.beta2}},
                {"eps_adam", c.train.eps_adam},
                {"seed", c.train.seed}};
  j["eval"] = {{"snr_grid_db", c.eval.snr_grid_db},
               {"snr_db", c.eval.snr_db},
               {"l0_grid", c.resolved_l0_grid()},
               {"samples_per_point", c.eval.samples_per_point},
               {"lmmse_fit_samples", c.eval.lmmse_fit_samples}};
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "(top level)", {"array", "dataset", "model", "train", "eval"});
  ExperimentConfig c;
  try {
    if (j.contains("array")) {
      const auto& a = j.at("array");
      detail::check_keys(a, "array", {"M", "lambda"});
      detail::get_to(a, "M", c.array.M);
      detail::get_to(a, "lambda", c.array.lambda);
    }
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::check_keys(d, "dataset",
                         {"L", "L0", "r_min", "r_max", "snr_min_db", "snr_max_db", "n_train",
                          "n_val", "n_test", "seed"});
      detail::get_to(d, "L", c.dataset.L);
      detail::get_to(d, "L0", c.dataset.L0);
      detail::get_to(d, "r_min", c.dataset.r_min);
      detail::get_to(d, "r_max", c.dataset.r_max);
      detail::get_to(d, "snr_min_db", c.dataset.snr_min_db);
      detail::get_to(d, "snr_max_db", c.dataset.snr_max_db);
      detail::get_to(d, "n_train", c.dataset.n_train);
      detail::get_to(d, "n_val", c.dataset.n_val);
      detail::get_to(d, "n_test", c.dataset.n_test);
      detail::get_to(d, "seed", c.dataset.seed);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::check_keys(m, "model",
                         {"F", "I", "d", "n_layers", "n_tuned", "ffn_mult", "causal",
                          "backbone_heads", "d_s"});
      detail::get_to(m, "F", c.model.F);
      detail::get_to(m, "I", c.model.I);
      detail::get_to(m, "d", c.model.d);
      detail::get_to(m, "n_layers", c.model.n_layers);
      detail::get_to(m, "n_tuned", c.model.n_tuned);
      detail::get_to(m, "ffn_mult", c.model.ffn_mult);
      detail::get_to(m, "causal", c.model.causal);
      detail::get_to(m, "backbone_heads", c.model.backbone_heads);
      detail::get_to(m, "d_s", c.model.d_s);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::check_keys(t, "train",
                         {"batch_size", "epochs", "lr0", "decay_factor", "decay_every", "betas",
                          "eps_adam", "seed"});
      detail::get_to(t, "batch_size", c.train.batch_size);
      detail::get_to(t, "epochs", c.train.epochs);
      detail::get_to(t, "lr0", c.train.lr0);
      detail::get_to(t, "decay_factor", c.train.decay_factor);
      detail::get_to(t, "decay_every", c.train.decay_every);
      if (t.contains("betas")) {
        const auto& b = t.at("betas");
        if (!b.is_array() || b.size() != 2)
          throw ConfigError("config: train.betas must be a two-element array");
        c.train.beta1 = b.at(0).get<double>();
        c.train.beta2 = b.at(1).get<double>();
      }
      detail::get_to(t, "eps_adam", c.train.eps_adam);
      detail::get_to(t, "seed", c.train.seed);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::check_keys(
          e, "eval", {"snr_grid_db", "snr_db", "l0_grid", "samples_per_point", "lmmse_fit_samples"});
      detail::get_to(e, "snr_grid_db", c.eval.snr_grid_db);
      detail::get_to(e, "snr_db", c.eval.snr_db);
      detail::get_to(e, "l0_grid", c.eval.l0_grid);
      detail::get_to(e, "samples_per_point", c.eval.samples_per_point);
      detail::get_to(e, "lmmse_fit_samples", c.eval.lmmse_fit_samples);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: malformed value: " + std::string(e.what()));
  }
  c.model.M = c.array.M;
  c.validate();
  return c;
}

inline ExperimentConfig read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);  // keeps line/column info in the message
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(c).dump())));
  return buf;
}

enum class Split { train = 0, val = 1, test = 2 };

/// Split-disjoint sample streams derived from one dataset seed.
inline channel::DatasetSpec dataset_spec(const ExperimentConfig& c, Split split) {
  channel::DatasetSpec spec{channel::ArrayConfig(c.array.M, c.array.lambda)};
  spec.L = c.dataset.L;
  spec.L0 = c.dataset.L0;
  spec.r_range = {c.dataset.r_min, c.dataset.r_max};
  spec.snr_range_db = {c.dataset.snr_min_db, c.dataset.snr_max_db};
  switch (split) {
    case Split::train: spec.n_samples = c.dataset.n_train; break;
    case Split::val: spec.n_samples = c.dataset.n_val; break;
    case Split::test: spec.n_samples = c.dataset.n_test; break;
  }
  spec.base_seed = seed_mix(c.dataset.seed, static_cast<uint64_t>(split));
  spec.validate();
  return spec;
}

}  // namespace xce::cli
