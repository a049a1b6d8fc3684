#include <algorithm>
#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "xce/cli.hpp"

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "xce: hybrid-field XL-MIMO channel estimation experiments.\n"
      "Workers are capped by the XCE_THREADS environment variable."};
  app.require_subcommand(1);

  std::string config_path, out_path, weights_path, dataset_path;
  std::string estimators = "ls,lmmse,hyomp,llm4xce";
  uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen", "write <out>.{train,val,test}.xced dataset splits");
  auto* train = app.add_subcommand("train", "train the network, write weights + epoch log");
  auto* eval = app.add_subcommand("eval", "evaluate estimators on a stored test split");
  auto* sweep_snr = app.add_subcommand("sweep-snr", "NMSE vs SNR on fixed channels");
  auto* sweep_paths = app.add_subcommand("sweep-paths", "NMSE vs far-path count at fixed SNR");

  std::vector<CLI::Option*> seed_opts;
  for (CLI::App* sub : {gen, train, eval, sweep_snr, sweep_paths}) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    seed_opts.push_back(
        sub->add_option("--seed", seed, "override dataset.seed and train.seed"));
  }
  gen->add_option("--out", out_path, "output dataset path prefix")->required();
  train->add_option("--dataset", dataset_path, "dataset path prefix from gen")->required();
  train->add_option("--weights", weights_path, "output XCEW1 weights path")->required();
  train->add_option("--out", out_path, "output training-log CSV path")->required();
  eval->add_option("--dataset", dataset_path, "dataset path prefix from gen")->required();
  eval->add_option("--weights", weights_path, "XCEW1 weights (needed for llm4xce)");
  eval->add_option("--estimators", estimators, "comma list: ls,lmmse,hyomp,llm4xce");
  eval->add_option("--out", out_path, "output results CSV path")->required();
  for (CLI::App* sub : {sweep_snr, sweep_paths}) {
    sub->add_option("--weights", weights_path, "XCEW1 weights (needed for llm4xce)");
    sub->add_option("--estimators", estimators, "comma list: ls,lmmse,hyomp,llm4xce");
    sub->add_option("--out", out_path, "output results CSV path")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error[usage]: " << one_line(e.what()) << "\n";
    return e.get_exit_code();
  }

  try {
    xce::cli::ExperimentConfig cfg = xce::cli::read_config_file(config_path);
    bool seed_given = false;
    for (CLI::Option* o : seed_opts) seed_given |= o->count() > 0;
    if (seed_given) {
      cfg.dataset.seed = seed;
      cfg.train.seed = seed;
    }
    if (gen->parsed()) return xce::cli::cmd_gen(cfg, out_path, std::cout);
    if (train->parsed())
      return xce::cli::cmd_train(cfg, dataset_path, weights_path, out_path, std::cout);
    auto list = xce::cli::parse_estimators(estimators);
    if (eval->parsed())
      return xce::cli::cmd_eval(cfg, weights_path, dataset_path, list, out_path, std::cout);
    if (sweep_snr->parsed())
      return xce::cli::cmd_sweep_snr(cfg, weights_path, list, out_path, std::cout);
    return xce::cli::cmd_sweep_paths(cfg, weights_path, list, out_path, std::cout);
  } catch (const xce::ConfigError& e) {
    std::cerr << "error[config]: " << one_line(e.what()) << "\n";
  } catch (const xce::FormatError& e) {
    std::cerr << "error[format]: " << one_line(e.what()) << "\n";
  } catch (const xce::SingularMatrixError& e) {
    std::cerr << "error[numeric]: " << one_line(e.what()) << "\n";
  } catch (const xce::ShapeError& e) {
    std::cerr << "error[shape]: " << one_line(e.what()) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error[runtime]: " << one_line(e.what()) << "\n";
  }
  return 1;
}
