// hiermem: train, eval, ablate and gradcheck from the command line.
#include <CLI11.hpp>

#include <iostream>

#include "hiermem/commands.hpp"
#include "hiermem/error.hpp"

using namespace hiermem;
namespace fs = std::filesystem;

namespace {

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  apply_overrides(cfg, overrides);
  return cfg;
}

void summary(const EvalResult& r) {
  std::printf("weighted %.4f +- %.4f\nbagging  %.4f +- %.4f\n", r.weighted.mean, r.weighted.ci95, r.bagging.mean,
              r.bagging.ci95);
  for (std::size_t l = 0; l < r.mean_alpha.size(); ++l) std::printf("alpha[%zu] %.4f\n", l, r.mean_alpha[l]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical variational memory for few-shot learning"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir, checkpoint;
  std::vector<std::string> overrides;
  std::size_t tasks = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "key = value config file (defaults when omitted)");
    sub->add_option("-s,--set", overrides, "key=value override, repeatable")->take_all();
  };

  CLI::App* train = app.add_subcommand("train", "meta-train one objective into a run directory");
  add_common(train);
  train->add_option("-o,--out", out_dir, "run directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test domain");
  add_common(eval);
  eval->add_option("-r,--run", run_dir, "run directory written by train (config.txt, model.*)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem, e.g. runs/a/model");
  eval->add_option("-o,--out", out_dir, "output directory (defaults to the run directory)");
  eval->add_option("-n,--tasks", tasks, "number of test tasks (default 600)");

  CLI::App* ablate = app.add_subcommand("ablate", "objectives x combiners x shifts table");
  add_common(ablate);
  ablate->add_option("-o,--out", out_dir, "output directory")->required();

  app.add_subcommand("gradcheck", "finite-difference check of every op and loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) {
      const RunConfig cfg = resolve_config(config_path, overrides);
      const TrainResult r = run_train(cfg, out_dir, &std::cout);
      if (r.diverged) {
        std::cerr << "diverged at episode " << r.diverged_at << ": " << r.divergence
                  << "; last good state saved in " << out_dir << '\n';
        return kExitDiverged;
      }
      return kExitOk;
    }
    if (*eval) {
      if (run_dir.empty() == checkpoint.empty()) throw ConfigError("--run", "give exactly one of --run or --checkpoint");
      if (!run_dir.empty()) {
        if (config_path.empty()) config_path = (fs::path(run_dir) / "config.txt").string();
        checkpoint = (fs::path(run_dir) / "model").string();
        if (out_dir.empty()) out_dir = run_dir;
      }
      if (out_dir.empty()) throw ConfigError("--out", "needed with --checkpoint");
      if (tasks > 0 || eval->count("--tasks")) overrides.push_back("eval.tasks=" + std::to_string(tasks));
      const RunConfig cfg = resolve_config(config_path, overrides);
      summary(run_eval(cfg, checkpoint, out_dir));
      return kExitOk;
    }
    if (*ablate) {
      const RunConfig cfg = resolve_config(config_path, overrides);
      run_ablate(cfg, out_dir, &std::cout);
      std::cout << "table written to " << (fs::path(out_dir) / "ablate.txt").string() << '\n';
      return kExitOk;
    }
    return run_gradcheck(std::cout) ? kExitOk : kExitFailure;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
