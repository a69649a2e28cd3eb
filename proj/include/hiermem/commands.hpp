#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "hiermem/runconfig.hpp"

namespace hiermem {

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitDiverged = 3 };

struct DomainData {
  Dataset train;
  Dataset test;
};

/// Synthetic domains from `cfg.data`, or `<data.root>/train` and `<data.root>/test`.
DomainData load_domains(const RunConfig& cfg);

/// Run directory layout:
///   config.txt          resolved config
///   train.log           one line per episode, columns in its header
///   model.manifest/.bin final (or last good) parameters
///   model.memory.*      memory banks
///   ckpt_<episode>.*    periodic checkpoints when run.checkpoint_every > 0
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream* progress = nullptr);

/// Loads `<stem>` and `<stem>.memory`, evaluates on the test domain and writes
/// `metrics.txt` and `prototypes.txt` under `out`. Shape mismatches between
/// the checkpoint and the config throw ShapeError.
EvalResult run_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint_stem,
                    const std::filesystem::path& out);

void write_metrics(const std::filesystem::path& path, const EvalResult& r, const RunConfig& cfg);
void write_prototypes(const std::filesystem::path& path, const std::vector<PrototypeExport>& exports);

struct AblationCell {
  std::uint64_t seed = 0;
  double shift = 0.0;
  Objective objective = Objective::kProto;
  EvalResult result;
};

/// Trains every objective once per seed (the training domain does not depend
/// on the shift) and evaluates it at every shift. Each cell replays as
/// `train` + `eval` with train.seed = data.seed = eval.seed = seed and
/// data.shift = shift. Writes `ablate.txt` and per-cell run directories.
std::vector<AblationCell> run_ablate(const RunConfig& cfg, const std::filesystem::path& dir,
                                     std::ostream* progress = nullptr);

/// Config of one ablation cell.
RunConfig cell_config(const RunConfig& cfg, std::uint64_t seed, Objective o, double shift);

/// Runs the release gradient-check suite, printing one line per case.
bool run_gradcheck(std::ostream& out);

}  // namespace hiermem
