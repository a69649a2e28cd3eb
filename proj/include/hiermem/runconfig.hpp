#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hiermem/episodes.hpp"
#include "hiermem/model.hpp"
#include "hiermem/objective.hpp"

namespace hiermem {

/// Everything a command needs. Keys are `section.field`:
///   train.*     TrainConfig (objective, lr, episodes, ...)
///   backbone.*  BackboneConfig (lists are comma separated)
///   model.*     infer_hidden, hyper_hidden, init_raw_var
///   data.*      SyntheticDomainConfig, plus data.root for a PGM folder dataset
///   eval.*      tasks, way, shot, queries, seed, threads
///   ablate.*    shifts, objectives, seeds
///   run.*       checkpoint_every
/// backbone.height and backbone.width follow data.image_size unless set.
/// The defaults differ from the library structs: 16 px phase-locked textures
/// at half amplitude with noise 0.5, and a {4, 8, 8} backbone with 16-wide
/// embeddings, which keeps a five-objective, three-seed ablation in minutes.
struct RunConfig {
  RunConfig();

  TrainConfig train;
  ModelConfig model;
  SyntheticDomainConfig data;
  std::string data_root;  ///< non-empty: meta-train on <root>/train, test on <root>/test
  EvalConfig eval;
  std::vector<double> shifts = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<Objective> objectives = {Objective::kProto, Objective::kVp, Objective::kVsm, Objective::kHvp,
                                       Objective::kHvm};
  std::vector<std::uint64_t> seeds = {1};
  std::size_t checkpoint_every = 0;  ///< 0 writes only the final checkpoint

  bool height_set = false, width_set = false;

  /// Throws ConfigError naming the key; unknown keys are rejected.
  void set(const std::string& key, const std::string& value);
  /// Fills derived fields and validates every section.
  void resolve();
  /// Every key with its value, in a fixed order; parsing them back yields the same config.
  std::vector<std::pair<std::string, std::string>> entries() const;
};

/// Parses `key = value` lines ('#' comments) on top of the defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Applies `key=value` overrides, then resolves.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);
void write_run_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace hiermem
