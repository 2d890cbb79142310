#pragma once

// Experiment configuration (strict YAML schema), run manifests, environment
// and model construction from config, and transition heatmaps.

#include "ctrl/driver.hpp"
#include "ctrl/mle_oracle.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ctrl {

struct EnvSection {
  std::string kind = "grid";  // grid | maze | tabular
  std::string layout;         // grid: ASCII file, empty for the canonical layout
  double slip = 0.0;
  std::optional<RewardMode> reward;  // grid default sparse; maze default from its spec
  std::string maze_spec;      // maze: spec file, empty for the built-in four rooms
  std::optional<double> noise_std;
  std::string mdp;            // tabular: MDP file
};

struct ModelSection {
  LowRankConfig net;
  /// random: fresh networks; true: exact factorization of the environment's
  /// kernel (discrete environments only); checkpoint: load `checkpoint`.
  std::string init = "random";
  std::string checkpoint;
};

struct OfflineSection {
  std::string dataset;
  OfflineConfig config;
};

struct ConsistencySection {
  TabularConditionalFamily::Kind family = TabularConditionalFamily::Kind::free_table;
  int x_cardinality = 4;
  int u_cardinality = 3;
  double partition_constant = 3.0;
  int n = 200;
  std::vector<int> K_list{4, 16, 64, 256};
  NceConfig::Objective objective = NceConfig::Objective::ranking;
  int seeds = 20;
  bool resample_table = true;
  double tv_threshold = 0.05;
  /// Binary NCE on a family whose partition function varies is expected to
  /// stay this far from the MLE.
  double witness_threshold = 0.1;
};

struct GenDatasetSection {
  std::string policy = "optimal";  // optimal | uniform | epsilon_optimal
  double epsilon = 0.1;
  int transitions = 2000;
  double gamma = 0.99;
  std::string output = "dataset.txt";  // relative paths resolve under output_dir
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  EnvSection env;
  ModelSection model;
  NceConfig nce;
  OnlineConfig driver;  // bonus and planner sections land in driver.bonus / driver.planner
  OfflineSection offline;
  ConsistencySection consistency;
  GenDatasetSection gen_dataset;
  /// Top-level sections present in the source text.
  std::set<std::string> sections;
};

/// Parses a config. Unknown keys, wrong types and out-of-range values throw
/// ConfigError with the offending key path and line. `command` selects which
/// sections are mandatory (online: driver.gamma; offline: offline.gamma and
/// offline.dataset; consistency / gen-dataset: their own section).
ExperimentConfig parse_config(const std::string& yaml_text, const std::string& command);
ExperimentConfig load_config(const std::string& path, const std::string& command);

/// Canonical YAML rendering with every default filled in. Parsing the
/// rendering reproduces the same config.
std::string render_config(const ExperimentConfig& cfg, const std::string& command);

std::uint64_t fnv1a64(const std::string& bytes);

/// Writes output_dir/manifest.yaml: a `manifest:` block (command, version,
/// config hash, seed, build info) followed by the rendered config, so the
/// manifest itself is a runnable config.
void write_manifest(const std::string& output_dir, const std::string& command,
                    const std::string& config_echo, std::uint64_t seed);

std::unique_ptr<Environment> make_environment(const EnvSection& env);
LowRankModel make_model(const ExperimentConfig& cfg, const Environment& env);

/// Runs one experiment into cfg.output_dir. Return value is the process exit
/// code for outcomes that are not errors (0, or 1 for a failed check).
int run_online(const ExperimentConfig& cfg);
int run_offline(const ExperimentConfig& cfg);
int run_consistency(const ExperimentConfig& cfg, std::string* summary = nullptr);
int run_gen_dataset(const ExperimentConfig& cfg);

// ---------------------------------------------------------------- heatmaps

struct HeatmapGrid {
  enum class Normalization { density, raw };
  int nx = 0, ny = 0;
  Vec low, high;  // 2-d bounds
  Mat values;     // nx x ny, values(ix, iy) at the cell centre
  Normalization normalization = Normalization::density;

  double cell_area() const;
  Eigen::Vector2d cell_center(int ix, int iy) const;
  /// Sum of values times cell area.
  double mass() const;
  std::pair<int, int> argmax() const;
  /// Cell containing a point (clamped to the grid).
  std::pair<int, int> cell_of(const Eigen::Vector2d& p) const;
};

std::string normalization_name(HeatmapGrid::Normalization n);
HeatmapGrid::Normalization parse_normalization(const std::string& s);

/// Evaluates a density at every cell centre. Density mode rescales so that
/// values times cell area sum to 1.
HeatmapGrid density_heatmap(const std::function<double(const Eigen::Vector2d&)>& density,
                            const Vec& low, const Vec& high, int nx, int ny,
                            HeatmapGrid::Normalization normalization);

struct HeatmapQuery {
  Vec state, action;
  int nx = 100, ny = 100;
  std::optional<std::pair<Vec, Vec>> bounds;  // default: the model's next-state box
  HeatmapGrid::Normalization normalization = HeatmapGrid::Normalization::density;
  int mc_samples = 10000;
  std::uint64_t seed = 0;
};

/// Learned conditional density of s' given (s, a) with a Monte-Carlo
/// normalizer. Discrete next-state spaces throw ConfigError.
HeatmapGrid model_heatmap(const LowRankModel& model, const HeatmapQuery& query);

/// Long-format CSV (ix,iy,x,y,value) plus `<path>.meta` with bounds and
/// normalization.
void write_heatmap(const std::string& path, const HeatmapGrid& grid,
                   const std::vector<std::pair<std::string, std::string>>& extra_meta = {});

}  // namespace ctrl
