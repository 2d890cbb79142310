#pragma once

// Desk-scale environments: the four-room gridworld, the continuous point maze
// with Gaussian transitions, and synthetic discrete conditionals p(x|u).

#include "ctrl/mdp.hpp"

#include <array>
#include <string>
#include <vector>

namespace ctrl {

enum class RewardMode { dense, sparse };

RewardMode parse_reward_mode(const std::string& s);

/// Grid cell as (row, col); row 0 is the top line of the ASCII layout.
struct Cell {
  int row = 0;
  int col = 0;
  bool operator==(const Cell&) const = default;
};

/// Tabular four-room maze. States index the open cells in row-major order.
/// Actions: 0 up, 1 down, 2 left, 3 right.
class FourRoomGrid : public Environment {
 public:
  static constexpr int kNumActions = 4;

  /// Parses `#` wall, `.` open, `S` start, `G` goal.
  static FourRoomGrid from_ascii(const std::string& layout, double slip_prob = 0.0,
                                 RewardMode mode = RewardMode::sparse);
  static FourRoomGrid load(const std::string& path, double slip_prob = 0.0,
                           RewardMode mode = RewardMode::sparse);
  /// The canonical 11x11 layout (start bottom-right, goal top-left).
  static FourRoomGrid canonical(double slip_prob = 0.0, RewardMode mode = RewardMode::sparse);
  static const char* canonical_layout();

  const Space& state_space() const override { return states_; }
  const Space& action_space() const override { return actions_; }
  Vec reset(Rng& rng) const override;
  StepResult step(const Vec& state, const Vec& action, Rng& rng) const override;

  /// Index-level step used by the tabular drivers.
  struct GridStep {
    int next = 0;
    double reward = 0.0;
    bool terminal = false;
  };
  GridStep step_index(int state, int action, Rng& rng) const;

  int num_states() const { return static_cast<int>(cells_.size()); }
  int width() const { return width_; }
  int height() const { return height_; }
  Cell cell(int state) const { return cells_.at(static_cast<size_t>(state)); }
  int state_of(Cell c) const;  // -1 for walls / outside
  bool is_wall(Cell c) const;
  int start_state() const { return start_; }
  int goal_state() const { return goal_; }
  double slip_prob() const { return slip_; }
  RewardMode reward_mode() const { return mode_; }
  /// Deterministic successor of `state` under the intended move.
  int move(int state, int action) const;
  double reward_for(int next_state) const;

  /// Analytic transition kernel of the slip model; goal is terminal.
  TabularMdp to_tabular() const;

 private:
  FourRoomGrid() = default;
  int width_ = 0, height_ = 0;
  std::vector<std::vector<bool>> walls_;
  std::vector<Cell> cells_;
  std::vector<int> index_;  // row * width + col -> state or -1
  std::vector<int> goal_distance_;
  int start_ = 0, goal_ = 0;
  double slip_ = 0.0;
  RewardMode mode_ = RewardMode::sparse;
  Space states_ = Space::discrete(1), actions_ = Space::discrete(kNumActions);
};

/// Axis-aligned wall segment from a to b (a.x == b.x or a.y == b.y).
struct WallSegment {
  Eigen::Vector2d a, b;
};

struct ContinuousMazeSpec {
  Eigen::Vector2d low{0.0, 0.0};
  Eigen::Vector2d high{1.0, 1.0};
  std::vector<WallSegment> walls;
  double dt = 0.1;
  double noise_std = 0.05;
  Eigen::Vector2d start{0.85, 0.15};
  Eigen::Vector2d goal{0.15, 0.85};
  double goal_radius = 0.08;
  RewardMode reward_mode = RewardMode::sparse;

  /// Four rooms in the unit square with doorways in each dividing wall.
  static ContinuousMazeSpec four_rooms();
};

/// Point maze with s' = s + a*dt + noise_std*z. Actions are velocities in
/// [-1,1]^2; planners see the 9-point grid {-1,0,1}^2.
class ContinuousMaze : public Environment {
 public:
  explicit ContinuousMaze(ContinuousMazeSpec spec);

  const Space& state_space() const override { return states_; }
  const Space& action_space() const override { return actions_; }
  Vec reset(Rng& rng) const override;
  StepResult step(const Vec& state, const Vec& action, Rng& rng) const override;
  std::vector<Vec> action_set() const override;

  const ContinuousMazeSpec& spec() const { return spec_; }

  /// Moves from `from` toward `to`, stopping just before the first wall hit.
  Eigen::Vector2d project_through_walls(const Eigen::Vector2d& from,
                                        const Eigen::Vector2d& to) const;
  /// True when the straight segment from -> to touches no wall.
  bool segment_clear(const Eigen::Vector2d& from, const Eigen::Vector2d& to) const;
  /// Unconstrained Gaussian transition density N(s'; s + a dt, noise^2 I).
  double true_conditional_density(const Vec& s, const Vec& a, const Vec& s_next) const;
  double log_true_conditional_density(const Vec& s, const Vec& a, const Vec& s_next) const;
  double reward_at(const Eigen::Vector2d& p) const;
  bool in_goal(const Eigen::Vector2d& p) const;

 private:
  ContinuousMazeSpec spec_;
  Space states_, actions_;
};

ContinuousMazeSpec load_maze_spec(const std::string& path);
ContinuousMazeSpec parse_maze_spec(const std::string& yaml_text);

enum class ConditionalFamilyKind { free_table, constant_partition, tied_base_measure };

/// Synthetic conditional p(x|u): true_table has one row per u.
struct SyntheticConditional {
  int x_cardinality = 1;
  int u_cardinality = 1;
  Mat true_table;  // u x x, rows sum to 1
  ConditionalFamilyKind family = ConditionalFamilyKind::free_table;

  void validate() const;
};

struct ConditionalSample {
  int x = 0;
  int u = 0;
};

std::vector<ConditionalSample> sample_synthetic(const SyntheticConditional& env, int n,
                                                const Vec& u_distribution, Rng& rng);

/// Random 4x3-style conditional with Dirichlet(1) rows.
SyntheticConditional random_synthetic(int x_cardinality, int u_cardinality, Rng& rng);

}  // namespace ctrl
