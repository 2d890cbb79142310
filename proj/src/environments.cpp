#include "ctrl/environments.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace ctrl {

RewardMode parse_reward_mode(const std::string& s) {
  if (s == "dense") return RewardMode::dense;
  if (s == "sparse") return RewardMode::sparse;
  throw ConfigError("unknown reward mode '" + s + "' (expected dense|sparse)");
}

// ---------------------------------------------------------------- FourRoomGrid

const char* FourRoomGrid::canonical_layout() {
  return "###########\n"
         "#G...#....#\n"
         "#....#....#\n"
         "#.........#\n"
         "#....#....#\n"
         "##.####.###\n"
         "#....#....#\n"
         "#.........#\n"
         "#....#....#\n"
         "#....#...S#\n"
         "###########\n";
}

FourRoomGrid FourRoomGrid::canonical(double slip_prob, RewardMode mode) {
  return from_ascii(canonical_layout(), slip_prob, mode);
}

FourRoomGrid FourRoomGrid::load(const std::string& path, double slip_prob, RewardMode mode) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open grid layout: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_ascii(ss.str(), slip_prob, mode);
}

FourRoomGrid FourRoomGrid::from_ascii(const std::string& layout, double slip_prob,
                                      RewardMode mode) {
  if (!(slip_prob >= 0.0 && slip_prob < 1.0)) throw ConfigError("slip_prob must lie in [0,1)");
  std::vector<std::string> lines;
  {
    std::istringstream is(layout);
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
  }
  if (lines.empty()) throw ConfigError("empty grid layout");
  FourRoomGrid g;
  g.height_ = static_cast<int>(lines.size());
  g.width_ = static_cast<int>(lines.front().size());
  g.walls_.assign(static_cast<size_t>(g.height_), std::vector<bool>(static_cast<size_t>(g.width_), true));
  g.index_.assign(static_cast<size_t>(g.height_ * g.width_), -1);
  g.slip_ = slip_prob;
  g.mode_ = mode;
  int starts = 0, goals = 0;
  Cell start{}, goal{};
  for (int r = 0; r < g.height_; ++r) {
    if (static_cast<int>(lines[static_cast<size_t>(r)].size()) != g.width_) {
      throw ConfigError("grid line " + std::to_string(r + 1) + " has inconsistent width");
    }
    for (int c = 0; c < g.width_; ++c) {
      const char ch = lines[static_cast<size_t>(r)][static_cast<size_t>(c)];
      switch (ch) {
        case '#':
          break;
        case 'S':
          start = {r, c};
          ++starts;
          [[fallthrough]];
        case 'G':
          if (ch == 'G') {
            goal = {r, c};
            ++goals;
          }
          [[fallthrough]];
        case '.':
          g.walls_[static_cast<size_t>(r)][static_cast<size_t>(c)] = false;
          g.index_[static_cast<size_t>(r * g.width_ + c)] = static_cast<int>(g.cells_.size());
          g.cells_.push_back({r, c});
          break;
        default:
          throw ConfigError(std::string("unexpected grid character '") + ch + "' on line " +
                            std::to_string(r + 1));
      }
    }
  }
  if (starts != 1 || goals != 1) throw ConfigError("grid needs exactly one S and one G");
  g.start_ = g.state_of(start);
  g.goal_ = g.state_of(goal);
  g.states_ = Space::discrete(g.num_states());

  // Reachability from start, and BFS distances to the goal for dense shaping.
  auto bfs = [&](int from) {
    std::vector<int> dist(g.cells_.size(), -1);
    std::deque<int> q{from};
    dist[static_cast<size_t>(from)] = 0;
    while (!q.empty()) {
      const int s = q.front();
      q.pop_front();
      for (int a = 0; a < kNumActions; ++a) {
        const int n = g.move(s, a);
        if (dist[static_cast<size_t>(n)] < 0) {
          dist[static_cast<size_t>(n)] = dist[static_cast<size_t>(s)] + 1;
          q.push_back(n);
        }
      }
    }
    return dist;
  };
  const auto from_start = bfs(g.start_);
  for (size_t s = 0; s < from_start.size(); ++s) {
    if (from_start[s] < 0) throw ConfigError("grid has open cells unreachable from start");
  }
  g.goal_distance_ = bfs(g.goal_);
  return g;
}

bool FourRoomGrid::is_wall(Cell c) const {
  if (c.row < 0 || c.col < 0 || c.row >= height_ || c.col >= width_) return true;
  return walls_[static_cast<size_t>(c.row)][static_cast<size_t>(c.col)];
}

int FourRoomGrid::state_of(Cell c) const {
  if (is_wall(c)) return -1;
  return index_[static_cast<size_t>(c.row * width_ + c.col)];
}

int FourRoomGrid::move(int state, int action) const {
  static constexpr std::array<int, 4> dr{-1, 1, 0, 0};
  static constexpr std::array<int, 4> dc{0, 0, -1, 1};
  const Cell c = cell(state);
  const Cell n{c.row + dr[static_cast<size_t>(action)], c.col + dc[static_cast<size_t>(action)]};
  return is_wall(n) ? state : state_of(n);
}

double FourRoomGrid::reward_for(int next_state) const {
  if (mode_ == RewardMode::sparse) return next_state == goal_ ? 1.0 : 0.0;
  int max_d = 1;
  for (int d : goal_distance_) max_d = std::max(max_d, d);
  return 1.0 - static_cast<double>(goal_distance_[static_cast<size_t>(next_state)]) / max_d;
}

Vec FourRoomGrid::reset(Rng&) const { return Vec::Constant(1, start_); }

FourRoomGrid::GridStep FourRoomGrid::step_index(int state, int action, Rng& rng) const {
  if (action < 0 || action >= kNumActions) throw std::invalid_argument("grid action must be 0..3");
  if (state < 0 || state >= num_states()) throw std::invalid_argument("grid state out of range");
  int taken = action;
  if (slip_ > 0.0 && uniform01(rng) < slip_) {
    const int k = static_cast<int>(uniform01(rng) * 3.0);
    const int other = std::min(k, 2);
    taken = other >= action ? other + 1 : other;
  }
  const int next = move(state, taken);
  return {next, reward_for(next), next == goal_};
}

StepResult FourRoomGrid::step(const Vec& state, const Vec& action, Rng& rng) const {
  if (action.size() != 1 || action[0] != std::floor(action[0]) || action[0] < 0 ||
      action[0] >= kNumActions) {
    throw std::invalid_argument("grid action must be one of {up, down, left, right}");
  }
  const auto r = step_index(states_.index(state), static_cast<int>(action[0]), rng);
  return {Vec::Constant(1, r.next), r.reward, r.terminal};
}

TabularMdp FourRoomGrid::to_tabular() const {
  TabularMdp mdp;
  mdp.num_states = num_states();
  mdp.num_actions = kNumActions;
  mdp.transition = Mat::Zero(mdp.num_states * kNumActions, mdp.num_states);
  mdp.reward = Mat::Zero(mdp.num_states, kNumActions);
  mdp.rho = Vec::Zero(mdp.num_states);
  mdp.rho[start_] = 1.0;
  mdp.terminal.assign(static_cast<size_t>(mdp.num_states), false);
  mdp.terminal[static_cast<size_t>(goal_)] = true;
  const double other = slip_ / 3.0;
  for (int s = 0; s < mdp.num_states; ++s) {
    for (int a = 0; a < kNumActions; ++a) {
      for (int b = 0; b < kNumActions; ++b) {
        const double p = (a == b) ? 1.0 - slip_ : other;
        if (p == 0.0) continue;
        const int n = move(s, b);
        mdp.transition(mdp.row(s, a), n) += p;
        mdp.reward(s, a) += p * reward_for(n);
      }
      // Fold rounding residue into the largest entry so rows sum to exactly 1.
      auto row = mdp.transition.row(mdp.row(s, a));
      Eigen::Index big = 0;
      row.maxCoeff(&big);
      for (int it = 0; it < 8 && row.sum() != 1.0; ++it) row[big] += 1.0 - row.sum();
    }
  }
  return mdp;
}

// ---------------------------------------------------------------- ContinuousMaze

ContinuousMazeSpec ContinuousMazeSpec::four_rooms() {
  ContinuousMazeSpec s;
  using V = Eigen::Vector2d;
  // Vertical divider x = 0.5 with doorways y in (0.2,0.3) and (0.7,0.8).
  s.walls.push_back({V(0.5, 0.0), V(0.5, 0.2)});
  s.walls.push_back({V(0.5, 0.3), V(0.5, 0.7)});
  s.walls.push_back({V(0.5, 0.8), V(0.5, 1.0)});
  // Horizontal divider y = 0.5 with doorways x in (0.2,0.3) and (0.7,0.8).
  s.walls.push_back({V(0.0, 0.5), V(0.2, 0.5)});
  s.walls.push_back({V(0.3, 0.5), V(0.7, 0.5)});
  s.walls.push_back({V(0.8, 0.5), V(1.0, 0.5)});
  return s;
}

ContinuousMaze::ContinuousMaze(ContinuousMazeSpec spec)
    : spec_(std::move(spec)),
      states_(Space::box(spec_.low, spec_.high)),
      actions_(Space::box(Vec::Constant(2, -1.0), Vec::Constant(2, 1.0))) {
  if (!(spec_.dt > 0)) throw ConfigError("maze dt must be > 0");
  if (!(spec_.noise_std >= 0)) throw ConfigError("maze noise_std must be >= 0");
  if (!states_.contains(spec_.start)) throw ConfigError("maze start must lie inside bounds");
  for (const auto& w : spec_.walls) {
    if (w.a.x() != w.b.x() && w.a.y() != w.b.y()) throw ConfigError("maze walls must be axis-aligned");
  }
}

Vec ContinuousMaze::reset(Rng&) const { return spec_.start; }

std::vector<Vec> ContinuousMaze::action_set() const {
  std::vector<Vec> out;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) out.push_back(Eigen::Vector2d(i, j));
  return out;
}

namespace {

// Parameter t in [0,1] where from + t (to - from) first meets the wall, or +inf.
double wall_hit(const Eigen::Vector2d& from, const Eigen::Vector2d& to, const WallSegment& w) {
  const bool vertical = w.a.x() == w.b.x();
  const int axis = vertical ? 0 : 1;
  const int other = 1 - axis;
  const double line = w.a[axis];
  const double d = to[axis] - from[axis];
  if (d == 0.0) return INFINITY;
  const double t = (line - from[axis]) / d;
  if (t < 0.0 || t > 1.0) return INFINITY;
  const double cross = from[other] + t * (to[other] - from[other]);
  const double lo = std::min(w.a[other], w.b[other]);
  const double hi = std::max(w.a[other], w.b[other]);
  if (cross < lo || cross > hi) return INFINITY;
  return t;
}

}  // namespace

Eigen::Vector2d ContinuousMaze::project_through_walls(const Eigen::Vector2d& from,
                                                      const Eigen::Vector2d& to) const {
  double t_hit = INFINITY;
  for (const auto& w : spec_.walls) t_hit = std::min(t_hit, wall_hit(from, to, w));
  if (!std::isfinite(t_hit)) return to;
  const double len = (to - from).norm();
  const double back = len > 0 ? 1e-6 / len : 0.0;
  const double t = std::max(0.0, t_hit - back);
  return from + t * (to - from);
}

bool ContinuousMaze::segment_clear(const Eigen::Vector2d& from, const Eigen::Vector2d& to) const {
  for (const auto& w : spec_.walls) {
    if (std::isfinite(wall_hit(from, to, w))) return false;
  }
  return true;
}

bool ContinuousMaze::in_goal(const Eigen::Vector2d& p) const {
  return (p - spec_.goal).norm() <= spec_.goal_radius;
}

double ContinuousMaze::reward_at(const Eigen::Vector2d& p) const {
  if (spec_.reward_mode == RewardMode::sparse) return in_goal(p) ? 1.0 : 0.0;
  const double diag = (spec_.high - spec_.low).norm();
  return 1.0 - std::min(1.0, (p - spec_.goal).norm() / diag);
}

StepResult ContinuousMaze::step(const Vec& state, const Vec& action, Rng& rng) const {
  if (action.size() != 2 || !action.allFinite()) throw std::invalid_argument("maze action must be a finite 2-vector");
  if (state.size() != 2 || !state.allFinite()) throw std::invalid_argument("maze state must be a finite 2-vector");
  const Eigen::Vector2d s = state;
  const Eigen::Vector2d a = action.cwiseMax(-1.0).cwiseMin(1.0);
  Eigen::Vector2d proposal = s + a * spec_.dt;
  if (spec_.noise_std > 0) {
    const double z0 = standard_normal(rng);
    const double z1 = standard_normal(rng);
    proposal += spec_.noise_std * Eigen::Vector2d(z0, z1);
  }
  Eigen::Vector2d next = project_through_walls(s, proposal);
  next = next.cwiseMax(spec_.low).cwiseMin(spec_.high);
  return {next, reward_at(next), in_goal(next)};
}

double ContinuousMaze::log_true_conditional_density(const Vec& s, const Vec& a,
                                                    const Vec& s_next) const {
  if (!s.allFinite() || !a.allFinite() || !s_next.allFinite()) {
    throw std::invalid_argument("conditional density needs finite inputs");
  }
  const Eigen::Vector2d mean = Eigen::Vector2d(s) + Eigen::Vector2d(a.cwiseMax(-1.0).cwiseMin(1.0)) * spec_.dt;
  const double var = spec_.noise_std * spec_.noise_std;
  const double sq = (Eigen::Vector2d(s_next) - mean).squaredNorm();
  return -std::log(2.0 * std::numbers::pi * var) - 0.5 * sq / var;
}

double ContinuousMaze::true_conditional_density(const Vec& s, const Vec& a, const Vec& s_next) const {
  return std::exp(log_true_conditional_density(s, a, s_next));
}

namespace {

Eigen::Vector2d yaml_point(const YAML::Node& n, const char* name) {
  if (!n.IsSequence() || n.size() != 2) throw ConfigError(std::string("maze '") + name + "' must be [x, y]");
  return {n[0].as<double>(), n[1].as<double>()};
}

}  // namespace

ContinuousMazeSpec parse_maze_spec(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("maze spec parse error: ") + e.what());
  }
  ContinuousMazeSpec spec = ContinuousMazeSpec::four_rooms();
  static const std::set<std::string> known{"low", "high", "walls", "dt", "noise_std", "start",
                                           "goal", "goal_radius", "reward_mode"};
  try {
    for (const auto& kv : root) {
      const auto key = kv.first.as<std::string>();
      if (!known.count(key)) {
        throw ConfigError("unknown maze key '" + key + "' at line " + std::to_string(kv.first.Mark().line + 1));
      }
    }
    if (root["low"]) spec.low = yaml_point(root["low"], "low");
    if (root["high"]) spec.high = yaml_point(root["high"], "high");
    if (root["dt"]) spec.dt = root["dt"].as<double>();
    if (root["noise_std"]) spec.noise_std = root["noise_std"].as<double>();
    if (root["start"]) spec.start = yaml_point(root["start"], "start");
    if (root["goal"]) spec.goal = yaml_point(root["goal"], "goal");
    if (root["goal_radius"]) spec.goal_radius = root["goal_radius"].as<double>();
    if (root["reward_mode"]) spec.reward_mode = parse_reward_mode(root["reward_mode"].as<std::string>());
    if (root["walls"]) {
      spec.walls.clear();
      for (const auto& w : root["walls"]) {
        if (!w.IsSequence() || w.size() != 4) throw ConfigError("maze wall must be [x0, y0, x1, y1]");
        spec.walls.push_back({{w[0].as<double>(), w[1].as<double>()}, {w[2].as<double>(), w[3].as<double>()}});
      }
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("maze spec field error: ") + e.what());
  }
  return spec;
}

ContinuousMazeSpec load_maze_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open maze spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_maze_spec(ss.str());
}

// ---------------------------------------------------------------- Synthetic conditionals

void SyntheticConditional::validate() const {
  if (x_cardinality < 1 || u_cardinality < 1) throw std::invalid_argument("cardinalities must be >= 1");
  if (true_table.rows() != u_cardinality || true_table.cols() != x_cardinality) {
    throw std::invalid_argument("true_table must be u x x");
  }
  for (int u = 0; u < u_cardinality; ++u) {
    if ((true_table.row(u).array() < 0).any() || std::abs(true_table.row(u).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("true_table rows must sum to 1");
    }
  }
}

std::vector<ConditionalSample> sample_synthetic(const SyntheticConditional& env, int n,
                                                const Vec& u_distribution, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_synthetic needs n >= 1");
  env.validate();
  if (u_distribution.size() != env.u_cardinality) throw std::invalid_argument("u distribution size mismatch");
  std::vector<ConditionalSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int u = sample_categorical(u_distribution, rng);
    const int x = sample_categorical(env.true_table.row(u).transpose(), rng);
    out.push_back({x, u});
  }
  return out;
}

SyntheticConditional random_synthetic(int x_cardinality, int u_cardinality, Rng& rng) {
  SyntheticConditional env;
  env.x_cardinality = x_cardinality;
  env.u_cardinality = u_cardinality;
  env.true_table.resize(u_cardinality, x_cardinality);
  std::exponential_distribution<double> expo(1.0);
  for (int u = 0; u < u_cardinality; ++u) {
    for (int x = 0; x < x_cardinality; ++x) env.true_table(u, x) = expo(rng);
    env.true_table.row(u) /= env.true_table.row(u).sum();
  }
  return env;
}

}  // namespace ctrl
