#include "ctrl/harness.hpp"

#include "ctrl/format.hpp"

#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#ifndef CTRL_VERSION
#define CTRL_VERSION "dev"
#endif

namespace ctrl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- schema reader

namespace {

std::string at_line(const YAML::Node& n) {
  const auto m = n.Mark();
  return m.line >= 0 ? " (line " + std::to_string(m.line + 1) + ")" : "";
}

template <typename T>
const char* type_label() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "a list of integers";
}

// One mapping in the config tree. Every key read is recorded; finish()
// rejects whatever was not read.
class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      throw ConfigError(label() + ": expected a mapping" + at_line(node_));
    }
  }

  bool present() const { return node_ && node_.IsMap(); }
  bool has(const std::string& key) const { return present() && node_[key]; }

  template <typename T>
  bool read(const std::string& key, T& out) {
    used_.insert(key);
    if (!has(key)) return false;
    out = convert<T>(key);
    return true;
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    if (!has(key)) {
      throw ConfigError(qualified(key) + ": required field missing" +
                        (present() ? at_line(node_) : " (no '" + path_ + "' section)"));
    }
    return convert<T>(key);
  }

  /// Reads a string and maps it through `parse`, keeping the line number on failure.
  template <typename T, typename F>
  bool read_enum(const std::string& key, T& out, F parse) {
    std::string text;
    if (!read(key, text)) return false;
    try {
      out = parse(text);
    } catch (const std::exception& e) {
      throw ConfigError(qualified(key) + ": " + e.what() + at_line(node_[key]));
    }
    return true;
  }

  Section child(const std::string& key) {
    used_.insert(key);
    return Section(present() ? node_[key] : YAML::Node(), path_.empty() ? key : path_ + "." + key);
  }

  void ignore(const std::string& key) { used_.insert(key); }

  void finish() const {
    if (!present()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) throw ConfigError("unknown key '" + qualified(key) + "'" + at_line(kv.first));
    }
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  template <typename T>
  T convert(const std::string& key) const {
    const YAML::Node v = node_[key];
    try {
      if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        const auto x = v.as<long long>();
        if (std::is_unsigned_v<T> && x < 0) throw ConfigError(qualified(key) + ": must be >= 0" + at_line(v));
        return static_cast<T>(x);
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.IsScalar()) throw YAML::Exception(v.Mark(), "not a scalar");
        return v.as<std::string>();
      } else {
        return v.as<T>();
      }
    } catch (const YAML::Exception&) {
      throw ConfigError(qualified(key) + ": expected " + type_label<T>() + at_line(v));
    }
  }

  const YAML::Node node_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename F>
void checked(const std::string& where, F f) {
  try {
    f();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

void read_env(Section s, EnvSection& env) {
  s.read("kind", env.kind);
  if (env.kind != "grid" && env.kind != "maze" && env.kind != "tabular") {
    throw ConfigError("env.kind: expected grid, maze or tabular, got '" + env.kind + "'");
  }
  s.read("layout", env.layout);
  s.read("slip", env.slip);
  RewardMode mode{};
  if (s.read_enum("reward", mode, parse_reward_mode)) env.reward = mode;
  s.read("maze_spec", env.maze_spec);
  double noise = 0.0;
  if (s.read("noise_std", noise)) env.noise_std = noise;
  s.read("mdp", env.mdp);
  s.finish();
  if (!(env.slip >= 0 && env.slip <= 1)) throw ConfigError("env.slip must lie in [0,1]");
  if (env.noise_std && !(*env.noise_std >= 0)) throw ConfigError("env.noise_std must be >= 0");
  if (env.kind == "tabular" && env.mdp.empty()) throw ConfigError("env.mdp: required field missing for kind tabular");
}

void read_model(Section s, ModelSection& m) {
  auto& n = m.net;
  s.read("d", n.d);
  s.read("phi_hidden", n.phi_hidden);
  s.read("mu_hidden", n.mu_hidden);
  s.read_enum("activation", n.hidden_activation, parse_activation);
  s.read_enum("mu_output", n.mu_output, parse_activation);
  s.read("bounded_phi", n.bounded_phi);
  s.read_enum("positivity", n.positivity, parse_positivity);
  s.read("temperature", n.temperature);
  s.read("init", m.init);
  s.read("checkpoint", m.checkpoint);
  s.finish();
  if (n.d < 1) throw ConfigError("model.d must be >= 1");
  for (int h : n.phi_hidden)
    if (h < 1) throw ConfigError("model.phi_hidden widths must be >= 1");
  for (int h : n.mu_hidden)
    if (h < 1) throw ConfigError("model.mu_hidden widths must be >= 1");
  if (!(n.temperature > 0)) throw ConfigError("model.temperature must be > 0");
  if (m.init != "random" && m.init != "true" && m.init != "checkpoint") {
    throw ConfigError("model.init: expected random, true or checkpoint, got '" + m.init + "'");
  }
  if (m.init == "checkpoint" && m.checkpoint.empty()) throw ConfigError("model.checkpoint: required when init is checkpoint");
}

void read_nce(Section s, NceConfig& c) {
  s.read_enum("objective", c.objective, parse_objective);
  s.read("K", c.K);
  s.read("gamma_init", c.gamma_param);
  s.read("marginal_weight", c.marginal_weight);
  s.read("mu_norm_weight", c.mu_norm_weight);
  s.read("batch_size", c.batch_size);
  s.read("marginal_samples", c.marginal_samples);
  s.read("stratified", c.stratified);
  s.read("learning_rate", c.learning_rate);
  s.finish();
  c.validate();
}

void read_bonus(Section s, BonusConfig& b) {
  s.read("alpha", b.alpha);
  s.read("lambda", b.lambda);
  s.finish();
  b.validate();
}

void read_planner(Section s, PlannerConfig& p) {
  s.read("q_hidden", p.q_hidden);
  s.read_enum("q_activation", p.q_activation, parse_activation);
  s.read("tau", p.tau);
  s.read("q_learning_rate", p.q_learning_rate);
  s.read("policy_learning_rate", p.policy_learning_rate);
  s.read("batch_size", p.batch_size);
  s.read("entropy", p.entropy.enabled);
  s.read("entropy_weight", p.entropy.weight);
  s.read("vi_tol", p.vi_tol);
  s.finish();
}

void read_driver(Section s, OnlineConfig& d, bool need_gamma) {
  if (need_gamma) {
    d.gamma = s.require<double>("gamma");
  } else {
    s.read("gamma", d.gamma);
  }
  s.read("episodes", d.episodes);
  s.read("collect_per_epoch", d.collect_per_epoch);
  s.read("repr_update_period", d.repr_update_period);
  s.read("nce_steps", d.nce_steps);
  s.read("policy_update_period", d.policy_update_period);
  s.read("planner_steps_per_epoch", d.planner_steps_per_epoch);
  s.read("epsilon_mix", d.epsilon_mix);
  s.read("buffer_capacity", d.buffer_capacity);
  s.read("metrics_period", d.metrics_period);
  s.read("eval_episodes", d.eval_episodes);
  s.read("eval_horizon", d.eval_horizon);
  s.read("heldout_size", d.heldout_size);
  s.read("heldout_mc_samples", d.heldout_mc_samples);
  s.finish();
}

void read_offline(Section s, OfflineSection& o, bool required) {
  if (required) {
    o.config.gamma = s.require<double>("gamma");
    o.dataset = s.require<std::string>("dataset");
  } else {
    s.read("gamma", o.config.gamma);
    s.read("dataset", o.dataset);
  }
  s.read("reg_weight", o.config.reg_weight);
  s.read("vi_tol", o.config.vi_tol);
  s.read("nce_steps", o.config.nce_steps);
  s.read("ridge", o.config.ridge);
  s.finish();
}

void read_consistency(Section s, ConsistencySection& c) {
  s.read_enum("family", c.family, parse_family);
  s.read("x_cardinality", c.x_cardinality);
  s.read("u_cardinality", c.u_cardinality);
  s.read("partition_constant", c.partition_constant);
  s.read("n", c.n);
  s.read("K_list", c.K_list);
  s.read_enum("objective", c.objective, parse_objective);
  s.read("seeds", c.seeds);
  s.read("resample_table", c.resample_table);
  s.read("tv_threshold", c.tv_threshold);
  s.read("witness_threshold", c.witness_threshold);
  s.finish();
  if (c.x_cardinality < 1 || c.u_cardinality < 1) throw ConfigError("consistency cardinalities must be >= 1");
  if (!(c.partition_constant > 0)) throw ConfigError("consistency.partition_constant must be > 0");
  if (c.n < 1) throw ConfigError("consistency.n must be >= 1");
  if (c.seeds < 1) throw ConfigError("consistency.seeds must be >= 1");
  if (c.K_list.empty()) throw ConfigError("consistency.K_list must not be empty");
  for (int k : c.K_list)
    if (k < 1) throw ConfigError("consistency.K_list entries must be >= 1");
}

void read_gen_dataset(Section s, GenDatasetSection& g) {
  s.read("policy", g.policy);
  s.read("epsilon", g.epsilon);
  s.read("transitions", g.transitions);
  s.read("gamma", g.gamma);
  s.read("output", g.output);
  s.finish();
  if (g.policy != "optimal" && g.policy != "uniform" && g.policy != "epsilon_optimal") {
    throw ConfigError("gen_dataset.policy: expected optimal, uniform or epsilon_optimal, got '" + g.policy + "'");
  }
  if (!(g.epsilon >= 0 && g.epsilon <= 1)) throw ConfigError("gen_dataset.epsilon must lie in [0,1]");
  if (g.transitions < 1) throw ConfigError("gen_dataset.transitions must be >= 1");
  if (!(g.gamma > 0 && g.gamma < 1)) throw ConfigError("gen_dataset.gamma must lie in (0,1)");
}

const std::set<std::string> kCommands{"online", "offline", "consistency", "gen-dataset"};

}  // namespace

ExperimentConfig parse_config(const std::string& yaml_text, const std::string& command) {
  if (!kCommands.count(command)) throw std::invalid_argument("unknown command '" + command + "'");
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config parse error at line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  ExperimentConfig cfg;
  Section top(root, "");
  for (const auto& kv : root) cfg.sections.insert(kv.first.as<std::string>());
  top.ignore("manifest");
  top.read("seed", cfg.seed);
  top.read("output_dir", cfg.output_dir);
  read_env(top.child("env"), cfg.env);
  read_model(top.child("model"), cfg.model);
  read_nce(top.child("nce"), cfg.nce);
  read_bonus(top.child("bonus"), cfg.driver.bonus);
  read_planner(top.child("planner"), cfg.driver.planner);
  read_driver(top.child("driver"), cfg.driver, command == "online");
  read_offline(top.child("offline"), cfg.offline, command == "offline");
  read_consistency(top.child("consistency"), cfg.consistency);
  read_gen_dataset(top.child("gen_dataset"), cfg.gen_dataset);
  top.finish();

  cfg.driver.seed = cfg.seed;
  cfg.offline.config.seed = cfg.seed;
  cfg.offline.config.bonus.alpha = cfg.driver.bonus.alpha;
  cfg.offline.config.bonus.lambda = cfg.driver.bonus.lambda;
  cfg.offline.config.bonus.mode = BonusConfig::Mode::penalty;
  if (command == "online") checked("driver", [&] { cfg.driver.validate(); });
  if (command == "offline") checked("offline", [&] { cfg.offline.config.validate(); });
  if (cfg.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  return cfg;
}

ExperimentConfig load_config(const std::string& path, const std::string& command) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), command);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------- rendering

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string int_list(const std::vector<int>& v) {
  std::string out = "[";
  for (size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out + "]";
}

const char* yes_no(bool b) { return b ? "true" : "false"; }

class Emitter {
 public:
  void section(const std::string& name) { os_ << name << ":\n"; }
  template <typename T>
  void kv(const std::string& key, const T& value, int indent = 2) {
    os_ << std::string(static_cast<size_t>(indent), ' ') << key << ": " << value << "\n";
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

}  // namespace

std::string render_config(const ExperimentConfig& cfg, const std::string& command) {
  Emitter e;
  e.kv("seed", cfg.seed, 0);
  e.kv("output_dir", quoted(cfg.output_dir), 0);
  const bool online = command == "online", offline = command == "offline";
  if (online || command == "gen-dataset") {
    e.section("env");
    e.kv("kind", cfg.env.kind);
    e.kv("layout", quoted(cfg.env.layout));
    e.kv("slip", num(cfg.env.slip));
    if (cfg.env.reward) e.kv("reward", *cfg.env.reward == RewardMode::dense ? "dense" : "sparse");
    e.kv("maze_spec", quoted(cfg.env.maze_spec));
    if (cfg.env.noise_std) e.kv("noise_std", num(*cfg.env.noise_std));
    e.kv("mdp", quoted(cfg.env.mdp));
  }
  if (online || offline) {
    const auto& n = cfg.model.net;
    e.section("model");
    e.kv("d", n.d);
    e.kv("phi_hidden", int_list(n.phi_hidden));
    e.kv("mu_hidden", int_list(n.mu_hidden));
    e.kv("activation", activation_name(n.hidden_activation));
    e.kv("mu_output", activation_name(n.mu_output));
    e.kv("bounded_phi", yes_no(n.bounded_phi));
    e.kv("positivity", positivity_name(n.positivity));
    e.kv("temperature", num(n.temperature));
    e.kv("init", cfg.model.init);
    e.kv("checkpoint", quoted(cfg.model.checkpoint));
    const auto& c = cfg.nce;
    e.section("nce");
    e.kv("objective", objective_name(c.objective));
    e.kv("K", c.K);
    e.kv("gamma_init", num(c.gamma_param));
    e.kv("marginal_weight", num(c.marginal_weight));
    e.kv("mu_norm_weight", num(c.mu_norm_weight));
    e.kv("batch_size", c.batch_size);
    e.kv("marginal_samples", c.marginal_samples);
    e.kv("stratified", yes_no(c.stratified));
    e.kv("learning_rate", num(c.learning_rate));
    e.section("bonus");
    e.kv("alpha", num(cfg.driver.bonus.alpha));
    e.kv("lambda", num(cfg.driver.bonus.lambda));
  }
  if (online) {
    const auto& p = cfg.driver.planner;
    e.section("planner");
    e.kv("q_hidden", p.q_hidden);
    e.kv("q_activation", activation_name(p.q_activation));
    e.kv("tau", num(p.tau));
    e.kv("q_learning_rate", num(p.q_learning_rate));
    e.kv("policy_learning_rate", num(p.policy_learning_rate));
    e.kv("batch_size", p.batch_size);
    e.kv("entropy", yes_no(p.entropy.enabled));
    e.kv("entropy_weight", num(p.entropy.weight));
    e.kv("vi_tol", num(p.vi_tol));
    const auto& d = cfg.driver;
    e.section("driver");
    e.kv("gamma", num(d.gamma));
    e.kv("episodes", d.episodes);
    e.kv("collect_per_epoch", d.collect_per_epoch);
    e.kv("repr_update_period", d.repr_update_period);
    e.kv("nce_steps", d.nce_steps);
    e.kv("policy_update_period", d.policy_update_period);
    e.kv("planner_steps_per_epoch", d.planner_steps_per_epoch);
    e.kv("epsilon_mix", num(d.epsilon_mix));
    e.kv("buffer_capacity", d.buffer_capacity);
    e.kv("metrics_period", d.metrics_period);
    e.kv("eval_episodes", d.eval_episodes);
    e.kv("eval_horizon", d.eval_horizon);
    e.kv("heldout_size", d.heldout_size);
    e.kv("heldout_mc_samples", d.heldout_mc_samples);
  }
  if (offline) {
    const auto& o = cfg.offline;
    e.section("offline");
    e.kv("dataset", quoted(o.dataset));
    e.kv("gamma", num(o.config.gamma));
    e.kv("reg_weight", num(o.config.reg_weight));
    e.kv("vi_tol", num(o.config.vi_tol));
    e.kv("nce_steps", o.config.nce_steps);
    e.kv("ridge", num(o.config.ridge));
  }
  if (command == "consistency") {
    const auto& c = cfg.consistency;
    e.section("consistency");
    e.kv("family", family_name(c.family));
    e.kv("x_cardinality", c.x_cardinality);
    e.kv("u_cardinality", c.u_cardinality);
    e.kv("partition_constant", num(c.partition_constant));
    e.kv("n", c.n);
    e.kv("K_list", int_list(c.K_list));
    e.kv("objective", objective_name(c.objective));
    e.kv("seeds", c.seeds);
    e.kv("resample_table", yes_no(c.resample_table));
    e.kv("tv_threshold", num(c.tv_threshold));
    e.kv("witness_threshold", num(c.witness_threshold));
  }
  if (command == "gen-dataset") {
    const auto& g = cfg.gen_dataset;
    e.section("gen_dataset");
    e.kv("policy", g.policy);
    e.kv("epsilon", num(g.epsilon));
    e.kv("transitions", g.transitions);
    e.kv("gamma", num(g.gamma));
    e.kv("output", quoted(g.output));
  }
  return e.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void write_manifest(const std::string& output_dir, const std::string& command, const std::string& config_echo,
                    std::uint64_t seed) {
  ensure_dir(output_dir);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(config_echo)));
  auto out = open_out(in_dir(output_dir, "manifest.yaml"));
  out << "# Run manifest. Everything below the manifest block is the resolved config;\n"
      << "# pass this file back as the config to reproduce the run.\n"
      << "manifest:\n"
      << "  command: " << command << "\n"
      << "  version: " << quoted(CTRL_VERSION) << "\n"
      << "  config_hash: \"fnv1a64:" << hash << "\"\n"
      << "  seed: " << seed << "\n"
      << "  eigen: \"" << EIGEN_WORLD_VERSION << "." << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION << "\"\n"
#ifdef __VERSION__
      << "  compiler: " << quoted(__VERSION__) << "\n"
#endif
#ifdef CTRL_HAVE_OPENMP
      << "  openmp: true\n"
#else
      << "  openmp: false\n"
#endif
      << config_echo;
  if (!out) throw IoError("failed writing manifest in " + output_dir);
}

// ---------------------------------------------------------------- construction

std::unique_ptr<Environment> make_environment(const EnvSection& env) {
  if (env.kind == "grid") {
    const RewardMode mode = env.reward.value_or(RewardMode::sparse);
    if (env.layout.empty()) return std::make_unique<FourRoomGrid>(FourRoomGrid::canonical(env.slip, mode));
    return std::make_unique<FourRoomGrid>(FourRoomGrid::load(env.layout, env.slip, mode));
  }
  if (env.kind == "maze") {
    ContinuousMazeSpec spec = env.maze_spec.empty() ? ContinuousMazeSpec::four_rooms() : load_maze_spec(env.maze_spec);
    if (env.noise_std) spec.noise_std = *env.noise_std;
    if (env.reward) spec.reward_mode = *env.reward;
    return std::make_unique<ContinuousMaze>(spec);
  }
  if (env.kind == "tabular") return std::make_unique<TabularEnvironment>(load_tabular_mdp(env.mdp));
  throw ConfigError("env.kind: unknown kind '" + env.kind + "'");
}

namespace {

std::optional<TabularMdp> true_kernel(const Environment& env) {
  if (const auto* g = dynamic_cast<const FourRoomGrid*>(&env)) return g->to_tabular();
  if (const auto* t = dynamic_cast<const TabularEnvironment*>(&env)) return t->mdp();
  return std::nullopt;
}

LowRankModel random_model(const ExperimentConfig& cfg, const Space& states, const Space& actions) {
  Rng rng(derive_seed(cfg.seed, 7));
  return LowRankModel(states, actions, states, BaseMeasure::uniform_over(states), cfg.model.net, rng);
}

LowRankModel checkpoint_model(const ExperimentConfig& cfg, const Space& states, const Space& actions) {
  LowRankModel m = load_model(cfg.model.checkpoint);
  if (!(m.state_space() == states) || !(m.action_space() == actions) || !(m.next_space() == states)) {
    throw ConfigError("model.checkpoint: spaces " + m.state_space().describe() + " / " + m.action_space().describe() +
                      " do not match " + states.describe() + " / " + actions.describe());
  }
  return m;
}

}  // namespace

LowRankModel make_model(const ExperimentConfig& cfg, const Environment& env) {
  if (cfg.model.init == "true") {
    const auto mdp = true_kernel(env);
    if (!mdp) throw ConfigError("model.init true needs a discrete environment (grid or tabular)");
    return LowRankModel::tabular_factorization(*mdp);
  }
  if (cfg.model.init == "checkpoint") return checkpoint_model(cfg, env.state_space(), env.action_space());
  return random_model(cfg, env.state_space(), env.action_space());
}

// ---------------------------------------------------------------- commands

namespace {

void write_policy(const std::string& path, const Policy& pi, const Space& states) {
  const int A = pi.num_actions();
  std::vector<std::string> header;
  const bool discrete = states.is_discrete();
  if (discrete) {
    header.push_back("state");
  } else {
    if (states.point_dim() != 2) return;
    header = {"x", "y"};
  }
  for (int a = 0; a < A; ++a) header.push_back("p" + std::to_string(a));
  CsvWriter w(path, header);
  auto emit = [&](std::vector<std::string> cells, const Vec& s) {
    const Vec p = pi.probs(s);
    for (int a = 0; a < A; ++a) cells.push_back(format_double(p[a]));
    w.row(cells);
  };
  if (discrete) {
    for (int s = 0; s < states.cardinality(); ++s) emit({std::to_string(s)}, Vec::Constant(1, s));
    return;
  }
  // 20 x 20 cell centres over the state box.
  constexpr int n = 20;
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      Vec s(2);
      s[0] = states.low()[0] + (ix + 0.5) * (states.high()[0] - states.low()[0]) / n;
      s[1] = states.low()[1] + (iy + 0.5) * (states.high()[1] - states.low()[1]) / n;
      emit({format_double(s[0]), format_double(s[1])}, s);
    }
  }
}

}  // namespace

int run_online(const ExperimentConfig& cfg) {
  const auto env = make_environment(cfg.env);
  LowRankModel model = make_model(cfg, *env);
  const std::string dir = cfg.output_dir;
  write_manifest(dir, "online", render_config(cfg, "online"), cfg.seed);

  OnlineMetricsWriter metrics(in_dir(dir, "metrics.csv"));
  const OnlineResult r = run_ctrl_ucb(*env, cfg.driver, model, cfg.nce,
                                      [&](const OnlineMetricsRow& row) { metrics.write(row); });
  save_model(in_dir(dir, "model.ckpt"), model);
  write_nce_trace(in_dir(dir, "nce_trace.csv"), r.nce_trace);
  write_policy(in_dir(dir, "policy.csv"), r.policy, env->state_space());
  write_policy(in_dir(dir, "exploit_policy.csv"), r.exploit_policy, env->state_space());
  auto out = open_out(in_dir(dir, "summary.yaml"));
  out << "final_success_rate: " << format_double(r.final_success_rate) << "\n"
      << "final_return: " << format_double(r.final_return) << "\n"
      << "env_steps: " << r.env_steps << "\n";
  spdlog::info("online: success {:.3f}, return {:.4f}, {} env steps -> {}", r.final_success_rate, r.final_return,
               r.env_steps, dir);
  return 0;
}

int run_offline(const ExperimentConfig& cfg) {
  const Dataset data = read_dataset(cfg.offline.dataset);
  if (data.transitions.empty()) throw ConfigError("offline.dataset: " + cfg.offline.dataset + " holds no records");
  if (cfg.model.init == "true") throw ConfigError("model.init true is not available offline; use random or checkpoint");
  LowRankModel model = cfg.model.init == "checkpoint" ? checkpoint_model(cfg, data.states, data.actions)
                                                      : random_model(cfg, data.states, data.actions);
  const std::string dir = cfg.output_dir;
  write_manifest(dir, "offline", render_config(cfg, "offline"), cfg.seed);

  NceConfig nce = cfg.nce;
  const OfflineResult r = run_ctrl_lcb(data.transitions, data.states, data.actions, cfg.offline.config, model, nce);
  save_model(in_dir(dir, "model.ckpt"), model);
  write_nce_trace(in_dir(dir, "nce_trace.csv"), r.nce_trace);
  write_policy(in_dir(dir, "policy.csv"), r.policy, data.states);
  {
    auto out = open_out(in_dir(dir, "coverage.yaml"));
    out << "c_pi_star: " << format_double(r.coverage.c_pi_star) << "\n"
        << "omega: " << format_double(r.coverage.omega) << "\n"
        << "feature_dim: " << r.coverage.feature_dim << "\n"
        << "condition_number: " << format_double(r.coverage.condition_number) << "\n";
  }
  CsvWriter m(in_dir(dir, "metrics.csv"), {"alpha", "penalty_mean", "value_estimate", "c_pi_star", "omega",
                                           "unvisited_states", "final_nce_loss"});
  m.row({format_double(cfg.offline.config.bonus.alpha), format_double(r.penalty_mean),
         format_double(r.value_estimate), format_double(r.coverage.c_pi_star), format_double(r.coverage.omega),
         std::to_string(r.unvisited_states.size()),
         format_double(r.nce_trace.empty() ? 0.0 : r.nce_trace.back().loss)});
  spdlog::info("offline: c_pi_star {:.4g}, penalty mean {:.4g} -> {}", r.coverage.c_pi_star, r.penalty_mean, dir);
  return 0;
}

int run_consistency(const ExperimentConfig& cfg, std::string* summary_out) {
  const auto& c = cfg.consistency;
  ConsistencySpec spec;
  spec.n = c.n;
  spec.K_list = c.K_list;
  spec.objective = c.objective;
  for (int i = 0; i < c.seeds; ++i) spec.seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  const bool varying = c.family == TabularConditionalFamily::Kind::tied_base_measure;
  if (varying) {
    spec.env = varying_partition_env();
    spec.family = varying_partition_family();
  } else {
    Rng rng(derive_seed(cfg.seed, 99));
    spec.env = random_synthetic(c.x_cardinality, c.u_cardinality, rng);
    switch (c.family) {
      case TabularConditionalFamily::Kind::free_table:
        spec.family = TabularConditionalFamily::free_table(c.x_cardinality, c.u_cardinality);
        break;
      case TabularConditionalFamily::Kind::softmax_logits:
        spec.family = TabularConditionalFamily::softmax_logits(c.x_cardinality, c.u_cardinality);
        break;
      default:
        spec.family = TabularConditionalFamily::constant_partition(c.x_cardinality, c.u_cardinality,
                                                                    c.partition_constant);
    }
    spec.resample_table = c.resample_table;
  }
  const std::string dir = cfg.output_dir;
  write_manifest(dir, "consistency", render_config(cfg, "consistency"), cfg.seed);
  const auto cells = consistency_experiment(spec);
  write_consistency_csv(in_dir(dir, "sweep.csv"), cells);

  const auto by_k = mean_tv_by_k(cells);
  std::ostringstream s;
  s << "family: " << family_name(c.family) << "\nobjective: " << objective_name(c.objective) << "\n";
  size_t failed = 0;
  for (const auto& cell : cells) failed += cell.failed ? 1 : 0;
  s << "failed_cells: " << failed << "\nmean_tv:\n";
  for (const auto& [k, tv] : by_k) s << "  " << k << ": " << format_double(tv) << "\n";

  int code = 0;
  if (by_k.size() != c.K_list.size()) {
    s << "verdict: FAIL (a K value has no successful fits)\n";
    code = 1;
  } else if (varying && c.objective == NceConfig::Objective::binary) {
    const double last = by_k.back().second;
    if (last > c.witness_threshold) {
      s << "verdict: inconsistency witnessed (TV " << format_double(last) << " > " << num(c.witness_threshold)
        << " at K=" << by_k.back().first << ")\n";
    } else {
      s << "verdict: FAIL (expected inconsistency not witnessed)\n";
      code = 1;
    }
  } else {
    const double first = by_k.front().second, last = by_k.back().second;
    const bool shrinks = by_k.size() == 1 || last < first || first == 0.0;
    const bool pass = last < c.tv_threshold && shrinks;
    s << "verdict: " << (pass ? "PASS" : "FAIL") << " (TV " << format_double(last) << " at K=" << by_k.back().first
      << ", threshold " << num(c.tv_threshold) << ")\n";
    code = pass ? 0 : 1;
  }
  auto out = open_out(in_dir(dir, "summary.txt"));
  out << s.str();
  if (summary_out) *summary_out = s.str();
  return code;
}

int run_gen_dataset(const ExperimentConfig& cfg) {
  const auto env = make_environment(cfg.env);
  const auto& g = cfg.gen_dataset;
  const int A = static_cast<int>(env->action_set().size());
  Policy policy = Policy::uniform(A);
  if (g.policy != "uniform") {
    const auto mdp = true_kernel(*env);
    if (!mdp) throw ConfigError("gen_dataset.policy " + g.policy + " needs a discrete environment");
    const auto vi = value_iteration(*mdp, mdp->reward, g.gamma);
    policy = vi.policy();
    if (g.policy == "epsilon_optimal") policy = Policy::epsilon_mixture(policy, g.epsilon);
  }
  const std::string dir = cfg.output_dir;
  write_manifest(dir, "gen-dataset", render_config(cfg, "gen-dataset"), cfg.seed);
  Rng rng(derive_seed(cfg.seed, 11));
  Dataset data;
  data.states = env->state_space();
  data.actions = env->action_space();
  while (static_cast<int>(data.transitions.size()) < g.transitions) {
    for (auto& t : sample_discounted_rollout(*env, policy, g.gamma, rng)) {
      if (static_cast<int>(data.transitions.size()) == g.transitions) break;
      data.transitions.push_back(std::move(t));
    }
  }
  const fs::path out = fs::path(g.output).is_absolute() ? fs::path(g.output) : fs::path(dir) / g.output;
  write_dataset(out.string(), data);
  spdlog::info("gen-dataset: {} transitions -> {}", data.transitions.size(), out.string());
  return 0;
}

// ---------------------------------------------------------------- heatmaps

double HeatmapGrid::cell_area() const {
  return (high[0] - low[0]) / nx * (high[1] - low[1]) / ny;
}

Eigen::Vector2d HeatmapGrid::cell_center(int ix, int iy) const {
  return {low[0] + (ix + 0.5) * (high[0] - low[0]) / nx, low[1] + (iy + 0.5) * (high[1] - low[1]) / ny};
}

double HeatmapGrid::mass() const { return values.sum() * cell_area(); }

std::pair<int, int> HeatmapGrid::argmax() const {
  Eigen::Index i = 0, j = 0;
  values.maxCoeff(&i, &j);
  return {static_cast<int>(i), static_cast<int>(j)};
}

std::pair<int, int> HeatmapGrid::cell_of(const Eigen::Vector2d& p) const {
  auto idx = [](double v, double lo, double hi, int n) {
    const int k = static_cast<int>(std::floor((v - lo) / (hi - lo) * n));
    return std::clamp(k, 0, n - 1);
  };
  return {idx(p[0], low[0], high[0], nx), idx(p[1], low[1], high[1], ny)};
}

std::string normalization_name(HeatmapGrid::Normalization n) {
  return n == HeatmapGrid::Normalization::density ? "density" : "raw";
}

HeatmapGrid::Normalization parse_normalization(const std::string& s) {
  if (s == "density") return HeatmapGrid::Normalization::density;
  if (s == "raw") return HeatmapGrid::Normalization::raw;
  throw ConfigError("unknown normalization '" + s + "' (expected density|raw)");
}

namespace {

HeatmapGrid empty_grid(const Vec& low, const Vec& high, int nx, int ny, HeatmapGrid::Normalization mode) {
  if (nx < 1 || ny < 1) throw ConfigError("heatmap resolution must be >= 1");
  if (low.size() != 2 || high.size() != 2 || !(low.array() < high.array()).all()) {
    throw ConfigError("heatmap bounds must be a 2-d box with low < high");
  }
  HeatmapGrid g;
  g.nx = nx;
  g.ny = ny;
  g.low = low;
  g.high = high;
  g.normalization = mode;
  g.values = Mat::Zero(nx, ny);
  return g;
}

void normalize(HeatmapGrid& g) {
  if (g.normalization != HeatmapGrid::Normalization::density) return;
  const double m = g.mass();
  if (!(m > 0) || !std::isfinite(m)) throw DivergenceError("heatmap has no finite positive mass to normalize");
  g.values /= m;
}

}  // namespace

HeatmapGrid density_heatmap(const std::function<double(const Eigen::Vector2d&)>& density, const Vec& low,
                            const Vec& high, int nx, int ny, HeatmapGrid::Normalization normalization) {
  HeatmapGrid g = empty_grid(low, high, nx, ny, normalization);
  for (int ix = 0; ix < nx; ++ix)
    for (int iy = 0; iy < ny; ++iy) g.values(ix, iy) = density(g.cell_center(ix, iy));
  normalize(g);
  return g;
}

HeatmapGrid model_heatmap(const LowRankModel& model, const HeatmapQuery& q) {
  const Space& next = model.next_space();
  if (next.is_discrete()) throw ConfigError("heatmap requires continuous state space");
  if (next.point_dim() != 2) throw ConfigError("heatmap needs a 2-d state space");
  if (q.state.size() != model.state_space().point_dim() || q.action.size() != model.action_space().point_dim()) {
    throw ConfigError("heatmap probe (s, a) has the wrong dimension for this model");
  }
  if (q.mc_samples < 1) throw ConfigError("heatmap mc_samples must be >= 1");
  const Vec low = q.bounds ? q.bounds->first : next.low();
  const Vec high = q.bounds ? q.bounds->second : next.high();
  HeatmapGrid g = empty_grid(low, high, q.nx, q.ny, q.normalization);
  Rng rng(q.seed);
  const SharedNormalizer norm(model, q.mc_samples, rng);
  std::vector<Vec> centers;
  centers.reserve(static_cast<size_t>(q.nx) * static_cast<size_t>(q.ny));
  for (int ix = 0; ix < q.nx; ++ix)
    for (int iy = 0; iy < q.ny; ++iy) centers.push_back(g.cell_center(ix, iy));
  const Vec logd = norm.log_density_many(q.state, q.action, centers);
  for (int ix = 0; ix < q.nx; ++ix)
    for (int iy = 0; iy < q.ny; ++iy) g.values(ix, iy) = std::exp(logd[ix * q.ny + iy]);
  normalize(g);
  return g;
}

void write_heatmap(const std::string& path, const HeatmapGrid& g,
                   const std::vector<std::pair<std::string, std::string>>& extra_meta) {
  {
    CsvWriter w(path, {"ix", "iy", "x", "y", "value"});
    for (int iy = 0; iy < g.ny; ++iy) {
      for (int ix = 0; ix < g.nx; ++ix) {
        const auto c = g.cell_center(ix, iy);
        w.row({std::to_string(ix), std::to_string(iy), format_double(c[0]), format_double(c[1]),
               format_double(g.values(ix, iy))});
      }
    }
  }
  auto out = open_out(path + ".meta");
  const auto [ax, ay] = g.argmax();
  out << "ctrl-heatmap v1\n"
      << "nx: " << g.nx << "\n"
      << "ny: " << g.ny << "\n"
      << "low: [" << format_double(g.low[0]) << ", " << format_double(g.low[1]) << "]\n"
      << "high: [" << format_double(g.high[0]) << ", " << format_double(g.high[1]) << "]\n"
      << "cell_area: " << format_double(g.cell_area()) << "\n"
      << "normalization: " << normalization_name(g.normalization) << "\n"
      << "mass: " << format_double(g.mass()) << "\n"
      << "argmax: [" << ax << ", " << ay << "]\n";
  for (const auto& [k, v] : extra_meta) out << k << ": " << v << "\n";
  if (!out) throw IoError("failed writing " + path + ".meta");
}

}  // namespace ctrl
