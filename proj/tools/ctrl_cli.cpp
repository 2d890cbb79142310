// ctrl: batch entry point for online / offline runs, consistency sweeps,
// dataset generation, heatmaps and the gradient audit.

#include "ctrl/format.hpp"
#include "ctrl/gradcheck.hpp"
#include "ctrl/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

extern char** environ;

namespace {

using namespace ctrl;

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::string seeds;  // "a..b"
};

std::pair<std::uint64_t, std::uint64_t> parse_seed_range(const std::string& text) {
  static const std::regex re(R"((\d+)\.\.(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw ConfigError("--seeds expects a..b, got '" + text + "'");
  const auto a = std::stoull(m[1]), b = std::stoull(m[2]);
  if (b < a) throw ConfigError("--seeds range is empty: " + text);
  return {a, b};
}

Vec parse_point(const std::string& text, const std::string& what) {
  const auto parts = split(text, ',');
  Vec v(static_cast<Eigen::Index>(parts.size()));
  try {
    for (size_t i = 0; i < parts.size(); ++i) v[static_cast<Eigen::Index>(i)] = parse_double(trim(parts[i]));
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected comma-separated numbers, got '" + text + "'");
  }
  return v;
}

// Re-invokes this executable once per seed, sequentially; each child is an
// ordinary single run with its own output directory.
int spawn_seed_runs(const std::string& command, const RunOptions& opt, const std::string& base_dir) {
  const auto [first, last] = parse_seed_range(opt.seeds);
  const std::string self = std::filesystem::read_symlink("/proc/self/exe").string();
  int worst = 0;
  for (auto s = first; s <= last; ++s) {
    const std::string dir = (std::filesystem::path(base_dir) / ("seed-" + std::to_string(s))).string();
    std::vector<std::string> args{self, command, opt.config, "--seed", std::to_string(s), "--output-dir", dir};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0) {
      throw IoError("cannot spawn " + self);
    }
    int status = 0;
    waitpid(pid, &status, 0);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kExitIo;
    spdlog::info("seed {} -> exit {}", s, code);
    worst = std::max(worst, code);
  }
  return worst;
}

int run_config_command(const std::string& command, const RunOptions& opt) {
  ExperimentConfig cfg = load_config(opt.config, command);
  if (!opt.output_dir.empty()) cfg.output_dir = opt.output_dir;
  if (!opt.seeds.empty()) return spawn_seed_runs(command, opt, cfg.output_dir);
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.driver.seed = cfg.seed;
    cfg.offline.config.seed = cfg.seed;
  }
  if (command == "online") return run_online(cfg);
  if (command == "offline") return run_offline(cfg);
  if (command == "gen-dataset") return run_gen_dataset(cfg);
  std::string summary;
  const int code = run_consistency(cfg, &summary);
  std::cout << summary;
  return code;
}

struct HeatmapOptions {
  std::string model, state, action, bounds, output_dir = "runs/heatmap", normalization = "density";
  int resolution = 100;
  int mc_samples = 10000;
  std::uint64_t seed = 0;
};

int run_heatmap(const HeatmapOptions& o) {
  const LowRankModel model = load_model(o.model);
  HeatmapQuery q;
  q.state = parse_point(o.state, "--state");
  q.action = parse_point(o.action, "--action");
  q.nx = q.ny = o.resolution;
  q.mc_samples = o.mc_samples;
  q.seed = o.seed;
  q.normalization = parse_normalization(o.normalization);
  if (!o.bounds.empty()) {
    const Vec b = parse_point(o.bounds, "--bounds");
    if (b.size() != 4) throw ConfigError("--bounds expects x0,y0,x1,y1");
    q.bounds = std::make_pair(Vec(b.head(2)), Vec(b.tail(2)));
  }
  const HeatmapGrid grid = model_heatmap(model, q);

  std::ostringstream echo;
  echo << "heatmap:\n  model: \"" << o.model << "\"\n  state: [" << o.state << "]\n  action: [" << o.action
       << "]\n  resolution: " << o.resolution << "\n  bounds: [" << o.bounds << "]\n  normalization: "
       << o.normalization << "\n  mc_samples: " << o.mc_samples << "\n  seed: " << o.seed << "\n";
  write_manifest(o.output_dir, "heatmap", echo.str(), o.seed);
  const std::string path = (std::filesystem::path(o.output_dir) / "heatmap.csv").string();
  write_heatmap(path, grid,
                {{"model", o.model}, {"state", "[" + o.state + "]"}, {"action", "[" + o.action + "]"},
                 {"mc_samples", std::to_string(o.mc_samples)}, {"seed", std::to_string(o.seed)}});
  const auto [ax, ay] = grid.argmax();
  const auto c = grid.cell_center(ax, ay);
  std::cout << "argmax cell (" << ax << ", " << ay << ") at (" << format_double(c[0]) << ", " << format_double(c[1])
            << "), mass " << format_double(grid.mass()) << "\n";
  return 0;
}

struct GradientOptions {
  std::uint64_t seed = 0;
  int instances = 10;
  double tolerance = 1e-4;
  std::string output_dir;
};

int run_check_gradients(const GradientOptions& o) {
  const auto entries = run_gradient_suite(o.seed, o.instances, o.tolerance);
  bool ok = true;
  for (const auto& e : entries) {
    std::cout << (e.passed ? "PASS " : "FAIL ") << e.loss << " worst_rel_error=" << format_double(e.worst_rel_error)
              << " instances=" << e.instances << "\n";
    ok = ok && e.passed;
  }
  if (!o.output_dir.empty()) {
    std::ostringstream echo;
    echo << "check_gradients:\n  seed: " << o.seed << "\n  instances: " << o.instances
         << "\n  tolerance: " << format_double(o.tolerance) << "\n";
    write_manifest(o.output_dir, "check-gradients", echo.str(), o.seed);
    CsvWriter w((std::filesystem::path(o.output_dir) / "gradients.csv").string(),
                {"loss", "instances", "worst_rel_error", "passed"});
    for (const auto& e : entries) {
      w.row({e.loss, std::to_string(e.instances), format_double(e.worst_rel_error), e.passed ? "1" : "0"});
    }
  }
  return ok ? 0 : kExitCheckFailed;
}

template <typename F>
int guarded(F f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    spdlog::error("I/O error: {}", e.what());
    return kExitIo;
  } catch (const DivergenceError& e) {
    spdlog::error("numerical divergence: {}", e.what());
    return kExitDivergence;
  }
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("ctrl"));
  CLI::App app{"Contrastive representation learning for low-rank MDPs"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  RunOptions run;
  std::string chosen;
  for (const char* name : {"online", "offline", "consistency", "gen-dataset"}) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + name + " command from a config file");
    sub->add_option("config", run.config, "YAML config (or a manifest.yaml from an earlier run)")->required();
    sub->add_option("--seed", run.seed, "override the config seed");
    sub->add_option("--output-dir", run.output_dir, "override output_dir");
    sub->add_option("--seeds", run.seeds, "a..b: one run per seed under <output_dir>/seed-<k>");
    sub->callback([&, name] { chosen = name; });
  }

  HeatmapOptions hm;
  auto* heat = app.add_subcommand("heatmap", "learned transition density over a 2-d grid");
  heat->add_option("--model", hm.model, "model checkpoint")->required();
  heat->add_option("--state", hm.state, "probe state, e.g. 0.3,0.7")->required();
  heat->add_option("--action", hm.action, "probe action, e.g. 1,0")->required();
  heat->add_option("--resolution", hm.resolution, "cells per axis")->capture_default_str();
  heat->add_option("--bounds", hm.bounds, "x0,y0,x1,y1 (default: the state box)");
  heat->add_option("--normalization", hm.normalization, "density|raw")->capture_default_str();
  heat->add_option("--mc-samples", hm.mc_samples, "normalizer draws")->capture_default_str();
  heat->add_option("--seed", hm.seed)->capture_default_str();
  heat->add_option("--output-dir", hm.output_dir)->capture_default_str();
  heat->callback([&] { chosen = "heatmap"; });

  GradientOptions go;
  auto* grad = app.add_subcommand("check-gradients", "finite-difference audit of every loss");
  grad->add_option("--seed", go.seed)->capture_default_str();
  grad->add_option("--instances", go.instances)->capture_default_str();
  grad->add_option("--tolerance", go.tolerance)->capture_default_str();
  grad->add_option("--output-dir", go.output_dir, "also write gradients.csv and a manifest here");
  grad->callback([&] { chosen = "check-gradients"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  return guarded([&] {
    if (chosen == "heatmap") return run_heatmap(hm);
    if (chosen == "check-gradients") return run_check_gradients(go);
    return run_config_command(chosen, run);
  });
}
