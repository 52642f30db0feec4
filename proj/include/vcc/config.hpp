#pragma once

// Run configuration for the command-line tools: a JSON object with flat
// dotted keys, overridden by `key=value` flags and by the VCC_SEED
// environment variable.

#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vcc/error.hpp"
#include "vcc/pipeline.hpp"
#include "vcc/toylab.hpp"

namespace vcc {

struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<int> taps;  // empty: the model's own taps
  int class_label = 0;
  int image_count = 50;
  int pool_size = 400;
  std::vector<double> eps_grid{0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0};
  int eval_count = 100;
  int jobs = 1;
  std::string oracle = "incore";
  std::vector<std::string> bridge_command;
  std::string data_dir;
  std::string model_path;
  std::string out_dir = ".";
  VccConfig vcc;
  TrainRecipe train;

  std::vector<std::string> keys() const;
};

namespace detail {

template <class T>
T config_value(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::config, "bad value for config key " + key + ": " + v.dump());
  }
}

// Parses a flag value: JSON if it parses, otherwise a bare string.
inline nlohmann::json flag_value(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) return text;
  return j;
}

}  // namespace detail

/// Applies one dotted key. Unknown keys are configuration errors.
inline void set_config_key(RunConfig& c, const std::string& key, const nlohmann::json& v) {
  using detail::config_value;
  auto& s = c.vcc.segment;
  auto& d = c.vcc.discovery;
  auto& p = c.vcc.discovery.pruning;
  auto& t = c.vcc.itcav;
  if (key == "seed") c.seed = config_value<std::uint64_t>(v, key);
  else if (key == "taps") c.taps = config_value<std::vector<int>>(v, key);
  else if (key == "class") c.class_label = config_value<int>(v, key);
  else if (key == "images") c.image_count = config_value<int>(v, key);
  else if (key == "pool.size") c.pool_size = config_value<int>(v, key);
  else if (key == "suppress.eps") c.eps_grid = config_value<std::vector<double>>(v, key);
  else if (key == "suppress.eval_images") c.eval_count = config_value<int>(v, key);
  else if (key == "jobs") c.jobs = config_value<int>(v, key);
  else if (key == "oracle") c.oracle = config_value<std::string>(v, key);
  else if (key == "bridge.command") c.bridge_command = config_value<std::vector<std::string>>(v, key);
  else if (key == "paths.data") c.data_dir = config_value<std::string>(v, key);
  else if (key == "paths.model") c.model_path = config_value<std::string>(v, key);
  else if (key == "paths.out") c.out_dir = config_value<std::string>(v, key);
  else if (key == "segment.compactness") s.compactness = config_value<double>(v, key);
  else if (key == "segment.k_max") s.k_max = config_value<int>(v, key);
  else if (key == "segment.cells_per_cluster") s.cells_per_cluster = config_value<int>(v, key);
  else if (key == "segment.silhouette_floor") s.silhouette_floor = config_value<double>(v, key);
  else if (key == "segment.min_cells") s.min_cells = config_value<int>(v, key);
  else if (key == "segment.min_fraction") s.min_fraction = config_value<double>(v, key);
  else if (key == "concepts.k_m") d.k_max = config_value<int>(v, key);
  else if (key == "concepts.restarts") d.kmeans.restarts = config_value<int>(v, key);
  else if (key == "pruning.A") p.A = config_value<double>(v, key);
  else if (key == "pruning.K") p.K = config_value<double>(v, key);
  else if (key == "pruning.C") p.C = config_value<double>(v, key);
  else if (key == "pruning.Q") p.Q = config_value<double>(v, key);
  else if (key == "pruning.B") p.B = config_value<double>(v, key);
  else if (key == "pruning.nu") p.nu = config_value<double>(v, key);
  else if (key == "itcav.runs") t.runs = config_value<int>(v, key);
  else if (key == "itcav.alpha") t.alpha = config_value<double>(v, key);
  else if (key == "itcav.random_set_size") t.random_set_size = config_value<int>(v, key);
  else if (key == "itcav.literal_sign") t.literal_sign = config_value<bool>(v, key);
  else if (key == "itcav.test_mode") {
    const auto m = config_value<std::string>(v, key);
    if (m == "scores_vs_half") t.mode = ItcavConfig::TestMode::scores_vs_half;
    else if (m == "observed_vs_random_null") t.mode = ItcavConfig::TestMode::observed_vs_random_null;
    else throw Error(ErrorKind::config, "itcav.test_mode must be scores_vs_half or observed_vs_random_null");
  }
  else if (key == "cav.steps") t.cav.steps = config_value<int>(v, key);
  else if (key == "cav.learning_rate") t.cav.learning_rate = config_value<double>(v, key);
  else if (key == "cav.l2") t.cav.l2 = config_value<double>(v, key);
  else if (key == "train.lr") c.train.lr = config_value<double>(v, key);
  else if (key == "train.epochs") c.train.epochs = config_value<int>(v, key);
  else if (key == "train.batch") c.train.batch = config_value<int>(v, key);
  else if (key == "train.min_accuracy") c.train.min_accuracy = config_value<double>(v, key);
  else throw Error(ErrorKind::config, "unknown config key " + key);
}

inline std::vector<std::string> RunConfig::keys() const {
  return {"seed", "taps", "class", "images", "pool.size", "suppress.eps", "suppress.eval_images", "jobs", "oracle",
          "bridge.command", "paths.data", "paths.model", "paths.out", "segment.compactness", "segment.k_max",
          "segment.cells_per_cluster", "segment.silhouette_floor", "segment.min_cells", "segment.min_fraction",
          "concepts.k_m", "concepts.restarts", "pruning.A", "pruning.K", "pruning.C", "pruning.Q", "pruning.B",
          "pruning.nu", "itcav.runs", "itcav.alpha", "itcav.random_set_size", "itcav.literal_sign",
          "itcav.test_mode", "cav.steps", "cav.learning_rate", "cav.l2", "train.lr", "train.epochs", "train.batch",
          "train.min_accuracy"};
}

inline void validate_config(const RunConfig& c) {
  require(c.image_count >= 1, ErrorKind::config, "images must be >= 1");
  require(c.jobs >= 1, ErrorKind::config, "jobs must be >= 1");
  require(c.oracle == "incore" || c.oracle == "bridge", ErrorKind::config, "oracle must be incore or bridge");
  require(c.oracle != "bridge" || !c.bridge_command.empty(), ErrorKind::config, "bridge oracle needs bridge.command");
  require(c.vcc.itcav.runs >= 2, ErrorKind::config, "itcav.runs must be >= 2");
  require(c.vcc.itcav.alpha > 0.0 && c.vcc.itcav.alpha < 1.0, ErrorKind::config, "itcav.alpha must lie in (0, 1)");
  require(c.vcc.itcav.random_set_size >= 2, ErrorKind::config, "itcav.random_set_size must be >= 2");
  require(c.pool_size >= c.vcc.itcav.runs * c.vcc.itcav.random_set_size, ErrorKind::config,
          "pool.size must cover itcav.runs disjoint random sets");
  require(c.vcc.segment.compactness >= 0.0, ErrorKind::config, "segment.compactness must be >= 0");
  require(c.vcc.discovery.k_max >= 1, ErrorKind::config, "concepts.k_m must be >= 1");
  require(c.eps_grid.size() >= 2, ErrorKind::config, "suppress.eps needs >= 2 values");
  for (std::size_t i = 0; i < c.eps_grid.size(); ++i)
    require(c.eps_grid[i] >= 0.0 && (i == 0 || c.eps_grid[i] > c.eps_grid[i - 1]), ErrorKind::config,
            "suppress.eps must be nonnegative and increasing");
  require(c.train.lr >= 0.0 && c.train.epochs >= 1 && c.train.batch >= 1, ErrorKind::config,
          "train.lr must be >= 0, train.epochs and train.batch >= 1");
  c.vcc.discovery.pruning.validate();
}

inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  require(j.is_object(), ErrorKind::config, "config file must hold a JSON object");
  for (const auto& [k, v] : j.items()) set_config_key(c, k, v);
}

/// Layering order: defaults, then the file, then `key=value` overrides, then
/// VCC_SEED.
inline RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!file.empty()) {
    std::ifstream in(file);
    require(static_cast<bool>(in), ErrorKind::config, "cannot read config file " + file.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    require(!j.is_discarded(), ErrorKind::config, "config file is not valid JSON: " + file.string());
    apply_config_json(c, j);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::config, "override must look like key=value: " + o);
    set_config_key(c, o.substr(0, eq), detail::flag_value(o.substr(eq + 1)));
  }
  if (const char* s = std::getenv("VCC_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    require(*s != '\0' && end && *end == '\0', ErrorKind::config, "VCC_SEED must be a nonnegative integer");
    c.seed = v;
  }
  validate_config(c);
  return c;
}

}  // namespace vcc
