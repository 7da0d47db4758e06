#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "pace/blackbox.hpp"
#include "pace/errors.hpp"
#include "pace/pace.hpp"
#include "pace/pace_train.hpp"
#include "pace/synthparts.hpp"

namespace pace {

/// One run's complete configuration. Defaults are the desk-scale values;
/// every field is reachable through a flat `key = value` config file.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string workdir = "runs/desk";
  bool verbose = false;

  GenConfig dataset;                    // num_classes, images_per_class, image_size
  TrainConfig bb;                       // black-box training
  PaceHyper pace;                       // explainer hyperparameters
  std::size_t pace_epochs = 40;
  std::size_t pace_batch_size = 32;
  double pace_learning_rate = 3e-3;
  double pace_weight_decay = 0.1;
  std::size_t eval_permutations = 100;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline double cfg_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0')
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return x;
}

inline std::uint64_t cfg_uint(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a non-negative integer");
  return static_cast<std::uint64_t>(x);
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

/// Parse `key = value` lines (# starts a comment). Unknown or duplicate
/// keys and malformed values fail fast with the key named; range checks
/// run before anything touches the filesystem.
inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config key '" + key + "' given twice");
    kv[key] = val;
  }

  for (const auto& [key, val] : kv) {
    if (key == "seed") cfg.seed = detail::cfg_uint(key, val);
    else if (key == "workdir") cfg.workdir = val;
    else if (key == "verbose") cfg.verbose = detail::cfg_bool(key, val);
    else if (key == "dataset.num_classes") cfg.dataset.num_classes = detail::cfg_uint(key, val);
    else if (key == "dataset.images_per_class") cfg.dataset.images_per_class = detail::cfg_uint(key, val);
    else if (key == "dataset.image_size") cfg.dataset.image_size = detail::cfg_uint(key, val);
    else if (key == "bb.epochs") cfg.bb.epochs = detail::cfg_uint(key, val);
    else if (key == "bb.batch_size") cfg.bb.batch_size = detail::cfg_uint(key, val);
    else if (key == "bb.learning_rate") cfg.bb.learning_rate = detail::cfg_double(key, val);
    else if (key == "bb.weight_decay") cfg.bb.weight_decay = detail::cfg_double(key, val);
    else if (key == "pace.num_concepts") cfg.pace.num_concepts = detail::cfg_uint(key, val);
    else if (key == "pace.embed_dim") cfg.pace.embed_dim = detail::cfg_uint(key, val);
    else if (key == "pace.tau") cfg.pace.tau = detail::cfg_double(key, val);
    else if (key == "pace.epsilon") cfg.pace.epsilon = detail::cfg_double(key, val);
    else if (key == "pace.alpha") cfg.pace.alpha = detail::cfg_double(key, val);
    else if (key == "pace.beta") cfg.pace.beta = detail::cfg_double(key, val);
    else if (key == "pace.gamma") cfg.pace.gamma = detail::cfg_double(key, val);
    else if (key == "pace.delta") cfg.pace.delta = detail::cfg_double(key, val);
    else if (key == "pace.omega") cfg.pace.omega = detail::cfg_double(key, val);
    else if (key == "pace.rho") cfg.pace.rho = detail::cfg_uint(key, val);
    else if (key == "pace.onehot_targets") cfg.pace.onehot_targets = detail::cfg_bool(key, val);
    else if (key == "pace.epochs") cfg.pace_epochs = detail::cfg_uint(key, val);
    else if (key == "pace.batch_size") cfg.pace_batch_size = detail::cfg_uint(key, val);
    else if (key == "pace.learning_rate") cfg.pace_learning_rate = detail::cfg_double(key, val);
    else if (key == "pace.weight_decay") cfg.pace_weight_decay = detail::cfg_double(key, val);
    else if (key == "eval.permutations") cfg.eval_permutations = detail::cfg_uint(key, val);
    else throw ConfigError("unknown config key '" + key + "'");
  }

  // range checks (fail before any side effect)
  if (cfg.workdir.empty()) throw ConfigError("config key 'workdir': must not be empty");
  if (cfg.dataset.num_classes < 2) throw ConfigError("config key 'dataset.num_classes': must be >= 2");
  if (cfg.dataset.images_per_class < 10)
    throw ConfigError("config key 'dataset.images_per_class': must be >= 10 so every split gets an image");
  if (cfg.dataset.image_size < 16 || cfg.dataset.image_size % 4 != 0)
    throw ConfigError("config key 'dataset.image_size': must be >= 16 and a multiple of 4");
  if (cfg.bb.batch_size < 1) throw ConfigError("config key 'bb.batch_size': must be >= 1");
  if (!(cfg.bb.learning_rate > 0.0)) throw ConfigError("config key 'bb.learning_rate': must be > 0");
  if (cfg.bb.weight_decay < 0.0) throw ConfigError("config key 'bb.weight_decay': must be >= 0");
  if (cfg.pace_batch_size < 1) throw ConfigError("config key 'pace.batch_size': must be >= 1");
  if (!(cfg.pace_learning_rate > 0.0)) throw ConfigError("config key 'pace.learning_rate': must be > 0");
  if (cfg.pace_weight_decay < 0.0) throw ConfigError("config key 'pace.weight_decay': must be >= 0");
  if (cfg.eval_permutations < 1) throw ConfigError("config key 'eval.permutations': must be >= 1");

  // fields derived from others; the root seed feeds every stage
  cfg.pace.num_classes = cfg.dataset.num_classes;
  validate_hyper(cfg.pace);
  cfg.dataset.seed = cfg.seed;
  cfg.bb.seed = cfg.seed;
  cfg.bb.verbose = cfg.verbose;
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

inline PaceTrainConfig pace_train_config(const RunConfig& cfg) {
  PaceTrainConfig tc;
  tc.hyper = cfg.pace;
  tc.epochs = cfg.pace_epochs;
  tc.batch_size = cfg.pace_batch_size;
  tc.learning_rate = cfg.pace_learning_rate;
  tc.weight_decay = cfg.pace_weight_decay;
  tc.seed = cfg.seed;
  tc.verbose = cfg.verbose;
  return tc;
}

}  // namespace pace
