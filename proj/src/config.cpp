#include "stvla/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "stvla/dataset.hpp"

namespace stvla {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      // run
      {"seed", "1"},
      {"out_dir", "runs/default"},
      // data
      {"data_dir", ""},
      {"data_seed", "7"},
      {"subtasks", "40"},
      {"episodes", "250"},
      {"hz", "20"},
      {"cos_thresh", "0.95"},
      {"max_chunk", "16"},
      {"train_frac", "0.8"},
      {"split_seed", "11"},
      {"heldout_subtasks", ""},  // comma list of subtask ids excluded from training
      // model
      {"d_model", "32"},
      {"fourier_dim", "32"},
      {"embed_dim", "64"},
      {"blocks", "2"},
      {"history", "2"},
      {"fusion", "attention"},
      {"use_spatial", "1"},
      {"use_temporal", "1"},
      {"fourier", "1"},
      {"use_proprio", "1"},
      {"use_dt_head", "1"},
      {"lora_rank", "8"},
      {"lora_alpha", "16"},
      {"pos_sigma", "1.0"},
      {"time_sigma", "0.25"},
      {"horizon", "10"},
      // optimisation
      {"optimizer", "adam"},
      {"clip", "10"},
      {"stage1_epochs", "6"},
      {"stage1_lr", "1e-3"},
      {"stage1_batch", "16"},
      {"stage2_epochs", "90"},
      {"stage2_lr", "1e-3"},
      {"stage2_batch", "8"},
      {"stage2_cold_start", "0"},
      {"w_dx", "1"},
      {"w_dtheta", "1"},
      {"w_grip", "1"},
      {"w_dt", "1"},
      // evaluation
      {"fixed_dt", "0.8"},
      {"eval_episodes", "50"},
      {"eval_budget", "20"},
      {"eval_workers", "1"},
      {"eval_seed", "5"},
      {"bootstrap", "1000"},
      {"dump_traj", "0"},
  };
  return d;
}

const std::set<std::string>& stage2_only_keys() {
  static const std::set<std::string> k = {"stage2_epochs", "stage2_lr", "stage2_batch", "stage2_cold_start",
                                          "use_dt_head", "w_dx", "w_dtheta", "w_grip", "w_dt", "fixed_dt",
                                          "eval_episodes", "eval_budget", "eval_workers", "eval_seed",
                                          "bootstrap", "dump_traj", "out_dir"};
  return k;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() : values_(defaults()) {}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

void RunConfig::apply(const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config: expected key=value, got '" + a + "'");
    set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
  return it->second;
}

double RunConfig::num(const std::string& key) const {
  const std::string& v = str(key);
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("config: " + key + "='" + v + "' is not a number");
  return d;
}

long RunConfig::integer(const std::string& key) const {
  const std::string& v = str(key);
  std::size_t used = 0;
  long n = 0;
  try {
    n = std::stol(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument("config: " + key + "='" + v + "' is not an integer");
  return n;
}

std::size_t RunConfig::count(const std::string& key) const {
  const long n = integer(key);
  if (n < 0) throw std::invalid_argument("config: " + key + " must be non-negative");
  return static_cast<std::size_t>(n);
}

bool RunConfig::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: " + key + "='" + v + "' is not a boolean");
}

std::string RunConfig::echo() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  return out.str();
}

std::string RunConfig::hash() const { return fnv1a_hex(echo()); }

std::string RunConfig::stage1_hash() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_)
    if (!stage2_only_keys().count(k)) out << k << '=' << v << '\n';
  return fnv1a_hex(out.str());
}

}  // namespace stvla
