// Copyright 2026 The picontrol Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment plumbing behind the picontrol command-line tool: configuration
// resolution, dataset / checkpoint / report persistence and one function
// per verb. Every artifact written here is a pure function of the resolved
// configuration, so reruns are byte-identical at any thread count. Wall
// times only go to the log stream.

#ifndef PICONTROL_APP_HPP_
#define PICONTROL_APP_HPP_

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <variant>
#include <vector>

#include "picontrol/controller.hpp"
#include "picontrol/core.hpp"
#include "picontrol/envs.hpp"
#include "picontrol/experts.hpp"
#include "picontrol/models.hpp"
#include "picontrol/training.hpp"

namespace picontrol::app {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Malformed configuration, arguments or files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitNumeric = 2,
  kExitMemoryBudget = 3,
};

// Runs fn and maps the exception taxonomy to process exit codes.
inline int run_guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const MemoryBudgetError& e) {
    err << "error: " << e.what() << '\n';
    return kExitMemoryBudget;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}

// ------------------------------ formatting ----------------------------------

// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ValidationError("malformed number '" + std::string(s) + "'");
  }
  return v;
}

inline json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) {
    throw ValidationError(what + ": expected a non-empty array of rows");
  }
  const auto rows = static_cast<Index>(j.size());
  const auto cols = static_cast<Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) {
      throw ValidationError(what + ": ragged matrix");
    }
    for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
  return v;
}

// Non-finite values have no JSON spelling; they are stored as null.
inline json number_or_null(double v) {
  return std::isfinite(v) ? json(v) : json(nullptr);
}

inline double number_or(const json& j, double fallback) {
  return j.is_null() ? fallback : j.get<double>();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

// ------------------------------- files --------------------------------------

inline std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

// Written to a sibling temporary and renamed into place.
inline void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot write " + tmp.string());
    os << text;
    if (!os) throw ValidationError("write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline void write_json(const fs::path& p, const json& j) {
  write_text(p, j.dump(2) + "\n");
}

// Exclusive use of an output directory for the lifetime of the object.
// Refuses to clobber any of the named outputs unless `force` is set.
class OutputDir {
 public:
  static constexpr const char* kLockName = ".picontrol.lock";

  OutputDir(fs::path dir, const std::vector<std::string>& outputs, bool force)
      : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    lock_ = dir_ / kLockName;
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw ValidationError("output directory " + dir_.string() +
                            " is locked by another invocation (remove " +
                            lock_.string() + " if stale)");
    }
    ::close(fd);
    locked_ = true;
    if (!force) {
      for (const auto& name : outputs) {
        if (fs::exists(dir_ / name)) {
          release();
          throw ValidationError("refusing to overwrite " + (dir_ / name).string() +
                                " (pass --force)");
        }
      }
    }
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() { release(); }

  fs::path operator/(const std::string& name) const { return dir_ / name; }
  const fs::path& path() const { return dir_; }

 private:
  void release() {
    if (locked_) {
      std::error_code ec;
      fs::remove(lock_, ec);
      locked_ = false;
    }
  }

  fs::path dir_;
  fs::path lock_;
  bool locked_ = false;
};

// ------------------------------ configuration -------------------------------

inline json default_config(const std::string& environment,
                           const std::string& profile) {
  if (environment != "linear" && environment != "pendulum") {
    throw ValidationError("environment must be 'linear' or 'pendulum', got '" +
                          environment + "'");
  }
  if (profile != "desk" && profile != "paper") {
    throw ValidationError("profile must be 'desk' or 'paper', got '" + profile + "'");
  }
  const bool full_scale = profile == "paper";
  const bool linear = environment == "linear";
  const double pi = pendulum::kPi;

  json c;
  c["experiment_id"] = environment + "-" + profile;
  c["environment"] = environment;
  c["profile"] = profile;
  c["seed"] = 1;
  c["threads"] = 0;
  c["memory_budget_mb"] = 8192;
  c["hyperparams"] = {
      {"lambda", 0.01},
      {"nu", 1500.0},
      {"sigma", linear ? 0.2 : 0.005},
      {"K", linear ? (full_scale ? 100 : 50) : (full_scale ? 100 : 30)},
      {"N", linear ? (full_scale ? 200 : 50) : 30},
      {"U", linear ? (full_scale ? 200 : 50) : (full_scale ? 200 : 20)},
  };
  c["model"] = {
      {"dynamics", linear ? "linear" : "mlp"},
      {"cost", linear ? "quadratic" : "mlp"},
      {"init_std", 0.01},
      {"hidden", 12},
      {"cost_hidden", 12},
      {"cost_outputs", 12},
      {"control_weight", PendulumTeacherCost::kControlWeight},
  };
  c["data"] = {
      {"n_train", linear ? (full_scale ? 950 : 200) : (full_scale ? 50 : 20)},
      {"n_test", linear ? (full_scale ? 50 : 20) : (full_scale ? 10 : 5)},
      {"horizon", linear ? (full_scale ? 200 : 50) : 30},
      {"duration", 40.0},
      {"sample_stride", linear || full_scale ? 1 : 10},
  };
  c["training"] = {
      {"regime", linear ? "open_loop" : "mpc"},
      {"epochs", linear ? 100 : (full_scale ? 50 : 5)},
      {"batch", 8},
      {"learning_rate", 1e-3},
      {"ctrl_weight", 1.0},
      {"cost_weight", linear ? 0.0 : 1e-3},
      {"goals", linear ? json::array() : json::array({json::array({pi, 0.0}),
                                                      json::array({-pi, 0.0})})},
      {"frozen", linear ? json::array() : json::array({"dynamics"})},
      {"pretrain_epochs", linear ? 0 : (full_scale ? 200 : 100)},
      {"pretrain_batch", 32},
      {"target_reduction", 0.0},
  };
  c["evaluation"] = {
      {"controller", "pi"},
      {"runs", 10},
      {"duration", 60.0},
      {"warm_iterations", full_scale ? 20 : 5},
  };
  c["gradcheck"] = {
      {"instances", 20},
      {"K", 4},
      {"N", 3},
      {"U", 2},
      {"lambda", 1.0},
      {"sigma", 0.3},
      {"step", 1e-6},
      {"tolerance", 1e-4},
      {"abs_floor", 1e-7},
      {"frozen", json::array()},
  };
  c["costmap"] = {
      {"grid", 101},
      {"theta_max", pi},
      {"theta_dot_max", 2.0 * pi},
  };
  return c;
}

namespace detail {

inline void check_known_keys(const json& defaults, const json& user,
                             const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) {
      throw ValidationError("unknown configuration key '" + key + "'");
    }
    const json& d = defaults[it.key()];
    if (d.is_object()) {
      if (!it.value().is_object()) {
        throw ValidationError("configuration key '" + key + "' must be an object");
      }
      check_known_keys(d, it.value(), key);
    }
  }
}

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return section ? j.at(section).at(key).get<T>() : j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("configuration key '") +
                          (section ? std::string(section) + "." : "") + key +
                          "': " + e.what());
  }
}

}  // namespace detail

// Typed view of a resolved configuration; `resolved` is what gets echoed.
struct ExperimentConfig {
  json resolved;

  std::string experiment_id;
  std::string environment;
  std::string profile;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::size_t memory_budget = 0;
  PIHyperParams hp;

  std::string dynamics_model;
  std::string cost_model;
  double init_std = 0.0;
  Index hidden = 0;
  Index cost_hidden = 0;
  Index cost_outputs = 0;
  double control_weight = 0.0;

  Index n_train = 0;
  Index n_test = 0;
  Index data_horizon = 0;
  double data_duration = 0.0;
  Index sample_stride = 1;

  Regime regime = Regime::kOpenLoop;
  int epochs = 0;
  Index batch = 0;
  double learning_rate = 0.0;
  double ctrl_weight = 0.0;
  double cost_weight = 0.0;
  std::vector<StateVec> goals;
  FrozenSet frozen;
  int pretrain_epochs = 0;
  Index pretrain_batch = 0;
  double target_reduction = 0.0;

  std::string eval_controller;
  int eval_runs = 0;
  double eval_duration = 0.0;
  Index warm_iterations = 0;

  int gc_instances = 0;
  PIHyperParams gc_hp;
  double gc_step = 0.0;
  double gc_tolerance = 0.0;
  double gc_abs_floor = 0.0;
  FrozenSet gc_frozen;

  Index grid = 0;
  double theta_max = 0.0;
  double theta_dot_max = 0.0;

  bool linear() const { return environment == "linear"; }
  Index state_dim() const { return linear() ? 4 : 2; }
  Index control_dim() const { return linear() ? 2 : 1; }
};

inline FrozenSet frozen_from_json(const json& j, const char* what) {
  FrozenSet out;
  for (const auto& e : j) {
    const auto id = e.get<std::string>();
    if (id != "dynamics" && id != "cost" && id != "control_weight") {
      throw ValidationError(std::string(what) + ": unknown segment '" + id + "'");
    }
    out.insert(id);
  }
  return out;
}

inline ExperimentConfig parse_config(const json& c) {
  using detail::get;
  ExperimentConfig cfg;
  cfg.resolved = c;
  cfg.experiment_id = get<std::string>(c, nullptr, "experiment_id");
  cfg.environment = get<std::string>(c, nullptr, "environment");
  cfg.profile = get<std::string>(c, nullptr, "profile");
  cfg.seed = get<std::uint64_t>(c, nullptr, "seed");
  cfg.threads = get<unsigned>(c, nullptr, "threads");
  const auto budget_mb = get<double>(c, nullptr, "memory_budget_mb");
  if (!(budget_mb > 0.0)) throw ValidationError("memory_budget_mb must be positive");
  cfg.memory_budget = static_cast<std::size_t>(budget_mb * 1048576.0);

  cfg.hp.lambda = get<double>(c, "hyperparams", "lambda");
  cfg.hp.nu = get<double>(c, "hyperparams", "nu");
  cfg.hp.sigma = get<double>(c, "hyperparams", "sigma");
  cfg.hp.K = get<Index>(c, "hyperparams", "K");
  cfg.hp.N = get<Index>(c, "hyperparams", "N");
  cfg.hp.U = get<Index>(c, "hyperparams", "U");
  try {
    cfg.hp.validate();
  } catch (const ParameterError& e) {
    throw ValidationError(std::string("hyperparams: ") + e.what());
  }

  cfg.dynamics_model = get<std::string>(c, "model", "dynamics");
  cfg.cost_model = get<std::string>(c, "model", "cost");
  cfg.init_std = get<double>(c, "model", "init_std");
  cfg.hidden = get<Index>(c, "model", "hidden");
  cfg.cost_hidden = get<Index>(c, "model", "cost_hidden");
  cfg.cost_outputs = get<Index>(c, "model", "cost_outputs");
  cfg.control_weight = get<double>(c, "model", "control_weight");

  cfg.n_train = get<Index>(c, "data", "n_train");
  cfg.n_test = get<Index>(c, "data", "n_test");
  cfg.data_horizon = get<Index>(c, "data", "horizon");
  cfg.data_duration = get<double>(c, "data", "duration");
  cfg.sample_stride = get<Index>(c, "data", "sample_stride");

  const auto regime = get<std::string>(c, "training", "regime");
  cfg.epochs = get<int>(c, "training", "epochs");
  cfg.batch = get<Index>(c, "training", "batch");
  cfg.learning_rate = get<double>(c, "training", "learning_rate");
  cfg.ctrl_weight = get<double>(c, "training", "ctrl_weight");
  cfg.cost_weight = get<double>(c, "training", "cost_weight");
  cfg.pretrain_epochs = get<int>(c, "training", "pretrain_epochs");
  cfg.pretrain_batch = get<Index>(c, "training", "pretrain_batch");
  cfg.target_reduction = get<double>(c, "training", "target_reduction");

  cfg.eval_controller = get<std::string>(c, "evaluation", "controller");
  cfg.eval_runs = get<int>(c, "evaluation", "runs");
  cfg.eval_duration = get<double>(c, "evaluation", "duration");
  cfg.warm_iterations = get<Index>(c, "evaluation", "warm_iterations");

  cfg.gc_instances = get<int>(c, "gradcheck", "instances");
  cfg.gc_hp = cfg.hp;
  cfg.gc_hp.K = get<Index>(c, "gradcheck", "K");
  cfg.gc_hp.N = get<Index>(c, "gradcheck", "N");
  cfg.gc_hp.U = get<Index>(c, "gradcheck", "U");
  cfg.gc_hp.lambda = get<double>(c, "gradcheck", "lambda");
  cfg.gc_hp.sigma = get<double>(c, "gradcheck", "sigma");
  cfg.gc_step = get<double>(c, "gradcheck", "step");
  cfg.gc_tolerance = get<double>(c, "gradcheck", "tolerance");
  cfg.gc_abs_floor = get<double>(c, "gradcheck", "abs_floor");

  cfg.grid = get<Index>(c, "costmap", "grid");
  cfg.theta_max = get<double>(c, "costmap", "theta_max");
  cfg.theta_dot_max = get<double>(c, "costmap", "theta_dot_max");

  // Semantic checks.
  if (cfg.environment != "linear" && cfg.environment != "pendulum") {
    throw ValidationError("environment must be 'linear' or 'pendulum'");
  }
  if (cfg.linear()) {
    if (cfg.dynamics_model != "linear" || cfg.cost_model != "quadratic") {
      throw ValidationError(
          "the linear environment uses model.dynamics 'linear' and model.cost 'quadratic'");
    }
    if (regime != "open_loop") {
      throw ValidationError("the linear environment trains in the 'open_loop' regime");
    }
    cfg.regime = Regime::kOpenLoop;
    if (cfg.data_horizon != cfg.hp.N) {
      throw ValidationError("data.horizon must equal hyperparams.N for open-loop imitation");
    }
  } else {
    if ((cfg.dynamics_model != "mlp" && cfg.dynamics_model != "teacher") ||
        (cfg.cost_model != "mlp" && cfg.cost_model != "teacher")) {
      throw ValidationError(
          "pendulum models must be 'mlp' or 'teacher' (model.dynamics, model.cost)");
    }
    if (regime != "mpc") throw ValidationError("the pendulum environment trains in the 'mpc' regime");
    cfg.regime = Regime::kMpc;
  }
  if (cfg.init_std <= 0.0 || cfg.hidden < 1 || cfg.cost_hidden < 1 ||
      cfg.cost_outputs < 1 || !(cfg.control_weight > 0.0)) {
    throw ValidationError("model sizes, init_std and control_weight must be positive");
  }
  if (cfg.n_train < 1 || cfg.n_test < 0 || cfg.data_horizon < 1 ||
      !(cfg.data_duration > 0.0) || cfg.sample_stride < 1) {
    throw ValidationError("data: n_train >= 1, n_test >= 0, horizon >= 1, duration > 0, sample_stride >= 1");
  }
  if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.learning_rate > 0.0) ||
      cfg.ctrl_weight < 0.0 || cfg.cost_weight < 0.0 || cfg.pretrain_epochs < 0 ||
      cfg.pretrain_batch < 1 || cfg.target_reduction < 0.0) {
    throw ValidationError("training: invalid epochs, batch, learning rate or weights");
  }
  for (const auto& g : c["training"]["goals"]) {
    const Eigen::VectorXd v = vector_from_json(g);
    if (v.size() != cfg.state_dim()) {
      throw ValidationError("training.goals entries must have the state dimension");
    }
    cfg.goals.push_back(v);
  }
  if (cfg.cost_weight > 0.0 && cfg.goals.empty()) {
    throw ValidationError("training.cost_weight > 0 requires at least one goal");
  }
  cfg.frozen = frozen_from_json(c["training"]["frozen"], "training.frozen");
  cfg.gc_frozen = frozen_from_json(c["gradcheck"]["frozen"], "gradcheck.frozen");
  if (cfg.eval_controller != "pi" && cfg.eval_controller != "expert") {
    throw ValidationError("evaluation.controller must be 'pi' or 'expert'");
  }
  if (cfg.eval_runs < 0 || !(cfg.eval_duration > 0.0) || cfg.warm_iterations < 1) {
    throw ValidationError("evaluation: runs >= 0, duration > 0, warm_iterations >= 1");
  }
  if (cfg.gc_instances < 1 || !(cfg.gc_step > 0.0) || !(cfg.gc_tolerance > 0.0) ||
      cfg.gc_abs_floor < 0.0) {
    throw ValidationError("gradcheck: invalid instances, step or tolerance");
  }
  try {
    cfg.gc_hp.validate();
  } catch (const ParameterError& e) {
    throw ValidationError(std::string("gradcheck: ") + e.what());
  }
  if (cfg.grid < 2 || !(cfg.theta_max > 0.0) || !(cfg.theta_dot_max > 0.0)) {
    throw ValidationError("costmap: grid >= 2 and positive ranges");
  }
  return cfg;
}

struct CommonOptions {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::optional<std::string> environment;
  std::optional<unsigned> threads;
  bool force = false;
};

// Defaults of (environment, profile), overlaid with the config file, then
// with command-line overrides.
inline ExperimentConfig resolve_config(const CommonOptions& opt) {
  json user = json::object();
  if (opt.config) {
    user = read_json(*opt.config);
    if (!user.is_object()) throw ValidationError("configuration must be a JSON object");
  }
  auto pick = [&](const std::optional<std::string>& flag, const char* key,
                  const char* fallback) {
    if (flag) return *flag;
    if (user.contains(key)) {
      if (!user[key].is_string()) {
        throw ValidationError(std::string("configuration key '") + key + "' must be a string");
      }
      return user[key].get<std::string>();
    }
    return std::string(fallback);
  };
  const std::string env = pick(opt.environment, "environment", "pendulum");
  const std::string profile = pick(opt.profile, "profile", "desk");
  json resolved = default_config(env, profile);
  detail::check_known_keys(resolved, user, "");
  resolved.merge_patch(user);
  resolved["environment"] = env;
  resolved["profile"] = profile;
  if (opt.seed) resolved["seed"] = *opt.seed;
  if (opt.threads) resolved["threads"] = *opt.threads;
  return parse_config(resolved);
}

// Seed streams of the individual stages.
enum class Stream : std::uint64_t {
  kTeacher = 0x7445414348ULL,
  kData = 0x44415441ULL,
  kInit = 0x494E4954ULL,
  kEvalStarts = 0x5354415254ULL,
  kControl = 0x4354524CULL,
  kGradcheck = 0x47524144ULL,
  kSimulate = 0x53494DULL,
};

inline SeededRng stream_rng(const ExperimentConfig& cfg, Stream s) {
  return SeededRng(cfg.seed, static_cast<std::uint64_t>(s));
}

// -------------------------------- models ------------------------------------

using LinearModels = PiModels<LinearDynamics, QuadraticCost>;
using NeuralModels = PiModels<MLPDynamics, MLPCost>;
using FreezedModels = PiModels<MLPDynamics, PendulumTeacherCost>;
using TeacherCostLearner = PiModels<PendulumTeacherDynamics, MLPCost>;
using TeacherModels = PiModels<PendulumTeacherDynamics, PendulumTeacherCost>;
using AnyModels = std::variant<LinearModels, NeuralModels, FreezedModels,
                               TeacherCostLearner, TeacherModels>;

template <typename M>
inline constexpr bool kIsLinear = std::is_same_v<M, LinearModels>;

// Lower-triangular factor with entries ~ N(0, std); the diagonal is made
// positive by taking magnitudes.
inline ControlCostWeight random_control_weight(SeededRng& rng, Index m,
                                               double stddev) {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(m, m);
  for (Index r = 0; r < m; ++r) {
    for (Index c = 0; c <= r; ++c) {
      const double v = rng.normal(0.0, stddev);
      l(r, c) = r == c ? std::max(std::abs(v), 1e-12) : v;
    }
  }
  return ControlCostWeight(l);
}

// Freshly initialized internal models for cfg; deterministic in cfg.seed.
inline AnyModels make_models(const ExperimentConfig& cfg, const SeededRng& rng) {
  const double sqrt_r = std::sqrt(cfg.control_weight);
  const ControlCostWeight r_pend(Eigen::MatrixXd::Constant(1, 1, sqrt_r));
  auto mlp_dyn = [&] {
    MLPDynamics f(pendulum::kDt, cfg.hidden);
    SeededRng s = rng.substream(0);
    f.initialize(s);
    return f;
  };
  auto mlp_cost = [&] {
    MLPCost q(cfg.cost_hidden, cfg.cost_outputs);
    SeededRng s = rng.substream(1);
    q.initialize(s);
    return q;
  };
  if (cfg.linear()) {
    SeededRng s = rng.substream(2);
    auto [f, g] = sample_linear_dynamics(s);
    Eigen::MatrixXd q(4, 4);
    for (Index i = 0; i < 16; ++i) q(i / 4, i % 4) = s.normal(0.0, cfg.init_std);
    return LinearModels{LinearDynamics(f, g), QuadraticCost(q),
                        random_control_weight(s, 2, cfg.init_std)};
  }
  const bool learn_f = cfg.dynamics_model == "mlp";
  const bool learn_q = cfg.cost_model == "mlp";
  if (learn_f && learn_q) return NeuralModels{mlp_dyn(), mlp_cost(), r_pend};
  if (learn_f) return FreezedModels{mlp_dyn(), PendulumTeacherCost(), r_pend};
  if (learn_q) return TeacherCostLearner{PendulumTeacherDynamics(), mlp_cost(), r_pend};
  return TeacherModels{PendulumTeacherDynamics(), PendulumTeacherCost(), r_pend};
}

template <typename M>
json architecture_of(const M& m) {
  json a;
  using D = std::decay_t<decltype(m.dynamics)>;
  using C = std::decay_t<decltype(m.cost)>;
  a["state_dim"] = m.state_dim();
  a["control_dim"] = m.control_dim();
  if constexpr (std::is_same_v<D, LinearDynamics>) {
    a["dynamics"] = {{"type", "linear"}};
  } else if constexpr (std::is_same_v<D, MLPDynamics>) {
    a["dynamics"] = {{"type", "mlp"},
                     {"activation", "tanh"},
                     {"inputs", "theta,theta_dot,u"},
                     {"hidden", m.dynamics.hidden_dim()},
                     {"integrator", "euler"},
                     {"dt", m.dynamics.dt()}};
  } else {
    a["dynamics"] = {{"type", "teacher"}, {"dt", m.dynamics.dt()}};
  }
  if constexpr (std::is_same_v<C, QuadraticCost>) {
    a["cost"] = {{"type", "quadratic"}};
  } else if constexpr (std::is_same_v<C, MLPCost>) {
    a["cost"] = {{"type", "mlp"},
                 {"activation", "tanh"},
                 {"inputs", "theta,theta_dot"},
                 {"hidden", m.cost.hidden_dim()},
                 {"outputs", m.cost.output_dim()}};
  } else {
    a["cost"] = {{"type", "teacher"}};
  }
  a["control_weight"] = {{"type", "cholesky_log_diagonal"},
                         {"dim", m.control_dim()}};
  return a;
}

inline AnyModels models_from_architecture(const json& a) {
  try {
    const auto dyn = a.at("dynamics").at("type").get<std::string>();
    const auto cost = a.at("cost").at("type").get<std::string>();
    const Index m = a.at("control_dim").get<Index>();
    const ControlCostWeight r(Eigen::MatrixXd::Identity(m, m));
    if (dyn == "linear" && cost == "quadratic") {
      const Index n = a.at("state_dim").get<Index>();
      return LinearModels{
          LinearDynamics(Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, m)),
          QuadraticCost(Eigen::MatrixXd::Zero(n, n)), r};
    }
    auto mlp_dyn = [&] {
      return MLPDynamics(a.at("dynamics").at("dt").get<double>(),
                         a.at("dynamics").at("hidden").get<Index>());
    };
    auto mlp_cost = [&] {
      return MLPCost(a.at("cost").at("hidden").get<Index>(),
                     a.at("cost").at("outputs").get<Index>());
    };
    auto teacher_dyn = [&] {
      return PendulumTeacherDynamics(a.at("dynamics").at("dt").get<double>());
    };
    if (dyn == "mlp" && cost == "mlp") return NeuralModels{mlp_dyn(), mlp_cost(), r};
    if (dyn == "mlp" && cost == "teacher") {
      return FreezedModels{mlp_dyn(), PendulumTeacherCost(), r};
    }
    if (dyn == "teacher" && cost == "mlp") {
      return TeacherCostLearner{teacher_dyn(), mlp_cost(), r};
    }
    if (dyn == "teacher" && cost == "teacher") {
      return TeacherModels{teacher_dyn(), PendulumTeacherCost(), r};
    }
    throw ValidationError("unsupported model combination " + dyn + "/" + cost);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint architecture: ") + e.what());
  }
}

inline ParamVector pack_any(const AnyModels& models) {
  return std::visit([](const auto& m) { return m.pack(); }, models);
}

inline Index trainable_parameter_count(const AnyModels& models,
                                       const FrozenSet& frozen) {
  const ParamVector pv = pack_any(models);
  Index n = 0;
  for (const auto& s : pv.layout) {
    if (!frozen.contains(s.id)) n += s.length;
  }
  return n;
}

// ------------------------------ checkpoints ---------------------------------

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "picontrol-checkpoint";

struct Checkpoint {
  std::string environment;
  AnyModels models;
  PIHyperParams hp;
  FrozenSet frozen;
  ResumeState resume;
  std::vector<EpochRecord> history;
};

inline json optimizer_json(const OptimizerState& s) {
  return {{"learning_rate", s.learning_rate},
          {"decay", s.decay},
          {"epsilon", s.epsilon},
          {"epochs_since_improvement", s.epochs_since_improvement},
          {"best_loss", number_or_null(s.best_loss)},
          {"plateau_patience", s.plateau_patience},
          {"plateau_factor", s.plateau_factor},
          {"second_moment", vector_json(s.second_moment)}};
}

inline OptimizerState optimizer_from_json(const json& j) {
  OptimizerState s;
  s.learning_rate = j.at("learning_rate").get<double>();
  s.decay = j.at("decay").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.epochs_since_improvement = j.at("epochs_since_improvement").get<int>();
  s.best_loss = number_or(j.at("best_loss"), std::numeric_limits<double>::infinity());
  s.plateau_patience = j.at("plateau_patience").get<int>();
  s.plateau_factor = j.at("plateau_factor").get<double>();
  s.second_moment = vector_from_json(j.at("second_moment"));
  return s;
}

inline json hyperparams_json(const PIHyperParams& hp) {
  return {{"lambda", hp.lambda}, {"nu", hp.nu}, {"sigma", hp.sigma},
          {"K", hp.K},           {"N", hp.N},   {"U", hp.U}};
}

inline json epoch_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"learning_rate", r.learning_rate},
          {"train_ctrl", number_or_null(r.train_ctrl)},
          {"train_cost", number_or_null(r.train_cost)},
          {"train_dyn", number_or_null(r.train_dyn)},
          {"test_ctrl", number_or_null(r.test_ctrl)},
          {"test_cost", number_or_null(r.test_cost)},
          {"test_dyn", number_or_null(r.test_dyn)}};
}

inline EpochRecord epoch_from_json(const json& j) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.train_ctrl = number_or(j.at("train_ctrl"), nan);
  r.train_cost = number_or(j.at("train_cost"), nan);
  r.train_dyn = number_or(j.at("train_dyn"), nan);
  r.test_ctrl = number_or(j.at("test_ctrl"), nan);
  r.test_cost = number_or(j.at("test_cost"), nan);
  r.test_dyn = number_or(j.at("test_dyn"), nan);
  return r;
}

inline json checkpoint_json(const Checkpoint& ck) {
  json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["environment"] = ck.environment;
  j["architecture"] =
      std::visit([](const auto& m) { return architecture_of(m); }, ck.models);
  j["hyperparams"] = hyperparams_json(ck.hp);
  const ParamVector pv = pack_any(ck.models);
  json layout = json::array();
  for (const auto& s : pv.layout) {
    layout.push_back({{"id", s.id}, {"offset", s.offset}, {"length", s.length}});
  }
  j["layout"] = layout;
  j["values"] = vector_json(pv.values);
  j["frozen"] = json(std::vector<std::string>(ck.frozen.begin(), ck.frozen.end()));
  j["training"] = {{"next_epoch", ck.resume.next_epoch},
                   {"best_epoch", ck.resume.best_epoch},
                   {"best_loss", number_or_null(ck.resume.best_loss)},
                   {"optimizer", optimizer_json(ck.resume.optimizer)}};
  json hist = json::array();
  for (const auto& r : ck.history) hist.push_back(epoch_json(r));
  j["history"] = hist;
  return j;
}

inline void write_checkpoint(const fs::path& p, const Checkpoint& ck) {
  write_json(p, checkpoint_json(ck));
}

inline Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat) {
    throw ValidationError("not a picontrol checkpoint");
  }
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw ValidationError("incompatible checkpoint version " + std::to_string(version) +
                          " (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  try {
    Checkpoint ck{j.at("environment").get<std::string>(),
                  models_from_architecture(j.at("architecture")),
                  {}, {}, {}, {}};
    const json& hp = j.at("hyperparams");
    ck.hp.lambda = hp.at("lambda").get<double>();
    ck.hp.nu = hp.at("nu").get<double>();
    ck.hp.sigma = hp.at("sigma").get<double>();
    ck.hp.K = hp.at("K").get<Index>();
    ck.hp.N = hp.at("N").get<Index>();
    ck.hp.U = hp.at("U").get<Index>();
    ParamVector pv;
    for (const auto& s : j.at("layout")) {
      pv.layout.push_back(ParamSegment{s.at("id").get<std::string>(),
                                       s.at("offset").get<Index>(),
                                       s.at("length").get<Index>()});
    }
    pv.values = vector_from_json(j.at("values"));
    std::visit([&](auto& m) { m.unpack(pv); }, ck.models);
    ck.frozen = frozen_from_json(j.at("frozen"), "checkpoint frozen");
    const json& t = j.at("training");
    ck.resume.next_epoch = t.at("next_epoch").get<int>();
    ck.resume.best_epoch = t.at("best_epoch").get<int>();
    ck.resume.best_loss =
        number_or(t.at("best_loss"), std::numeric_limits<double>::infinity());
    ck.resume.optimizer = optimizer_from_json(t.at("optimizer"));
    for (const auto& r : j.at("history")) ck.history.push_back(epoch_from_json(r));
    return ck;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw ValidationError(std::string("checkpoint layout: ") + e.what());
  }
}

inline Checkpoint read_checkpoint(const fs::path& p) {
  return checkpoint_from_json(read_json(p));
}

// ------------------------------- datasets -----------------------------------

constexpr int kDatasetVersion = 1;

struct Dataset {
  std::string environment;
  json manifest;
  std::vector<OpenLoopSample> open_loop_train;
  std::vector<OpenLoopSample> open_loop_test;
  std::vector<MPCSample> mpc_train;
  std::vector<MPCSample> mpc_test;
  std::optional<LinearTeacher> teacher;
};

inline std::string open_loop_csv(const std::vector<OpenLoopSample>& samples,
                                 Index n, Index N, Index m) {
  std::ostringstream os;
  os << "sample";
  for (Index i = 0; i < n; ++i) os << ",x0_" << i;
  for (Index t = 0; t < N; ++t) {
    for (Index j = 0; j < m; ++j) os << ",u" << t << '_' << j;
  }
  os << '\n';
  for (std::size_t s = 0; s < samples.size(); ++s) {
    os << s;
    for (Index i = 0; i < n; ++i) os << ',' << fmt(samples[s].x0(i));
    for (Index t = 0; t < N; ++t) {
      for (Index j = 0; j < m; ++j) os << ',' << fmt(samples[s].controls(t, j));
    }
    os << '\n';
  }
  return os.str();
}

inline std::vector<OpenLoopSample> open_loop_from_csv(const std::string& text,
                                                      Index n, Index N, Index m) {
  std::vector<OpenLoopSample> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (static_cast<Index>(cells.size()) != 1 + n + N * m) {
      throw ValidationError("open-loop dataset row has " + std::to_string(cells.size()) +
                            " cells, expected " + std::to_string(1 + n + N * m));
    }
    OpenLoopSample s;
    s.x0.resize(n);
    s.controls.resize(N, m);
    for (Index i = 0; i < n; ++i) s.x0(i) = parse_double(cells[static_cast<std::size_t>(1 + i)]);
    for (Index t = 0; t < N; ++t) {
      for (Index j = 0; j < m; ++j) {
        s.controls(t, j) = parse_double(cells[static_cast<std::size_t>(1 + n + t * m + j)]);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string mpc_csv(const std::vector<SimulationResult>& runs) {
  std::ostringstream os;
  os << "run,step,theta,theta_dot,u,theta_next,theta_dot_next\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto samples = transitions(runs[r]);
    for (std::size_t t = 0; t < samples.size(); ++t) {
      const auto& s = samples[t];
      os << r << ',' << t << ',' << fmt(s.x(0)) << ',' << fmt(s.x(1)) << ','
         << fmt(s.u(0)) << ',' << fmt(s.x_next(0)) << ',' << fmt(s.x_next(1))
         << '\n';
    }
  }
  return os.str();
}

inline std::vector<MPCSample> mpc_from_csv(const std::string& text) {
  std::vector<MPCSample> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 7) throw ValidationError("MPC dataset rows need 7 cells");
    MPCSample s;
    s.x = StateVec(2);
    s.x << parse_double(c[2]), parse_double(c[3]);
    s.u = ControlVec::Constant(1, parse_double(c[4]));
    s.x_next = StateVec(2);
    s.x_next << parse_double(c[5]), parse_double(c[6]);
    out.push_back(std::move(s));
  }
  return out;
}

inline Dataset read_dataset(const fs::path& dir) {
  Dataset d;
  d.manifest = read_json(dir / "manifest.json");
  try {
    if (d.manifest.at("format").get<std::string>() != "picontrol-dataset" ||
        d.manifest.at("version").get<int>() != kDatasetVersion) {
      throw ValidationError("unsupported dataset format in " + dir.string());
    }
    d.environment = d.manifest.at("environment").get<std::string>();
    const std::string train = read_text(dir / d.manifest.at("train_file").get<std::string>());
    const std::string test = read_text(dir / d.manifest.at("test_file").get<std::string>());
    if (d.environment == "linear") {
      const json& t = d.manifest.at("teacher");
      LinearTeacher teacher;
      teacher.F = matrix_from_json(t.at("F"), "teacher F");
      teacher.G = matrix_from_json(t.at("G"), "teacher G");
      teacher.Q = matrix_from_json(t.at("Q"), "teacher Q");
      teacher.R = matrix_from_json(t.at("R"), "teacher R");
      d.teacher = teacher;
      const Index N = d.manifest.at("horizon").get<Index>();
      d.open_loop_train = open_loop_from_csv(train, 4, N, 2);
      d.open_loop_test = open_loop_from_csv(test, 4, N, 2);
    } else {
      d.mpc_train = mpc_from_csv(train);
      d.mpc_test = mpc_from_csv(test);
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed dataset manifest: " + std::string(e.what()));
  }
  return d;
}

template <typename T>
std::vector<T> strided(const std::vector<T>& v, Index stride) {
  if (stride <= 1) return v;
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); i += static_cast<std::size_t>(stride)) {
    out.push_back(v[i]);
  }
  return out;
}

// ------------------------------ evaluation ----------------------------------

struct MetricsReport {
  std::string controller;
  std::optional<double> mse_train;
  std::optional<double> mse_test;
  std::optional<double> success_rate;
  std::optional<double> mean_trajectory_cost;
  std::vector<double> trajectory_costs;
  std::vector<bool> successes;
  std::optional<Index> trainable_params;
  std::optional<Index> reference_params;
  json extra = json::object();
  double wall_time = 0.0;  // never serialized
};

inline json to_json(const MetricsReport& r) {
  auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
  json j;
  j["controller"] = r.controller;
  j["mse_train"] = r.mse_train ? number_or_null(*r.mse_train) : json(nullptr);
  j["mse_test"] = r.mse_test ? number_or_null(*r.mse_test) : json(nullptr);
  j["success_rate"] = opt(r.success_rate);
  j["mean_trajectory_cost"] = opt(r.mean_trajectory_cost);
  j["runs"] = r.trajectory_costs.size();
  j["trajectory_costs"] = r.trajectory_costs;
  j["successes"] = r.successes;
  j["trainable_params"] = opt(r.trainable_params);
  j["reference_params"] = opt(r.reference_params);
  for (auto it = r.extra.begin(); it != r.extra.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline void summarize_runs(MetricsReport& rep,
                           const std::vector<SimulationResult>& runs) {
  rep.trajectory_costs.clear();
  rep.successes.clear();
  if (runs.empty()) return;
  double total = 0.0;
  int ok = 0;
  for (const auto& r : runs) {
    rep.trajectory_costs.push_back(r.trajectory_cost);
    rep.successes.push_back(r.success);
    total += r.trajectory_cost;
    ok += r.success ? 1 : 0;
  }
  rep.success_rate = static_cast<double>(ok) / static_cast<double>(runs.size());
  rep.mean_trajectory_cost = total / static_cast<double>(runs.size());
}

inline StateVec evaluation_start(const ExperimentConfig& cfg, int run) {
  SeededRng s = stream_rng(cfg, Stream::kEvalStarts).substream(static_cast<std::uint64_t>(run));
  return sample_pendulum_start(s);
}

// Expert iLQR MPC on the true pendulum from the evaluation start states.
inline std::vector<SimulationResult> run_expert(const ExperimentConfig& cfg) {
  std::vector<SimulationResult> runs(static_cast<std::size_t>(cfg.eval_runs));
  parallel_for(cfg.eval_runs, [&](Index r) {
    auto expert = make_pendulum_expert(cfg.data_horizon);
    runs[static_cast<std::size_t>(r)] =
        mpc_simulate(expert, PendulumPlant(), evaluation_start(cfg, static_cast<int>(r)),
                     cfg.eval_duration, true);
  });
  return runs;
}

// Path-integral MPC with the given internal models on the true pendulum.
inline std::vector<SimulationResult> run_pi(const ExperimentConfig& cfg,
                                            const AnyModels& models,
                                            const PIHyperParams& hp,
                                            std::ostream* log = nullptr) {
  std::vector<SimulationResult> runs;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (kIsLinear<M>) {
          throw ValidationError("closed-loop evaluation needs pendulum models");
        } else {
          for (int r = 0; r < cfg.eval_runs; ++r) {
            PiMpcController controller(
                m, hp, cfg.warm_iterations,
                stream_rng(cfg, Stream::kControl).substream(static_cast<std::uint64_t>(r)));
            runs.push_back(mpc_simulate(controller, PendulumPlant(),
                                        evaluation_start(cfg, r), cfg.eval_duration, true));
            if (log) {
              *log << "run " << r << ": success " << runs.back().success << " cost "
                   << runs.back().trajectory_cost << " (" << runs.back().wall_time
                   << " s)\n";
            }
          }
        }
      },
      models);
  return runs;
}

// Mean control loss of the models' PI-Net on each split (absent when the
// split is empty).
inline std::pair<std::optional<double>, std::optional<double>> dataset_mse(
    const ExperimentConfig& cfg, const AnyModels& models, const PIHyperParams& hp,
    const Dataset& data) {
  const SeededRng eval_rng = SeededRng(cfg.seed, 0x545241494EULL).substream(kEvalStream);
  std::optional<double> tr;
  std::optional<double> te;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (kIsLinear<M>) {
          if (!data.open_loop_train.empty()) {
            tr = mean_ctrl_loss(m, hp, std::span<const OpenLoopSample>(data.open_loop_train), eval_rng);
          }
          if (!data.open_loop_test.empty()) {
            te = mean_ctrl_loss(m, hp, std::span<const OpenLoopSample>(data.open_loop_test),
                                eval_rng.substream(1u << 31));
          }
        } else {
          const auto train = strided(data.mpc_train, cfg.sample_stride);
          const auto test = strided(data.mpc_test, cfg.sample_stride);
          if (!train.empty()) tr = mean_ctrl_loss(m, hp, std::span<const MPCSample>(train), eval_rng);
          if (!test.empty()) {
            te = mean_ctrl_loss(m, hp, std::span<const MPCSample>(test),
                                eval_rng.substream(1u << 31));
          }
        }
      },
      models);
  return {tr, te};
}

// Parameter counts of the pendulum rows of the published comparison.
inline std::optional<Index> reference_param_count(const AnyModels& models) {
  if (std::holds_alternative<NeuralModels>(models)) return 242;
  if (std::holds_alternative<FreezedModels>(models)) return 49;
  return std::nullopt;
}

// ------------------------------ gradient check ------------------------------

struct GradcheckEntry {
  int instance = 0;
  std::string segment;
  Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double abs_error = 0.0;
  double rel_error = 0.0;
  bool frozen = false;
  bool failed = false;
};

// Compares pi_net_backward with central differences of <cot, forward(theta)>
// for every coordinate of the models' parameters. Noise is frozen by reusing
// the same seeded stream for every forward pass.
template <DynamicsModel Dyn, StateCostModel Cost>
std::vector<GradcheckEntry> gradcheck_instance(
    const PiModels<Dyn, Cost>& models, const PIHyperParams& hp,
    const StateVec& x0, const ControlSequence& init, const ControlSequence& cot,
    const SeededRng& rng, const FrozenSet& frozen, double step, double tolerance,
    double abs_floor, int instance = 0) {
  ForwardResult fw = pi_net_forward(x0, init, models, hp, rng, true);
  const ParamVector grad = pi_net_backward(*fw.tape, models, cot, frozen);
  const ParamVector base = models.pack();
  std::vector<GradcheckEntry> out;
  for (const auto& seg : base.layout) {
    const bool is_frozen = frozen.contains(seg.id);
    for (Index i = 0; i < seg.length; ++i) {
      GradcheckEntry e;
      e.instance = instance;
      e.segment = seg.id;
      e.index = i;
      e.analytic = grad.values(seg.offset + i);
      e.frozen = is_frozen;
      if (is_frozen) {
        e.abs_error = std::abs(e.analytic);
        e.failed = e.analytic != 0.0;
        out.push_back(e);
        continue;
      }
      auto objective = [&](double delta) {
        PiModels<Dyn, Cost> probe = models;
        ParamVector p = base;
        p.values(seg.offset + i) += delta;
        probe.unpack(p);
        const ControlSequence u = pi_net_forward(x0, init, probe, hp, rng, false).controls;
        return (u.array() * cot.array()).sum();
      };
      e.numeric = (objective(step) - objective(-step)) / (2.0 * step);
      e.abs_error = std::abs(e.analytic - e.numeric);
      const double scale = std::max(std::abs(e.analytic), std::abs(e.numeric));
      e.rel_error = scale > 0.0 ? e.abs_error / scale : 0.0;
      e.failed = !(e.abs_error <= abs_floor || e.rel_error <= tolerance);
      out.push_back(e);
    }
  }
  return out;
}

struct GradcheckReport {
  bool passed = true;
  int instances = 0;
  double tolerance = 0.0;
  double abs_floor = 0.0;
  std::vector<GradcheckEntry> entries;
};

inline json to_json(const GradcheckReport& r, std::size_t worst_count = 10) {
  json j;
  j["passed"] = r.passed;
  j["instances"] = r.instances;
  j["tolerance"] = r.tolerance;
  j["abs_floor"] = r.abs_floor;
  std::map<std::string, json> segs;
  std::vector<std::string> order;
  for (const auto& e : r.entries) {
    if (!segs.contains(e.segment)) {
      order.push_back(e.segment);
      segs[e.segment] = {{"coordinates", 0},
                         {"frozen", e.frozen},
                         {"max_rel_error", 0.0},
                         {"max_abs_error", 0.0},
                         {"failures", 0}};
    }
    json& s = segs[e.segment];
    s["coordinates"] = s["coordinates"].get<int>() + 1;
    s["max_rel_error"] = std::max(s["max_rel_error"].get<double>(), e.rel_error);
    s["max_abs_error"] = std::max(s["max_abs_error"].get<double>(), e.abs_error);
    if (e.failed) s["failures"] = s["failures"].get<int>() + 1;
  }
  json seg_json = json::object();
  for (const auto& id : order) {
    json s = segs[id];
    if (s["frozen"].get<bool>()) s["exact_zero"] = s["max_abs_error"].get<double>() == 0.0;
    seg_json[id] = s;
  }
  j["segments"] = seg_json;
  // Worst coordinates: failures first, then by relative error.
  std::vector<const GradcheckEntry*> ranked;
  for (const auto& e : r.entries) ranked.push_back(&e);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto* a, const auto* b) {
    if (a->failed != b->failed) return a->failed;
    return a->rel_error > b->rel_error;
  });
  json worst = json::array();
  for (std::size_t i = 0; i < std::min(worst_count, ranked.size()); ++i) {
    const auto& e = *ranked[i];
    worst.push_back({{"instance", e.instance},
                     {"segment", e.segment},
                     {"index", e.index},
                     {"analytic", e.analytic},
                     {"numeric", e.numeric},
                     {"abs_error", e.abs_error},
                     {"rel_error", e.rel_error},
                     {"failed", e.failed}});
  }
  j["worst"] = worst;
  return j;
}

// Random models of the configured family with every parameter perturbed, a
// random start, initial plan and output cotangent per instance.
inline GradcheckReport run_gradcheck(const ExperimentConfig& cfg) {
  GradcheckReport rep;
  rep.instances = cfg.gc_instances;
  rep.tolerance = cfg.gc_tolerance;
  rep.abs_floor = cfg.gc_abs_floor;
  const SeededRng root = stream_rng(cfg, Stream::kGradcheck);
  for (int inst = 0; inst < cfg.gc_instances; ++inst) {
    const SeededRng irng = root.substream(static_cast<std::uint64_t>(inst));
    AnyModels models = make_models(cfg, irng.substream(0));
    SeededRng s = irng.substream(1);
    ParamVector pv = pack_any(models);
    for (const auto& seg : pv.layout) {
      const double scale = seg.id == "control_weight" ? 0.2 : 0.3;
      for (Index i = 0; i < seg.length; ++i) pv.values(seg.offset + i) += s.normal(0.0, scale);
    }
    std::visit([&](auto& m) { m.unpack(pv); }, models);
    const Index n = cfg.state_dim();
    const Index m = cfg.control_dim();
    StateVec x0(n);
    for (Index i = 0; i < n; ++i) x0(i) = s.normal();
    ControlSequence init(cfg.gc_hp.N, m);
    ControlSequence cot(cfg.gc_hp.N, m);
    for (Index i = 0; i < init.size(); ++i) init(i) = s.normal(0.0, 0.3);
    for (Index i = 0; i < cot.size(); ++i) cot(i) = s.normal();
    std::visit(
        [&](const auto& mm) {
          auto e = gradcheck_instance(mm, cfg.gc_hp, x0, init, cot, irng.substream(2),
                                      cfg.gc_frozen, cfg.gc_step, cfg.gc_tolerance,
                                      cfg.gc_abs_floor, inst);
          rep.entries.insert(rep.entries.end(), e.begin(), e.end());
        },
        models);
  }
  for (const auto& e : rep.entries) rep.passed = rep.passed && !e.failed;
  return rep;
}

// ------------------------------- cost map -----------------------------------

struct CostMap {
  Index grid = 0;
  std::vector<double> theta;
  std::vector<double> theta_dot;
  Eigen::MatrixXd q;  // q(i, j) at (theta[i], theta_dot[j])

  std::pair<Index, Index> argmin() const {
    Index bi = 0;
    Index bj = 0;
    q.minCoeff(&bi, &bj);
    return {bi, bj};
  }
};

template <StateCostModel Cost>
CostMap evaluate_costmap(const Cost& cost, Index grid, double theta_max,
                         double theta_dot_max) {
  if (grid < 2) throw ValidationError("cost-map grid needs at least 2 points per axis");
  CostMap map;
  map.grid = grid;
  for (Index i = 0; i < grid; ++i) {
    const double a = static_cast<double>(i) / static_cast<double>(grid - 1);
    map.theta.push_back(-theta_max + 2.0 * theta_max * a);
    map.theta_dot.push_back(-theta_dot_max + 2.0 * theta_dot_max * a);
  }
  // The end points are placed exactly so that the goal angles are on-grid.
  map.theta.back() = theta_max;
  map.theta_dot.back() = theta_dot_max;
  if (grid % 2 == 1) map.theta_dot[static_cast<std::size_t>(grid / 2)] = 0.0;
  map.q.resize(grid, grid);
  for (Index i = 0; i < grid; ++i) {
    for (Index j = 0; j < grid; ++j) {
      StateVec x(2);
      x << map.theta[static_cast<std::size_t>(i)], map.theta_dot[static_cast<std::size_t>(j)];
      map.q(i, j) = cost.running(x);
    }
  }
  return map;
}

inline std::string costmap_csv(const CostMap& map) {
  std::ostringstream os;
  os << "theta,theta_dot,q\n";
  for (Index i = 0; i < map.grid; ++i) {
    for (Index j = 0; j < map.grid; ++j) {
      os << fmt(map.theta[static_cast<std::size_t>(i)]) << ','
         << fmt(map.theta_dot[static_cast<std::size_t>(j)]) << ',' << fmt(map.q(i, j))
         << '\n';
    }
  }
  return os.str();
}

// ------------------------------- commands -----------------------------------

struct CommandContext {
  std::ostream& out = std::cout;  // final reports
  std::ostream& log = std::cerr;  // progress and wall times
};

inline void apply_threads(const ExperimentConfig& cfg) { set_thread_count(cfg.threads); }

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline json run_summary_json(const std::vector<SimulationResult>& runs,
                             const std::vector<StateVec>& starts) {
  json a = json::array();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    a.push_back({{"run", r},
                 {"x0", vector_json(starts[r])},
                 {"success", runs[r].success},
                 {"trajectory_cost", runs[r].trajectory_cost}});
  }
  return a;
}

inline int cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir,
                        bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  OutputDir out(out_dir, {"manifest.json", "train.csv", "test.csv", "resolved_config.json"},
                force);
  write_json(out / "resolved_config.json", cfg.resolved);
  const auto t0 = std::chrono::steady_clock::now();
  json manifest;
  manifest["format"] = "picontrol-dataset";
  manifest["version"] = kDatasetVersion;
  manifest["environment"] = cfg.environment;
  manifest["experiment_id"] = cfg.experiment_id;
  manifest["seed"] = cfg.seed;
  manifest["train_file"] = "train.csv";
  manifest["test_file"] = "test.csv";
  if (cfg.linear()) {
    SeededRng trng = stream_rng(cfg, Stream::kTeacher);
    const LinearTeacher teacher = sample_linear_teacher(trng);
    SeededRng drng = stream_rng(cfg, Stream::kData);
    const LinearDataset d =
        build_linear_dataset(teacher, drng, cfg.n_train, cfg.n_test, cfg.data_horizon);
    write_text(out / "train.csv", open_loop_csv(d.train, 4, cfg.data_horizon, 2));
    write_text(out / "test.csv", open_loop_csv(d.test, 4, cfg.data_horizon, 2));
    manifest["n_train"] = d.train.size();
    manifest["n_test"] = d.test.size();
    manifest["horizon"] = cfg.data_horizon;
    manifest["teacher"] = {{"dt", LinearTeacher::kDt},
                           {"F", matrix_json(teacher.F)},
                           {"G", matrix_json(teacher.G)},
                           {"Q", matrix_json(teacher.Q)},
                           {"R", matrix_json(teacher.R)}};
  } else {
    const PendulumDataset d =
        build_pendulum_dataset(stream_rng(cfg, Stream::kData), static_cast<int>(cfg.n_train),
                               static_cast<int>(cfg.n_test), cfg.data_duration,
                               cfg.data_horizon);
    write_text(out / "train.csv", mpc_csv(d.train_runs));
    write_text(out / "test.csv", mpc_csv(d.test_runs));
    auto runs_json = [](const std::vector<SimulationResult>& runs) {
      json a = json::array();
      for (std::size_t r = 0; r < runs.size(); ++r) {
        a.push_back({{"run", r},
                     {"x0", vector_json(runs[r].states.row(0).transpose())},
                     {"success", runs[r].success},
                     {"trajectory_cost", runs[r].trajectory_cost}});
      }
      return a;
    };
    manifest["n_train"] = d.train_runs.size();
    manifest["n_test"] = d.test_runs.size();
    manifest["train_samples"] = d.train.size();
    manifest["test_samples"] = d.test.size();
    manifest["excluded_runs"] = d.excluded;
    manifest["horizon"] = cfg.data_horizon;
    manifest["duration"] = cfg.data_duration;
    manifest["teacher"] = {{"gain", pendulum::kGain},
                           {"dt", pendulum::kDt},
                           {"control_weight", PendulumTeacherCost::kControlWeight},
                           {"cost", "(1 + cos theta)^2 + theta_dot^2"}};
    manifest["expert_runs"] = {{"train", runs_json(d.train_runs)},
                               {"test", runs_json(d.test_runs)}};
    // The evaluation protocol applied to the expert, so that `eval` with
    // the expert controller can be checked against the manifest.
    MetricsReport rep;
    rep.controller = "expert";
    summarize_runs(rep, run_expert(cfg));
    manifest["expert_evaluation"] = to_json(rep);
  }
  write_json(out / "manifest.json", manifest);
  ctx.log << "gen-data: wrote " << out.path() << " in " << seconds_since(t0) << " s\n";
  return kExitOk;
}

inline Dataset load_matching_dataset(const ExperimentConfig& cfg, const fs::path& dir) {
  Dataset d = read_dataset(dir);
  if (d.environment != cfg.environment) {
    throw ValidationError("dataset " + dir.string() + " is for the " + d.environment +
                          " environment but the configuration is " + cfg.environment);
  }
  if (cfg.linear() && d.manifest.at("horizon").get<Index>() != cfg.hp.N) {
    throw ValidationError("dataset horizon differs from hyperparams.N");
  }
  return d;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  os << "epoch,learning_rate,train_ctrl,train_cost,train_dyn,test_ctrl,test_cost,test_dyn\n";
  for (const auto& r : h) {
    os << r.epoch << ',' << fmt(r.learning_rate) << ',' << fmt(r.train_ctrl) << ','
       << fmt(r.train_cost) << ',' << fmt(r.train_dyn) << ',' << fmt(r.test_ctrl) << ','
       << fmt(r.test_cost) << ',' << fmt(r.test_dyn) << '\n';
  }
  return os.str();
}

struct TrainOptions {
  fs::path data;
  std::optional<fs::path> resume;
};

inline int cmd_train(const ExperimentConfig& cfg, const TrainOptions& topt,
                     const fs::path& out_dir, bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  OutputDir out(out_dir,
                {"resolved_config.json", "history.csv", "pretrain_history.csv",
                 "checkpoint.json", "checkpoint_last.json", "metrics.json"},
                force);
  write_json(out / "resolved_config.json", cfg.resolved);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = load_matching_dataset(cfg, topt.data);

  Checkpoint state{cfg.environment, make_models(cfg, stream_rng(cfg, Stream::kInit)),
                   cfg.hp, cfg.frozen, {}, {}};
  json extra = json::object();
  if (topt.resume) {
    Checkpoint prev = read_checkpoint(*topt.resume);
    if (prev.environment != cfg.environment) {
      throw ValidationError("resume checkpoint is for a different environment");
    }
    const ParamVector want = pack_any(state.models);
    if (!pack_any(prev.models).same_layout(want) || prev.models.index() != state.models.index()) {
      throw ValidationError("resume checkpoint architecture differs from the configuration");
    }
    state.models = std::move(prev.models);
    state.resume = prev.resume;
    state.history = std::move(prev.history);
    ctx.log << "train: resuming at epoch " << state.resume.next_epoch << '\n';
  } else if (!cfg.linear() && cfg.dynamics_model == "mlp" && cfg.pretrain_epochs > 0) {
    PretrainConfig pc;
    pc.epochs = cfg.pretrain_epochs;
    pc.batch = cfg.pretrain_batch;
    pc.learning_rate = cfg.learning_rate;
    pc.seed = cfg.seed;
    std::visit(
        [&](auto& m) {
          using D = std::decay_t<decltype(m.dynamics)>;
          if constexpr (std::is_same_v<D, MLPDynamics>) {
            const PretrainResult pr = pretrain_dynamics(
                m.dynamics, std::span<const MPCSample>(data.mpc_train),
                std::span<const MPCSample>(data.mpc_test), pc);
            write_text(out / "pretrain_history.csv", history_csv(pr.history));
            extra["pretrain_train_dyn"] = number_or_null(pr.train_loss);
            extra["pretrain_test_dyn"] = number_or_null(pr.test_loss);
            ctx.log << "pretrain: train L_dyn " << pr.train_loss << ", test L_dyn "
                    << pr.test_loss << '\n';
          }
        },
        state.models);
  }

  TrainConfig tc;
  tc.regime = cfg.regime;
  tc.epochs = cfg.epochs;
  tc.batch = cfg.batch;
  tc.learning_rate = cfg.learning_rate;
  tc.ctrl_weight = cfg.ctrl_weight;
  tc.cost_weight = cfg.cost_weight;
  tc.goals = cfg.goals;
  tc.frozen = cfg.frozen;
  tc.memory_budget = cfg.memory_budget;
  tc.seed = cfg.seed;

  const Index trainable = trainable_parameter_count(state.models, cfg.frozen);
  std::optional<double> initial_test;
  const bool do_train = cfg.epochs > state.resume.next_epoch && trainable > 0;

  std::visit(
      [&](auto& m) {
        using M = std::decay_t<decltype(m)>;
        using Sample = std::conditional_t<kIsLinear<M>, OpenLoopSample, MPCSample>;
        std::vector<Sample> train;
        std::vector<Sample> test;
        if constexpr (kIsLinear<M>) {
          train = data.open_loop_train;
          test = data.open_loop_test;
        } else {
          train = strided(data.mpc_train, cfg.sample_stride);
          test = strided(data.mpc_test, cfg.sample_stride);
        }
        const SeededRng eval_rng = SeededRng(cfg.seed, 0x545241494EULL).substream(kEvalStream);
        if (!test.empty() && !topt.resume) {
          initial_test = mean_ctrl_loss(m, cfg.hp, std::span<const Sample>(test),
                                        eval_rng.substream(1u << 31));
          ctx.log << "train: initial test L_ctrl " << *initial_test << '\n';
        }
        if (!do_train) return;
        // Refuse before any work if the tape would not fit.
        check_memory_budget(cfg.hp, m.state_dim(), m.control_dim(), cfg.batch,
                            cfg.memory_budget);
        TrainCallbacks cb;
        cb.on_epoch = [&](const EpochRecord& rec, const TrainResult& res) {
          state.history.push_back(rec);
          state.models = m;
          state.resume = ResumeState{res.optimizer, rec.epoch + 1, res.best_epoch, res.best_loss};
          write_checkpoint(out / "checkpoint_last.json", state);
          if (res.best_epoch == rec.epoch) write_checkpoint(out / "checkpoint.json", state);
          write_text(out / "history.csv", history_csv(state.history));
          ctx.log << "epoch " << rec.epoch << ": lr " << rec.learning_rate << " train L_ctrl "
                  << rec.train_ctrl << " test L_ctrl " << rec.test_ctrl << " ("
                  << seconds_since(t0) << " s)\n";
        };
        if (cfg.target_reduction > 0.0 && initial_test) {
          const double target = *initial_test / cfg.target_reduction;
          cb.stop = [target](const EpochRecord& rec) { return rec.test_ctrl <= target; };
        }
        const std::optional<ResumeState> resume =
            topt.resume ? std::optional<ResumeState>(state.resume) : std::nullopt;
        train_pinet(m, cfg.hp, std::span<const Sample>(train), std::span<const Sample>(test),
                    tc, resume, cb);
      },
      state.models);

  if (!do_train) {
    // Nothing to optimize: the initial (possibly pre-trained) models are
    // the result.
    write_checkpoint(out / "checkpoint.json", state);
    write_checkpoint(out / "checkpoint_last.json", state);
    write_text(out / "history.csv", history_csv(state.history));
  }

  // Report on the best checkpoint.
  const Checkpoint best = read_checkpoint(out / "checkpoint.json");
  MetricsReport rep;
  rep.controller = "pi-net";
  std::tie(rep.mse_train, rep.mse_test) = dataset_mse(cfg, best.models, cfg.hp, data);
  rep.trainable_params = trainable;
  rep.reference_params = reference_param_count(best.models);
  extra["initial_mse_test"] = initial_test ? json(*initial_test) : json(nullptr);
  extra["best_epoch"] = best.resume.best_epoch;
  extra["epochs_run"] = state.history.size();
  rep.extra = extra;
  const json report = to_json(rep);
  write_json(out / "metrics.json", report);
  ctx.out << report.dump(2) << '\n';
  ctx.log << "train: done in " << seconds_since(t0) << " s\n";
  return kExitOk;
}

struct EvalOptions {
  std::optional<fs::path> data;
  std::optional<fs::path> checkpoint;
};

// Internal models for eval/simulate: the checkpoint when given, otherwise
// freshly configured models (teacher models for the known-model PI
// controller).
inline std::pair<AnyModels, PIHyperParams> evaluation_models(
    const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint) {
  if (checkpoint) {
    Checkpoint ck = read_checkpoint(*checkpoint);
    if (ck.environment != cfg.environment) {
      throw ValidationError("checkpoint is for the " + ck.environment +
                            " environment but the configuration is " + cfg.environment);
    }
    return {std::move(ck.models), cfg.hp};
  }
  return {make_models(cfg, stream_rng(cfg, Stream::kInit)), cfg.hp};
}

inline int cmd_eval(const ExperimentConfig& cfg, const EvalOptions& eopt,
                    const fs::path& out_dir, bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  OutputDir out(out_dir, {"resolved_config.json", "metrics.json", "runs.csv"}, force);
  write_json(out / "resolved_config.json", cfg.resolved);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<Dataset> data;
  if (eopt.data) data = load_matching_dataset(cfg, *eopt.data);

  MetricsReport rep;
  std::vector<SimulationResult> runs;
  const bool expert = cfg.eval_controller == "expert" && !eopt.checkpoint;
  if (expert) {
    rep.controller = "expert";
    if (cfg.linear()) throw ValidationError("the linear expert (LQR) has no closed-loop evaluation");
    runs = run_expert(cfg);
  } else {
    auto [models, hp] = evaluation_models(cfg, eopt.checkpoint);
    rep.controller = eopt.checkpoint ? "pi-net" : "pi";
    rep.trainable_params = trainable_parameter_count(models, cfg.frozen);
    rep.reference_params = reference_param_count(models);
    if (data) std::tie(rep.mse_train, rep.mse_test) = dataset_mse(cfg, models, hp, *data);
    if (!cfg.linear()) runs = run_pi(cfg, models, hp, &ctx.log);
  }
  summarize_runs(rep, runs);
  std::ostringstream csv;
  csv << "run,theta0,theta_dot0,success,trajectory_cost\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    csv << r << ',' << fmt(runs[r].states(0, 0)) << ',' << fmt(runs[r].states(0, 1)) << ','
        << (runs[r].success ? 1 : 0) << ',' << fmt(runs[r].trajectory_cost) << '\n';
  }
  if (!cfg.linear()) write_text(out / "runs.csv", csv.str());
  const json report = to_json(rep);
  write_json(out / "metrics.json", report);
  ctx.out << report.dump(2) << '\n';
  ctx.log << "eval: done in " << seconds_since(t0) << " s\n";
  return kExitOk;
}

inline std::string run_file_name(int r) {
  std::string s = std::to_string(r);
  return "run_" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s + ".csv";
}

// Closed-loop pendulum runs, or for the linear system the PI-Net plan and
// the LQR plan from random starts executed on the teacher dynamics.
inline int cmd_simulate(const ExperimentConfig& cfg, const EvalOptions& eopt,
                        const fs::path& out_dir, bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  std::vector<std::string> names{"resolved_config.json", "summary.json"};
  for (int r = 0; r < cfg.eval_runs; ++r) names.push_back(run_file_name(r));
  OutputDir out(out_dir, names, force);
  write_json(out / "resolved_config.json", cfg.resolved);
  const auto t0 = std::chrono::steady_clock::now();
  json summary;
  if (cfg.linear()) {
    if (!eopt.data) throw ValidationError("linear simulate needs --data for the teacher system");
    const Dataset data = load_matching_dataset(cfg, *eopt.data);
    const LinearTeacher& teacher = *data.teacher;
    auto [models, hp] = evaluation_models(cfg, eopt.checkpoint);
    const auto& lm = std::get<LinearModels>(models);
    json runs = json::array();
    for (int r = 0; r < cfg.eval_runs; ++r) {
      SeededRng s = stream_rng(cfg, Stream::kSimulate).substream(static_cast<std::uint64_t>(r));
      StateVec x0(4);
      for (Index i = 0; i < 4; ++i) x0(i) = s.normal();
      const ControlSequence u_pi = pi_net_forward(x0, ControlSequence::Zero(hp.N, 2), lm, hp,
                                                  s.substream(0), false)
                                       .controls;
      const auto lqr = lqr_solve(teacher.lqr_problem(hp.N), x0);
      std::ostringstream csv;
      csv << "step,x_pi_0,x_pi_1,x_pi_2,x_pi_3,x_lqr_0,x_lqr_1,x_lqr_2,x_lqr_3,u_pi_0,u_pi_1,"
             "u_lqr_0,u_lqr_1\n";
      StateVec xp = x0;
      StateVec xl = x0;
      double dev = 0.0;
      for (Index t = 0; t <= hp.N; ++t) {
        csv << t;
        for (Index i = 0; i < 4; ++i) csv << ',' << fmt(xp(i));
        for (Index i = 0; i < 4; ++i) csv << ',' << fmt(xl(i));
        for (Index j = 0; j < 2; ++j) csv << ',' << (t < hp.N ? fmt(u_pi(t, j)) : "");
        for (Index j = 0; j < 2; ++j) csv << ',' << (t < hp.N ? fmt(lqr(t, j)) : "");
        csv << '\n';
        dev = std::max(dev, (xp - xl).norm());
        if (t < hp.N) {
          xp = teacher.F * xp + teacher.G * u_pi.row(t).transpose();
          xl = teacher.F * xl + teacher.G * lqr.row(t).transpose();
        }
      }
      write_text(out / run_file_name(r), csv.str());
      runs.push_back({{"run", r}, {"x0", vector_json(x0)}, {"max_state_deviation", dev}});
    }
    summary["runs"] = runs;
  } else {
    std::vector<SimulationResult> runs;
    std::string controller;
    if (cfg.eval_controller == "expert" && !eopt.checkpoint) {
      controller = "expert";
      runs = run_expert(cfg);
    } else {
      auto [models, hp] = evaluation_models(cfg, eopt.checkpoint);
      controller = eopt.checkpoint ? "pi-net" : "pi";
      runs = run_pi(cfg, models, hp, &ctx.log);
    }
    std::vector<StateVec> starts;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      std::ostringstream csv;
      csv.precision(17);
      write_trajectory_csv(csv, runs[r]);
      write_text(out / run_file_name(static_cast<int>(r)), csv.str());
      starts.push_back(runs[r].states.row(0).transpose());
    }
    summary["controller"] = controller;
    summary["runs"] = run_summary_json(runs, starts);
  }
  write_json(out / "summary.json", summary);
  ctx.out << summary.dump(2) << '\n';
  ctx.log << "simulate: done in " << seconds_since(t0) << " s\n";
  return kExitOk;
}

inline int cmd_gradcheck(const ExperimentConfig& cfg, const std::optional<fs::path>& out_dir,
                         bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  std::optional<OutputDir> out;
  if (out_dir) {
    out.emplace(*out_dir, std::vector<std::string>{"resolved_config.json", "gradcheck.json"},
                force);
    write_json(*out / "resolved_config.json", cfg.resolved);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport rep = run_gradcheck(cfg);
  const json j = to_json(rep);
  if (out) write_json(*out / "gradcheck.json", j);
  ctx.out << j.dump(2) << '\n';
  ctx.log << "gradcheck: " << (rep.passed ? "PASS" : "FAIL") << " in " << seconds_since(t0)
          << " s\n";
  return rep.passed ? kExitOk : kExitNumeric;
}

inline int cmd_export_costmap(const ExperimentConfig& cfg,
                              const std::optional<fs::path>& checkpoint,
                              const fs::path& out_dir, bool force, CommandContext ctx = {}) {
  apply_threads(cfg);
  if (cfg.linear()) throw ValidationError("cost maps are defined for the pendulum only");
  OutputDir out(out_dir, {"resolved_config.json", "costmap.csv", "costmap_summary.json"},
                force);
  write_json(out / "resolved_config.json", cfg.resolved);
  CostMap map;
  std::string source = "teacher";
  if (checkpoint) {
    const Checkpoint ck = read_checkpoint(*checkpoint);
    if (ck.environment != "pendulum") {
      throw ValidationError("checkpoint does not hold a pendulum cost model");
    }
    source = checkpoint->filename().string();
    std::visit(
        [&](const auto& m) {
          if constexpr (!kIsLinear<std::decay_t<decltype(m)>>) {
            map = evaluate_costmap(m.cost, cfg.grid, cfg.theta_max, cfg.theta_dot_max);
          }
        },
        ck.models);
  } else {
    map = evaluate_costmap(PendulumTeacherCost(), cfg.grid, cfg.theta_max, cfg.theta_dot_max);
  }
  write_text(out / "costmap.csv", costmap_csv(map));
  const auto [bi, bj] = map.argmin();
  json summary = {{"source", source},
                  {"grid", map.grid},
                  {"rows", map.grid * map.grid},
                  {"argmin", {{"theta", map.theta[static_cast<std::size_t>(bi)]},
                              {"theta_dot", map.theta_dot[static_cast<std::size_t>(bj)]},
                              {"q", map.q(bi, bj)}}}};
  write_json(out / "costmap_summary.json", summary);
  ctx.out << summary.dump(2) << '\n';
  return kExitOk;
}

}  // namespace picontrol::app

#endif  // PICONTROL_APP_HPP_
