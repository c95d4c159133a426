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

// Imitation learning: losses, RMSProp with a plateau schedule, dataset
// construction and the training loops.

#ifndef PICONTROL_TRAINING_HPP_
#define PICONTROL_TRAINING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "picontrol/controller.hpp"
#include "picontrol/core.hpp"
#include "picontrol/envs.hpp"
#include "picontrol/experts.hpp"
#include "picontrol/models.hpp"

namespace picontrol {

// ------------------------------- samples ------------------------------------

struct OpenLoopSample {
  StateVec x0;
  ControlSequence controls;
};

struct MPCSample {
  StateVec x;
  ControlVec u;
  StateVec x_next;
};

// How state differences are measured: plain Euclidean, or with the first
// coordinate treated as an angle on the circle (pendulum).
enum class StateMetric { kEuclidean, kAngleFirst };

inline StateVec state_difference(const StateVec& a, const StateVec& b,
                                 StateMetric metric) {
  StateVec d = a - b;
  if (metric == StateMetric::kAngleFirst && d.size() > 0) {
    d(0) = pendulum::wrap_angle(d(0));
  }
  return d;
}

// -------------------------------- losses ------------------------------------

// Mean squared error over all N * m entries.
inline double loss_ctrl(const ControlSequence& pred,
                        const ControlSequence& demo) {
  if (pred.rows() != demo.rows() || pred.cols() != demo.cols()) {
    throw ShapeError("loss_ctrl: prediction and demonstration differ in shape");
  }
  if (pred.size() == 0) return 0.0;
  return (pred - demo).squaredNorm() / static_cast<double>(pred.size());
}

inline ControlSequence loss_ctrl_grad(const ControlSequence& pred,
                                      const ControlSequence& demo) {
  return 2.0 * (pred - demo) / static_cast<double>(pred.size());
}

// MPC form: only the first planned control is compared.
inline double loss_ctrl_first(const ControlSequence& pred,
                              const ControlVec& demo) {
  if (pred.rows() < 1 || pred.cols() != demo.size()) {
    throw ShapeError("loss_ctrl_first: shape mismatch");
  }
  return (pred.row(0).transpose() - demo).squaredNorm() /
         static_cast<double>(demo.size());
}

inline ControlSequence loss_ctrl_first_grad(const ControlSequence& pred,
                                            const ControlVec& demo) {
  ControlSequence g = ControlSequence::Zero(pred.rows(), pred.cols());
  g.row(0) = (2.0 / static_cast<double>(demo.size())) *
             (pred.row(0).transpose() - demo).transpose();
  return g;
}

template <DynamicsModel Dyn>
double loss_dyn(const Dyn& f, const MPCSample& s,
                StateMetric metric = StateMetric::kEuclidean) {
  const StateVec d = state_difference(f.forward(s.x, s.u), s.x_next, metric);
  return d.squaredNorm() / static_cast<double>(d.size());
}

template <DynamicsModel Dyn>
double loss_dyn(const Dyn& f, std::span<const MPCSample> samples,
                StateMetric metric = StateMetric::kEuclidean) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) total += loss_dyn(f, s, metric);
  return total / static_cast<double>(samples.size());
}

// Parameter gradient of the mean loss_dyn over `samples`.
template <DynamicsModel Dyn>
Eigen::VectorXd loss_dyn_grad(const Dyn& f, std::span<const MPCSample> samples,
                              StateMetric metric = StateMetric::kEuclidean) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(f.parameters().size());
  if (samples.empty()) return g;
  for (const auto& s : samples) {
    const StateVec d = state_difference(f.forward(s.x, s.u), s.x_next, metric);
    const StateVec d_bar = 2.0 * d / static_cast<double>(d.size());
    g += f.vjp(s.x, s.u, d_bar).params;
  }
  return g / static_cast<double>(samples.size());
}

// Mean over goals g and states x of max(0, q(x_g) - q(x)).
template <StateCostModel Cost>
double loss_cost(const Cost& cost, std::span<const StateVec> goals,
                 std::span<const StateVec> states) {
  if (goals.empty()) throw ParameterError("loss_cost needs at least one goal");
  if (states.empty()) return 0.0;
  double total = 0.0;
  for (const auto& g : goals) {
    const double qg = cost.running(g);
    for (const auto& x : states) total += std::max(0.0, qg - cost.running(x));
  }
  return total / static_cast<double>(goals.size() * states.size());
}

template <StateCostModel Cost>
Eigen::VectorXd loss_cost_grad(const Cost& cost, std::span<const StateVec> goals,
                               std::span<const StateVec> states) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(cost.parameters().size());
  if (goals.empty() || states.empty() || g.size() == 0) return g;
  const double scale = 1.0 / static_cast<double>(goals.size() * states.size());
  for (const auto& goal : goals) {
    const double qg = cost.running(goal);
    for (const auto& x : states) {
      if (qg - cost.running(x) > 0.0) {
        g += cost.running_vjp(goal, scale).params;
        g -= cost.running_vjp(x, scale).params;
      }
    }
  }
  return g;
}

// ------------------------------ optimizer -----------------------------------

struct OptimizerState {
  Eigen::VectorXd second_moment;
  double learning_rate = 1e-3;
  double decay = 0.9;
  double epsilon = 1e-8;
  int epochs_since_improvement = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  int plateau_patience = 5;
  double plateau_factor = 0.5;
};

// v <- decay v + (1 - decay) g^2;  p <- p - lr g / (sqrt(v) + eps).
inline Eigen::VectorXd rmsprop_step(const Eigen::VectorXd& params,
                                    const Eigen::VectorXd& grads,
                                    OptimizerState& st) {
  if (params.size() != grads.size()) {
    throw ShapeError("rmsprop_step: parameter and gradient sizes differ");
  }
  if (st.second_moment.size() != params.size()) {
    st.second_moment = Eigen::VectorXd::Zero(params.size());
  }
  st.second_moment = st.decay * st.second_moment +
                     (1.0 - st.decay) * grads.cwiseAbs2();
  return params - (st.learning_rate * grads.array() /
                   (st.second_moment.array().sqrt() + st.epsilon))
                      .matrix();
}

// Halves the learning rate after `plateau_patience` consecutive epochs
// without a strict improvement of the best loss.
inline OptimizerState lr_plateau_schedule(OptimizerState st,
                                          double epoch_loss) {
  if (epoch_loss < st.best_loss) {
    st.best_loss = epoch_loss;
    st.epochs_since_improvement = 0;
    return st;
  }
  if (++st.epochs_since_improvement >= st.plateau_patience) {
    st.learning_rate *= st.plateau_factor;
    st.epochs_since_improvement = 0;
  }
  return st;
}

// ------------------------------- datasets -----------------------------------

struct LinearDataset {
  std::vector<OpenLoopSample> train;
  std::vector<OpenLoopSample> test;
};

// x0 entries ~ N(0, 1); demonstrations from LQR over `horizon` steps.
inline LinearDataset build_linear_dataset(const LinearTeacher& teacher,
                                          SeededRng& rng, Index n_train,
                                          Index n_test, Index horizon = 200) {
  const LQRProblem problem = teacher.lqr_problem(horizon);
  const RiccatiSolution sol = riccati_recursion(problem);
  auto make = [&](Index count) {
    std::vector<OpenLoopSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index s = 0; s < count; ++s) {
      OpenLoopSample sample;
      sample.x0.resize(teacher.F.rows());
      for (Index i = 0; i < sample.x0.size(); ++i) sample.x0(i) = rng.normal();
      sample.controls.resize(horizon, teacher.G.cols());
      StateVec x = sample.x0;
      for (Index i = 0; i < horizon; ++i) {
        const Eigen::VectorXd u = -sol.gains[static_cast<std::size_t>(i)] * x;
        sample.controls.row(i) = u.transpose();
        x = teacher.F * x + teacher.G * u;
      }
      out.push_back(std::move(sample));
    }
    return out;
  };
  LinearDataset d;
  d.train = make(n_train);
  d.test = make(n_test);
  return d;
}

struct PendulumDataset {
  std::vector<MPCSample> train;
  std::vector<MPCSample> test;
  // Expert runs that provided the samples; index-aligned with the split.
  std::vector<SimulationResult> train_runs;
  std::vector<SimulationResult> test_runs;
  int excluded = 0;
};

// Slices one closed-loop run into consecutive transitions.
inline std::vector<MPCSample> transitions(const SimulationResult& run) {
  std::vector<MPCSample> out;
  out.reserve(static_cast<std::size_t>(run.controls.rows()));
  for (Index t = 0; t < run.controls.rows(); ++t) {
    out.push_back(MPCSample{run.states.row(t).transpose(),
                            run.controls.row(t).transpose(),
                            run.states.row(t + 1).transpose()});
  }
  return out;
}

// Expert iLQR MPC runs from uniform random starts; run r of the train split
// uses rng.substream(r), run r of the test split rng.substream(1000000 + r).
inline PendulumDataset build_pendulum_dataset(const SeededRng& rng,
                                              int n_traj_train = 50,
                                              int n_traj_test = 10,
                                              double duration = 40.0,
                                              Index horizon = 30) {
  PendulumDataset d;
  auto run_split = [&](int count, std::uint64_t offset,
                       std::vector<MPCSample>& samples,
                       std::vector<SimulationResult>& runs) {
    std::vector<std::optional<SimulationResult>> results(
        static_cast<std::size_t>(count));
    parallel_for(count, [&](Index r) {
      SeededRng stream = rng.substream(offset + static_cast<std::uint64_t>(r));
      const StateVec x0 = sample_pendulum_start(stream);
      auto expert = make_pendulum_expert(horizon);
      try {
        results[static_cast<std::size_t>(r)] =
            mpc_simulate(expert, PendulumPlant(), x0, duration, true);
      } catch (const NumericError&) {
      }
    });
    for (auto& res : results) {
      if (!res) {
        ++d.excluded;
        continue;
      }
      for (auto& s : transitions(*res)) samples.push_back(std::move(s));
      runs.push_back(std::move(*res));
    }
  };
  run_split(n_traj_train, 0, d.train, d.train_runs);
  run_split(n_traj_test, 1000000, d.test, d.test_runs);
  return d;
}

// --------------------------- dynamics pre-training --------------------------

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_ctrl = 0.0;
  double train_cost = 0.0;
  double train_dyn = std::numeric_limits<double>::quiet_NaN();
  double test_ctrl = std::numeric_limits<double>::quiet_NaN();
  double test_cost = std::numeric_limits<double>::quiet_NaN();
  double test_dyn = std::numeric_limits<double>::quiet_NaN();
};

struct PretrainConfig {
  int epochs = 200;
  Index batch = 32;
  double learning_rate = 1e-3;
  StateMetric metric = StateMetric::kAngleFirst;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  double train_loss = 0.0;
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<EpochRecord> history;
  OptimizerState optimizer;
};

namespace detail {

// Fisher-Yates permutation driven by a seeded stream.
inline std::vector<std::size_t> permutation(std::size_t n, SeededRng rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace detail

template <DynamicsModel Dyn>
PretrainResult pretrain_dynamics(Dyn& f, std::span<const MPCSample> train,
                                 std::span<const MPCSample> test,
                                 const PretrainConfig& cfg) {
  if (train.empty()) throw ParameterError("pretrain_dynamics: empty dataset");
  if (cfg.batch < 1) throw ParameterError("pretrain_dynamics: batch must be >= 1");
  PretrainResult res;
  res.optimizer.learning_rate = cfg.learning_rate;
  const SeededRng rng(cfg.seed, 0x5052455452ULL);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::permutation(train.size(),
                                           rng.substream(static_cast<std::uint64_t>(epoch)));
    std::vector<MPCSample> batch;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      batch.clear();
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train[order[i]]);
      const Eigen::VectorXd g = loss_dyn_grad(f, std::span<const MPCSample>(batch), cfg.metric);
      if (!g.allFinite()) {
        throw NumericError("pretrain_dynamics: non-finite gradient in epoch " +
                           std::to_string(epoch));
      }
      f.set_parameters(rmsprop_step(f.parameters(), g, res.optimizer));
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = res.optimizer.learning_rate;
    rec.train_dyn = loss_dyn(f, train, cfg.metric);
    if (!test.empty()) rec.test_dyn = loss_dyn(f, test, cfg.metric);
    if (!std::isfinite(rec.train_dyn)) {
      throw NumericError("pretrain_dynamics: non-finite loss in epoch " +
                         std::to_string(epoch));
    }
    res.optimizer = lr_plateau_schedule(res.optimizer, rec.train_dyn);
    res.history.push_back(rec);
  }
  res.train_loss = loss_dyn(f, train, cfg.metric);
  if (!test.empty()) res.test_loss = loss_dyn(f, test, cfg.metric);
  return res;
}

// ------------------------------ PI-Net training -----------------------------

enum class Regime { kOpenLoop, kMpc };

struct TrainConfig {
  Regime regime = Regime::kOpenLoop;
  int epochs = 10;
  Index batch = 8;
  double learning_rate = 1e-3;
  double ctrl_weight = 1.0;
  double cost_weight = 0.0;
  std::vector<StateVec> goals;
  FrozenSet frozen;
  // Reverse-pass storage limit for one batch, in bytes.
  std::size_t memory_budget = std::size_t{8} << 30;
  std::uint64_t seed = 0;
};

template <typename Sample>
constexpr Regime regime_of() {
  if constexpr (std::is_same_v<Sample, OpenLoopSample>) {
    return Regime::kOpenLoop;
  } else {
    static_assert(std::is_same_v<Sample, MPCSample>);
    return Regime::kMpc;
  }
}

inline const StateVec& sample_state(const OpenLoopSample& s) { return s.x0; }
inline const StateVec& sample_state(const MPCSample& s) { return s.x; }

inline void check_memory_budget(const PIHyperParams& hp, Index n, Index m,
                                Index batch, std::size_t budget) {
  const double bytes = static_cast<double>(tape_values_per_forward(hp, n, m)) *
                       sizeof(double) * static_cast<double>(batch);
  if (bytes > static_cast<double>(budget)) {
    const double factor = bytes / static_cast<double>(budget);
    throw MemoryBudgetError(
        "reverse-pass storage of " + std::to_string(bytes / 1048576.0) +
        " MiB (U*N*K*B = " +
        std::to_string(static_cast<double>(hp.U) * static_cast<double>(hp.N) *
                       static_cast<double>(hp.K) * static_cast<double>(batch)) +
        ") exceeds the budget of " +
        std::to_string(static_cast<double>(budget) / 1048576.0) +
        " MiB; reduce U, N, K or the batch size by a factor of at least " +
        std::to_string(factor));
  }
}

struct SampleEvaluation {
  double ctrl_loss = 0.0;
  ParamVector gradient;  // empty layout when not requested
  ControlSequence prediction;
};

// Control loss of one sample and, optionally, its parameter gradient.
template <DynamicsModel Dyn, StateCostModel Cost, typename Sample>
SampleEvaluation evaluate_sample(const PiModels<Dyn, Cost>& models,
                                 const PIHyperParams& hp, const Sample& sample,
                                 const SeededRng& rng, bool with_gradient,
                                 const FrozenSet& frozen = {}) {
  SampleEvaluation out;
  const ControlSequence init =
      ControlSequence::Zero(hp.N, models.control_dim());
  ForwardResult fw = pi_net_forward(sample_state(sample), init, models, hp,
                                    rng, with_gradient);
  out.prediction = fw.controls;
  ControlSequence bar;
  if constexpr (std::is_same_v<Sample, OpenLoopSample>) {
    out.ctrl_loss = loss_ctrl(fw.controls, sample.controls);
    if (with_gradient) bar = loss_ctrl_grad(fw.controls, sample.controls);
  } else {
    out.ctrl_loss = loss_ctrl_first(fw.controls, sample.u);
    if (with_gradient) bar = loss_ctrl_first_grad(fw.controls, sample.u);
  }
  if (with_gradient) out.gradient = pi_net_backward(*fw.tape, models, bar, frozen);
  return out;
}

struct TrainResult {
  std::vector<EpochRecord> history;
  OptimizerState optimizer;
  int best_epoch = -1;
  double best_loss = std::numeric_limits<double>::infinity();
  ParamVector best_params;
};

// Where an interrupted run continues: the optimizer state after the last
// completed epoch, the next epoch index and the best watched loss so far.
struct ResumeState {
  OptimizerState optimizer;
  int next_epoch = 0;
  int best_epoch = -1;
  double best_loss = std::numeric_limits<double>::infinity();
};

// Evaluation streams are fixed per sample index so reported losses do not
// depend on batch order or on the epoch.
constexpr std::uint64_t kEvalStream = 0xE7A1ULL;

template <DynamicsModel Dyn, StateCostModel Cost, typename Sample>
double mean_ctrl_loss(const PiModels<Dyn, Cost>& models,
                      const PIHyperParams& hp, std::span<const Sample> data,
                      const SeededRng& eval_rng) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += evaluate_sample(models, hp, data[i], eval_rng.substream(i), false)
                 .ctrl_loss;
  }
  return total / static_cast<double>(data.size());
}

template <StateCostModel Cost, typename Sample>
double mean_cost_loss(const Cost& cost, const std::vector<StateVec>& goals,
                      std::span<const Sample> data) {
  if (goals.empty() || data.empty()) return 0.0;
  std::vector<StateVec> states;
  states.reserve(data.size());
  for (const auto& s : data) states.push_back(sample_state(s));
  return loss_cost(cost, std::span<const StateVec>(goals),
                   std::span<const StateVec>(states));
}

struct TrainCallbacks {
  // Called at the end of every epoch with its record and the running result.
  std::function<void(const EpochRecord&, const TrainResult&)> on_epoch;
  // Called when the test loss (train loss when there is no test set)
  // reaches a new minimum.
  std::function<void(int epoch, const ParamVector&, const OptimizerState&)>
      on_best;
  // Optional early exit, checked after each epoch's bookkeeping.
  std::function<bool(const EpochRecord&)> stop;
};

// Minibatch RMSProp on ctrl_weight * L_ctrl + cost_weight * L_cost. Frozen
// segments receive an exactly zero gradient, which RMSProp maps to an
// unchanged parameter.
template <DynamicsModel Dyn, StateCostModel Cost, typename Sample>
TrainResult train_pinet(PiModels<Dyn, Cost>& models, const PIHyperParams& hp,
                        std::span<const Sample> train,
                        std::span<const Sample> test, const TrainConfig& cfg,
                        const std::optional<ResumeState>& resume = std::nullopt,
                        const TrainCallbacks& cb = {}) {
  hp.validate();
  if (cfg.regime != regime_of<Sample>()) {
    throw ParameterError("training regime does not match the dataset type");
  }
  if (train.empty()) throw ParameterError("train_pinet: empty training set");
  if (cfg.batch < 1) throw ParameterError("train_pinet: batch must be >= 1");
  if (cfg.cost_weight != 0.0 && cfg.goals.empty()) {
    throw ParameterError("cost loss requires at least one goal state");
  }
  check_memory_budget(hp, models.state_dim(), models.control_dim(), cfg.batch,
                      cfg.memory_budget);

  TrainResult res;
  int first_epoch = 0;
  if (resume) {
    res.optimizer = resume->optimizer;
    first_epoch = resume->next_epoch;
    res.best_epoch = resume->best_epoch;
    res.best_loss = resume->best_loss;
  } else {
    res.optimizer.learning_rate = cfg.learning_rate;
  }
  const SeededRng root(cfg.seed, 0x545241494EULL);
  const SeededRng eval_rng = root.substream(kEvalStream);
  const bool use_cost = cfg.cost_weight != 0.0 && !cfg.frozen.contains(models.cost.id());

  // cfg.epochs is the total; a resumed run only does the remainder.
  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    const SeededRng epoch_rng = root.substream(static_cast<std::uint64_t>(epoch));
    const auto order = detail::permutation(train.size(), epoch_rng.substream(0));
    const SeededRng noise_rng = epoch_rng.substream(1);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      ParamVector grad = models.pack().zeros_like();
      std::vector<StateVec> batch_states;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        SampleEvaluation ev = evaluate_sample(models, hp, train[idx],
                                              noise_rng.substream(idx), true,
                                              cfg.frozen);
        grad.values += cfg.ctrl_weight * ev.gradient.values;
        batch_states.push_back(sample_state(train[idx]));
      }
      grad.values /= static_cast<double>(stop - start);
      if (use_cost) {
        const ParamSegment* seg = grad.find(models.cost.id());
        grad.values.segment(seg->offset, seg->length) +=
            cfg.cost_weight *
            loss_cost_grad(models.cost, std::span<const StateVec>(cfg.goals),
                           std::span<const StateVec>(batch_states));
      }
      for (const auto& id : cfg.frozen) {
        if (const ParamSegment* seg = grad.find(id)) {
          grad.values.segment(seg->offset, seg->length).setZero();
        }
      }
      if (!grad.values.allFinite()) {
        throw NumericError("train_pinet: non-finite gradient in epoch " +
                           std::to_string(epoch));
      }
      ParamVector params = models.pack();
      params.values = rmsprop_step(params.values, grad.values, res.optimizer);
      models.unpack(params);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = res.optimizer.learning_rate;
    rec.train_ctrl = mean_ctrl_loss(models, hp, train, eval_rng);
    rec.train_cost = mean_cost_loss(models.cost, cfg.goals, train);
    if (!test.empty()) {
      rec.test_ctrl = mean_ctrl_loss(models, hp, test, eval_rng.substream(1u << 31));
      rec.test_cost = mean_cost_loss(models.cost, cfg.goals, test);
    }
    if constexpr (std::is_same_v<Sample, MPCSample>) {
      // Monitoring only; L_dyn is not part of the objective here.
      rec.train_dyn = loss_dyn(models.dynamics, train, StateMetric::kAngleFirst);
      if (!test.empty()) {
        rec.test_dyn = loss_dyn(models.dynamics, test, StateMetric::kAngleFirst);
      }
    }
    const double train_total =
        cfg.ctrl_weight * rec.train_ctrl + cfg.cost_weight * rec.train_cost;
    if (!std::isfinite(train_total)) {
      throw NumericError("train_pinet: non-finite loss in epoch " +
                         std::to_string(epoch));
    }
    res.optimizer = lr_plateau_schedule(res.optimizer, train_total);
    res.history.push_back(rec);

    const double watched =
        test.empty() ? train_total
                     : cfg.ctrl_weight * rec.test_ctrl + cfg.cost_weight * rec.test_cost;
    if (watched < res.best_loss) {
      res.best_loss = watched;
      res.best_epoch = epoch;
      res.best_params = models.pack();
      if (cb.on_best) cb.on_best(epoch, res.best_params, res.optimizer);
    }
    if (cb.on_epoch) cb.on_epoch(rec, res);
    if (cb.stop && cb.stop(rec)) break;
  }
  return res;
}

}  // namespace picontrol

#endif  // PICONTROL_TRAINING_HPP_
