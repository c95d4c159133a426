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

// Path-integral control as an unrolled, differentiable computation.
//
// One kernel iteration draws K perturbation sequences, simulates them
// through the dynamics model, accumulates modified running costs into
// per-step costs-to-go and replaces the plan with the exponentially
// weighted average of the perturbations:
//
//   u*_i = u_i + sum_k w_ki du_ki,   w_ki = softmax_k(-S_ki / lambda).
//
// pi_net_forward applies the kernel U times; with recording enabled it
// keeps every intermediate so that pi_net_backward can return the exact
// reverse-mode gradient of a loss on the final plan with respect to the
// dynamics, state-cost and control-weight parameters. Noise samples are
// constants of the computation.

#ifndef PICONTROL_CONTROLLER_HPP_
#define PICONTROL_CONTROLLER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "picontrol/core.hpp"
#include "picontrol/models.hpp"

namespace picontrol {

template <DynamicsModel Dyn, StateCostModel Cost>
struct PiModels {
  Dyn dynamics;
  Cost cost;
  ControlCostWeight control_weight;

  Index state_dim() const { return dynamics.state_dim(); }
  Index control_dim() const { return dynamics.control_dim(); }

  ParamVector pack() const {
    return pack_params(dynamics, cost, control_weight);
  }
  void unpack(const ParamVector& pv) {
    unpack_params(pv, dynamics, cost, control_weight);
  }
};

// running(k, i) = q~ at step i of trajectory k; terminal(k) = phi(x_kN).
struct RolloutCosts {
  Eigen::MatrixXd running;
  Eigen::VectorXd terminal;
};

// S(k, i) = sum_{j >= i} running(k, j) + terminal(k), i = 0..N.
struct CostToGo {
  Eigen::MatrixXd S;
};

struct Rollout {
  // states[k] is (N + 1) x n; row i is x_ki.
  std::vector<Eigen::MatrixXd> states;
  RolloutCosts costs;
};

// Everything one kernel iteration consumed and produced.
struct KernelRecord {
  ControlSequence input;
  NoiseTensor noise;
  Rollout rollout;
  // Normalized weights, K x N; column i sums to one.
  Eigen::MatrixXd weights;
};

struct RolloutTape {
  StateVec x0;
  PIHyperParams hp;
  ParamVector params;
  std::vector<KernelRecord> iterations;
  ControlSequence output;

  // Number of doubles held by the tape.
  std::size_t stored_values() const {
    std::size_t total = 0;
    for (const auto& it : iterations) {
      total += static_cast<std::size_t>(it.input.size() + it.weights.size() +
                                        it.rollout.costs.running.size() +
                                        it.rollout.costs.terminal.size());
      for (const auto& s : it.noise.samples) total += static_cast<std::size_t>(s.size());
      for (const auto& s : it.rollout.states) total += static_cast<std::size_t>(s.size());
    }
    return total;
  }
};

struct ForwardResult {
  ControlSequence controls;
  std::optional<RolloutTape> tape;
};

// Doubles stored per recorded forward pass; used for memory budgeting.
inline std::size_t tape_values_per_forward(const PIHyperParams& hp, Index n,
                                           Index m) {
  const auto K = static_cast<std::size_t>(hp.K);
  const auto N = static_cast<std::size_t>(hp.N);
  const auto per_iter = N * static_cast<std::size_t>(m) * (1 + K) +
                        K * (N + 1) * static_cast<std::size_t>(n) + 2 * K * N + K;
  return static_cast<std::size_t>(hp.U) * per_iter;
}

// ------------------------------ forward ops ---------------------------------

template <DynamicsModel Dyn, StateCostModel Cost>
Rollout monte_carlo_rollout(const StateVec& x0, const ControlSequence& useq,
                            const NoiseTensor& noise, const Dyn& dynamics,
                            const Cost& cost, const Eigen::MatrixXd& r,
                            double nu) {
  const Index K = noise.trajectories();
  const Index N = useq.rows();
  const Index m = useq.cols();
  const Index n = x0.size();
  if (n != dynamics.state_dim() || m != dynamics.control_dim()) {
    throw ShapeError("rollout inputs do not match the dynamics model");
  }
  if (K < 1 || noise.horizon() != N || noise.control_dim() != m) {
    throw ShapeError("noise tensor shape does not match the control sequence");
  }
  if (r.rows() != m || r.cols() != m) {
    throw ShapeError("control weight has wrong dimension");
  }

  Rollout out;
  out.states.assign(static_cast<std::size_t>(K), Eigen::MatrixXd());
  out.costs.running.resize(K, N);
  out.costs.terminal.resize(K);

  parallel_for(K, [&](Index k) {
    const Eigen::MatrixXd& du = noise.samples[static_cast<std::size_t>(k)];
    Eigen::MatrixXd& xs = out.states[static_cast<std::size_t>(k)];
    xs.resize(N + 1, n);
    xs.row(0) = x0.transpose();
    StateVec x = x0;
    try {
      for (Index i = 0; i < N; ++i) {
        const ControlVec u = useq.row(i).transpose();
        const ControlVec d = du.row(i).transpose();
        out.costs.running(k, i) =
            modified_running_cost(cost.running(x), u, d, r, nu);
        x = dynamics.forward(x, u + d);
        if (!x.allFinite()) throw NumericError("non-finite state");
        xs.row(i + 1) = x.transpose();
      }
      out.costs.terminal(k) = cost.terminal(x);
    } catch (const NumericError& e) {
      throw NumericError("rollout diverged in trajectory " + std::to_string(k) +
                         ": " + e.what());
    }
    if (!std::isfinite(out.costs.terminal(k)) ||
        !out.costs.running.row(k).allFinite()) {
      throw NumericError("non-finite cost in trajectory " + std::to_string(k));
    }
  });
  return out;
}

inline CostToGo cost_to_go(const RolloutCosts& rc) {
  const Index K = rc.running.rows();
  const Index N = rc.running.cols();
  CostToGo out;
  out.S.resize(K, N + 1);
  for (Index k = 0; k < K; ++k) {
    out.S(k, N) = rc.terminal(k);
    for (Index i = N - 1; i >= 0; --i) {
      out.S(k, i) = out.S(k, i + 1) + rc.running(k, i);
    }
  }
  return out;
}

// Per-step softmax of -S / lambda over trajectories (K x N). The column
// minimum is subtracted first so the largest unnormalized weight is 1.
inline Eigen::MatrixXd trajectory_weights(const CostToGo& ctg, double lambda) {
  if (!(lambda > 0.0)) throw ParameterError("lambda must be positive");
  const Index K = ctg.S.rows();
  const Index N = ctg.S.cols() - 1;
  Eigen::MatrixXd w(K, N);
  for (Index i = 0; i < N; ++i) {
    const double smin = ctg.S.col(i).minCoeff();
    double total = 0.0;
    for (Index k = 0; k < K; ++k) {
      w(k, i) = std::exp(-(ctg.S(k, i) - smin) / lambda);
      total += w(k, i);
    }
    w.col(i) /= total;
  }
  return w;
}

inline ControlSequence apply_weights(const ControlSequence& useq,
                                     const NoiseTensor& noise,
                                     const Eigen::MatrixXd& weights) {
  ControlSequence out = useq;
  for (Index i = 0; i < useq.rows(); ++i) {
    for (Index k = 0; k < noise.trajectories(); ++k) {
      out.row(i) += weights(k, i) * noise.samples[static_cast<std::size_t>(k)].row(i);
    }
  }
  return out;
}

inline ControlSequence update_controls(const ControlSequence& useq,
                                       const NoiseTensor& noise,
                                       const CostToGo& ctg, double lambda) {
  if (noise.trajectories() != ctg.S.rows() || noise.horizon() != useq.rows() ||
      ctg.S.cols() != useq.rows() + 1) {
    throw ShapeError("update_controls: inconsistent shapes");
  }
  return apply_weights(useq, noise, trajectory_weights(ctg, lambda));
}

namespace detail {

template <DynamicsModel Dyn, StateCostModel Cost>
KernelRecord run_kernel(const StateVec& x0, const ControlSequence& useq,
                        const PiModels<Dyn, Cost>& models,
                        const PIHyperParams& hp, const Eigen::MatrixXd& r,
                        const SeededRng& rng) {
  KernelRecord rec;
  rec.input = useq;
  rec.noise = gaussian_noise(rng, hp.K, useq.rows(), useq.cols(), hp.sigma);
  rec.rollout = monte_carlo_rollout(x0, useq, rec.noise, models.dynamics,
                                    models.cost, r, hp.nu);
  rec.weights = trajectory_weights(cost_to_go(rec.rollout.costs), hp.lambda);
  return rec;
}

inline void check_plan(const ControlSequence& useq, const PIHyperParams& hp,
                       Index m) {
  if (useq.rows() != hp.N || useq.cols() != m) {
    throw ShapeError("control sequence must be N x m (" + std::to_string(hp.N) +
                     " x " + std::to_string(m) + ")");
  }
}

}  // namespace detail

// One kernel iteration: noise, rollouts, costs-to-go, weighted update.
template <DynamicsModel Dyn, StateCostModel Cost>
ControlSequence pi_kernel(const StateVec& x0, const ControlSequence& useq,
                          const PiModels<Dyn, Cost>& models,
                          const PIHyperParams& hp, const SeededRng& rng) {
  hp.validate();
  detail::check_plan(useq, hp, models.control_dim());
  const Eigen::MatrixXd r = models.control_weight.matrix();
  KernelRecord rec = detail::run_kernel(x0, useq, models, hp, r, rng);
  return apply_weights(useq, rec.noise, rec.weights);
}

// U kernel iterations; iteration u draws its noise from rng.substream(u).
template <DynamicsModel Dyn, StateCostModel Cost>
ForwardResult pi_net_forward(const StateVec& x0,
                             const ControlSequence& useq_init,
                             const PiModels<Dyn, Cost>& models,
                             const PIHyperParams& hp, const SeededRng& rng,
                             bool record) {
  hp.validate();
  detail::check_plan(useq_init, hp, models.control_dim());
  if (x0.size() != models.state_dim()) throw ShapeError("x0 has wrong dimension");
  const Eigen::MatrixXd r = models.control_weight.matrix();

  ForwardResult result;
  if (record) {
    result.tape.emplace();
    result.tape->x0 = x0;
    result.tape->hp = hp;
    result.tape->params = models.pack();
    result.tape->iterations.reserve(static_cast<std::size_t>(hp.U));
  }
  ControlSequence useq = useq_init;
  for (Index it = 0; it < hp.U; ++it) {
    KernelRecord rec = detail::run_kernel(
        x0, useq, models, hp, r, rng.substream(static_cast<std::uint64_t>(it)));
    useq = apply_weights(useq, rec.noise, rec.weights);
    if (record) result.tape->iterations.push_back(std::move(rec));
  }
  if (record) result.tape->output = useq;
  result.controls = std::move(useq);
  return result;
}

template <DynamicsModel Dyn, StateCostModel Cost>
ControlSequence pi_net_forward(const StateVec& x0,
                               const PiModels<Dyn, Cost>& models,
                               const PIHyperParams& hp, const SeededRng& rng) {
  return pi_net_forward(x0,
                        ControlSequence::Zero(hp.N, models.control_dim()),
                        models, hp, rng, false)
      .controls;
}

// ------------------------------ reverse pass --------------------------------

// Segment ids ("dynamics", "cost", "control_weight") whose gradient is
// reported as exactly zero and not computed.
using FrozenSet = std::set<std::string, std::less<>>;

template <DynamicsModel Dyn, StateCostModel Cost>
ParamVector pi_net_backward(const RolloutTape& tape,
                            const PiModels<Dyn, Cost>& models,
                            const ControlSequence& output_bar,
                            const FrozenSet& frozen = {}) {
  const ParamVector current = models.pack();
  if (!current.same_layout(tape.params) ||
      current.values.size() != tape.params.values.size() ||
      !(current.values.array() == tape.params.values.array()).all()) {
    throw ConsistencyError("tape was recorded with different model parameters");
  }
  if (static_cast<Index>(tape.iterations.size()) != tape.hp.U) {
    throw ConsistencyError("tape holds " + std::to_string(tape.iterations.size()) +
                           " kernel iterations, expected " +
                           std::to_string(tape.hp.U));
  }
  if (output_bar.rows() != tape.output.rows() ||
      output_bar.cols() != tape.output.cols()) {
    throw ShapeError("output cotangent must match the control sequence shape");
  }

  const bool want_dyn = !frozen.contains(models.dynamics.id());
  const bool want_cost = !frozen.contains(models.cost.id());
  const bool want_r = !frozen.contains(models.control_weight.id());

  const Index K = tape.hp.K;
  const Index N = tape.hp.N;
  const Index m = models.control_dim();
  const double lambda = tape.hp.lambda;
  const double c_noise = tape.hp.noise_cost_coeff();
  const Eigen::MatrixXd r = models.control_weight.matrix();

  Eigen::VectorXd g_dyn = Eigen::VectorXd::Zero(models.dynamics.parameters().size());
  Eigen::VectorXd g_cost = Eigen::VectorXd::Zero(models.cost.parameters().size());
  Eigen::MatrixXd r_bar = Eigen::MatrixXd::Zero(m, m);

  struct PerTrajectory {
    Eigen::MatrixXd u_bar;
    Eigen::VectorXd g_dyn;
    Eigen::VectorXd g_cost;
    Eigen::MatrixXd r_bar;
  };
  std::vector<PerTrajectory> parts(static_cast<std::size_t>(K));

  ControlSequence u_bar = output_bar;
  for (auto it = tape.iterations.rbegin(); it != tape.iterations.rend(); ++it) {
    const KernelRecord& rec = *it;
    const ControlSequence& useq = rec.input;

    // Softmax reverse: S_bar_ki = -(w_ki / lambda) (wbar_ki - sum_j w_ji wbar_ji).
    Eigen::MatrixXd s_bar(K, N);
    for (Index i = 0; i < N; ++i) {
      double mean = 0.0;
      for (Index k = 0; k < K; ++k) {
        const double wb = u_bar.row(i).dot(rec.noise.samples[static_cast<std::size_t>(k)].row(i));
        s_bar(k, i) = wb;
        mean += rec.weights(k, i) * wb;
      }
      for (Index k = 0; k < K; ++k) {
        s_bar(k, i) = -rec.weights(k, i) / lambda * (s_bar(k, i) - mean);
      }
    }

    parallel_for(K, [&](Index k) {
      PerTrajectory& part = parts[static_cast<std::size_t>(k)];
      part.u_bar = Eigen::MatrixXd::Zero(N, m);
      part.g_dyn = Eigen::VectorXd::Zero(g_dyn.size());
      part.g_cost = Eigen::VectorXd::Zero(g_cost.size());
      part.r_bar = Eigen::MatrixXd::Zero(m, m);
      const Eigen::MatrixXd& xs = rec.rollout.states[static_cast<std::size_t>(k)];
      const Eigen::MatrixXd& du = rec.noise.samples[static_cast<std::size_t>(k)];

      // S_ki depends on running_kj for j >= i and on the terminal cost for
      // every i < N, so running_bar is a prefix sum of S_bar.
      const double terminal_bar = s_bar.row(k).sum();
      StateVec x_bar(xs.cols());
      {
        const StateVec xn = xs.row(N).transpose();
        CostVjp cv = models.cost.terminal_vjp(xn, terminal_bar);
        x_bar = cv.x;
        if (want_cost) part.g_cost += cv.params;
      }
      Eigen::VectorXd running_bar(N);
      double acc = 0.0;
      for (Index j = 0; j < N; ++j) {
        acc += s_bar(k, j);
        running_bar(j) = acc;
      }

      for (Index j = N - 1; j >= 0; --j) {
        const StateVec x = xs.row(j).transpose();
        const ControlVec u = useq.row(j).transpose();
        const ControlVec d = du.row(j).transpose();
        const double rb = running_bar(j);

        DynamicsVjp dv = models.dynamics.vjp(x, u + d, x_bar);
        if (want_dyn) part.g_dyn += dv.params;
        part.u_bar.row(j) += dv.v.transpose();

        CostVjp cv = models.cost.running_vjp(x, rb);
        if (want_cost) part.g_cost += cv.params;
        part.u_bar.row(j) += (rb * (r * (u + d))).transpose();
        if (want_r) {
          part.r_bar += rb * (0.5 * u * u.transpose() +
                              0.5 * c_noise * d * d.transpose() +
                              u * d.transpose());
        }
        x_bar = dv.x + cv.x;
      }
    });

    // u* = u + sum_k w_k du_k passes u_bar straight through.
    for (Index k = 0; k < K; ++k) {
      const PerTrajectory& part = parts[static_cast<std::size_t>(k)];
      u_bar += part.u_bar;
      if (want_dyn) g_dyn += part.g_dyn;
      if (want_cost) g_cost += part.g_cost;
      if (want_r) r_bar += part.r_bar;
    }
  }

  ParamVector grad = current.zeros_like();
  auto put = [&](const std::string& id, const Eigen::VectorXd& g) {
    const ParamSegment* s = grad.find(id);
    grad.values.segment(s->offset, s->length) = g;
  };
  if (want_dyn) put(models.dynamics.id(), g_dyn);
  if (want_cost) put(models.cost.id(), g_cost);
  if (want_r) put(models.control_weight.id(), models.control_weight.vjp(r_bar));
  return grad;
}

// Noise-free objective of a plan:
// phi(x_N) + sum_i q(x_i) + u_i'Ru_i/2.
template <DynamicsModel Dyn, StateCostModel Cost>
double plan_cost(const StateVec& x0, const ControlSequence& useq,
                 const Dyn& dynamics, const Cost& cost,
                 const Eigen::MatrixXd& r) {
  StateVec x = x0;
  double total = 0.0;
  for (Index i = 0; i < useq.rows(); ++i) {
    const ControlVec u = useq.row(i).transpose();
    total += cost.running(x) + 0.5 * u.dot(r * u);
    x = dynamics.forward(x, u);
  }
  return total + cost.terminal(x);
}

}  // namespace picontrol

#endif  // PICONTROL_CONTROLLER_HPP_
