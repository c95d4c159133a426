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

// Benchmark systems and closed-loop simulation.

#ifndef PICONTROL_ENVS_HPP_
#define PICONTROL_ENVS_HPP_

#include <unsupported/Eigen/MatrixFunctions>

#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <tuple>
#include <string>
#include <utility>

#include "picontrol/controller.hpp"
#include "picontrol/core.hpp"
#include "picontrol/experts.hpp"
#include "picontrol/models.hpp"

namespace picontrol {

// ------------------------------ linear system -------------------------------

struct LinearTeacher {
  static constexpr double kDt = 0.01;

  Eigen::MatrixXd F;  // 4 x 4, orthogonal
  Eigen::MatrixXd G;  // 4 x 2, bottom block zero
  Eigen::MatrixXd Q;
  Eigen::MatrixXd R;

  LinearDynamics dynamics() const { return LinearDynamics(F, G); }
  QuadraticCost cost() const { return QuadraticCost(Q); }

  LQRProblem lqr_problem(Index horizon) const {
    return LQRProblem{F, G, Q, R, horizon};
  }
};

// exp(dt (A - A')) for a given generator A.
inline Eigen::MatrixXd rotation_from_generator(const Eigen::MatrixXd& a,
                                               double dt) {
  const Eigen::MatrixXd skew = dt * (a - a.transpose());
  return skew.exp();
}

// F = exp(dt (A - A')) with A_ij ~ N(0, 1); G = [Gc; 0] with
// Gc_ij ~ N(0, dt) (dt read as the standard deviation).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> sample_linear_dynamics(
    SeededRng& rng, double dt = LinearTeacher::kDt) {
  Eigen::MatrixXd a(4, 4);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 4; ++j) a(i, j) = rng.normal();
  }
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(4, 2);
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) g(i, j) = rng.normal(0.0, dt);
  }
  return {rotation_from_generator(a, dt), g};
}

inline LinearTeacher sample_linear_teacher(SeededRng& rng) {
  constexpr double dt = LinearTeacher::kDt;
  LinearTeacher t;
  std::tie(t.F, t.G) = sample_linear_dynamics(rng, dt);
  t.Q = Eigen::MatrixXd::Identity(4, 4) * dt;
  t.R = Eigen::MatrixXd::Identity(2, 2) * dt;
  return t;
}

// ------------------------------- pendulum -----------------------------------

namespace pendulum {

constexpr double kGain = 0.5;
constexpr double kDt = 0.1;
constexpr double kPi = std::numbers::pi;

// Angle mapped to (-pi, pi].
inline double wrap_angle(double theta) {
  double r = std::remainder(theta, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

inline Eigen::Vector2d vector_field(const Eigen::Vector2d& s, double u) {
  return {s(1), -std::sin(s(0)) + kGain * u};
}

// One RK4 step of theta'' = -sin(theta) + k u without wrapping.
inline Eigen::Vector2d rk4(const Eigen::Vector2d& s, double u, double h) {
  const Eigen::Vector2d k1 = vector_field(s, u);
  const Eigen::Vector2d k2 = vector_field(s + 0.5 * h * k1, u);
  const Eigen::Vector2d k3 = vector_field(s + 0.5 * h * k2, u);
  const Eigen::Vector2d k4 = vector_field(s + h * k3, u);
  return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Jacobians of rk4 with respect to state and control, by chain rule
// through the four stages.
inline void rk4_jacobians(const Eigen::Vector2d& s, double u, double h,
                          Eigen::Matrix2d& ds, Eigen::Vector2d& du) {
  auto js = [](const Eigen::Vector2d& p) {
    Eigen::Matrix2d j;
    j << 0.0, 1.0, -std::cos(p(0)), 0.0;
    return j;
  };
  const Eigen::Vector2d ju(0.0, kGain);
  const Eigen::Matrix2d eye = Eigen::Matrix2d::Identity();

  const Eigen::Vector2d k1 = vector_field(s, u);
  const Eigen::Vector2d s2 = s + 0.5 * h * k1;
  const Eigen::Vector2d k2 = vector_field(s2, u);
  const Eigen::Vector2d s3 = s + 0.5 * h * k2;
  const Eigen::Vector2d k3 = vector_field(s3, u);
  const Eigen::Vector2d s4 = s + h * k3;

  const Eigen::Matrix2d dk1 = js(s);
  const Eigen::Vector2d dk1u = ju;
  const Eigen::Matrix2d dk2 = js(s2) * (eye + 0.5 * h * dk1);
  const Eigen::Vector2d dk2u = js(s2) * (0.5 * h * dk1u) + ju;
  const Eigen::Matrix2d dk3 = js(s3) * (eye + 0.5 * h * dk2);
  const Eigen::Vector2d dk3u = js(s3) * (0.5 * h * dk2u) + ju;
  const Eigen::Matrix2d dk4 = js(s4) * (eye + h * dk3);
  const Eigen::Vector2d dk4u = js(s4) * (h * dk3u) + ju;

  ds = eye + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4);
  du = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u);
}

inline double energy(const Eigen::Vector2d& s) {
  return 0.5 * s(1) * s(1) - std::cos(s(0));
}

// Upright means within tolerance of either goal angle.
inline bool upright(double theta, double tolerance = 0.5) {
  const double w = wrap_angle(theta);
  return std::abs(w - kPi) < tolerance || std::abs(w + kPi) < tolerance;
}

}  // namespace pendulum

// One RK4 step (dt = 0.1) of the teacher pendulum; theta wrapped to
// (-pi, pi].
inline StateVec pendulum_step(const StateVec& x, double u) {
  if (x.size() != 2) throw ShapeError("pendulum state has dimension 2");
  if (!x.allFinite() || !std::isfinite(u)) {
    throw NumericError("non-finite pendulum input");
  }
  Eigen::Vector2d next = pendulum::rk4(Eigen::Vector2d(x(0), x(1)), u,
                                       pendulum::kDt);
  next(0) = pendulum::wrap_angle(next(0));
  return StateVec(next);
}

// Teacher pendulum as a parameter-free dynamics model. Angles are not
// wrapped so that planners see a smooth map; the teacher cost is periodic.
class PendulumTeacherDynamics {
 public:
  explicit PendulumTeacherDynamics(double dt = pendulum::kDt) : dt_(dt) {}

  std::string id() const { return "dynamics"; }
  Index state_dim() const { return 2; }
  Index control_dim() const { return 1; }
  double dt() const { return dt_; }
  Eigen::VectorXd parameters() const { return {}; }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), 0, "teacher dynamics parameters");
  }

  StateVec forward(const StateVec& x, const ControlVec& v) const {
    detail::require_dim(x.size(), 2, "state");
    detail::require_dim(v.size(), 1, "control");
    return StateVec(pendulum::rk4(Eigen::Vector2d(x(0), x(1)), v(0), dt_));
  }

  DynamicsVjp vjp(const StateVec& x, const ControlVec& v,
                  const StateVec& x_next_bar) const {
    Eigen::Matrix2d ds;
    Eigen::Vector2d du;
    pendulum::rk4_jacobians(Eigen::Vector2d(x(0), x(1)), v(0), dt_, ds, du);
    DynamicsVjp out;
    out.x = ds.transpose() * x_next_bar;
    out.v = Eigen::VectorXd::Constant(1, du.dot(x_next_bar));
    return out;
  }

  void jacobians(const StateVec& x, const ControlVec& u, Eigen::MatrixXd& a,
                 Eigen::MatrixXd& b) const {
    Eigen::Matrix2d ds;
    Eigen::Vector2d du;
    pendulum::rk4_jacobians(Eigen::Vector2d(x(0), x(1)), u(0), dt_, ds, du);
    a = ds;
    b = du;
  }

 private:
  double dt_;
};

// ---------------------------- closed-loop MPC -------------------------------

// A system driven in closed loop: advances the true state and scores it.
template <typename P>
concept Plant = requires(const P& p, const StateVec& x, const ControlVec& u,
                         const Eigen::MatrixXd& states) {
  { p.dt() } -> std::convertible_to<double>;
  { p.step(x, u) } -> std::convertible_to<StateVec>;
  { p.stage_cost(x, u) } -> std::convertible_to<double>;
  { p.terminal_cost(x) } -> std::convertible_to<double>;
  { p.success(states) } -> std::convertible_to<bool>;
};

// Receding-horizon planner. `init` seeds the plan; `warm` tells whether it
// is the shifted previous plan rather than the default zero sequence.
template <typename C>
concept MpcController = requires(C& c, const StateVec& x,
                                 const ControlSequence& init, Index step,
                                 bool warm) {
  { c.horizon() } -> std::convertible_to<Index>;
  { c.control_dim() } -> std::convertible_to<Index>;
  { c.plan(x, init, step, warm) } -> std::convertible_to<ControlSequence>;
};

struct SimulationResult {
  Eigen::MatrixXd states;    // (T + 1) x n
  Eigen::MatrixXd controls;  // T x m
  Eigen::VectorXd stage_costs;  // T + 1 entries; the last is terminal
  double dt = 0.0;
  bool success = false;
  double trajectory_cost = 0.0;
  double wall_time = 0.0;  // seconds
};

// True iff some contiguous run of upright samples spans at least
// `window` seconds.
inline bool success_metric(const Eigen::MatrixXd& states, double dt,
                           double window = 5.0, double tolerance = 0.5) {
  Index run_start = -1;
  for (Index t = 0; t < states.rows(); ++t) {
    if (pendulum::upright(states(t, 0), tolerance)) {
      if (run_start < 0) run_start = t;
      if (static_cast<double>(t - run_start) * dt >= window - 1e-9) return true;
    } else {
      run_start = -1;
    }
  }
  return false;
}

// phi(x_T) + sum_i q(x_i) + u_i'R u_i / 2 on one realized trajectory.
template <StateCostModel Cost>
double trajectory_cost(const Eigen::MatrixXd& states,
                       const Eigen::MatrixXd& controls, const Cost& cost,
                       const Eigen::MatrixXd& r) {
  if (states.rows() != controls.rows() + 1) {
    throw ShapeError("trajectory needs one more state than controls");
  }
  double total = 0.0;
  for (Index t = 0; t < controls.rows(); ++t) {
    const ControlVec u = controls.row(t).transpose();
    total += cost.running(states.row(t).transpose()) + 0.5 * u.dot(r * u);
  }
  return total + cost.terminal(states.row(states.rows() - 1).transpose());
}

class PendulumPlant {
 public:
  double dt() const { return pendulum::kDt; }
  StateVec step(const StateVec& x, const ControlVec& u) const {
    return pendulum_step(x, u(0));
  }
  double stage_cost(const StateVec& x, const ControlVec& u) const {
    return cost_.running(x) +
           0.5 * PendulumTeacherCost::kControlWeight * u.squaredNorm();
  }
  double terminal_cost(const StateVec& x) const { return cost_.terminal(x); }
  bool success(const Eigen::MatrixXd& states) const {
    return success_metric(states, dt());
  }

 private:
  PendulumTeacherCost cost_;
};

inline Eigen::MatrixXd shift_plan(const ControlSequence& plan) {
  ControlSequence out = ControlSequence::Zero(plan.rows(), plan.cols());
  if (plan.rows() > 1) out.topRows(plan.rows() - 1) = plan.bottomRows(plan.rows() - 1);
  return out;
}

template <MpcController Controller, Plant P>
SimulationResult mpc_simulate(Controller& controller, const P& plant,
                              const StateVec& x0, double duration,
                              bool warm_start) {
  const auto t_start = std::chrono::steady_clock::now();
  const double dt = plant.dt();
  const Index steps = static_cast<Index>(std::llround(duration / dt));
  if (steps < 0) throw ParameterError("negative simulation duration");
  if (steps > 0 && controller.horizon() > steps) {
    throw ParameterError("controller horizon exceeds the simulation length");
  }
  const Index m = controller.control_dim();

  SimulationResult res;
  res.dt = dt;
  res.states.resize(steps + 1, x0.size());
  res.controls.resize(steps, m);
  res.stage_costs.resize(steps + 1);
  res.states.row(0) = x0.transpose();

  StateVec x = x0;
  ControlSequence plan = ControlSequence::Zero(controller.horizon(), m);
  for (Index t = 0; t < steps; ++t) {
    const bool warm = warm_start && t > 0;
    const ControlSequence init =
        warm ? shift_plan(plan)
             : ControlSequence::Zero(controller.horizon(), m);
    plan = controller.plan(x, init, t, warm);
    const ControlVec u = plan.row(0).transpose();
    res.controls.row(t) = u.transpose();
    res.stage_costs(t) = plant.stage_cost(x, u);
    x = plant.step(x, u);
    if (!x.allFinite()) {
      throw NumericError("plant diverged at step " + std::to_string(t));
    }
    res.states.row(t + 1) = x.transpose();
  }
  res.stage_costs(steps) = plant.terminal_cost(x);
  res.trajectory_cost = res.stage_costs.sum();
  res.success = steps > 0 && plant.success(res.states);
  res.wall_time = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t_start)
                      .count();
  return res;
}

// iLQR re-solved at every step, seeded with `init`.
template <LinearizableDynamics Dyn, QuadratizableCost Cost>
class IlqrMpcController {
 public:
  IlqrMpcController(Dyn dynamics, Cost cost, Eigen::MatrixXd r, Index horizon,
                    ILQRSettings settings = {})
      : dynamics_(std::move(dynamics)), cost_(std::move(cost)),
        r_(std::move(r)), horizon_(horizon), settings_(std::move(settings)) {}

  Index horizon() const { return horizon_; }
  Index control_dim() const { return dynamics_.control_dim(); }

  ControlSequence plan(const StateVec& x, const ControlSequence& init, Index,
                       bool) {
    return ilqr_solve(dynamics_, cost_, r_, x, horizon_, settings_, init)
        .controls;
  }

 private:
  Dyn dynamics_;
  Cost cost_;
  Eigen::MatrixXd r_;
  Index horizon_;
  ILQRSettings settings_;
};

// Path-integral MPC. Cold plans run hp.U kernel iterations, warm-started
// plans run warm_iterations. The noise of step t comes from
// rng.substream(t), so a run is reproducible from its seed.
template <DynamicsModel Dyn, StateCostModel Cost>
class PiMpcController {
 public:
  PiMpcController(PiModels<Dyn, Cost> models, PIHyperParams hp,
                  Index warm_iterations, SeededRng rng)
      : models_(std::move(models)), hp_(hp), warm_iterations_(warm_iterations),
        rng_(rng) {
    hp_.validate();
    if (warm_iterations_ < 1) throw ParameterError("warm iterations must be >= 1");
  }

  Index horizon() const { return hp_.N; }
  Index control_dim() const { return models_.control_dim(); }
  const PiModels<Dyn, Cost>& models() const { return models_; }

  ControlSequence plan(const StateVec& x, const ControlSequence& init,
                       Index step, bool warm) {
    PIHyperParams hp = hp_;
    if (warm) hp.U = warm_iterations_;
    return pi_net_forward(x, init, models_, hp,
                          rng_.substream(static_cast<std::uint64_t>(step)),
                          false)
        .controls;
  }

 private:
  PiModels<Dyn, Cost> models_;
  PIHyperParams hp_;
  Index warm_iterations_;
  SeededRng rng_;
};

// theta ~ U[-pi, pi], theta_dot ~ U[-1, 1].
inline StateVec sample_pendulum_start(SeededRng& rng) {
  StateVec x(2);
  x(0) = rng.uniform(-pendulum::kPi, pendulum::kPi);
  x(1) = rng.uniform(-1.0, 1.0);
  return x;
}

inline ILQRSettings expert_ilqr_settings() {
  ILQRSettings s;
  s.max_iterations = 50;
  return s;
}

inline IlqrMpcController<PendulumTeacherDynamics, PendulumTeacherCost>
make_pendulum_expert(Index horizon = 30) {
  return {PendulumTeacherDynamics(), PendulumTeacherCost(),
          PendulumTeacherCost::control_weight().matrix(), horizon,
          expert_ilqr_settings()};
}

// CSV log: time, state columns, control columns, instantaneous cost. The
// final row carries the terminal cost and empty control cells.
inline void write_trajectory_csv(std::ostream& os, const SimulationResult& r) {
  const Index n = r.states.cols();
  const Index m = r.controls.cols();
  os << "time";
  for (Index i = 0; i < n; ++i) os << ",x" << i;
  for (Index j = 0; j < m; ++j) os << ",u" << j;
  os << ",cost\n";
  os.precision(17);
  for (Index t = 0; t < r.states.rows(); ++t) {
    os << static_cast<double>(t) * r.dt;
    for (Index i = 0; i < n; ++i) os << ',' << r.states(t, i);
    for (Index j = 0; j < m; ++j) {
      os << ',';
      if (t < r.controls.rows()) os << r.controls(t, j);
    }
    os << ',' << r.stage_costs(t) << '\n';
  }
}

}  // namespace picontrol

#endif  // PICONTROL_ENVS_HPP_
