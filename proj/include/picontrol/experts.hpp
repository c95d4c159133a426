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

// Demonstrators: finite-horizon discrete LQR and iLQR.

#ifndef PICONTROL_EXPERTS_HPP_
#define PICONTROL_EXPERTS_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "picontrol/core.hpp"
#include "picontrol/models.hpp"

namespace picontrol {

// minimize sum_{i<N} (x_i'Qx_i + u_i'Ru_i)/2 + x_N'Qx_N/2
// subject to x_{i+1} = F x_i + G u_i.
struct LQRProblem {
  Eigen::MatrixXd F;
  Eigen::MatrixXd G;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd R;
  Index N = 1;

  void validate() const {
    const Index n = F.rows();
    const Index m = G.cols();
    if (n < 1 || m < 1 || F.cols() != n || G.rows() != n || Q.rows() != n ||
        Q.cols() != n || R.rows() != m || R.cols() != m || N < 1) {
      throw ShapeError("LQR problem matrices have inconsistent shapes");
    }
    if (!Q.isApprox(Q.transpose(), 1e-12) && !(Q - Q.transpose()).isZero(1e-14)) {
      throw ParameterError("LQR Q must be symmetric");
    }
    if (Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Q).eigenvalues().minCoeff() <
        -1e-12 * std::max(1.0, Q.norm())) {
      throw ParameterError("LQR Q must be positive semidefinite");
    }
    if (!R.isApprox(R.transpose(), 1e-12) ||
        Eigen::LLT<Eigen::MatrixXd>(R).info() != Eigen::Success) {
      throw ParameterError("LQR R must be symmetric positive definite");
    }
  }
};

// Feedback gains K_i (u_i = -K_i x_i) and value matrices P_0..P_N.
struct RiccatiSolution {
  std::vector<Eigen::MatrixXd> gains;
  std::vector<Eigen::MatrixXd> value;
};

inline RiccatiSolution riccati_recursion(const LQRProblem& p) {
  p.validate();
  RiccatiSolution sol;
  sol.gains.resize(static_cast<std::size_t>(p.N));
  sol.value.resize(static_cast<std::size_t>(p.N + 1));
  Eigen::MatrixXd P = p.Q;
  sol.value.back() = P;
  for (Index i = p.N - 1; i >= 0; --i) {
    const Eigen::MatrixXd gtp = p.G.transpose() * P;
    const Eigen::MatrixXd k =
        (p.R + gtp * p.G).ldlt().solve(gtp * p.F);
    P = p.Q + p.F.transpose() * P * (p.F - p.G * k);
    P = 0.5 * (P + P.transpose()).eval();
    sol.gains[static_cast<std::size_t>(i)] = k;
    sol.value[static_cast<std::size_t>(i)] = P;
  }
  return sol;
}

inline ControlSequence lqr_solve(const LQRProblem& p, const StateVec& x0) {
  if (x0.size() != p.F.rows()) throw ShapeError("x0 has wrong dimension");
  const RiccatiSolution sol = riccati_recursion(p);
  ControlSequence u(p.N, p.G.cols());
  StateVec x = x0;
  for (Index i = 0; i < p.N; ++i) {
    const Eigen::VectorXd ui = -sol.gains[static_cast<std::size_t>(i)] * x;
    u.row(i) = ui.transpose();
    x = p.F * x + p.G * ui;
  }
  return u;
}

inline double lqr_objective(const LQRProblem& p, const StateVec& x0,
                            const ControlSequence& u) {
  StateVec x = x0;
  double total = 0.0;
  for (Index i = 0; i < u.rows(); ++i) {
    const Eigen::VectorXd ui = u.row(i).transpose();
    total += 0.5 * x.dot(p.Q * x) + 0.5 * ui.dot(p.R * ui);
    x = p.F * x + p.G * ui;
  }
  return total + 0.5 * x.dot(p.Q * x);
}

struct ILQRSettings {
  int max_iterations = 100;
  // Relative decrease of the objective below which iterations stop.
  double tolerance = 1e-6;
  // Levenberg term added to the control Hessian.
  double reg_initial = 0.0;
  double reg_min = 1e-8;
  double reg_max = 1e10;
  double reg_factor = 10.0;
  // Step sizes tried in order by the forward line search.
  std::vector<double> line_search = {1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125,
                                     0.015625, 0.0078125, 0.00390625,
                                     0.001953125, 0.0009765625};

  void validate() const {
    if (max_iterations < 0 || !(tolerance >= 0.0) || reg_initial < 0.0 ||
        !(reg_min > 0.0) || !(reg_max >= reg_min) || !(reg_factor > 1.0) ||
        line_search.empty()) {
      throw ParameterError("invalid iLQR settings");
    }
    for (double a : line_search) {
      if (!(a > 0.0)) throw ParameterError("line search steps must be positive");
    }
  }
};

struct ILQRResult {
  ControlSequence controls;
  Eigen::MatrixXd states;  // (N + 1) x n
  double cost = 0.0;
  // Objective of the initial guess followed by every accepted iterate.
  std::vector<double> cost_history;
  int iterations = 0;
  bool converged = false;
  // Set when the last backward/forward pass could not reduce the objective
  // even at maximum regularization; the best iterate is returned.
  bool degraded = false;
};

namespace detail {

template <LinearizableDynamics Dyn, QuadratizableCost Cost>
double ilqr_rollout(const Dyn& f, const Cost& cost, const Eigen::MatrixXd& r,
                    const StateVec& x0, const ControlSequence& u,
                    Eigen::MatrixXd& xs) {
  const Index N = u.rows();
  xs.resize(N + 1, x0.size());
  xs.row(0) = x0.transpose();
  StateVec x = x0;
  double total = 0.0;
  for (Index i = 0; i < N; ++i) {
    const ControlVec ui = u.row(i).transpose();
    total += cost.running(x) + 0.5 * ui.dot(r * ui);
    x = f.forward(x, ui);
    if (!x.allFinite()) {
      throw NumericError("iLQR rollout diverged at step " + std::to_string(i));
    }
    xs.row(i + 1) = x.transpose();
  }
  return total + cost.terminal(x);
}

}  // namespace detail

// Locally optimal controls for phi(x_N) + sum_i q(x_i) + u_i'Ru_i/2 under
// x_{i+1} = f(x_i, u_i), starting from `init` (zeros when empty).
template <LinearizableDynamics Dyn, QuadratizableCost Cost>
ILQRResult ilqr_solve(const Dyn& f, const Cost& cost, const Eigen::MatrixXd& r,
                      const StateVec& x0, Index N, const ILQRSettings& s,
                      const ControlSequence& init = {}) {
  s.validate();
  const Index n = f.state_dim();
  const Index m = f.control_dim();
  if (x0.size() != n || N < 1) throw ShapeError("iLQR: bad x0 or horizon");
  if (r.rows() != m || r.cols() != m) throw ShapeError("iLQR: R has wrong shape");

  ILQRResult res;
  res.controls = init.size() == 0 ? ControlSequence::Zero(N, m) : init;
  if (res.controls.rows() != N || res.controls.cols() != m) {
    throw ShapeError("iLQR: initial control sequence has wrong shape");
  }
  res.cost = detail::ilqr_rollout(f, cost, r, x0, res.controls, res.states);
  res.cost_history.push_back(res.cost);

  std::vector<Eigen::MatrixXd> a(static_cast<std::size_t>(N)), b(a.size());
  std::vector<Eigen::MatrixXd> k_fb(a.size());
  std::vector<Eigen::VectorXd> k_ff(a.size());
  Eigen::VectorXd lx;
  Eigen::MatrixXd lxx;
  Eigen::MatrixXd xs_new;
  double mu = s.reg_initial;

  for (int iter = 0; iter < s.max_iterations; ++iter) {
    for (Index i = 0; i < N; ++i) {
      f.jacobians(res.states.row(i).transpose(), res.controls.row(i).transpose(),
                  a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)]);
    }

    bool improved = false;
    while (!improved) {
      // Backward pass; restart with more regularization if Quu is not PD.
      bool backward_ok = true;
      cost.terminal_derivatives(res.states.row(N).transpose(), lx, lxx);
      Eigen::VectorXd vx = lx;
      Eigen::MatrixXd vxx = lxx;
      double expected = 0.0;
      for (Index i = N - 1; i >= 0; --i) {
        const auto& ai = a[static_cast<std::size_t>(i)];
        const auto& bi = b[static_cast<std::size_t>(i)];
        const StateVec xi = res.states.row(i).transpose();
        const ControlVec ui = res.controls.row(i).transpose();
        cost.running_derivatives(xi, lx, lxx);
        const Eigen::VectorXd qx = lx + ai.transpose() * vx;
        const Eigen::VectorXd qu = r * ui + bi.transpose() * vx;
        const Eigen::MatrixXd qxx = lxx + ai.transpose() * vxx * ai;
        const Eigen::MatrixXd qux = bi.transpose() * vxx * ai;
        Eigen::MatrixXd quu = r + bi.transpose() * vxx * bi;
        quu = 0.5 * (quu + quu.transpose()).eval();
        const Eigen::MatrixXd quu_reg =
            quu + mu * Eigen::MatrixXd::Identity(m, m);
        Eigen::LLT<Eigen::MatrixXd> llt(quu_reg);
        if (llt.info() != Eigen::Success) {
          backward_ok = false;
          break;
        }
        const Eigen::VectorXd kff = -llt.solve(qu);
        const Eigen::MatrixXd kfb = -llt.solve(qux);
        vx = qx + kfb.transpose() * quu * kff + kfb.transpose() * qu +
             qux.transpose() * kff;
        vxx = qxx + kfb.transpose() * quu * kfb + kfb.transpose() * qux +
              qux.transpose() * kfb;
        vxx = 0.5 * (vxx + vxx.transpose()).eval();
        expected -= kff.dot(qu) + 0.5 * kff.dot(quu * kff);
        k_ff[static_cast<std::size_t>(i)] = kff;
        k_fb[static_cast<std::size_t>(i)] = kfb;
      }

      // Predicted decrease is negligible: the current iterate is stationary.
      if (backward_ok &&
          expected <= s.tolerance * std::abs(res.cost) + 1e-14) {
        res.converged = true;
        break;
      }

      if (backward_ok) {
        for (double alpha : s.line_search) {
          ControlSequence u_new(N, m);
          StateVec x = x0;
          bool finite = true;
          for (Index i = 0; i < N; ++i) {
            const StateVec dx = x - res.states.row(i).transpose();
            const Eigen::VectorXd ui =
                res.controls.row(i).transpose() +
                alpha * k_ff[static_cast<std::size_t>(i)] +
                k_fb[static_cast<std::size_t>(i)] * dx;
            u_new.row(i) = ui.transpose();
            x = f.forward(x, ui);
            if (!x.allFinite()) {
              finite = false;
              break;
            }
          }
          if (!finite) continue;
          const double j_new =
              detail::ilqr_rollout(f, cost, r, x0, u_new, xs_new);
          if (j_new < res.cost) {
            const double rel =
                (res.cost - j_new) / std::max(std::abs(res.cost), 1e-300);
            res.controls = std::move(u_new);
            res.states = xs_new;
            res.cost = j_new;
            res.cost_history.push_back(j_new);
            improved = true;
            if (rel < s.tolerance) res.converged = true;
            break;
          }
        }
      }

      if (improved) {
        mu = mu / s.reg_factor;
        if (mu < s.reg_min) mu = 0.0;
        break;
      }
      mu = std::max(s.reg_min, mu * s.reg_factor);
      if (mu > s.reg_max) {
        res.degraded = true;
        break;
      }
    }
    ++res.iterations;
    if (res.degraded || res.converged) break;
  }
  return res;
}

}  // namespace picontrol

#endif  // PICONTROL_EXPERTS_HPP_
