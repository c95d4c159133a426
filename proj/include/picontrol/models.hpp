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

// Differentiable dynamics and state-cost models. Every model evaluates
// forward and returns vector-Jacobian products with respect to its inputs
// and to its own flat parameter block.

#ifndef PICONTROL_MODELS_HPP_
#define PICONTROL_MODELS_HPP_

#include <cmath>
#include <concepts>
#include <string>
#include <utility>

#include "picontrol/core.hpp"

namespace picontrol {

struct DynamicsVjp {
  StateVec x;
  ControlVec v;
  Eigen::VectorXd params;
};

struct CostVjp {
  StateVec x;
  Eigen::VectorXd params;
};

// x' = f(x, v) with v the (possibly perturbed) control.
template <typename M>
concept DynamicsModel =
    Parameterized<M> &&
    requires(const M& f, const StateVec& x, const ControlVec& v) {
      { f.state_dim() } -> std::convertible_to<Index>;
      { f.control_dim() } -> std::convertible_to<Index>;
      { f.forward(x, v) } -> std::convertible_to<StateVec>;
      { f.vjp(x, v, x) } -> std::same_as<DynamicsVjp>;
    };

// Running cost q(x) and terminal cost phi(x). The scalar argument of the
// VJPs is the cotangent of the cost value.
template <typename M>
concept StateCostModel =
    Parameterized<M> && requires(const M& c, const StateVec& x, double s) {
      { c.state_dim() } -> std::convertible_to<Index>;
      { c.running(x) } -> std::convertible_to<double>;
      { c.terminal(x) } -> std::convertible_to<double>;
      { c.running_vjp(x, s) } -> std::same_as<CostVjp>;
      { c.terminal_vjp(x, s) } -> std::same_as<CostVjp>;
    };

// Models that also provide first derivatives as matrices (used by iLQR).
template <typename M>
concept LinearizableDynamics =
    DynamicsModel<M> && requires(const M& f, const StateVec& x,
                                 const ControlVec& u, Eigen::MatrixXd& a) {
      f.jacobians(x, u, a, a);
    };

template <typename M>
concept QuadratizableCost =
    StateCostModel<M> && requires(const M& c, const StateVec& x,
                                  Eigen::VectorXd& g, Eigen::MatrixXd& h) {
      c.running_derivatives(x, g, h);
      c.terminal_derivatives(x, g, h);
    };

namespace detail {

inline void require_finite(const Eigen::Ref<const Eigen::VectorXd>& v,
                           const char* what) {
  if (!v.allFinite()) {
    throw NumericError(std::string("non-finite ") + what);
  }
}

inline void require_dim(Index got, Index want, const char* what) {
  if (got != want) {
    throw ShapeError(std::string(what) + " has dimension " +
                     std::to_string(got) + ", expected " +
                     std::to_string(want));
  }
}

}  // namespace detail

// ------------------------------ control weight ------------------------------

// R = L L^T with L lower triangular. The stored parameters are the rows of
// the lower triangle, with each diagonal entry stored as its logarithm so
// that any parameter vector maps to a positive definite R.
class ControlCostWeight {
 public:
  ControlCostWeight() : ControlCostWeight(Eigen::MatrixXd::Identity(1, 1)) {}

  explicit ControlCostWeight(const Eigen::MatrixXd& factor)
      : m_(factor.rows()) {
    if (factor.rows() != factor.cols() || m_ < 1) {
      throw ShapeError("control weight factor must be square and non-empty");
    }
    params_.resize(m_ * (m_ + 1) / 2);
    Index p = 0;
    for (Index r = 0; r < m_; ++r) {
      for (Index c = 0; c <= r; ++c) {
        if (r == c) {
          if (!(factor(r, r) > 0.0) || !std::isfinite(factor(r, r))) {
            throw ParameterError(
                "control weight factor needs a positive diagonal");
          }
          params_(p++) = std::log(factor(r, r));
        } else {
          params_(p++) = factor(r, c);
        }
      }
      for (Index c = r + 1; c < m_; ++c) {
        if (factor(r, c) != 0.0) {
          throw ParameterError("control weight factor must be lower triangular");
        }
      }
    }
  }

  // Factor of a given positive definite R.
  static ControlCostWeight from_matrix(const Eigen::MatrixXd& r) {
    Eigen::LLT<Eigen::MatrixXd> llt(r);
    if (llt.info() != Eigen::Success) {
      throw ParameterError("control weight matrix is not positive definite");
    }
    return ControlCostWeight(Eigen::MatrixXd(llt.matrixL()));
  }

  std::string id() const { return "control_weight"; }
  Index control_dim() const { return m_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), params_.size(), "control weight parameters");
    params_ = p;
  }

  Eigen::MatrixXd factor() const {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(m_, m_);
    Index p = 0;
    for (Index r = 0; r < m_; ++r) {
      for (Index c = 0; c <= r; ++c) {
        l(r, c) = (r == c) ? std::exp(params_(p)) : params_(p);
        ++p;
      }
    }
    return l;
  }

  Eigen::MatrixXd matrix() const {
    const Eigen::MatrixXd l = factor();
    return l * l.transpose();
  }

  // Parameter cotangent given the cotangent of R (any m x m matrix).
  Eigen::VectorXd vjp(const Eigen::MatrixXd& r_bar) const {
    const Eigen::MatrixXd l = factor();
    const Eigen::MatrixXd l_bar = (r_bar + r_bar.transpose()) * l;
    Eigen::VectorXd g(params_.size());
    Index p = 0;
    for (Index r = 0; r < m_; ++r) {
      for (Index c = 0; c <= r; ++c) {
        g(p++) = (r == c) ? l_bar(r, r) * l(r, r) : l_bar(r, c);
      }
    }
    return g;
  }

 private:
  Index m_;
  Eigen::VectorXd params_;
};

inline Eigen::MatrixXd control_weight_matrix(const ControlCostWeight& w) {
  return w.matrix();
}

// q(x) + u'Ru/2 + (1 - 1/nu)/2 du'R du + u'R du.
inline double modified_running_cost(double q_val, const ControlVec& u,
                                    const ControlVec& du,
                                    const Eigen::MatrixXd& r, double nu) {
  const Eigen::VectorXd ru = r * u;
  const Eigen::VectorXd rdu = r * du;
  return q_val + 0.5 * u.dot(ru) + 0.5 * (1.0 - 1.0 / nu) * du.dot(rdu) +
         u.dot(rdu);
}

// ------------------------------ linear models -------------------------------

// f(x, v) = F x + G v. Parameters: F then G, each row-major.
class LinearDynamics {
 public:
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>;

  LinearDynamics() = default;
  LinearDynamics(const Eigen::MatrixXd& f, const Eigen::MatrixXd& g)
      : n_(f.rows()), m_(g.cols()), f_(f), g_(g) {
    if (f.cols() != n_ || g.rows() != n_ || n_ < 1 || m_ < 1) {
      throw ShapeError("linear dynamics needs F n x n and G n x m");
    }
  }

  std::string id() const { return "dynamics"; }
  Index state_dim() const { return n_; }
  Index control_dim() const { return m_; }
  const Eigen::MatrixXd& F() const { return f_; }
  const Eigen::MatrixXd& G() const { return g_; }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(n_ * n_ + n_ * m_);
    Eigen::Map<RowMajor>(p.data(), n_, n_) = f_;
    Eigen::Map<RowMajor>(p.data() + n_ * n_, n_, m_) = g_;
    return p;
  }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), n_ * n_ + n_ * m_, "linear dynamics parameters");
    f_ = Eigen::Map<const RowMajor>(p.data(), n_, n_);
    g_ = Eigen::Map<const RowMajor>(p.data() + n_ * n_, n_, m_);
  }

  StateVec forward(const StateVec& x, const ControlVec& v) const {
    detail::require_dim(x.size(), n_, "state");
    detail::require_dim(v.size(), m_, "control");
    detail::require_finite(x, "state");
    detail::require_finite(v, "control");
    return f_ * x + g_ * v;
  }

  DynamicsVjp vjp(const StateVec& x, const ControlVec& v,
                  const StateVec& x_next_bar) const {
    detail::require_dim(x_next_bar.size(), n_, "state cotangent");
    DynamicsVjp out;
    out.x = f_.transpose() * x_next_bar;
    out.v = g_.transpose() * x_next_bar;
    out.params.resize(n_ * n_ + n_ * m_);
    Eigen::Map<RowMajor>(out.params.data(), n_, n_) = x_next_bar * x.transpose();
    Eigen::Map<RowMajor>(out.params.data() + n_ * n_, n_, m_) =
        x_next_bar * v.transpose();
    return out;
  }

  void jacobians(const StateVec&, const ControlVec&, Eigen::MatrixXd& a,
                 Eigen::MatrixXd& b) const {
    a = f_;
    b = g_;
  }

 private:
  Index n_ = 0;
  Index m_ = 0;
  Eigen::MatrixXd f_;
  Eigen::MatrixXd g_;
};

// q(x) = phi(x) = x'Qx/2. Q is stored row-major; only its symmetric part
// affects the value.
class QuadraticCost {
 public:
  using RowMajor = LinearDynamics::RowMajor;

  QuadraticCost() = default;
  explicit QuadraticCost(const Eigen::MatrixXd& q) : n_(q.rows()), q_(q) {
    if (q.cols() != n_ || n_ < 1) throw ShapeError("Q must be square");
  }

  std::string id() const { return "cost"; }
  Index state_dim() const { return n_; }
  const Eigen::MatrixXd& Q() const { return q_; }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(n_ * n_);
    Eigen::Map<RowMajor>(p.data(), n_, n_) = q_;
    return p;
  }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), n_ * n_, "quadratic cost parameters");
    q_ = Eigen::Map<const RowMajor>(p.data(), n_, n_);
  }

  double running(const StateVec& x) const {
    detail::require_dim(x.size(), n_, "state");
    return 0.5 * x.dot(q_ * x);
  }
  double terminal(const StateVec& x) const { return running(x); }

  CostVjp running_vjp(const StateVec& x, double s) const {
    CostVjp out;
    out.x = 0.5 * s * (q_ + q_.transpose()) * x;
    out.params.resize(n_ * n_);
    Eigen::Map<RowMajor>(out.params.data(), n_, n_) = 0.5 * s * x * x.transpose();
    return out;
  }
  CostVjp terminal_vjp(const StateVec& x, double s) const {
    return running_vjp(x, s);
  }

  void running_derivatives(const StateVec& x, Eigen::VectorXd& g,
                           Eigen::MatrixXd& h) const {
    h = 0.5 * (q_ + q_.transpose());
    g = h * x;
  }
  void terminal_derivatives(const StateVec& x, Eigen::VectorXd& g,
                            Eigen::MatrixXd& h) const {
    running_derivatives(x, g, h);
  }

 private:
  Index n_ = 0;
  Eigen::MatrixXd q_;
};

// ------------------------------ neural models -------------------------------

// in -> tanh(hidden) -> out, biases on both layers. Parameter order:
// W1 (row-major), b1, W2 (row-major), b2.
class TanhMlp {
 public:
  using RowMajor = LinearDynamics::RowMajor;

  TanhMlp() = default;
  TanhMlp(Index in, Index hidden, Index out)
      : in_(in), hidden_(hidden), out_(out),
        params_(Eigen::VectorXd::Zero(parameter_count(in, hidden, out))) {}

  static constexpr Index parameter_count(Index in, Index hidden, Index out) {
    return hidden * in + hidden + out * hidden + out;
  }

  Index input_dim() const { return in_; }
  Index hidden_dim() const { return hidden_; }
  Index output_dim() const { return out_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), params_.size(), "mlp parameters");
    params_ = p;
  }

  // Glorot-uniform weights, zero biases.
  void initialize(SeededRng& rng) {
    params_.setZero();
    const double a1 = std::sqrt(6.0 / static_cast<double>(in_ + hidden_));
    const double a2 = std::sqrt(6.0 / static_cast<double>(hidden_ + out_));
    for (Index i = 0; i < hidden_ * in_; ++i) params_(i) = rng.uniform(-a1, a1);
    const Index w2 = hidden_ * in_ + hidden_;
    for (Index i = 0; i < out_ * hidden_; ++i) {
      params_(w2 + i) = rng.uniform(-a2, a2);
    }
  }

  Eigen::VectorXd hidden(const Eigen::VectorXd& input) const {
    return (w1() * input + b1()).array().tanh().matrix();
  }

  Eigen::VectorXd forward(const Eigen::VectorXd& input) const {
    return w2() * hidden(input) + b2();
  }

  // Returns the input cotangent; parameter cotangent is written to p_bar.
  Eigen::VectorXd vjp(const Eigen::VectorXd& input,
                      const Eigen::VectorXd& out_bar,
                      Eigen::VectorXd& p_bar) const {
    const Eigen::VectorXd h = hidden(input);
    p_bar.resize(params_.size());
    const Index o_w1 = 0;
    const Index o_b1 = hidden_ * in_;
    const Index o_w2 = o_b1 + hidden_;
    const Index o_b2 = o_w2 + out_ * hidden_;
    Eigen::Map<RowMajor>(p_bar.data() + o_w2, out_, hidden_) =
        out_bar * h.transpose();
    p_bar.segment(o_b2, out_) = out_bar;
    const Eigen::VectorXd h_bar = w2().transpose() * out_bar;
    const Eigen::VectorXd pre_bar =
        (h_bar.array() * (1.0 - h.array().square())).matrix();
    Eigen::Map<RowMajor>(p_bar.data() + o_w1, hidden_, in_) =
        pre_bar * input.transpose();
    p_bar.segment(o_b1, hidden_) = pre_bar;
    return w1().transpose() * pre_bar;
  }

 private:
  Eigen::Map<const RowMajor> w1() const {
    return {params_.data(), hidden_, in_};
  }
  Eigen::Map<const Eigen::VectorXd> b1() const {
    return {params_.data() + hidden_ * in_, hidden_};
  }
  Eigen::Map<const RowMajor> w2() const {
    return {params_.data() + hidden_ * in_ + hidden_, out_, hidden_};
  }
  Eigen::Map<const Eigen::VectorXd> b2() const {
    return {params_.data() + hidden_ * in_ + hidden_ + out_ * hidden_, out_};
  }

  Index in_ = 0;
  Index hidden_ = 0;
  Index out_ = 0;
  Eigen::VectorXd params_;
};

// Pendulum dynamics learned as an acceleration network over
// (theta, theta_dot, u), integrated with one explicit Euler step:
//   theta_dot' = theta_dot + dt * a,  theta' = theta + dt * theta_dot.
class MLPDynamics {
 public:
  static constexpr Index kHidden = 12;

  explicit MLPDynamics(double dt = 0.1, Index hidden = kHidden)
      : dt_(dt), net_(3, hidden, 1) {}

  std::string id() const { return "dynamics"; }
  Index state_dim() const { return 2; }
  Index control_dim() const { return 1; }
  double dt() const { return dt_; }
  Index hidden_dim() const { return net_.hidden_dim(); }
  const Eigen::VectorXd& parameters() const { return net_.parameters(); }
  void set_parameters(const Eigen::VectorXd& p) { net_.set_parameters(p); }
  void initialize(SeededRng& rng) { net_.initialize(rng); }

  double acceleration(const StateVec& x, const ControlVec& v) const {
    return net_.forward(Eigen::Vector3d(x(0), x(1), v(0)))(0);
  }

  StateVec forward(const StateVec& x, const ControlVec& v) const {
    detail::require_dim(x.size(), 2, "state");
    detail::require_dim(v.size(), 1, "control");
    detail::require_finite(x, "state");
    detail::require_finite(v, "control");
    const double a = acceleration(x, v);
    StateVec next(2);
    next(0) = x(0) + dt_ * x(1);
    next(1) = x(1) + dt_ * a;
    return next;
  }

  DynamicsVjp vjp(const StateVec& x, const ControlVec& v,
                  const StateVec& x_next_bar) const {
    detail::require_dim(x_next_bar.size(), 2, "state cotangent");
    const Eigen::VectorXd a_bar =
        Eigen::VectorXd::Constant(1, dt_ * x_next_bar(1));
    DynamicsVjp out;
    const Eigen::VectorXd in_bar =
        net_.vjp(Eigen::Vector3d(x(0), x(1), v(0)), a_bar, out.params);
    out.x.resize(2);
    out.x(0) = x_next_bar(0) + in_bar(0);
    out.x(1) = x_next_bar(1) + dt_ * x_next_bar(0) + in_bar(1);
    out.v = Eigen::VectorXd::Constant(1, in_bar(2));
    return out;
  }

 private:
  double dt_;
  TanhMlp net_;
};

// q(theta, theta_dot) = ||net(theta, theta_dot)||^2; the terminal cost is
// the same network.
class MLPCost {
 public:
  static constexpr Index kHidden = 12;
  static constexpr Index kOutputs = 12;

  explicit MLPCost(Index hidden = kHidden, Index outputs = kOutputs)
      : net_(2, hidden, outputs) {}

  std::string id() const { return "cost"; }
  Index state_dim() const { return 2; }
  Index hidden_dim() const { return net_.hidden_dim(); }
  Index output_dim() const { return net_.output_dim(); }
  const Eigen::VectorXd& parameters() const { return net_.parameters(); }
  void set_parameters(const Eigen::VectorXd& p) { net_.set_parameters(p); }
  void initialize(SeededRng& rng) { net_.initialize(rng); }

  double running(const StateVec& x) const {
    detail::require_dim(x.size(), 2, "state");
    return net_.forward(x).squaredNorm();
  }
  double terminal(const StateVec& x) const { return running(x); }

  CostVjp running_vjp(const StateVec& x, double s) const {
    CostVjp out;
    const Eigen::VectorXd y = net_.forward(x);
    out.x = net_.vjp(x, 2.0 * s * y, out.params);
    return out;
  }
  CostVjp terminal_vjp(const StateVec& x, double s) const {
    return running_vjp(x, s);
  }

 private:
  TanhMlp net_;
};

// q* = phi* = (1 + cos theta)^2 + theta_dot^2.
class PendulumTeacherCost {
 public:
  static constexpr double kControlWeight = 5.0;

  std::string id() const { return "cost"; }
  Index state_dim() const { return 2; }
  Eigen::VectorXd parameters() const { return {}; }
  void set_parameters(const Eigen::VectorXd& p) {
    detail::require_dim(p.size(), 0, "teacher cost parameters");
  }

  double running(const StateVec& x) const {
    detail::require_dim(x.size(), 2, "state");
    const double c = 1.0 + std::cos(x(0));
    return c * c + x(1) * x(1);
  }
  double terminal(const StateVec& x) const { return running(x); }

  CostVjp running_vjp(const StateVec& x, double s) const {
    CostVjp out;
    out.x.resize(2);
    out.x(0) = -2.0 * s * (1.0 + std::cos(x(0))) * std::sin(x(0));
    out.x(1) = 2.0 * s * x(1);
    return out;
  }
  CostVjp terminal_vjp(const StateVec& x, double s) const {
    return running_vjp(x, s);
  }

  void running_derivatives(const StateVec& x, Eigen::VectorXd& g,
                           Eigen::MatrixXd& h) const {
    const double s = std::sin(x(0));
    const double c = std::cos(x(0));
    g.resize(2);
    g(0) = -2.0 * (1.0 + c) * s;
    g(1) = 2.0 * x(1);
    h = Eigen::MatrixXd::Zero(2, 2);
    h(0, 0) = 2.0 * s * s - 2.0 * (1.0 + c) * c;
    h(1, 1) = 2.0;
  }
  void terminal_derivatives(const StateVec& x, Eigen::VectorXd& g,
                            Eigen::MatrixXd& h) const {
    running_derivatives(x, g, h);
  }

  static ControlCostWeight control_weight() {
    return ControlCostWeight(
        Eigen::MatrixXd::Constant(1, 1, std::sqrt(kControlWeight)));
  }
};

}  // namespace picontrol

#endif  // PICONTROL_MODELS_HPP_
