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

// Shared vocabulary: vector aliases, hyperparameters, flat parameter
// vectors, counter-based random streams and an ordered parallel loop.

#ifndef PICONTROL_CORE_HPP_
#define PICONTROL_CORE_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace picontrol {

// ------------------------------- errors -------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Array shapes that do not agree with a model or configuration.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain hyperparameter or model parameter.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced during evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A recorded tape that does not belong to the models it is replayed with.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Training configuration whose reverse-pass storage exceeds the budget.
class MemoryBudgetError : public Error {
 public:
  using Error::Error;
};

// ------------------------------- types --------------------------------------

using Index = Eigen::Index;
using StateVec = Eigen::VectorXd;
using ControlVec = Eigen::VectorXd;
// Row i holds the control applied at step i; shape N x m.
using ControlSequence = Eigen::MatrixXd;

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  return a.allFinite();
}

// K independent perturbation sequences, each N x m.
struct NoiseTensor {
  std::vector<Eigen::MatrixXd> samples;
  double sigma = 0.0;

  Index trajectories() const { return static_cast<Index>(samples.size()); }
  Index horizon() const { return samples.empty() ? 0 : samples.front().rows(); }
  Index control_dim() const {
    return samples.empty() ? 0 : samples.front().cols();
  }
};

struct PIHyperParams {
  double lambda = 0.01;
  double nu = 1500.0;
  double sigma = 0.2;
  Index K = 100;
  Index N = 30;
  Index U = 200;

  // Coefficient (1 - 1/nu) of the noise quadratic in the modified cost.
  double noise_cost_coeff() const { return 1.0 - 1.0 / nu; }

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) {
      throw ParameterError("lambda must be positive and finite");
    }
    if (!(nu > 0.0) || !std::isfinite(noise_cost_coeff())) {
      throw ParameterError("nu must be positive");
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ParameterError("sigma must be positive and finite");
    }
    if (K < 1 || N < 1 || U < 1) {
      throw ParameterError("K, N and U must all be at least 1");
    }
  }
};

// ------------------------------ parameters ----------------------------------

struct ParamSegment {
  std::string id;
  Index offset = 0;
  Index length = 0;

  friend bool operator==(const ParamSegment&, const ParamSegment&) = default;
};

// Concatenation of model parameters with the layout needed to split them
// back. Segments are disjoint and cover [0, size()).
struct ParamVector {
  std::vector<ParamSegment> layout;
  Eigen::VectorXd values;

  Index size() const { return values.size(); }

  const ParamSegment* find(std::string_view id) const {
    for (const auto& s : layout) {
      if (s.id == id) return &s;
    }
    return nullptr;
  }

  Eigen::VectorXd segment(std::string_view id) const {
    const ParamSegment* s = find(id);
    if (s == nullptr) {
      throw ShapeError("no parameter segment named '" + std::string(id) + "'");
    }
    return values.segment(s->offset, s->length);
  }

  // Zero vector with the same layout.
  ParamVector zeros_like() const {
    return ParamVector{layout, Eigen::VectorXd::Zero(values.size())};
  }

  bool same_layout(const ParamVector& other) const {
    return layout == other.layout && values.size() == other.values.size();
  }

  void check_layout() const {
    Index expect = 0;
    for (const auto& s : layout) {
      if (s.offset != expect || s.length < 0) {
        throw ShapeError("parameter layout segments are not contiguous");
      }
      expect += s.length;
    }
    if (expect != values.size()) {
      throw ShapeError("parameter layout does not cover the value vector");
    }
  }
};

// A model that owns a flat parameter block.
template <typename M>
concept Parameterized = requires(const M& cm, M& m, const Eigen::VectorXd& p) {
  { cm.id() } -> std::convertible_to<std::string>;
  { cm.parameters() } -> std::convertible_to<Eigen::VectorXd>;
  m.set_parameters(p);
};

template <Parameterized... Models>
ParamVector pack_params(const Models&... models) {
  ParamVector pv;
  Index total = 0;
  auto record = [&](const auto& model) {
    const Index len = model.parameters().size();
    pv.layout.push_back(ParamSegment{std::string(model.id()), total, len});
    total += len;
  };
  (record(models), ...);
  pv.values.resize(total);
  Index i = 0;
  auto copy = [&](const auto& model) {
    const Eigen::VectorXd p = model.parameters();
    pv.values.segment(pv.layout[static_cast<std::size_t>(i)].offset, p.size()) = p;
    ++i;
  };
  (copy(models), ...);
  return pv;
}

template <Parameterized... Models>
void unpack_params(const ParamVector& pv, Models&... models) {
  pv.check_layout();
  if (pv.layout.size() != sizeof...(Models)) {
    throw ShapeError("parameter layout has " + std::to_string(pv.layout.size()) +
                     " segments, expected " + std::to_string(sizeof...(Models)));
  }
  std::size_t i = 0;
  auto check = [&](const auto& model) {
    const ParamSegment& s = pv.layout[i++];
    if (s.id != model.id() || s.length != model.parameters().size()) {
      throw ShapeError("parameter segment '" + s.id +
                       "' does not match model '" + std::string(model.id()) +
                       "'");
    }
  };
  (check(models), ...);
  i = 0;
  auto assign = [&](auto& model) {
    const ParamSegment& s = pv.layout[i++];
    model.set_parameters(pv.values.segment(s.offset, s.length));
  };
  (assign(models), ...);
}

// -------------------------------- random ------------------------------------

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: the n-th draw of a stream is a pure function of
// (seed, stream path, n), so results never depend on scheduling.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(derive(seed, stream)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Independent child stream; children of distinct ids never overlap.
  SeededRng substream(std::uint64_t id) const {
    return SeededRng(seed_, detail::mix64(key_ ^ detail::mix64(id + 1)), 0);
  }

  std::uint64_t next_u64() {
    return detail::mix64(key_ + (counter_++) * detail::kGolden);
  }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the sine branch is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  SeededRng(std::uint64_t seed, std::uint64_t key, int /*tag*/)
      : seed_(seed), stream_(key), key_(key) {}

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    return detail::mix64(detail::mix64(seed ^ detail::kGolden) +
                         detail::mix64(stream + 0x632BE59BD9B4E019ULL));
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// K x N x m i.i.d. N(0, sigma^2) samples. Trajectory k draws from
// rng.substream(k).
inline NoiseTensor gaussian_noise(const SeededRng& rng, Index K, Index N,
                                  Index m, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ParameterError("noise sigma must be positive");
  }
  if (K < 0 || N < 0 || m < 0) throw ShapeError("negative noise shape");
  NoiseTensor noise;
  noise.sigma = sigma;
  noise.samples.reserve(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    SeededRng stream = rng.substream(static_cast<std::uint64_t>(k));
    Eigen::MatrixXd s(N, m);
    for (Index i = 0; i < N; ++i) {
      for (Index j = 0; j < m; ++j) s(i, j) = sigma * stream.normal();
    }
    noise.samples.push_back(std::move(s));
  }
  return noise;
}

// ------------------------------ threading -----------------------------------

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> threads{0};
  return threads;
}
}  // namespace detail

// 0 selects std::thread::hardware_concurrency().
inline void set_thread_count(unsigned n) { detail::thread_setting() = n; }

inline unsigned thread_count() {
  const unsigned n = detail::thread_setting();
  if (n != 0) return n;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n). Each index is processed exactly once, so
// callers that write per-index results and reduce them afterwards in index
// order get results that are independent of the thread count.
template <typename Fn>
void parallel_for(Index n, Fn&& fn, unsigned threads = thread_count()) {
  if (n <= 0) return;
  const unsigned workers =
      static_cast<unsigned>(std::min<Index>(std::max(1u, threads), n));
  if (workers == 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  std::vector<std::exception_ptr> errors(workers);
  auto run = [&](unsigned w) {
    const Index lo = n * w / workers;
    const Index hi = n * (w + 1) / workers;
    try {
      for (Index i = lo; i < hi; ++i) fn(i);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace picontrol

#endif  // PICONTROL_CORE_HPP_
