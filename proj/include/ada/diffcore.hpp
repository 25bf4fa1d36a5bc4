#pragma once

// Reverse-mode differentiation for small feedforward networks, plus Adam.
//
// Networks keep all weights and biases in one flat parameter vector so that
// gradients and optimizer state share a single layout. Per layer the block is
// W (out x in, row-major) followed by b (out).

#include <functional>
#include <span>
#include <vector>

#include "ada/core.hpp"

namespace ada {

enum class Activation { tanh, softplus };

namespace detail {

inline void activate(Activation a, const Matrix& pre, Matrix& out) {
  out.resize(pre.rows(), pre.cols());
  switch (a) {
    case Activation::tanh:
      // Through the vectorized exp; absolute error stays near 1e-16.
      out = (1.0 - 2.0 / ((2.0 * pre.array()).exp() + 1.0)).matrix();
      return;
    case Activation::softplus:
      for (Eigen::Index i = 0; i < pre.size(); ++i) {
        const double x = pre.data()[i];
        out.data()[i] = x > 30.0 ? x : std::log1p(std::exp(x));
      }
      return;
  }
}

// First derivative from pre-activation and activation value.
inline Matrix activation_slope(Activation a, const Matrix& pre, const Matrix& act) {
  switch (a) {
    case Activation::tanh:
      return (1.0 - act.array().square()).matrix();
    case Activation::softplus:
      return (1.0 / (1.0 + (-pre.array()).exp())).matrix();
  }
  return {};
}

inline Matrix activation_curvature(Activation a, const Matrix& pre, const Matrix& act) {
  switch (a) {
    case Activation::tanh:
      return (-2.0 * act.array() * (1.0 - act.array().square())).matrix();
    case Activation::softplus: {
      const auto sig = (1.0 / (1.0 + (-pre.array()).exp()));
      return (sig * (1.0 - sig)).matrix();
    }
  }
  return {};
}

}  // namespace detail

/// Activations cached by a forward pass, consumed by the backward passes.
struct ForwardCache {
  Matrix input;
  std::vector<Matrix> pre;     // pre-activations of every layer
  std::vector<Matrix> hidden;  // activations of the hidden layers
  Matrix output;
};

class DenseNet {
 public:
  using WeightMap = Eigen::Map<Matrix>;
  using ConstWeightMap = Eigen::Map<const Matrix>;

  DenseNet() = default;

  /// Zero-initialized network. widths = {in, hidden..., out}; input width may be 0.
  explicit DenseNet(std::vector<int> widths, Activation activation = Activation::tanh)
      : widths_(std::move(widths)), activation_(activation) {
    detail::require(widths_.size() >= 2, "DenseNet needs at least an input and an output width");
    for (std::size_t l = 0; l < widths_.size(); ++l) {
      const bool ok = l == 0 ? widths_[l] >= 0 : widths_[l] > 0;
      detail::require(ok, detail::concat("DenseNet layer ", l, " has invalid width ", widths_[l]));
    }
    Eigen::Index total = 0;
    for (int l = 0; l < num_layers(); ++l) {
      offsets_.push_back(total);
      total += static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1);
    }
    params_ = Vector::Zero(total);
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases.
  static DenseNet random(std::vector<int> widths, Rng& rng,
                         Activation activation = Activation::tanh) {
    DenseNet net(std::move(widths), activation);
    for (int l = 0; l < net.num_layers(); ++l) {
      const int fan_in = net.widths_[l];
      const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 1.0;
      auto block = net.layer_block(l);
      for (Eigen::Index i = 0; i < block.size(); ++i) {
        block[i] = bound * (2.0 * detail::uniform01(rng) - 1.0);
      }
    }
    return net;
  }

  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }
  Activation activation() const { return activation_; }

  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  Eigen::Index num_params() const { return params_.size(); }

  WeightMap weight(int l) {
    return WeightMap(params_.data() + offsets_[l], widths_[l + 1], widths_[l]);
  }
  ConstWeightMap weight(int l) const {
    return ConstWeightMap(params_.data() + offsets_[l], widths_[l + 1], widths_[l]);
  }
  Eigen::Map<Vector> bias(int l) {
    return Eigen::Map<Vector>(params_.data() + bias_offset(l), widths_[l + 1]);
  }
  Eigen::Map<const Vector> bias(int l) const {
    return Eigen::Map<const Vector>(params_.data() + bias_offset(l), widths_[l + 1]);
  }

  /// Zeroes the last layer so the network outputs exactly 0 everywhere.
  void zero_output_layer() { layer_block(num_layers() - 1).setZero(); }

  Matrix forward(const Matrix& x) const {
    ForwardCache cache;
    return forward(x, cache);
  }

  Matrix forward(const Matrix& x, ForwardCache& cache) const {
    check_input(x);
    cache.input = x;
    cache.pre.resize(num_layers());
    cache.hidden.resize(num_layers() - 1);
    const Matrix* h = &cache.input;
    for (int l = 0; l < num_layers(); ++l) {
      Matrix& a = cache.pre[l];
      a.noalias() = (*h) * weight(l).transpose();
      a.rowwise() += bias(l).transpose();
      if (l + 1 < num_layers()) {
        detail::activate(activation_, a, cache.hidden[l]);
        h = &cache.hidden[l];
      }
    }
    cache.output = cache.pre.back();
    return cache.output;
  }

  /// Vector-Jacobian product: returns dL/dparams given dL/doutput; writes dL/dinput if asked.
  Vector backward(const ForwardCache& cache, const Matrix& d_output,
                  Matrix* d_input = nullptr) const {
    detail::require(d_output.rows() == cache.output.rows() &&
                        d_output.cols() == cache.output.cols(),
                    "DenseNet::backward: output gradient shape mismatch");
    Vector grad = Vector::Zero(params_.size());
    Matrix delta = d_output;
    for (int l = num_layers() - 1; l >= 0; --l) {
      if (l + 1 < num_layers()) {
        delta.array() *=
            detail::activation_slope(activation_, cache.pre[l], cache.hidden[l]).array();
      }
      const Matrix& below = l == 0 ? cache.input : cache.hidden[l - 1];
      Eigen::Map<Matrix>(grad.data() + offsets_[l], widths_[l + 1], widths_[l]).noalias() =
          delta.transpose() * below;
      Eigen::Map<Vector>(grad.data() + bias_offset(l), widths_[l + 1]) =
          delta.colwise().sum().transpose();
      if (l > 0 || d_input != nullptr) {
        Matrix next = delta * weight(l);
        delta.swap(next);
      }
    }
    if (d_input != nullptr) *d_input = std::move(delta);
    return grad;
  }

  /// Row i holds the gradient of output i with respect to input row i.
  Matrix input_gradient(const Matrix& x) const {
    detail::require(output_width() == 1, "input_gradient requires a scalar-output network");
    ForwardCache cache;
    forward(x, cache);
    Matrix delta = weight(num_layers() - 1).replicate(x.rows(), 1);
    for (int l = num_layers() - 2; l >= 0; --l) {
      delta.array() *= detail::activation_slope(activation_, cache.pre[l], cache.hidden[l]).array();
      Matrix next = delta * weight(l);
      delta.swap(next);
    }
    return delta;
  }

  /// Parameter gradient of sum_i <g_bar_i, grad_x f(x_i)>: differentiates the
  /// input gradient itself, written out as the chain of weight matrices and
  /// activation-derivative diagonals.
  Vector input_gradient_vjp(const Matrix& x, const Matrix& g_bar) const {
    detail::require(g_bar.rows() == x.rows() && g_bar.cols() == x.cols(),
                    "input_gradient_vjp: adjoint shape mismatch");
    return input_gradient_vjp(x, [&](const Matrix&) { return g_bar; });
  }

  /// As above, with the adjoint computed from the input gradient by `adjoint`,
  /// so the gradient is evaluated only once.
  template <typename AdjointFn>
  Vector input_gradient_vjp(const Matrix& x, AdjointFn&& adjoint) const {
    detail::require(output_width() == 1, "input_gradient_vjp requires a scalar-output network");
    const int L = num_layers();
    ForwardCache cache;
    forward(x, cache);
    const Eigen::Index n = x.rows();

    std::vector<Matrix> slope(L - 1), curv(L - 1);
    for (int l = 0; l < L - 1; ++l) {
      slope[l] = detail::activation_slope(activation_, cache.pre[l], cache.hidden[l]);
      curv[l] = detail::activation_curvature(activation_, cache.pre[l], cache.hidden[l]);
    }
    // Backward chain: g[L-1] = w_L per row, e[l] = g[l] .* slope[l], g[l-1] = e[l] W_l.
    // Layer indices are zero-based here: hidden layer l has pre-activation pre[l].
    std::vector<Matrix> g(L);  // g[l] = gradient w.r.t. hidden activation l (g[0] for input is separate)
    std::vector<Matrix> e(L - 1);
    g[L - 1] = weight(L - 1).replicate(n, 1);  // (n x width_{L-1})
    for (int l = L - 2; l >= 0; --l) {
      e[l] = (g[l + 1].array() * slope[l].array()).matrix();
      g[l] = e[l] * weight(l);
    }
    // g[0] is the input gradient. Reverse through the backward chain.
    Vector grad = Vector::Zero(params_.size());
    std::vector<Matrix> pre_bar(L - 1);
    Matrix g_adj = adjoint(static_cast<const Matrix&>(g[0]));  // adjoint of g[l], starting at the input
    detail::require(g_adj.rows() == x.rows() && g_adj.cols() == x.cols(),
                    "input_gradient_vjp: adjoint shape mismatch");
    for (int l = 0; l <= L - 2; ++l) {
      // g[l] = e[l] W_l
      Eigen::Map<Matrix>(grad.data() + offsets_[l], widths_[l + 1], widths_[l]).noalias() +=
          e[l].transpose() * g_adj;
      Matrix e_adj = g_adj * weight(l).transpose();
      // e[l] = g[l+1] .* slope[l]
      pre_bar[l] = (e_adj.array() * g[l + 1].array() * curv[l].array()).matrix();
      g_adj = (e_adj.array() * slope[l].array()).matrix();
    }
    // g[L-1] = replicated w_L
    Eigen::Map<Matrix>(grad.data() + offsets_[L - 1], 1, widths_[L - 1]) +=
        g_adj.colwise().sum();
    // Reverse through the forward chain, which only feeds the slopes.
    Matrix a_bar;
    for (int l = L - 2; l >= 0; --l) {
      if (l == L - 2) {
        a_bar = pre_bar[l];
      } else {
        Matrix h_bar = a_bar * weight(l + 1);
        a_bar = pre_bar[l] + (h_bar.array() * slope[l].array()).matrix();
      }
      const Matrix& below = l == 0 ? cache.input : cache.hidden[l - 1];
      Eigen::Map<Matrix>(grad.data() + offsets_[l], widths_[l + 1], widths_[l]).noalias() +=
          a_bar.transpose() * below;
      Eigen::Map<Vector>(grad.data() + bias_offset(l), widths_[l + 1]) +=
          a_bar.colwise().sum().transpose();
    }
    return grad;
  }

 private:
  Eigen::Index bias_offset(int l) const {
    return offsets_[l] + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l];
  }

  Eigen::Map<Vector> layer_block(int l) {
    return Eigen::Map<Vector>(params_.data() + offsets_[l],
                              static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1));
  }

  void check_input(const Matrix& x) const {
    if (x.cols() != input_width()) {
      throw InputError(detail::concat("DenseNet: batch width ", x.cols(),
                                      " does not match input width ", input_width()));
    }
  }

  std::vector<int> widths_;
  Activation activation_ = Activation::tanh;
  std::vector<Eigen::Index> offsets_;
  Vector params_;
};

/// A loss evaluated on network outputs: its value and its gradient w.r.t. the outputs.
struct LossValue {
  Matrix value;  // must be 1 x 1
  Matrix d_output;
};
using LossFn = std::function<LossValue(const Matrix& output)>;

/// Exact parameter gradient of a scalar loss of the network outputs.
inline Vector grad_params(const DenseNet& net, const Matrix& batch, const LossFn& loss,
                          double* value = nullptr) {
  ForwardCache cache;
  const Matrix out = net.forward(batch, cache);
  LossValue lv = loss(out);
  if (lv.value.size() != 1) {
    throw InputError(detail::concat("grad_params: loss must be scalar, got ", lv.value.rows(),
                                    "x", lv.value.cols()));
  }
  if (value != nullptr) *value = lv.value(0, 0);
  return net.backward(cache, lv.d_output);
}

inline Matrix grad_input(const DenseNet& net, const Matrix& batch) {
  return net.input_gradient(batch);
}

enum class Direction { ascend, descend };

struct OptState {
  Vector m;
  Vector v;
  long step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptState() = default;
  OptState(Eigen::Index size, double lr, double b1 = 0.9, double b2 = 0.999)
      : m(Vector::Zero(size)), v(Vector::Zero(size)), learning_rate(lr), beta1(b1), beta2(b2) {}
};

/// Bias-corrected Adam update in place.
inline void adam_step(Vector& params, const Vector& grads, OptState& state, Direction dir) {
  if (state.m.size() == 0) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
  }
  detail::require(params.size() == grads.size() && params.size() == state.m.size() &&
                      params.size() == state.v.size(),
                  detail::concat("adam_step: shape mismatch (params ", params.size(), ", grads ",
                                 grads.size(), ", state ", state.m.size(), ")"));
  if (const auto bad = detail::first_non_finite(grads); bad >= 0) {
    throw NumericalError(detail::concat("adam_step: non-finite gradient at index ", bad,
                                        " (value ", grads[bad], ") on step ", state.step + 1));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double sign = dir == Direction::ascend ? 1.0 : -1.0;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] += sign * state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

}  // namespace ada
