// SPDX-License-Identifier: Apache-2.0
//
// Dense feed-forward networks: forward pass with a retained activation trace,
// reverse-mode gradients, Adam updates and a central-difference gradient
// checker. Matrices are row-major; a batch is one sample per row.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdrm/common.hpp"

namespace sdrm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation : std::uint8_t { Tanh = 0, Identity = 1, Softplus = 2 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
    case Activation::Softplus: return "softplus";
  }
  return "?";
}

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix activate(Activation a, const Matrix& pre) {
  switch (a) {
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Identity: return pre;
    case Activation::Softplus: return pre.unaryExpr([](double v) { return softplus(v); });
  }
  return pre;
}

// d(post)/d(pre), elementwise.
inline Matrix activation_slope(Activation a, const Matrix& pre, const Matrix& post) {
  switch (a) {
    case Activation::Tanh: return (1.0 - post.array().square()).matrix();
    case Activation::Identity: return Matrix::Ones(pre.rows(), pre.cols());
    case Activation::Softplus: return pre.unaryExpr([](double v) { return sigmoid(v); });
  }
  return Matrix::Ones(pre.rows(), pre.cols());
}

}  // namespace detail

/// One affine map followed by an elementwise activation: post = act(x W + b).
struct DenseLayer {
  Matrix weight;  // fan_in x fan_out
  RowVector bias;  // fan_out
  Activation activation = Activation::Identity;

  std::size_t fan_in() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t fan_out() const { return static_cast<std::size_t>(weight.cols()); }
};

/// A chain of dense layers. A net with no layers is the identity on
/// `input_width()` columns.
class MlpNet {
 public:
  MlpNet() = default;

  explicit MlpNet(std::size_t identity_width) : identity_width_(identity_width) {}

  explicit MlpNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (static_cast<std::size_t>(l.bias.size()) != l.fan_out())
        throw ConfigError("layer " + std::to_string(i) + ": bias width != fan_out");
      if (i > 0 && layers_[i - 1].fan_out() != l.fan_in())
        throw ConfigError("layer " + std::to_string(i) + ": fan_in does not chain");
    }
  }

  /// Glorot-uniform weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases.
  /// `widths` lists every layer boundary, so widths.size() - 1 layers are built.
  static MlpNet glorot(std::span<const std::size_t> widths, Activation hidden,
                       Activation output, Rng& rng) {
    if (widths.empty()) throw ConfigError("MlpNet needs at least an input width");
    if (widths.size() == 1) return MlpNet(widths[0]);
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const auto in = widths[i], out = widths[i + 1];
      if (in == 0 || out == 0) throw ConfigError("MlpNet widths must be positive");
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      DenseLayer l;
      l.weight = Matrix(in, out);
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = u(rng);
      l.bias = RowVector::Zero(static_cast<Eigen::Index>(out));
      l.activation = (i + 2 == widths.size()) ? output : hidden;
      layers.push_back(std::move(l));
    }
    return MlpNet(std::move(layers));
  }

  static MlpNet glorot(std::initializer_list<std::size_t> widths, Activation hidden,
                       Activation output, Rng& rng) {
    const std::vector<std::size_t> w(widths);
    return glorot(std::span<const std::size_t>(w), hidden, output, rng);
  }

  std::size_t input_width() const {
    return layers_.empty() ? identity_width_ : layers_.front().fan_in();
  }
  std::size_t output_width() const {
    return layers_.empty() ? identity_width_ : layers_.back().fan_out();
  }
  std::size_t depth() const { return layers_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

 private:
  std::vector<DenseLayer> layers_;
  std::size_t identity_width_ = 0;
};

/// Pre- and post-activation of every layer, kept for the backward pass.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;
  std::vector<Matrix> post;

  const Matrix& output() const { return post.empty() ? input : post.back(); }
};

inline ForwardTrace mlp_forward(const MlpNet& net, const Matrix& input) {
  if (static_cast<std::size_t>(input.cols()) != net.input_width())
    throw ConfigError("mlp_forward: input has " + std::to_string(input.cols()) +
                      " columns, net expects " + std::to_string(net.input_width()));
  ForwardTrace trace;
  trace.input = input;
  trace.pre.reserve(net.depth());
  trace.post.reserve(net.depth());
  const Matrix* x = &trace.input;
  for (const auto& l : net.layers()) {
    Matrix pre = (*x) * l.weight;
    pre.rowwise() += l.bias;
    trace.post.push_back(detail::activate(l.activation, pre));
    trace.pre.push_back(std::move(pre));
    x = &trace.post.back();
  }
  if (!trace.output().allFinite()) throw TrainingError("mlp_forward: non-finite activation");
  return trace;
}

/// Forward pass when only the output is needed.
inline Matrix mlp_predict(const MlpNet& net, const Matrix& input) {
  return mlp_forward(net, input).output();
}

struct LayerGrad {
  Matrix weight;
  RowVector bias;
};

struct MlpGrads {
  std::vector<LayerGrad> layers;
  Matrix input;
};

inline MlpGrads mlp_backward(const MlpNet& net, const ForwardTrace& trace,
                             const Matrix& output_grad) {
  if (trace.post.size() != net.depth() || trace.pre.size() != net.depth() ||
      static_cast<std::size_t>(trace.input.cols()) != net.input_width())
    throw UsageError("mlp_backward: trace does not belong to a forward pass of this net");
  const Matrix& out = trace.output();
  if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols())
    throw ConfigError("mlp_backward: output gradient shape mismatch");

  MlpGrads grads;
  grads.layers.resize(net.depth());
  Matrix delta = output_grad;
  for (std::size_t k = net.depth(); k-- > 0;) {
    const auto& l = net.layers()[k];
    if (l.activation != Activation::Identity)
      delta = delta.cwiseProduct(detail::activation_slope(l.activation, trace.pre[k], trace.post[k]));
    const Matrix& x = k == 0 ? trace.input : trace.post[k - 1];
    grads.layers[k].weight = x.transpose() * delta;
    grads.layers[k].bias = delta.colwise().sum();
    delta = delta * l.weight.transpose();
  }
  grads.input = std::move(delta);
  return grads;
}

inline MlpGrads zero_grads(const MlpNet& net) {
  MlpGrads g;
  for (const auto& l : net.layers())
    g.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
  return g;
}

/// Accumulates `src` into `dst` (parameter gradients only).
inline void accumulate(MlpGrads& dst, const MlpGrads& src) {
  for (std::size_t i = 0; i < dst.layers.size(); ++i) {
    dst.layers[i].weight += src.layers[i].weight;
    dst.layers[i].bias += src.layers[i].bias;
  }
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment accumulators mirroring a net's parameters.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const MlpNet& net, AdamConfig config)
      : config_(config), first_(zero_grads(net).layers), second_(zero_grads(net).layers) {}

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::uint64_t step() const { return step_; }

 private:
  friend void adam_step(MlpNet&, const MlpGrads&, AdamState&);
  AdamConfig config_;
  std::vector<LayerGrad> first_, second_;
  std::uint64_t step_ = 0;
};

inline void adam_step(MlpNet& net, const MlpGrads& grads, AdamState& state) {
  auto& layers = net.layers();
  if (grads.layers.size() != layers.size() || state.first_.size() != layers.size())
    throw ConfigError("adam_step: parameter/gradient/state layer counts differ");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& g = grads.layers[i];
    if (g.weight.rows() != layers[i].weight.rows() || g.weight.cols() != layers[i].weight.cols() ||
        g.bias.size() != layers[i].bias.size())
      throw ConfigError("adam_step: gradient shape mismatch at layer " + std::to_string(i));
    if (!g.weight.allFinite() || !g.bias.allFinite())
      throw TrainingError("adam_step: non-finite gradient at layer " + std::to_string(i));
  }
  ++state.step_;
  const auto& c = state.config_;
  const double t = static_cast<double>(state.step_);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    param.array() -= c.learning_rate * (m.array() / correct1) /
                     ((v.array() / correct2).sqrt() + c.epsilon);
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    update(layers[i].weight, state.first_[i].weight, state.second_[i].weight, grads.layers[i].weight);
    update(layers[i].bias, state.first_[i].bias, state.second_[i].bias, grads.layers[i].bias);
  }
}

/// Addresses of every parameter, weights then bias per layer.
inline std::vector<double*> parameter_pointers(MlpNet& net) {
  std::vector<double*> out;
  out.reserve(net.parameter_count());
  for (auto& l : net.layers()) {
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) out.push_back(l.weight.data() + i);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) out.push_back(l.bias.data() + i);
  }
  return out;
}

/// Gradients flattened in `parameter_pointers` order.
inline std::vector<double> flatten(const MlpGrads& grads) {
  std::vector<double> out;
  for (const auto& l : grads.layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

struct GradientCheckOptions {
  double epsilon = 3e-5;
  /// Lower bound on the relative-error denominator.
  double floor = 1e-7;
  /// 0 checks every coordinate; otherwise a seeded sample of this size.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over the
/// checked coordinates, numeric being a central difference of `loss`.
/// Parameters are restored before returning.
inline double gradient_check(const std::function<double()>& loss,
                             std::span<double* const> params,
                             std::span<const double> analytic,
                             const GradientCheckOptions& options = {}) {
  if (params.size() != analytic.size())
    throw ConfigError("gradient_check: parameter and gradient counts differ");
  std::vector<std::size_t> coords(params.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (options.max_coordinates > 0 && options.max_coordinates < coords.size()) {
    Rng rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coordinates);
  }
  double worst = 0.0;
  for (const auto i : coords) {
    double& p = *params[i];
    const double saved = p;
    p = saved + options.epsilon;
    const double up = loss();
    p = saved - options.epsilon;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * options.epsilon);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace sdrm
