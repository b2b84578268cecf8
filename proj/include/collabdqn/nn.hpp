#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "collabdqn/rng.hpp"
#include "collabdqn/tensor.hpp"

namespace collabdqn::nn {

enum class LayerKind { conv3d, dense };

/// Trainable parameters of one conv3d or dense layer.
///
/// conv3d: weight [out_ch, in_ch, k, k, k], bias [out_ch]
/// dense:  weight [out_width, in_width],    bias [out_width]
struct LayerParams {
  LayerKind kind = LayerKind::dense;
  Tensor weight;
  Tensor bias;

  [[nodiscard]] std::size_t in_width() const { return weight.dim(1); }
  [[nodiscard]] std::size_t out_width() const { return weight.dim(0); }
  [[nodiscard]] std::size_t kernel() const { return kind == LayerKind::conv3d ? weight.dim(2) : 1; }
  [[nodiscard]] std::size_t param_count() const { return weight.size() + bias.size(); }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

LayerParams make_conv3d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel);
LayerParams make_dense(std::size_t in_width, std::size_t out_width);

/// He-uniform weights (bound sqrt(6 / fan_in)), zero bias.
void he_uniform_init(LayerParams& params, Philox& rng);

/// Gradient accumulators for one LayerParams (same shapes).
struct LayerGrads {
  Tensor weight;
  Tensor bias;

  static LayerGrads zeros_like(const LayerParams& params);
  void zero();
};

// Forward/backward kernels. Backward functions *accumulate* parameter
// gradients into `grads` and return the gradient w.r.t. the layer input.

/// Valid (no padding), stride-1 3D convolution over [batch, ch, d, h, w].
Tensor conv3d_forward(const Tensor& input, const LayerParams& params);
/// Returns an empty tensor when `want_input_grad` is false.
Tensor conv3d_backward(const Tensor& input, const LayerParams& params, const Tensor& grad_out,
                       LayerGrads& grads, bool want_input_grad = true);

/// Non-overlapping max pool (stride = window); trailing remainders are dropped.
Tensor maxpool3d_forward(const Tensor& input, std::size_t window);
/// Routes each upstream value to the first maximum of its window in scan order.
Tensor maxpool3d_backward(const Tensor& input, std::size_t window, const Tensor& grad_out);

/// y = W x + b per batch row. Rank-1 inputs are a single row; higher ranks
/// are flattened to [batch, rest].
Tensor dense_forward(const Tensor& input, const LayerParams& params);
Tensor dense_backward(const Tensor& input, const LayerParams& params, const Tensor& grad_out,
                      LayerGrads& grads, bool want_input_grad = true);

Tensor relu_forward(const Tensor& input);
/// Subgradient at 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

struct LossResult {
  float loss = 0.0f;
  Tensor grad;  // d loss / d q_pred
};

/// Mean squared TD residual with the residual clipped to [-clip, clip].
/// q_target is treated as a constant.
LossResult td_squared_loss(const Tensor& q_pred, const Tensor& q_target, float clip = 1.0f);

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Gradients for an ordered list of parameter tensors plus Adam moments.
class GradientSet {
 public:
  GradientSet() = default;
  GradientSet(std::span<const Tensor* const> params, std::vector<std::string> names);

  [[nodiscard]] std::size_t size() const { return grads_.size(); }
  Tensor& grad(std::size_t i) { return grads_[i]; }
  [[nodiscard]] const Tensor& grad(std::size_t i) const { return grads_[i]; }
  [[nodiscard]] const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& first_moment(std::size_t i) { return first_[i]; }
  Tensor& second_moment(std::size_t i) { return second_[i]; }
  [[nodiscard]] const Tensor& first_moment(std::size_t i) const { return first_[i]; }
  [[nodiscard]] const Tensor& second_moment(std::size_t i) const { return second_[i]; }
  [[nodiscard]] std::int64_t step() const { return step_; }
  void set_step(std::int64_t step) { step_ = step; }

  void zero_grads();

 private:
  friend void adam_step(std::span<Tensor* const>, GradientSet&, const AdamConfig&);
  std::vector<Tensor> grads_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::vector<std::string> names_;
  std::int64_t step_ = 0;
};

/// Bias-corrected Adam update, in place. Throws NumericError naming the
/// parameter if any gradient entry is non-finite (nothing is modified then).
void adam_step(std::span<Tensor* const> params, GradientSet& grads, const AdamConfig& config);

// ---------------------------------------------------------------------------
// Fixed layer pipelines

enum class OpKind { conv3d, maxpool3d, relu, dense };

struct Layer {
  OpKind op = OpKind::relu;
  LayerParams params;      // conv3d / dense only
  std::size_t window = 2;  // maxpool3d only

  [[nodiscard]] bool has_params() const { return op == OpKind::conv3d || op == OpKind::dense; }
  friend bool operator==(const Layer&, const Layer&) = default;
};

/// A hand-chained stack of layers with cached activations for backprop.
class Sequential {
 public:
  std::vector<Layer> layers;

  /// Shape algebra only; throws ShapeError naming the first failing layer.
  [[nodiscard]] Shape output_shape(const Shape& input) const;

  [[nodiscard]] Tensor forward(const Tensor& input) const;
  /// `inputs[i]` receives the input of layer i.
  Tensor forward(const Tensor& input, std::vector<Tensor>& inputs) const;
  /// `grads` holds one entry per parameterized layer, in order.
  Tensor backward(const std::vector<Tensor>& inputs, const Tensor& grad_out,
                  std::span<LayerGrads> grads, bool want_input_grad) const;

  [[nodiscard]] std::vector<LayerGrads> make_grads() const;
  std::vector<Tensor*> parameters();
  [[nodiscard]] std::vector<const Tensor*> parameters() const;
  [[nodiscard]] std::size_t param_count() const;

  friend bool operator==(const Sequential&, const Sequential&) = default;
};

std::string layer_name(const Layer& layer, std::size_t index);

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a ReLU or pooling kink
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // parameter tensors, then the input
  double max_rel_error = 0.0;
  double skipped_fraction = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  float input_jitter = 1e-2f;  // inputs with |x| < jitter are pushed to +-jitter
  std::uint64_t seed = 7;
  /// Per-entry error is |a - n| / max(|a|, |n|, floor * scale) where scale is
  /// the largest |a| in that tensor. With floor = 1 this is the worst absolute
  /// deviation relative to the tensor's gradient scale, which keeps float32
  /// rounding in the forward passes from dominating tiny entries.
  double floor = 1.0;
  double max_skipped_fraction = 0.1;
};

/// Compares analytic gradients of L = sum(c_i * out_i) (c fixed random)
/// against central differences for every parameter and the input.
GradCheckReport grad_check(Sequential& network, const Tensor& input,
                           const GradCheckOptions& options = {});

}  // namespace collabdqn::nn
