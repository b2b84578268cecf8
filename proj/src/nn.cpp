#include "collabdqn/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "collabdqn/error.hpp"

namespace collabdqn::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

constexpr const char* kAxisNames[] = {"depth", "height", "width"};

struct ConvGeometry {
  std::size_t batch, in_ch, out_ch, k;
  std::size_t in[3];
  std::size_t out[3];
  [[nodiscard]] std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  [[nodiscard]] std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  [[nodiscard]] std::size_t patch() const { return in_ch * k * k * k; }
};

ConvGeometry conv_geometry(const Shape& input, const LayerParams& params) {
  if (params.kind != LayerKind::conv3d) throw ShapeError("conv3d: parameters are not conv3d");
  if (input.size() != 5) {
    throw ShapeError("conv3d: input must be rank 5 [batch, ch, d, h, w], got " + shape_str(input));
  }
  ConvGeometry g{};
  g.batch = input[0];
  g.in_ch = params.weight.dim(1);
  g.out_ch = params.weight.dim(0);
  g.k = params.weight.dim(2);
  if (input[1] != g.in_ch) {
    throw ShapeError("conv3d: channel axis mismatch, input has " + std::to_string(input[1]) +
                     " channels, kernel expects " + std::to_string(g.in_ch));
  }
  for (int a = 0; a < 3; ++a) {
    g.in[a] = input[2 + a];
    if (g.in[a] < g.k) {
      throw ShapeError(std::string("conv3d: kernel extent ") + std::to_string(g.k) +
                       " exceeds input " + kAxisNames[a] + " extent " + std::to_string(g.in[a]));
    }
    g.out[a] = g.in[a] - g.k + 1;
  }
  return g;
}

// Column block [in_ch*k^3, out_volume] of one sample, rows `ld` floats apart.
void im2col(const float* in, const ConvGeometry& g, float* col, std::size_t ld) {
  const std::size_t k = g.k;
  const std::size_t plane = g.in[1] * g.in[2];
  const std::size_t P = ld;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const float* chan = in + c * g.in_volume();
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++row) {
          float* dst = col + row * P;
          for (std::size_t od = 0; od < g.out[0]; ++od)
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              const float* src = chan + (od + kd) * plane + (oh + kh) * g.in[2] + kw;
              std::copy_n(src, g.out[2], dst);
              dst += g.out[2];
            }
        }
  }
}

void col2im_add(const float* col, const ConvGeometry& g, float* in, std::size_t ld) {
  const std::size_t k = g.k;
  const std::size_t plane = g.in[1] * g.in[2];
  const std::size_t P = ld;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    float* chan = in + c * g.in_volume();
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++row) {
          const float* src = col + row * P;
          for (std::size_t od = 0; od < g.out[0]; ++od)
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              float* dst = chan + (od + kd) * plane + (oh + kh) * g.in[2] + kw;
              for (std::size_t ow = 0; ow < g.out[2]; ++ow) dst[ow] += src[ow];
              src += g.out[2];
            }
        }
  }
}

// Samples per GEMM so the column buffer stays near cache size.
std::size_t conv_chunk(const ConvGeometry& g) {
  constexpr std::size_t kTargetFloats = 1 << 18;
  return std::clamp<std::size_t>(kTargetFloats / (g.patch() * g.out_volume()), 1, g.batch);
}

struct DenseGeometry {
  std::size_t batch, in, out;
};

DenseGeometry dense_geometry(const Tensor& input, const LayerParams& params) {
  if (params.kind != LayerKind::dense) throw ShapeError("dense: parameters are not dense");
  DenseGeometry g{};
  g.batch = input.rank() == 1 ? 1 : input.dim(0);
  const std::size_t width = input.rank() == 1 ? input.size() : input.row_size();
  g.in = params.in_width();
  g.out = params.out_width();
  if (width != g.in) {
    throw ShapeError("dense: input width " + std::to_string(width) + " does not match layer width " +
                     std::to_string(g.in));
  }
  return g;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Shape pool_output_shape(const Shape& input, std::size_t window) {
  if (window < 1) throw ShapeError("maxpool3d: window must be >= 1");
  if (input.size() != 5) {
    throw ShapeError("maxpool3d: input must be rank 5 [batch, ch, d, h, w], got " + shape_str(input));
  }
  Shape out = input;
  for (int a = 0; a < 3; ++a) {
    if (input[2 + a] < window) {
      throw ShapeError(std::string("maxpool3d: window ") + std::to_string(window) +
                       " exceeds input " + kAxisNames[a] + " extent " + std::to_string(input[2 + a]));
    }
    out[2 + a] = input[2 + a] / window;
  }
  return out;
}

// Flat input index of the first maximum of every pooling window.
std::vector<std::size_t> pool_argmax(const Tensor& input, const Shape& os, std::size_t window) {
  const Shape& is = input.shape();
  const std::size_t planes = is[0] * is[1];
  const std::size_t in_vol = is[2] * is[3] * is[4];
  std::vector<std::size_t> arg;
  arg.reserve(planes * os[2] * os[3] * os[4]);
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = input.raw() + p * in_vol;
    for (std::size_t d = 0; d < os[2]; ++d)
      for (std::size_t h = 0; h < os[3]; ++h)
        for (std::size_t w = 0; w < os[4]; ++w) {
          std::size_t best_idx = ((d * window) * is[3] + h * window) * is[4] + w * window;
          float best = src[best_idx];
          for (std::size_t a = 0; a < window; ++a)
            for (std::size_t b = 0; b < window; ++b)
              for (std::size_t c = 0; c < window; ++c) {
                const std::size_t idx = ((d * window + a) * is[3] + h * window + b) * is[4] + w * window + c;
                if (src[idx] > best) {
                  best = src[idx];
                  best_idx = idx;
                }
              }
          arg.push_back(p * in_vol + best_idx);
        }
  }
  return arg;
}

// Calls fn(output_index, input_index_of_first_max) for every window.
template <class Fn>
void for_each_pool_max(const Tensor& input, const Shape& os, std::size_t window, Fn&& fn) {
  if (window != 2) {
    const std::vector<std::size_t> arg = pool_argmax(input, os, window);
    for (std::size_t i = 0; i < arg.size(); ++i) fn(i, arg[i]);
    return;
  }
  const Shape& is = input.shape();
  const std::size_t planes = is[0] * is[1];
  const std::size_t H = is[3], W = is[4];
  const std::size_t in_vol = is[2] * H * W;
  const float* data = input.raw();
  // Scan order of the 8 window offsets matches pool_argmax.
  const std::size_t off[8] = {0, 1, W, W + 1, H * W, H * W + 1, H * W + W, H * W + W + 1};
  std::size_t o = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * in_vol;
    for (std::size_t d = 0; d < os[2]; ++d)
      for (std::size_t h = 0; h < os[3]; ++h) {
        std::size_t corner = base + ((2 * d) * H + 2 * h) * W;
        for (std::size_t w = 0; w < os[4]; ++w, ++o, corner += 2) {
          std::size_t best = corner;
          float bv = data[corner];
          for (int j = 1; j < 8; ++j) {
            const float v = data[corner + off[j]];
            if (v > bv) {
              bv = v;
              best = corner + off[j];
            }
          }
          fn(o, best);
        }
      }
  }
}

}  // namespace

LayerParams make_conv3d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel) {
  return {LayerKind::conv3d, Tensor({out_ch, in_ch, kernel, kernel, kernel}), Tensor({out_ch})};
}

LayerParams make_dense(std::size_t in_width, std::size_t out_width) {
  return {LayerKind::dense, Tensor({out_width, in_width}), Tensor({out_width})};
}

void he_uniform_init(LayerParams& params, Philox& rng) {
  const std::size_t fan_in = params.weight.row_size();
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (float& w : params.weight.data()) w = static_cast<float>(rng.uniform(-bound, bound));
  params.bias.fill(0.0f);
}

LayerGrads LayerGrads::zeros_like(const LayerParams& params) {
  return {Tensor(params.weight.shape()), Tensor(params.bias.shape())};
}

void LayerGrads::zero() {
  weight.fill(0.0f);
  bias.fill(0.0f);
}

// --- conv3d ----------------------------------------------------------------

Tensor conv3d_forward(const Tensor& input, const LayerParams& params) {
  const ConvGeometry g = conv_geometry(input.shape(), params);
  Tensor out({g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]});
  const std::size_t P = g.out_volume();
  const std::size_t chunk = conv_chunk(g);
  std::vector<float> col(g.patch() * P * chunk);
  std::vector<float> res(g.out_ch * P * chunk);
  const auto Co = static_cast<Eigen::Index>(g.out_ch);
  const auto K = static_cast<Eigen::Index>(g.patch());
  const ConstMatMap w(params.weight.raw(), Co, K);
  const Eigen::Map<const Eigen::VectorXf> b(params.bias.raw(), Co);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, g.batch - n0);
    const std::size_t ld = m * P;
    for (std::size_t j = 0; j < m; ++j) im2col(input.raw() + (n0 + j) * g.in_ch * g.in_volume(), g, col.data() + j * P, ld);
    const ConstMatMap c(col.data(), K, static_cast<Eigen::Index>(ld));
    MatMap r(res.data(), Co, static_cast<Eigen::Index>(ld));
    r.noalias() = w * c;
    r.colwise() += b;
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t o = 0; o < g.out_ch; ++o) {
        std::copy_n(res.data() + o * ld + j * P, P, out.raw() + ((n0 + j) * g.out_ch + o) * P);
      }
  }
  return out;
}

Tensor conv3d_backward(const Tensor& input, const LayerParams& params, const Tensor& grad_out,
                       LayerGrads& grads, bool want_input_grad) {
  const ConvGeometry g = conv_geometry(input.shape(), params);
  const Shape expected{g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv3d backward: upstream gradient " + shape_str(grad_out.shape()) +
                     " does not match output " + shape_str(expected));
  }
  check_same_shape(grads.weight, params.weight, "conv3d backward weight grad");
  const std::size_t P = g.out_volume();
  const std::size_t chunk = conv_chunk(g);
  std::vector<float> col(g.patch() * P * chunk);
  std::vector<float> gbuf(g.out_ch * P * chunk);
  std::vector<float> dcol(want_input_grad ? g.patch() * P * chunk : 0);
  Tensor grad_in;
  if (want_input_grad) grad_in = Tensor(input.shape());

  const auto Co = static_cast<Eigen::Index>(g.out_ch);
  const auto K = static_cast<Eigen::Index>(g.patch());
  const ConstMatMap w(params.weight.raw(), Co, K);
  MatMap dw(grads.weight.raw(), Co, K);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, g.batch - n0);
    const std::size_t ld = m * P;
    const auto L = static_cast<Eigen::Index>(ld);
    for (std::size_t j = 0; j < m; ++j) {
      im2col(input.raw() + (n0 + j) * g.in_ch * g.in_volume(), g, col.data() + j * P, ld);
      for (std::size_t o = 0; o < g.out_ch; ++o) {
        std::copy_n(grad_out.raw() + ((n0 + j) * g.out_ch + o) * P, P, gbuf.data() + o * ld + j * P);
      }
    }
    const ConstMatMap c(col.data(), K, L);
    const ConstMatMap go(gbuf.data(), Co, L);
    dw.noalias() += go * c.transpose();
    // Plain loops: Eigen's vectorized reductions depend on buffer alignment.
    for (std::size_t o = 0; o < g.out_ch; ++o) {
      const float* row = gbuf.data() + o * ld;
      float acc = 0.0f;
      for (std::size_t i = 0; i < ld; ++i) acc += row[i];
      grads.bias[o] += acc;
    }
    if (want_input_grad) {
      MatMap dc(dcol.data(), K, L);
      dc.noalias() = w.transpose() * go;
      for (std::size_t j = 0; j < m; ++j) {
        col2im_add(dcol.data() + j * P, g, grad_in.raw() + (n0 + j) * g.in_ch * g.in_volume(), ld);
      }
    }
  }
  return grad_in;
}

// --- maxpool3d -------------------------------------------------------------

Tensor maxpool3d_forward(const Tensor& input, std::size_t window) {
  const Shape os = pool_output_shape(input.shape(), window);
  Tensor out(os);
  for_each_pool_max(input, os, window, [&](std::size_t o, std::size_t i) { out[o] = input[i]; });
  return out;
}

Tensor maxpool3d_backward(const Tensor& input, std::size_t window, const Tensor& grad_out) {
  const Shape os = pool_output_shape(input.shape(), window);
  if (grad_out.shape() != os) {
    throw ShapeError("maxpool3d backward: upstream gradient " + shape_str(grad_out.shape()) +
                     " does not match output " + shape_str(os));
  }
  Tensor grad_in(input.shape());
  for_each_pool_max(input, os, window, [&](std::size_t o, std::size_t i) { grad_in[i] += grad_out[o]; });
  return grad_in;
}

// --- dense -----------------------------------------------------------------

Tensor dense_forward(const Tensor& input, const LayerParams& params) {
  const DenseGeometry g = dense_geometry(input, params);
  Tensor out = input.rank() == 1 ? Tensor({g.out}) : Tensor({g.batch, g.out});
  const ConstMatMap x(input.raw(), static_cast<Eigen::Index>(g.batch), static_cast<Eigen::Index>(g.in));
  const ConstMatMap w(params.weight.raw(), static_cast<Eigen::Index>(g.out), static_cast<Eigen::Index>(g.in));
  const Eigen::Map<const Eigen::RowVectorXf> b(params.bias.raw(), static_cast<Eigen::Index>(g.out));
  MatMap y(out.raw(), static_cast<Eigen::Index>(g.batch), static_cast<Eigen::Index>(g.out));
  y.noalias() = x * w.transpose();
  y.rowwise() += b;
  return out;
}

Tensor dense_backward(const Tensor& input, const LayerParams& params, const Tensor& grad_out,
                      LayerGrads& grads, bool want_input_grad) {
  const DenseGeometry g = dense_geometry(input, params);
  if (grad_out.size() != g.batch * g.out) {
    throw ShapeError("dense backward: upstream gradient " + shape_str(grad_out.shape()) +
                     " does not match output width " + std::to_string(g.out));
  }
  check_same_shape(grads.weight, params.weight, "dense backward weight grad");
  const auto B = static_cast<Eigen::Index>(g.batch);
  const auto I = static_cast<Eigen::Index>(g.in);
  const auto O = static_cast<Eigen::Index>(g.out);
  const ConstMatMap x(input.raw(), B, I);
  const ConstMatMap w(params.weight.raw(), O, I);
  const ConstMatMap go(grad_out.raw(), B, O);
  MatMap dw(grads.weight.raw(), O, I);
  dw.noalias() += go.transpose() * x;
  for (std::size_t b = 0; b < g.batch; ++b) {
    const float* row = grad_out.raw() + b * g.out;
    for (std::size_t o = 0; o < g.out; ++o) grads.bias[o] += row[o];
  }
  if (!want_input_grad) return {};
  Tensor grad_in(input.shape());
  MatMap dx(grad_in.raw(), B, I);
  dx.noalias() = go * w;
  return grad_in;
}

// --- relu ------------------------------------------------------------------

Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  check_same_shape(input, grad_out, "relu backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(input[i] > 0.0f)) g[i] = 0.0f;
  }
  return g;
}

// --- loss ------------------------------------------------------------------

LossResult td_squared_loss(const Tensor& q_pred, const Tensor& q_target, float clip) {
  check_same_shape(q_pred, q_target, "td_squared_loss");
  const std::size_t n = q_pred.size();
  LossResult r{0.0f, Tensor(q_pred.shape())};
  float sum = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float residual = std::clamp(q_pred[i] - q_target[i], -clip, clip);
    sum += residual * residual;
    r.grad[i] = 2.0f * residual / static_cast<float>(n);
  }
  r.loss = sum / static_cast<float>(n);
  return r;
}

// --- Adam ------------------------------------------------------------------

GradientSet::GradientSet(std::span<const Tensor* const> params, std::vector<std::string> names)
    : names_(std::move(names)) {
  if (names_.size() != params.size()) throw ConfigError("GradientSet: one name per parameter required");
  grads_.reserve(params.size());
  for (const Tensor* p : params) {
    grads_.emplace_back(p->shape());
    first_.emplace_back(p->shape());
    second_.emplace_back(p->shape());
  }
}

void GradientSet::zero_grads() {
  for (Tensor& g : grads_) g.fill(0.0f);
}

void adam_step(std::span<Tensor* const> params, GradientSet& gs, const AdamConfig& cfg) {
  if (params.size() != gs.grads_.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(gs.grads_.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != gs.grads_[i].shape()) {
      throw ShapeError("adam_step: gradient shape mismatch for " + gs.names_[i]);
    }
    for (float g : gs.grads_[i].data()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + gs.names_[i]);
    }
  }
  gs.step_ += 1;
  const double t = static_cast<double>(gs.step_);
  const auto c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const auto c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i]->raw();
    const float* g = gs.grads_[i].raw();
    float* m = gs.first_[i].raw();
    float* v = gs.second_[i].raw();
    const std::size_t n = params[i]->size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
      const float mhat = m[j] / c1;
      const float vhat = v[j] / c2;
      p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// --- Sequential ------------------------------------------------------------

std::string layer_name(const Layer& layer, std::size_t index) {
  static constexpr const char* names[] = {"conv3d", "maxpool3d", "relu", "dense"};
  return std::string(names[static_cast<int>(layer.op)]) + "#" + std::to_string(index);
}

Shape Sequential::output_shape(const Shape& input) const {
  Shape s = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    try {
      switch (l.op) {
        case OpKind::conv3d: {
          const ConvGeometry g = conv_geometry(s, l.params);
          s = {g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]};
          break;
        }
        case OpKind::maxpool3d:
          s = pool_output_shape(s, l.window);
          break;
        case OpKind::relu:
          break;
        case OpKind::dense: {
          const std::size_t batch = s.size() == 1 ? 1 : s[0];
          const std::size_t width = s.size() == 1 ? s[0] : shape_numel(s) / s[0];
          if (width != l.params.in_width()) {
            throw ShapeError("input width " + std::to_string(width) + " does not match layer width " +
                             std::to_string(l.params.in_width()));
          }
          s = s.size() == 1 ? Shape{l.params.out_width()} : Shape{batch, l.params.out_width()};
          break;
        }
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + layer_name(l, i) + ": " + e.what());
    }
  }
  return s;
}

Tensor Sequential::forward(const Tensor& input) const {
  Tensor x = input;
  for (const Layer& l : layers) {
    switch (l.op) {
      case OpKind::conv3d: x = conv3d_forward(x, l.params); break;
      case OpKind::maxpool3d: x = maxpool3d_forward(x, l.window); break;
      case OpKind::relu: x = relu_forward(x); break;
      case OpKind::dense: x = dense_forward(x, l.params); break;
    }
  }
  return x;
}

Tensor Sequential::forward(const Tensor& input, std::vector<Tensor>& inputs) const {
  inputs.resize(layers.size());
  Tensor x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    inputs[i] = x;
    switch (l.op) {
      case OpKind::conv3d: x = conv3d_forward(x, l.params); break;
      case OpKind::maxpool3d: x = maxpool3d_forward(x, l.window); break;
      case OpKind::relu: x = relu_forward(x); break;
      case OpKind::dense: x = dense_forward(x, l.params); break;
    }
  }
  return x;
}

Tensor Sequential::backward(const std::vector<Tensor>& inputs, const Tensor& grad_out,
                            std::span<LayerGrads> grads, bool want_input_grad) const {
  if (inputs.size() != layers.size()) throw ShapeError("Sequential::backward: missing cached activations");
  std::size_t gi = grads.size();
  Tensor g = grad_out;
  for (std::size_t i = layers.size(); i-- > 0;) {
    const Layer& l = layers[i];
    const bool need = want_input_grad || i > 0;
    switch (l.op) {
      case OpKind::conv3d:
        g = conv3d_backward(inputs[i], l.params, g, grads[--gi], need);
        break;
      case OpKind::maxpool3d:
        g = maxpool3d_backward(inputs[i], l.window, g);
        break;
      case OpKind::relu:
        g = relu_backward(inputs[i], g);
        break;
      case OpKind::dense:
        g = dense_backward(inputs[i], l.params, g, grads[--gi], need);
        break;
    }
  }
  return g;
}

std::vector<LayerGrads> Sequential::make_grads() const {
  std::vector<LayerGrads> out;
  for (const Layer& l : layers) {
    if (l.has_params()) out.push_back(LayerGrads::zeros_like(l.params));
  }
  return out;
}

std::vector<Tensor*> Sequential::parameters() {
  std::vector<Tensor*> out;
  for (Layer& l : layers) {
    if (!l.has_params()) continue;
    out.push_back(&l.params.weight);
    out.push_back(&l.params.bias);
  }
  return out;
}

std::vector<const Tensor*> Sequential::parameters() const {
  std::vector<const Tensor*> out;
  for (const Layer& l : layers) {
    if (!l.has_params()) continue;
    out.push_back(&l.params.weight);
    out.push_back(&l.params.bias);
  }
  return out;
}

std::size_t Sequential::param_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers) {
    if (l.has_params()) n += l.params.param_count();
  }
  return n;
}

// --- grad_check ------------------------------------------------------------

namespace {

struct Probe {
  double loss = 0.0;
  std::vector<std::size_t> pattern;  // ReLU masks and pool argmaxes
};

Probe probe(const Sequential& net, const Tensor& input, const std::vector<double>& proj) {
  std::vector<Tensor> inputs;
  const Tensor out = net.forward(input, inputs);
  Probe p;
  for (std::size_t i = 0; i < out.size(); ++i) p.loss += proj[i] * static_cast<double>(out[i]);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Layer& layer = net.layers[l];
    if (layer.op == OpKind::relu) {
      for (float v : inputs[l].data()) p.pattern.push_back(v > 0.0f);
    } else if (layer.op == OpKind::maxpool3d) {
      const auto arg = pool_argmax(inputs[l], pool_output_shape(inputs[l].shape(), layer.window), layer.window);
      p.pattern.insert(p.pattern.end(), arg.begin(), arg.end());
    }
  }
  return p;
}

// Entries whose +-step perturbation flips a ReLU mask or a pool argmax sit on
// a kink, where central differences are not a derivative estimate; they are
// counted as skipped instead of compared.
template <typename ProbeFn>
GradCheckEntry compare(std::string name, Tensor& value, const Tensor& analytic, ProbeFn&& run,
                       const std::vector<std::size_t>& base_pattern, const GradCheckOptions& opt) {
  GradCheckEntry e{std::move(name), 0.0, 0, 0};
  double scale = 0.0;
  for (float a : analytic.data()) scale = std::max(scale, static_cast<double>(std::fabs(a)));
  const double floor = std::max(opt.floor * scale, 1e-12);
  for (std::size_t i = 0; i < value.size(); ++i) {
    const float orig = value[i];
    value[i] = static_cast<float>(orig + opt.step);
    const Probe plus = run();
    value[i] = static_cast<float>(orig - opt.step);
    const Probe minus = run();
    value[i] = orig;
    if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
      ++e.skipped;
      continue;
    }
    ++e.checked;
    const double numeric = (plus.loss - minus.loss) / (2.0 * opt.step);
    const double a = analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), floor});
    e.max_rel_error = std::max(e.max_rel_error, std::fabs(a - numeric) / denom);
  }
  return e;
}

}  // namespace

GradCheckReport grad_check(Sequential& network, const Tensor& input, const GradCheckOptions& opt) {
  Tensor x = input;
  for (float& v : x.data()) {
    if (std::fabs(v) < opt.input_jitter) v = v < 0.0f ? -opt.input_jitter : opt.input_jitter;
  }
  std::vector<Tensor> cache;
  const Tensor out = network.forward(x, cache);
  Philox rng(opt.seed);
  std::vector<double> proj(out.size());
  Tensor grad_out(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    proj[i] = rng.uniform(-1.0, 1.0);
    grad_out[i] = static_cast<float>(proj[i]);
  }
  std::vector<LayerGrads> grads = network.make_grads();
  const Tensor grad_in = network.backward(cache, grad_out, grads, true);

  GradCheckReport report;
  const auto run = [&] { return probe(network, x, proj); };
  const std::vector<std::size_t> base_pattern = run().pattern;
  std::size_t gi = 0;
  for (std::size_t i = 0; i < network.layers.size(); ++i) {
    Layer& l = network.layers[i];
    if (!l.has_params()) continue;
    const std::string base = layer_name(l, i);
    report.entries.push_back(compare(base + ".weight", l.params.weight, grads[gi].weight, run, base_pattern, opt));
    report.entries.push_back(compare(base + ".bias", l.params.bias, grads[gi].bias, run, base_pattern, opt));
    ++gi;
  }
  report.entries.push_back(compare("input", x, grad_in, run, base_pattern, opt));
  for (const auto& e : report.entries) report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
  std::size_t checked = 0, skipped = 0;
  for (const auto& e : report.entries) {
    checked += e.checked;
    skipped += e.skipped;
  }
  report.skipped_fraction = checked + skipped == 0 ? 0.0 : static_cast<double>(skipped) / (checked + skipped);
  report.passed = report.max_rel_error < opt.tolerance && report.skipped_fraction <= opt.max_skipped_fraction;
  return report;
}

}  // namespace collabdqn::nn
