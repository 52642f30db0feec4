#pragma once

// Minimal layered network engine: forward evaluation between arbitrary layer
// indices, reverse-mode vector-Jacobian products, weight gradients for
// training and analytic receptive fields.
//
// Layer indices are zero-based positions in the layer list; "output of layer
// i" is the activation after applying layers 0..i. Index -1 names the input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vcc/error.hpp"
#include "vcc/parallel.hpp"
#include "vcc/tensor.hpp"

namespace vcc {

enum class LayerKind { conv2d, relu, maxpool2d, dense, flatten, global_avg_pool };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::flatten: return "flatten";
    case LayerKind::global_avg_pool: return "global-average-pool";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d, LayerKind::dense,
                      LayerKind::flatten, LayerKind::global_avg_pool})
    if (to_string(k) == s) return k;
  throw Error(ErrorKind::invalid_input, "unknown layer kind '" + std::string(s) + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int in_features = 0;
  int out_features = 0;
  std::vector<float> weight;  // conv: out x in x k x k, dense: out x in
  std::vector<float> bias;

  static LayerSpec conv(int in, int out, int k, int stride = 1, int padding = 0) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = k;
    s.stride = stride;
    s.padding = padding;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec maxpool(int k, int stride) {
    LayerSpec s;
    s.kind = LayerKind::maxpool2d;
    s.kernel = k;
    s.stride = stride;
    return s;
  }
  static LayerSpec dense(int in, int out) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_features = in;
    s.out_features = out;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
  }
  static LayerSpec gap() {
    LayerSpec s;
    s.kind = LayerKind::global_avg_pool;
    return s;
  }

  bool has_parameters() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }

  std::size_t weight_count() const {
    if (kind == LayerKind::conv2d)
      return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
    if (kind == LayerKind::dense) return static_cast<std::size_t>(out_features) * in_features;
    return 0;
  }
  std::size_t bias_count() const {
    if (kind == LayerKind::conv2d) return static_cast<std::size_t>(out_channels);
    if (kind == LayerKind::dense) return static_cast<std::size_t>(out_features);
    return 0;
  }
  bool spatial() const {
    return kind == LayerKind::conv2d || kind == LayerKind::relu || kind == LayerKind::maxpool2d;
  }
};

inline Shape infer_output_shape(const LayerSpec& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      require(in.size() == 3 && in[0] == layer.in_channels, ErrorKind::invalid_input,
              "conv2d expects " + std::to_string(layer.in_channels) + " input channels, got " + shape_string(in));
      require(layer.kernel >= 1 && layer.stride >= 1 && layer.padding >= 0 && layer.out_channels >= 1,
              ErrorKind::invalid_input, "conv2d parameters out of range");
      const int h = (in[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      const int w = (in[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
      require(in[1] + 2 * layer.padding >= layer.kernel && in[2] + 2 * layer.padding >= layer.kernel,
              ErrorKind::invalid_input, "conv2d kernel larger than padded input " + shape_string(in));
      return {layer.out_channels, h, w};
    }
    case LayerKind::relu:
      return in;
    case LayerKind::maxpool2d: {
      require(in.size() == 3, ErrorKind::invalid_input, "maxpool2d expects a spatial input");
      require(layer.kernel >= 1 && layer.stride >= 1 && in[1] >= layer.kernel && in[2] >= layer.kernel,
              ErrorKind::invalid_input, "maxpool2d window does not fit input " + shape_string(in));
      return {in[0], (in[1] - layer.kernel) / layer.stride + 1, (in[2] - layer.kernel) / layer.stride + 1};
    }
    case LayerKind::dense:
      require(static_cast<int>(shape_size(in)) == layer.in_features && layer.out_features >= 1,
              ErrorKind::invalid_input,
              "dense expects " + std::to_string(layer.in_features) + " inputs, got " + shape_string(in));
      return {layer.out_features};
    case LayerKind::flatten:
      return {static_cast<int>(shape_size(in))};
    case LayerKind::global_avg_pool:
      require(in.size() == 3, ErrorKind::invalid_input, "global-average-pool expects a spatial input");
      return {in[0]};
  }
  return in;
}

/// Ordered layer stack with selected tap layers. Immutable once built except
/// through mutable_layers(), which the trainer uses as the single writer.
class LayeredModel {
 public:
  LayeredModel() = default;

  LayeredModel(Shape input_shape, std::vector<LayerSpec> layers, int class_count, std::vector<int> taps)
      : input_shape_(std::move(input_shape)),
        layers_(std::move(layers)),
        class_count_(class_count),
        taps_(std::move(taps)) {
    validate();
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::vector<LayerSpec>& mutable_layers() noexcept { return layers_; }
  int layer_count() const noexcept { return static_cast<int>(layers_.size()); }
  int class_count() const noexcept { return class_count_; }
  const std::vector<int>& taps() const noexcept { return taps_; }

  void set_taps(std::vector<int> taps) {
    taps_ = std::move(taps);
    validate_taps();
  }

  const Shape& output_shape(int layer) const {
    require(layer >= -1 && layer < layer_count(), ErrorKind::index,
            "layer index " + std::to_string(layer) + " out of range [-1, " + std::to_string(layer_count()) + ")");
    return layer < 0 ? input_shape_ : shapes_[static_cast<std::size_t>(layer)];
  }

  bool has_weights() const {
    for (const auto& l : layers_)
      if (l.has_parameters() && l.weight.empty()) return false;
    return true;
  }

  void require_weights() const {
    require(has_weights(), ErrorKind::invalid_input, "model has no weights (architecture-only manifest)");
  }

  void validate() {
    require(input_shape_.size() == 3, ErrorKind::invalid_input, "model input must be 3 x H x W");
    require(input_shape_[0] >= 1 && input_shape_[1] >= 1 && input_shape_[2] >= 1, ErrorKind::invalid_input,
            "model input dimensions must be positive");
    require(!layers_.empty(), ErrorKind::invalid_input, "model has no layers");
    shapes_.clear();
    Shape cur = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      cur = infer_output_shape(l, cur);
      if (!l.weight.empty() || !l.bias.empty()) {
        require(l.weight.size() == l.weight_count() && l.bias.size() == l.bias_count(), ErrorKind::invalid_input,
                "layer " + std::to_string(i) + " weight payload does not match its declared dimensions");
      }
      shapes_.push_back(cur);
    }
    require(shapes_.back() == Shape{class_count_}, ErrorKind::invalid_input,
            "final layer must produce " + std::to_string(class_count_) + " logits, got " +
                shape_string(shapes_.back()));
    validate_taps();
  }

 private:
  void validate_taps() const {
    for (std::size_t i = 0; i < taps_.size(); ++i) {
      require(taps_[i] >= 0 && taps_[i] < layer_count() - 1, ErrorKind::index,
              "tap index " + std::to_string(taps_[i]) + " must precede the class head");
      require(i == 0 || taps_[i] > taps_[i - 1], ErrorKind::invalid_input, "tap indices must be strictly increasing");
    }
  }

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  int class_count_ = 0;
  std::vector<int> taps_;
  std::vector<Shape> shapes_;
};

/// Accumulated parameter gradients of one layer (double precision).
struct LayerGradients {
  std::vector<double> weight;
  std::vector<double> bias;
};

namespace detail {

template <typename T>
BasicTensor<T> conv_forward(const LayerSpec& L, const BasicTensor<T>& in, const Shape& out_shape) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Ho = out_shape[1], Wo = out_shape[2];
  const int k = L.kernel, s = L.stride, p = L.padding;
  BasicTensor<T> out(out_shape);
  std::vector<double> acc(static_cast<std::size_t>(Ho) * Wo);
  for (int oc = 0; oc < L.out_channels; ++oc) {
    std::fill(acc.begin(), acc.end(), static_cast<double>(L.bias[oc]));
    for (int ic = 0; ic < C; ++ic) {
      const T* src = &in.data()[static_cast<std::size_t>(ic) * H * W];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double w = L.weight[((static_cast<std::size_t>(oc) * C + ic) * k + ky) * k + kx];
          // ox range with 0 <= ox*s + kx - p < W
          int ox0 = 0;
          while (ox0 < Wo && ox0 * s + kx - p < 0) ++ox0;
          int ox1 = Wo;
          while (ox1 > ox0 && (ox1 - 1) * s + kx - p >= W) --ox1;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * s + ky - p;
            if (iy < 0 || iy >= H) continue;
            const T* row = src + static_cast<std::size_t>(iy) * W;
            double* dst = &acc[static_cast<std::size_t>(oy) * Wo];
            const int shift = kx - p;
            if (s == 1) {
              for (int ox = ox0; ox < ox1; ++ox) dst[ox] += w * static_cast<double>(row[ox + shift]);
            } else {
              for (int ox = ox0; ox < ox1; ++ox) dst[ox] += w * static_cast<double>(row[ox * s + shift]);
            }
          }
        }
      }
    }
    T* o = &out.data()[static_cast<std::size_t>(oc) * Ho * Wo];
    for (std::size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<T>(acc[i]);
  }
  return out;
}

template <typename T>
BasicTensor<T> conv_backward(const LayerSpec& L, const BasicTensor<T>& in, const BasicTensor<T>& gout,
                             LayerGradients* grads) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Ho = gout.dim(1), Wo = gout.dim(2);
  const int k = L.kernel, s = L.stride, p = L.padding;
  std::vector<double> gin(in.size(), 0.0);
  for (int oc = 0; oc < L.out_channels; ++oc) {
    const T* g = &gout.data()[static_cast<std::size_t>(oc) * Ho * Wo];
    if (grads) {
      double sb = 0.0;
      for (int i = 0; i < Ho * Wo; ++i) sb += static_cast<double>(g[i]);
      grads->bias[oc] += sb;
    }
    for (int ic = 0; ic < C; ++ic) {
      const T* src = &in.data()[static_cast<std::size_t>(ic) * H * W];
      double* gsrc = &gin[static_cast<std::size_t>(ic) * H * W];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(oc) * C + ic) * k + ky) * k + kx;
          const double w = L.weight[widx];
          int ox0 = 0;
          while (ox0 < Wo && ox0 * s + kx - p < 0) ++ox0;
          int ox1 = Wo;
          while (ox1 > ox0 && (ox1 - 1) * s + kx - p >= W) --ox1;
          double dw = 0.0;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * s + ky - p;
            if (iy < 0 || iy >= H) continue;
            const T* srow = src + static_cast<std::size_t>(iy) * W;
            double* grow_in = gsrc + static_cast<std::size_t>(iy) * W;
            const T* grow = g + static_cast<std::size_t>(oy) * Wo;
            const int shift = kx - p;
            for (int ox = ox0; ox < ox1; ++ox) {
              const double go = static_cast<double>(grow[ox]);
              grow_in[ox * s + shift] += w * go;
              dw += go * static_cast<double>(srow[ox * s + shift]);
            }
          }
          if (grads) grads->weight[widx] += dw;
        }
      }
    }
  }
  BasicTensor<T> out(in.shape());
  for (std::size_t i = 0; i < gin.size(); ++i) out[i] = static_cast<T>(gin[i]);
  return out;
}

template <typename T>
BasicTensor<T> maxpool_forward(const LayerSpec& L, const BasicTensor<T>& in, const Shape& out_shape) {
  const int C = in.dim(0);
  const int Ho = out_shape[1], Wo = out_shape[2];
  BasicTensor<T> out(out_shape);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T best = in.at(c, oy * L.stride, ox * L.stride);
        for (int ky = 0; ky < L.kernel; ++ky)
          for (int kx = 0; kx < L.kernel; ++kx) best = std::max(best, in.at(c, oy * L.stride + ky, ox * L.stride + kx));
        out.at(c, oy, ox) = best;
      }
  return out;
}

template <typename T>
BasicTensor<T> maxpool_backward(const LayerSpec& L, const BasicTensor<T>& in, const BasicTensor<T>& gout) {
  const int C = in.dim(0);
  const int Ho = gout.dim(1), Wo = gout.dim(2);
  BasicTensor<T> gin(in.shape());
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        // first maximum in row-major window order receives the gradient
        int by = oy * L.stride, bx = ox * L.stride;
        T best = in.at(c, by, bx);
        for (int ky = 0; ky < L.kernel; ++ky)
          for (int kx = 0; kx < L.kernel; ++kx) {
            const T v = in.at(c, oy * L.stride + ky, ox * L.stride + kx);
            if (v > best) {
              best = v;
              by = oy * L.stride + ky;
              bx = ox * L.stride + kx;
            }
          }
        gin.at(c, by, bx) += gout.at(c, oy, ox);
      }
  return gin;
}

template <typename T>
BasicTensor<T> dense_forward(const LayerSpec& L, const BasicTensor<T>& in) {
  BasicTensor<T> out(Shape{L.out_features});
  const auto x = in.data();
  for (int o = 0; o < L.out_features; ++o) {
    double acc = L.bias[o];
    const float* w = &L.weight[static_cast<std::size_t>(o) * L.in_features];
    for (int i = 0; i < L.in_features; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(x[i]);
    out[o] = static_cast<T>(acc);
  }
  return out;
}

template <typename T>
BasicTensor<T> dense_backward(const LayerSpec& L, const BasicTensor<T>& in, const BasicTensor<T>& gout,
                              LayerGradients* grads) {
  std::vector<double> gin(in.size(), 0.0);
  const auto x = in.data();
  for (int o = 0; o < L.out_features; ++o) {
    const double g = static_cast<double>(gout[o]);
    const float* w = &L.weight[static_cast<std::size_t>(o) * L.in_features];
    for (int i = 0; i < L.in_features; ++i) gin[i] += static_cast<double>(w[i]) * g;
    if (grads) {
      double* dw = &grads->weight[static_cast<std::size_t>(o) * L.in_features];
      for (int i = 0; i < L.in_features; ++i) dw[i] += g * static_cast<double>(x[i]);
      grads->bias[o] += g;
    }
  }
  BasicTensor<T> out(in.shape());
  for (std::size_t i = 0; i < gin.size(); ++i) out[i] = static_cast<T>(gin[i]);
  return out;
}

template <typename T>
BasicTensor<T> gap_forward(const BasicTensor<T>& in) {
  const int C = in.dim(0);
  const std::size_t hw = static_cast<std::size_t>(in.dim(1)) * in.dim(2);
  BasicTensor<T> out(Shape{C});
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(in[c * hw + i]);
    out[c] = static_cast<T>(s / static_cast<double>(hw));
  }
  return out;
}

}  // namespace detail

template <typename T>
BasicTensor<T> apply_layer(const LayerSpec& layer, const BasicTensor<T>& in, const Shape& out_shape) {
  switch (layer.kind) {
    case LayerKind::conv2d: return detail::conv_forward(layer, in, out_shape);
    case LayerKind::relu: {
      BasicTensor<T> out(in.shape());
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
      return out;
    }
    case LayerKind::maxpool2d: return detail::maxpool_forward(layer, in, out_shape);
    case LayerKind::dense: return detail::dense_forward(layer, in);
    case LayerKind::flatten: return BasicTensor<T>(out_shape, in.storage());
    case LayerKind::global_avg_pool: return detail::gap_forward(in);
  }
  return in;
}

/// Vector-Jacobian product of one layer. `grads`, when given, receives the
/// parameter gradients added onto its current contents.
template <typename T>
BasicTensor<T> layer_backward(const LayerSpec& layer, const BasicTensor<T>& in, const BasicTensor<T>& gout,
                              LayerGradients* grads = nullptr) {
  switch (layer.kind) {
    case LayerKind::conv2d: return detail::conv_backward(layer, in, gout, grads);
    case LayerKind::relu: {
      BasicTensor<T> gin(in.shape());
      for (std::size_t i = 0; i < in.size(); ++i) gin[i] = in[i] > T(0) ? gout[i] : T(0);
      return gin;
    }
    case LayerKind::maxpool2d: return detail::maxpool_backward(layer, in, gout);
    case LayerKind::dense: return detail::dense_backward(layer, in, gout, grads);
    case LayerKind::flatten: return BasicTensor<T>(in.shape(), gout.storage());
    case LayerKind::global_avg_pool: {
      const std::size_t hw = static_cast<std::size_t>(in.dim(1)) * in.dim(2);
      BasicTensor<T> gin(in.shape());
      for (int c = 0; c < in.dim(0); ++c) {
        const T g = static_cast<T>(static_cast<double>(gout[c]) / static_cast<double>(hw));
        for (std::size_t i = 0; i < hw; ++i) gin[c * hw + i] = g;
      }
      return gin;
    }
  }
  return gout;
}

namespace detail {

inline void check_range(const LayeredModel& m, int from, int to) {
  require(from >= -1 && from < m.layer_count(), ErrorKind::index, "layer index " + std::to_string(from) + " out of range");
  require(to >= 0 && to < m.layer_count(), ErrorKind::index, "layer index " + std::to_string(to) + " out of range");
  require(from < to, ErrorKind::ordering,
          "forward requires from < to (got " + std::to_string(from) + " >= " + std::to_string(to) + ")");
}

template <typename T>
void check_activation(const LayeredModel& m, const BasicTensor<T>& act, int layer) {
  require(act.shape() == m.output_shape(layer), ErrorKind::invalid_input,
          "activation shape " + shape_string(act.shape()) + " does not match layer " + std::to_string(layer) +
              " output " + shape_string(m.output_shape(layer)));
}

template <typename T>
const BasicTensor<T>& check_finite(const BasicTensor<T>& t) {
  require(t.all_finite(), ErrorKind::numeric, "non-finite activation produced");
  return t;
}

}  // namespace detail

/// Activations produced while running layers from+1..to: trace[0] is the
/// input activation, trace[i] the output of layer from+i.
template <typename T>
std::vector<BasicTensor<T>> forward_trace(const LayeredModel& m, const BasicTensor<T>& activation, int from, int to) {
  detail::check_range(m, from, to);
  detail::check_activation(m, activation, from);
  m.require_weights();
  std::vector<BasicTensor<T>> trace;
  trace.reserve(static_cast<std::size_t>(to - from + 1));
  trace.push_back(activation);
  for (int i = from + 1; i <= to; ++i)
    trace.push_back(apply_layer(m.layers()[i], trace.back(), m.output_shape(i)));
  return trace;
}

template <typename T>
BasicTensor<T> forward_between(const LayeredModel& m, const BasicTensor<T>& activation, int from, int to) {
  detail::check_range(m, from, to);
  detail::check_activation(m, activation, from);
  m.require_weights();
  BasicTensor<T> cur = activation;
  for (int i = from + 1; i <= to; ++i) cur = apply_layer(m.layers()[i], cur, m.output_shape(i));
  detail::check_finite(cur);
  return cur;
}

template <typename T>
BasicTensor<T> forward_to(const LayeredModel& m, const BasicTensor<T>& image, int layer) {
  require(image.shape() == m.input_shape(), ErrorKind::invalid_input,
          "image shape " + shape_string(image.shape()) + " does not match model input " + shape_string(m.input_shape()));
  require(layer >= 0 && layer < m.layer_count(), ErrorKind::index,
          "layer index " + std::to_string(layer) + " out of range [0, " + std::to_string(m.layer_count()) + ")");
  return forward_between(m, image, -1, layer);
}

template <typename T>
BasicTensor<T> forward_full(const LayeredModel& m, const BasicTensor<T>& image) {
  return forward_to(m, image, m.layer_count() - 1);
}

/// Pooled feature vector of an activation: per-channel spatial mean for
/// spatial tensors, the flattened values otherwise.
template <typename T>
std::vector<double> pooled_features(const BasicTensor<T>& act) {
  std::vector<double> v;
  if (act.is_spatial()) {
    const std::size_t hw = static_cast<std::size_t>(act.dim(1)) * act.dim(2);
    v.resize(static_cast<std::size_t>(act.dim(0)));
    for (int c = 0; c < act.dim(0); ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(act[c * hw + i]);
      v[c] = s / static_cast<double>(hw);
    }
  } else {
    v.assign(act.data().begin(), act.data().end());
  }
  return v;
}

template <typename T>
BasicTensor<T> backward_trace(const LayeredModel& m, const std::vector<BasicTensor<T>>& trace, int from,
                              BasicTensor<T> grad) {
  const int to = from + static_cast<int>(trace.size()) - 1;
  for (int i = to; i > from; --i) grad = layer_backward(m.layers()[i], trace[static_cast<std::size_t>(i - from - 1)], grad);
  return grad;
}

/// Gradient with respect to `activation` (the output of layer `from`) of
/// d = || pooled(forward_between(activation, from, to)) - centroid ||_2.
/// Returns the zero tensor when d < 1e-12.
template <typename T>
BasicTensor<T> distance_grad(const LayeredModel& m, const BasicTensor<T>& activation, int from, int to,
                             std::span<const double> centroid) {
  const auto trace = forward_trace(m, activation, from, to);
  const BasicTensor<T>& top = trace.back();
  const std::vector<double> pooled = pooled_features(top);
  require(pooled.size() == centroid.size(), ErrorKind::invalid_input,
          "centroid dimension " + std::to_string(centroid.size()) + " does not match pooled features of layer " +
              std::to_string(to) + " (" + std::to_string(pooled.size()) + ")");
  std::vector<double> r(pooled.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = pooled[i] - centroid[i];
    d2 += r[i] * r[i];
  }
  const double d = std::sqrt(d2);
  if (d < 1e-12) return BasicTensor<T>(activation.shape());
  BasicTensor<T> g(top.shape());
  if (top.is_spatial()) {
    const std::size_t hw = static_cast<std::size_t>(top.dim(1)) * top.dim(2);
    for (int c = 0; c < top.dim(0); ++c) {
      const T v = static_cast<T>(r[c] / (d * static_cast<double>(hw)));
      for (std::size_t i = 0; i < hw; ++i) g[c * hw + i] = v;
    }
  } else {
    for (std::size_t i = 0; i < r.size(); ++i) g[i] = static_cast<T>(r[i] / d);
  }
  return detail::check_finite(backward_trace(m, trace, from, std::move(g)));
}

/// Gradient of logit `cls` with respect to the output of layer `from`.
template <typename T>
BasicTensor<T> logit_grad(const LayeredModel& m, const BasicTensor<T>& activation, int from, int cls) {
  require(cls >= 0 && cls < m.class_count(), ErrorKind::index, "class index out of range");
  const auto trace = forward_trace(m, activation, from, m.layer_count() - 1);
  BasicTensor<T> g(trace.back().shape());
  g[static_cast<std::size_t>(cls)] = T(1);
  return detail::check_finite(backward_trace(m, trace, from, std::move(g)));
}

/// Theoretical receptive field (pixels, width/height) of one activation at
/// `layer`, clamped to the input size.
inline int receptive_field(const LayeredModel& m, int layer) {
  require(layer >= 0 && layer < m.layer_count(), ErrorKind::index, "layer index out of range");
  long rf = 1;
  long jump = 1;
  for (int i = 0; i <= layer; ++i) {
    const auto& l = m.layers()[i];
    require(l.spatial(), ErrorKind::unsupported_layer,
            "receptive field undefined across non-spatial layer " + std::to_string(i) + " (" +
                std::string(to_string(l.kind)) + ")");
    if (l.kind == LayerKind::conv2d || l.kind == LayerKind::maxpool2d) {
      rf += static_cast<long>(l.kernel - 1) * jump;
      jump *= l.stride;
    }
  }
  const long limit = std::max(m.input_shape()[1], m.input_shape()[2]);
  return static_cast<int>(std::min(rf, limit));
}

struct BatchGradients {
  std::vector<LayerGradients> layers;
  double loss = 0.0;  // mean cross-entropy
  int correct = 0;
};

inline BatchGradients zero_gradients(const LayeredModel& m) {
  BatchGradients g;
  g.layers.resize(m.layers().size());
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    g.layers[i].weight.assign(m.layers()[i].weight_count(), 0.0);
    g.layers[i].bias.assign(m.layers()[i].bias_count(), 0.0);
  }
  return g;
}

inline int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Gradients of the mean softmax cross-entropy over a batch with respect to
/// every weight and bias. Per-sample gradients are summed in batch order, so
/// the result does not depend on `jobs`.
inline BatchGradients backprop_weights(const LayeredModel& m, std::span<const Tensor> batch,
                                       std::span<const int> labels, int jobs = 1) {
  require(batch.size() == labels.size() && !batch.empty(), ErrorKind::invalid_input,
          "batch and labels must be nonempty and of equal length");
  m.require_weights();
  const int last = m.layer_count() - 1;
  std::vector<BatchGradients> per(batch.size());
  parallel_for(jobs, batch.size(), [&](std::size_t b) {
    require(labels[b] >= 0 && labels[b] < m.class_count(), ErrorKind::invalid_input, "label out of range");
    auto trace = forward_trace(m, batch[b], -1, last);
    const Tensor& logits = trace.back();
    double mx = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, static_cast<double>(logits[i]));
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += std::exp(static_cast<double>(logits[i]) - mx);
    BatchGradients g = zero_gradients(m);
    g.loss = std::log(z) + mx - static_cast<double>(logits[labels[b]]);
    g.correct = argmax(logits.data()) == labels[b] ? 1 : 0;
    Tensor grad(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i)
      grad[i] = static_cast<float>(std::exp(static_cast<double>(logits[i]) - mx) / z -
                                   (static_cast<int>(i) == labels[b] ? 1.0 : 0.0));
    for (int i = last; i >= 0; --i)
      grad = layer_backward(m.layers()[i], trace[static_cast<std::size_t>(i)], grad, &g.layers[i]);
    per[b] = std::move(g);
  });
  BatchGradients total = zero_gradients(m);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& g : per) {
    total.loss += g.loss * inv;
    total.correct += g.correct;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      for (std::size_t i = 0; i < g.layers[l].weight.size(); ++i) total.layers[l].weight[i] += g.layers[l].weight[i] * inv;
      for (std::size_t i = 0; i < g.layers[l].bias.size(); ++i) total.layers[l].bias[i] += g.layers[l].bias[i] * inv;
    }
  }
  return total;
}

}  // namespace vcc
