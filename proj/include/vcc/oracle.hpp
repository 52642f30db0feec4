#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "vcc/netcore.hpp"

namespace vcc {

/// Feature oracle the pipeline runs against: either the in-core engine or an
/// external model served over the bridge protocol. Semantics of every call
/// follow the netcore function of the same name.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;

  virtual Shape input_shape() const = 0;
  virtual int class_count() const = 0;
  virtual std::vector<int> taps() const = 0;
  virtual Shape layer_shape(int layer) const = 0;
  virtual int last_layer() const = 0;
  virtual std::string model_hash() const = 0;
  /// True when calls may be issued from several threads at once.
  virtual bool concurrent() const { return false; }

  virtual Tensor forward_to(const Tensor& image, int layer) = 0;
  virtual Tensor forward_between(const Tensor& activation, int from, int to) = 0;
  virtual Tensor distance_grad(const Tensor& activation, int from, int to, std::span<const double> centroid) = 0;
  virtual Tensor logits(const Tensor& image) = 0;

  /// Gradient of logit `cls` at the output of layer `from`. With the logits v
  /// and centroid v - e_cls, the distance residual is exactly e_cls, so the
  /// distance gradient equals the logit gradient.
  virtual Tensor logit_grad(const Tensor& activation, int from, int cls) {
    const Tensor out = forward_between(activation, from, last_layer());
    std::vector<double> q(out.data().begin(), out.data().end());
    q.at(static_cast<std::size_t>(cls)) -= 1.0;
    return distance_grad(activation, from, last_layer(), q);
  }
};

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Content hash over architecture and weights.
inline std::string model_hash(const LayeredModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_int = [&](std::int64_t v) {
    h = fnv1a({reinterpret_cast<const unsigned char*>(&v), sizeof(v)}, h);
  };
  for (int d : m.input_shape()) mix_int(d);
  mix_int(m.class_count());
  for (const auto& l : m.layers()) {
    mix_int(static_cast<int>(l.kind));
    for (int v : {l.in_channels, l.out_channels, l.kernel, l.stride, l.padding, l.in_features, l.out_features})
      mix_int(v);
    h = fnv1a({reinterpret_cast<const unsigned char*>(l.weight.data()), l.weight.size() * sizeof(float)}, h);
    h = fnv1a({reinterpret_cast<const unsigned char*>(l.bias.data()), l.bias.size() * sizeof(float)}, h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

class InCoreOracle final : public ModelOracle {
 public:
  explicit InCoreOracle(const LayeredModel& model) : model_(&model), hash_(vcc::model_hash(model)) {}

  Shape input_shape() const override { return model_->input_shape(); }
  int class_count() const override { return model_->class_count(); }
  std::vector<int> taps() const override { return model_->taps(); }
  Shape layer_shape(int layer) const override { return model_->output_shape(layer); }
  int last_layer() const override { return model_->layer_count() - 1; }
  std::string model_hash() const override { return hash_; }
  bool concurrent() const override { return true; }

  Tensor forward_to(const Tensor& image, int layer) override { return vcc::forward_to(*model_, image, layer); }
  Tensor forward_between(const Tensor& activation, int from, int to) override {
    return vcc::forward_between(*model_, activation, from, to);
  }
  Tensor distance_grad(const Tensor& activation, int from, int to, std::span<const double> centroid) override {
    return vcc::distance_grad(*model_, activation, from, to, centroid);
  }
  Tensor logits(const Tensor& image) override { return vcc::forward_full(*model_, image); }
  Tensor logit_grad(const Tensor& activation, int from, int cls) override {
    return vcc::logit_grad(*model_, activation, from, cls);
  }

  const LayeredModel& model() const { return *model_; }

 private:
  const LayeredModel* model_;
  std::string hash_;
};

}  // namespace vcc
