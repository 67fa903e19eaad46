#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "labelseg/volume.hpp"

namespace labelseg::nn {

/// Channel-major activation tensor of one sample: data[c * shape.size() + voxel].
struct Tensor {
  int channels = 0;
  Shape3 shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, Shape3 s, float fill = 0.0f)
      : channels(c), shape(s), data(static_cast<std::size_t>(c) * s.size(), fill) {}

  [[nodiscard]] std::size_t voxels() const { return shape.size(); }
  float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  [[nodiscard]] const float* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * voxels();
  }
};

/// Trainable array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;

  void resize(std::size_t n) {
    value.assign(n, 0.0f);
    grad.assign(n, 0.0f);
  }
  [[nodiscard]] std::size_t size() const { return value.size(); }
};

/// He (Kaiming) normal initialization for a leaky rectifier with the given slope.
void he_normal(Param& p, std::size_t fan_in, double negative_slope, std::mt19937_64& rng);

/// Cubic convolution: kernel 1 or 3 (padding (k-1)/2), stride 1 or 2.
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in, int out, int kernel, int stride, bool bias, std::string name);

  [[nodiscard]] Shape3 output_shape(const Shape3& in) const;
  [[nodiscard]] Tensor forward(const Tensor& x) const;
  /// Accumulates weight/bias gradients; returns dL/dx when `need_input_grad`.
  Tensor backward(const Tensor& x, const Tensor& dy, bool need_input_grad = true);

  void init(double negative_slope, std::mt19937_64& rng);
  std::vector<Param*> params();
  [[nodiscard]] std::size_t num_parameters() const { return weight_.size() + bias_.size(); }

  [[nodiscard]] int in_channels() const { return in_; }
  [[nodiscard]] int out_channels() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1;
  bool has_bias_ = false;
  Param weight_;  // out x (in * k^3), row-major
  Param bias_;
};

/// Transposed convolution with kernel 2, stride 2 (exact 2x upsampling), no bias.
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(int in, int out, std::string name);

  [[nodiscard]] Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& dy);

  void init(double negative_slope, std::mt19937_64& rng);
  std::vector<Param*> params() { return {&weight_}; }
  [[nodiscard]] std::size_t num_parameters() const { return weight_.size(); }

 private:
  int in_ = 0, out_ = 0;
  Param weight_;  // in x (out * 8), row-major
};

/// Per-channel normalization over spatial positions with learned scale and shift.
class InstanceNorm {
 public:
  struct Cache {
    std::vector<float> xhat;
    std::vector<double> inv_std;
  };

  InstanceNorm() = default;
  InstanceNorm(int channels, std::string name, double eps = 1e-5);

  [[nodiscard]] Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& dy);

  void init();
  std::vector<Param*> params() { return {&gamma_, &beta_}; }
  [[nodiscard]] std::size_t num_parameters() const { return gamma_.size() + beta_.size(); }

 private:
  int channels_ = 0;
  double eps_ = 1e-5;
  Param gamma_;
  Param beta_;
};

void leaky_relu_inplace(Tensor& t, float slope);
/// dy *= (y > 0 ? 1 : slope) using the activation output y.
void leaky_relu_backward_inplace(Tensor& dy, const Tensor& y, float slope);

/// Per-voxel softmax over channels.
Tensor softmax(const Tensor& logits);
/// dL/dlogits from dL/dprobs and the softmax output.
Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs);

/// Channel concatenation [a; b].
Tensor concat(const Tensor& a, const Tensor& b);

/// Flips selected spatial axes (bit 0 = x, bit 1 = y, bit 2 = z).
Tensor flip(const Tensor& t, unsigned axes);

}  // namespace labelseg::nn
