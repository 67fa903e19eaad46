#include "labelseg/layers.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace labelseg::nn {
namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedMap = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

// Upper bound on im2col buffer entries per chunk.
constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

struct ConvGeom {
  Shape3 in;
  Shape3 out;
  int k;
  int s;
  int pad;
};

void im2col(const float* x, int channels, const ConvGeom& g, std::int64_t z0, std::int64_t z1,
            float* col) {
  const std::int64_t plane = g.out.nx * g.out.ny;
  const std::int64_t ncols = (z1 - z0) * plane;
  const int k3 = g.k * g.k * g.k;
  for (int ci = 0; ci < channels; ++ci) {
    const float* xc = x + static_cast<std::size_t>(ci) * g.in.size();
    for (int kz = 0; kz < g.k; ++kz) {
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t r = static_cast<std::size_t>(ci) * k3 + (kz * g.k + ky) * g.k + kx;
          float* row = col + r * static_cast<std::size_t>(ncols);
          for (std::int64_t z = z0; z < z1; ++z) {
            const std::int64_t iz = z * g.s + kz - g.pad;
            float* rz = row + (z - z0) * plane;
            if (iz < 0 || iz >= g.in.nz) {
              std::fill(rz, rz + plane, 0.0f);
              continue;
            }
            for (std::int64_t y = 0; y < g.out.ny; ++y) {
              const std::int64_t iy = y * g.s + ky - g.pad;
              float* ry = rz + y * g.out.nx;
              if (iy < 0 || iy >= g.in.ny) {
                std::fill(ry, ry + g.out.nx, 0.0f);
                continue;
              }
              const float* src = xc + (iz * g.in.ny + iy) * g.in.nx;
              for (std::int64_t xo = 0; xo < g.out.nx; ++xo) {
                const std::int64_t ix = xo * g.s + kx - g.pad;
                ry[xo] = (ix >= 0 && ix < g.in.nx) ? src[ix] : 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int channels, const ConvGeom& g, std::int64_t z0, std::int64_t z1,
            float* dx) {
  const std::int64_t plane = g.out.nx * g.out.ny;
  const std::int64_t ncols = (z1 - z0) * plane;
  const int k3 = g.k * g.k * g.k;
  for (int ci = 0; ci < channels; ++ci) {
    float* dxc = dx + static_cast<std::size_t>(ci) * g.in.size();
    for (int kz = 0; kz < g.k; ++kz) {
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t r = static_cast<std::size_t>(ci) * k3 + (kz * g.k + ky) * g.k + kx;
          const float* row = col + r * static_cast<std::size_t>(ncols);
          for (std::int64_t z = z0; z < z1; ++z) {
            const std::int64_t iz = z * g.s + kz - g.pad;
            if (iz < 0 || iz >= g.in.nz) continue;
            const float* rz = row + (z - z0) * plane;
            for (std::int64_t y = 0; y < g.out.ny; ++y) {
              const std::int64_t iy = y * g.s + ky - g.pad;
              if (iy < 0 || iy >= g.in.ny) continue;
              const float* ry = rz + y * g.out.nx;
              float* dst = dxc + (iz * g.in.ny + iy) * g.in.nx;
              for (std::int64_t xo = 0; xo < g.out.nx; ++xo) {
                const std::int64_t ix = xo * g.s + kx - g.pad;
                if (ix >= 0 && ix < g.in.nx) dst[ix] += ry[xo];
              }
            }
          }
        }
      }
    }
  }
}

std::int64_t planes_per_chunk(std::size_t rows, std::int64_t plane, std::int64_t nz) {
  const std::size_t per_plane = rows * static_cast<std::size_t>(plane);
  const auto n = static_cast<std::int64_t>(std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, per_plane)));
  return std::min(n, nz);
}

}  // namespace

void he_normal(Param& p, std::size_t fan_in, double negative_slope, std::mt19937_64& rng) {
  const double sd = std::sqrt(2.0 / ((1.0 + negative_slope * negative_slope) * double(fan_in)));
  std::normal_distribution<double> dist(0.0, sd);
  for (float& v : p.value) v = static_cast<float>(dist(rng));
}

Conv3d::Conv3d(int in, int out, int kernel, int stride, bool bias, std::string name)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), has_bias_(bias) {
  if (kernel != 1 && kernel != 3) throw ValidationError("Conv3d: kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ValidationError("Conv3d: stride must be 1 or 2");
  weight_.name = name + ".weight";
  weight_.resize(static_cast<std::size_t>(out) * in * kernel * kernel * kernel);
  if (bias) {
    bias_.name = name + ".bias";
    bias_.resize(static_cast<std::size_t>(out));
  }
}

Shape3 Conv3d::output_shape(const Shape3& s) const {
  const int pad = (kernel_ - 1) / 2;
  auto o = [&](std::int64_t n) { return (n + 2 * pad - kernel_) / stride_ + 1; };
  return {o(s.nx), o(s.ny), o(s.nz)};
}

void Conv3d::init(double negative_slope, std::mt19937_64& rng) {
  he_normal(weight_, static_cast<std::size_t>(in_) * kernel_ * kernel_ * kernel_, negative_slope, rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
}

std::vector<Param*> Conv3d::params() {
  if (has_bias_) return {&weight_, &bias_};
  return {&weight_};
}

Tensor Conv3d::forward(const Tensor& x) const {
  if (x.channels != in_) {
    throw ShapeError("Conv3d " + weight_.name + ": expected " + std::to_string(in_) +
                     " input channels, got " + std::to_string(x.channels));
  }
  const Shape3 os = output_shape(x.shape);
  Tensor y(out_, os);
  const auto n_out = static_cast<Eigen::Index>(os.size());
  const int k3 = kernel_ * kernel_ * kernel_;
  const auto rows = static_cast<Eigen::Index>(in_) * k3;
  CMapRM w(weight_.value.data(), out_, rows);
  if (kernel_ == 1 && stride_ == 1) {
    CMapRM xm(x.data.data(), in_, n_out);
    MapRM ym(y.data.data(), out_, n_out);
    ym.noalias() = w * xm;
  } else {
    const ConvGeom g{x.shape, os, kernel_, stride_, (kernel_ - 1) / 2};
    const std::int64_t plane = os.nx * os.ny;
    const std::int64_t step = planes_per_chunk(static_cast<std::size_t>(rows), plane, os.nz);
    std::vector<float> col(static_cast<std::size_t>(rows * step * plane));
    for (std::int64_t z0 = 0; z0 < os.nz; z0 += step) {
      const std::int64_t z1 = std::min(os.nz, z0 + step);
      const auto nc = static_cast<Eigen::Index>((z1 - z0) * plane);
      im2col(x.data.data(), in_, g, z0, z1, col.data());
      CMapRM cm(col.data(), rows, nc);
      StridedMap ym(y.data.data() + z0 * plane, out_, nc, Eigen::OuterStride<>(n_out));
      ym.noalias() = w * cm;
    }
  }
  if (has_bias_) {
    for (int o = 0; o < out_; ++o) {
      float* yc = y.channel(o);
      const float b = bias_.value[static_cast<std::size_t>(o)];
      for (std::size_t i = 0; i < y.voxels(); ++i) yc[i] += b;
    }
  }
  return y;
}

Tensor Conv3d::backward(const Tensor& x, const Tensor& dy, bool need_input_grad) {
  const Shape3 os = dy.shape;
  const auto n_out = static_cast<Eigen::Index>(os.size());
  const int k3 = kernel_ * kernel_ * kernel_;
  const auto rows = static_cast<Eigen::Index>(in_) * k3;
  CMapRM w(weight_.value.data(), out_, rows);
  MapRM dw(weight_.grad.data(), out_, rows);
  Tensor dx;
  if (need_input_grad) dx = Tensor(in_, x.shape, 0.0f);
  if (has_bias_) {
    for (int o = 0; o < out_; ++o) {
      const float* d = dy.channel(o);
      double acc = 0.0;
      for (std::size_t i = 0; i < dy.voxels(); ++i) acc += d[i];
      bias_.grad[static_cast<std::size_t>(o)] += static_cast<float>(acc);
    }
  }
  if (kernel_ == 1 && stride_ == 1) {
    CMapRM xm(x.data.data(), in_, n_out);
    CMapRM dym(dy.data.data(), out_, n_out);
    dw.noalias() += dym * xm.transpose();
    if (need_input_grad) {
      MapRM dxm(dx.data.data(), in_, n_out);
      dxm.noalias() = w.transpose() * dym;
    }
    return dx;
  }
  const ConvGeom g{x.shape, os, kernel_, stride_, (kernel_ - 1) / 2};
  const std::int64_t plane = os.nx * os.ny;
  const std::int64_t step = planes_per_chunk(static_cast<std::size_t>(rows), plane, os.nz);
  std::vector<float> col(static_cast<std::size_t>(rows * step * plane));
  std::vector<float> dcol(need_input_grad ? col.size() : 0);
  for (std::int64_t z0 = 0; z0 < os.nz; z0 += step) {
    const std::int64_t z1 = std::min(os.nz, z0 + step);
    const auto nc = static_cast<Eigen::Index>((z1 - z0) * plane);
    im2col(x.data.data(), in_, g, z0, z1, col.data());
    CMapRM cm(col.data(), rows, nc);
    CStridedMap dym(dy.data.data() + z0 * plane, out_, nc, Eigen::OuterStride<>(n_out));
    dw.noalias() += dym * cm.transpose();
    if (need_input_grad) {
      MapRM dcm(dcol.data(), rows, nc);
      dcm.noalias() = w.transpose() * dym;
      col2im(dcol.data(), in_, g, z0, z1, dx.data.data());
    }
  }
  return dx;
}

ConvTranspose3d::ConvTranspose3d(int in, int out, std::string name) : in_(in), out_(out) {
  weight_.name = name + ".weight";
  weight_.resize(static_cast<std::size_t>(in) * out * 8);
}

void ConvTranspose3d::init(double negative_slope, std::mt19937_64& rng) {
  // Each output voxel receives exactly `in_` weighted inputs.
  he_normal(weight_, static_cast<std::size_t>(in_), negative_slope, rng);
}

Tensor ConvTranspose3d::forward(const Tensor& x) const {
  if (x.channels != in_) throw ShapeError("ConvTranspose3d " + weight_.name + ": channel mismatch");
  const Shape3 is = x.shape;
  const Shape3 os{2 * is.nx, 2 * is.ny, 2 * is.nz};
  const auto n_in = static_cast<Eigen::Index>(is.size());
  CMapRM w(weight_.value.data(), in_, out_ * 8);
  CMapRM xm(x.data.data(), in_, n_in);
  MatRM z = w.transpose() * xm;  // (out*8) x n_in
  Tensor y(out_, os);
  for (int o = 0; o < out_; ++o) {
    float* yc = y.channel(o);
    for (int a = 0; a < 8; ++a) {
      const int az = a >> 2, ay = (a >> 1) & 1, ax = a & 1;
      const float* zr = z.data() + static_cast<std::size_t>(o * 8 + a) * static_cast<std::size_t>(n_in);
      std::size_t j = 0;
      for (std::int64_t zz = 0; zz < is.nz; ++zz) {
        for (std::int64_t yy = 0; yy < is.ny; ++yy) {
          float* dst = yc + os.index(ax, 2 * yy + ay, 2 * zz + az);
          for (std::int64_t xx = 0; xx < is.nx; ++xx, ++j) dst[2 * xx] = zr[j];
        }
      }
    }
  }
  return y;
}

Tensor ConvTranspose3d::backward(const Tensor& x, const Tensor& dy) {
  const Shape3 is = x.shape;
  const Shape3 os = dy.shape;
  const auto n_in = static_cast<Eigen::Index>(is.size());
  MatRM gz(out_ * 8, n_in);
  for (int o = 0; o < out_; ++o) {
    const float* dc = dy.channel(o);
    for (int a = 0; a < 8; ++a) {
      const int az = a >> 2, ay = (a >> 1) & 1, ax = a & 1;
      float* gr = gz.data() + static_cast<std::size_t>(o * 8 + a) * static_cast<std::size_t>(n_in);
      std::size_t j = 0;
      for (std::int64_t zz = 0; zz < is.nz; ++zz) {
        for (std::int64_t yy = 0; yy < is.ny; ++yy) {
          const float* src = dc + os.index(ax, 2 * yy + ay, 2 * zz + az);
          for (std::int64_t xx = 0; xx < is.nx; ++xx, ++j) gr[j] = src[2 * xx];
        }
      }
    }
  }
  CMapRM w(weight_.value.data(), in_, out_ * 8);
  MapRM dw(weight_.grad.data(), in_, out_ * 8);
  CMapRM xm(x.data.data(), in_, n_in);
  dw.noalias() += xm * gz.transpose();
  Tensor dx(in_, is);
  MapRM dxm(dx.data.data(), in_, n_in);
  dxm.noalias() = w * gz;
  return dx;
}

InstanceNorm::InstanceNorm(int channels, std::string name, double eps)
    : channels_(channels), eps_(eps) {
  gamma_.name = name + ".gamma";
  beta_.name = name + ".beta";
  gamma_.resize(static_cast<std::size_t>(channels));
  beta_.resize(static_cast<std::size_t>(channels));
  init();
}

void InstanceNorm::init() {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
  std::fill(beta_.value.begin(), beta_.value.end(), 0.0f);
}

Tensor InstanceNorm::forward(const Tensor& x, Cache* cache) const {
  if (x.channels != channels_) throw ShapeError("InstanceNorm: channel mismatch");
  Tensor y(channels_, x.shape);
  const std::size_t n = x.voxels();
  if (cache) {
    cache->xhat.resize(x.data.size());
    cache->inv_std.resize(static_cast<std::size_t>(channels_));
  }
  for (int c = 0; c < channels_; ++c) {
    const float* xc = x.channel(c);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += xc[i];
    const double mean = sum / double(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (xc[i] - mean) * (xc[i] - mean);
    const double inv = 1.0 / std::sqrt(ss / double(n) + eps_);
    const float g = gamma_.value[static_cast<std::size_t>(c)];
    const float b = beta_.value[static_cast<std::size_t>(c)];
    float* yc = y.channel(c);
    float* xh = cache ? cache->xhat.data() + static_cast<std::size_t>(c) * n : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = static_cast<float>((xc[i] - mean) * inv);
      if (xh) xh[i] = h;
      yc[i] = g * h + b;
    }
    if (cache) cache->inv_std[static_cast<std::size_t>(c)] = inv;
  }
  return y;
}

Tensor InstanceNorm::backward(const Cache& cache, const Tensor& dy) {
  Tensor dx(channels_, dy.shape);
  const std::size_t n = dy.voxels();
  for (int c = 0; c < channels_; ++c) {
    const float* d = dy.channel(c);
    const float* xh = cache.xhat.data() + static_cast<std::size_t>(c) * n;
    const double g = gamma_.value[static_cast<std::size_t>(c)];
    double sum_d = 0.0, sum_dxh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_d += d[i];
      sum_dxh += double(d[i]) * xh[i];
    }
    gamma_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_dxh);
    beta_.grad[static_cast<std::size_t>(c)] += static_cast<float>(sum_d);
    const double inv = cache.inv_std[static_cast<std::size_t>(c)];
    const double mean_d = sum_d / double(n);
    const double mean_dxh = sum_dxh / double(n);
    float* out = dx.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = static_cast<float>(g * inv * (d[i] - mean_d - xh[i] * mean_dxh));
    }
  }
  return dx;
}

void leaky_relu_inplace(Tensor& t, float slope) {
  for (float& v : t.data) v = v > 0.0f ? v : slope * v;
}

void leaky_relu_backward_inplace(Tensor& dy, const Tensor& y, float slope) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(y.data[i] > 0.0f)) dy.data[i] *= slope;
  }
}

Tensor softmax(const Tensor& logits) {
  Tensor p(logits.channels, logits.shape);
  const std::size_t n = logits.voxels();
  const int c = logits.channels;
  std::vector<double> buf(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits.data[i];
    for (int k = 1; k < c; ++k) mx = std::max<double>(mx, logits.data[k * n + i]);
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      buf[static_cast<std::size_t>(k)] = std::exp(double(logits.data[k * n + i]) - mx);
      sum += buf[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < c; ++k) p.data[k * n + i] = static_cast<float>(buf[static_cast<std::size_t>(k)] / sum);
  }
  return p;
}

Tensor softmax_backward(const Tensor& p, const Tensor& dp) {
  Tensor dz(p.channels, p.shape);
  const std::size_t n = p.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int k = 0; k < p.channels; ++k) dot += double(p.data[k * n + i]) * dp.data[k * n + i];
    for (int k = 0; k < p.channels; ++k) {
      dz.data[k * n + i] = static_cast<float>(double(p.data[k * n + i]) * (dp.data[k * n + i] - dot));
    }
  }
  return dz;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (!(a.shape == b.shape)) throw ShapeError("concat: spatial shape mismatch");
  Tensor out(a.channels + b.channels, a.shape);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

Tensor flip(const Tensor& t, unsigned axes) {
  if ((axes & 7u) == 0) return t;
  Tensor out(t.channels, t.shape);
  const Shape3 s = t.shape;
  for (int c = 0; c < t.channels; ++c) {
    const float* src = t.channel(c);
    float* dst = out.channel(c);
    for (std::int64_t z = 0; z < s.nz; ++z) {
      const std::int64_t fz = (axes & 4u) ? s.nz - 1 - z : z;
      for (std::int64_t y = 0; y < s.ny; ++y) {
        const std::int64_t fy = (axes & 2u) ? s.ny - 1 - y : y;
        for (std::int64_t x = 0; x < s.nx; ++x) {
          const std::int64_t fx = (axes & 1u) ? s.nx - 1 - x : x;
          dst[s.index(fx, fy, fz)] = src[s.index(x, y, z)];
        }
      }
    }
  }
  return out;
}

}  // namespace labelseg::nn
