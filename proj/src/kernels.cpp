#include "twopc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "twopc/common.hpp"

namespace twopc::kernels {

namespace {

void check_size(std::size_t got, std::size_t want, const char* what) {
  if (got < want) throw ContractViolation(std::string("kernel buffer too small: ") + what);
}

// col[k][p], k = (ci * K + ky) * K + kx, p = oy * OW + ox
void im2col(const ConvGeometry& g, const double* in, double* col) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int kk = g.kernel * g.kernel;
  const int rows = g.in_channels * kk;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < rows; ++k) {
    const int ci = k / kk;
    const int ky = (k % kk) / g.kernel;
    const int kx = k % g.kernel;
    const double* plane = in + static_cast<std::size_t>(ci) * g.in_height * g.in_width;
    double* dst = col + static_cast<std::size_t>(k) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      double* row = dst + static_cast<std::size_t>(oy) * ow;
      if (iy < 0 || iy >= g.in_height) {
        std::fill(row, row + ow, 0.0);
        continue;
      }
      const double* src = plane + static_cast<std::size_t>(iy) * g.in_width;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix = ox * g.stride - g.pad + kx;
        row[ox] = (ix >= 0 && ix < g.in_width) ? src[ix] : 0.0;
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* in) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int kk = g.kernel * g.kernel;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_channels; ++ci) {
    double* plane = in + static_cast<std::size_t>(ci) * g.in_height * g.in_width;
    std::fill(plane, plane + static_cast<std::size_t>(g.in_height) * g.in_width, 0.0);
    for (int r = 0; r < kk; ++r) {
      const int ky = r / g.kernel;
      const int kx = r % g.kernel;
      const double* src = col + static_cast<std::size_t>(ci * kk + r) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_height) continue;
        double* dst = plane + static_cast<std::size_t>(iy) * g.in_width;
        const double* srow = src + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix >= 0 && ix < g.in_width) dst[ix] += srow[ox];
        }
      }
    }
  }
}

std::vector<double>& scratch(int slot, std::size_t n) {
  thread_local std::vector<double> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

struct Bilinear {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
  bool valid = false;
};

Bilinear bilinear_at(int height, int width, double y, double x) {
  Bilinear b;
  if (y < -1.0 || y > height || x < -1.0 || x > width) return b;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  b.y0 = static_cast<int>(y);
  b.x0 = static_cast<int>(x);
  if (b.y0 >= height - 1) {
    b.y0 = b.y1 = height - 1;
    y = b.y0;
  } else {
    b.y1 = b.y0 + 1;
  }
  if (b.x0 >= width - 1) {
    b.x0 = b.x1 = width - 1;
    x = b.x0;
  } else {
    b.x1 = b.x0 + 1;
  }
  const double ly = y - b.y0, lx = x - b.x0;
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  b.w00 = hy * hx;
  b.w01 = hy * lx;
  b.w10 = ly * hx;
  b.w11 = ly * lx;
  b.valid = true;
  return b;
}

// Sample points of one RoI, shared by every channel.
std::vector<Bilinear> roi_samples(const RoiAlignGeometry& g, const Box& roi) {
  const double sx = roi.x1 * g.spatial_scale - 0.5;
  const double sy = roi.y1 * g.spatial_scale - 0.5;
  const double bin_w = (roi.x2 - roi.x1) * g.spatial_scale / g.pooled;
  const double bin_h = (roi.y2 - roi.y1) * g.spatial_scale / g.pooled;
  const int s = g.sampling;
  std::vector<Bilinear> out;
  out.reserve(static_cast<std::size_t>(g.pooled) * g.pooled * s * s);
  for (int ph = 0; ph < g.pooled; ++ph) {
    for (int pw = 0; pw < g.pooled; ++pw) {
      for (int iy = 0; iy < s; ++iy) {
        const double y = sy + ph * bin_h + (iy + 0.5) * bin_h / s;
        for (int ix = 0; ix < s; ++ix) {
          const double x = sx + pw * bin_w + (ix + 0.5) * bin_w / s;
          out.push_back(bilinear_at(g.height, g.width, y, x));
        }
      }
    }
  }
  return out;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  check_size(input.size(), g.input_size(), "conv input");
  check_size(weight.size(), g.weight_size(), "conv weight");
  check_size(output.size(), g.output_size(), "conv output");
  const int pixels = g.out_height() * g.out_width();
  const int rows = g.in_channels * g.kernel * g.kernel;
  auto& col = scratch(0, static_cast<std::size_t>(rows) * pixels);
  im2col(g, input.data(), col.data());
  const double* c = col.data();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.out_channels; ++co) {
    double* out = output.data() + static_cast<std::size_t>(co) * pixels;
    const double b = bias.empty() ? 0.0 : bias[co];
    std::fill(out, out + pixels, b);
    const double* w = weight.data() + static_cast<std::size_t>(co) * rows;
    for (int k = 0; k < rows; ++k) {
      const double wv = w[k];
      const double* src = c + static_cast<std::size_t>(k) * pixels;
#pragma omp simd
      for (int p = 0; p < pixels; ++p) out[p] += wv * src[p];
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  check_size(grad_output.size(), g.output_size(), "conv grad_output");
  check_size(grad_weight.size(), g.weight_size(), "conv grad_weight");
  const int pixels = g.out_height() * g.out_width();
  const int rows = g.in_channels * g.kernel * g.kernel;
  auto& col = scratch(0, static_cast<std::size_t>(rows) * pixels);
  im2col(g, input.data(), col.data());
  const double* c = col.data();
  const double* dout = grad_output.data();
#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.out_channels; ++co) {
    const double* d = dout + static_cast<std::size_t>(co) * pixels;
    double* dw = grad_weight.data() + static_cast<std::size_t>(co) * rows;
    for (int k = 0; k < rows; ++k) {
      const double* src = c + static_cast<std::size_t>(k) * pixels;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (int p = 0; p < pixels; ++p) acc += d[p] * src[p];
      dw[k] += acc;
    }
    if (!grad_bias.empty()) {
      double acc = 0.0;
      for (int p = 0; p < pixels; ++p) acc += d[p];
      grad_bias[co] += acc;
    }
  }
  if (grad_input.empty()) return;
  check_size(grad_input.size(), g.input_size(), "conv grad_input");
  auto& dcol = scratch(1, static_cast<std::size_t>(rows) * pixels);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < rows; ++k) {
    double* dst = dcol.data() + static_cast<std::size_t>(k) * pixels;
    std::fill(dst, dst + pixels, 0.0);
    for (int co = 0; co < g.out_channels; ++co) {
      const double wv = weight[static_cast<std::size_t>(co) * rows + k];
      if (wv == 0.0) continue;
      const double* d = dout + static_cast<std::size_t>(co) * pixels;
#pragma omp simd
      for (int p = 0; p < pixels; ++p) dst[p] += wv * d[p];
    }
  }
  col2im(g, dcol.data(), grad_input.data());
}

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  check_size(input.size(), static_cast<std::size_t>(g.rows) * g.in_features, "linear input");
  check_size(output.size(), static_cast<std::size_t>(g.rows) * g.out_features, "linear output");
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.rows; ++n) {
    const double* x = input.data() + static_cast<std::size_t>(n) * g.in_features;
    double* y = output.data() + static_cast<std::size_t>(n) * g.out_features;
    for (int o = 0; o < g.out_features; ++o) {
      const double* w = weight.data() + static_cast<std::size_t>(o) * g.in_features;
      double acc = 0.0;
#pragma omp simd reduction(+ : acc)
      for (int i = 0; i < g.in_features; ++i) acc += w[i] * x[i];
      y[o] = acc + (bias.empty() ? 0.0 : bias[o]);
    }
  }
}

void linear_backward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.out_features; ++o) {
    double* dw = grad_weight.data() + static_cast<std::size_t>(o) * g.in_features;
    double db = 0.0;
    for (int n = 0; n < g.rows; ++n) {
      const double d = grad_output[static_cast<std::size_t>(n) * g.out_features + o];
      if (d == 0.0) continue;
      db += d;
      const double* x = input.data() + static_cast<std::size_t>(n) * g.in_features;
#pragma omp simd
      for (int i = 0; i < g.in_features; ++i) dw[i] += d * x[i];
    }
    if (!grad_bias.empty()) grad_bias[o] += db;
  }
  if (grad_input.empty()) return;
#pragma omp parallel for schedule(static)
  for (int n = 0; n < g.rows; ++n) {
    double* dx = grad_input.data() + static_cast<std::size_t>(n) * g.in_features;
    std::fill(dx, dx + g.in_features, 0.0);
    for (int o = 0; o < g.out_features; ++o) {
      const double d = grad_output[static_cast<std::size_t>(n) * g.out_features + o];
      if (d == 0.0) continue;
      const double* w = weight.data() + static_cast<std::size_t>(o) * g.in_features;
#pragma omp simd
      for (int i = 0; i < g.in_features; ++i) dx[i] += d * w[i];
    }
  }
}

void roi_align_forward(const RoiAlignGeometry& g, std::span<const double> features, std::span<const Box> rois,
                       std::span<double> output) {
  check_size(output.size(), rois.size() * g.roi_size(), "roi_align output");
  const int n_rois = static_cast<int>(rois.size());
  const int bins = g.pooled * g.pooled;
  const int per_bin = g.sampling * g.sampling;
  const double inv = 1.0 / per_bin;
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
#pragma omp parallel for schedule(dynamic, 4)
  for (int r = 0; r < n_rois; ++r) {
    const auto samples = roi_samples(g, rois[r]);
    double* out = output.data() + r * g.roi_size();
    for (int c = 0; c < g.channels; ++c) {
      const double* f = features.data() + c * plane;
      for (int b = 0; b < bins; ++b) {
        double acc = 0.0;
        for (int s = 0; s < per_bin; ++s) {
          const Bilinear& bl = samples[b * per_bin + s];
          if (!bl.valid) continue;
          acc += bl.w00 * f[bl.y0 * g.width + bl.x0] + bl.w01 * f[bl.y0 * g.width + bl.x1] +
                 bl.w10 * f[bl.y1 * g.width + bl.x0] + bl.w11 * f[bl.y1 * g.width + bl.x1];
        }
        out[c * bins + b] = acc * inv;
      }
    }
  }
}

void roi_align_backward(const RoiAlignGeometry& g, std::span<const Box> rois, std::span<const double> grad_output,
                        std::span<double> grad_features) {
  const int n_rois = static_cast<int>(rois.size());
  const int bins = g.pooled * g.pooled;
  const int per_bin = g.sampling * g.sampling;
  const double inv = 1.0 / per_bin;
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  std::vector<std::vector<Bilinear>> samples(n_rois);
  for (int r = 0; r < n_rois; ++r) samples[r] = roi_samples(g, rois[r]);
  // Parallel over channels: each thread owns whole feature planes.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.channels; ++c) {
    double* f = grad_features.data() + c * plane;
    for (int r = 0; r < n_rois; ++r) {
      const double* d = grad_output.data() + r * g.roi_size() + static_cast<std::size_t>(c) * bins;
      for (int b = 0; b < bins; ++b) {
        const double gv = d[b] * inv;
        if (gv == 0.0) continue;
        for (int s = 0; s < per_bin; ++s) {
          const Bilinear& bl = samples[r][b * per_bin + s];
          if (!bl.valid) continue;
          f[bl.y0 * g.width + bl.x0] += gv * bl.w00;
          f[bl.y0 * g.width + bl.x1] += gv * bl.w01;
          f[bl.y1 * g.width + bl.x0] += gv * bl.w10;
          f[bl.y1 * g.width + bl.x1] += gv * bl.w11;
        }
      }
    }
  }
}

}  // namespace twopc::kernels
