// Serial reference kernels. Direct loops, no im2col, no threading.

#include <algorithm>
#include <cmath>

#include "twopc/kernels.hpp"

namespace twopc::kernels::reference {

namespace {

double sample(std::span<const double> plane, int height, int width, double y, double x) {
  if (y < -1.0 || y > height || x < -1.0 || x > width) return 0.0;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(std::floor(y));
  int x0 = static_cast<int>(std::floor(x));
  int y1 = y0 + 1;
  int x1 = x0 + 1;
  if (y0 >= height - 1) {
    y0 = y1 = height - 1;
    y = y0;
  }
  if (x0 >= width - 1) {
    x0 = x1 = width - 1;
    x = x0;
  }
  const double ly = y - y0, lx = x - x0;
  auto at = [&](int yy, int xx) { return plane[static_cast<std::size_t>(yy) * width + xx]; };
  return (1 - ly) * (1 - lx) * at(y0, x0) + (1 - ly) * lx * at(y0, x1) + ly * (1 - lx) * at(y1, x0) +
         ly * lx * at(y1, x1);
}

void scatter(std::span<double> plane, int height, int width, double y, double x, double g) {
  if (y < -1.0 || y > height || x < -1.0 || x > width) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(std::floor(y));
  int x0 = static_cast<int>(std::floor(x));
  int y1 = y0 + 1;
  int x1 = x0 + 1;
  if (y0 >= height - 1) {
    y0 = y1 = height - 1;
    y = y0;
  }
  if (x0 >= width - 1) {
    x0 = x1 = width - 1;
    x = x0;
  }
  const double ly = y - y0, lx = x - x0;
  auto at = [&](int yy, int xx) -> double& { return plane[static_cast<std::size_t>(yy) * width + xx]; };
  at(y0, x0) += g * (1 - ly) * (1 - lx);
  at(y0, x1) += g * (1 - ly) * lx;
  at(y1, x0) += g * ly * (1 - lx);
  at(y1, x1) += g * ly * lx;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int co = 0; co < g.out_channels; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (int ci = 0; ci < g.in_channels; ++ci) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.in_width) continue;
              acc += weight[((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] *
                     input[(static_cast<std::size_t>(ci) * g.in_height + iy) * g.in_width + ix];
            }
          }
        }
        output[(static_cast<std::size_t>(co) * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const int oh = g.out_height(), ow = g.out_width();
  if (!grad_input.empty()) std::fill(grad_input.begin(), grad_input.begin() + g.input_size(), 0.0);
  for (int co = 0; co < g.out_channels; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double d = grad_output[(static_cast<std::size_t>(co) * oh + oy) * ow + ox];
        if (!grad_bias.empty()) grad_bias[co] += d;
        for (int ci = 0; ci < g.in_channels; ++ci) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.in_height) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.in_width) continue;
              const std::size_t wi = ((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx;
              const std::size_t ii = (static_cast<std::size_t>(ci) * g.in_height + iy) * g.in_width + ix;
              grad_weight[wi] += d * input[ii];
              if (!grad_input.empty()) grad_input[ii] += d * weight[wi];
            }
          }
        }
      }
    }
  }
}

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  for (int n = 0; n < g.rows; ++n) {
    for (int o = 0; o < g.out_features; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (int i = 0; i < g.in_features; ++i) {
        acc += weight[static_cast<std::size_t>(o) * g.in_features + i] * input[static_cast<std::size_t>(n) * g.in_features + i];
      }
      output[static_cast<std::size_t>(n) * g.out_features + o] = acc;
    }
  }
}

void linear_backward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  if (!grad_input.empty()) {
    std::fill(grad_input.begin(), grad_input.begin() + static_cast<std::size_t>(g.rows) * g.in_features, 0.0);
  }
  for (int n = 0; n < g.rows; ++n) {
    for (int o = 0; o < g.out_features; ++o) {
      const double d = grad_output[static_cast<std::size_t>(n) * g.out_features + o];
      if (!grad_bias.empty()) grad_bias[o] += d;
      for (int i = 0; i < g.in_features; ++i) {
        grad_weight[static_cast<std::size_t>(o) * g.in_features + i] += d * input[static_cast<std::size_t>(n) * g.in_features + i];
        if (!grad_input.empty()) {
          grad_input[static_cast<std::size_t>(n) * g.in_features + i] += d * weight[static_cast<std::size_t>(o) * g.in_features + i];
        }
      }
    }
  }
}

void roi_align_forward(const RoiAlignGeometry& g, std::span<const double> features, std::span<const Box> rois,
                       std::span<double> output) {
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  const int s = g.sampling;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Box& roi = rois[r];
    const double bin_w = (roi.x2 - roi.x1) * g.spatial_scale / g.pooled;
    const double bin_h = (roi.y2 - roi.y1) * g.spatial_scale / g.pooled;
    for (int c = 0; c < g.channels; ++c) {
      const auto f = features.subspan(c * plane, plane);
      for (int ph = 0; ph < g.pooled; ++ph) {
        for (int pw = 0; pw < g.pooled; ++pw) {
          double acc = 0.0;
          for (int iy = 0; iy < s; ++iy) {
            for (int ix = 0; ix < s; ++ix) {
              const double y = roi.y1 * g.spatial_scale - 0.5 + ph * bin_h + (iy + 0.5) * bin_h / s;
              const double x = roi.x1 * g.spatial_scale - 0.5 + pw * bin_w + (ix + 0.5) * bin_w / s;
              acc += sample(f, g.height, g.width, y, x);
            }
          }
          output[r * g.roi_size() + (static_cast<std::size_t>(c) * g.pooled + ph) * g.pooled + pw] = acc / (s * s);
        }
      }
    }
  }
}

void roi_align_backward(const RoiAlignGeometry& g, std::span<const Box> rois, std::span<const double> grad_output,
                        std::span<double> grad_features) {
  const std::size_t plane = static_cast<std::size_t>(g.height) * g.width;
  const int s = g.sampling;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Box& roi = rois[r];
    const double bin_w = (roi.x2 - roi.x1) * g.spatial_scale / g.pooled;
    const double bin_h = (roi.y2 - roi.y1) * g.spatial_scale / g.pooled;
    for (int c = 0; c < g.channels; ++c) {
      auto f = grad_features.subspan(c * plane, plane);
      for (int ph = 0; ph < g.pooled; ++ph) {
        for (int pw = 0; pw < g.pooled; ++pw) {
          const double d =
              grad_output[r * g.roi_size() + (static_cast<std::size_t>(c) * g.pooled + ph) * g.pooled + pw] / (s * s);
          for (int iy = 0; iy < s; ++iy) {
            for (int ix = 0; ix < s; ++ix) {
              const double y = roi.y1 * g.spatial_scale - 0.5 + ph * bin_h + (iy + 0.5) * bin_h / s;
              const double x = roi.x1 * g.spatial_scale - 0.5 + pw * bin_w + (ix + 0.5) * bin_w / s;
              scatter(f, g.height, g.width, y, x, d);
            }
          }
        }
      }
    }
  }
}

}  // namespace twopc::kernels::reference
