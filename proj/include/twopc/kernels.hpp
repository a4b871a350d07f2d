#ifndef TWOPC_KERNELS_HPP
#define TWOPC_KERNELS_HPP

// Dense numeric kernels used by the detector. The top-level namespace holds
// the OpenMP versions; `reference` holds straightforward serial loops that
// the tests and the benchmark compare against.
//
// Backward kernels accumulate into weight/bias gradients and overwrite the
// input gradient (skipped when the span is empty).

#include <cstddef>
#include <span>

#include "twopc/image.hpp"

namespace twopc::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::size_t input_size() const { return static_cast<std::size_t>(in_channels) * in_height * in_width; }
  std::size_t output_size() const { return static_cast<std::size_t>(out_channels) * out_height() * out_width(); }
  std::size_t weight_size() const { return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel; }
};

struct LinearGeometry {
  int rows = 0;
  int in_features = 0;
  int out_features = 0;
};

/// Aligned RoIAlign (half-pixel offset) over a CHW feature map.
struct RoiAlignGeometry {
  int channels = 0;
  int height = 0;
  int width = 0;
  int pooled = 7;
  int sampling = 2;
  double spatial_scale = 1.0;

  std::size_t roi_size() const { return static_cast<std::size_t>(channels) * pooled * pooled; }
};

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void linear_backward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

void roi_align_forward(const RoiAlignGeometry& g, std::span<const double> features, std::span<const Box> rois,
                       std::span<double> output);
/// Accumulates into grad_features.
void roi_align_backward(const RoiAlignGeometry& g, std::span<const Box> rois, std::span<const double> grad_output,
                        std::span<double> grad_features);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void conv2d_backward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);
void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void linear_backward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);
void roi_align_forward(const RoiAlignGeometry& g, std::span<const double> features, std::span<const Box> rois,
                       std::span<double> output);
void roi_align_backward(const RoiAlignGeometry& g, std::span<const Box> rois, std::span<const double> grad_output,
                        std::span<double> grad_features);

}  // namespace reference

}  // namespace twopc::kernels

#endif  // TWOPC_KERNELS_HPP
