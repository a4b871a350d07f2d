#ifndef TWOPC_SCALING_HPP
#define TWOPC_SCALING_HPP

#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/common.hpp"
#include "twopc/image.hpp"
#include "twopc/pseudolabel.hpp"

namespace twopc {

/// Step schedule for the student's input scale, plus the Gaussian jitter
/// and the minimum pseudo-box area kept after scaling.
struct ScaleSchedule {
  std::vector<double> milestones{0.57, 0.64, 0.71, 0.78, 0.85, 0.92};
  std::vector<double> scales{0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double gaussian_sigma = 0.05;
  double min_scale = 0.4;
  double min_box_area = 96.0;  // px^2, measured in the scaled frame

  void validate() const;
};

void to_json(nlohmann::json& j, const ScaleSchedule& s);
void from_json(const nlohmann::json& j, ScaleSchedule& s);

/// Scale norm at a training progress in [0, 1]. Progress before the first
/// milestone uses the first scale; each milestone passed advances one step,
/// saturating at the last scale.
double schedule_norm(double progress, const ScaleSchedule& sched);

/// Normal(norm, sigma) clipped to [min_scale, 1].
double sample_scale(double norm, double sigma, double min_scale, Rng& rng);

struct ScaledView {
  ImageTensor image;
  double scale_factor = 1.0;
  Frame frame;
};

/// Downscales an image and its pseudo-labels by `s`. Boxes whose scaled area
/// falls below `min_box_area` are dropped; survivors carry the new frame.
std::pair<ScaledView, PseudoLabelSet> scale_inputs(const ImageTensor& image, const PseudoLabelSet& pseudo, double s,
                                                   double min_box_area);

/// Pixel dims of an image scaled by `s`.
std::pair<int, int> scaled_dims(int height, int width, double s);

/// Maps boxes between two frames of the same image.
std::vector<Box> map_boxes(const std::vector<Box>& boxes, const Frame& from, const Frame& to);
BoxSet map_boxes(const BoxSet& boxes, const Frame& from, const Frame& to);

}  // namespace twopc

#endif  // TWOPC_SCALING_HPP
