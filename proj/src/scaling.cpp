#include "twopc/scaling.hpp"

#include <algorithm>
#include <cmath>

namespace twopc {

void ScaleSchedule::validate() const {
  if (milestones.empty() || milestones.size() != scales.size()) {
    throw ConfigError("scale schedule: milestones and scales must be non-empty and of equal length");
  }
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (!(milestones[i] > 0 && milestones[i] < 1)) throw ConfigError("scale schedule: milestones must lie in (0, 1)");
    if (i > 0 && !(milestones[i] > milestones[i - 1])) throw ConfigError("scale schedule: milestones must increase");
    if (i > 0 && !(scales[i] > scales[i - 1])) throw ConfigError("scale schedule: scales must increase");
    if (!(scales[i] > 0)) throw ConfigError("scale schedule: scales must be positive");
  }
  if (scales.back() != 1.0) throw ConfigError("scale schedule: last scale must be 1.0");
  if (!(gaussian_sigma >= 0)) throw ConfigError("scale schedule: gaussian_sigma must be >= 0");
  if (!(min_scale > 0 && min_scale <= 1)) throw ConfigError("scale schedule: min_scale must lie in (0, 1]");
  if (!(min_box_area >= 0)) throw ConfigError("scale schedule: min_box_area must be >= 0");
}

void to_json(nlohmann::json& j, const ScaleSchedule& s) {
  j = {{"milestones", s.milestones},
       {"scales", s.scales},
       {"gaussian_sigma", s.gaussian_sigma},
       {"min_scale", s.min_scale},
       {"min_box_area", s.min_box_area}};
}

void from_json(const nlohmann::json& j, ScaleSchedule& s) {
  s.milestones = j.value("milestones", s.milestones);
  s.scales = j.value("scales", s.scales);
  s.gaussian_sigma = j.value("gaussian_sigma", s.gaussian_sigma);
  s.min_scale = j.value("min_scale", s.min_scale);
  s.min_box_area = j.value("min_box_area", s.min_box_area);
}

double schedule_norm(double progress, const ScaleSchedule& sched) {
  std::size_t passed = 0;
  for (double m : sched.milestones) passed += progress >= m;
  return sched.scales[std::min(passed, sched.scales.size() - 1)];
}

double sample_scale(double norm, double sigma, double min_scale, Rng& rng) {
  if (sigma == 0) return std::clamp(norm, min_scale, 1.0);
  return std::clamp(rng.normal(norm, sigma), min_scale, 1.0);
}

std::pair<int, int> scaled_dims(int height, int width, double s) {
  return {static_cast<int>(std::lround(height * s)), static_cast<int>(std::lround(width * s))};
}

std::pair<ScaledView, PseudoLabelSet> scale_inputs(const ImageTensor& image, const PseudoLabelSet& pseudo, double s,
                                                   double min_box_area) {
  if (!(s > 0)) throw ContractViolation("scale factor must be positive");
  if (pseudo.frame.scale != 1.0) throw ContractViolation("scale_inputs expects pseudo-labels in the full-scale frame");
  ScaledView view;
  view.scale_factor = s;
  view.frame = Frame{pseudo.frame.image_id, s};
  const auto [h, w] = scaled_dims(image.height, image.width, s);
  view.image = s == 1.0 ? image : resize_bilinear(image, h, w);

  PseudoLabelSet out = pseudo;
  out.frame = view.frame;
  out.labels.clear();
  for (const auto& l : pseudo.labels) {
    LabeledBox scaled = l;
    scaled.box = l.box.scaled(s);
    if (scaled.box.x2 > w || scaled.box.y2 > h) scaled.box = scaled.box.clipped(w, h);
    if (scaled.box.area() < min_box_area) continue;
    out.labels.push_back(std::move(scaled));
  }
  return {std::move(view), std::move(out)};
}

namespace {

double frame_ratio(const Frame& from, const Frame& to) {
  if (from.image_id != to.image_id) throw ContractViolation("cannot map boxes between different images");
  if (!(from.scale > 0 && to.scale > 0)) throw ContractViolation("frame scale must be positive");
  return to.scale / from.scale;
}

}  // namespace

std::vector<Box> map_boxes(const std::vector<Box>& boxes, const Frame& from, const Frame& to) {
  const double r = frame_ratio(from, to);
  if (r == 1.0) return boxes;
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const Box& b : boxes) out.push_back(b.scaled(r));
  return out;
}

BoxSet map_boxes(const BoxSet& boxes, const Frame& from, const Frame& to) {
  const double r = frame_ratio(from, to);
  BoxSet out = boxes;
  if (r == 1.0) return out;
  for (auto& b : out) b.box = b.box.scaled(r);
  return out;
}

}  // namespace twopc
