#include "twopc/pseudolabel.hpp"

#include <algorithm>
#include <map>

namespace twopc {

void FilterConfig::validate() const {
  if (!(tau > 0 && tau < 1)) throw ConfigError("confidence threshold must lie in (0, 1)");
  if (!(nms_iou > 0 && nms_iou < 1)) throw ConfigError("pseudo-label NMS IoU must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const FilterConfig& c) { j = {{"tau", c.tau}, {"nms_iou", c.nms_iou}}; }

void from_json(const nlohmann::json& j, FilterConfig& c) {
  c.tau = j.value("tau", c.tau);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
}

std::vector<Box> PseudoLabelSet::boxes() const {
  std::vector<Box> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(l.box);
  return out;
}

std::vector<int> PseudoLabelSet::classes() const {
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(l.class_id.value_or(0));
  return out;
}

std::pair<int, double> foreground_max(const std::vector<double>& distribution) {
  if (distribution.size() < 2) throw ContractViolation("distribution needs at least one foreground class");
  const auto end = distribution.end() - 1;
  const auto it = std::max_element(distribution.begin(), end);
  return {static_cast<int>(it - distribution.begin()), *it};
}

BoxSet filter_detections(const DetectionSet& detections, const FilterConfig& cfg) {
  cfg.validate();
  std::map<int, std::vector<std::size_t>> by_class;
  std::vector<double> score(detections.size());
  std::vector<int> cls(detections.size());
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    if (!d.distribution.empty()) {
      std::tie(cls[i], score[i]) = foreground_max(d.distribution);
    } else {
      if (!d.score || !d.class_id) throw ContractViolation("detection without distribution needs class_id and score");
      cls[i] = *d.class_id;
      score[i] = *d.score;
    }
    by_class[cls[i]].push_back(i);
  }
  BoxSet out;
  for (const auto& [c, idx] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : idx) {
      boxes.push_back(detections[i].box);
      scores.push_back(score[i]);
    }
    for (std::size_t k : nms(boxes, scores, cfg.nms_iou)) {
      const std::size_t i = idx[k];
      if (score[i] < cfg.tau) break;  // nms returns score-descending order
      LabeledBox l = detections[i];
      l.class_id = c;
      l.score = score[i];
      out.push_back(std::move(l));
    }
  }
  return out;
}

PseudoLabelSet pseudo_labels_from(const Detector& detector, const DetectorParams& teacher,
                                  const FeatureForward& teacher_fwd, const FilterConfig& cfg, const Frame& frame,
                                  std::int64_t teacher_iteration) {
  PseudoLabelSet out;
  out.source_image_id = frame.image_id;
  out.teacher_iteration = teacher_iteration;
  out.frame = frame;
  const auto proposals = detector.propose(teacher_fwd, frame);
  if (proposals.empty()) return out;
  const auto roi = detector.forward_roi(teacher, teacher_fwd, proposals.boxes);
  out.labels = filter_detections(detector.predictions(teacher_fwd, roi), cfg);
  return out;
}

PseudoLabelSet generate_pseudo_labels(const Detector& detector, const DetectorParams& teacher,
                                      const ImageTensor& image, const FilterConfig& cfg, const std::string& image_id,
                                      std::int64_t teacher_iteration) {
  return pseudo_labels_from(detector, teacher, detector.forward_features(teacher, image), cfg, Frame{image_id, 1.0},
                            teacher_iteration);
}

}  // namespace twopc
