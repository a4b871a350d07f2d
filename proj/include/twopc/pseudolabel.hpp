#ifndef TWOPC_PSEUDOLABEL_HPP
#define TWOPC_PSEUDOLABEL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/detector.hpp"
#include "twopc/image.hpp"

namespace twopc {

struct FilterConfig {
  double tau = 0.8;      // confidence threshold
  double nms_iou = 0.5;  // per-class NMS threshold

  void validate() const;
};

void to_json(nlohmann::json& j, const FilterConfig& c);
void from_json(const nlohmann::json& j, FilterConfig& c);

/// High-confidence teacher predictions on one target image. Every entry has
/// class_id, distribution and score set.
struct PseudoLabelSet {
  BoxSet labels;
  std::string source_image_id;
  std::int64_t teacher_iteration = 0;
  Frame frame;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::vector<Box> boxes() const;
  std::vector<int> classes() const;
};

/// Highest foreground probability and its class. The background entry (last)
/// never wins.
std::pair<int, double> foreground_max(const std::vector<double>& distribution);

/// Per-class NMS first, then the score threshold. Scores come from the
/// distribution when present, else from the `score` field. Output order is
/// class-major, score-descending within a class.
BoxSet filter_detections(const DetectionSet& detections, const FilterConfig& cfg);

/// Teacher pass on a full-scale image: RPN proposals, RoI predictions, filter.
PseudoLabelSet generate_pseudo_labels(const Detector& detector, const DetectorParams& teacher,
                                      const ImageTensor& image, const FilterConfig& cfg,
                                      const std::string& image_id = {}, std::int64_t teacher_iteration = 0);

/// Same, reusing an already computed teacher forward pass.
PseudoLabelSet pseudo_labels_from(const Detector& detector, const DetectorParams& teacher,
                                  const FeatureForward& teacher_fwd, const FilterConfig& cfg, const Frame& frame,
                                  std::int64_t teacher_iteration);

}  // namespace twopc

#endif  // TWOPC_PSEUDOLABEL_HPP
