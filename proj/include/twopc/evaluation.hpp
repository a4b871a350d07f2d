#ifndef TWOPC_EVALUATION_HPP
#define TWOPC_EVALUATION_HPP

#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/image.hpp"

namespace twopc {

/// Small/medium/large split by ground-truth area (px^2): small < small_max,
/// medium < medium_max, large otherwise.
struct AreaBounds {
  double small_max = 32.0 * 32.0;
  double medium_max = 96.0 * 96.0;

  /// The 32^2 / 96^2 convention rescaled from a 600x600 reference to an image area.
  static AreaBounds scaled_to(double image_area);
};

struct StratumCounts {
  std::size_t ground_truth = 0;
  std::size_t detections = 0;
};

struct EvalResult {
  std::map<int, double> per_class_ap;  // classes with at least one GT box
  std::vector<int> excluded_classes;   // classes without GT (detections only)
  double mean_ap = 0.0;
  double ap_large = 0.0;
  double ap_medium = 0.0;
  double ap_small = 0.0;
  StratumCounts small, medium, large, total;
};

nlohmann::json to_json_record(const EvalResult& r);

/// All-point interpolated AP of one class. `scores[i]` pairs with `is_tp[i]`.
/// Equal scores keep their given order.
double average_precision(const std::vector<double>& scores, const std::vector<bool>& is_tp, std::size_t num_gt);

/// Greedy matching per class at IoU >= iou_thresh in descending score order
/// (equal scores by detection index within an image, then by image index).
/// Stratified APs restrict the ground truth to one area stratum; detections
/// matched to other strata are ignored and unmatched detections are kept only
/// when their own area falls in the stratum.
EvalResult evaluate(const std::vector<DetectionSet>& detections, const std::vector<BoxSet>& ground_truth,
                    double iou_thresh, const AreaBounds& bounds);

/// Mean of evaluate() over IoU 0.50:0.05:0.95.
EvalResult evaluate_coco(const std::vector<DetectionSet>& detections, const std::vector<BoxSet>& ground_truth,
                         const AreaBounds& bounds);

}  // namespace twopc

#endif  // TWOPC_EVALUATION_HPP
