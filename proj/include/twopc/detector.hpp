#ifndef TWOPC_DETECTOR_HPP
#define TWOPC_DETECTOR_HPP

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/data.hpp"
#include "twopc/image.hpp"
#include "twopc/kernels.hpp"

namespace twopc {

/// Architecture and loss hyperparameters of the two-stage detector.
struct DetectorConfig {
  int num_classes = 4;
  std::vector<int> backbone_channels{8, 16, 32, 32};
  std::vector<int> backbone_strides{2, 2, 2, 1};
  int rpn_channels = 32;
  std::vector<double> anchor_sizes{8, 16, 32, 56};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width

  int rpn_pre_nms_topk = 300;
  double rpn_nms_iou = 0.7;
  int proposal_cap = 100;
  double rpn_min_box_size = 1.0;
  int rpn_batch_per_image = 128;
  double rpn_positive_fraction = 0.5;
  double rpn_fg_iou = 0.7;
  double rpn_bg_iou = 0.3;

  int roi_pool = 7;
  int roi_sampling = 2;
  int roi_hidden = 64;
  int roi_batch_per_image = 64;
  double roi_positive_fraction = 0.25;
  double roi_fg_iou = 0.5;
  std::array<double, 4> roi_box_coder_weights{10, 10, 5, 5};

  double rpn_box_weight = 1.0;
  double roi_box_weight = 1.0;

  // Input standardization. Per-image mode uses the image's own mean and std
  // (floored at pixel_std_floor) instead of the fixed pixel_mean / pixel_std.
  bool per_image_normalization = true;
  double pixel_mean = 0.45;
  double pixel_std = 0.25;
  double pixel_std_floor = 0.02;

  int feature_stride() const;
  int anchors_per_location() const { return static_cast<int>(anchor_sizes.size() * anchor_ratios.size()); }
  int background_index() const { return num_classes; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

/// One named tensor inside the flat parameter vector.
struct ParamTensor {
  std::string name;
  std::string segment;  // "backbone", "rpn" or "roi_head"
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

class ParamLayout {
 public:
  std::size_t add(std::string name, std::string segment, std::size_t size);
  const ParamTensor& tensor(std::string_view name) const;
  const std::vector<ParamTensor>& tensors() const { return tensors_; }
  std::vector<ParamSegment> segments() const;
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamTensor> tensors_;
  std::size_t total_ = 0;
};

/// Flat parameter vector. The partition lives in the Detector's ParamLayout.
struct DetectorParams {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool all_finite() const;
  bool operator==(const DetectorParams&) const = default;
};

/// Loss components as reported (already multiplied by their config weights).
struct LossBreakdown {
  double rpn_objectness = 0.0;
  double rpn_box = 0.0;
  double roi_classification = 0.0;
  double roi_box = 0.0;

  double total() const { return rpn_objectness + rpn_box + roi_classification + roi_box; }
};

struct SupervisedLoss {
  LossBreakdown loss;
  std::vector<double> gradient;
};

/// Activations of the backbone and RPN for one image, kept for backward.
struct FeatureForward {
  int image_height = 0;
  int image_width = 0;
  std::vector<kernels::ConvGeometry> backbone_geometry;
  std::vector<std::vector<double>> backbone;  // [0] normalized input, [i + 1] block i output (post-ReLU)
  kernels::ConvGeometry rpn_geometry;
  std::vector<double> rpn_hidden;
  std::vector<double> objectness;  // A x Hf x Wf logits
  std::vector<double> deltas;      // 4A x Hf x Wf

  int feature_channels() const { return backbone_geometry.back().out_channels; }
  int feature_height() const { return backbone_geometry.back().out_height(); }
  int feature_width() const { return backbone_geometry.back().out_width(); }
  const std::vector<double>& features() const { return backbone.back(); }
};

/// RoI head activations for a list of boxes.
struct RoiForward {
  std::vector<Box> rois;
  std::vector<double> pooled;  // N x (C * P * P)
  std::vector<double> hidden;  // N x hidden, post-ReLU
  std::vector<double> logits;  // N x (K + 1)
  std::vector<double> deltas;  // N x 4K

  std::size_t size() const { return rois.size(); }
};

/// Anchor targets: 1 foreground, 0 background, -1 ignored.
struct AnchorLabels {
  std::vector<int> labels;
  std::vector<int> matched;  // index of the best-matching target box, -1 when there is none
};

std::array<double, 4> encode_box(const Box& reference, const Box& target, const std::array<double, 4>& weights);
Box decode_box(const Box& reference, std::span<const double> deltas, const std::array<double, 4>& weights);

/// Softmax of one logit row.
std::vector<double> softmax(std::span<const double> logits);

/// Minimal two-stage detector: small convolutional backbone, RPN, RoIAlign head.
/// All operations are pure functions of (params, inputs).
class Detector {
 public:
  explicit Detector(DetectorConfig config);

  const DetectorConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }

  DetectorParams init_params(std::uint64_t seed) const;

  /// Class-agnostic proposals, at most proposal_cap, sorted by objectness.
  ProposalSet rpn_propose(const DetectorParams& params, const ImageTensor& image) const;
  /// One prediction per proposal, index-aligned with the input.
  DetectionSet roi_predict(const DetectorParams& params, const ImageTensor& image, const ProposalSet& proposals) const;
  /// L_rpn (objectness + box) + L_roi (classification + box) with gradients.
  SupervisedLoss supervised_loss(const DetectorParams& params, const LabeledImage& sample, std::uint64_t seed) const;
  /// Same loss with an explicit proposal list. Proposals are constants of the graph.
  SupervisedLoss supervised_loss(const DetectorParams& params, const LabeledImage& sample, const ProposalSet& proposals,
                                 std::uint64_t seed) const;
  /// Objectness and RoI classification terms only (no box regression), with
  /// `sample` boxes as targets. Used for hard pseudo-label training.
  SupervisedLoss classification_loss(const DetectorParams& params, const FeatureForward& fwd,
                                     const LabeledImage& sample, const ProposalSet& proposals,
                                     std::uint64_t seed) const;

  /// Final detections for evaluation: per-class scores above `score_threshold`,
  /// per-class NMS, at most `max_detections`.
  DetectionSet detect(const DetectorParams& params, const ImageTensor& image, double score_threshold = 0.05,
                      double nms_iou = 0.5, int max_detections = 100) const;

  // Building blocks shared by the training objectives.
  FeatureForward forward_features(const DetectorParams& params, const ImageTensor& image) const;
  ProposalSet propose(const FeatureForward& fwd, const Frame& frame) const;
  RoiForward forward_roi(const DetectorParams& params, const FeatureForward& fwd, std::span<const Box> rois) const;
  DetectionSet predictions(const FeatureForward& fwd, const RoiForward& roi) const;

  /// Anchors in channel-major order (anchor a at cell (y, x) -> a * Hf * Wf + y * Wf + x).
  std::vector<Box> anchors(int image_height, int image_width) const;
  AnchorLabels label_anchors(std::span<const Box> anchors, std::span<const Box> targets) const;
  /// Picks at most rpn_batch_per_image anchors; non-sampled entries become -1.
  void sample_anchors(AnchorLabels& labels, Rng& rng) const;

  /// Backward through the RoI head; accumulates parameter gradients and
  /// adds the feature-map gradient into `grad_features`.
  void backward_roi(const DetectorParams& params, const FeatureForward& fwd, const RoiForward& roi,
                    std::span<const double> grad_logits, std::span<const double> grad_deltas,
                    std::span<double> gradient, std::span<double> grad_features) const;
  /// Backward through the RPN heads (either gradient may be empty).
  void backward_rpn(const DetectorParams& params, const FeatureForward& fwd, std::span<const double> grad_objectness,
                    std::span<const double> grad_deltas, std::span<double> gradient,
                    std::span<double> grad_features) const;
  void backward_backbone(const DetectorParams& params, const FeatureForward& fwd, std::span<const double> grad_features,
                         std::span<double> gradient) const;

  /// Binary cross-entropy objectness loss over sampled anchors, normalized by
  /// the sample count. Writes d(loss)/d(logit) into `grad_objectness`.
  double objectness_loss(const FeatureForward& fwd, const AnchorLabels& labels, std::span<double> grad_objectness) const;

  kernels::RoiAlignGeometry roi_geometry(const FeatureForward& fwd) const;

 private:
  SupervisedLoss supervised_from(const DetectorParams& params, const FeatureForward& fwd, const LabeledImage& sample,
                                 const ProposalSet& proposals, std::uint64_t seed, bool box_terms) const;
  std::span<const double> view(const DetectorParams& p, std::string_view name) const;
  std::span<double> view(std::span<double> g, std::string_view name) const;

  DetectorConfig config_;
  ParamLayout layout_;
  std::size_t roi_input_size_ = 0;
};

}  // namespace twopc

#endif  // TWOPC_DETECTOR_HPP
