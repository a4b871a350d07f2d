#ifndef TWOPC_IMAGE_HPP
#define TWOPC_IMAGE_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace twopc {

inline constexpr int kImageChannels = 3;
inline constexpr int kMinImageSide = 32;

/// 3-channel planar (CHW) image with values in [0, 1].
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  ImageTensor() = default;
  ImageTensor(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(kImageChannels) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return pixels[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[c * plane() + static_cast<std::size_t>(y) * width + x]; }

  double mean() const;
  /// Throws DataError when dims are too small or a value is outside [0, 1].
  void validate() const;

  bool operator==(const ImageTensor&) const = default;
};

/// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x1 < x2 && y1 < y2; }
  Box scaled(double s) const { return {x1 * s, y1 * s, x2 * s, y2 * s}; }
  Box clipped(int w, int h) const;

  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

/// One entry of a BoxSet/DetectionSet. `distribution` is either empty or
/// holds K foreground probabilities followed by background at index K.
struct LabeledBox {
  Box box;
  std::optional<int> class_id;
  std::vector<double> distribution;
  std::optional<double> score;

  bool operator==(const LabeledBox&) const = default;
};

using BoxSet = std::vector<LabeledBox>;
using DetectionSet = std::vector<LabeledBox>;

/// Binds box coordinates to one image at one scale. Boxes from different
/// frames must be mapped before they are combined.
struct Frame {
  std::string image_id;
  double scale = 1.0;

  bool operator==(const Frame&) const = default;
};

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> objectness;
  Frame frame;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }
};

/// Greedy NMS: score-descending, ties broken by the smaller index. Returns the
/// kept indices in visiting order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

/// Bilinear resize with half-pixel centers.
ImageTensor resize_bilinear(const ImageTensor& img, int out_h, int out_w);

}  // namespace twopc

#endif  // TWOPC_IMAGE_HPP
