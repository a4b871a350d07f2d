#include "twopc/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twopc/common.hpp"

namespace twopc {

double ImageTensor::mean() const {
  if (pixels.empty()) return 0.0;
  double s = 0.0;
  for (float v : pixels) s += v;
  return s / static_cast<double>(pixels.size());
}

void ImageTensor::validate() const {
  if (height < kMinImageSide || width < kMinImageSide) {
    throw DataError("image is " + std::to_string(width) + "x" + std::to_string(height) +
                    ", both sides must be >= " + std::to_string(kMinImageSide));
  }
  if (pixels.size() != static_cast<std::size_t>(kImageChannels) * plane()) {
    throw DataError("image pixel buffer does not match its dimensions");
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("image value outside [0, 1]");
  }
}

Box Box::clipped(int w, int h) const {
  return {std::clamp(x1, 0.0, static_cast<double>(w)), std::clamp(y1, 0.0, static_cast<double>(h)),
          std::clamp(x2, 0.0, static_cast<double>(w)), std::clamp(y2, 0.0, static_cast<double>(h))};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<char> removed(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (removed[cur]) continue;
    keep.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!removed[other] && iou(boxes[cur], boxes[other]) >= iou_threshold) removed[other] = 1;
    }
  }
  return keep;
}

ImageTensor resize_bilinear(const ImageTensor& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw ContractViolation("resize target must be positive");
  if (out_h == img.height && out_w == img.width) return img;
  ImageTensor out(out_h, out_w);
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<float> wx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
    x0[x] = static_cast<int>(fx);
    x1[x] = std::min(x0[x] + 1, img.width - 1);
    wx[x] = static_cast<float>(fx - x0[x]);
  }
  for (int c = 0; c < kImageChannels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const float wy = static_cast<float>(fy - y0);
      for (int x = 0; x < out_w; ++x) {
        const float top = img.at(c, y0, x0[x]) * (1 - wx[x]) + img.at(c, y0, x1[x]) * wx[x];
        const float bot = img.at(c, y1, x0[x]) * (1 - wx[x]) + img.at(c, y1, x1[x]) * wx[x];
        out.at(c, y, x) = std::clamp(top * (1 - wy) + bot * wy, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace twopc
