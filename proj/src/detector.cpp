#include "twopc/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twopc/common.hpp"

namespace twopc {

namespace {

constexpr double kRpnSmoothL1Beta = 1.0 / 9.0;
constexpr double kRoiSmoothL1Beta = 1.0;
const std::array<double, 4> kRpnCoderWeights{1, 1, 1, 1};
const double kMaxLogScale = std::log(1000.0 / 16.0);

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Binary cross-entropy with logits.
double bce_with_logits(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

double smooth_l1_grad(double d, double beta) {
  if (std::abs(d) < beta) return d / beta;
  return d > 0 ? 1.0 : -1.0;
}

void relu_inplace(std::vector<double>& v) {
  for (double& x : v) x = x > 0 ? x : 0.0;
}

void relu_backward(std::span<double> grad, std::span<const double> activation) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (activation[i] <= 0) grad[i] = 0.0;
  }
}

void require_finite(std::span<const double> v, const char* segment) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite activation in parameter segment '") + segment + "'");
  }
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

int DetectorConfig::feature_stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void DetectorConfig::validate() const {
  if (num_classes < 1) throw ConfigError("detector.num_classes must be >= 1");
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
    throw ConfigError("detector.backbone_channels and backbone_strides must be non-empty and of equal length");
  }
  for (int c : backbone_channels) {
    if (c <= 0) throw ConfigError("detector.backbone_channels must be positive");
  }
  for (int s : backbone_strides) {
    if (s != 1 && s != 2) throw ConfigError("detector.backbone_strides must be 1 or 2");
  }
  if (anchor_sizes.empty() || anchor_ratios.empty()) throw ConfigError("detector anchors must be non-empty");
  if (proposal_cap <= 0 || rpn_pre_nms_topk <= 0) throw ConfigError("detector proposal counts must be positive");
  if (!(rpn_nms_iou > 0 && rpn_nms_iou < 1)) throw ConfigError("detector.rpn_nms_iou must be in (0, 1)");
  if (!(rpn_bg_iou <= rpn_fg_iou)) throw ConfigError("detector.rpn_bg_iou must not exceed rpn_fg_iou");
  if (roi_pool <= 0 || roi_sampling <= 0 || roi_hidden <= 0) throw ConfigError("detector RoI sizes must be positive");
  if (rpn_box_weight < 0 || roi_box_weight < 0) throw ConfigError("detector loss weights must be >= 0");
  if (pixel_std <= 0) throw ConfigError("detector.pixel_std must be positive");
  if (pixel_std_floor <= 0) throw ConfigError("detector.pixel_std_floor must be positive");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes},
                     {"backbone_channels", c.backbone_channels},
                     {"backbone_strides", c.backbone_strides},
                     {"rpn_channels", c.rpn_channels},
                     {"anchor_sizes", c.anchor_sizes},
                     {"anchor_ratios", c.anchor_ratios},
                     {"rpn_pre_nms_topk", c.rpn_pre_nms_topk},
                     {"rpn_nms_iou", c.rpn_nms_iou},
                     {"proposal_cap", c.proposal_cap},
                     {"rpn_min_box_size", c.rpn_min_box_size},
                     {"rpn_batch_per_image", c.rpn_batch_per_image},
                     {"rpn_positive_fraction", c.rpn_positive_fraction},
                     {"rpn_fg_iou", c.rpn_fg_iou},
                     {"rpn_bg_iou", c.rpn_bg_iou},
                     {"roi_pool", c.roi_pool},
                     {"roi_sampling", c.roi_sampling},
                     {"roi_hidden", c.roi_hidden},
                     {"roi_batch_per_image", c.roi_batch_per_image},
                     {"roi_positive_fraction", c.roi_positive_fraction},
                     {"roi_fg_iou", c.roi_fg_iou},
                     {"roi_box_coder_weights", c.roi_box_coder_weights},
                     {"rpn_box_weight", c.rpn_box_weight},
                     {"roi_box_weight", c.roi_box_weight},
                     {"per_image_normalization", c.per_image_normalization},
                     {"pixel_mean", c.pixel_mean},
                     {"pixel_std", c.pixel_std},
                     {"pixel_std_floor", c.pixel_std_floor}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  const DetectorConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.backbone_strides = j.value("backbone_strides", d.backbone_strides);
  c.rpn_channels = j.value("rpn_channels", d.rpn_channels);
  c.anchor_sizes = j.value("anchor_sizes", d.anchor_sizes);
  c.anchor_ratios = j.value("anchor_ratios", d.anchor_ratios);
  c.rpn_pre_nms_topk = j.value("rpn_pre_nms_topk", d.rpn_pre_nms_topk);
  c.rpn_nms_iou = j.value("rpn_nms_iou", d.rpn_nms_iou);
  c.proposal_cap = j.value("proposal_cap", d.proposal_cap);
  c.rpn_min_box_size = j.value("rpn_min_box_size", d.rpn_min_box_size);
  c.rpn_batch_per_image = j.value("rpn_batch_per_image", d.rpn_batch_per_image);
  c.rpn_positive_fraction = j.value("rpn_positive_fraction", d.rpn_positive_fraction);
  c.rpn_fg_iou = j.value("rpn_fg_iou", d.rpn_fg_iou);
  c.rpn_bg_iou = j.value("rpn_bg_iou", d.rpn_bg_iou);
  c.roi_pool = j.value("roi_pool", d.roi_pool);
  c.roi_sampling = j.value("roi_sampling", d.roi_sampling);
  c.roi_hidden = j.value("roi_hidden", d.roi_hidden);
  c.roi_batch_per_image = j.value("roi_batch_per_image", d.roi_batch_per_image);
  c.roi_positive_fraction = j.value("roi_positive_fraction", d.roi_positive_fraction);
  c.roi_fg_iou = j.value("roi_fg_iou", d.roi_fg_iou);
  c.roi_box_coder_weights = j.value("roi_box_coder_weights", d.roi_box_coder_weights);
  c.rpn_box_weight = j.value("rpn_box_weight", d.rpn_box_weight);
  c.roi_box_weight = j.value("roi_box_weight", d.roi_box_weight);
  c.pixel_mean = j.value("pixel_mean", d.pixel_mean);
  c.pixel_std = j.value("pixel_std", d.pixel_std);
  c.per_image_normalization = j.value("per_image_normalization", d.per_image_normalization);
  c.pixel_std_floor = j.value("pixel_std_floor", d.pixel_std_floor);
}

// ---------------------------------------------------------------------------
// Parameter layout

std::size_t ParamLayout::add(std::string name, std::string segment, std::size_t size) {
  const std::size_t offset = total_;
  tensors_.push_back({std::move(name), std::move(segment), offset, size});
  total_ += size;
  return offset;
}

const ParamTensor& ParamLayout::tensor(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw ContractViolation("unknown parameter tensor: " + std::string(name));
}

std::vector<ParamSegment> ParamLayout::segments() const {
  std::vector<ParamSegment> out;
  for (const auto& t : tensors_) {
    if (out.empty() || out.back().name != t.segment) {
      out.push_back({t.segment, t.offset, 0});
    }
    out.back().size += t.size;
  }
  return out;
}

bool DetectorParams::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Box coding

std::array<double, 4> encode_box(const Box& reference, const Box& target, const std::array<double, 4>& w) {
  const double rw = reference.width(), rh = reference.height();
  const double rx = reference.x1 + 0.5 * rw, ry = reference.y1 + 0.5 * rh;
  const double tw = target.width(), th = target.height();
  const double tx = target.x1 + 0.5 * tw, ty = target.y1 + 0.5 * th;
  return {w[0] * (tx - rx) / rw, w[1] * (ty - ry) / rh, w[2] * std::log(tw / rw), w[3] * std::log(th / rh)};
}

Box decode_box(const Box& reference, std::span<const double> d, const std::array<double, 4>& w) {
  const double rw = reference.width(), rh = reference.height();
  const double rx = reference.x1 + 0.5 * rw, ry = reference.y1 + 0.5 * rh;
  const double dw = std::min(d[2] / w[2], kMaxLogScale);
  const double dh = std::min(d[3] / w[3], kMaxLogScale);
  const double cx = rx + d[0] / w[0] * rw;
  const double cy = ry + d[1] / w[1] * rh;
  const double bw = rw * std::exp(dw), bh = rh * std::exp(dh);
  return {cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

// ---------------------------------------------------------------------------
// Detector

Detector::Detector(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  int in_c = kImageChannels;
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    const int out_c = config_.backbone_channels[i];
    layout_.add("backbone.conv" + std::to_string(i) + ".weight", "backbone", static_cast<std::size_t>(out_c) * in_c * 9);
    layout_.add("backbone.conv" + std::to_string(i) + ".bias", "backbone", out_c);
    in_c = out_c;
  }
  const int a = config_.anchors_per_location();
  const int r = config_.rpn_channels;
  layout_.add("rpn.conv.weight", "rpn", static_cast<std::size_t>(r) * in_c * 9);
  layout_.add("rpn.conv.bias", "rpn", r);
  layout_.add("rpn.objectness.weight", "rpn", static_cast<std::size_t>(a) * r);
  layout_.add("rpn.objectness.bias", "rpn", a);
  layout_.add("rpn.deltas.weight", "rpn", static_cast<std::size_t>(4 * a) * r);
  layout_.add("rpn.deltas.bias", "rpn", 4 * a);
  roi_input_size_ = static_cast<std::size_t>(in_c) * config_.roi_pool * config_.roi_pool;
  const int h = config_.roi_hidden;
  const int k = config_.num_classes;
  layout_.add("roi.fc.weight", "roi_head", roi_input_size_ * h);
  layout_.add("roi.fc.bias", "roi_head", h);
  layout_.add("roi.cls.weight", "roi_head", static_cast<std::size_t>(k + 1) * h);
  layout_.add("roi.cls.bias", "roi_head", k + 1);
  layout_.add("roi.box.weight", "roi_head", static_cast<std::size_t>(4 * k) * h);
  layout_.add("roi.box.bias", "roi_head", 4 * k);
}

std::span<const double> Detector::view(const DetectorParams& p, std::string_view name) const {
  const auto& t = layout_.tensor(name);
  return std::span<const double>(p.values).subspan(t.offset, t.size);
}

std::span<double> Detector::view(std::span<double> g, std::string_view name) const {
  const auto& t = layout_.tensor(name);
  return g.subspan(t.offset, t.size);
}

DetectorParams Detector::init_params(std::uint64_t seed) const {
  DetectorParams p;
  p.values.assign(layout_.total(), 0.0);
  Rng rng(derive_seed("detector.init", seed));
  for (const auto& t : layout_.tensors()) {
    if (t.name.ends_with(".bias")) continue;
    double std_dev = 0.01;
    if (t.name.starts_with("backbone") || t.name == "rpn.conv.weight" || t.name == "roi.fc.weight") {
      // He initialization: fan_in = size / out_channels
      const auto& bias = layout_.tensor(t.name.substr(0, t.name.size() - 7) + ".bias");
      const double fan_in = static_cast<double>(t.size) / static_cast<double>(bias.size);
      std_dev = std::sqrt(2.0 / fan_in);
    } else if (t.name == "roi.box.weight") {
      std_dev = 0.001;
    }
    for (std::size_t i = 0; i < t.size; ++i) p.values[t.offset + i] = rng.normal(0.0, std_dev);
  }
  return p;
}

std::vector<Box> Detector::anchors(int image_height, int image_width) const {
  int fh = image_height, fw = image_width;
  for (int s : config_.backbone_strides) {
    fh = (fh + 2 - 3) / s + 1;
    fw = (fw + 2 - 3) / s + 1;
  }
  const double stride = config_.feature_stride();
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(config_.anchors_per_location()) * fh * fw);
  for (double size : config_.anchor_sizes) {
    for (double ratio : config_.anchor_ratios) {
      const double w = size / std::sqrt(ratio);
      const double h = size * std::sqrt(ratio);
      for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
          const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
          out.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return out;
}

FeatureForward Detector::forward_features(const DetectorParams& params, const ImageTensor& image) const {
  if (params.size() != layout_.total()) throw ContractViolation("parameter vector does not match the detector layout");
  FeatureForward f;
  f.image_height = image.height;
  f.image_width = image.width;
  double mean = config_.pixel_mean, stddev = config_.pixel_std;
  if (config_.per_image_normalization) {
    double sum = 0, sq = 0;
    for (float v : image.pixels) sum += v, sq += static_cast<double>(v) * v;
    const auto n = static_cast<double>(image.pixels.size());
    mean = sum / n;
    stddev = std::max(std::sqrt(std::max(sq / n - mean * mean, 0.0)), config_.pixel_std_floor);
  }
  std::vector<double> input(image.pixels.size());
  for (std::size_t i = 0; i < input.size(); ++i) input[i] = (image.pixels[i] - mean) / stddev;
  f.backbone.push_back(std::move(input));
  int c = kImageChannels, h = image.height, w = image.width;
  for (std::size_t i = 0; i < config_.backbone_channels.size(); ++i) {
    kernels::ConvGeometry g{c, h, w, config_.backbone_channels[i], 3, config_.backbone_strides[i], 1};
    std::vector<double> out(g.output_size());
    const std::string prefix = "backbone.conv" + std::to_string(i);
    kernels::conv2d_forward(g, f.backbone.back(), view(params, prefix + ".weight"), view(params, prefix + ".bias"), out);
    relu_inplace(out);
    f.backbone_geometry.push_back(g);
    f.backbone.push_back(std::move(out));
    c = g.out_channels;
    h = g.out_height();
    w = g.out_width();
  }
  require_finite(f.features(), "backbone");

  f.rpn_geometry = {c, h, w, config_.rpn_channels, 3, 1, 1};
  f.rpn_hidden.resize(f.rpn_geometry.output_size());
  kernels::conv2d_forward(f.rpn_geometry, f.features(), view(params, "rpn.conv.weight"), view(params, "rpn.conv.bias"),
                          f.rpn_hidden);
  relu_inplace(f.rpn_hidden);
  const int a = config_.anchors_per_location();
  kernels::ConvGeometry obj{config_.rpn_channels, h, w, a, 1, 1, 0};
  kernels::ConvGeometry del{config_.rpn_channels, h, w, 4 * a, 1, 1, 0};
  f.objectness.resize(obj.output_size());
  f.deltas.resize(del.output_size());
  kernels::conv2d_forward(obj, f.rpn_hidden, view(params, "rpn.objectness.weight"), view(params, "rpn.objectness.bias"),
                          f.objectness);
  kernels::conv2d_forward(del, f.rpn_hidden, view(params, "rpn.deltas.weight"), view(params, "rpn.deltas.bias"),
                          f.deltas);
  require_finite(f.objectness, "rpn");
  require_finite(f.deltas, "rpn");
  return f;
}

ProposalSet Detector::propose(const FeatureForward& fwd, const Frame& frame) const {
  const auto all = anchors(fwd.image_height, fwd.image_width);
  const std::size_t hw = static_cast<std::size_t>(fwd.feature_height()) * fwd.feature_width();
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t topk = std::min<std::size_t>(config_.rpn_pre_nms_topk, order.size());
  std::partial_sort(order.begin(), order.begin() + topk, order.end(), [&](std::size_t a, std::size_t b) {
    return fwd.objectness[a] > fwd.objectness[b] || (fwd.objectness[a] == fwd.objectness[b] && a < b);
  });
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t k = 0; k < topk; ++k) {
    const std::size_t i = order[k];
    const std::size_t a = i / hw, cell = i % hw;
    const double d[4] = {fwd.deltas[(4 * a + 0) * hw + cell], fwd.deltas[(4 * a + 1) * hw + cell],
                         fwd.deltas[(4 * a + 2) * hw + cell], fwd.deltas[(4 * a + 3) * hw + cell]};
    const Box b = decode_box(all[i], d, kRpnCoderWeights).clipped(fwd.image_width, fwd.image_height);
    if (b.width() < config_.rpn_min_box_size || b.height() < config_.rpn_min_box_size) continue;
    boxes.push_back(b);
    scores.push_back(fwd.objectness[i]);
  }
  const auto keep = nms(boxes, scores, config_.rpn_nms_iou);
  ProposalSet out;
  out.frame = frame;
  for (std::size_t k = 0; k < keep.size() && static_cast<int>(k) < config_.proposal_cap; ++k) {
    out.boxes.push_back(boxes[keep[k]]);
    out.objectness.push_back(sigmoid(scores[keep[k]]));
  }
  return out;
}

ProposalSet Detector::rpn_propose(const DetectorParams& params, const ImageTensor& image) const {
  return propose(forward_features(params, image), Frame{});
}

kernels::RoiAlignGeometry Detector::roi_geometry(const FeatureForward& fwd) const {
  return {fwd.feature_channels(), fwd.feature_height(), fwd.feature_width(), config_.roi_pool, config_.roi_sampling,
          1.0 / config_.feature_stride()};
}

RoiForward Detector::forward_roi(const DetectorParams& params, const FeatureForward& fwd,
                                 std::span<const Box> rois) const {
  RoiForward r;
  r.rois.assign(rois.begin(), rois.end());
  const int n = static_cast<int>(rois.size());
  const int k = config_.num_classes;
  const int h = config_.roi_hidden;
  const auto g = roi_geometry(fwd);
  r.pooled.resize(static_cast<std::size_t>(n) * roi_input_size_);
  kernels::roi_align_forward(g, fwd.features(), rois, r.pooled);
  r.hidden.resize(static_cast<std::size_t>(n) * h);
  kernels::linear_forward({n, static_cast<int>(roi_input_size_), h}, r.pooled, view(params, "roi.fc.weight"),
                          view(params, "roi.fc.bias"), r.hidden);
  relu_inplace(r.hidden);
  r.logits.resize(static_cast<std::size_t>(n) * (k + 1));
  r.deltas.resize(static_cast<std::size_t>(n) * 4 * k);
  kernels::linear_forward({n, h, k + 1}, r.hidden, view(params, "roi.cls.weight"), view(params, "roi.cls.bias"),
                          r.logits);
  kernels::linear_forward({n, h, 4 * k}, r.hidden, view(params, "roi.box.weight"), view(params, "roi.box.bias"),
                          r.deltas);
  require_finite(r.logits, "roi_head");
  require_finite(r.deltas, "roi_head");
  return r;
}

DetectionSet Detector::predictions(const FeatureForward& fwd, const RoiForward& roi) const {
  const int k = config_.num_classes;
  DetectionSet out;
  out.reserve(roi.size());
  for (std::size_t n = 0; n < roi.size(); ++n) {
    LabeledBox d;
    d.distribution = softmax(std::span<const double>(roi.logits).subspan(n * (k + 1), k + 1));
    const int cls = static_cast<int>(std::max_element(d.distribution.begin(), d.distribution.begin() + k) -
                                     d.distribution.begin());
    d.class_id = cls;
    d.score = d.distribution[cls];
    Box b = decode_box(roi.rois[n], std::span<const double>(roi.deltas).subspan(n * 4 * k + 4 * cls, 4),
                       config_.roi_box_coder_weights)
                .clipped(fwd.image_width, fwd.image_height);
    d.box = b.valid() ? b : roi.rois[n];
    out.push_back(std::move(d));
  }
  return out;
}

DetectionSet Detector::roi_predict(const DetectorParams& params, const ImageTensor& image,
                                   const ProposalSet& proposals) const {
  if (proposals.empty()) throw EmptyInputError("roi_predict: empty proposal list");
  constexpr double kTol = 1e-6;
  for (const Box& b : proposals.boxes) {
    if (!b.valid() || b.x1 < -kTol || b.y1 < -kTol || b.x2 > image.width + kTol || b.y2 > image.height + kTol) {
      throw ContractViolation("roi_predict: proposal outside image bounds");
    }
  }
  const auto fwd = forward_features(params, image);
  return predictions(fwd, forward_roi(params, fwd, proposals.boxes));
}

DetectionSet Detector::detect(const DetectorParams& params, const ImageTensor& image, double score_threshold,
                              double nms_iou, int max_detections) const {
  const auto fwd = forward_features(params, image);
  const auto proposals = propose(fwd, Frame{});
  if (proposals.empty()) return {};
  const auto roi = forward_roi(params, fwd, proposals.boxes);
  const int k = config_.num_classes;
  DetectionSet all;
  for (int c = 0; c < k; ++c) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<std::vector<double>> dists;
    for (std::size_t n = 0; n < roi.size(); ++n) {
      auto dist = softmax(std::span<const double>(roi.logits).subspan(n * (k + 1), k + 1));
      if (dist[c] < score_threshold) continue;
      const Box b = decode_box(roi.rois[n], std::span<const double>(roi.deltas).subspan(n * 4 * k + 4 * c, 4),
                               config_.roi_box_coder_weights)
                        .clipped(image.width, image.height);
      if (!b.valid()) continue;
      boxes.push_back(b);
      scores.push_back(dist[c]);
      dists.push_back(std::move(dist));
    }
    for (std::size_t i : nms(boxes, scores, nms_iou)) {
      all.push_back({boxes[i], c, dists[i], scores[i]});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const LabeledBox& a, const LabeledBox& b) { return *a.score > *b.score; });
  if (static_cast<int>(all.size()) > max_detections) all.resize(max_detections);
  return all;
}

// ---------------------------------------------------------------------------
// Targets and losses

AnchorLabels Detector::label_anchors(std::span<const Box> anchors, std::span<const Box> targets) const {
  AnchorLabels out;
  out.labels.assign(anchors.size(), 0);
  out.matched.assign(anchors.size(), -1);
  if (targets.empty()) return out;
  std::vector<double> best(anchors.size(), 0.0);
  std::vector<double> best_for_target(targets.size(), 0.0);
  std::vector<double> ious(anchors.size() * targets.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double v = iou(anchors[i], targets[t]);
      ious[i * targets.size() + t] = v;
      if (out.matched[i] < 0 || v > best[i]) {
        best[i] = v;
        out.matched[i] = static_cast<int>(t);
      }
      best_for_target[t] = std::max(best_for_target[t], v);
    }
  }
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double v = best[i];
    if (v >= config_.rpn_fg_iou) {
      out.labels[i] = 1;
    } else if (v < config_.rpn_bg_iou) {
      out.labels[i] = 0;
    } else {
      out.labels[i] = -1;
    }
  }
  // Low-quality matches: every target keeps its best anchor(s) as foreground.
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (best_for_target[t] <= 0.0) continue;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      if (ious[i * targets.size() + t] == best_for_target[t]) {
        out.labels[i] = 1;
        out.matched[i] = static_cast<int>(t);
      }
    }
  }
  return out;
}

void Detector::sample_anchors(AnchorLabels& labels, Rng& rng) const {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (labels.labels[i] == 1) pos.push_back(i);
    if (labels.labels[i] == 0) neg.push_back(i);
  }
  shuffle(pos, rng);
  shuffle(neg, rng);
  const auto max_pos = static_cast<std::size_t>(config_.rpn_batch_per_image * config_.rpn_positive_fraction);
  const std::size_t n_pos = std::min(pos.size(), max_pos);
  const std::size_t n_neg = std::min(neg.size(), static_cast<std::size_t>(config_.rpn_batch_per_image) - n_pos);
  for (std::size_t k = n_pos; k < pos.size(); ++k) labels.labels[pos[k]] = -1;
  for (std::size_t k = n_neg; k < neg.size(); ++k) labels.labels[neg[k]] = -1;
}

double Detector::objectness_loss(const FeatureForward& fwd, const AnchorLabels& labels,
                                 std::span<double> grad_objectness) const {
  std::size_t count = 0;
  for (int l : labels.labels) count += l >= 0;
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    if (labels.labels[i] < 0) continue;
    const double z = fwd.objectness[i];
    const double y = labels.labels[i];
    loss += bce_with_logits(z, y) * inv;
    grad_objectness[i] += (sigmoid(z) - y) * inv;
  }
  return loss;
}

SupervisedLoss Detector::supervised_loss(const DetectorParams& params, const LabeledImage& sample,
                                         std::uint64_t seed) const {
  const auto fwd = forward_features(params, sample.image);
  const auto proposals = propose(fwd, Frame{sample.image_id, 1.0});
  return supervised_from(params, fwd, sample, proposals, seed, true);
}

SupervisedLoss Detector::supervised_loss(const DetectorParams& params, const LabeledImage& sample,
                                         const ProposalSet& proposals, std::uint64_t seed) const {
  return supervised_from(params, forward_features(params, sample.image), sample, proposals, seed, true);
}

SupervisedLoss Detector::classification_loss(const DetectorParams& params, const FeatureForward& fwd,
                                             const LabeledImage& sample, const ProposalSet& proposals,
                                             std::uint64_t seed) const {
  return supervised_from(params, fwd, sample, proposals, seed, false);
}

SupervisedLoss Detector::supervised_from(const DetectorParams& params, const FeatureForward& fwd,
                                         const LabeledImage& sample, const ProposalSet& proposals,
                                         std::uint64_t seed, bool box_terms) const {
  if (sample.classes.size() != sample.boxes.size()) throw DataError("sample classes and boxes differ in length");
  Rng rng(seed);
  SupervisedLoss out;
  out.gradient.assign(layout_.total(), 0.0);
  const auto gt = sample.box_list();
  const int k = config_.num_classes;
  const std::size_t hw = static_cast<std::size_t>(fwd.feature_height()) * fwd.feature_width();

  // RPN: objectness over sampled anchors, box regression over sampled positives.
  const auto all_anchors = anchors(fwd.image_height, fwd.image_width);
  auto labels = label_anchors(all_anchors, gt);
  sample_anchors(labels, rng);
  std::vector<double> g_obj(fwd.objectness.size(), 0.0);
  std::vector<double> g_rpn_deltas(fwd.deltas.size(), 0.0);
  out.loss.rpn_objectness = objectness_loss(fwd, labels, g_obj);
  std::size_t sampled = 0;
  for (int l : labels.labels) sampled += l >= 0;
  if (box_terms && sampled > 0 && config_.rpn_box_weight > 0) {
    const double scale = config_.rpn_box_weight / static_cast<double>(sampled);
    for (std::size_t i = 0; i < labels.labels.size(); ++i) {
      if (labels.labels[i] != 1) continue;
      const auto target = encode_box(all_anchors[i], gt[labels.matched[i]], kRpnCoderWeights);
      const std::size_t a = i / hw, cell = i % hw;
      for (int j = 0; j < 4; ++j) {
        const std::size_t idx = (4 * a + j) * hw + cell;
        const double d = fwd.deltas[idx] - target[j];
        out.loss.rpn_box += scale * smooth_l1(d, kRpnSmoothL1Beta);
        g_rpn_deltas[idx] += scale * smooth_l1_grad(d, kRpnSmoothL1Beta);
      }
    }
  }

  // RoI head: proposals plus ground truth, fg/bg sampled.
  std::vector<Box> candidates = proposals.boxes;
  candidates.insert(candidates.end(), gt.begin(), gt.end());
  std::vector<std::size_t> fg, bg;
  std::vector<int> match(candidates.size(), -1);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    for (std::size_t t = 0; t < gt.size(); ++t) {
      const double v = iou(candidates[i], gt[t]);
      if (v > best) {
        best = v;
        match[i] = static_cast<int>(t);
      }
    }
    (best >= config_.roi_fg_iou ? fg : bg).push_back(i);
  }
  shuffle(fg, rng);
  shuffle(bg, rng);
  const auto max_fg = static_cast<std::size_t>(config_.roi_batch_per_image * config_.roi_positive_fraction);
  fg.resize(std::min(fg.size(), max_fg));
  bg.resize(std::min(bg.size(), static_cast<std::size_t>(config_.roi_batch_per_image) - fg.size()));

  std::vector<Box> rois;
  std::vector<int> roi_class;
  std::vector<int> roi_match;
  for (std::size_t i : fg) {
    rois.push_back(candidates[i]);
    roi_class.push_back(sample.classes[match[i]]);
    roi_match.push_back(match[i]);
  }
  for (std::size_t i : bg) {
    rois.push_back(candidates[i]);
    roi_class.push_back(config_.background_index());
    roi_match.push_back(-1);
  }

  std::vector<double> g_features(fwd.features().size(), 0.0);
  if (!rois.empty()) {
    const auto roi = forward_roi(params, fwd, rois);
    const double inv = 1.0 / static_cast<double>(rois.size());
    std::vector<double> g_logits(roi.logits.size(), 0.0);
    std::vector<double> g_deltas(roi.deltas.size(), 0.0);
    for (std::size_t n = 0; n < rois.size(); ++n) {
      const auto row = std::span<const double>(roi.logits).subspan(n * (k + 1), k + 1);
      const auto p = softmax(row);
      const int y = roi_class[n];
      out.loss.roi_classification -= std::log(std::max(p[y], 1e-300)) * inv;
      for (int c = 0; c <= k; ++c) g_logits[n * (k + 1) + c] = (p[c] - (c == y ? 1.0 : 0.0)) * inv;
      if (!box_terms || y == config_.background_index() || config_.roi_box_weight == 0) continue;
      const auto target = encode_box(rois[n], gt[roi_match[n]], config_.roi_box_coder_weights);
      for (int j = 0; j < 4; ++j) {
        const std::size_t idx = n * 4 * k + 4 * y + j;
        const double d = roi.deltas[idx] - target[j];
        out.loss.roi_box += config_.roi_box_weight * inv * smooth_l1(d, kRoiSmoothL1Beta);
        g_deltas[idx] = config_.roi_box_weight * inv * smooth_l1_grad(d, kRoiSmoothL1Beta);
      }
    }
    backward_roi(params, fwd, roi, g_logits, g_deltas, out.gradient, g_features);
  }
  backward_rpn(params, fwd, g_obj, g_rpn_deltas, out.gradient, g_features);
  backward_backbone(params, fwd, g_features, out.gradient);
  if (!std::isfinite(out.loss.total())) throw NumericError("supervised loss is not finite");
  return out;
}

// ---------------------------------------------------------------------------
// Backward passes

void Detector::backward_roi(const DetectorParams& params, const FeatureForward& fwd, const RoiForward& roi,
                            std::span<const double> grad_logits, std::span<const double> grad_deltas,
                            std::span<double> gradient, std::span<double> grad_features) const {
  const int n = static_cast<int>(roi.size());
  if (n == 0) return;
  const int k = config_.num_classes;
  const int h = config_.roi_hidden;
  std::vector<double> g_hidden(static_cast<std::size_t>(n) * h, 0.0);
  std::vector<double> tmp(g_hidden.size());
  kernels::linear_backward({n, h, k + 1}, roi.hidden, view(params, "roi.cls.weight"), grad_logits, g_hidden,
                           view(gradient, "roi.cls.weight"), view(gradient, "roi.cls.bias"));
  if (!grad_deltas.empty()) {
    kernels::linear_backward({n, h, 4 * k}, roi.hidden, view(params, "roi.box.weight"), grad_deltas, tmp,
                             view(gradient, "roi.box.weight"), view(gradient, "roi.box.bias"));
    for (std::size_t i = 0; i < g_hidden.size(); ++i) g_hidden[i] += tmp[i];
  }
  relu_backward(g_hidden, roi.hidden);
  std::vector<double> g_pooled(roi.pooled.size());
  kernels::linear_backward({n, static_cast<int>(roi_input_size_), h}, roi.pooled, view(params, "roi.fc.weight"),
                           g_hidden, g_pooled, view(gradient, "roi.fc.weight"), view(gradient, "roi.fc.bias"));
  kernels::roi_align_backward(roi_geometry(fwd), roi.rois, g_pooled, grad_features);
}

void Detector::backward_rpn(const DetectorParams& params, const FeatureForward& fwd,
                            std::span<const double> grad_objectness, std::span<const double> grad_deltas,
                            std::span<double> gradient, std::span<double> grad_features) const {
  const int a = config_.anchors_per_location();
  const int fh = fwd.feature_height(), fw = fwd.feature_width();
  std::vector<double> g_hidden(fwd.rpn_hidden.size(), 0.0);
  std::vector<double> tmp(fwd.rpn_hidden.size());
  if (!grad_objectness.empty()) {
    kernels::ConvGeometry obj{config_.rpn_channels, fh, fw, a, 1, 1, 0};
    kernels::conv2d_backward(obj, fwd.rpn_hidden, view(params, "rpn.objectness.weight"), grad_objectness, tmp,
                             view(gradient, "rpn.objectness.weight"), view(gradient, "rpn.objectness.bias"));
    for (std::size_t i = 0; i < tmp.size(); ++i) g_hidden[i] += tmp[i];
  }
  if (!grad_deltas.empty()) {
    kernels::ConvGeometry del{config_.rpn_channels, fh, fw, 4 * a, 1, 1, 0};
    kernels::conv2d_backward(del, fwd.rpn_hidden, view(params, "rpn.deltas.weight"), grad_deltas, tmp,
                             view(gradient, "rpn.deltas.weight"), view(gradient, "rpn.deltas.bias"));
    for (std::size_t i = 0; i < tmp.size(); ++i) g_hidden[i] += tmp[i];
  }
  relu_backward(g_hidden, fwd.rpn_hidden);
  std::vector<double> g_feat(fwd.features().size());
  kernels::conv2d_backward(fwd.rpn_geometry, fwd.features(), view(params, "rpn.conv.weight"), g_hidden, g_feat,
                           view(gradient, "rpn.conv.weight"), view(gradient, "rpn.conv.bias"));
  for (std::size_t i = 0; i < g_feat.size(); ++i) grad_features[i] += g_feat[i];
}

void Detector::backward_backbone(const DetectorParams& params, const FeatureForward& fwd,
                                 std::span<const double> grad_features, std::span<double> gradient) const {
  std::vector<double> g(grad_features.begin(), grad_features.end());
  for (std::size_t i = fwd.backbone_geometry.size(); i-- > 0;) {
    relu_backward(g, fwd.backbone[i + 1]);
    const auto& geom = fwd.backbone_geometry[i];
    const std::string prefix = "backbone.conv" + std::to_string(i);
    std::vector<double> g_in;
    if (i > 0) g_in.resize(geom.input_size());
    kernels::conv2d_backward(geom, fwd.backbone[i], view(params, prefix + ".weight"), g, g_in,
                             view(gradient, prefix + ".weight"), view(gradient, prefix + ".bias"));
    g = std::move(g_in);
  }
}

}  // namespace twopc
