#include "twopc/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "twopc/common.hpp"

namespace twopc {

AreaBounds AreaBounds::scaled_to(double image_area) {
  const double r = image_area / (600.0 * 600.0);
  return {32.0 * 32.0 * r, 96.0 * 96.0 * r};
}

nlohmann::json to_json_record(const EvalResult& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, ap] : r.per_class_ap) per_class[std::to_string(c)] = ap;
  auto counts = [](const StratumCounts& s) {
    return nlohmann::json{{"ground_truth", s.ground_truth}, {"detections", s.detections}};
  };
  return {{"per_class_ap", per_class},
          {"excluded_classes", r.excluded_classes},
          {"mean_ap", r.mean_ap},
          {"ap_large", r.ap_large},
          {"ap_medium", r.ap_medium},
          {"ap_small", r.ap_small},
          {"counts", {{"small", counts(r.small)}, {"medium", counts(r.medium)}, {"large", counts(r.large)},
                      {"total", counts(r.total)}}}};
}

double average_precision(const std::vector<double>& scores, const std::vector<bool>& is_tp, std::size_t num_gt) {
  if (scores.size() != is_tp.size()) throw ContractViolation("average_precision: scores and flags differ in length");
  if (num_gt == 0) return 0.0;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += is_tp[order[k]];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

namespace {

enum Stratum { kAll = -1, kSmall = 0, kMedium = 1, kLarge = 2 };

int stratum_of(double area, const AreaBounds& b) {
  if (area < b.small_max) return kSmall;
  if (area < b.medium_max) return kMedium;
  return kLarge;
}

struct ClassEval {
  std::vector<double> scores;
  std::vector<bool> tp;
  std::size_t num_gt = 0;
};

struct Candidate {
  double score;
  std::size_t image;
  std::size_t index;
};

ClassEval evaluate_class(const std::vector<DetectionSet>& dets, const std::vector<BoxSet>& gts, int cls,
                         double iou_thresh, const AreaBounds& bounds, int stratum) {
  ClassEval out;
  std::vector<std::vector<std::size_t>> gt_idx(gts.size());
  std::vector<std::vector<bool>> ignored(gts.size()), used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (std::size_t g = 0; g < gts[i].size(); ++g) {
      if (gts[i][g].class_id != cls) continue;
      const bool ign = stratum != kAll && stratum_of(gts[i][g].box.area(), bounds) != stratum;
      gt_idx[i].push_back(g);
      ignored[i].push_back(ign);
      used[i].push_back(false);
      out.num_gt += !ign;
    }
  }
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t d = 0; d < dets[i].size(); ++d) {
      if (dets[i][d].class_id != cls) continue;
      if (!dets[i][d].score) throw ContractViolation("evaluate: detection without a score");
      cands.push_back({*dets[i][d].score, i, d});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  for (const auto& c : cands) {
    const Box& box = dets[c.image][c.index].box;
    // best unmatched counted GT first, then best unmatched ignored GT
    int best = -1, best_ignored = -1;
    double best_iou = iou_thresh, best_ignored_iou = iou_thresh;
    for (std::size_t k = 0; k < gt_idx[c.image].size(); ++k) {
      if (used[c.image][k]) continue;
      const double v = iou(box, gts[c.image][gt_idx[c.image][k]].box);
      if (!ignored[c.image][k] && v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(k);
        best_iou = v;
      } else if (ignored[c.image][k] && v >= best_ignored_iou && (best_ignored < 0 || v > best_ignored_iou)) {
        best_ignored = static_cast<int>(k);
        best_ignored_iou = v;
      }
    }
    if (best >= 0) {
      used[c.image][best] = true;
      out.scores.push_back(c.score);
      out.tp.push_back(true);
    } else if (best_ignored >= 0) {
      used[c.image][best_ignored] = true;
    } else if (stratum == kAll || stratum_of(box.area(), bounds) == stratum) {
      out.scores.push_back(c.score);
      out.tp.push_back(false);
    }
  }
  return out;
}

}  // namespace

EvalResult evaluate(const std::vector<DetectionSet>& detections, const std::vector<BoxSet>& ground_truth,
                    double iou_thresh, const AreaBounds& bounds) {
  if (detections.size() != ground_truth.size()) throw ContractViolation("evaluate: one detection set per image required");
  EvalResult r;
  std::set<int> gt_classes, det_classes;
  for (const auto& img : ground_truth) {
    for (const auto& g : img) {
      if (!g.class_id) throw ContractViolation("evaluate: ground-truth box without a class id");
      gt_classes.insert(*g.class_id);
      ++r.total.ground_truth;
      StratumCounts* s[] = {&r.small, &r.medium, &r.large};
      ++s[stratum_of(g.box.area(), bounds)]->ground_truth;
    }
  }
  for (const auto& img : detections) {
    for (const auto& d : img) {
      if (!d.class_id) throw ContractViolation("evaluate: detection without a class id");
      det_classes.insert(*d.class_id);
      ++r.total.detections;
      StratumCounts* s[] = {&r.small, &r.medium, &r.large};
      ++s[stratum_of(d.box.area(), bounds)]->detections;
    }
  }
  for (int c : det_classes) {
    if (!gt_classes.count(c)) r.excluded_classes.push_back(c);
  }
  double sum = 0.0;
  for (int c : gt_classes) {
    const auto e = evaluate_class(detections, ground_truth, c, iou_thresh, bounds, kAll);
    r.per_class_ap[c] = average_precision(e.scores, e.tp, e.num_gt);
    sum += r.per_class_ap[c];
  }
  r.mean_ap = gt_classes.empty() ? 0.0 : sum / static_cast<double>(gt_classes.size());

  double* strata_ap[] = {&r.ap_small, &r.ap_medium, &r.ap_large};
  for (int s = kSmall; s <= kLarge; ++s) {
    double acc = 0.0;
    int n = 0;
    for (int c : gt_classes) {
      const auto e = evaluate_class(detections, ground_truth, c, iou_thresh, bounds, s);
      if (e.num_gt == 0) continue;
      acc += average_precision(e.scores, e.tp, e.num_gt);
      ++n;
    }
    *strata_ap[s] = n > 0 ? acc / n : 0.0;
  }
  return r;
}

EvalResult evaluate_coco(const std::vector<DetectionSet>& detections, const std::vector<BoxSet>& ground_truth,
                         const AreaBounds& bounds) {
  EvalResult acc;
  constexpr int kSteps = 10;
  for (int i = 0; i < kSteps; ++i) {
    const auto r = evaluate(detections, ground_truth, 0.5 + 0.05 * i, bounds);
    if (i == 0) {
      acc = r;
      acc.mean_ap = acc.ap_small = acc.ap_medium = acc.ap_large = 0.0;
      for (auto& [c, ap] : acc.per_class_ap) ap = 0.0;
    }
    acc.mean_ap += r.mean_ap / kSteps;
    acc.ap_small += r.ap_small / kSteps;
    acc.ap_medium += r.ap_medium / kSteps;
    acc.ap_large += r.ap_large / kSteps;
    for (const auto& [c, ap] : r.per_class_ap) acc.per_class_ap[c] += ap / kSteps;
  }
  return acc;
}

}  // namespace twopc
