#include "twopc/twophase.hpp"

#include <algorithm>
#include <cmath>

#include "twopc/scaling.hpp"

namespace twopc {

ProposalSet merge_proposals(const ProposalSet& student_rpn, const PseudoLabelSet& pseudo) {
  if (!(student_rpn.frame == pseudo.frame)) {
    throw ContractViolation("merge_proposals: proposals are in frame (" + student_rpn.frame.image_id + ", " +
                            std::to_string(student_rpn.frame.scale) + ") but pseudo-labels in (" +
                            pseudo.frame.image_id + ", " + std::to_string(pseudo.frame.scale) + ")");
  }
  ProposalSet out = student_rpn;
  out.boxes.reserve(student_rpn.size() + pseudo.size());
  out.objectness.reserve(student_rpn.size() + pseudo.size());
  for (const auto& l : pseudo.labels) {
    out.boxes.push_back(l.box);
    out.objectness.push_back(l.score.value_or(1.0));
  }
  return out;
}

std::optional<MatchedPredictions> matched_predict(const Detector& detector, const DetectorParams& student,
                                                  const DetectorParams& teacher, FeatureForward student_fwd,
                                                  const FeatureForward& teacher_fwd, const ProposalSet& merged,
                                                  const Frame& teacher_frame) {
  if (merged.empty()) return std::nullopt;
  MatchedPredictions m;
  m.proposals = merged;
  m.teacher_proposals.frame = teacher_frame;
  m.teacher_proposals.objectness = merged.objectness;
  m.teacher_proposals.boxes = map_boxes(merged.boxes, merged.frame, teacher_frame);
  for (Box& b : m.teacher_proposals.boxes) {
    // scaled dims are rounded, so a box touching the student border can overhang by a fraction of a pixel
    b = b.clipped(teacher_fwd.image_width, teacher_fwd.image_height);
  }
  const auto teacher_roi = detector.forward_roi(teacher, teacher_fwd, m.teacher_proposals.boxes);
  m.teacher = detector.predictions(teacher_fwd, teacher_roi);
  m.student_roi = detector.forward_roi(student, student_fwd, merged.boxes);
  m.student = detector.predictions(student_fwd, m.student_roi);
  m.student_features = std::move(student_fwd);
  return m;
}

std::optional<MatchedPredictions> matched_predict(const Detector& detector, const DetectorParams& student,
                                                  const DetectorParams& teacher, const ImageTensor& image_student,
                                                  const ImageTensor& image_teacher, const ProposalSet& merged,
                                                  const Frame& teacher_frame) {
  if (merged.empty()) return std::nullopt;
  return matched_predict(detector, student, teacher, detector.forward_features(student, image_student),
                         detector.forward_features(teacher, image_teacher), merged, teacher_frame);
}

ConsistencyLoss consistency_loss(const std::vector<std::vector<double>>& teacher,
                                 const std::vector<std::vector<double>>& student) {
  if (teacher.size() != student.size()) throw ContractViolation("consistency_loss: teacher and student differ in length");
  ConsistencyLoss out;
  const std::size_t n = teacher.size();
  if (n == 0) return out;
  const std::size_t k1 = teacher.front().size();
  out.alphas.resize(n);
  out.grad_logits.assign(n * k1, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = teacher[i];
    const auto& s = student[i];
    if (t.size() != k1 || s.size() != k1) throw ContractViolation("consistency_loss: distribution sizes differ");
    const double alpha = *std::max_element(t.begin(), t.end());
    out.alphas[i] = alpha;
    double kl = 0.0;
    double live_mass = 0.0;  // teacher mass on classes where the student is not clamped
    for (std::size_t c = 0; c < k1; ++c) {
      if (t[c] > 0) kl += t[c] * (std::log(t[c]) - std::log(std::max(s[c], kProbabilityEpsilon)));
      if (s[c] > kProbabilityEpsilon) live_mass += t[c];
    }
    out.loss += alpha * kl * inv_n;
    const double w = alpha * inv_n;
    for (std::size_t c = 0; c < k1; ++c) {
      const double direct = s[c] > kProbabilityEpsilon ? t[c] : 0.0;
      out.grad_logits[i * k1 + c] = w * (s[c] * live_mass - direct);
    }
  }
  return out;
}

ConsistencyLoss consistency_loss(const MatchedPredictions& m) {
  if (m.student.size() != m.teacher.size() || m.student.size() != m.proposals.size()) {
    throw ContractViolation("consistency_loss: predictions are not index-aligned with the proposals");
  }
  std::vector<std::vector<double>> t, s;
  t.reserve(m.size());
  s.reserve(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    t.push_back(m.teacher[i].distribution);
    s.push_back(m.student[i].distribution);
  }
  return consistency_loss(t, s);
}

std::vector<double> consistency_gradient(const Detector& detector, const DetectorParams& student,
                                         const MatchedPredictions& m, const ConsistencyLoss& cons) {
  std::vector<double> gradient(student.size(), 0.0);
  std::vector<double> g_features(m.student_features.features().size(), 0.0);
  detector.backward_roi(student, m.student_features, m.student_roi, cons.grad_logits, {}, gradient, g_features);
  detector.backward_backbone(student, m.student_features, g_features, gradient);
  return gradient;
}

std::optional<UnsupervisedLoss> unsupervised_loss(const Detector& detector, const DetectorParams& student,
                                                  const MatchedPredictions& m, const PseudoLabelSet& pseudo,
                                                  std::uint64_t seed) {
  if (pseudo.empty()) return std::nullopt;
  if (!(pseudo.frame == m.proposals.frame)) throw ContractViolation("unsupervised_loss: pseudo-labels in a different frame");
  const auto& fwd = m.student_features;
  UnsupervisedLoss out;
  out.gradient.assign(student.size(), 0.0);

  const auto cons = consistency_loss(m);
  out.consistency = cons.loss;
  out.alphas = cons.alphas;
  std::vector<double> g_features(fwd.features().size(), 0.0);
  detector.backward_roi(student, fwd, m.student_roi, cons.grad_logits, {}, out.gradient, g_features);

  Rng rng(seed);
  const auto anchors = detector.anchors(fwd.image_height, fwd.image_width);
  const auto targets = pseudo.boxes();
  auto labels = detector.label_anchors(anchors, targets);
  detector.sample_anchors(labels, rng);
  std::vector<double> g_obj(fwd.objectness.size(), 0.0);
  out.rpn_objectness = detector.objectness_loss(fwd, labels, g_obj);
  detector.backward_rpn(student, fwd, g_obj, {}, out.gradient, g_features);
  detector.backward_backbone(student, fwd, g_features, out.gradient);
  if (!std::isfinite(out.total())) throw NumericError("unsupervised loss is not finite");
  return out;
}

std::optional<UnsupervisedLoss> hard_label_unsupervised_loss(const Detector& detector, const DetectorParams& student,
                                                             const FeatureForward& student_fwd,
                                                             const ProposalSet& student_rpn,
                                                             const PseudoLabelSet& pseudo, std::uint64_t seed) {
  if (pseudo.empty()) return std::nullopt;
  if (!(pseudo.frame == student_rpn.frame)) throw ContractViolation("hard-label loss: pseudo-labels in a different frame");
  LabeledImage target;
  target.image_id = pseudo.source_image_id;
  target.boxes = pseudo.labels;
  target.classes = pseudo.classes();
  auto sup = detector.classification_loss(student, student_fwd, target, student_rpn, seed);
  UnsupervisedLoss out;
  out.rpn_objectness = sup.loss.rpn_objectness;
  out.hard_classification = sup.loss.roi_classification;
  out.gradient = std::move(sup.gradient);
  return out;
}

}  // namespace twopc
