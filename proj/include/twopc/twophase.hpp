#ifndef TWOPC_TWOPHASE_HPP
#define TWOPC_TWOPHASE_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "twopc/detector.hpp"
#include "twopc/pseudolabel.hpp"

namespace twopc {

inline constexpr double kProbabilityEpsilon = 1e-8;

/// Student RPN proposals followed by the pseudo-boxes, verbatim. Pseudo
/// entries carry their pseudo-label score as objectness.
ProposalSet merge_proposals(const ProposalSet& student_rpn, const PseudoLabelSet& pseudo);

/// Student and teacher RoI predictions on the same merged proposals. Entry n of
/// `student` and `teacher` both come from proposal n. `proposals` is in the
/// student frame, `teacher_proposals` is the same list mapped to the teacher frame.
struct MatchedPredictions {
  ProposalSet proposals;
  ProposalSet teacher_proposals;
  DetectionSet student;
  DetectionSet teacher;

  // Student activations kept for the backward pass.
  FeatureForward student_features;
  RoiForward student_roi;

  std::size_t size() const { return proposals.size(); }
};

/// Returns nullopt (skip this batch) when `merged` is empty. `image_teacher`
/// is at full scale and `teacher_frame` names its frame; proposals are mapped
/// into it. The teacher pass is forward-only.
std::optional<MatchedPredictions> matched_predict(const Detector& detector, const DetectorParams& student,
                                                  const DetectorParams& teacher, const ImageTensor& image_student,
                                                  const ImageTensor& image_teacher, const ProposalSet& merged,
                                                  const Frame& teacher_frame);

/// Same, reusing forward passes already computed on the two views.
std::optional<MatchedPredictions> matched_predict(const Detector& detector, const DetectorParams& student,
                                                  const DetectorParams& teacher, FeatureForward student_fwd,
                                                  const FeatureForward& teacher_fwd, const ProposalSet& merged,
                                                  const Frame& teacher_frame);

struct ConsistencyLoss {
  double loss = 0.0;
  std::vector<double> alphas;        // per entry, max of the teacher distribution
  std::vector<double> grad_logits;   // d loss / d student logits, N x (K + 1)
};

/// mean_n alpha_n * KL(teacher_n || student_n), student probabilities clamped
/// at kProbabilityEpsilon before the log. Teacher distributions are constants.
ConsistencyLoss consistency_loss(const std::vector<std::vector<double>>& teacher,
                                 const std::vector<std::vector<double>>& student);
ConsistencyLoss consistency_loss(const MatchedPredictions& m);

/// Parameter gradient of the consistency loss (student side only).
std::vector<double> consistency_gradient(const Detector& detector, const DetectorParams& student,
                                         const MatchedPredictions& m, const ConsistencyLoss& cons);

struct UnsupervisedLoss {
  double rpn_objectness = 0.0;
  double consistency = 0.0;
  double hard_classification = 0.0;  // hard-label baseline only
  std::vector<double> alphas;
  std::vector<double> gradient;  // w.r.t. student parameters

  double total() const { return rpn_objectness + consistency + hard_classification; }
};

/// L_rpn_obj (anchors labelled against the pseudo-boxes) + L_cons. nullopt when
/// there are no pseudo-labels. `pseudo` must be in the frame of `m.proposals`.
std::optional<UnsupervisedLoss> unsupervised_loss(const Detector& detector, const DetectorParams& student,
                                                  const MatchedPredictions& m, const PseudoLabelSet& pseudo,
                                                  std::uint64_t seed);

/// Hard-label baseline: pseudo-labels act as ground truth for RPN objectness
/// and RoI cross-entropy, no box regression. nullopt when there are no pseudo-labels.
std::optional<UnsupervisedLoss> hard_label_unsupervised_loss(const Detector& detector, const DetectorParams& student,
                                                             const FeatureForward& student_fwd,
                                                             const ProposalSet& student_rpn,
                                                             const PseudoLabelSet& pseudo, std::uint64_t seed);

}  // namespace twopc

#endif  // TWOPC_TWOPHASE_HPP
