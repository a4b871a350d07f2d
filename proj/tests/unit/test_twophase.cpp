#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "twopc/twophase.hpp"

using namespace twopc;
using twopc::testing::central_difference;
using twopc::testing::gradient_probes;
using twopc::testing::rel_error;

namespace {

const Detector& detector() {
  static const Detector det{DetectorConfig{}};
  return det;
}

std::vector<Box> random_boxes(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Box> out;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0, w - 12), y = rng.uniform(0, h - 12);
    out.push_back({x, y, std::min<double>(w, x + rng.uniform(4, 60)), std::min<double>(h, y + rng.uniform(4, 60))});
  }
  return out;
}

ProposalSet proposals_of(std::vector<Box> boxes, Frame frame = {}) {
  ProposalSet p;
  p.objectness.assign(boxes.size(), 0.5);
  p.boxes = std::move(boxes);
  p.frame = std::move(frame);
  return p;
}

PseudoLabelSet pseudo_of(const std::vector<Box>& boxes, Frame frame = {}) {
  PseudoLabelSet ps;
  ps.frame = std::move(frame);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    ps.labels.push_back({boxes[i], static_cast<int>(i % 4), {0.05, 0.05, 0.85, 0.03, 0.02}, 0.85});
  }
  return ps;
}

// Independent scalar reference: mean_n max(t_n) * sum_c t_nc ln(t_nc / max(s_nc, eps)).
double reference_consistency(const std::vector<std::vector<double>>& t, const std::vector<std::vector<double>>& s) {
  double total = 0;
  for (std::size_t n = 0; n < t.size(); ++n) {
    double kl = 0, a = 0;
    for (std::size_t c = 0; c < t[n].size(); ++c) {
      a = std::max(a, t[n][c]);
      if (t[n][c] > 0) kl += t[n][c] * std::log(t[n][c] / std::max(s[n][c], 1e-8));
    }
    total += a * kl;
  }
  return total / static_cast<double>(t.size());
}

}  // namespace

TEST_CASE("merge of 100 proposals and 5 pseudo-boxes has 105 entries, pseudo-boxes last") {
  const auto rpn = proposals_of(random_boxes(100, 128, 128, 1));
  const auto pboxes = random_boxes(5, 128, 128, 2);
  const auto merged = merge_proposals(rpn, pseudo_of(pboxes));
  REQUIRE(merged.size() == 105);
  for (int i = 0; i < 100; ++i) CHECK(merged.boxes[i] == rpn.boxes[i]);
  for (int i = 0; i < 5; ++i) {
    CHECK(merged.boxes[100 + i] == pboxes[i]);
    CHECK(merged.objectness[100 + i] == 0.85);
  }
  CHECK(merged.frame == rpn.frame);
}

TEST_CASE("merge with an empty pseudo set is the identity") {
  const auto rpn = proposals_of(random_boxes(37, 128, 128, 3));
  const auto merged = merge_proposals(rpn, PseudoLabelSet{});
  CHECK(merged.boxes == rpn.boxes);
  CHECK(merged.objectness == rpn.objectness);
}

TEST_CASE("merge rejects a frame mismatch") {
  const auto rpn = proposals_of(random_boxes(3, 128, 128, 4), Frame{"7", 0.5});
  CHECK_THROWS_AS(merge_proposals(rpn, pseudo_of(random_boxes(1, 128, 128, 5), Frame{"8", 0.5})), ContractViolation);
  CHECK_THROWS_AS(merge_proposals(rpn, pseudo_of(random_boxes(1, 128, 128, 5), Frame{"7", 1.0})), ContractViolation);
  CHECK_NOTHROW(merge_proposals(rpn, pseudo_of(random_boxes(1, 128, 128, 5), Frame{"7", 0.5})));
}

TEST_CASE("every pseudo-box of a real teacher appears verbatim in the merged set") {
  const auto& det = detector();
  const auto params = det.init_params(21);
  const auto img = testing::synthetic_sample(21, Domain::kNight).image;
  const auto pseudo = generate_pseudo_labels(det, params, img, FilterConfig{0.2, 0.5});
  const auto merged = merge_proposals(det.rpn_propose(params, img), pseudo);
  for (const auto& l : pseudo.labels) {
    CHECK(std::find(merged.boxes.begin(), merged.boxes.end(), l.box) != merged.boxes.end());
  }
}

TEST_CASE("matched predictions with identical params and views are equal") {
  const auto& det = detector();
  const auto params = det.init_params(5);
  const auto img = testing::synthetic_sample(5).image;
  const auto merged = proposals_of(random_boxes(105, img.height, img.width, 6));
  const auto m = matched_predict(det, params, params, img, img, merged, Frame{});
  REQUIRE(m.has_value());
  CHECK(m->student.size() == 105);
  CHECK(m->teacher.size() == 105);
  CHECK(m->student == m->teacher);
  CHECK(std::abs(consistency_loss(*m).loss) < 1e-9);
}

TEST_CASE("teacher predictions do not depend on student params") {
  const auto& det = detector();
  const auto teacher = det.init_params(7);
  const auto img = testing::synthetic_sample(7).image;
  const auto merged = proposals_of(random_boxes(20, img.height, img.width, 8));
  const auto a = matched_predict(det, det.init_params(8), teacher, img, img, merged, Frame{});
  const auto b = matched_predict(det, det.init_params(9), teacher, img, img, merged, Frame{});
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(a->teacher == b->teacher);
  CHECK_FALSE(a->student == b->student);
}

TEST_CASE("matched entries come from the same proposal (sentinel)") {
  const auto& det = detector();
  const auto student = det.init_params(11);
  const auto teacher = det.init_params(12);
  const auto img = testing::synthetic_sample(11).image;
  auto boxes = random_boxes(30, img.height, img.width, 13);
  const Box sentinel{3.25, 70.5, 17.75, 121.0};
  boxes[17] = sentinel;
  const auto m = matched_predict(det, student, teacher, img, img, proposals_of(boxes), Frame{});
  REQUIRE(m.has_value());
  const auto lone = proposals_of({sentinel});
  const auto s = det.roi_predict(student, img, lone);
  const auto t = det.roi_predict(teacher, img, lone);
  CHECK(m->proposals.boxes[17] == sentinel);
  CHECK(m->student[17].distribution == s[0].distribution);
  CHECK(m->teacher[17].distribution == t[0].distribution);
}

TEST_CASE("teacher proposals are mapped into the full-scale teacher frame") {
  const auto& det = detector();
  const auto params = det.init_params(14);
  const auto full = testing::synthetic_sample(14).image;
  const auto half = resize_bilinear(full, 64, 64);
  const auto merged = proposals_of({{4, 4, 20, 30}, {10, 12, 40, 60}}, Frame{"1", 0.5});
  const auto m = matched_predict(det, params, params, half, full, merged, Frame{"1", 1.0});
  REQUIRE(m.has_value());
  CHECK(m->teacher_proposals.frame == Frame{"1", 1.0});
  CHECK(m->teacher_proposals.boxes[0] == Box{8, 8, 40, 60});
  CHECK(m->teacher_proposals.boxes[1] == Box{20, 24, 80, 120});
}

TEST_CASE("empty merged set signals skip") {
  const auto& det = detector();
  const auto params = det.init_params(1);
  const auto img = testing::synthetic_sample(1).image;
  CHECK_FALSE(matched_predict(det, params, params, img, img, ProposalSet{}, Frame{}).has_value());
}

TEST_CASE("hand-computed weighted KL example") {
  const auto c = consistency_loss({{0.8, 0.2}}, {{0.6, 0.4}});
  // frozen from an independent scalar evaluation of 0.8 * (0.8 ln(0.8/0.6) + 0.2 ln(0.2/0.4))
  CHECK(std::abs(c.loss - 0.07321297747954862) < 1e-5);
  CHECK(c.alphas == std::vector<double>{0.8});
}

TEST_CASE("alpha is the teacher maximum") {
  const auto c = consistency_loss({{0.1, 0.7, 0.2}}, {{0.3, 0.3, 0.4}});
  CHECK(c.alphas[0] == 0.7);
}

TEST_CASE("consistency loss matches the scalar reference on random distributions (property)") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + rng.uniform_int(20), k = 2 + rng.uniform_int(6);
    std::vector<std::vector<double>> t(n, std::vector<double>(k)), s(n, std::vector<double>(k));
    for (int i = 0; i < n; ++i) {
      double st = 0, ss = 0;
      for (int c = 0; c < k; ++c) {
        st += t[i][c] = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
        ss += s[i][c] = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
      }
      t[i][0] += 1e-3, st += 1e-3, s[i][0] += 1e-3, ss += 1e-3;
      for (int c = 0; c < k; ++c) t[i][c] /= st, s[i][c] /= ss;
    }
    const auto c = consistency_loss(t, s);
    REQUIRE(c.loss >= 0);
    REQUIRE(std::abs(c.loss - reference_consistency(t, s)) < 1e-9 * std::max(1.0, c.loss));
    for (double a : c.alphas) REQUIRE((a >= 0 && a <= 1));
    REQUIRE(std::abs(consistency_loss(t, t).loss) < 1e-9);
  }
}

TEST_CASE("a zero student probability is clamped, not an error") {
  const auto c = consistency_loss({{0.5, 0.5}}, {{1.0, 0.0}});
  CHECK(std::isfinite(c.loss));
  CHECK(c.loss == doctest::Approx(0.5 * (0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-8))));
}

TEST_CASE("logit gradient of the consistency loss matches central differences") {
  Rng rng(41);
  const int n = 6, k = 5;
  std::vector<std::vector<double>> t(n), logits(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> tl(k);
    for (int c = 0; c < k; ++c) tl[c] = rng.normal(0, 2), logits[i].push_back(rng.normal(0, 2));
    t[i] = softmax(tl);
  }
  auto loss_at = [&](const std::vector<std::vector<double>>& lg) {
    std::vector<std::vector<double>> s;
    for (const auto& row : lg) s.push_back(softmax(row));
    return consistency_loss(t, s);
  };
  const auto base = loss_at(logits);
  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) {
      auto up = logits, down = logits;
      up[i][c] += h;
      down[i][c] -= h;
      const double fd = (loss_at(up).loss - loss_at(down).loss) / (2 * h);
      CHECK(rel_error(base.grad_logits[i * k + c], fd, 1e-6) < 1e-3);
    }
  }
}

TEST_CASE("consistency parameter gradient matches central differences") {
  const auto& det = detector();
  const auto teacher = det.init_params(51);
  auto student = teacher;
  Rng rng(52);
  for (double& v : student.values) v += rng.normal(0, 0.02);
  const auto img = testing::synthetic_sample(51).image;
  const auto merged = proposals_of(random_boxes(24, img.height, img.width, 53));
  auto loss = [&](const DetectorParams& p) {
    return consistency_loss(*matched_predict(det, p, teacher, img, img, merged, Frame{})).loss;
  };
  const auto m = matched_predict(det, student, teacher, img, img, merged, Frame{});
  const auto grad = consistency_gradient(det, student, *m, consistency_loss(*m));
  const auto probes = gradient_probes(det, grad, 12, 54);
  REQUIRE(probes.size() >= 10);
  for (const auto i : probes) {
    const double fd = central_difference(loss, student, i, 1e-5);
    CHECK_MESSAGE(rel_error(grad[i], fd) < 1e-3, "param " << i << " analytic " << grad[i] << " fd " << fd);
  }
}

TEST_CASE("unsupervised loss: skip on empty pseudo set, nonnegative otherwise") {
  const auto& det = detector();
  const auto student = det.init_params(61);
  const auto teacher = det.init_params(62);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto img = testing::synthetic_sample(60 + seed, Domain::kNight).image;
    const auto rpn = det.rpn_propose(student, img);
    const auto pseudo = pseudo_of(random_boxes(3, img.height, img.width, seed));
    const auto m = matched_predict(det, student, teacher, img, img, merge_proposals(rpn, pseudo), Frame{});
    REQUIRE(m.has_value());
    CHECK_FALSE(unsupervised_loss(det, student, *m, PseudoLabelSet{}, seed).has_value());
    const auto u = unsupervised_loss(det, student, *m, pseudo, seed);
    REQUIRE(u.has_value());
    CHECK(u->rpn_objectness >= 0);
    CHECK(u->consistency >= 0);
    CHECK(u->hard_classification == 0);
    CHECK(u->total() >= 0);
    CHECK(u->gradient.size() == student.size());
  }
}

TEST_CASE("student equal to teacher leaves only the objectness term") {
  const auto& det = detector();
  const auto params = det.init_params(71);
  const auto img = testing::synthetic_sample(71, Domain::kNight).image;
  const auto pseudo = pseudo_of(random_boxes(4, img.height, img.width, 72));
  const auto m = matched_predict(det, params, params, img, img, merge_proposals(det.rpn_propose(params, img), pseudo),
                                 Frame{});
  const auto u = unsupervised_loss(det, params, *m, pseudo, 3);
  REQUIRE(u.has_value());
  CHECK(u->consistency < 1e-6);
  CHECK(u->rpn_objectness > 0);
}

TEST_CASE("unsupervised parameter gradient matches central differences") {
  const auto& det = detector();
  const auto teacher = det.init_params(81);
  auto student = teacher;
  Rng rng(82);
  for (double& v : student.values) v += rng.normal(0, 0.02);
  const auto img = testing::synthetic_sample(81, Domain::kNight).image;
  const auto pseudo = pseudo_of(random_boxes(3, img.height, img.width, 83));
  const auto merged = proposals_of(random_boxes(20, img.height, img.width, 84));
  auto loss = [&](const DetectorParams& p) {
    return unsupervised_loss(det, p, *matched_predict(det, p, teacher, img, img, merged, Frame{}), pseudo, 5)->total();
  };
  const auto u = unsupervised_loss(det, student, *matched_predict(det, student, teacher, img, img, merged, Frame{}),
                                   pseudo, 5);
  const auto probes = gradient_probes(det, u->gradient, 12, 85);
  REQUIRE(probes.size() >= 10);
  for (const auto i : probes) {
    const double fd = central_difference(loss, student, i, 1e-5);
    CHECK_MESSAGE(rel_error(u->gradient[i], fd) < 1e-3, "param " << i);
  }
}

TEST_CASE("hard-label baseline skips on empty pseudo set and has no box terms") {
  const auto& det = detector();
  const auto params = det.init_params(91);
  const auto img = testing::synthetic_sample(91, Domain::kNight).image;
  const auto fwd = det.forward_features(params, img);
  const auto rpn = det.propose(fwd, Frame{});
  CHECK_FALSE(hard_label_unsupervised_loss(det, params, fwd, rpn, PseudoLabelSet{}, 1).has_value());
  const auto u = hard_label_unsupervised_loss(det, params, fwd, rpn, pseudo_of(random_boxes(3, 128, 128, 92)), 1);
  REQUIRE(u.has_value());
  CHECK(u->consistency == 0);
  CHECK(u->hard_classification > 0);
  CHECK(u->rpn_objectness > 0);
}
