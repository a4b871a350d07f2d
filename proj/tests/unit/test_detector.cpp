#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "twopc/detector.hpp"

using namespace twopc;
using twopc::testing::central_difference;
using twopc::testing::gradient_probes;
using twopc::testing::rel_error;

namespace {

const Detector& detector() {
  static const Detector det{DetectorConfig{}};
  return det;
}

}  // namespace

TEST_CASE("parameter layout is partitioned into backbone, rpn and roi_head") {
  const auto segs = detector().layout().segments();
  REQUIRE(segs.size() == 3);
  CHECK(segs[0].name == "backbone");
  CHECK(segs[1].name == "rpn");
  CHECK(segs[2].name == "roi_head");
  CHECK(segs[0].offset == 0);
  CHECK(segs[2].offset + segs[2].size == detector().layout().total());
  CHECK(detector().init_params(1).all_finite());
}

TEST_CASE("rpn_propose respects the cap, bounds and determinism") {
  const auto& det = detector();
  const auto params = det.init_params(3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto img = testing::synthetic_sample(seed).image;
    const auto p = det.rpn_propose(params, img);
    CHECK(p.size() <= static_cast<std::size_t>(det.config().proposal_cap));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Box& b = p.boxes[i];
      CHECK(b.valid());
      CHECK(b.x1 >= 0);
      CHECK(b.y1 >= 0);
      CHECK(b.x2 <= img.width);
      CHECK(b.y2 <= img.height);
      CHECK(std::isfinite(p.objectness[i]));
      if (i > 0) CHECK(p.objectness[i - 1] >= p.objectness[i]);
    }
    const auto again = det.rpn_propose(params, img);
    CHECK(again.boxes == p.boxes);
    CHECK(again.objectness == p.objectness);
  }
}

TEST_CASE("rpn_propose regression snapshot for untrained params") {
  const auto& det = detector();
  const auto p = det.rpn_propose(det.init_params(0), testing::synthetic_sample(0).image);
  double area = 0;
  for (const auto& b : p.boxes) area += b.area();
  // recorded once at seed 0; guards accidental changes to init, normalization or anchors
  CHECK(p.size() == 100);
  CHECK(rel_error(p.objectness.front(), 0.56365190048262126) < 1e-9);
  CHECK(rel_error(p.boxes[0].x1, 106.2878211152435) < 1e-9);
  CHECK(rel_error(p.boxes[0].y1, 46.103800915873279) < 1e-9);
  CHECK(rel_error(p.boxes[0].x2, 112.44742595717145) < 1e-9);
  CHECK(rel_error(p.boxes[0].y2, 56.484704162903725) < 1e-9);
  CHECK(rel_error(area, 77349.112479404008) < 1e-9);
}

TEST_CASE("roi_predict is index-aligned, normalized and pure") {
  const auto& det = detector();
  const auto params = det.init_params(4);
  const auto img = testing::synthetic_sample(9).image;
  auto props = det.rpn_propose(params, img);
  props.boxes.resize(std::min<std::size_t>(props.size(), 17));
  props.objectness.resize(props.boxes.size());
  const auto out = det.roi_predict(params, img, props);
  REQUIRE(out.size() == props.size());
  for (const auto& d : out) {
    REQUIRE(d.distribution.size() == static_cast<std::size_t>(det.config().num_classes + 1));
    double s = 0;
    for (double v : d.distribution) {
      CHECK(v >= 0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  const auto student_copy = params;
  CHECK(det.roi_predict(student_copy, img, props) == out);
}

TEST_CASE("roi_predict rejects empty or out-of-bounds proposals") {
  const auto& det = detector();
  const auto params = det.init_params(4);
  const auto img = testing::synthetic_sample(1).image;
  CHECK_THROWS_AS(det.roi_predict(params, img, ProposalSet{}), EmptyInputError);
  ProposalSet bad;
  bad.boxes = {{-10, 0, 20, 20}};
  bad.objectness = {1.0};
  CHECK_THROWS_AS(det.roi_predict(params, img, bad), ContractViolation);
}

TEST_CASE("non-finite activations name the offending segment") {
  const auto& det = detector();
  auto params = det.init_params(4);
  const auto img = testing::synthetic_sample(1).image;
  auto poisoned = params;
  poisoned.values[det.layout().tensor("rpn.objectness.bias").offset] = std::numeric_limits<double>::quiet_NaN();
  try {
    det.rpn_propose(poisoned, img);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("rpn") != std::string::npos);
  }
  poisoned = params;
  poisoned.values[det.layout().tensor("backbone.conv0.bias").offset] = std::numeric_limits<double>::infinity();
  try {
    det.rpn_propose(poisoned, img);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("backbone") != std::string::npos);
  }
}

TEST_CASE("supervised loss on an image without boxes has only background terms") {
  const auto& det = detector();
  const auto params = det.init_params(2);
  LabeledImage empty;
  empty.image = testing::synthetic_sample(3).image;
  const auto l = det.supervised_loss(params, empty, 7);
  CHECK(l.loss.rpn_objectness > 0);
  CHECK(l.loss.roi_classification > 0);
  CHECK(l.loss.rpn_box == 0.0);
  CHECK(l.loss.roi_box == 0.0);
  CHECK(std::isfinite(l.loss.total()));
}

TEST_CASE("supervised loss is deterministic and nonnegative") {
  const auto& det = detector();
  const auto params = det.init_params(2);
  const auto sample = testing::synthetic_sample(5);
  const auto a = det.supervised_loss(params, sample, 11);
  const auto b = det.supervised_loss(params, sample, 11);
  CHECK(a.loss.total() == b.loss.total());
  CHECK(a.gradient == b.gradient);
  CHECK(a.loss.rpn_objectness >= 0);
  CHECK(a.loss.rpn_box >= 0);
  CHECK(a.loss.roi_classification >= 0);
  CHECK(a.loss.roi_box >= 0);
}

TEST_CASE("doubling the box-regression weights doubles the regression components") {
  DetectorConfig c;
  const Detector base(c);
  c.rpn_box_weight = 2.0;
  c.roi_box_weight = 2.0;
  const Detector doubled(c);
  const auto params = base.init_params(8);
  const auto sample = testing::synthetic_sample(8);
  const auto a = base.supervised_loss(params, sample, 3);
  const auto b = doubled.supervised_loss(params, sample, 3);
  REQUIRE(a.loss.rpn_box > 0);
  REQUIRE(a.loss.roi_box > 0);
  CHECK(b.loss.rpn_box == doctest::Approx(2 * a.loss.rpn_box).epsilon(1e-12));
  CHECK(b.loss.roi_box == doctest::Approx(2 * a.loss.roi_box).epsilon(1e-12));
  CHECK(b.loss.rpn_objectness == a.loss.rpn_objectness);
  CHECK(b.loss.roi_classification == a.loss.roi_classification);
}

TEST_CASE("supervised loss gradient matches central differences") {
  const auto& det = detector();
  const auto params = det.init_params(6);
  const auto sample = testing::synthetic_sample(6);
  const auto proposals = det.rpn_propose(params, sample.image);
  auto loss = [&](const DetectorParams& p) { return det.supervised_loss(p, sample, proposals, 5).loss.total(); };
  const auto grad = det.supervised_loss(params, sample, proposals, 5).gradient;
  const auto probes = gradient_probes(det, grad, 12, 99);
  REQUIRE(probes.size() >= 10);
  int passed = 0;
  for (std::size_t i : probes) {
    const double fd = central_difference(loss, params, i, 1e-5);
    CAPTURE(i);
    CAPTURE(fd);
    CAPTURE(grad[i]);
    passed += rel_error(fd, grad[i]) < 1e-3;
  }
  CHECK(passed == static_cast<int>(probes.size()));
}

TEST_CASE("box coder round trip") {
  const Box ref{10, 20, 50, 44};
  const Box target{12.5, 18, 61, 47};
  const std::array<double, 4> w{10, 10, 5, 5};
  const auto d = encode_box(ref, target, w);
  const Box back = decode_box(ref, d, w);
  CHECK(back.x1 == doctest::Approx(target.x1));
  CHECK(back.y1 == doctest::Approx(target.y1));
  CHECK(back.x2 == doctest::Approx(target.x2));
  CHECK(back.y2 == doctest::Approx(target.y2));
}

TEST_CASE("anchor labelling follows the IoU thresholds") {
  const auto& det = detector();
  const std::vector<Box> anchors{{0, 0, 16, 16}, {0, 0, 15, 16}, {40, 40, 56, 56}, {4, 0, 20, 16}};
  const std::vector<Box> targets{{0, 0, 16, 16}};
  const auto l = det.label_anchors(anchors, targets);
  CHECK(l.labels[0] == 1);
  CHECK(l.labels[1] == 1);   // IoU 0.9375
  CHECK(l.labels[2] == 0);   // disjoint
  CHECK(l.labels[3] == -1);  // IoU 0.6: between thresholds
  CHECK(l.matched[0] == 0);
}
