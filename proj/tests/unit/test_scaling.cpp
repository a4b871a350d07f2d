#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "twopc/scaling.hpp"

using namespace twopc;

namespace {

PseudoLabelSet pseudo_of(std::vector<Box> boxes, std::string id = "3") {
  PseudoLabelSet p;
  p.frame = {std::move(id), 1.0};
  for (const auto& b : boxes) p.labels.push_back({b, 0, {0.9, 0.1}, 0.9});
  return p;
}

}  // namespace

TEST_CASE("schedule norm at the default milestones") {
  const ScaleSchedule s;
  CHECK(schedule_norm(0.50, s) == 0.5);
  CHECK(schedule_norm(0.60, s) == 0.6);
  CHECK(schedule_norm(0.95, s) == 1.0);
  CHECK(schedule_norm(0.0, s) == 0.5);
  CHECK(schedule_norm(1.0, s) == 1.0);
  // the step values reached at each milestone; the first two both map to 0.6 since
  // the first scale already covers progress below 0.57
  const std::vector<double> at_milestone{0.6, 0.7, 0.8, 0.9, 1.0, 1.0};
  for (std::size_t i = 0; i < s.milestones.size(); ++i) {
    CHECK(schedule_norm(s.milestones[i], s) == at_milestone[i]);
    CHECK(schedule_norm(std::nextafter(s.milestones[i], 0.0), s) == (i == 0 ? 0.5 : at_milestone[i - 1]));
  }
}

TEST_CASE("schedule norm is a nondecreasing step function over the configured values (property)") {
  const ScaleSchedule s;
  double prev = 0;
  for (int i = 0; i <= 10000; ++i) {
    const double n = schedule_norm(i / 10000.0, s);
    REQUIRE(n >= prev);
    REQUIRE(std::find(s.scales.begin(), s.scales.end(), n) != s.scales.end());
    prev = n;
  }
}

TEST_CASE("sample_scale with sigma 0 returns the norm") {
  Rng rng(1);
  CHECK(sample_scale(0.7, 0.0, 0.4, rng) == 0.7);
  CHECK(sample_scale(1.0, 0.0, 0.4, rng) == 1.0);
}

TEST_CASE("sample_scale Monte Carlo mean and clip") {
  Rng rng(2);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = sample_scale(0.7, 0.05, 0.4, rng);
    REQUIRE((v >= 0.4 && v <= 1.0));
    sum += v;
  }
  CHECK(std::abs(sum / n - 0.7) < 0.005);
  for (int i = 0; i < 10000; ++i) {
    const double v = sample_scale(0.98, 0.3, 0.4, rng);
    REQUIRE((v >= 0.4 && v <= 1.0));
  }
}

TEST_CASE("scale_inputs at 1.0 is the identity") {
  const auto img = testing::random_image(64, 80, 3);
  const auto p = pseudo_of({{0, 0, 40, 40}, {10, 5, 70, 60}});
  const auto [view, out] = scale_inputs(img, p, 1.0, 96);
  CHECK(view.image.pixels == img.pixels);
  CHECK(out.labels == p.labels);
  CHECK(out.frame == Frame{"3", 1.0});
}

TEST_CASE("scale_inputs drops boxes below the area threshold") {
  const auto img = testing::random_image(128, 128, 4);
  const auto [view, out] = scale_inputs(img, pseudo_of({{0, 0, 20, 20}, {0, 0, 100, 100}}), 0.5, 150);
  CHECK(view.image.height == 64);
  CHECK(view.image.width == 64);
  CHECK(view.frame == Frame{"3", 0.5});
  REQUIRE(out.labels.size() == 1);
  CHECK(out.labels[0].box == Box{0, 0, 50, 50});
  CHECK(out.frame == view.frame);
}

TEST_CASE("scale_inputs survivors respect the area threshold (property)") {
  Rng rng(5);
  const auto img = testing::random_image(96, 96, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Box> boxes;
    for (int i = 0; i < 10; ++i) {
      const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
      boxes.push_back({x, y, std::min(96.0, x + rng.uniform(1, 50)), std::min(96.0, y + rng.uniform(1, 50))});
    }
    const double s = rng.uniform(0.4, 1.0), area = rng.uniform(0, 300);
    const auto [view, out] = scale_inputs(img, pseudo_of(boxes), s, area);
    for (const auto& l : out.labels) {
      REQUIRE(l.box.area() >= area);
      REQUIRE(l.box.x2 <= view.image.width);
      REQUIRE(l.box.y2 <= view.image.height);
    }
  }
}

TEST_CASE("scale_inputs rejects nonpositive scales and scaled input frames") {
  const auto img = testing::random_image(32, 32, 6);
  CHECK_THROWS_AS(scale_inputs(img, pseudo_of({}), 0.0, 0), ContractViolation);
  CHECK_THROWS_AS(scale_inputs(img, pseudo_of({}), -0.5, 0), ContractViolation);
  auto p = pseudo_of({});
  p.frame.scale = 0.5;
  CHECK_THROWS_AS(scale_inputs(img, p, 0.5, 0), ContractViolation);
}

TEST_CASE("map_boxes examples") {
  const Frame full{"9", 1.0}, half{"9", 0.5};
  const std::vector<Box> b{{10, 10, 110, 210}};
  CHECK(map_boxes(b, full, half)[0] == Box{5, 5, 55, 105});
  CHECK(map_boxes(b, full, full) == b);
  CHECK_THROWS_AS(map_boxes(b, full, Frame{"10", 0.5}), ContractViolation);
}

TEST_CASE("map_boxes round trip (property)") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const Frame full{"x", 1.0}, scaled{"x", rng.uniform(0.4, 1.0)};
    std::vector<Box> b;
    for (int i = 0; i < 5; ++i) {
      const double x = rng.uniform(0, 500), y = rng.uniform(0, 500);
      b.push_back({x, y, x + rng.uniform(1, 200), y + rng.uniform(1, 200)});
    }
    const auto back = map_boxes(map_boxes(b, full, scaled), scaled, full);
    for (std::size_t i = 0; i < b.size(); ++i) {
      REQUIRE(testing::rel_error(back[i].x1, b[i].x1) < 1e-6);
      REQUIRE(testing::rel_error(back[i].y1, b[i].y1) < 1e-6);
      REQUIRE(testing::rel_error(back[i].x2, b[i].x2) < 1e-6);
      REQUIRE(testing::rel_error(back[i].y2, b[i].y2) < 1e-6);
    }
  }
}

TEST_CASE("schedule validation") {
  ScaleSchedule s;
  CHECK_NOTHROW(s.validate());
  s.scales.back() = 0.95;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.milestones[2] = 0.6;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.scales.pop_back();
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
