#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "twopc/nightaug.hpp"

using namespace twopc;
using twopc::testing::random_image;
using twopc::testing::ScriptedRng;

TEST_CASE("gate draw below 0.5 returns the input bitwise") {
  const auto img = random_image(40, 48, 1);
  for (const auto aug : kNightAugOrder) {
    ScriptedRng rng({0.49}, 0.0);
    const auto out = apply_single(img, aug, NightAugConfig{}, rng);
    CHECK(out.pixels == img.pixels);
    CHECK(rng.calls() == 1);
  }
}

TEST_CASE("gate draw 0.5 gives strength 0.6") {
  const auto img = random_image(32, 32, 2);
  ScriptedRng rng({0.5, 0.0}, 0.0);
  nlohmann::json trace = nlohmann::json::array();
  const auto out = apply_single(img, Augmentation::kBrightness, NightAugConfig{}, rng, &trace);
  REQUIRE(trace.size() == 1);
  CHECK(trace[0]["applied"] == true);
  CHECK(trace[0]["strength"].get<double>() == doctest::Approx(0.6).epsilon(1e-15));
  // strength 0.6 sits halfway along the brightness range, 0.9 -> 0.2
  const double f = trace[0]["params"]["factor"].get<double>();
  CHECK(f == doctest::Approx(0.55).epsilon(1e-12));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(out.pixels[i] == static_cast<float>(img.pixels[i] * f));
}

TEST_CASE("revert loop visits 0.4, 0.5, 0.6 with fresh draws") {
  const auto img = random_image(32, 32, 3);
  // gate, then three continuing draws each followed by four corner draws, then a stop
  std::vector<double> script{0.9};
  for (int pass = 0; pass < 3; ++pass) {
    script.push_back(0.95);
    for (double c : {0.1, 0.6, 0.2, 0.7}) script.push_back(c);
  }
  script.push_back(0.0);
  ScriptedRng rng(script, 0.0);
  nlohmann::json trace = nlohmann::json::array();
  apply_single(img, Augmentation::kGamma, NightAugConfig{}, rng, &trace);
  const auto& reverts = trace[0]["reverts"];
  REQUIRE(reverts.size() == 3);
  CHECK(reverts[0]["prob"].get<double>() == doctest::Approx(0.4));
  CHECK(reverts[1]["prob"].get<double>() == doctest::Approx(0.5));
  CHECK(reverts[2]["prob"].get<double>() == doctest::Approx(0.6));
  CHECK(trace[0]["revert_stop"]["prob"].get<double>() == doctest::Approx(0.7));
  CHECK(reverts[0]["rect"] == nlohmann::json::array({3, 6, 19, 23}));
  CHECK(rng.calls() == static_cast<int>(script.size()));
}

TEST_CASE("pixels inside reverted rectangles equal the stage input (property)") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto img = random_image(24, 30, 100 + seed);
    Rng rng(seed);
    nlohmann::json trace = nlohmann::json::array();
    const auto out = apply_single(img, Augmentation::kBrightness, NightAugConfig{}, rng, &trace);
    if (!trace[0]["applied"].get<bool>()) {
      REQUIRE(out.pixels == img.pixels);
      continue;
    }
    const double f = trace[0]["params"]["factor"].get<double>();
    std::vector<char> reverted(img.height * img.width, 0);
    for (const auto& r : trace[0]["reverts"]) {
      const int x0 = r["rect"][0], y0 = r["rect"][1], x1 = r["rect"][2], y1 = r["rect"][3];
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) reverted[y * img.width + x] = 1;
    }
    for (int c = 0; c < kImageChannels; ++c) {
      for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
          const float expect = reverted[y * img.width + x] ? img.at(c, y, x) : static_cast<float>(img.at(c, y, x) * f);
          REQUIRE(out.at(c, y, x) == expect);
        }
      }
    }
  }
}

TEST_CASE("pipeline with all gates closed is the identity") {
  const auto img = random_image(64, 64, 4);
  ScriptedRng rng({}, 0.3);
  const auto out = nightaug_pipeline(img, NightAugConfig{}, rng);
  CHECK(out.pixels == img.pixels);
  CHECK(out.height == img.height);
  CHECK(rng.calls() == 6);
}

TEST_CASE("pipeline preserves shape and value range over 1000 seeds") {
  const auto img = random_image(20, 28, 5);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto out = nightaug_pipeline(img, NightAugConfig{}, rng);
    REQUIRE(out.height == img.height);
    REQUIRE(out.width == img.width);
    REQUIRE(out.pixels.size() == img.pixels.size());
    for (float v : out.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
}

TEST_CASE("pipeline is deterministic for a given seed") {
  const auto img = testing::synthetic_sample(6).image;
  Rng a(77), b(77);
  CHECK(nightaug_pipeline(img, NightAugConfig{}, a).pixels == nightaug_pipeline(img, NightAugConfig{}, b).pixels);
}

TEST_CASE("pipeline darkens day images on average") {
  double in = 0, out = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto img = testing::synthetic_sample(seed).image;
    Rng rng(derive_seed(seed, 9));
    in += img.mean();
    out += nightaug_pipeline(img, NightAugConfig{}, rng).mean();
  }
  CHECK(out < in);
}

TEST_CASE("recording rng captures every draw in the sidecar") {
  const auto img = random_image(16, 16, 7);
  RecordingRng rng(8);
  nlohmann::json trace = nlohmann::json::array();
  nightaug_pipeline(img, NightAugConfig{}, rng, &trace);
  CHECK(trace.size() == 6);
  CHECK(rng.draws().size() >= 6);
  CHECK(trace[0]["gate_draw"].get<double>() == rng.draws()[0]);
}

TEST_CASE("augmentation names") {
  for (const auto a : kNightAugOrder) CHECK(parse_augmentation(augmentation_name(a)) == a);
  CHECK_THROWS_AS(parse_augmentation("fog"), ConfigError);
}

TEST_CASE("glare falls off as peak * exp(-(d / r)^k)") {
  ImageTensor img(41, 41, 0.0f);
  add_glare(img, {20, 20, 8, 0.6, 2});
  CHECK(img.at(0, 20, 20) == doctest::Approx(0.6 * std::exp(-std::pow(std::hypot(0.5, 0.5) / 8, 2))).epsilon(1e-6));
  CHECK(img.at(1, 20, 28) == doctest::Approx(0.6 * std::exp(-std::pow(std::hypot(8.5, 0.5) / 8, 2))).epsilon(1e-6));
}

TEST_CASE("blur keeps a constant image constant") {
  const ImageTensor img(20, 24, 0.37f);
  const auto out = gaussian_blur(img, 1.7);
  for (float v : out.pixels) CHECK(v == doctest::Approx(0.37f).epsilon(1e-6));
}

TEST_CASE("config validation") {
  NightAugConfig c;
  CHECK_NOTHROW(c.validate());
  c.revert_step = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.apply_threshold = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.glare_spots_max = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config json round trip") {
  NightAugConfig c;
  c.brightness = {0.3, 0.8};
  c.rng_seed = 42;
  const auto back = nlohmann::json(c).get<NightAugConfig>();
  CHECK(back.brightness.lo == 0.3);
  CHECK(back.rng_seed == 42);
}
