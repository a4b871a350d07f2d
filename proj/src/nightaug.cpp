#include "twopc/nightaug.hpp"

#include <algorithm>
#include <cmath>

namespace twopc {

using nlohmann::json;

std::string_view augmentation_name(Augmentation aug) {
  switch (aug) {
    case Augmentation::kBrightness: return "brightness";
    case Augmentation::kContrast: return "contrast";
    case Augmentation::kGamma: return "gamma";
    case Augmentation::kNoise: return "noise";
    case Augmentation::kBlur: return "blur";
    case Augmentation::kGlare: return "glare";
  }
  throw ConfigError("unknown augmentation id " + std::to_string(static_cast<int>(aug)));
}

Augmentation parse_augmentation(std::string_view name) {
  for (Augmentation a : kNightAugOrder) {
    if (augmentation_name(a) == name) return a;
  }
  throw ConfigError("unknown augmentation '" + std::string(name) + "'");
}

void NightAugConfig::validate() const {
  auto unit = [](double v) { return v >= 0 && v <= 1; };
  if (!unit(apply_threshold) || !unit(revert_start)) throw ConfigError("nightaug probabilities must lie in [0, 1]");
  if (!(revert_step > 0)) throw ConfigError("nightaug revert_step must be positive so the revert loop ends");
  if (!(strength_scale > 0)) throw ConfigError("nightaug strength_scale must be positive");
  for (const Range* r : {&brightness, &contrast, &gamma, &noise_sigma, &blur_sigma, &glare_peak, &glare_radius,
                         &glare_falloff}) {
    if (r->hi < r->lo) throw ConfigError("nightaug range is empty");
  }
  if (brightness.lo < 0 || contrast.lo < 0 || gamma.lo <= 0 || noise_sigma.lo < 0 || blur_sigma.lo < 0 ||
      glare_radius.lo <= 0) {
    throw ConfigError("nightaug range bounds out of domain");
  }
  if (glare_spots_min < 1 || glare_spots_max < glare_spots_min) throw ConfigError("nightaug glare spot count range is empty");
}

namespace {

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

Range range_from(const json& j, const char* key, Range fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("nightaug field '") + key + "' must be [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

// Position of `strength` within the configured strength interval, in [0, 1].
double unit_strength(double strength, const NightAugConfig& cfg) {
  return std::clamp((strength - cfg.strength_offset) / cfg.strength_scale, 0.0, 1.0);
}

double rising(const Range& r, double u) { return r.lo + u * (r.hi - r.lo); }
double falling(const Range& r, double u) { return r.hi - u * (r.hi - r.lo); }

}  // namespace

void to_json(json& j, const NightAugConfig& c) {
  j = {{"apply_threshold", c.apply_threshold},
       {"strength_scale", c.strength_scale},
       {"strength_offset", c.strength_offset},
       {"revert_start", c.revert_start},
       {"revert_step", c.revert_step},
       {"brightness", range_json(c.brightness)},
       {"contrast", range_json(c.contrast)},
       {"gamma", range_json(c.gamma)},
       {"noise_sigma", range_json(c.noise_sigma)},
       {"blur_sigma", range_json(c.blur_sigma)},
       {"glare_peak", range_json(c.glare_peak)},
       {"glare_radius", range_json(c.glare_radius)},
       {"glare_falloff", range_json(c.glare_falloff)},
       {"glare_spots_min", c.glare_spots_min},
       {"glare_spots_max", c.glare_spots_max},
       {"rng_seed", c.rng_seed}};
}

void from_json(const json& j, NightAugConfig& c) {
  c.apply_threshold = j.value("apply_threshold", c.apply_threshold);
  c.strength_scale = j.value("strength_scale", c.strength_scale);
  c.strength_offset = j.value("strength_offset", c.strength_offset);
  c.revert_start = j.value("revert_start", c.revert_start);
  c.revert_step = j.value("revert_step", c.revert_step);
  c.brightness = range_from(j, "brightness", c.brightness);
  c.contrast = range_from(j, "contrast", c.contrast);
  c.gamma = range_from(j, "gamma", c.gamma);
  c.noise_sigma = range_from(j, "noise_sigma", c.noise_sigma);
  c.blur_sigma = range_from(j, "blur_sigma", c.blur_sigma);
  c.glare_peak = range_from(j, "glare_peak", c.glare_peak);
  c.glare_radius = range_from(j, "glare_radius", c.glare_radius);
  c.glare_falloff = range_from(j, "glare_falloff", c.glare_falloff);
  c.glare_spots_min = j.value("glare_spots_min", c.glare_spots_min);
  c.glare_spots_max = j.value("glare_spots_max", c.glare_spots_max);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
}

void add_glare(ImageTensor& img, const GlareSpec& spot) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double d = std::hypot(x + 0.5 - spot.cx, y + 0.5 - spot.cy);
      const auto v = static_cast<float>(spot.peak * std::exp(-std::pow(d / spot.radius, spot.falloff)));
      for (int c = 0; c < kImageChannels; ++c) img.at(c, y, x) += v;
    }
  }
}

ImageTensor gaussian_blur(const ImageTensor& img, double sigma) {
  if (sigma <= 0) return img;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  auto mirror = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  ImageTensor tmp(img.height, img.width), out(img.height, img.width);
  for (int c = 0; c < kImageChannels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(c, y, mirror(x + i, img.width));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(c, mirror(y + i, img.height), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

ImageTensor apply_effect(const ImageTensor& img, Augmentation aug, double strength, const NightAugConfig& cfg,
                         Rng& rng, json* trace) {
  const double u = unit_strength(strength, cfg);
  ImageTensor out = img;
  json params;
  switch (aug) {
    case Augmentation::kBrightness: {
      const double f = falling(cfg.brightness, u);
      for (float& v : out.pixels) v = static_cast<float>(v * f);
      params["factor"] = f;
      break;
    }
    case Augmentation::kContrast: {
      const double f = falling(cfg.contrast, u);
      const double m = img.mean();
      for (float& v : out.pixels) v = static_cast<float>(m + f * (v - m));
      params["factor"] = f;
      break;
    }
    case Augmentation::kGamma: {
      const double g = rising(cfg.gamma, u);
      for (float& v : out.pixels) v = static_cast<float>(std::pow(std::max(v, 0.0f), g));
      params["gamma"] = g;
      break;
    }
    case Augmentation::kNoise: {
      const double s = rising(cfg.noise_sigma, u);
      for (float& v : out.pixels) v = static_cast<float>(v + rng.normal(0.0, s));
      params["sigma"] = s;
      break;
    }
    case Augmentation::kBlur: {
      const double s = rising(cfg.blur_sigma, u);
      out = gaussian_blur(img, s);
      params["sigma"] = s;
      break;
    }
    case Augmentation::kGlare: {
      const double peak = rising(cfg.glare_peak, u);
      const int spots = cfg.glare_spots_min + rng.uniform_int(cfg.glare_spots_max - cfg.glare_spots_min + 1);
      json list = json::array();
      for (int i = 0; i < spots; ++i) {
        GlareSpec g;
        g.cx = rng.uniform(0, img.width);
        g.cy = rng.uniform(0, img.height);
        g.radius = rng.uniform(cfg.glare_radius.lo, cfg.glare_radius.hi);
        g.falloff = rng.uniform(cfg.glare_falloff.lo, cfg.glare_falloff.hi);
        g.peak = peak;
        add_glare(out, g);
        list.push_back({{"cx", g.cx}, {"cy", g.cy}, {"radius", g.radius}, {"falloff", g.falloff}, {"peak", g.peak}});
      }
      params["spots"] = list;
      break;
    }
  }
  if (trace) (*trace)["params"] = params;
  return out;
}

ImageTensor apply_single(const ImageTensor& img, Augmentation aug, const NightAugConfig& cfg, Rng& rng,
                         json* trace) {
  json stage{{"augmentation", augmentation_name(aug)}};
  const double r = rng.uniform();
  stage["gate_draw"] = r;
  if (r < cfg.apply_threshold) {
    stage["applied"] = false;
    if (trace) trace->push_back(stage);
    return img;
  }
  const double strength = cfg.strength_scale * r + cfg.strength_offset;
  stage["applied"] = true;
  stage["strength"] = strength;
  ImageTensor out = apply_effect(img, aug, strength, cfg, rng, &stage);

  json reverts = json::array();
  double prob = cfg.revert_start;
  while (true) {
    const double draw = rng.uniform();
    if (draw < prob) {
      stage["revert_stop"] = {{"draw", draw}, {"prob", prob}};
      break;
    }
    const int xa = rng.uniform_int(img.width + 1), xb = rng.uniform_int(img.width + 1);
    const int ya = rng.uniform_int(img.height + 1), yb = rng.uniform_int(img.height + 1);
    const int x0 = std::min(xa, xb), x1 = std::max(xa, xb), y0 = std::min(ya, yb), y1 = std::max(ya, yb);
    for (int c = 0; c < kImageChannels; ++c) {
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) out.at(c, y, x) = img.at(c, y, x);
      }
    }
    reverts.push_back({{"draw", draw}, {"prob", prob}, {"rect", {x0, y0, x1, y1}}});
    prob += cfg.revert_step;
  }
  stage["reverts"] = reverts;
  for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  if (trace) trace->push_back(stage);
  return out;
}

ImageTensor nightaug_pipeline(const ImageTensor& img, const NightAugConfig& cfg, Rng& rng, json* trace) {
  ImageTensor out = img;
  for (Augmentation a : kNightAugOrder) out = apply_single(out, a, cfg, rng, trace);
  return out;
}

double RecordingRng::uniform() {
  const double v = Rng::uniform();
  draws_.push_back(v);
  return v;
}

}  // namespace twopc
