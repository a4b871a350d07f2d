// Procedural day/night street scenes standing in for real driving data.

#include <algorithm>
#include <array>
#include <cmath>

#include "twopc/data.hpp"

namespace twopc {

using nlohmann::json;

namespace {

using Color = std::array<float, 3>;

struct SceneObject {
  int class_index = 0;
  std::string shape;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel extent [x0, x1) x [y0, y1)
  Color primary{}, secondary{};
  int variant = 0;
  bool lights_front = false;
};

struct Clutter {
  int x0, y0, x1, y1;
  Color color;
  bool ellipse;
};

struct SceneGeometry {
  int horizon = 0;
  float sky = 0.8f;
  float ground = 0.5f;
  std::vector<Clutter> clutter;
  std::vector<SceneObject> objects;
};

Color scaled(const Color& c, float s) { return {c[0] * s, c[1] * s, c[2] * s}; }

Color random_vivid(Rng& rng) {
  static const std::array<Color, 8> palette{{{0.85f, 0.15f, 0.12f},
                                             {0.15f, 0.3f, 0.8f},
                                             {0.9f, 0.9f, 0.92f},
                                             {0.12f, 0.12f, 0.14f},
                                             {0.2f, 0.6f, 0.25f},
                                             {0.95f, 0.75f, 0.1f},
                                             {0.55f, 0.55f, 0.6f},
                                             {0.5f, 0.2f, 0.55f}}};
  const Color base = palette[rng.uniform_int(static_cast<int>(palette.size()))];
  const float jitter = static_cast<float>(rng.uniform(0.85, 1.1));
  return {std::min(1.0f, base[0] * jitter), std::min(1.0f, base[1] * jitter), std::min(1.0f, base[2] * jitter)};
}

class Canvas {
 public:
  explicit Canvas(ImageTensor& img) : img_(img) {}

  void put(int x, int y, const Color& c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    for (int k = 0; k < 3; ++k) img_.at(k, y, x) = c[k];
  }

  void rect(int x0, int y0, int x1, int y1, const Color& c) {
    for (int y = std::max(0, y0); y < std::min(img_.height, y1); ++y) {
      for (int x = std::max(0, x0); x < std::min(img_.width, x1); ++x) put(x, y, c);
    }
  }

  // Filled ellipse inscribed in [x0, x1) x [y0, y1).
  void ellipse(int x0, int y0, int x1, int y1, const Color& c) {
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    const double rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy <= 1.0) put(x, y, c);
      }
    }
  }

  // Filled diamond touching the four edge midpoints of [x0, x1) x [y0, y1).
  void diamond(int x0, int y0, int x1, int y1, const Color& c) {
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    const double rx = 0.5 * (x1 - x0), ry = 0.5 * (y1 - y0);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double dx = std::abs(x + 0.5 - cx) / rx, dy = std::abs(y + 0.5 - cy) / ry;
        if (dx + dy <= 1.0 + 0.5 / std::max(rx, ry)) put(x, y, c);
      }
    }
  }

  void add_glow(double cx, double cy, double radius, double peak, const Color& tint) {
    const int r = static_cast<int>(std::ceil(radius * 3));
    for (int y = std::max(0, static_cast<int>(cy) - r); y < std::min(img_.height, static_cast<int>(cy) + r + 1); ++y) {
      for (int x = std::max(0, static_cast<int>(cx) - r); x < std::min(img_.width, static_cast<int>(cx) + r + 1); ++x) {
        const double d2 = ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy)) / (radius * radius);
        const float v = static_cast<float>(peak * std::exp(-d2));
        for (int k = 0; k < 3; ++k) img_.at(k, y, x) += v * tint[k];
      }
    }
  }

 private:
  ImageTensor& img_;
};

bool place(const SceneRecipe& recipe, const ObjectClassStyle& style, int horizon, Rng& rng, SceneObject& obj) {
  const int H = recipe.height, W = recipe.width;
  const double t = rng.uniform();
  const double size = style.size.lo + (style.size.hi - style.size.lo) * t;
  int w = 0, h = 0;
  if (style.shape == "car") {
    w = static_cast<int>(std::lround(size));
    h = static_cast<int>(std::lround(size * rng.uniform(0.5, 0.65)));
  } else if (style.shape == "truck") {
    w = static_cast<int>(std::lround(size));
    h = static_cast<int>(std::lround(size * rng.uniform(0.65, 0.9)));
  } else if (style.shape == "pedestrian") {
    h = static_cast<int>(std::lround(size));
    w = std::max(3, static_cast<int>(std::lround(size * rng.uniform(0.3, 0.4))));
  } else {
    w = h = static_cast<int>(std::lround(size));
  }
  if (w >= W - 2 || h >= H - 2) return false;
  int bottom = 0;
  if (style.shape == "sign") {
    bottom = static_cast<int>(rng.uniform(h + 2, std::min<double>(H - 2, horizon + 0.5 * (H - horizon))));
  } else {
    // nearer (lower) objects are larger
    const double lo = horizon + 0.15 * (H - horizon), hi = H - 1;
    bottom = static_cast<int>(lo + (hi - lo) * std::clamp(t + rng.uniform(-0.2, 0.2), 0.0, 1.0));
    bottom = std::clamp(bottom, h + 1, H - 1);
  }
  const int left = rng.uniform_int(W - w);
  obj.x0 = left;
  obj.x1 = left + w;
  obj.y1 = bottom;
  obj.y0 = bottom - h;
  return obj.y0 >= 0;
}

SceneGeometry sample_geometry(const SceneRecipe& recipe, Rng& rng) {
  SceneGeometry g;
  const int H = recipe.height, W = recipe.width;
  g.horizon = static_cast<int>(H * rng.uniform(0.3, 0.45));
  g.sky = static_cast<float>(rng.uniform(recipe.sky_brightness.lo, recipe.sky_brightness.hi));
  g.ground = static_cast<float>(rng.uniform(recipe.ground_brightness.lo, recipe.ground_brightness.hi));
  const int n_clutter = recipe.clutter_max > 0 ? rng.uniform_int(recipe.clutter_max + 1) : 0;
  for (int i = 0; i < n_clutter; ++i) {
    Clutter c{};
    c.ellipse = rng.uniform() < 0.4;
    const int w = static_cast<int>(rng.uniform(10, 40));
    const int h = c.ellipse ? static_cast<int>(rng.uniform(6, 14)) : static_cast<int>(rng.uniform(10, g.horizon));
    c.x0 = rng.uniform_int(W);
    c.x1 = c.x0 + w;
    c.y1 = g.horizon + (c.ellipse ? h / 2 : 0);
    c.y0 = c.y1 - h;
    const float shade = static_cast<float>(rng.uniform(0.35, 0.65));
    c.color = c.ellipse ? Color{0.15f, 0.4f * shade + 0.15f, 0.12f} : Color{shade, shade * 0.92f, shade * 0.85f};
    g.clutter.push_back(c);
  }

  double total_weight = 0.0;
  for (const auto& s : recipe.classes) total_weight += s.weight;
  const int count = recipe.min_objects + rng.uniform_int(recipe.max_objects - recipe.min_objects + 1);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      double pick = rng.uniform() * total_weight;
      int cls = 0;
      while (cls + 1 < static_cast<int>(recipe.classes.size()) && pick >= recipe.classes[cls].weight) {
        pick -= recipe.classes[cls].weight;
        ++cls;
      }
      SceneObject obj;
      obj.class_index = cls;
      obj.shape = recipe.classes[cls].shape;
      obj.primary = random_vivid(rng);
      obj.secondary = random_vivid(rng);
      obj.variant = rng.uniform_int(2);
      obj.lights_front = rng.uniform() < 0.5;
      if (!place(recipe, recipe.classes[cls], g.horizon, rng, obj)) continue;
      const Box b{double(obj.x0), double(obj.y0), double(obj.x1), double(obj.y1)};
      bool overlaps = false;
      for (const auto& o : g.objects) {
        const Box ob{double(o.x0), double(o.y0), double(o.x1), double(o.y1)};
        if (iou(b, ob) > 0.0) overlaps = true;
      }
      if (overlaps) continue;
      g.objects.push_back(obj);
      break;
    }
  }
  // far to near so nearer objects are drawn last
  std::stable_sort(g.objects.begin(), g.objects.end(),
                   [](const SceneObject& a, const SceneObject& b) { return a.y1 < b.y1; });
  return g;
}

void draw_object(Canvas& cv, const SceneObject& o) {
  const int w = o.x1 - o.x0, h = o.y1 - o.y0;
  const Color dark{0.06f, 0.06f, 0.07f};
  const Color glass{0.25f, 0.32f, 0.4f};
  if (o.shape == "car") {
    const int cabin_h = std::max(1, h * 2 / 5);
    cv.rect(o.x0 + w / 5, o.y0, o.x1 - w / 5, o.y0 + cabin_h, o.primary);
    cv.rect(o.x0 + w / 5 + 1, o.y0 + 1, o.x1 - w / 5 - 1, o.y0 + cabin_h, glass);
    cv.rect(o.x0, o.y0 + cabin_h, o.x1, o.y1 - std::max(1, h / 5), o.primary);
    const int r = std::max(1, h / 4);
    cv.ellipse(o.x0 + w / 8, o.y1 - 2 * r, o.x0 + w / 8 + 2 * r, o.y1, dark);
    cv.ellipse(o.x1 - w / 8 - 2 * r, o.y1 - 2 * r, o.x1 - w / 8, o.y1, dark);
  } else if (o.shape == "truck") {
    const int cab_w = std::max(2, w * 3 / 10);
    const bool cab_left = o.variant == 0;
    const int cab_x0 = cab_left ? o.x0 : o.x1 - cab_w;
    const Color cargo = scaled(o.secondary, 0.5f) ;
    const Color cargo_light{0.75f + 0.2f * cargo[0], 0.75f + 0.2f * cargo[1], 0.75f + 0.2f * cargo[2]};
    cv.rect(cab_left ? o.x0 + cab_w : o.x0, o.y0, cab_left ? o.x1 : o.x1 - cab_w, o.y1 - std::max(1, h / 6), cargo_light);
    cv.rect(cab_x0, o.y0 + h / 4, cab_x0 + cab_w, o.y1 - std::max(1, h / 6), o.primary);
    cv.rect(cab_x0 + 1, o.y0 + h / 4 + 1, cab_x0 + cab_w - 1, o.y0 + h / 2, glass);
    const int r = std::max(1, h / 6);
    cv.ellipse(o.x0 + w / 10, o.y1 - 2 * r, o.x0 + w / 10 + 2 * r, o.y1, dark);
    cv.ellipse(o.x1 - w / 10 - 2 * r, o.y1 - 2 * r, o.x1 - w / 10, o.y1, dark);
    cv.ellipse(o.x0 + w / 2 - r, o.y1 - 2 * r, o.x0 + w / 2 + r, o.y1, dark);
  } else if (o.shape == "pedestrian") {
    const Color skin{0.85f, 0.65f, 0.5f};
    const int head = std::max(2, std::min(w, h / 5 + 1));
    cv.ellipse(o.x0 + (w - head) / 2, o.y0, o.x0 + (w - head) / 2 + head, o.y0 + head, skin);
    const int torso_end = o.y0 + head + (h - head) * 11 / 20;
    cv.rect(o.x0, o.y0 + head, o.x1, torso_end, o.primary);
    const Color legs = scaled(o.secondary, 0.6f);
    const int leg_w = std::max(1, w * 2 / 5);
    cv.rect(o.x0, torso_end, o.x0 + leg_w, o.y1, legs);
    cv.rect(o.x1 - leg_w, torso_end, o.x1, o.y1, legs);
  } else {
    const Color border = o.variant == 0 ? Color{0.1f, 0.1f, 0.1f} : Color{0.95f, 0.95f, 0.95f};
    const Color fill = o.variant == 0 ? Color{0.98f, 0.82f, 0.1f} : Color{0.85f, 0.1f, 0.1f};
    if (o.variant == 0) {
      cv.diamond(o.x0, o.y0, o.x1, o.y1, border);
      cv.diamond(o.x0 + 1, o.y0 + 1, o.x1 - 1, o.y1 - 1, fill);
    } else {
      cv.ellipse(o.x0, o.y0, o.x1, o.y1, border);
      cv.ellipse(o.x0 + 1, o.y0 + 1, o.x1 - 1, o.y1 - 1, fill);
    }
  }
}

ImageTensor render_day(const SceneRecipe& recipe, const SceneGeometry& g) {
  ImageTensor img(recipe.height, recipe.width);
  Canvas cv(img);
  for (int y = 0; y < recipe.height; ++y) {
    if (y < g.horizon) {
      const float t = static_cast<float>(y) / std::max(1, g.horizon);
      const float b = g.sky * (1.0f - 0.15f * t);
      cv.rect(0, y, recipe.width, y + 1, {0.72f * b, 0.85f * b, b});
    } else {
      const float t = static_cast<float>(y - g.horizon) / std::max(1, recipe.height - g.horizon);
      const float b = g.ground * (0.9f + 0.1f * t);
      cv.rect(0, y, recipe.width, y + 1, {b, b, b * 1.02f});
    }
  }
  // lane markings
  const int lane_y = g.horizon + (recipe.height - g.horizon) * 2 / 3;
  for (int x = 2; x < recipe.width; x += 16) cv.rect(x, lane_y, x + 8, lane_y + 2, {0.92f, 0.92f, 0.88f});
  for (const auto& c : g.clutter) {
    if (c.ellipse) {
      cv.ellipse(c.x0, c.y0, c.x1, c.y1, c.color);
    } else {
      cv.rect(c.x0, c.y0, c.x1, c.y1, c.color);
    }
  }
  for (const auto& o : g.objects) draw_object(cv, o);
  return img;
}

void clip01(ImageTensor& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

ImageTensor render(const SceneRecipe& recipe, const SceneGeometry& g, Domain domain, std::uint64_t day_seed,
                   std::uint64_t night_seed) {
  ImageTensor img = render_day(recipe, g);
  if (domain == Domain::kDay) {
    Rng rng(day_seed);
    const auto gain = static_cast<float>(rng.uniform(recipe.day_exposure.lo, recipe.day_exposure.hi));
    for (float& v : img.pixels) v = v * gain + static_cast<float>(rng.normal(0.0, 0.01));
    clip01(img);
    return img;
  }
  Rng rng(night_seed);
  const int H = recipe.height, W = recipe.width;
  // illumination: ambient level plus pools of light under street lamps
  const double ambient = rng.uniform(recipe.night_ambient.lo, recipe.night_ambient.hi);
  struct Lamp {
    double x, y, r, s;
  };
  std::vector<Lamp> lamps;
  const int n_lamps = recipe.street_lamps_max > 0 ? rng.uniform_int(recipe.street_lamps_max + 1) : 0;
  for (int i = 0; i < n_lamps; ++i) {
    lamps.push_back({rng.uniform(0, W), rng.uniform(g.horizon, H), rng.uniform(15, 35),
                     rng.uniform(recipe.lamp_strength.lo, recipe.lamp_strength.hi)});
  }
  const Color tint{0.8f, 0.85f, 1.0f};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double light = ambient;
      for (const auto& l : lamps) {
        const double d2 = ((x - l.x) * (x - l.x) + (y - l.y) * (y - l.y)) / (l.r * l.r);
        light += l.s * std::exp(-d2);
      }
      for (int k = 0; k < 3; ++k) img.at(k, y, x) *= static_cast<float>(light * tint[k]);
    }
  }
  Canvas cv(img);
  if (recipe.vehicle_lights) {
    for (const auto& o : g.objects) {
      if (o.shape != "car" && o.shape != "truck") continue;
      const int h = o.y1 - o.y0, w = o.x1 - o.x0;
      const Color lamp = o.lights_front ? Color{1.0f, 0.95f, 0.75f} : Color{0.95f, 0.12f, 0.1f};
      const int s = std::max(1, h / 6);
      const int ly = o.y1 - h / 3;
      cv.rect(o.x0 + 1, ly - s, o.x0 + 1 + s, ly, lamp);
      cv.rect(o.x1 - 1 - s, ly - s, o.x1 - 1, ly, lamp);
      const double glow = o.lights_front ? 0.35 : 0.2;
      cv.add_glow(o.x0 + 1 + 0.5 * s, ly - 0.5 * s, 1.5 + 0.1 * w, glow, lamp);
      cv.add_glow(o.x1 - 1 - 0.5 * s, ly - 0.5 * s, 1.5 + 0.1 * w, glow, lamp);
    }
  }
  const int n_glare = recipe.glare_spots_max > 0 ? rng.uniform_int(recipe.glare_spots_max + 1) : 0;
  for (int i = 0; i < n_glare; ++i) {
    cv.add_glow(rng.uniform(0, W), rng.uniform(0, H), rng.uniform(4, 12),
                rng.uniform(recipe.glare_peak.lo, recipe.glare_peak.hi), {1.0f, 0.92f, 0.75f});
  }
  const double sigma = rng.uniform(recipe.night_noise_sigma.lo, recipe.night_noise_sigma.hi);
  for (float& v : img.pixels) v += static_cast<float>(rng.normal(0.0, sigma));
  clip01(img);
  return img;
}

LabeledImage to_labeled(const SceneGeometry& g, ImageTensor img) {
  LabeledImage li;
  li.image = std::move(img);
  for (const auto& o : g.objects) {
    LabeledBox lb;
    lb.box = {double(o.x0), double(o.y0), double(o.x1), double(o.y1)};
    lb.class_id = o.class_index;
    li.boxes.push_back(lb);
    li.classes.push_back(o.class_index);
  }
  return li;
}

Range range_from(const json& j, const char* key, Range fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("recipe field '") + key + "' must be [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace

SceneRecipe SceneRecipe::default_recipe() {
  SceneRecipe r;
  r.classes = {{"car", "car", {12, 34}, 1.0},
               {"truck", "truck", {22, 46}, 0.6},
               {"pedestrian", "pedestrian", {9, 26}, 1.0},
               {"sign", "sign", {5, 12}, 1.0}};
  return r;
}

void SceneRecipe::validate() const {
  if (height < kMinImageSide || width < kMinImageSide) throw ConfigError("recipe image size must be >= 32");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("recipe object count range is empty");
  if (classes.empty()) throw ConfigError("recipe needs at least one class");
  for (const auto& c : classes) {
    if (c.shape != "car" && c.shape != "truck" && c.shape != "pedestrian" && c.shape != "sign") {
      throw ConfigError("recipe class '" + c.name + "' has unknown shape '" + c.shape + "'");
    }
    if (!(c.size.lo > 0 && c.size.hi >= c.size.lo)) throw ConfigError("recipe class '" + c.name + "' size range is empty");
    if (!(c.weight > 0)) throw ConfigError("recipe class weights must be positive");
  }
  for (const Range* r : {&sky_brightness, &ground_brightness, &day_exposure, &night_ambient, &lamp_strength, &glare_peak,
                         &night_noise_sigma}) {
    if (r->hi < r->lo) throw ConfigError("recipe range is empty");
  }
  if (!(day_exposure.lo > 0)) throw ConfigError("recipe day_exposure must be positive");
  // night must be darker on average: ambient plus lamp light stays below the darkest day gain
  if (night_ambient.hi + street_lamps_max * lamp_strength.hi * 0.25 >= day_exposure.lo) {
    throw ConfigError("recipe night lighting is not darker than day");
  }
}

void to_json(json& j, const SceneRecipe& r) {
  json classes = json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"name", c.name}, {"shape", c.shape}, {"size", {c.size.lo, c.size.hi}}, {"weight", c.weight}});
  }
  auto rng = [](const Range& x) { return json::array({x.lo, x.hi}); };
  j = json{{"height", r.height},
           {"width", r.width},
           {"min_objects", r.min_objects},
           {"max_objects", r.max_objects},
           {"classes", classes},
           {"sky_brightness", rng(r.sky_brightness)},
           {"ground_brightness", rng(r.ground_brightness)},
           {"clutter_max", r.clutter_max},
           {"day_exposure", rng(r.day_exposure)},
           {"night_ambient", rng(r.night_ambient)},
           {"street_lamps_max", r.street_lamps_max},
           {"lamp_strength", rng(r.lamp_strength)},
           {"glare_spots_max", r.glare_spots_max},
           {"glare_peak", rng(r.glare_peak)},
           {"night_noise_sigma", rng(r.night_noise_sigma)},
           {"vehicle_lights", r.vehicle_lights},
           {"seed", r.seed}};
}

void from_json(const json& j, SceneRecipe& r) {
  const SceneRecipe d = SceneRecipe::default_recipe();
  r.height = j.value("height", d.height);
  r.width = j.value("width", d.width);
  r.min_objects = j.value("min_objects", d.min_objects);
  r.max_objects = j.value("max_objects", d.max_objects);
  r.classes.clear();
  if (j.contains("classes")) {
    for (const auto& c : j.at("classes")) {
      ObjectClassStyle s;
      s.name = c.at("name").get<std::string>();
      s.shape = c.value("shape", s.name);
      s.size = range_from(c, "size", {8, 16});
      s.weight = c.value("weight", 1.0);
      r.classes.push_back(s);
    }
  } else {
    r.classes = d.classes;
  }
  r.sky_brightness = range_from(j, "sky_brightness", d.sky_brightness);
  r.ground_brightness = range_from(j, "ground_brightness", d.ground_brightness);
  r.clutter_max = j.value("clutter_max", d.clutter_max);
  r.day_exposure = range_from(j, "day_exposure", d.day_exposure);
  r.night_ambient = range_from(j, "night_ambient", d.night_ambient);
  r.street_lamps_max = j.value("street_lamps_max", d.street_lamps_max);
  r.lamp_strength = range_from(j, "lamp_strength", d.lamp_strength);
  r.glare_spots_max = j.value("glare_spots_max", d.glare_spots_max);
  r.glare_peak = range_from(j, "glare_peak", d.glare_peak);
  r.night_noise_sigma = range_from(j, "night_noise_sigma", d.night_noise_sigma);
  r.vehicle_lights = j.value("vehicle_lights", d.vehicle_lights);
  r.seed = j.value("seed", d.seed);
}

std::vector<Category> recipe_categories(const SceneRecipe& recipe) {
  std::vector<Category> out;
  for (std::size_t i = 0; i < recipe.classes.size(); ++i) out.push_back({static_cast<int>(i) + 1, recipe.classes[i].name});
  return out;
}

LabeledImage generate_scene(const SceneRecipe& recipe, Domain domain, Rng& rng) {
  const auto geometry = sample_geometry(recipe, rng);
  const auto day_seed = rng.next_seed();
  const auto night_seed = rng.next_seed();
  return to_labeled(geometry, render(recipe, geometry, domain, day_seed, night_seed));
}

std::pair<LabeledImage, LabeledImage> generate_pair(const SceneRecipe& recipe, Rng& rng) {
  const auto geometry = sample_geometry(recipe, rng);
  const auto day_seed = rng.next_seed();
  const auto night_seed = rng.next_seed();
  return {to_labeled(geometry, render(recipe, geometry, Domain::kDay, day_seed, night_seed)),
          to_labeled(geometry, render(recipe, geometry, Domain::kNight, day_seed, night_seed))};
}

LabeledImage generate_indexed(const SceneRecipe& recipe, Domain domain, int index) {
  Rng rng(derive_seed(recipe.seed, static_cast<std::uint64_t>(index)));
  auto li = generate_scene(recipe, domain, rng);
  li.image_id = std::to_string(index + 1);
  return li;
}

Dataset generate_dataset(const SceneRecipe& recipe, Domain domain, int count, int first_index) {
  recipe.validate();
  Dataset ds;
  ds.categories = recipe_categories(recipe);
  ds.images.reserve(count);
  for (int i = 0; i < count; ++i) ds.images.push_back(generate_indexed(recipe, domain, first_index + i));
  return ds;
}

SyntheticSource::SyntheticSource(SceneRecipe recipe, Domain domain, int count, int first_index)
    : recipe_(std::move(recipe)), domain_(domain), count_(count), first_index_(first_index) {
  recipe_.validate();
  if (count_ <= 0) throw ConfigError("synthetic source needs a positive image count");
  categories_ = recipe_categories(recipe_);
}

LabeledImage SyntheticSource::get(std::size_t i) const {
  if (i >= size()) throw ContractViolation("synthetic source index out of range");
  return generate_indexed(recipe_, domain_, first_index_ + static_cast<int>(i));
}

}  // namespace twopc
