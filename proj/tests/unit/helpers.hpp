#ifndef TWOPC_TESTS_HELPERS_HPP
#define TWOPC_TESTS_HELPERS_HPP

#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "twopc/common.hpp"
#include "twopc/data.hpp"
#include "twopc/detector.hpp"
#include "twopc/image.hpp"

namespace twopc::testing {

/// Returns scripted uniform draws first, then `fallback` forever.
class ScriptedRng : public Rng {
 public:
  ScriptedRng(std::vector<double> script, double fallback) : Rng(0), script_(script.begin(), script.end()), fallback_(fallback) {}
  double uniform() override {
    ++calls_;
    if (script_.empty()) return fallback_;
    const double v = script_.front();
    script_.pop_front();
    return v;
  }
  using Rng::uniform;
  int calls() const { return calls_; }

 private:
  std::deque<double> script_;
  double fallback_;
  int calls_ = 0;
};

inline ImageTensor random_image(int h, int w, std::uint64_t seed) {
  ImageTensor img(h, w);
  Rng rng(seed);
  for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

inline LabeledImage synthetic_sample(std::uint64_t seed, Domain domain = Domain::kDay) {
  auto recipe = SceneRecipe::default_recipe();
  recipe.seed = seed;
  return generate_indexed(recipe, domain, 0);
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f at params[i].
inline double central_difference(const std::function<double(const DetectorParams&)>& f, DetectorParams params,
                                 std::size_t i, double h) {
  const double x = params.values[i];
  params.values[i] = x + h;
  const double up = f(params);
  params.values[i] = x - h;
  const double down = f(params);
  return (up - down) / (2 * h);
}

/// Picks up to `count` probe indices spread over the layout's tensors whose
/// analytic gradient is not negligible.
inline std::vector<std::size_t> gradient_probes(const Detector& det, const std::vector<double>& grad, int count,
                                                std::uint64_t seed, double min_abs = 1e-6) {
  Rng rng(seed);
  std::vector<std::size_t> out;
  const auto& tensors = det.layout().tensors();
  for (int attempt = 0; attempt < 20000 && static_cast<int>(out.size()) < count; ++attempt) {
    const auto& t = tensors[static_cast<std::size_t>(attempt) % tensors.size()];
    const std::size_t i = t.offset + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(t.size)));
    if (std::abs(grad[i]) < min_abs) continue;
    if (std::find(out.begin(), out.end(), i) != out.end()) continue;
    out.push_back(i);
  }
  return out;
}

}  // namespace twopc::testing

#endif  // TWOPC_TESTS_HELPERS_HPP
