#ifndef TWOPC_NIGHTAUG_HPP
#define TWOPC_NIGHTAUG_HPP

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/common.hpp"
#include "twopc/data.hpp"
#include "twopc/image.hpp"

namespace twopc {

enum class Augmentation { kBrightness, kContrast, kGamma, kNoise, kBlur, kGlare };

/// Application order of the pipeline.
inline constexpr std::array<Augmentation, 6> kNightAugOrder{Augmentation::kBrightness, Augmentation::kContrast,
                                                            Augmentation::kGamma,      Augmentation::kNoise,
                                                            Augmentation::kBlur,       Augmentation::kGlare};

std::string_view augmentation_name(Augmentation aug);
/// Throws ConfigError for unknown names.
Augmentation parse_augmentation(std::string_view name);

struct NightAugConfig {
  double apply_threshold = 0.5;  // gate: r < threshold leaves the image untouched
  double strength_scale = 0.8;
  double strength_offset = 0.2;
  double revert_start = 0.4;
  double revert_step = 0.1;

  // Strength in [strength_offset, strength_offset + strength_scale] maps
  // linearly onto each range; darkening ranges run from hi to lo.
  Range brightness{0.2, 0.9};   // multiplicative factor
  Range contrast{0.3, 1.0};     // factor around the image mean
  Range gamma{1.0, 3.0};        // exponent
  Range noise_sigma{0.01, 0.08};
  Range blur_sigma{0.5, 2.5};   // pixels
  Range glare_peak{0.3, 1.0};
  Range glare_radius{4.0, 16.0};
  Range glare_falloff{1.5, 2.5};
  int glare_spots_min = 1;
  int glare_spots_max = 3;

  std::uint64_t rng_seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const NightAugConfig& c);
void from_json(const nlohmann::json& j, NightAugConfig& c);

/// Additive spot: peak * exp(-(d / radius)^falloff).
struct GlareSpec {
  double cx = 0, cy = 0;
  double radius = 1;
  double peak = 0;
  double falloff = 2;
};

void add_glare(ImageTensor& img, const GlareSpec& spot);

/// Separable Gaussian blur, kernel radius ceil(3 sigma), mirrored borders.
ImageTensor gaussian_blur(const ImageTensor& img, double sigma);

/// The effect of one augmentation at a given strength, with no gate or revert.
/// Glare and noise draw their randomness from `rng`. Output is not clipped.
ImageTensor apply_effect(const ImageTensor& img, Augmentation aug, double strength, const NightAugConfig& cfg,
                         Rng& rng, nlohmann::json* trace = nullptr);

/// One gated augmentation with random region reverts, clipped to [0, 1].
/// When `trace` is given, the draws and parameters are appended to it.
ImageTensor apply_single(const ImageTensor& img, Augmentation aug, const NightAugConfig& cfg, Rng& rng,
                         nlohmann::json* trace = nullptr);

/// All six augmentations in kNightAugOrder.
ImageTensor nightaug_pipeline(const ImageTensor& img, const NightAugConfig& cfg, Rng& rng,
                              nlohmann::json* trace = nullptr);

/// Rng that records every uniform draw, for reproducibility sidecars.
class RecordingRng : public Rng {
 public:
  using Rng::Rng;
  double uniform() override;
  using Rng::uniform;
  const std::vector<double>& draws() const { return draws_; }

 private:
  std::vector<double> draws_;
};

}  // namespace twopc

#endif  // TWOPC_NIGHTAUG_HPP
