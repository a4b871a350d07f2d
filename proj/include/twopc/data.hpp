#ifndef TWOPC_DATA_HPP
#define TWOPC_DATA_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/common.hpp"
#include "twopc/image.hpp"

namespace twopc {

/// Source-domain sample: image, class labels and boxes (index-aligned).
struct LabeledImage {
  ImageTensor image;
  std::vector<int> classes;
  BoxSet boxes;
  std::string image_id;

  std::vector<Box> box_list() const;
};

/// Target-domain sample: image only.
struct UnlabeledImage {
  ImageTensor image;
  std::string image_id;
};

struct Category {
  int id = 0;  // id as written in the annotation file
  std::string name;
};

/// In-memory dataset. Class indices are contiguous 0..K-1 in category order.
struct Dataset {
  std::vector<Category> categories;
  std::vector<LabeledImage> images;
  bool has_annotations = true;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(categories.size()); }
  UnlabeledImage unlabeled(std::size_t i) const { return {images[i].image, images[i].image_id}; }
};

/// Reads an annotation JSON (`images`, `annotations` with bbox = [x, y, w, h],
/// `categories`) and the referenced images below `image_root`. A file without
/// an `annotations` array yields an unlabeled dataset.
Dataset load_dataset(const std::filesystem::path& annotation_path, const std::filesystem::path& image_root);

/// Writes `<dir>/<annotation_name>` plus one PNG per image under `<dir>/images`.
/// Per-box scores, when present, are written as a `score` field.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                   const std::string& annotation_name = "annotations.json");

nlohmann::json annotations_to_json(const Dataset& dataset, const std::string& image_subdir = "images");

ImageTensor read_image(const std::filesystem::path& path);
void write_image(const ImageTensor& image, const std::filesystem::path& path);

/// Resizes so the shorter side equals `target`, preserving aspect ratio.
std::pair<ImageTensor, BoxSet> resize_shorter_side(const ImageTensor& image, const BoxSet& boxes, int target);

// ---------------------------------------------------------------------------
// Procedural day/night scenes

enum class Domain { kDay, kNight };

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ObjectClassStyle {
  std::string name;
  std::string shape;  // "car", "truck", "pedestrian" or "sign"
  Range size;         // characteristic size in pixels (width for vehicles, height for pedestrians, side for signs)
  double weight = 1.0;  // relative sampling frequency
};

struct SceneRecipe {
  int height = 128;
  int width = 128;
  int min_objects = 2;
  int max_objects = 6;
  std::vector<ObjectClassStyle> classes;

  // day lighting
  Range sky_brightness{0.65, 0.9};
  Range ground_brightness{0.4, 0.6};
  int clutter_max = 4;
  Range day_exposure{0.7, 1.1};  // global gain per day image

  // night lighting
  Range night_ambient{0.12, 0.3};
  int street_lamps_max = 2;
  Range lamp_strength{0.2, 0.5};
  int glare_spots_max = 3;
  Range glare_peak{0.3, 0.8};
  Range night_noise_sigma{0.02, 0.05};
  bool vehicle_lights = true;

  std::uint64_t seed = 0;

  static SceneRecipe default_recipe();
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneRecipe& r);
void from_json(const nlohmann::json& j, SceneRecipe& r);

std::vector<Category> recipe_categories(const SceneRecipe& recipe);

/// Renders one scene. Geometry is drawn from `rng` first, so two calls from
/// identically seeded generators produce the same boxes in either domain.
LabeledImage generate_scene(const SceneRecipe& recipe, Domain domain, Rng& rng);

/// Paired day/night rendering of one geometry.
std::pair<LabeledImage, LabeledImage> generate_pair(const SceneRecipe& recipe, Rng& rng);

/// Scene number `index` of a recipe: seed derive_seed(recipe.seed, index), image id index + 1.
LabeledImage generate_indexed(const SceneRecipe& recipe, Domain domain, int index);

/// Generates scenes first_index .. first_index + count - 1.
Dataset generate_dataset(const SceneRecipe& recipe, Domain domain, int count, int first_index = 0);

/// Indexed sample access, either held in memory or rendered on demand.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual LabeledImage get(std::size_t i) const = 0;
  virtual const std::vector<Category>& categories() const = 0;
};

class DatasetSource : public SampleSource {
 public:
  explicit DatasetSource(Dataset ds) : ds_(std::move(ds)) {}
  std::size_t size() const override { return ds_.size(); }
  LabeledImage get(std::size_t i) const override { return ds_.images.at(i); }
  const std::vector<Category>& categories() const override { return ds_.categories; }

 private:
  Dataset ds_;
};

/// Renders scene first_index + i on every get(i); nothing is cached.
class SyntheticSource : public SampleSource {
 public:
  SyntheticSource(SceneRecipe recipe, Domain domain, int count, int first_index);
  std::size_t size() const override { return static_cast<std::size_t>(count_); }
  LabeledImage get(std::size_t i) const override;
  const std::vector<Category>& categories() const override { return categories_; }

 private:
  SceneRecipe recipe_;
  Domain domain_;
  int count_;
  int first_index_;
  std::vector<Category> categories_;
};

// ---------------------------------------------------------------------------

/// Endless index stream over a dataset, reshuffled every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch_size);
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace twopc

#endif  // TWOPC_DATA_HPP
