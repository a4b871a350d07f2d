#include "twopc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <opencv2/imgcodecs.hpp>

namespace twopc {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Box> LabeledImage::box_list() const {
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) out.push_back(b.box);
  return out;
}

// ---------------------------------------------------------------------------
// Image files

ImageTensor read_image(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing image file: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR | cv::IMREAD_ANYDEPTH);
  if (m.empty()) throw DataError("cannot decode image file: " + path.string());
  const double scale = m.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  ImageTensor img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < kImageChannels; ++c) {
        // OpenCV stores BGR
        const double v = m.depth() == CV_16U ? m.at<cv::Vec3w>(y, x)[2 - c] : m.at<cv::Vec3b>(y, x)[2 - c];
        img.at(c, y, x) = static_cast<float>(v * scale);
      }
    }
  }
  return img;
}

void write_image(const ImageTensor& image, const fs::path& path) {
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < kImageChannels; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        m.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image file: " + path.string());
}

// ---------------------------------------------------------------------------
// Annotation files

namespace {

std::string record_name(const json& rec, std::size_t index) {
  if (rec.is_object() && rec.contains("id")) return rec["id"].dump();
  return "#" + std::to_string(index);
}

std::int64_t numeric_id(const std::string& image_id, std::size_t index) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoll(image_id, &pos);
    if (pos == image_id.size()) return v;
  } catch (const std::exception&) {
  }
  return static_cast<std::int64_t>(index) + 1;
}

}  // namespace

Dataset load_dataset(const fs::path& annotation_path, const fs::path& image_root) {
  std::ifstream in(annotation_path);
  if (!in) throw DataError("cannot open annotation file: " + annotation_path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("annotation file " + annotation_path.string() + " does not parse: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array()) {
    throw DataError("annotation file " + annotation_path.string() + " has no 'images' array");
  }

  Dataset ds;
  std::map<std::int64_t, int> category_index;
  if (doc.contains("categories")) {
    std::vector<Category> cats;
    std::size_t i = 0;
    for (const auto& rec : doc["categories"]) {
      if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_number_integer()) {
        throw DataError("malformed category record " + record_name(rec, i));
      }
      cats.push_back({rec["id"].get<int>(), rec.value("name", std::string{})});
      ++i;
    }
    std::sort(cats.begin(), cats.end(), [](const Category& a, const Category& b) { return a.id < b.id; });
    for (std::size_t k = 0; k < cats.size(); ++k) {
      if (!category_index.emplace(cats[k].id, static_cast<int>(k)).second) {
        throw DataError("duplicate category id " + std::to_string(cats[k].id));
      }
    }
    ds.categories = std::move(cats);
  }

  std::map<std::int64_t, std::size_t> image_index;
  std::size_t i = 0;
  for (const auto& rec : doc["images"]) {
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_number_integer() || !rec.contains("file_name") ||
        !rec["file_name"].is_string()) {
      throw DataError("malformed image record " + record_name(rec, i));
    }
    const auto id = rec["id"].get<std::int64_t>();
    LabeledImage li;
    li.image_id = std::to_string(id);
    li.image = read_image(image_root / rec["file_name"].get<std::string>());
    if (rec.contains("width") && rec.contains("height") &&
        (rec["width"].get<int>() != li.image.width || rec["height"].get<int>() != li.image.height)) {
      throw DataError("image record " + record_name(rec, i) + ": declared size differs from the file");
    }
    if (!image_index.emplace(id, ds.images.size()).second) {
      throw DataError("duplicate image id " + std::to_string(id));
    }
    ds.images.push_back(std::move(li));
    ++i;
  }

  ds.has_annotations = doc.contains("annotations");
  if (!ds.has_annotations) return ds;
  i = 0;
  for (const auto& rec : doc["annotations"]) {
    const std::string name = record_name(rec, i);
    if (!rec.is_object() || !rec.contains("image_id") || !rec.contains("category_id") || !rec.contains("bbox")) {
      throw DataError("malformed annotation record " + name + ": missing image_id, category_id or bbox");
    }
    const auto& bb = rec["bbox"];
    if (!bb.is_array() || bb.size() != 4 || !std::all_of(bb.begin(), bb.end(), [](const json& v) { return v.is_number(); })) {
      throw DataError("malformed annotation record " + name + ": bbox must be 4 numbers");
    }
    const double x = bb[0], y = bb[1], w = bb[2], h = bb[3];
    if (!(w > 0 && h > 0)) throw DataError("malformed annotation record " + name + ": non-positive bbox size");
    const auto img_it = image_index.find(rec["image_id"].get<std::int64_t>());
    if (img_it == image_index.end()) throw DataError("annotation record " + name + ": unknown image_id");
    const auto cat_it = category_index.find(rec["category_id"].get<std::int64_t>());
    if (cat_it == category_index.end()) throw DataError("annotation record " + name + ": unknown category_id");
    LabeledImage& li = ds.images[img_it->second];
    LabeledBox lb;
    lb.box = {x, y, x + w, y + h};
    lb.class_id = cat_it->second;
    if (rec.contains("score")) lb.score = rec["score"].get<double>();
    li.boxes.push_back(std::move(lb));
    li.classes.push_back(cat_it->second);
    ++i;
  }
  return ds;
}

json annotations_to_json(const Dataset& dataset, const std::string& image_subdir) {
  json images = json::array();
  json annotations = json::array();
  json categories = json::array();
  for (const auto& c : dataset.categories) categories.push_back({{"id", c.id}, {"name", c.name}});
  std::int64_t ann_id = 1;
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto& li = dataset.images[i];
    const auto id = numeric_id(li.image_id, i);
    std::string file = li.image_id + ".png";
    if (!image_subdir.empty()) file = image_subdir + "/" + file;
    images.push_back({{"id", id}, {"file_name", file}, {"width", li.image.width}, {"height", li.image.height}});
    for (std::size_t b = 0; b < li.boxes.size(); ++b) {
      const auto& lb = li.boxes[b];
      const int cls = b < li.classes.size() ? li.classes[b] : lb.class_id.value_or(0);
      json rec{{"id", ann_id++},
               {"image_id", id},
               {"category_id", dataset.categories.at(cls).id},
               {"bbox", {lb.box.x1, lb.box.y1, lb.box.width(), lb.box.height()}}};
      if (lb.score) rec["score"] = *lb.score;
      annotations.push_back(std::move(rec));
    }
  }
  json doc{{"images", images}, {"categories", categories}};
  if (dataset.has_annotations) doc["annotations"] = annotations;
  return doc;
}

void write_dataset(const Dataset& dataset, const fs::path& dir, const std::string& annotation_name) {
  fs::create_directories(dir / "images");
  for (const auto& li : dataset.images) write_image(li.image, dir / "images" / (li.image_id + ".png"));
  // file_name entries are relative to <dir>/images, the default image root
  std::ofstream out(dir / annotation_name);
  out << annotations_to_json(dataset, "").dump(1) << "\n";
  if (!out) throw DataError("cannot write annotation file in " + dir.string());
}

std::pair<ImageTensor, BoxSet> resize_shorter_side(const ImageTensor& image, const BoxSet& boxes, int target) {
  if (target < kMinImageSide) throw ContractViolation("resize target must be >= " + std::to_string(kMinImageSide));
  const int shorter = std::min(image.height, image.width);
  if (shorter == target) return {image, boxes};
  const double s = static_cast<double>(target) / shorter;
  const int new_h = image.height == shorter ? target : static_cast<int>(std::lround(image.height * s));
  const int new_w = image.width == shorter ? target : static_cast<int>(std::lround(image.width * s));
  const double sx = static_cast<double>(new_w) / image.width;
  const double sy = static_cast<double>(new_h) / image.height;
  BoxSet out = boxes;
  for (auto& b : out) b.box = {b.box.x1 * sx, b.box.y1 * sy, b.box.x2 * sx, b.box.y2 * sy};
  return {resize_bilinear(image, new_h, new_w), std::move(out)};
}

// ---------------------------------------------------------------------------
// Batches

BatchSampler::BatchSampler(std::size_t dataset_size, std::uint64_t seed) : size_(dataset_size), seed_(seed) {
  if (size_ == 0) throw DataError("cannot sample batches from an empty dataset");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(size_);
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(derive_seed(seed_, epoch_));
  for (std::size_t i = size_; i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(static_cast<int>(i))]);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ == size_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

}  // namespace twopc
