#include "twopc/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "twopc/evaluation.hpp"
#include "twopc/nightaug.hpp"
#include "twopc/pseudolabel.hpp"

namespace twopc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot open ") + what + ": " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + " " + path.string() + " does not parse: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string());
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff" ||
         ext == ".ppm" || ext == ".pgm";
}

Detector detector_from(const CheckpointManifest& m) {
  if (m.detector.empty()) throw ConfigError("checkpoint manifest has no detector config");
  return Detector(m.detector.get<DetectorConfig>());
}

fs::path image_root_for(const std::string& annotations, const std::string& images) {
  return images.empty() ? fs::path(annotations).parent_path() / "images" : fs::path(images);
}

// ---------------------------------------------------------------------------
// Subcommands

int run_train(const std::string& config_path, const std::string& out_dir, const std::string& ablation,
              const std::vector<std::string>& overrides, std::ostream& out) {
  TrainConfig cfg = resolve_config(config_path, overrides);
  if (!ablation.empty()) apply_ablation(cfg, ablation);
  cfg.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  RunManifest rm;
  rm.config = cfg;
  rm.seed = cfg.seed;
  rm.config_hash = config_hash(cfg);
  rm.started_at = now_iso8601();
  rm.artifacts = {{"metrics", "metrics.jsonl"}, {"final_checkpoint", "final"}, {"config", "config.json"}};
  write_json_file(dir / "config.json", cfg);
  rm.write(dir);
  try {
    Trainer trainer(cfg, load_splits(cfg.data));
    if (!cfg.init_checkpoint.empty()) trainer.load(load_checkpoint(cfg.init_checkpoint));
    trainer.train(dir, [&](const json& rec) {
      if (rec.contains("ap50")) {
        out << "iter " << rec["iter"].get<std::int64_t>() + 1 << "  l_total " << rec["l_total"].get<double>()
            << "  ap50 " << rec["ap50"].get<double>() << "\n";
      }
    });
  } catch (const std::exception& e) {
    rm.status = "aborted";
    rm.error = e.what();
    rm.finished_at = now_iso8601();
    rm.write(dir);
    throw;
  }
  rm.status = "finished";
  rm.finished_at = now_iso8601();
  rm.write(dir);
  out << "finished: " << (dir / "final").string() << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& images, const std::string& iou_mode,
             const std::string& model, const std::string& out_file, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const Detector det = detector_from(ck.manifest);
  if (ck.state.student.size() != det.layout().total()) throw ConfigError("checkpoint does not match its detector config");
  const auto& params = model == "student" ? ck.state.student : ck.state.teacher;
  const Dataset ds = load_dataset(data, image_root_for(data, images));
  if (ds.num_classes() != det.config().num_classes) {
    throw DataError("dataset has " + std::to_string(ds.num_classes()) + " categories, checkpoint expects " +
                    std::to_string(det.config().num_classes));
  }
  std::vector<DetectionSet> dets;
  std::vector<BoxSet> gts;
  double area = 0;
  for (const auto& li : ds.images) {
    dets.push_back(det.detect(params, li.image));
    gts.push_back(li.boxes);
    area = static_cast<double>(li.image.height) * li.image.width;
  }
  const auto bounds = AreaBounds::scaled_to(area);
  EvalResult r;
  if (iou_mode == "coco") {
    r = evaluate_coco(dets, gts, bounds);
  } else {
    double thr = 0;
    try {
      thr = std::stod(iou_mode);
    } catch (const std::exception&) {
      throw ConfigError("--iou must be a number in (0, 1) or 'coco'");
    }
    if (!(thr > 0 && thr < 1)) throw ConfigError("--iou must be a number in (0, 1) or 'coco'");
    r = evaluate(dets, gts, thr, bounds);
  }
  out << std::fixed << std::setprecision(4);
  out << "class                AP\n";
  for (const auto& [c, ap] : r.per_class_ap) {
    out << std::left << std::setw(20) << ds.categories[c].name << " " << ap << "\n";
  }
  out << "mean AP (" << iou_mode << ")      " << r.mean_ap << "\n";
  out << "AP_l " << r.ap_large << "  AP_m " << r.ap_medium << "  AP_s " << r.ap_small << "\n";
  json rec = to_json_record(r);
  rec["iou"] = iou_mode;
  rec["checkpoint"] = ckpt;
  rec["data"] = data;
  rec["model"] = model;
  if (!out_file.empty()) {
    write_json_file(out_file, rec);
  } else {
    out << rec.dump() << "\n";
  }
  return 0;
}

int run_nightaug_preview(const std::string& input, const std::string& out_dir, std::uint64_t seed, int count,
                         const std::string& config_path, std::ostream& out) {
  NightAugConfig cfg;
  if (!config_path.empty()) cfg = read_json_file(config_path, "nightaug config").get<NightAugConfig>();
  cfg.validate();
  if (!fs::is_directory(input)) throw DataError("input directory not found: " + input);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(input)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (count > 0 && static_cast<std::size_t>(count) < files.size()) files.resize(count);
  fs::create_directories(out_dir);
  json sidecar{{"seed", seed}, {"config", cfg}, {"images", json::array()}};
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto img = read_image(files[i]);
    const auto image_seed = derive_seed(seed, i);
    RecordingRng rng(image_seed);
    json stages = json::array();
    const auto aug = nightaug_pipeline(img, cfg, rng, &stages);
    const auto name = files[i].stem().string() + "_nightaug.png";
    write_image(aug, fs::path(out_dir) / name);
    sidecar["images"].push_back({{"input", files[i].filename().string()},
                                 {"output", name},
                                 {"seed", image_seed},
                                 {"stages", stages},
                                 {"uniform_draws", rng.draws()}});
  }
  write_json_file(fs::path(out_dir) / "nightaug_draws.json", sidecar);
  out << "wrote " << files.size() << " images to " << out_dir << "\n";
  return 0;
}

int run_pseudo_dump(const std::string& ckpt, const std::string& data, const std::string& images,
                    const std::string& out_dir, double tau, double nms_iou, std::ostream& out) {
  const auto ck = load_checkpoint(ckpt);
  const Detector det = detector_from(ck.manifest);
  FilterConfig filter{tau, nms_iou};
  filter.validate();
  Dataset ds = load_dataset(data, image_root_for(data, images));
  if (ds.categories.empty()) {
    for (int c = 0; c < det.config().num_classes; ++c) ds.categories.push_back({c + 1, "class" + std::to_string(c)});
  }
  Dataset dump;
  dump.categories = ds.categories;
  dump.has_annotations = true;
  std::size_t total = 0;
  for (const auto& li : ds.images) {
    const auto pl = generate_pseudo_labels(det, ck.state.teacher, li.image, filter, li.image_id, ck.state.iteration);
    LabeledImage rec;
    rec.image_id = li.image_id;
    rec.image = ImageTensor(li.image.height, li.image.width);
    rec.boxes = pl.labels;
    rec.classes = pl.classes();
    total += pl.size();
    dump.images.push_back(std::move(rec));
  }
  // file_name entries point at the original images
  json doc = annotations_to_json(dump, "");
  const fs::path root = image_root_for(data, images);
  for (auto& img : doc["images"]) img["file_name"] = fs::absolute(root / img["file_name"].get<std::string>()).string();
  doc["info"] = {{"checkpoint", ckpt}, {"teacher_iteration", ck.state.iteration}, {"tau", tau}, {"nms_iou", nms_iou}};
  write_json_file(fs::path(out_dir) / "pseudo_labels.json", doc);
  out << "wrote " << total << " pseudo-labels for " << ds.images.size() << " images\n";
  return 0;
}

int run_gen_synthetic(const std::string& recipe_path, const std::string& out_dir, int count, const std::string& domain,
                      std::optional<std::uint64_t> seed, int first_index, std::ostream& out) {
  SceneRecipe recipe = SceneRecipe::default_recipe();
  if (!recipe_path.empty()) recipe = read_json_file(recipe_path, "recipe").get<SceneRecipe>();
  if (seed) recipe.seed = *seed;
  recipe.validate();
  if (count <= 0) throw ConfigError("--count must be positive");
  const fs::path dir(out_dir);
  if (domain == "day" || domain == "night") {
    write_dataset(generate_dataset(recipe, domain == "day" ? Domain::kDay : Domain::kNight, count, first_index), dir);
  } else if (domain == "paired") {
    write_dataset(generate_dataset(recipe, Domain::kDay, count, first_index), dir / "day");
    write_dataset(generate_dataset(recipe, Domain::kNight, count, first_index), dir / "night");
  } else {
    throw ConfigError("--domain must be day, night or paired");
  }
  write_json_file(dir / "recipe.json", recipe);
  out << "wrote " << count << (domain == "paired" ? " pairs" : " images") << " to " << out_dir << "\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

void RunManifest::write(const fs::path& dir) const {
  write_json_file(dir / "run_manifest.json", {{"config", config},
                                              {"seed", seed},
                                              {"config_hash", config_hash},
                                              {"started_at", started_at},
                                              {"finished_at", finished_at},
                                              {"status", status},
                                              {"error", error},
                                              {"artifacts", artifacts}});
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

TrainConfig resolve_config(const fs::path& config_file, const std::vector<std::string>& overrides) {
  json j = TrainConfig{};
  if (!config_file.empty()) j.merge_patch(read_json_file(config_file, "config file"));
  for (const auto& o : overrides) apply_override(j, o);
  try {
    return j.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Day-to-night domain adaptation for a small two-stage detector"};
  app.name("twopc");
  app.require_subcommand(1);
  app.fallthrough(false);

  std::string config_path, out_dir, ablation;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Pretrain, burn in and run joint adaptation");
  train->add_option("--config", config_path, "Training config JSON")->required();
  train->add_option("--out", out_dir, "Run directory (metrics, checkpoints, manifest)")->required();
  train->add_option("--ablation", ablation, "Preset: mt, mt+c, mt+c+na, full or source-only")
      ->check(CLI::IsMember({"mt", "mt+c", "mt+c+na", "full", "source-only"}));
  train->add_option("--set", overrides, "Override a config field, key.sub=value (repeatable)");

  std::string ckpt, data, images, iou_mode = "0.5", model = "teacher", result_file;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on an annotated dataset");
  eval->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", data, "Annotation JSON")->required();
  eval->add_option("--images", images, "Image root (default: <annotation dir>/images)");
  eval->add_option("--iou", iou_mode, "IoU threshold, or 'coco' for the 0.5:0.95 average");
  eval->add_option("--model", model, "teacher or student")->check(CLI::IsMember({"teacher", "student"}));
  eval->add_option("--out", result_file, "Write the JSON result record here (default: stdout)");

  std::string na_input, na_out, na_config;
  std::uint64_t na_seed = 0;
  int na_count = 0;
  auto* preview = app.add_subcommand("nightaug-preview", "Write NightAug copies of images plus a draw sidecar");
  preview->add_option("--input", na_input, "Directory of input images")->required();
  preview->add_option("--out", na_out, "Output directory")->required();
  preview->add_option("--seed", na_seed, "Seed for all draws")->required();
  preview->add_option("--count", na_count, "Process at most this many images (0 = all)");
  preview->add_option("--config", na_config, "NightAug config JSON");

  std::string pd_ckpt, pd_data, pd_images, pd_out;
  double tau = 0.8, nms_iou = 0.5;
  auto* pseudo = app.add_subcommand("pseudo-dump", "Write teacher pseudo-labels in annotation format");
  pseudo->add_option("--ckpt", pd_ckpt, "Checkpoint directory")->required();
  pseudo->add_option("--data", pd_data, "Annotation JSON of the target images (annotations optional)")->required();
  pseudo->add_option("--images", pd_images, "Image root (default: <annotation dir>/images)");
  pseudo->add_option("--out", pd_out, "Output directory")->required();
  pseudo->add_option("--tau", tau, "Confidence threshold");
  pseudo->add_option("--nms-iou", nms_iou, "Per-class NMS IoU threshold");

  std::string recipe, gen_out, domain = "paired";
  int gen_count = 0, first_index = 0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-synthetic", "Render a synthetic day/night dataset");
  gen->add_option("--recipe", recipe, "Scene recipe JSON (default recipe when omitted)");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->required();
  gen->add_option("--domain", domain, "day, night or paired")->check(CLI::IsMember({"day", "night", "paired"}));
  auto* seed_opt = gen->add_option("--seed", gen_seed, "Override the recipe seed");
  gen->add_option("--first-index", first_index, "Index of the first scene");

  std::vector<std::string> logs;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot", "Render AP curves from metrics logs");
  plot->add_option("--log", logs, "metrics.jsonl (repeatable, one curve each)")->required();
  plot->add_option("--out", plot_out, "Output directory")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (train->parsed()) return run_train(config_path, out_dir, ablation, overrides, out);
    if (eval->parsed()) return run_eval(ckpt, data, images, iou_mode, model, result_file, out);
    if (preview->parsed()) return run_nightaug_preview(na_input, na_out, na_seed, na_count, na_config, out);
    if (pseudo->parsed()) return run_pseudo_dump(pd_ckpt, pd_data, pd_images, pd_out, tau, nms_iou, out);
    if (gen->parsed()) {
      return run_gen_synthetic(recipe, gen_out, gen_count, domain,
                               seed_opt->count() ? std::optional(gen_seed) : std::nullopt, first_index, out);
    }
    if (plot->parsed()) {
      std::vector<fs::path> paths(logs.begin(), logs.end());
      for (const auto& p : plot_curves(paths, plot_out)) out << "wrote " << p.string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace twopc
