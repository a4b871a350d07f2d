#include "twopc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/sha.h>

#include "twopc/twophase.hpp"

namespace twopc {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(lambda_unsup >= 0)) throw ConfigError("lambda_unsup must be >= 0");
  if (!(ema_coeff > 0 && ema_coeff < 1)) throw ConfigError("ema_coeff must lie in (0, 1)");
  filter.validate();
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0) || !(grad_clip_norm >= 0)) throw ConfigError("weight_decay and grad_clip_norm must be >= 0");
  if (pretrain_iters < 0 || !(pretrain_iters < total_iters)) throw ConfigError("need 0 <= pretrain_iters < total_iters");
  if (source_batch < 1 || target_batch < 1) throw ConfigError("batch sizes must be positive");
  if (eval_every < 0 || checkpoint_every < 0 || eval_images < 0) throw ConfigError("intervals must be >= 0");
  scaling.validate();
  nightaug.validate();
  detector.validate();
}

void to_json(json& j, const AblationFlags& a) {
  j = {{"two_phase", a.two_phase},
       {"nightaug", a.nightaug},
       {"student_scaling", a.student_scaling},
       {"unsupervised", a.unsupervised}};
}

void from_json(const json& j, AblationFlags& a) {
  a.two_phase = j.value("two_phase", a.two_phase);
  a.nightaug = j.value("nightaug", a.nightaug);
  a.student_scaling = j.value("student_scaling", a.student_scaling);
  a.unsupervised = j.value("unsupervised", a.unsupervised);
}

void to_json(json& j, const DataConfig& d) {
  j = {{"synthetic", d.synthetic},
       {"recipe", d.recipe},
       {"source_count", d.source_count},
       {"target_count", d.target_count},
       {"val_count", d.val_count},
       {"source_annotations", d.source_annotations},
       {"source_images", d.source_images},
       {"target_annotations", d.target_annotations},
       {"target_images", d.target_images},
       {"val_annotations", d.val_annotations},
       {"val_images", d.val_images}};
}

void from_json(const json& j, DataConfig& d) {
  d.synthetic = j.value("synthetic", d.synthetic);
  if (j.contains("recipe")) d.recipe = j.at("recipe").get<SceneRecipe>();
  d.source_count = j.value("source_count", d.source_count);
  d.target_count = j.value("target_count", d.target_count);
  d.val_count = j.value("val_count", d.val_count);
  d.source_annotations = j.value("source_annotations", d.source_annotations);
  d.source_images = j.value("source_images", d.source_images);
  d.target_annotations = j.value("target_annotations", d.target_annotations);
  d.target_images = j.value("target_images", d.target_images);
  d.val_annotations = j.value("val_annotations", d.val_annotations);
  d.val_images = j.value("val_images", d.val_images);
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"lambda_unsup", c.lambda_unsup},
       {"ema_coeff", c.ema_coeff},
       {"filter", c.filter},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"grad_clip_norm", c.grad_clip_norm},
       {"pretrain_iters", c.pretrain_iters},
       {"total_iters", c.total_iters},
       {"source_batch", c.source_batch},
       {"target_batch", c.target_batch},
       {"scaling", c.scaling},
       {"nightaug", c.nightaug},
       {"ablation", c.ablation},
       {"seed", c.seed},
       {"eval_every", c.eval_every},
       {"eval_images", c.eval_images},
       {"eval_score_threshold", c.eval_score_threshold},
       {"checkpoint_every", c.checkpoint_every},
       {"init_checkpoint", c.init_checkpoint},
       {"detector", c.detector},
       {"data", c.data}};
}

void from_json(const json& j, TrainConfig& c) {
  static const char* known[] = {"lambda_unsup", "ema_coeff", "filter", "learning_rate", "momentum", "weight_decay",
                                "grad_clip_norm", "pretrain_iters", "total_iters", "source_batch", "target_batch",
                                "scaling", "nightaug", "ablation", "seed", "eval_every", "eval_images",
                                "eval_score_threshold", "checkpoint_every", "init_checkpoint", "detector", "data"};
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  c.lambda_unsup = j.value("lambda_unsup", c.lambda_unsup);
  c.ema_coeff = j.value("ema_coeff", c.ema_coeff);
  if (j.contains("filter")) c.filter = j.at("filter").get<FilterConfig>();
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.pretrain_iters = j.value("pretrain_iters", c.pretrain_iters);
  c.total_iters = j.value("total_iters", c.total_iters);
  c.source_batch = j.value("source_batch", c.source_batch);
  c.target_batch = j.value("target_batch", c.target_batch);
  if (j.contains("scaling")) c.scaling = j.at("scaling").get<ScaleSchedule>();
  if (j.contains("nightaug")) c.nightaug = j.at("nightaug").get<NightAugConfig>();
  if (j.contains("ablation")) c.ablation = j.at("ablation").get<AblationFlags>();
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_images = j.value("eval_images", c.eval_images);
  c.eval_score_threshold = j.value("eval_score_threshold", c.eval_score_threshold);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
  if (j.contains("detector")) c.detector = j.at("detector").get<DetectorConfig>();
  if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
}

void apply_ablation(TrainConfig& cfg, const std::string& preset) {
  AblationFlags& a = cfg.ablation;
  if (preset == "mt") {
    a = {false, false, false, true};
  } else if (preset == "mt+c") {
    a = {true, false, false, true};
  } else if (preset == "mt+c+na") {
    a = {true, true, false, true};
  } else if (preset == "full") {
    a = {true, true, true, true};
  } else if (preset == "source-only") {
    a = {false, false, false, false};
  } else {
    throw ConfigError("unknown ablation preset '" + preset + "' (expected mt, mt+c, mt+c+na, full or source-only)");
  }
}

double total_loss(double l_sup, std::optional<double> l_unsup, double lambda) {
  return l_unsup ? l_sup + lambda * *l_unsup : l_sup;
}

std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  std::ostringstream out;
  for (unsigned char b : digest) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return out.str();
}

std::string canonical_config(const TrainConfig& cfg) { return json(cfg).dump(); }  // json objects keep keys sorted

std::string config_hash(const TrainConfig& cfg) { return git_blob_hash(canonical_config(cfg)); }

DataSplits load_splits(const DataConfig& d) {
  DataSplits s;
  if (d.synthetic) {
    s.source = std::make_shared<SyntheticSource>(d.recipe, Domain::kDay, d.source_count, 0);
    s.target = std::make_shared<SyntheticSource>(d.recipe, Domain::kNight, d.target_count, d.source_count);
    if (d.val_count > 0) {
      s.val = std::make_shared<SyntheticSource>(d.recipe, Domain::kNight, d.val_count, d.source_count + d.target_count);
    }
    return s;
  }
  auto load = [](const std::string& ann, const std::string& images) -> std::shared_ptr<const SampleSource> {
    if (ann.empty()) return nullptr;
    const fs::path root = images.empty() ? fs::path(ann).parent_path() / "images" : fs::path(images);
    return std::make_shared<DatasetSource>(load_dataset(ann, root));
  };
  s.source = load(d.source_annotations, d.source_images);
  s.target = load(d.target_annotations, d.target_images);
  s.val = load(d.val_annotations, d.val_images);
  if (!s.source || !s.target) throw ConfigError("data config needs source and target annotation files");
  return s;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

DetectorConfig with_classes(DetectorConfig c, const DataSplits& d) {
  if (!d.source || !d.target) throw ConfigError("trainer needs source and target data");
  c.num_classes = static_cast<int>(d.source->categories().size());
  if (c.num_classes < 1) throw DataError("source data has no categories");
  return c;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Stream ids for derive_seed.
enum Stream : std::uint64_t {
  kInitStream = 1,
  kSourceSampler = 2,
  kTargetSampler = 3,
  kSupervised = 4,
  kNightAug = 5,
  kScale = 6,
  kUnsupervised = 7,
};

}  // namespace

struct Trainer::Gradient {
  std::vector<double> values;
  double scale = 1.0;
};

Trainer::Trainer(TrainConfig cfg, DataSplits data)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      detector_(with_classes(cfg_.detector, data_)),
      source_sampler_(data_.source->size(), derive_seed(cfg_.seed, kSourceSampler)),
      target_sampler_(data_.target->size(), derive_seed(cfg_.seed, kTargetSampler)) {
  cfg_.detector = detector_.config();
  cfg_.validate();
  if (data_.target->categories().size() != data_.source->categories().size() && !data_.target->categories().empty()) {
    throw DataError("source and target category tables differ");
  }
  state_.student = detector_.init_params(derive_seed(cfg_.seed, kInitStream));
  state_.teacher = state_.student;
  state_.ema_coeff = cfg_.ema_coeff;
  velocity_.assign(state_.student.size(), 0.0);
}

void Trainer::load(const Checkpoint& ck) {
  if (ck.state.student.size() != detector_.layout().total()) {
    throw ConfigError("checkpoint has " + std::to_string(ck.state.student.size()) + " parameters, detector expects " +
                      std::to_string(detector_.layout().total()));
  }
  state_.student = ck.state.student;
  state_.teacher = ck.state.teacher;
  state_.iteration = ck.state.iteration;
  state_.ema_coeff = cfg_.ema_coeff;
  burned_in_ = state_.iteration > cfg_.pretrain_iters;
  velocity_ = ck.optimizer_state.empty() ? std::vector<double>(state_.student.size(), 0.0) : ck.optimizer_state;
  replay_samplers(state_.iteration);
}

int Trainer::supervised_draw() const {
  // NightAug mode uses each drawn image twice (clean and augmented)
  return cfg_.ablation.nightaug ? std::max(1, cfg_.source_batch / 2) : cfg_.source_batch;
}

void Trainer::replay_samplers(std::int64_t iterations) {
  source_sampler_ = BatchSampler(data_.source->size(), derive_seed(cfg_.seed, kSourceSampler));
  target_sampler_ = BatchSampler(data_.target->size(), derive_seed(cfg_.seed, kTargetSampler));
  for (std::int64_t it = 0; it < iterations; ++it) {
    source_sampler_.next(supervised_draw());
    if (it >= cfg_.pretrain_iters && cfg_.ablation.unsupervised) target_sampler_.next(cfg_.target_batch);
  }
}

const DetectorParams& Trainer::eval_params() const { return burned_in_ ? state_.teacher : state_.student; }

void Trainer::supervised_batch(Gradient& g, std::int64_t it, json& rec) {
  const auto idx = source_sampler_.next(supervised_draw());
  std::vector<LabeledImage> batch;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    LabeledImage li = data_.source->get(idx[k]);
    if (cfg_.ablation.nightaug) {
      Rng rng(derive_seed(cfg_.seed, kNightAug, derive_seed(static_cast<std::uint64_t>(it), k)));
      LabeledImage aug = li;
      aug.image = nightaug_pipeline(li.image, cfg_.nightaug, rng);
      batch.push_back(std::move(li));
      batch.push_back(std::move(aug));
    } else {
      batch.push_back(std::move(li));
    }
  }
  LossBreakdown sum;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const auto seed = derive_seed(cfg_.seed, kSupervised, derive_seed(static_cast<std::uint64_t>(it), k));
    const auto loss = detector_.supervised_loss(state_.student, batch[k], seed);
    sum.rpn_objectness += loss.loss.rpn_objectness * inv;
    sum.rpn_box += loss.loss.rpn_box * inv;
    sum.roi_classification += loss.loss.roi_classification * inv;
    sum.roi_box += loss.loss.roi_box * inv;
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] += loss.gradient[i] * inv;
  }
  rec["l_sup"] = sum.total();
  rec["l_sup_rpn_obj"] = sum.rpn_objectness;
  rec["l_sup_rpn_box"] = sum.rpn_box;
  rec["l_sup_roi_cls"] = sum.roi_classification;
  rec["l_sup_roi_box"] = sum.roi_box;
}

void Trainer::unsupervised_batch(Gradient& g, std::int64_t it, json& rec) {
  const auto idx = target_sampler_.next(cfg_.target_batch);
  const double progress = static_cast<double>(it) / static_cast<double>(cfg_.total_iters);
  const double norm = schedule_norm(progress, cfg_.scaling);
  double rpn_obj = 0, cons = 0, hard = 0;
  std::vector<double> alphas, scales;
  std::size_t pseudo_count = 0, skipped = 0;
  const double inv = 1.0 / static_cast<double>(idx.size());
  std::vector<double> grad(g.values.size(), 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const LabeledImage sample = data_.target->get(idx[k]);
    const std::string id = sample.image_id.empty() ? std::to_string(idx[k]) : sample.image_id;
    const Frame full{id, 1.0};
    const auto stream = derive_seed(static_cast<std::uint64_t>(it), k);

    // phase one: teacher on the full-scale image
    const auto teacher_fwd = detector_.forward_features(state_.teacher, sample.image);
    const auto pseudo = pseudo_labels_from(detector_, state_.teacher, teacher_fwd, cfg_.filter, full, it);
    if (pseudo.frame.scale != 1.0) throw ContractViolation("teacher must see the full-scale image");
    pseudo_count += pseudo.size();

    double s = 1.0;
    if (cfg_.ablation.student_scaling) {
      Rng rng(derive_seed(cfg_.seed, kScale, stream));
      s = sample_scale(norm, cfg_.scaling.gaussian_sigma, cfg_.scaling.min_scale, rng);
    }
    scales.push_back(s);
    // at s = 1 the area filter is skipped: it belongs to the scaling augmentation
    auto [view, student_pseudo] =
        scale_inputs(sample.image, pseudo, s, cfg_.ablation.student_scaling ? cfg_.scaling.min_box_area : 0.0);
    if (student_pseudo.empty()) {
      ++skipped;
      continue;
    }
    auto student_fwd = detector_.forward_features(state_.student, view.image);
    const auto student_rpn = detector_.propose(student_fwd, view.frame);
    const auto seed = derive_seed(cfg_.seed, kUnsupervised, stream);

    std::optional<UnsupervisedLoss> u;
    if (cfg_.ablation.two_phase) {
      const auto merged = merge_proposals(student_rpn, student_pseudo);
      const auto m = matched_predict(detector_, state_.student, state_.teacher, std::move(student_fwd), teacher_fwd,
                                     merged, full);
      if (m) u = unsupervised_loss(detector_, state_.student, *m, student_pseudo, seed);
    } else {
      u = hard_label_unsupervised_loss(detector_, state_.student, student_fwd, student_rpn, student_pseudo, seed);
    }
    if (!u) {
      ++skipped;
      continue;
    }
    rpn_obj += u->rpn_objectness * inv;
    cons += u->consistency * inv;
    hard += u->hard_classification * inv;
    alphas.insert(alphas.end(), u->alphas.begin(), u->alphas.end());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += u->gradient[i] * inv;
  }
  const bool all_skipped = skipped == idx.size();
  const double l_unsup = rpn_obj + cons + hard;
  if (!all_skipped) {
    for (std::size_t i = 0; i < grad.size(); ++i) g.values[i] += cfg_.lambda_unsup * grad[i];
  }
  rec["l_rpn_obj"] = rpn_obj;
  rec["l_cons"] = cons;
  rec["l_hard_cls"] = hard;
  rec["l_unsup"] = l_unsup;
  rec["l_total"] = total_loss(rec["l_sup"].get<double>(), all_skipped ? std::nullopt : std::optional(l_unsup),
                              cfg_.lambda_unsup);
  rec["alpha_mean"] = mean_of(alphas);
  rec["alpha_min"] = alphas.empty() ? 0.0 : *std::min_element(alphas.begin(), alphas.end());
  rec["alpha_max"] = alphas.empty() ? 0.0 : *std::max_element(alphas.begin(), alphas.end());
  rec["pseudo_count"] = pseudo_count;
  rec["scale"] = mean_of(scales);
  rec["scale_norm"] = cfg_.ablation.student_scaling ? norm : 1.0;
  rec["skipped"] = skipped;
}

void Trainer::optimizer_step(std::vector<double>& grad) {
  if (cfg_.grad_clip_norm > 0) {
    double sq = 0;
    for (double v : grad) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip_norm) {
      const double f = cfg_.grad_clip_norm / norm;
      for (double& v : grad) v *= f;
    }
  }
  auto& p = state_.student.values;
  for (std::size_t i = 0; i < p.size(); ++i) {
    velocity_[i] = cfg_.momentum * velocity_[i] + grad[i] + cfg_.weight_decay * p[i];
    p[i] -= cfg_.learning_rate * velocity_[i];
  }
  if (!state_.student.all_finite()) throw NumericError("student parameters became non-finite");
}

json Trainer::step() {
  const std::int64_t it = state_.iteration;
  if (it >= cfg_.total_iters) throw ContractViolation("training already finished");
  if (it == cfg_.pretrain_iters && !burned_in_) {
    burn_in_copy(state_, cfg_.pretrain_iters);
    burned_in_ = true;
  }
  const bool joint = it >= cfg_.pretrain_iters && cfg_.ablation.unsupervised;
  json rec;
  rec["iter"] = it;
  rec["phase"] = it < cfg_.pretrain_iters ? "pretrain" : "joint";
  rec["lr"] = cfg_.learning_rate;

  Gradient g;
  g.values.assign(state_.student.size(), 0.0);
  supervised_batch(g, it, rec);
  if (joint) {
    unsupervised_batch(g, it, rec);
  } else {
    rec["l_rpn_obj"] = 0.0;
    rec["l_cons"] = 0.0;
    rec["l_hard_cls"] = 0.0;
    rec["l_unsup"] = 0.0;
    rec["l_total"] = total_loss(rec["l_sup"].get<double>(), std::nullopt, cfg_.lambda_unsup);
    rec["alpha_mean"] = rec["alpha_min"] = rec["alpha_max"] = 0.0;
    rec["pseudo_count"] = 0;
    rec["scale"] = 1.0;
    rec["scale_norm"] = 1.0;
    rec["skipped"] = 0;
  }
  if (!std::isfinite(rec["l_total"].get<double>())) {
    throw NumericError("non-finite loss at iteration " + std::to_string(it));
  }
  const auto teacher_before = burned_in_ ? checksum(state_.teacher) : 0;
  optimizer_step(g.values);
  if (burned_in_ && checksum(state_.teacher) != teacher_before) {
    throw ContractViolation("optimizer step modified the teacher");
  }
  state_.iteration = it + 1;
  if (burned_in_) ema_update(state_, cfg_.pretrain_iters);
  return rec;
}

EvalResult Trainer::evaluate(int max_images) const {
  if (!data_.val) throw ConfigError("no validation split configured");
  const std::size_t n = max_images > 0 ? std::min<std::size_t>(max_images, data_.val->size()) : data_.val->size();
  std::vector<DetectionSet> dets(n);
  std::vector<BoxSet> gts(n);
  double area = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto li = data_.val->get(i);
    dets[i] = detector_.detect(eval_params(), li.image, cfg_.eval_score_threshold);
    gts[i] = li.boxes;
    for (std::size_t b = 0; b < gts[i].size(); ++b) gts[i][b].class_id = li.classes[b];
    area = static_cast<double>(li.image.height) * li.image.width;
  }
  return twopc::evaluate(dets, gts, 0.5, AreaBounds::scaled_to(area));
}

CheckpointManifest Trainer::manifest(const json& metrics) const {
  CheckpointManifest m;
  m.iteration = state_.iteration;
  m.ema_coeff = state_.ema_coeff;
  m.config_hash = config_hash(cfg_);
  m.metrics = metrics;
  m.detector = detector_.config();
  return m;
}

void Trainer::train(const fs::path& out_dir, const std::function<void(const json&)>& on_record,
                    std::optional<std::int64_t> stop_at) {
  const std::int64_t stop = std::min(stop_at.value_or(cfg_.total_iters), cfg_.total_iters);
  if (stop <= state_.iteration) throw ContractViolation("nothing to train: stop iteration already reached");
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "metrics.jsonl", state_.iteration > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot open " + (out_dir / "metrics.jsonl").string());
  json summary{{"peak_ap50", 0.0}, {"peak_iter", -1}, {"final_ap50", 0.0}};
  std::string last_checkpoint;
  auto save = [&](const fs::path& dir) {
    save_checkpoint(dir, state_, manifest(summary), velocity_);
    last_checkpoint = dir.string();
  };
  try {
    while (state_.iteration < stop) {
      json rec = step();
      const std::int64_t done = state_.iteration;
      const bool last = done == stop;
      if (data_.val && cfg_.eval_every > 0 && (done % cfg_.eval_every == 0 || last)) {
        const auto r = evaluate(cfg_.eval_images);
        rec["ap50"] = r.mean_ap;
        rec["ap_l"] = r.ap_large;
        rec["ap_m"] = r.ap_medium;
        rec["ap_s"] = r.ap_small;
        rec["eval_model"] = burned_in_ ? "teacher" : "student";
        if (r.mean_ap > summary["peak_ap50"].get<double>() || summary["peak_iter"].get<int>() < 0) {
          summary["peak_ap50"] = r.mean_ap;
          summary["peak_iter"] = done;
        }
        summary["final_ap50"] = r.mean_ap;
        summary["final_ap_s"] = r.ap_small;
      }
      log << rec.dump() << "\n";
      log.flush();
      if (on_record) on_record(rec);
      if (cfg_.checkpoint_every > 0 && done % cfg_.checkpoint_every == 0 && !last) {
        std::ostringstream name;
        name << "iter_" << std::setw(6) << std::setfill('0') << done;
        save(out_dir / "checkpoints" / name.str());
      }
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + "; last good checkpoint: " +
                       (last_checkpoint.empty() ? std::string("none") : last_checkpoint));
  }
  if (stop == cfg_.total_iters) {
    save(out_dir / "final");
  } else {
    std::ostringstream name;
    name << "iter_" << std::setw(6) << std::setfill('0') << stop;
    save(out_dir / "checkpoints" / name.str());
  }
}

}  // namespace twopc
