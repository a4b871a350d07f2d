#ifndef TWOPC_TRAINER_HPP
#define TWOPC_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "twopc/data.hpp"
#include "twopc/detector.hpp"
#include "twopc/evaluation.hpp"
#include "twopc/meanteacher.hpp"
#include "twopc/nightaug.hpp"
#include "twopc/pseudolabel.hpp"
#include "twopc/scaling.hpp"

namespace twopc {

struct AblationFlags {
  bool two_phase = true;        // off: hard-label cross-entropy on thresholded pseudo-labels
  bool nightaug = true;         // NightAug copies in supervised batches
  bool student_scaling = true;
  bool unsupervised = true;     // off: source-only training, the no-adaptation lower bound
};

/// Where the three splits come from: annotation files, or a synthetic recipe
/// rendered on demand (source = scenes [0, n_s), target = next n_t, val = next n_v).
struct DataConfig {
  bool synthetic = true;
  SceneRecipe recipe = SceneRecipe::default_recipe();
  int source_count = 2000;
  int target_count = 2000;
  int val_count = 500;

  std::string source_annotations, source_images;
  std::string target_annotations, target_images;
  std::string val_annotations, val_images;
};

struct TrainConfig {
  double lambda_unsup = 0.3;
  double ema_coeff = 0.9996;
  FilterConfig filter;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip_norm = 10.0;  // 0 disables clipping
  std::int64_t pretrain_iters = 2000;
  std::int64_t total_iters = 5000;
  int source_batch = 6;
  int target_batch = 6;
  ScaleSchedule scaling;
  NightAugConfig nightaug;
  AblationFlags ablation;
  std::uint64_t seed = 0;

  int eval_every = 250;
  int eval_images = 0;  // 0 = the whole validation split
  double eval_score_threshold = 0.05;
  int checkpoint_every = 1000;  // 0 = final checkpoint only
  std::string init_checkpoint;  // resume from this checkpoint directory when set

  DetectorConfig detector;
  DataConfig data;

  void validate() const;
};

void to_json(nlohmann::json& j, const AblationFlags& a);
void from_json(const nlohmann::json& j, AblationFlags& a);
void to_json(nlohmann::json& j, const DataConfig& d);
void from_json(const nlohmann::json& j, DataConfig& d);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Sets the ablation flags for "mt", "mt+c", "mt+c+na", "full" or "source-only".
void apply_ablation(TrainConfig& cfg, const std::string& preset);

/// L_sup + lambda * L_unsup; a skipped unsupervised term contributes nothing.
double total_loss(double l_sup, std::optional<double> l_unsup, double lambda);

struct DataSplits {
  std::shared_ptr<const SampleSource> source;
  std::shared_ptr<const SampleSource> target;
  std::shared_ptr<const SampleSource> val;  // may be null
};

DataSplits load_splits(const DataConfig& data);

/// Owns the student/teacher state and runs iterations. Single-threaded owner
/// of all parameter mutation.
class Trainer {
 public:
  Trainer(TrainConfig cfg, DataSplits data);

  /// Resumes from a checkpoint: parameters, iteration and, when stored, momentum.
  void load(const Checkpoint& ck);

  /// Runs iteration state().iteration and returns its metrics record.
  nlohmann::json step();

  /// AP of the evaluated model (teacher after burn-in, student before) on
  /// the first `max_images` validation images (0 = all).
  EvalResult evaluate(int max_images = 0) const;
  const DetectorParams& eval_params() const;

  /// Runs to total_iters (or `stop_at`), writing metrics.jsonl and checkpoints
  /// under `out_dir`; the last state goes to `final/`, or to
  /// `checkpoints/iter_<stop_at>` when stopping early. `on_record` sees every
  /// metrics record.
  void train(const std::filesystem::path& out_dir, const std::function<void(const nlohmann::json&)>& on_record = {},
             std::optional<std::int64_t> stop_at = std::nullopt);

  const TeacherStudentState& state() const { return state_; }
  TeacherStudentState& mutable_state() { return state_; }
  const Detector& detector() const { return detector_; }
  const TrainConfig& config() const { return cfg_; }
  bool burned_in() const { return burned_in_; }

  CheckpointManifest manifest(const nlohmann::json& metrics) const;

 private:
  struct Gradient;
  void supervised_batch(Gradient& g, std::int64_t it, nlohmann::json& rec);
  void unsupervised_batch(Gradient& g, std::int64_t it, nlohmann::json& rec);
  void optimizer_step(std::vector<double>& grad);
  void replay_samplers(std::int64_t iterations);
  int supervised_draw() const;

  TrainConfig cfg_;
  DataSplits data_;
  Detector detector_;
  TeacherStudentState state_;
  std::vector<double> velocity_;
  BatchSampler source_sampler_;
  BatchSampler target_sampler_;
  bool burned_in_ = false;
};

/// Canonical JSON of a config (sorted keys) and its git-style blob hash.
std::string canonical_config(const TrainConfig& cfg);
std::string config_hash(const TrainConfig& cfg);
/// SHA-1 of "blob <len>\0<content>", as git hashes file contents.
std::string git_blob_hash(const std::string& content);

}  // namespace twopc

#endif  // TWOPC_TRAINER_HPP
