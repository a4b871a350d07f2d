#ifndef TWOPC_MEANTEACHER_HPP
#define TWOPC_MEANTEACHER_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>
#include <string>

#include <nlohmann/json.hpp>

#include "twopc/detector.hpp"

namespace twopc {

struct TeacherStudentState {
  DetectorParams student;
  DetectorParams teacher;
  std::int64_t iteration = 0;
  double ema_coeff = 0.9996;
};

/// Copies the student into the teacher. Only legal at `pretrain_iters`.
void burn_in_copy(TeacherStudentState& state, std::int64_t pretrain_iters);

/// teacher <- beta * teacher + (1 - beta) * student. Only legal after burn-in.
void ema_update(TeacherStudentState& state, std::int64_t pretrain_iters);

/// FNV-1a over the raw bytes of a parameter vector, for cheap equality audits.
std::uint64_t checksum(const DetectorParams& params);

/// Manifest fields stored next to the parameter blob.
struct CheckpointManifest {
  std::int64_t iteration = 0;
  double ema_coeff = 0.9996;
  std::string config_hash;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json detector = nlohmann::json::object();
  std::size_t param_count = 0;
};

void to_json(nlohmann::json& j, const CheckpointManifest& m);
void from_json(const nlohmann::json& j, CheckpointManifest& m);

/// Writes `<dir>/params.bin` (student then teacher, little-endian float64) and
/// `<dir>/manifest.json`.
/// A non-empty `optimizer_state` (the momentum buffer) goes to `<dir>/optimizer.bin`.
void save_checkpoint(const std::filesystem::path& dir, const TeacherStudentState& state,
                     const CheckpointManifest& manifest, std::span<const double> optimizer_state = {});

struct Checkpoint {
  TeacherStudentState state;
  CheckpointManifest manifest;
  std::vector<double> optimizer_state;  // empty when the checkpoint has none
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace twopc

#endif  // TWOPC_MEANTEACHER_HPP
