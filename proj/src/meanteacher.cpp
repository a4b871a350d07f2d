#include "twopc/meanteacher.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace twopc {

namespace fs = std::filesystem;

void burn_in_copy(TeacherStudentState& state, std::int64_t pretrain_iters) {
  if (state.iteration != pretrain_iters) {
    throw ContractViolation("burn_in_copy at iteration " + std::to_string(state.iteration) + ", expected " +
                            std::to_string(pretrain_iters));
  }
  state.teacher = state.student;
}

void ema_update(TeacherStudentState& state, std::int64_t pretrain_iters) {
  if (state.iteration <= pretrain_iters) {
    throw ContractViolation("ema_update before burn-in (iteration " + std::to_string(state.iteration) + ")");
  }
  if (state.teacher.size() != state.student.size()) throw ContractViolation("teacher and student differ in size");
  const double beta = state.ema_coeff;
  auto& t = state.teacher.values;
  const auto& s = state.student.values;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = beta * t[i] + (1.0 - beta) * s[i];
  if (!state.teacher.all_finite()) throw NumericError("teacher parameters became non-finite in the EMA update");
}

std::uint64_t checksum(const DetectorParams& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (double v : params.values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

void to_json(nlohmann::json& j, const CheckpointManifest& m) {
  j = {{"iteration", m.iteration},       {"ema_coeff", m.ema_coeff}, {"config_hash", m.config_hash},
       {"metrics", m.metrics},           {"detector", m.detector},   {"param_count", m.param_count},
       {"params_file", "params.bin"},    {"params_layout", "student then teacher, float64 little-endian"}};
}

void from_json(const nlohmann::json& j, CheckpointManifest& m) {
  m.iteration = j.at("iteration").get<std::int64_t>();
  m.ema_coeff = j.at("ema_coeff").get<double>();
  m.config_hash = j.value("config_hash", std::string{});
  m.metrics = j.value("metrics", nlohmann::json::object());
  m.detector = j.value("detector", nlohmann::json::object());
  m.param_count = j.at("param_count").get<std::size_t>();
}

namespace {

void write_doubles(const fs::path& file, std::span<const double> values) {
  std::ofstream out(file, std::ios::binary);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw DataError("cannot write " + file.string());
}

}  // namespace

void save_checkpoint(const fs::path& dir, const TeacherStudentState& state, const CheckpointManifest& manifest,
                     std::span<const double> optimizer_state) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  if (state.student.size() != state.teacher.size()) throw ContractViolation("teacher and student differ in size");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "params.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(state.student.values.data()),
              static_cast<std::streamsize>(state.student.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(state.teacher.values.data()),
              static_cast<std::streamsize>(state.teacher.size() * sizeof(double)));
    if (!out) throw DataError("cannot write " + (dir / "params.bin").string());
  }
  if (!optimizer_state.empty()) {
    if (optimizer_state.size() != state.student.size()) throw ContractViolation("optimizer state size mismatch");
    write_doubles(dir / "optimizer.bin", optimizer_state);
  } else {
    fs::remove(dir / "optimizer.bin");
  }
  CheckpointManifest m = manifest;
  m.iteration = state.iteration;
  m.ema_coeff = state.ema_coeff;
  m.param_count = state.student.size();
  std::ofstream out(dir / "manifest.json");
  out << nlohmann::json(m).dump(2) << "\n";
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("missing checkpoint manifest: " + (dir / "manifest.json").string());
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(mf).get<CheckpointManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  const std::size_t n = ck.manifest.param_count;
  const auto bin = dir / "params.bin";
  if (!fs::exists(bin) || fs::file_size(bin) != 2 * n * sizeof(double)) {
    throw DataError("checkpoint parameter file missing or of the wrong size: " + bin.string());
  }
  std::ifstream in(bin, std::ios::binary);
  ck.state.student.values.resize(n);
  ck.state.teacher.values.resize(n);
  in.read(reinterpret_cast<char*>(ck.state.student.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  in.read(reinterpret_cast<char*>(ck.state.teacher.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw DataError("cannot read " + bin.string());
  const auto opt = dir / "optimizer.bin";
  if (fs::exists(opt)) {
    if (fs::file_size(opt) != n * sizeof(double)) throw DataError("optimizer state of the wrong size: " + opt.string());
    std::ifstream oin(opt, std::ios::binary);
    ck.optimizer_state.resize(n);
    oin.read(reinterpret_cast<char*>(ck.optimizer_state.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!oin) throw DataError("cannot read " + opt.string());
  }
  ck.state.iteration = ck.manifest.iteration;
  ck.state.ema_coeff = ck.manifest.ema_coeff;
  return ck;
}

}  // namespace twopc
