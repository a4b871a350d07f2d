#ifndef TWOPC_CLI_HPP
#define TWOPC_CLI_HPP

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "twopc/trainer.hpp"

namespace twopc {

/// Runs one subcommand. Returns 0 on success, 1 on config/data/runtime
/// errors, 2 on usage errors (unknown subcommand, bad flags).
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

/// Defaults < config file < `key.sub=value` overrides. Values parse as JSON
/// when they can, otherwise as strings.
TrainConfig resolve_config(const std::filesystem::path& config_file, const std::vector<std::string>& overrides);
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Run record written to `<out>/run_manifest.json` before training and
/// rewritten on exit, including aborts.
struct RunManifest {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string started_at;
  std::string finished_at;
  std::string status = "running";  // running | finished | aborted
  std::string error;
  nlohmann::json artifacts = nlohmann::json::object();

  void write(const std::filesystem::path& dir) const;
};

/// One curve per log and metric: PNGs `<out>/<metric>.png` for ap50, ap_l, ap_m, ap_s.
std::vector<std::filesystem::path> plot_curves(const std::vector<std::filesystem::path>& logs,
                                               const std::filesystem::path& out_dir);

}  // namespace twopc

#endif  // TWOPC_CLI_HPP
