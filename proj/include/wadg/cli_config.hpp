#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wadg/trainer.hpp"

// Layered run configuration for the command-line front end:
// defaults < config file < WADG_* environment < command-line flags.
namespace wadg::cli {

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

/// Reads the real process environment.
EnvLookup process_env();

/// "critic_steps" -> "WADG_CRITIC_STEPS".
std::string env_var_name(const std::string& key);

/// A fully resolved train invocation. `manifest` and `target` may be given in
/// any layer alongside the TrainConfig keys.
struct RunSettings {
  TrainConfig config;
  std::optional<std::string> manifest;
  std::optional<std::string> target;
};

/// Parses a JSON object from disk; ConfigError on I/O or syntax problems.
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Converts textual key=value overrides into a typed JSON layer, using the
/// default config to decide each key's type. Lists are comma-separated.
/// `origin` names the source in error messages.
nlohmann::json text_layer(const std::vector<std::pair<std::string, std::string>>& entries, const std::string& origin);

/// Every recognised key whose WADG_ variable is set, as a typed JSON layer.
nlohmann::json env_layer(const EnvLookup& env);

/// Applies the layers in order over the defaults.
RunSettings resolve(const std::vector<nlohmann::json>& layers);

/// Snapshot that replays the run when passed back as a config file.
nlohmann::json snapshot(const RunSettings& settings);

}  // namespace wadg::cli
