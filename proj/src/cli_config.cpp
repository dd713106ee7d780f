#include "wadg/cli_config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>

#include "wadg/data.hpp"

namespace wadg::cli {

using nlohmann::json;

namespace {

const char* const kRunKeys[] = {"manifest", "target"};

bool is_run_key(const std::string& key) {
  for (const char* k : kRunKeys)
    if (key == k) return true;
  return false;
}

std::uint64_t parse_unsigned(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty()) throw ConfigError(what + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

json typed_value(const std::string& key, const std::string& text, const std::string& origin) {
  const std::string what = origin + " " + key;
  if (is_run_key(key)) return text;
  const json defaults = to_json(TrainConfig{});
  if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "' in " + origin);
  const json& like = defaults.at(key);
  if (like.is_number_unsigned() || like.is_number_integer()) return parse_unsigned(text, what);
  if (like.is_number_float()) {
    try {
      return parse_double(text);
    } catch (const std::exception&) {
      throw ConfigError(what + ": expected a number, got '" + text + "'");
    }
  }
  if (like.is_array()) {
    json arr = json::array();
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = text.find(',', start);
      const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      arr.push_back(parse_unsigned(item, what));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return arr;
  }
  return text;
}

}  // namespace

EnvLookup process_env() {
  return [](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
  };
}

std::string env_var_name(const std::string& key) {
  std::string out = "WADG_";
  for (char c : key) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path.string() + " must hold a JSON object");
  return j;
}

json text_layer(const std::vector<std::pair<std::string, std::string>>& entries, const std::string& origin) {
  json layer = json::object();
  for (const auto& [key, text] : entries) layer[key] = typed_value(key, text, origin);
  return layer;
}

json env_layer(const EnvLookup& env) {
  std::vector<std::pair<std::string, std::string>> entries;
  const json defaults = to_json(TrainConfig{});
  for (const auto& [key, value] : defaults.items())
    if (auto v = env(env_var_name(key))) entries.emplace_back(key, *v);
  for (const char* key : kRunKeys)
    if (auto v = env(env_var_name(key))) entries.emplace_back(key, *v);
  json layer = json::object();
  for (const auto& [key, text] : entries) layer[key] = typed_value(key, text, env_var_name(key));
  return layer;
}

RunSettings resolve(const std::vector<json>& layers) {
  RunSettings s;
  for (json layer : layers) {
    if (!layer.is_object()) throw ConfigError("config layer must be a JSON object");
    for (const char* key : kRunKeys) {
      if (!layer.contains(key)) continue;
      if (!layer.at(key).is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
      (std::string(key) == "manifest" ? s.manifest : s.target) = layer.at(key).get<std::string>();
      layer.erase(key);
    }
    s.config = train_config_from_json(layer, s.config);
  }
  s.config.validate();
  return s;
}

json snapshot(const RunSettings& settings) {
  json j = to_json(settings.config);
  if (settings.manifest) j["manifest"] = *settings.manifest;
  if (settings.target) j["target"] = *settings.target;
  return j;
}

}  // namespace wadg::cli
