#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "objsdf/datagen/datagen.h"
#include "objsdf/evalmesh/evalmesh.h"
#include "objsdf/training/training.h"

namespace objsdf::cli {

/// Every tunable of the pipeline. Each field is reachable through a dotted
/// key (see `setting_keys()`), from a config file or `--set`.
struct Settings {
  std::uint64_t seed = 0;
  std::string scene_preset = "reference";
  std::string scene_file;  // overrides the preset when set
  std::string shape_preset = "desk";
  data::DatagenConfig data;
  train::TrainConfig train;
  int validate_views = 1;  // test views rendered for the PSNR column of the log
  int mesh_resolution = 128;
  mesh::EvalConfig eval;
  std::vector<int> render_views;  // empty renders every test view
  std::string render_split = "test";
  int render_object = -1;
  bool render_per_object = false;
  /// Locations of the pipeline stages; relative paths resolve against the
  /// output directory.
  std::string dataset_dir = "dataset";
  std::string train_dir = "train";
  std::string checkpoint;  // empty: <train_dir>/checkpoint.bin
};

/// A config value with the place it came from, for diagnostics.
struct ConfigEntry {
  std::string key;
  nlohmann::json value;
  std::string origin;  // "file:line" or "--set"
};

/// Flattens a TOML or JSON document into dotted keys. Parse errors raise
/// ConfigError carrying the file and line.
std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& name);
std::vector<ConfigEntry> parse_config_file(const std::string& path);
/// "key=value", with the value read as a TOML literal and falling back to a
/// bare string.
ConfigEntry parse_override(const std::string& assignment);

/// Applies entries in order (preset keys first). Unknown keys and type
/// mismatches raise ConfigError naming the key and origin.
void apply(Settings& s, const std::vector<ConfigEntry>& entries);
/// Nested JSON of every key; feeding it back through `apply` reproduces `s`.
nlohmann::json to_json(const Settings& s);
std::vector<std::string> setting_keys();

struct CommandSpec {
  std::string subcommand;  // generate | train | render | extract-mesh | evaluate
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  bool resume = false;
  std::optional<std::string> views;
  std::optional<int> iters;
  std::optional<int> object_id;
  std::optional<int> resolution;
};

/// Builds the effective settings: defaults, then the config file, then the
/// dedicated flags, then `--set` overrides.
Settings resolve_settings(const CommandSpec& spec);

/// Runs one subcommand; returns the process exit status. Errors are
/// reported on stderr.
int run(const CommandSpec& spec);
/// Parses argv and runs.
int main(int argc, char** argv);

}  // namespace objsdf::cli
