#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>

#include "objsdf/cli/cli.h"
#include "objsdf/common/error.h"
#include "objsdf/common/fs.h"
#include "toml.hpp"

namespace objsdf::cli {

using nlohmann::json;

namespace {

std::string type_name(const json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "float";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return v.type_name();
}

[[noreturn]] void mismatch(const ConfigEntry& e, const char* expected) {
  throw ConfigError(e.origin + ": key '" + e.key + "': expected " + expected + ", got " + type_name(e.value));
}

json toml_value(const toml::node& n, const std::string& where) {
  if (auto v = n.as_integer()) return v->get();
  if (auto v = n.as_floating_point()) return v->get();
  if (auto v = n.as_boolean()) return v->get();
  if (auto v = n.as_string()) return v->get();
  if (auto a = n.as_array()) {
    json out = json::array();
    for (const auto& x : *a) out.push_back(toml_value(x, where));
    return out;
  }
  throw ConfigError(where + ": unsupported value type");
}

std::string toml_origin(const std::string& name, const toml::node& n) {
  return name + ":" + std::to_string(n.source().begin.line);
}

void flatten_toml(const toml::table& t, const std::string& prefix, const std::string& name,
                  std::vector<ConfigEntry>& out) {
  for (const auto& [k, node] : t) {
    const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    if (auto sub = node.as_table())
      flatten_toml(*sub, key, name, out);
    else
      out.push_back({key, toml_value(node, toml_origin(name, node)), toml_origin(name, node)});
  }
}

void flatten_json(const json& j, const std::string& prefix, const std::string& name, std::vector<ConfigEntry>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object())
      flatten_json(v, key, name, out);
    else
      out.push_back({key, v, name});
  }
}

bool looks_like_json(const std::string& text, const std::string& name) {
  if (std::filesystem::path(name).extension() == ".json") return true;
  const auto p = text.find_first_not_of(" \t\r\n");
  return p != std::string::npos && text[p] == '{';
}

struct Binding {
  std::function<void(const ConfigEntry&)> set;
  std::function<json()> get;
};
using Registry = std::map<std::string, Binding>;

Binding bind(int& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_number_integer()) mismatch(e, "integer");
            r = e.value.get<int>();
          },
          [&r] { return json(r); }};
}

Binding bind(double& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_number()) mismatch(e, "number");
            r = e.value.get<double>();
          },
          [&r] { return json(r); }};
}

Binding bind(bool& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_boolean()) mismatch(e, "boolean");
            r = e.value.get<bool>();
          },
          [&r] { return json(r); }};
}

Binding bind(std::string& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_string()) mismatch(e, "string");
            r = e.value.get<std::string>();
          },
          [&r] { return json(r); }};
}

Binding bind(std::uint64_t& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_number_integer() || e.value.get<std::int64_t>() < 0) mismatch(e, "non-negative integer");
            r = e.value.get<std::uint64_t>();
          },
          [&r] { return json(r); }};
}

Binding bind(std::vector<int>& r) {
  return {[&r](const ConfigEntry& e) {
            if (!e.value.is_array()) mismatch(e, "array of integers");
            std::vector<int> v;
            for (const auto& x : e.value) {
              if (!x.is_number_integer()) mismatch(e, "array of integers");
              v.push_back(x.get<int>());
            }
            r = std::move(v);
          },
          [&r] { return json(r); }};
}

Registry registry(Settings& s) {
  Registry g;
  g["seed"] = {[&s](const ConfigEntry& e) {
                 bind(s.seed).set(e);
                 s.data.seed = s.train.seed = s.eval.seed = s.seed;
               },
               [&s] { return json(s.seed); }};

  g["scene.preset"] = {[&s](const ConfigEntry& e) {
                         bind(s.scene_preset).set(e);
                         if (s.scene_preset != "reference")
                           throw ConfigError(e.origin + ": key 'scene.preset': unknown preset '" + s.scene_preset +
                                             "' (known: reference)");
                       },
                       [&s] { return json(s.scene_preset); }};
  g["scene.file"] = bind(s.scene_file);

  auto& d = s.data;
  g["data.views"] = bind(d.views);
  g["data.width"] = bind(d.width);
  g["data.height"] = bind(d.height);
  g["data.fov_deg"] = bind(d.fov_deg);
  g["data.distance_min"] = bind(d.distance_min);
  g["data.distance_max"] = bind(d.distance_max);
  g["data.elevation_min_deg"] = bind(d.elevation_min_deg);
  g["data.elevation_max_deg"] = bind(d.elevation_max_deg);
  g["data.test_fraction"] = bind(d.test_fraction);
  g["data.mask_morph"] = bind(d.mask_morph);
  g["data.specular"] = bind(d.specular);
  g["data.min_visible_fraction"] = bind(d.min_visible_fraction);

  auto& t = s.train;
  g["train.lambda_semantic"] = bind(t.lambda_semantic);
  g["train.lambda_eikonal"] = bind(t.lambda_eikonal);
  g["train.rays_per_batch"] = bind(t.rays_per_batch);
  g["train.iterations"] = bind(t.iterations);
  g["train.lr"] = bind(t.lr);
  g["train.lr_final"] = bind(t.lr_final);
  g["train.adam.beta1"] = bind(t.adam.beta1);
  g["train.adam.beta2"] = bind(t.adam.beta2);
  g["train.adam.eps"] = bind(t.adam.eps);
  g["train.beta_floor"] = bind(t.beta_floor);
  g["train.beta_init"] = bind(t.beta_init);
  g["train.gamma"] = bind(t.gamma);
  g["train.eikonal_uniform"] = bind(t.eikonal_uniform);
  g["train.chunk_rays"] = bind(t.chunk_rays);
  g["train.semantic_on_miss"] = bind(t.semantic_on_miss);
  g["train.init_radius"] = bind(t.init_radius);
  g["train.checkpoint_every"] = bind(t.checkpoint_every);
  g["train.log_every"] = bind(t.log_every);
  g["train.validate_every"] = bind(t.validate_every);
  g["train.validate_views"] = bind(s.validate_views);
  g["train.render.n_coarse"] = bind(t.render.n_coarse);
  g["train.render.n_fine"] = bind(t.render.n_fine);
  g["train.render.printed_density_variant"] = bind(t.render.printed_density_variant);
  g["train.render.label_opacity_threshold"] = bind(t.render.label_opacity_threshold);

  auto& sh = t.shape;
  g["train.shape.preset"] = {[&s](const ConfigEntry& e) {
                               bind(s.shape_preset).set(e);
                               if (s.shape_preset == "desk")
                                 s.train.shape = fields::FieldShape::desk(s.train.shape.object_count);
                               else if (s.shape_preset == "full")
                                 s.train.shape = fields::FieldShape::full(s.train.shape.object_count);
                               else
                                 throw ConfigError(e.origin + ": key 'train.shape.preset': unknown preset '" +
                                                   s.shape_preset + "' (known: desk, full)");
                             },
                             [&s] { return json(s.shape_preset); }};
  g["train.shape.phi_width"] = bind(sh.phi_width);
  g["train.shape.phi_layers"] = bind(sh.phi_layers);
  g["train.shape.feature_dim"] = bind(sh.feature_dim);
  g["train.shape.theta_width"] = bind(sh.theta_width);
  g["train.shape.theta_layers"] = bind(sh.theta_layers);
  g["train.shape.pe_levels_pos"] = bind(sh.pe_levels_pos);
  g["train.shape.pe_levels_dir"] = bind(sh.pe_levels_dir);
  g["train.shape.softplus_sharpness"] = bind(sh.softplus_sharpness);

  g["mesh.resolution"] = bind(s.mesh_resolution);

  auto& ev = s.eval;
  g["eval.resolution"] = bind(ev.resolution);
  g["eval.surface_samples"] = bind(ev.surface_samples);
  g["eval.crop_margin"] = bind(ev.crop_margin);
  g["eval.n_coarse"] = bind(ev.n_coarse);
  g["eval.n_fine"] = bind(ev.n_fine);
  g["eval.split"] = bind(ev.split);

  g["render.views"] = bind(s.render_views);
  g["render.split"] = bind(s.render_split);
  g["render.object_id"] = bind(s.render_object);
  g["render.per_object"] = bind(s.render_per_object);

  g["paths.dataset"] = bind(s.dataset_dir);
  g["paths.train"] = bind(s.train_dir);
  g["paths.checkpoint"] = bind(s.checkpoint);
  return g;
}

bool is_preset(const std::string& key) { return key.size() >= 7 && key.compare(key.size() - 7, 7, ".preset") == 0; }

}  // namespace

std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& name) {
  std::vector<ConfigEntry> out;
  if (looks_like_json(text, name)) {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(name + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(name + ": top level must be an object");
    flatten_json(j, "", name, out);
    return out;
  }
  try {
    const toml::table t = toml::parse(text, name);
    flatten_toml(t, "", name, out);
  } catch (const toml::parse_error& e) {
    throw ConfigError(name + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
  return out;
}

std::vector<ConfigEntry> parse_config_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path);
  return parse_config_text(read_file(path), path);
}

ConfigEntry parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected key=value");
  auto trim = [](std::string v) {
    const auto b = v.find_first_not_of(" \t"), e = v.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
  };
  ConfigEntry e{trim(assignment.substr(0, eq)), json(), "--set " + assignment};
  const std::string raw = trim(assignment.substr(eq + 1));
  try {
    const toml::table t = toml::parse("v = " + raw);
    e.value = toml_value(*t.get("v"), e.origin);
  } catch (const toml::parse_error&) {
    e.value = raw;
  }
  return e;
}

void apply(Settings& s, const std::vector<ConfigEntry>& entries) {
  Registry g = registry(s);
  std::vector<const ConfigEntry*> order;
  for (const auto& e : entries)
    if (is_preset(e.key)) order.push_back(&e);
  for (const auto& e : entries)
    if (!is_preset(e.key)) order.push_back(&e);
  for (const ConfigEntry* e : order) {
    const auto it = g.find(e->key);
    if (it == g.end()) throw ConfigError(e->origin + ": unknown key '" + e->key + "'");
    it->second.set(*e);
  }
}

nlohmann::json to_json(const Settings& s) {
  Settings copy = s;
  json out = json::object();
  for (const auto& [key, b] : registry(copy)) {
    json* node = &out;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = b.get();
  }
  return out;
}

std::vector<std::string> setting_keys() {
  Settings s;
  std::vector<std::string> keys;
  for (const auto& [k, b] : registry(s)) keys.push_back(k);
  return keys;
}

}  // namespace objsdf::cli
