#include "objsdf/cli/cli.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "objsdf/common/error.h"
#include "objsdf/common/fs.h"

namespace objsdf::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Rendered depth PNGs store round(depth / kDepthUnit).
constexpr double kDepthUnit = 1e-3;

fs::path under(const std::string& out, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : fs::path(out) / path;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": '" + item + "' is not an integer");
    }
  }
  return v;
}

void echo_config(const Settings& s, const std::string& out, const std::string& command) {
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / (command + ".config.json"), to_json(s).dump(2) + "\n");
}

data::Dataset open_dataset(const Settings& s, const std::string& out) {
  const fs::path manifest = under(out, s.dataset_dir) / data::kManifestName;
  if (!fs::exists(manifest)) throw ConfigError("dataset manifest not found: " + manifest.string());
  return data::load_dataset(manifest.string());
}

fields::FieldModel open_model(const Settings& s, const std::string& out) {
  const fs::path ckpt = s.checkpoint.empty() ? under(out, s.train_dir) / "checkpoint.bin" : under(out, s.checkpoint);
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt.string());
  return fields::load_checkpoint(ckpt.string()).model;
}

render::RenderConfig eval_render_config(const Settings& s, const data::Dataset& ds, int n_coarse, int n_fine) {
  render::RenderConfig rc = s.train.render;
  rc.n_coarse = n_coarse;
  rc.n_fine = n_fine;
  rc.jitter = false;
  rc.background_color = ds.background_color;
  return rc;
}

int cmd_generate(const Settings& s, const std::string& out) {
  const geo::SceneSpec scene = s.scene_file.empty() ? geo::reference_scene() : geo::load_scene(s.scene_file);
  const fs::path dir = under(out, s.dataset_dir);
  const data::Dataset ds = data::generate_dataset(scene, s.data, dir.string());
  std::printf("generated %zu views (%zu train, %zu test) in %s\n", ds.views.size(), ds.split("train").size(),
              ds.split("test").size(), dir.string().c_str());
  return 0;
}

int cmd_train(const Settings& s, const std::string& out, bool resume) {
  const data::Dataset ds = open_dataset(s, out);
  const fs::path dir = under(out, s.train_dir);
  std::string resume_from;
  if (resume) {
    const fs::path latest = s.checkpoint.empty() ? dir / "checkpoint.bin" : under(out, s.checkpoint);
    if (!fs::exists(latest)) throw ConfigError("--resume: no checkpoint at " + latest.string());
    resume_from = latest.string();
  }
  const auto val_views = ds.split("test");
  train::TrainHooks hooks;
  if (s.train.validate_every > 0 && !val_views.empty()) {
    const render::RenderConfig rc = eval_render_config(s, ds, s.train.render.n_coarse, s.train.render.n_fine);
    hooks.validate = [&, rc](const fields::FieldModel& model) {
      const render::NeuralField field(model);
      const std::size_t n = std::min(val_views.size(), static_cast<std::size_t>(std::max(s.validate_views, 1)));
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        sum += mesh::psnr(mesh::render_view(field, val_views[i]->camera, ds.bbox, rc).rgb, val_views[i]->rgb);
      return sum / static_cast<double>(n);
    };
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int total = s.train.iterations;
  hooks.on_report = [&](const train::LossReport& r) {
    if (r.iteration % 100 != 0 && r.iteration != total) return;
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("iter %lld/%d  total %.5f  rec %.5f  sem %.5f  eik %.5f  beta %.5f  %.0fs\n",
                static_cast<long long>(r.iteration), total, r.total, r.rec, r.semantic, r.eikonal, r.beta, sec);
    std::fflush(stdout);
  };
  try {
    const auto res = train::train(train::make_ray_pool(ds), s.train, dir.string(), resume_from, hooks);
    std::printf("trained %lld iterations, checkpoint %s\n", static_cast<long long>(res.state.iteration),
                (dir / "checkpoint.bin").string().c_str());
  } catch (const train::TrainingAborted& e) {
    std::fprintf(stderr, "error: %s (state saved to %s)\n", e.what(), (dir / "aborted.bin").string().c_str());
    return 3;
  }
  return 0;
}

void write_gray(const fs::path& path, const img::Image& im) { img::write_png8(path.string(), im); }

int cmd_render(const Settings& s, const std::string& out) {
  const data::Dataset ds = open_dataset(s, out);
  const fields::FieldModel model = open_model(s, out);
  if (s.render_object >= model.shape.object_count)
    throw ConfigError("render.object_id " + std::to_string(s.render_object) + " outside [0," +
                      std::to_string(model.shape.object_count) + ")");
  std::vector<const data::View*> views;
  if (s.render_views.empty()) {
    views = ds.split(s.render_split);
  } else {
    for (int id : s.render_views) {
      if (id < 0 || id >= static_cast<int>(ds.views.size()))
        throw ConfigError("render.views: no view " + std::to_string(id));
      views.push_back(&ds.views[static_cast<std::size_t>(id)]);
    }
  }
  render::RenderConfig rc = eval_render_config(s, ds, s.eval.n_coarse, s.eval.n_fine);
  rc.only_object = s.render_object;
  const render::NeuralField field(model);
  const fs::path dir = fs::path(out) / "render";
  fs::create_directories(dir);
  for (const data::View* v : views) {
    const mesh::RenderedView r = mesh::render_view(field, v->camera, ds.bbox, rc, s.render_per_object);
    char stem[32];
    std::snprintf(stem, sizeof stem, "view_%03d", v->id);
    const std::string base = (dir / stem).string() + (s.render_object >= 0 ? "_obj" + std::to_string(s.render_object) : "");
    img::write_png8(base + "_color.png", r.rgb);
    img::write_label_png(base + "_label.png", r.labels);
    write_gray(base + "_opacity.png", r.opacity);
    std::vector<std::uint16_t> codes(r.depth.data.size());
    for (std::size_t i = 0; i < codes.size(); ++i)
      codes[i] = static_cast<std::uint16_t>(std::clamp(std::round(r.depth.data[i] / kDepthUnit), 0.0, 65535.0));
    img::write_png16(base + "_depth.png", r.depth.width, r.depth.height, codes);
    for (std::size_t k = 0; k < r.object_opacity.size(); ++k)
      write_gray(base + "_opacity_obj" + std::to_string(k) + ".png", r.object_opacity[k]);
  }
  write_file_atomic(dir / "depth.json", json{{"units_per_code", kDepthUnit}, {"max_code", 65535}}.dump(2) + "\n");
  std::printf("rendered %zu views to %s\n", views.size(), dir.string().c_str());
  return 0;
}

int cmd_extract(const Settings& s, const std::string& out) {
  const data::Dataset ds = open_dataset(s, out);
  const fields::FieldModel model = open_model(s, out);
  const fs::path dir = fs::path(out) / "meshes";
  fs::create_directories(dir);
  const auto name = [&](int k) { return (dir / ("object_" + std::to_string(k) + ".ply")).string(); };
  if (s.render_object >= 0) {
    mesh::write_ply(name(s.render_object), mesh::extract_object_mesh(model, s.render_object, ds.bbox, s.mesh_resolution));
    std::printf("wrote %s\n", name(s.render_object).c_str());
    return 0;
  }
  const auto meshes = mesh::extract_all_meshes(render::NeuralField(model), ds.bbox, s.mesh_resolution);
  for (std::size_t k = 0; k < meshes.objects.size(); ++k) mesh::write_ply(name(static_cast<int>(k)), meshes.objects[k]);
  mesh::write_ply((dir / "scene.ply").string(), meshes.scene);
  std::printf("wrote %zu object meshes and scene.ply to %s\n", meshes.objects.size(), dir.string().c_str());
  return 0;
}

int cmd_evaluate(const Settings& s, const std::string& out) {
  const data::Dataset ds = open_dataset(s, out);
  const fields::FieldModel model = open_model(s, out);
  const geo::SceneSpec truth = geo::load_scene((fs::path(ds.root) / ds.scene_file).string());
  const mesh::Metrics m = mesh::evaluate(model, ds, truth, s.eval);
  const fs::path path = fs::path(out) / "metrics.json";
  write_file_atomic(path, m.to_json().dump(2) + "\n");
  std::printf("psnr %.3f  miou %.4f  cd_scene %s  -> %s\n", m.psnr, m.miou,
              m.cd_scene ? std::to_string(*m.cd_scene).c_str() : "n/a", path.string().c_str());
  return 0;
}

}  // namespace

Settings resolve_settings(const CommandSpec& spec) {
  Settings s;
  std::vector<ConfigEntry> entries;
  if (!spec.config_path.empty()) entries = parse_config_file(spec.config_path);
  if (spec.seed) entries.push_back(ConfigEntry{"seed", json(*spec.seed), "--seed"});
  if (spec.iters) entries.push_back(ConfigEntry{"train.iterations", json(*spec.iters), "--iters"});
  if (spec.views) {
    if (spec.subcommand == "render") {
      entries.push_back(ConfigEntry{"render.views", json(parse_int_list(*spec.views, "--views")), "--views"});
    } else {
      const auto v = parse_int_list(*spec.views, "--views");
      if (v.size() != 1) throw ConfigError("--views: expected a view count");
      entries.push_back(ConfigEntry{"data.views", json(v[0]), "--views"});
    }
  }
  if (spec.object_id) entries.push_back(ConfigEntry{"render.object_id", json(*spec.object_id), "--object-id"});
  if (spec.resolution) {
    entries.push_back(ConfigEntry{"mesh.resolution", json(*spec.resolution), "--resolution"});
    entries.push_back(ConfigEntry{"eval.resolution", json(*spec.resolution), "--resolution"});
  }
  for (const auto& o : spec.overrides) entries.push_back(parse_override(o));
  cli::apply(s, entries);
  s.train.validate();
  if (s.mesh_resolution < 2 || s.eval.resolution < 2) throw ConfigError("mesh resolution must be >= 2");
  if (s.eval.surface_samples < 1) throw ConfigError("eval.surface_samples must be >= 1");
  return s;
}

int run(const CommandSpec& spec) {
  try {
    const Settings s = resolve_settings(spec);
    echo_config(s, spec.out_dir, spec.subcommand);
    if (spec.subcommand == "generate") return cmd_generate(s, spec.out_dir);
    if (spec.subcommand == "train") return cmd_train(s, spec.out_dir, spec.resume);
    if (spec.subcommand == "render") return cmd_render(s, spec.out_dir);
    if (spec.subcommand == "extract-mesh") return cmd_extract(s, spec.out_dir);
    if (spec.subcommand == "evaluate") return cmd_evaluate(s, spec.out_dir);
    throw ConfigError("unknown subcommand '" + spec.subcommand + "'");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

int main(int argc, char** argv) {
  CLI::App app{"Object-compositional neural implicit surfaces"};
  app.require_subcommand(1, 1);
  CommandSpec spec;
  std::uint64_t seed = 0;
  std::string views;
  int iters = 0, object_id = 0, resolution = 0;

  app.add_option("--config", spec.config_path, "TOML or JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", spec.out_dir, "Output (workspace) directory");
  auto* o_seed = app.add_option("--seed", seed, "Seed for every random choice");
  app.add_flag("--resume", spec.resume, "Continue from the latest checkpoint");
  auto* o_views = app.add_option("--views", views, "generate: view count; render: comma separated view ids");
  auto* o_iters = app.add_option("--iters", iters, "Training iterations");
  auto* o_obj = app.add_option("--object-id", object_id, "Single object for render / extract-mesh");
  auto* o_res = app.add_option("--resolution", resolution, "Marching cubes resolution");
  app.add_option("--set", spec.overrides, "Override a config key (key=value)")->allow_extra_args(false);

  for (const char* name : {"generate", "train", "render", "extract-mesh", "evaluate"}) app.add_subcommand(name)->fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  spec.subcommand = app.get_subcommands().front()->get_name();
  if (*o_seed) spec.seed = seed;
  if (*o_views) spec.views = views;
  if (*o_iters) spec.iters = iters;
  if (*o_obj) spec.object_id = object_id;
  if (*o_res) spec.resolution = resolution;
  return run(spec);
}

}  // namespace objsdf::cli
