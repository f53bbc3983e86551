#include "octloc/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include <json.hpp>

namespace octloc {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

const char* coord_name(CoordMode m) {
  return m == CoordMode::cartesian ? "cartesian" : "cylindrical";
}

CoordMode coord_from(const std::string& s) {
  if (s == "cartesian") return CoordMode::cartesian;
  if (s == "cylindrical") return CoordMode::cylindrical;
  throw ConfigError("unknown coord mode \"" + s + "\"");
}

const char* pooling_name(PoolingMode m) {
  switch (m) {
    case PoolingMode::pyramid_attn: return "pyramid-attn";
    case PoolingMode::gem: return "gem";
    case PoolingMode::pyramid_gem: return "pyramid-gem";
  }
  return "pyramid-attn";
}

PoolingMode pooling_from(const std::string& s) {
  if (s == "pyramid-attn") return PoolingMode::pyramid_attn;
  if (s == "gem") return PoolingMode::gem;
  if (s == "pyramid-gem") return PoolingMode::pyramid_gem;
  throw ConfigError("unknown pooling mode \"" + s + "\"");
}

const char* adape_name(AdapeStats m) {
  return m == AdapeStats::centroids ? "centroids" : "points";
}

AdapeStats adape_from(const std::string& s) {
  if (s == "centroids") return AdapeStats::centroids;
  if (s == "points") return AdapeStats::points;
  throw ConfigError("unknown adape stats mode \"" + s + "\"");
}

const char* profile_name(SensorProfile p) {
  return p == SensorProfile::ground ? "ground" : "aerial";
}

SensorProfile profile_from(const std::string& s) {
  if (s == "ground") return SensorProfile::ground;
  if (s == "aerial") return SensorProfile::aerial;
  throw ConfigError("unknown sensor profile \"" + s + "\"");
}

void parse_model(const json& j, ModelConfig& m) {
  check_keys(j, "model",
             {"depth", "levels", "blocks", "channels", "window", "heads",
              "stem_blocks", "pooled_tokens", "mixer_tokens",
              "mixer_channels", "descriptor_dim", "fuser_expansion",
              "relay_tokens", "coord_mode", "pooling", "adape_stats"});
  get_if(j, "depth", m.depth);
  get_if(j, "levels", m.levels);
  get_if(j, "blocks", m.blocks);
  get_if(j, "channels", m.channels);
  get_if(j, "window", m.window);
  get_if(j, "heads", m.heads);
  get_if(j, "stem_blocks", m.stem_blocks);
  get_if(j, "pooled_tokens", m.pooled_tokens);
  get_if(j, "mixer_tokens", m.mixer_tokens);
  get_if(j, "mixer_channels", m.mixer_channels);
  get_if(j, "descriptor_dim", m.descriptor_dim);
  get_if(j, "fuser_expansion", m.fuser_expansion);
  get_if(j, "relay_tokens", m.relay_tokens);
  if (j.contains("coord_mode"))
    m.coord_mode = coord_from(j.at("coord_mode").get<std::string>());
  if (j.contains("pooling"))
    m.pooling = pooling_from(j.at("pooling").get<std::string>());
  if (j.contains("adape_stats"))
    m.adape_stats = adape_from(j.at("adape_stats").get<std::string>());
}

json emit_model(const ModelConfig& m) {
  return json{{"depth", m.depth},
              {"levels", m.levels},
              {"blocks", m.blocks},
              {"channels", m.channels},
              {"window", m.window},
              {"heads", m.heads},
              {"stem_blocks", m.stem_blocks},
              {"pooled_tokens", m.pooled_tokens},
              {"mixer_tokens", m.mixer_tokens},
              {"mixer_channels", m.mixer_channels},
              {"descriptor_dim", m.descriptor_dim},
              {"fuser_expansion", m.fuser_expansion},
              {"relay_tokens", m.relay_tokens},
              {"coord_mode", coord_name(m.coord_mode)},
              {"pooling", pooling_name(m.pooling)},
              {"adape_stats", adape_name(m.adape_stats)}};
}

void parse_region(const json& j, BoundingRegion& r) {
  check_keys(j, "region", {"mode", "lo", "hi", "rho_max", "z_min", "z_max"});
  if (j.contains("mode"))
    r.mode = coord_from(j.at("mode").get<std::string>());
  get_if(j, "lo", r.lo);
  get_if(j, "hi", r.hi);
  get_if(j, "rho_max", r.rho_max);
  get_if(j, "z_min", r.z_min);
  get_if(j, "z_max", r.z_max);
}

json emit_region(const BoundingRegion& r) {
  return json{{"mode", coord_name(r.mode)}, {"lo", r.lo},
              {"hi", r.hi},                 {"rho_max", r.rho_max},
              {"z_min", r.z_min},           {"z_max", r.z_max}};
}

void parse_world(const json& j, WorldConfig& w) {
  check_keys(j, "world",
             {"locations", "views_per_location", "grid_cols", "spacing",
              "view_offset", "landmarks", "landmark_spread", "ring_radii",
              "ring_points", "points_per_landmark", "noise_sigma"});
  get_if(j, "locations", w.locations);
  get_if(j, "views_per_location", w.views_per_location);
  get_if(j, "grid_cols", w.grid_cols);
  get_if(j, "spacing", w.spacing);
  get_if(j, "view_offset", w.view_offset);
  get_if(j, "landmarks", w.landmarks);
  get_if(j, "landmark_spread", w.landmark_spread);
  get_if(j, "ring_radii", w.ring_radii);
  get_if(j, "ring_points", w.ring_points);
  get_if(j, "points_per_landmark", w.points_per_landmark);
  get_if(j, "noise_sigma", w.noise_sigma);
}

json emit_world(const WorldConfig& w) {
  return json{{"locations", w.locations},
              {"views_per_location", w.views_per_location},
              {"grid_cols", w.grid_cols},
              {"spacing", w.spacing},
              {"view_offset", w.view_offset},
              {"landmarks", w.landmarks},
              {"landmark_spread", w.landmark_spread},
              {"ring_radii", w.ring_radii},
              {"ring_points", w.ring_points},
              {"points_per_landmark", w.points_per_landmark},
              {"noise_sigma", w.noise_sigma}};
}

void parse_augment(const json& j, AugmentConfig& a) {
  check_keys(j, "training.augment",
             {"flip_x", "flip_y", "rotate_z", "rotate_max_deg",
              "translate_max", "jitter_sigma", "block_removal", "block_size"});
  get_if(j, "flip_x", a.flip_x);
  get_if(j, "flip_y", a.flip_y);
  get_if(j, "rotate_z", a.rotate_z);
  get_if(j, "rotate_max_deg", a.rotate_max_deg);
  get_if(j, "translate_max", a.translate_max);
  get_if(j, "jitter_sigma", a.jitter_sigma);
  get_if(j, "block_removal", a.block_removal);
  get_if(j, "block_size", a.block_size);
}

json emit_augment(const AugmentConfig& a) {
  return json{{"flip_x", a.flip_x},
              {"flip_y", a.flip_y},
              {"rotate_z", a.rotate_z},
              {"rotate_max_deg", a.rotate_max_deg},
              {"translate_max", a.translate_max},
              {"jitter_sigma", a.jitter_sigma},
              {"block_removal", a.block_removal},
              {"block_size", a.block_size}};
}

void parse_adam(const json& j, AdamConfig& a) {
  check_keys(j, "training.adam",
             {"lr", "beta1", "beta2", "eps", "weight_decay"});
  get_if(j, "lr", a.lr);
  get_if(j, "beta1", a.beta1);
  get_if(j, "beta2", a.beta2);
  get_if(j, "eps", a.eps);
  get_if(j, "weight_decay", a.weight_decay);
}

json emit_adam(const AdamConfig& a) {
  return json{{"lr", a.lr},
              {"beta1", a.beta1},
              {"beta2", a.beta2},
              {"eps", a.eps},
              {"weight_decay", a.weight_decay}};
}

void parse_training(const json& j, TrainConfig& t) {
  check_keys(j, "training",
             {"steps", "adam", "lr_decay_step", "lr_decay_factor", "margin",
              "positive_radius", "negative_radius", "eval_radius",
              "eval_interval", "augment", "profile"});
  get_if(j, "steps", t.steps);
  if (j.contains("adam")) parse_adam(j.at("adam"), t.adam);
  get_if(j, "lr_decay_step", t.lr_decay_step);
  get_if(j, "lr_decay_factor", t.lr_decay_factor);
  get_if(j, "margin", t.margin);
  get_if(j, "positive_radius", t.positive_radius);
  get_if(j, "negative_radius", t.negative_radius);
  get_if(j, "eval_radius", t.eval_radius);
  get_if(j, "eval_interval", t.eval_interval);
  if (j.contains("augment")) parse_augment(j.at("augment"), t.augment);
  if (j.contains("profile"))
    t.profile = profile_from(j.at("profile").get<std::string>());
}

json emit_training(const TrainConfig& t) {
  return json{{"steps", t.steps},
              {"adam", emit_adam(t.adam)},
              {"lr_decay_step", t.lr_decay_step},
              {"lr_decay_factor", t.lr_decay_factor},
              {"margin", t.margin},
              {"positive_radius", t.positive_radius},
              {"negative_radius", t.negative_radius},
              {"eval_radius", t.eval_radius},
              {"eval_interval", t.eval_interval},
              {"augment", emit_augment(t.augment)},
              {"profile", profile_name(t.profile)}};
}

}  // namespace

void Config::validate() const {
  model.validate();
  region.validate();
  world.validate();
  training.validate();
}

Config Config::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Config cfg;
  try {
    check_keys(j, "config", {"seed", "model", "region", "world", "training"});
    get_if(j, "seed", cfg.seed);
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("region")) parse_region(j.at("region"), cfg.region);
    if (j.contains("world")) parse_world(j.at("world"), cfg.world);
    if (j.contains("training")) parse_training(j.at("training"), cfg.training);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  return cfg;
}

Config Config::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return from_json_text(os.str());
}

std::string Config::to_canonical_json() const {
  json j{{"seed", seed},
         {"model", emit_model(model)},
         {"region", emit_region(region)},
         {"world", emit_world(world)},
         {"training", emit_training(training)}};
  return j.dump(2) + "\n";
}

}  // namespace octloc
