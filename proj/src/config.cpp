// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include "blendfields/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "blendfields/parallel.hpp"

namespace blendfields {

using nlohmann::json;

std::string to_string(ModelVariant v) { return v == ModelVariant::kBlendFields ? "blendfields" : "template"; }

int RunConfig::resolved_workers() const { return workers > 0 ? workers : default_worker_count(); }

namespace {

ModelVariant variant_from_string(const std::string& s) {
  if (s == "blendfields") return ModelVariant::kBlendFields;
  if (s == "template") return ModelVariant::kTemplate;
  throw ConfigError("unknown model variant: " + s);
}

json vec3(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  return json{
      {"seed", c.seed},
      {"workers", c.workers},
      {"scene", json::parse(scene_to_json(c.scene))},
      {"grid",
       {{"resolution", {c.grid.nx, c.grid.ny, c.grid.nz}}, {"padding", c.grid_padding}, {"init_noise", c.init_noise}}},
      {"render",
       {{"n_inference", c.render.n_inference},
        {"background", vec3(c.render.background)},
        {"t_near", c.render.bounds.t_near},
        {"t_far", c.render.bounds.t_far},
        {"jitter_inference", c.render.jitter_inference}}},
      {"blend",
       {{"tau", c.blend.tau},
        {"neighborhood_size", c.neighborhood_size},
        {"lambda_diff", c.blend.lambda_diff},
        {"smoothing_iters", c.blend.smoothing_iters}}},
      {"train",
       {{"batch_rays", t.batch_rays},
        {"n_coarse", t.n_coarse},
        {"n_importance", t.n_importance},
        {"lr", t.lr},
        {"lr_decay_factor", t.lr_decay_factor},
        {"lr_decay_steps", t.lr_decay_steps},
        {"lr_staircase", t.lr_staircase},
        {"total_steps", t.total_steps},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"sparsity_weight", t.sparsity_weight},
        {"residual_lr_scale", t.residual_lr_scale},
        {"variant", to_string(c.variant)},
        {"frames", c.train_frames},
        {"log_every", c.log_every},
        {"checkpoint_every", c.checkpoint_every}}},
      {"paths", {{"data", c.data_dir}, {"out", c.out_dir}}},
  };
}

// Every key of `user` must exist in `schema` with a compatible type.
void check_keys(const json& user, const json& schema, const std::string& where) {
  if (!user.is_object()) throw ConfigError("expected an object at '" + where + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    const json& ref = schema.at(it.key());
    if (ref.is_object()) {
      check_keys(it.value(), ref, path);
    } else if (ref.is_number() != it.value().is_number() || ref.is_boolean() != it.value().is_boolean() ||
               ref.is_string() != it.value().is_string() || ref.is_array() != it.value().is_array()) {
      throw ConfigError("wrong type for config key '" + path + "'");
    }
  }
}

Vec3 read_vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + " needs three numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

RunConfig from_json(const json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.workers = j.at("workers").get<int>();
  c.scene = dataset_spec_from_json(j.at("scene").dump());
  const json& g = j.at("grid");
  const auto res = g.at("resolution").get<std::vector<int>>();
  if (res.size() != 3) throw ConfigError("grid.resolution needs three integers");
  c.grid = GridShape{res[0], res[1], res[2]};
  c.grid_padding = g.at("padding").get<double>();
  c.init_noise = g.at("init_noise").get<double>();
  const json& r = j.at("render");
  c.render.n_inference = r.at("n_inference").get<int>();
  c.render.background = read_vec3(r.at("background"), "render.background");
  c.render.bounds.t_near = r.at("t_near").get<double>();
  c.render.bounds.t_far = r.at("t_far").get<double>();
  c.render.jitter_inference = r.at("jitter_inference").get<bool>();
  const json& b = j.at("blend");
  c.blend.tau = b.at("tau").get<double>();
  c.neighborhood_size = b.at("neighborhood_size").get<std::size_t>();
  c.blend.lambda_diff = b.at("lambda_diff").get<double>();
  c.blend.smoothing_iters = b.at("smoothing_iters").get<int>();
  const json& t = j.at("train");
  c.train.batch_rays = t.at("batch_rays").get<int>();
  c.train.n_coarse = t.at("n_coarse").get<int>();
  c.train.n_importance = t.at("n_importance").get<int>();
  c.train.lr = t.at("lr").get<double>();
  c.train.lr_decay_factor = t.at("lr_decay_factor").get<double>();
  c.train.lr_decay_steps = t.at("lr_decay_steps").get<int>();
  c.train.lr_staircase = t.at("lr_staircase").get<bool>();
  c.train.total_steps = t.at("total_steps").get<int>();
  c.train.beta1 = t.at("beta1").get<double>();
  c.train.beta2 = t.at("beta2").get<double>();
  c.train.eps = t.at("eps").get<double>();
  c.train.sparsity_weight = t.at("sparsity_weight").get<double>();
  c.train.residual_lr_scale = t.at("residual_lr_scale").get<double>();
  c.variant = variant_from_string(t.at("variant").get<std::string>());
  c.train_frames = t.at("frames").get<std::vector<double>>();
  c.log_every = t.at("log_every").get<int>();
  c.checkpoint_every = t.at("checkpoint_every").get<int>();
  const json& p = j.at("paths");
  c.data_dir = p.at("data").get<std::string>();
  c.out_dir = p.at("out").get<std::string>();
  c.train.seed = c.seed;
  c.render.seed = c.seed;
  c.render.n_coarse = c.train.n_coarse;
  c.render.n_importance = c.train.n_importance;

  if (c.grid.nx < 2 || c.grid.ny < 2 || c.grid.nz < 2) throw ConfigError("grid.resolution entries must be >= 2");
  if (c.render.n_inference < 1) throw ConfigError("render.n_inference must be positive");
  if (!(c.render.bounds.t_far > c.render.bounds.t_near)) throw ConfigError("render.t_far must exceed t_near");
  if (!(c.blend.tau > 0.0) || !(c.blend.lambda_diff >= 0.0) || c.blend.smoothing_iters < 0)
    throw ConfigError("invalid blend parameters");
  if (c.neighborhood_size < 1) throw ConfigError("blend.neighborhood_size must be positive");
  if (c.log_every < 1 || c.checkpoint_every < 0) throw ConfigError("invalid logging cadence");
  validate(c.train);
  if (!(c.train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  return c;
}

RunConfig parse_document(const json& user) {
  const json schema = to_json(RunConfig{});
  check_keys(user, schema, "");
  json merged = schema;
  merged.merge_patch(user);
  try {
    return from_json(merged);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("invalid config value: ") + ex.what());
  }
}

}  // namespace

std::string default_config_json() { return to_json(RunConfig{}).dump(2) + "\n"; }

std::string config_to_json(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig parse_config(const std::string& text) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config is not valid JSON: ") + ex.what());
  }
  return parse_document(user);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& assignments) {
  json doc = to_json(base);
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + a);
    const std::string key = a.substr(0, eq);
    const std::string text = a.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
      parts.push_back(rest.substr(0, pos));
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    check_keys(patch, doc, "");
    doc.merge_patch(patch);
  }
  return parse_document(doc);
}

}  // namespace blendfields
