#include "mmtl/runconfig.hpp"

#include <set>

#include <nlohmann/json.hpp>

#include "mmtl/fsio.hpp"

namespace mmtl {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::string& where,
                    const std::set<std::string>& known) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown(j, "top level", {"seed", "out_dir", "world", "train", "trace", "edit"});

  RunConfig c;
  read(j, "seed", c.seed);
  read(j, "out_dir", c.out_dir);

  if (j.contains("world")) {
    const json& w = j.at("world");
    if (!w.is_object()) throw ConfigError("config: 'world' must be an object");
    reject_unknown(w, "world", {"n_entities", "n_relations", "image_mode", "sigma_img"});
    read(w, "n_entities", c.n_entities);
    read(w, "n_relations", c.n_relations);
    read(w, "image_mode", c.image_mode);
    read(w, "sigma_img", c.sigma_img);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    if (!t.is_object()) throw ConfigError("config: 'train' must be an object");
    reject_unknown(t, "train",
                   {"epochs", "batch_size", "lr", "lr_min_frac", "warmup_steps",
                    "weight_decay", "target_accuracy", "eval_every", "n_layers", "n_heads",
                    "d_model", "d_mlp", "patch_grid", "patch_dim", "d_vis", "max_text_len",
                    "model_seed"});
    read(t, "epochs", c.train.epochs);
    read(t, "batch_size", c.train.batch_size);
    read(t, "lr", c.train.lr);
    read(t, "lr_min_frac", c.train.lr_min_frac);
    read(t, "warmup_steps", c.train.warmup_steps);
    read(t, "weight_decay", c.train.weight_decay);
    read(t, "target_accuracy", c.train.target_accuracy);
    read(t, "eval_every", c.train.eval_every);
    read(t, "n_layers", c.n_layers);
    read(t, "n_heads", c.n_heads);
    read(t, "d_model", c.d_model);
    read(t, "d_mlp", c.d_mlp);
    read(t, "patch_grid", c.patch_grid);
    read(t, "patch_dim", c.patch_dim);
    read(t, "d_vis", c.d_vis);
    read(t, "max_text_len", c.max_text_len);
    read(t, "model_seed", c.model_seed);
  }

  if (j.contains("trace")) {
    const json& t = j.at("trace");
    if (!t.is_object()) throw ConfigError("config: 'trace' must be an object");
    reject_unknown(t, "trace", {"site", "window", "corruption", "n_facts"});
    std::string site = site_name(c.trace_site);
    read(t, "site", site);
    try {
      c.trace_site = site_from_name(site);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    read(t, "window", c.trace_window);
    read(t, "corruption", c.trace_corruption);
    read(t, "n_facts", c.trace_facts);
  }

  if (j.contains("edit")) {
    const json& t = j.at("edit");
    if (!t.is_object()) throw ConfigError("config: 'edit' must be an object");
    reject_unknown(t, "edit", {"layer", "lambda", "n_fix", "n_longtail", "n_unrelated"});
    read(t, "layer", c.edit_layer);
    read(t, "lambda", c.edit_lambda);
    read(t, "n_fix", c.edit_fix);
    read(t, "n_longtail", c.edit_longtail);
    read(t, "n_unrelated", c.edit_unrelated);
  }

  c.validate();
  return c;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return parse(text);
}

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
  if (n_entities < 4) throw ConfigError("config: n_entities must be >= 4");
  if (n_relations < 1) throw ConfigError("config: n_relations must be >= 1");
  if (image_mode != "localized" && image_mode != "distributed")
    throw ConfigError("config: image_mode must be localized or distributed");
  if (sigma_img < 0.0) throw ConfigError("config: sigma_img must be >= 0");
  try {
    train.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (trace_site == Site::embedding)
    throw ConfigError("config: trace site must be mlp, attn, or hidden");
  if (trace_window < 1) throw ConfigError("config: trace window must be >= 1");
  if (trace_corruption != "replace" && trace_corruption != "gaussian")
    throw ConfigError("config: corruption must be replace or gaussian");
  if (trace_facts < 1) throw ConfigError("config: trace n_facts must be >= 1");
  if (edit_layer < 0 || edit_layer >= n_layers)
    throw ConfigError("config: edit layer out of range");
  if (edit_lambda <= 0.0) throw ConfigError("config: edit lambda must be > 0");
  if (edit_fix < 0 || edit_longtail < 0 || edit_unrelated < 1)
    throw ConfigError("config: edit counts out of range");
}

std::string RunConfig::resolved_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["world"] = {{"n_entities", n_entities},
                {"n_relations", n_relations},
                {"image_mode", image_mode},
                {"sigma_img", sigma_img}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"lr_min_frac", train.lr_min_frac},
                {"warmup_steps", train.warmup_steps},
                {"weight_decay", train.weight_decay},
                {"target_accuracy", train.target_accuracy},
                {"eval_every", train.eval_every},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"d_model", d_model},
                {"d_mlp", d_mlp},
                {"patch_grid", patch_grid},
                {"patch_dim", patch_dim},
                {"d_vis", d_vis},
                {"max_text_len", max_text_len},
                {"model_seed", model_seed}};
  j["trace"] = {{"site", site_name(trace_site)},
                {"window", trace_window},
                {"corruption", trace_corruption},
                {"n_facts", trace_facts}};
  j["edit"] = {{"layer", edit_layer},
               {"lambda", edit_lambda},
               {"n_fix", edit_fix},
               {"n_longtail", edit_longtail},
               {"n_unrelated", edit_unrelated}};
  return j.dump(2) + "\n";
}

ModelConfig RunConfig::model_config(const World& world) const {
  ModelConfig mc;
  mc.n_layers = n_layers;
  mc.n_heads = n_heads;
  mc.d_model = d_model;
  mc.d_mlp = d_mlp;
  mc.vocab_size = world.vocab_size();
  mc.patch_grid = patch_grid;
  mc.patch_dim = patch_dim;
  mc.d_vis = d_vis;
  mc.max_text_len = max_text_len;
  mc.eos_token = world.eos_token();
  mc.seed = model_seed;
  mc.validate();
  return mc;
}

}  // namespace mmtl
