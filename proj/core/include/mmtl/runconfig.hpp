#pragma once

#include <stdexcept>
#include <string>

#include "mmtl/model.hpp"
#include "mmtl/trainer.hpp"

namespace mmtl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One run's full configuration: a global seed, an output directory, and
/// world/train/trace/edit sections. Parsing is strict — unknown keys are an
/// error, so typos fail loudly instead of silently using defaults.
struct RunConfig {
  uint64_t seed = 7;
  std::string out_dir = "out";

  // world
  int n_entities = 50;
  int n_relations = 4;
  std::string image_mode = "localized";
  double sigma_img = 0.05;

  // train (optimizer schedule lives in `train`; model shape fields too)
  TrainConfig train;
  int n_layers = 8;
  int n_heads = 4;
  int d_model = 128;
  int d_mlp = 512;
  int patch_grid = 4;
  int patch_dim = 16;
  int d_vis = 32;
  int max_text_len = 16;
  uint64_t model_seed = 17;

  // trace
  Site trace_site = Site::mlp_out;
  int trace_window = 3;
  std::string trace_corruption = "replace";  // replace | gaussian
  int trace_facts = 24;

  // edit
  int edit_layer = 2;
  double edit_lambda = 0.01;
  int edit_fix = 8;
  int edit_longtail = 8;
  int edit_unrelated = 16;

  static RunConfig parse(const std::string& json_text);
  static RunConfig parse_file(const std::string& path);

  /// Every field written out explicitly; identical configs dump identically.
  std::string resolved_json() const;

  /// The model shape this config trains (vocab/eos filled from the world).
  ModelConfig model_config(const World& world) const;

  void validate() const;
};

}  // namespace mmtl
