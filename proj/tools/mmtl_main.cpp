// mmtl: synthetic multi-modal fact lab.
//
// Subcommands cover the full pipeline: `gen` a fact world, `train` a
// checkpoint on it, then `trace` (causal tracing grids), `attn` (attention
// contribution profiles), `detect` (correctness detector + confidence
// baseline), `edit` (closed-form W_proj rewrites), and `sweep` (edit efficacy
// per layer). Every command reads one JSON config (see configs/default.json),
// honors a few flag overrides, and writes deterministic artifacts plus its
// resolved config into the output directory.
//
// Exit codes: 0 ok, 2 malformed config/flags, 3 missing input artifact,
// 4 numerical failure, 1 other errors.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmtl/attnflow.hpp"
#include "mmtl/checkpoint.hpp"
#include "mmtl/editor.hpp"
#include "mmtl/fsio.hpp"
#include "mmtl/heatmap.hpp"
#include "mmtl/rng.hpp"
#include "mmtl/runconfig.hpp"
#include "mmtl/tracer.hpp"
#include "mmtl/trainer.hpp"
#include "mmtl/world.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace mmtl;

namespace {

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// MMTL_THREADS caps worker threads. All current kernels are single-threaded,
// so this only validates and records the setting; determinism holds at any
// value.
int read_thread_env() {
  const char* env = std::getenv("MMTL_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1)
    throw ConfigError("MMTL_THREADS must be a positive integer");
  return static_cast<int>(v);
}

World load_world(const RunConfig& cfg) {
  const fs::path p = fs::path(cfg.out_dir) / "world.json";
  if (!fs::exists(p))
    throw MissingInput("missing " + p.string() + " — run `mmtl gen` first");
  return World::load(p.string());
}

MultiModalLM load_model(const RunConfig& cfg) {
  const fs::path p = fs::path(cfg.out_dir) / "model.ckpt";
  if (!fs::exists(p))
    throw MissingInput("missing " + p.string() + " — run `mmtl train` first");
  return load_checkpoint(p.string());
}

void write_resolved_config(const RunConfig& cfg) {
  atomic_write_file((fs::path(cfg.out_dir) / "config.resolved.json").string(),
                    cfg.resolved_json());
}

std::vector<int> trace_fact_ids(const World& world, int n) {
  std::vector<int> ids(world.eval_split.begin(), world.eval_split.end());
  if (static_cast<int>(ids.size()) > n) ids.resize(n);
  return ids;
}

// ---------------------------------------------------------------- commands

void cmd_gen(const RunConfig& cfg) {
  World w = World::generate(cfg.n_entities, cfg.n_relations, cfg.seed);
  w.image.mode = cfg.image_mode;
  w.image.sigma_img = cfg.sigma_img;
  w.image.patch_grid = cfg.patch_grid;
  w.image.patch_dim = cfg.patch_dim;
  w.save((fs::path(cfg.out_dir) / "world.json").string());
  write_resolved_config(cfg);
  std::cout << "world: " << w.entities.size() << " entities, " << w.facts.size()
            << " facts (" << w.train_split.size() << " train / " << w.eval_split.size()
            << " eval / " << w.longtail_split.size() << " longtail), vocab "
            << w.vocab_size() << "\n";
}

void cmd_train(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model(cfg.model_config(w));
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 11);
  tc.curve_csv = (fs::path(cfg.out_dir) / "train_curve.csv").string();
  TrainReport rep = train(model, w, tc);
  save_checkpoint(model, (fs::path(cfg.out_dir) / "model.ckpt").string());

  ordered_json j;
  j["epochs_run"] = rep.epochs_run;
  j["steps"] = rep.steps;
  j["final_loss"] = rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back();
  j["final_train_accuracy"] = rep.final_train_accuracy;
  j["final_multi_accuracy"] = rep.final_multi_accuracy;
  atomic_write_file((fs::path(cfg.out_dir) / "train_report.json").string(),
                    j.dump(2) + "\n");
  write_resolved_config(cfg);
  std::cout << "trained " << rep.epochs_run << " epochs (" << rep.steps
            << " steps), train accuracy " << rep.final_train_accuracy
            << ", award accuracy " << rep.final_multi_accuracy << "\n";
}

void cmd_trace(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model = load_model(cfg);
  const std::vector<int> ids = trace_fact_ids(w, cfg.trace_facts);
  if (ids.empty()) throw std::runtime_error("trace: world has no eval facts");

  std::vector<TraceGrid> grids;
  bool full_sub_ok = true;
  for (size_t i = 0; i < ids.size(); ++i) {
    PromptSpec p = eval_prompt(w, w.fact(ids[i]), mix_seed(cfg.seed, 21, i), false);
    CorruptionSpec spec =
        cfg.trace_corruption == "replace"
            ? make_token_replace(w, p, CorruptionSpec::Target::visual_constraint,
                                 mix_seed(cfg.seed, 22, i))
            : make_gaussian(model, mix_seed(cfg.seed, 22, i));
    CorruptionResult corr = build_corrupted(p, spec, w);
    if (i == 0) full_sub_ok = full_substitution_matches(model, p, corr);
    TraceGrid g = run_trace(model, p, corr, cfg.trace_site, cfg.trace_window);
    const std::string stem = (fs::path(cfg.out_dir) / ("trace_" + std::to_string(i))).string();
    atomic_write_file(stem + ".json", grid_header_json(g));
    atomic_write_file(stem + ".csv", grid_csv(g));
    grids.push_back(std::move(g));
  }

  TraceSummary sum = summarize(grids);
  atomic_write_file((fs::path(cfg.out_dir) / "trace_summary.csv").string(),
                    summary_csv(sum));
  HeatmapOptions opt;
  opt.title = "IEE, site=" + std::string(site_name(cfg.trace_site)) +
              " W=" + std::to_string(cfg.trace_window);
  emit_heatmap(grids[0].iee, (fs::path(cfg.out_dir) / "trace_0.svg").string(), opt);

  ordered_json j;
  j["n_grids"] = sum.n_grids;
  j["site"] = site_name(sum.site);
  j["window"] = sum.window;
  j["corruption"] = cfg.trace_corruption;
  j["full_substitution_ok"] = full_sub_ok;
  j["argmax_layer_constraint"] = sum.argmax_layer_constraint;
  j["argmax_layer_last"] = sum.argmax_layer_last;
  j["argmax_layer_last_visual"] = sum.argmax_layer_last_visual;
  double mean_pc = 0.0, mean_px = 0.0;
  for (const TraceGrid& g : grids) {
    mean_pc += g.p_clean;
    mean_px += g.p_corr;
  }
  j["mean_p_clean"] = mean_pc / grids.size();
  j["mean_p_corr"] = mean_px / grids.size();
  atomic_write_file((fs::path(cfg.out_dir) / "trace_report.json").string(),
                    j.dump(2) + "\n");
  write_resolved_config(cfg);
  if (!full_sub_ok)
    throw NumericError("trace: full-substitution diagnostic failed to reproduce P_clean");
  std::cout << "traced " << grids.size() << " facts; constraint-position IEE peaks at layer "
            << sum.argmax_layer_constraint << "\n";
}

void cmd_attn(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model = load_model(cfg);
  const std::vector<int> ids = trace_fact_ids(w, cfg.trace_facts);
  if (ids.empty()) throw std::runtime_error("attn: world has no eval facts");

  const int n = model.config().n_visual();
  const int L = model.config().n_layers;
  std::vector<std::vector<double>> vis(n, std::vector<double>(L, 0.0));
  std::vector<double> c2l(L, 0.0);
  for (size_t i = 0; i < ids.size(); ++i) {
    PromptSpec p = eval_prompt(w, w.fact(ids[i]), mix_seed(cfg.seed, 21, i), false);
    auto prof = visual_to_constraint_profile(model, p);
    for (int jj = 0; jj < n; ++jj)
      for (int l = 0; l < L; ++l) vis[jj][l] += prof[jj][l];
    auto cp = constraint_to_last_profile(model, p);
    for (int l = 0; l < L; ++l) c2l[l] += cp[l];
  }
  for (auto& row : vis)
    for (double& v : row) v /= static_cast<double>(ids.size());
  for (double& v : c2l) v /= static_cast<double>(ids.size());

  // Fraction of layer-0 visual->constraint mass on signature patches.
  double total0 = 0.0, sig0 = 0.0;
  for (int jj = 0; jj < n; ++jj) {
    total0 += vis[jj][0];
    if (jj >= w.image.first_signature_patch()) sig0 += vis[jj][0];
  }

  std::string csv = "patch";
  for (int l = 0; l < L; ++l) csv += ",L" + std::to_string(l);
  csv += "\n";
  for (int jj = 0; jj < n; ++jj) {
    csv += std::to_string(jj);
    for (int l = 0; l < L; ++l) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), ",%.17g", vis[jj][l]);
      csv += buf;
    }
    csv += "\n";
  }
  atomic_write_file((fs::path(cfg.out_dir) / "attn_visual_profile.csv").string(), csv);
  HeatmapOptions opt;
  opt.title = "mean ||a|| visual->constraint";
  opt.y_label = "patch";
  emit_heatmap(vis, (fs::path(cfg.out_dir) / "attn_visual_profile.svg").string(), opt);

  std::string csv2 = "layer,mean_norm\n";
  for (int l = 0; l < L; ++l) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%d,%.17g\n", l, c2l[l]);
    csv2 += buf;
  }
  atomic_write_file((fs::path(cfg.out_dir) / "attn_constraint_profile.csv").string(), csv2);

  ordered_json j;
  j["n_prompts"] = ids.size();
  j["layer0_signature_mass_fraction"] = total0 > 0.0 ? sig0 / total0 : 0.0;
  int arg = 0;
  for (int l = 1; l < L; ++l)
    if (c2l[l] > c2l[arg]) arg = l;
  j["argmax_constraint_to_last_layer"] = arg;
  atomic_write_file((fs::path(cfg.out_dir) / "attn_report.json").string(), j.dump(2) + "\n");
  write_resolved_config(cfg);
  std::cout << "layer-0 signature mass fraction: "
            << (total0 > 0.0 ? sig0 / total0 : 0.0) << "\n";
}

// Correct/incorrect prompt pool for the detector: eval facts rendered at an
// escalating image-noise ladder, labeled by greedy correctness.
void build_detector_pool(const World& w, const MultiModalLM& model, uint64_t seed,
                         std::vector<PromptSpec>& prompts, std::vector<int>& labels) {
  static constexpr double kNoiseScale[4] = {1.0, 4.0, 8.0, 12.0};
  World noisy = w;
  for (size_t i = 0; i < w.eval_split.size(); ++i) {
    const Fact& f = w.fact(w.eval_split[i]);
    PromptSpec p = eval_prompt(w, f, mix_seed(seed, 31, i), false);
    noisy.image.sigma_img = w.image.sigma_img * kNoiseScale[i % 4];
    p.image = noisy.render_image(f.entity, mix_seed(seed, 32, i));
    std::vector<int> got = model.generate_greedy(
        p, static_cast<int>(p.answer_tokens.size()) + 1);
    const int correct = got.size() >= p.answer_tokens.size() &&
                        std::equal(p.answer_tokens.begin(), p.answer_tokens.end(),
                                   got.begin());
    prompts.push_back(std::move(p));
    labels.push_back(correct);
  }
}

void cmd_detect(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model = load_model(cfg);

  std::vector<PromptSpec> pool;
  std::vector<int> labels;
  build_detector_pool(w, model, cfg.seed, pool, labels);

  std::vector<PromptSpec> val_p, held_p;
  std::vector<int> val_l, held_l;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (i % 2 == 0) {
      val_p.push_back(pool[i]);
      val_l.push_back(labels[i]);
    } else {
      held_p.push_back(pool[i]);
      held_l.push_back(labels[i]);
    }
  }

  DetectorModel det = fit_detector(model, val_p, val_l);
  std::vector<double> held_scores, conf_scores;
  for (const PromptSpec& p : held_p) {
    held_scores.push_back(det.score(constraint_to_last_profile(model, p)));
    conf_scores.push_back(confidence_baseline(model, p));
  }
  const double held_auc = auroc(held_scores, held_l);
  const double conf_auc = auroc(conf_scores, held_l);

  ordered_json j;
  j["layer_a"] = det.layer_a;
  j["layer_b"] = det.layer_b;
  j["threshold"] = det.threshold;
  j["validation_auroc"] = det.validation_auroc;
  j["heldout_auroc"] = held_auc;
  j["confidence_auroc"] = conf_auc;
  j["n_validation"] = val_p.size();
  j["n_heldout"] = held_p.size();
  int pos = 0;
  for (int l : labels) pos += l;
  j["n_correct"] = pos;
  j["n_incorrect"] = static_cast<int>(labels.size()) - pos;
  atomic_write_file((fs::path(cfg.out_dir) / "detector_report.json").string(),
                    j.dump(2) + "\n");
  write_resolved_config(cfg);
  std::cout << "detector layers (" << det.layer_a << "," << det.layer_b
            << "), held-out AUROC " << held_auc << ", confidence AUROC " << conf_auc
            << "\n";
}

// A counterfactual rewrite for a trained fact (fix) or the true value for a
// longtail fact (insertion), with paraphrases and unrelated prompts attached.
EditRequest build_edit_request(const World& w, const RunConfig& cfg, const Fact& f,
                               size_t salt_index, bool insertion) {
  EditRequest req;
  req.prompt = eval_prompt(w, f, mix_seed(cfg.seed, 41, salt_index), false);
  if (insertion) {
    req.target_answer = {f.value_token};
  } else {
    const auto& pool = w.relations.at(f.relation).value_tokens;
    size_t idx = 0;
    while (idx < pool.size() && pool[idx] != f.value_token) ++idx;
    req.target_answer = {pool[(idx + 1) % pool.size()]};
  }
  req.layer = cfg.edit_layer;
  req.lambda = cfg.edit_lambda;
  req.paraphrases = w.paraphrases(req.prompt);
  for (int fid : w.eval_split) {
    if (static_cast<int>(req.unrelated.size()) >= cfg.edit_unrelated) break;
    const Fact& other = w.fact(fid);
    if (other.entity == f.entity) continue;
    req.unrelated.push_back(eval_prompt(w, other, mix_seed(cfg.seed, 42, fid), false));
  }
  return req;
}

ordered_json edit_result_json(const World& w, const Fact& f, const EditRequest& req,
                              const EditResult& r) {
  ordered_json j;
  j["entity"] = w.entities.at(f.entity).name;
  j["relation"] = w.relations.at(f.relation).name;
  j["target"] = w.word(req.target_answer[0]);
  j["pre_edit_prob"] = r.pre_edit_prob;
  j["efficacy"] = r.efficacy;
  j["generalization"] = r.generalization;
  j["specificity"] = r.specificity;
  j["specificity_pre"] = r.specificity_pre;
  j["weight_change_norm"] = r.weight_change_norm;
  j["value_opt_steps"] = r.value_opt_steps;
  j["value_opt_loss"] = r.value_opt_loss;
  return j;
}

void cmd_edit(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model = load_model(cfg);

  ordered_json fixes = ordered_json::array();
  ordered_json inserts = ordered_json::array();
  double fix_eff = 0.0, ins_eff = 0.0;
  bool saved = false;
  int n_fix = 0, n_ins = 0;

  for (int i = 0; i < cfg.edit_fix && i < static_cast<int>(w.train_split.size()); ++i) {
    const Fact& f = w.fact(w.train_split[i]);
    EditRequest req = build_edit_request(w, cfg, f, i, /*insertion=*/false);
    auto [edited, res] = apply_edit(model, req);
    if (!saved) {
      save_checkpoint(edited, (fs::path(cfg.out_dir) / "edited.ckpt").string());
      saved = true;
    }
    fixes.push_back(edit_result_json(w, f, req, res));
    fix_eff += res.efficacy;
    ++n_fix;
  }
  for (int i = 0; i < cfg.edit_longtail && i < static_cast<int>(w.longtail_split.size());
       ++i) {
    const Fact& f = w.fact(w.longtail_split[i]);
    EditRequest req = build_edit_request(w, cfg, f, 100 + i, /*insertion=*/true);
    auto [edited, res] = apply_edit(model, req);
    inserts.push_back(edit_result_json(w, f, req, res));
    ins_eff += res.efficacy;
    ++n_ins;
  }

  ordered_json j;
  j["layer"] = cfg.edit_layer;
  j["lambda"] = cfg.edit_lambda;
  j["fix_requests"] = fixes;
  j["longtail_requests"] = inserts;
  j["mean_fix_efficacy"] = n_fix ? fix_eff / n_fix : 0.0;
  j["mean_longtail_efficacy"] = n_ins ? ins_eff / n_ins : 0.0;
  atomic_write_file((fs::path(cfg.out_dir) / "edit_report.json").string(), j.dump(2) + "\n");
  write_resolved_config(cfg);
  std::cout << "edited " << n_fix << " fix + " << n_ins << " longtail requests; mean fix"
            << " efficacy " << (n_fix ? fix_eff / n_fix : 0.0) << "\n";
}

void cmd_sweep(const RunConfig& cfg) {
  World w = load_world(cfg);
  MultiModalLM model = load_model(cfg);

  std::vector<EditRequest> reqs;
  for (int i = 0; i < cfg.edit_fix && i < static_cast<int>(w.train_split.size()); ++i)
    reqs.push_back(build_edit_request(w, cfg, w.fact(w.train_split[i]), i, false));
  if (reqs.empty()) throw std::runtime_error("sweep: no edit requests");

  std::vector<int> layers(model.config().n_layers);
  for (size_t i = 0; i < layers.size(); ++i) layers[i] = static_cast<int>(i);
  std::vector<double> eff = layer_sweep(model, reqs, layers);

  std::string csv = "layer,mean_efficacy\n";
  for (size_t i = 0; i < eff.size(); ++i) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, eff[i]);
    csv += buf;
  }
  atomic_write_file((fs::path(cfg.out_dir) / "sweep.csv").string(), csv);
  write_resolved_config(cfg);
  int arg = 0;
  for (size_t i = 1; i < eff.size(); ++i)
    if (eff[i] > eff[arg]) arg = static_cast<int>(i);
  std::cout << "best edit layer " << arg << " (mean efficacy " << eff[arg] << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mmtl — a desk-scale lab for locating and editing multi-modal facts.\n"
      "Environment: MMTL_THREADS caps worker threads (default 1; the current\n"
      "kernels are single-threaded, results are identical at any setting)."};
  app.require_subcommand(1);
  app.fallthrough();  // accept global options after the subcommand name too

  std::string config_path, out_override, site_override, corruption_override;
  uint64_t seed_override = 0;
  int window_override = 0, layer_override = -1;
  double lambda_override = 0.0;
  app.add_option("--config", config_path, "Run configuration JSON");
  auto* seed_opt = app.add_option("--seed", seed_override, "Override the global seed");
  auto* out_opt = app.add_option("--out", out_override, "Override the output directory");
  auto* site_opt =
      app.add_option("--site", site_override, "Trace site: mlp, attn, or hidden");
  auto* window_opt = app.add_option("--window", window_override, "Trace window size");
  auto* corr_opt = app.add_option("--corruption", corruption_override,
                                  "Corruption strategy: replace or gaussian");
  auto* layer_opt = app.add_option("--layer", layer_override, "Edit layer");
  auto* lambda_opt = app.add_option("--lambda", lambda_override, "Edit regularizer");

  app.add_subcommand("gen", "Generate the synthetic fact world");
  app.add_subcommand("train", "Train a checkpoint on the generated world");
  app.add_subcommand("trace", "Causal tracing grids over eval facts");
  app.add_subcommand("attn", "Attention contribution profiles");
  app.add_subcommand("detect", "Fit and evaluate the correctness detector");
  app.add_subcommand("edit", "Closed-form fact edits and metrics");
  app.add_subcommand("sweep", "Edit efficacy per layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    read_thread_env();
    RunConfig cfg =
        config_path.empty() ? RunConfig{} : RunConfig::parse_file(config_path);
    if (seed_opt->count()) cfg.seed = seed_override;
    if (out_opt->count()) cfg.out_dir = out_override;
    if (site_opt->count()) cfg.trace_site = site_from_name(site_override);
    if (window_opt->count()) cfg.trace_window = window_override;
    if (corr_opt->count()) cfg.trace_corruption = corruption_override;
    if (layer_opt->count()) cfg.edit_layer = layer_override;
    if (lambda_opt->count()) cfg.edit_lambda = lambda_override;
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen") cmd_gen(cfg);
    else if (cmd == "train") cmd_train(cfg);
    else if (cmd == "trace") cmd_trace(cfg);
    else if (cmd == "attn") cmd_attn(cfg);
    else if (cmd == "detect") cmd_detect(cfg);
    else if (cmd == "edit") cmd_edit(cfg);
    else if (cmd == "sweep") cmd_sweep(cfg);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
