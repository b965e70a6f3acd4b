// Acceptance suite: ten end-to-end checks over the full pipeline, printed as
// one PASS/FAIL line each. Exit status is the number of failed checks.
//
// The default-scale checkpoint (50 entities, 8 layers, trained to the 0.95
// fact-accuracy target) is expensive, so it is cached in ./acceptance_cache
// (override with MMTL_ACCEPT_CACHE). Delete the directory to retrain.

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

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
#include "support/gradsuite.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace mmtl;
using namespace mmtl::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ------------------------------------------------------------ shared setup

World default_world(const RunConfig& cfg) {
  World w = World::generate(cfg.n_entities, cfg.n_relations, cfg.seed);
  w.image.mode = cfg.image_mode;
  w.image.sigma_img = cfg.sigma_img;
  w.image.patch_grid = cfg.patch_grid;
  w.image.patch_dim = cfg.patch_dim;
  return w;
}

struct TinyLab {
  World w;
  MultiModalLM model;

  TinyLab() : w(make_world()), model(make_config(w)) {}
  static World make_world() {
    World w = World::generate(6, 1, 71);
    w.image.patch_grid = 2;
    w.image.patch_dim = 4;
    return w;
  }
  static ModelConfig make_config(const World& w) {
    ModelConfig cfg = default_model_config(w, false, 23);
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_mlp = 32;
    cfg.d_vis = 8;
    return cfg;
  }
};

// Trains (or loads) the default checkpoint; nullopt if training failed.
std::optional<MultiModalLM> obtain_trained(const RunConfig& cfg, const World& w,
                                           double* accuracy) {
  const char* env = std::getenv("MMTL_ACCEPT_CACHE");
  const fs::path cache = env ? fs::path(env) : fs::path("acceptance_cache");
  const fs::path ckpt = cache / "model.ckpt";
  const std::string want_cfg = model_config_to_json(cfg.model_config(w));

  if (fs::exists(ckpt)) {
    try {
      MultiModalLM model = load_checkpoint(ckpt.string());
      if (model_config_to_json(model.config()) == want_cfg) {
        std::fprintf(stderr, "[setup] reusing cached checkpoint %s\n",
                     ckpt.string().c_str());
        *accuracy = fact_accuracy(model, w, w.train_split, 7);
        return model;
      }
      std::fprintf(stderr, "[setup] cached checkpoint has a stale config; retraining\n");
    } catch (const std::exception& e) {
      std::fprintf(stderr, "[setup] cached checkpoint unusable (%s); retraining\n",
                   e.what());
    }
  }

  std::fprintf(stderr, "[setup] training the default checkpoint (this is the slow part)\n");
  MultiModalLM model(cfg.model_config(w));
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 11);
  TrainReport rep = train(model, w, tc);
  std::fprintf(stderr, "[setup] trained %d epochs (%d steps), fact accuracy %.4f\n",
               rep.epochs_run, rep.steps, rep.final_train_accuracy);
  *accuracy = rep.final_train_accuracy;
  fs::create_directories(cache);
  save_checkpoint(model, ckpt.string());
  return model;
}

int run_shell(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1 || !WIFEXITED(rc)) return -1;
  return WEXITSTATUS(rc);
}

// -------------------------------------------------------------- criteria

// 1: every op gradient and the end-to-end value gradient match central
// finite differences.
Outcome criterion_gradients(const TinyLab& lab) {
  const auto cases = run_gradient_suite(100, 4242);
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& c : cases)
    if (c.report.max_rel_err > worst_op) {
      worst_op = c.report.max_rel_err;
      worst_name = c.name;
    }

  double worst_e2e = 0.0;
  const int d = lab.model.config().d_model;
  const auto& facts = lab.w.facts;
  for (int inst = 0; inst < 100; ++inst) {
    Rng rng(mix_seed(901, inst));
    const Fact& f = facts[rng.below(facts.size())];
    PromptSpec p = eval_prompt(lab.w, f, mix_seed(77, inst), false);
    const int layer = static_cast<int>(rng.below(lab.model.config().n_layers));
    ForwardResult fr;
    {
      NoGradGuard ng;
      fr = lab.model.forward(p, {}, true);
    }
    const int pos = static_cast<int>(rng.below(fr.cache->seq_len));
    Tensor z = Tensor::zeros({d});
    {
      auto zd = z.mutable_data();
      for (int j = 0; j < d; ++j)
        zd[j] = fr.cache->mlp_out[layer].at(pos, j) + 0.3 * rng.normal();
    }
    z.set_requires_grad(true);
    auto loss_fn = [&] {
      std::vector<Intervention> ivs = {
          Intervention::replace_at(Site::mlp_out, layer, pos, z)};
      return lab.model.answer_nll(p, p.answer_tokens, ivs);
    };
    FdReport rep = fd_check(z, loss_fn, 1e-5, /*max_coords=*/6, /*pick_seed=*/inst);
    worst_e2e = std::max(worst_e2e, rep.max_rel_err);
  }

  const bool pass = worst_op < 1e-4 && worst_e2e < 1e-3;
  return {pass, "op max rel err " + fmt(worst_op) + " (" + worst_name +
                    "), end-to-end max rel err " + fmt(worst_e2e) +
                    ", 100 instances each"};
}

// 2: per-source attention contributions sum to the block output minus its
// bias at every position and layer.
Outcome criterion_decomposition(const World& w, const MultiModalLM& model) {
  PromptSpec p = eval_prompt(w, w.fact(w.eval_split[0]), mix_seed(7, 61), false);
  NoGradGuard ng;
  ForwardResult fr = model.forward(p, {}, true);
  double worst = 0.0;
  for (int l = 0; l < model.config().n_layers; ++l) {
    const Tensor& bo = model.layer(l).bo;
    for (int i = 0; i < fr.cache->seq_len; ++i) {
      Tensor s = contribution_row_sum(model, *fr.cache, l, i);
      for (int c = 0; c < model.config().d_model; ++c)
        worst = std::max(worst,
                         std::fabs(s.at(c) - (fr.cache->attn_out[l].at(i, c) - bo.at(c))));
    }
  }
  return {worst <= 1e-8, "max |sum_j a_ij - (attn_out - b_o)| = " + fmt(worst) +
                             " over every (i, layer)"};
}

// 3: restoring everything reproduces the clean logits bitwise; corrupting
// nothing traces flat.
Outcome criterion_trace_exactness(const World& w, const MultiModalLM& model) {
  PromptSpec p = eval_prompt(w, w.fact(w.eval_split[1]), mix_seed(7, 62), false);
  CorruptionSpec spec = make_token_replace(w, p, CorruptionSpec::Target::visual_constraint,
                                           mix_seed(7, 63));
  CorruptionResult corr = build_corrupted(p, spec, w);
  const bool full_sub = full_substitution_matches(model, p, corr);

  CorruptionResult noop;
  noop.prompt = p;
  noop.target_span = p.visual_constraint_span;
  double worst = 0.0;
  for (Site site : {Site::mlp_out, Site::attn_out, Site::hidden}) {
    TraceGrid g = run_trace(model, p, noop, site, 3);
    for (const auto& row : g.iee)
      for (double v : row) worst = std::max(worst, std::fabs(v));
  }
  return {full_sub && worst < 1e-10,
          std::string("full substitution bitwise: ") + (full_sub ? "yes" : "NO") +
              ", no-op corruption max |IEE| = " + fmt(worst)};
}

struct TraceStudy {
  std::vector<TraceGrid> replace_grids;  // one per traced fact
  std::vector<PromptSpec> prompts;
  int n_dropped = 0;
  int n_restored = 0;  // dropped facts whose max IEE recovers half the margin
};

TraceStudy run_trace_study(const RunConfig& cfg, const World& w,
                           const MultiModalLM& model) {
  TraceStudy st;
  const int n = std::min<int>(cfg.trace_facts, static_cast<int>(w.eval_split.size()));
  for (int i = 0; i < n; ++i) {
    PromptSpec p = eval_prompt(w, w.fact(w.eval_split[i]), mix_seed(cfg.seed, 21, i), false);
    CorruptionSpec spec = make_token_replace(
        w, p, CorruptionSpec::Target::visual_constraint, mix_seed(cfg.seed, 22, i));
    CorruptionResult corr = build_corrupted(p, spec, w);
    TraceGrid g = run_trace(model, p, corr, Site::mlp_out, 3);
    if (g.p_corr < 0.2 * g.p_clean) {
      ++st.n_dropped;
      if (g.max_iee() >= 0.5 * (g.p_clean - g.p_corr)) ++st.n_restored;
    }
    st.prompts.push_back(std::move(p));
    st.replace_grids.push_back(std::move(g));
  }
  return st;
}

double third_mean(const std::vector<double>& per_layer, bool early) {
  const int L = static_cast<int>(per_layer.size());
  const int t = (L + 2) / 3;
  double acc = 0.0;
  for (int l = 0; l < t; ++l) acc += per_layer[early ? l : L - 1 - l];
  return acc / t;
}

// 4: corruption collapses the answer, a 3-layer MLP window restores it, and
// the causal mass at the constraint sits in the early layers.
Outcome criterion_tracing_finding(const TraceStudy& st) {
  const int n = static_cast<int>(st.replace_grids.size());
  const double drop_frac = n ? static_cast<double>(st.n_dropped) / n : 0.0;
  const double restore_frac =
      st.n_dropped ? static_cast<double>(st.n_restored) / st.n_dropped : 0.0;
  TraceSummary sum = summarize(st.replace_grids);
  const double early = third_mean(sum.mean_iee_constraint, true);
  const double late = third_mean(sum.mean_iee_constraint, false);
  const bool pass = drop_frac >= 0.8 && restore_frac >= 0.7 && early > late;
  return {pass, fmt(100.0 * drop_frac) + "% of " + std::to_string(n) +
                    " facts drop below 0.2 P_clean; " + fmt(100.0 * restore_frac) +
                    "% of those restore half the margin (site=mlp, W=3); constraint IEE "
                    "early/late thirds " +
                    fmt(early) + " / " + fmt(late)};
}

// 5: embedding noise is a weaker corruption than token replacement.
Outcome criterion_gaussian_weaker(const RunConfig& cfg, const World& w,
                                  const MultiModalLM& model, const TraceStudy& st) {
  double mean_replace = 0.0, mean_gauss = 0.0;
  for (size_t i = 0; i < st.replace_grids.size(); ++i) {
    mean_replace += st.replace_grids[i].max_iee();
    CorruptionSpec spec = make_gaussian(model, mix_seed(cfg.seed, 22, i));
    CorruptionResult corr = build_corrupted(st.prompts[i], spec, w);
    TraceGrid g = run_trace(model, st.prompts[i], corr, Site::mlp_out, 3);
    mean_gauss += g.max_iee();
  }
  mean_replace /= st.replace_grids.size();
  mean_gauss /= st.replace_grids.size();
  return {mean_gauss < mean_replace, "mean max IEE: token_replace " + fmt(mean_replace) +
                                         " vs gaussian_embed " + fmt(mean_gauss) +
                                         " on the same facts"};
}

// 6: layer-0 visual->constraint contribution mass concentrates on the
// signature patches that identify the entity.
Outcome criterion_signature_mass(const World& w, const MultiModalLM& model,
                                 const TraceStudy& st) {
  const int n = model.config().n_visual();
  const int L = model.config().n_layers;
  std::vector<double> layer0(n, 0.0);
  for (const PromptSpec& p : st.prompts) {
    auto prof = visual_to_constraint_profile(model, p);
    for (int j = 0; j < n; ++j) layer0[j] += prof[j][0];
  }
  (void)L;
  double total = 0.0, sig = 0.0;
  for (int j = 0; j < n; ++j) {
    total += layer0[j];
    if (j >= w.image.first_signature_patch()) sig += layer0[j];
  }
  const double frac = total > 0.0 ? sig / total : 0.0;
  return {frac >= 0.6, fmt(100.0 * frac) + "% of layer-0 visual->constraint mass on " +
                           std::to_string(n - w.image.first_signature_patch()) + "/" +
                           std::to_string(n) + " signature patches"};
}

// 7: the contribution-strength detector beats chance on held-out prompts and
// the AUROC implementation is exactly the pairwise statistic.
Outcome criterion_detector(const RunConfig& cfg, const World& w,
                           const MultiModalLM& model) {
  // Exactness first: rank-based AUROC == O(n^2) pairwise oracle on tied data.
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(mix_seed(905, inst));
    std::vector<double> scores(20);
    std::vector<int> labels(20);
    for (int i = 0; i < 20; ++i) {
      scores[i] = 0.125 * static_cast<double>(rng.below(8));  // heavy exact ties
      labels[i] = static_cast<int>(rng.below(2));
    }
    labels[0] = 0;
    labels[1] = 1;
    if (auroc(scores, labels) != pairwise_auroc(scores, labels))
      return {false, "rank-based AUROC diverged from the pairwise oracle"};
  }

  // Labeled pool: held-out facts across an image-noise ladder, plus longtail
  // facts the model never saw (guaranteed hard negatives).
  static constexpr double kNoise[4] = {1.0, 4.0, 8.0, 12.0};
  std::vector<PromptSpec> pool;
  std::vector<int> labels;
  World noisy = w;
  const int n_eval = std::min<int>(60, static_cast<int>(w.eval_split.size()));
  for (int i = 0; i < n_eval; ++i) {
    const Fact& f = w.fact(w.eval_split[i]);
    PromptSpec p = eval_prompt(w, f, mix_seed(cfg.seed, 31, i), false);
    noisy.image.sigma_img = w.image.sigma_img * kNoise[i % 4];
    p.image = noisy.render_image(f.entity, mix_seed(cfg.seed, 32, i));
    pool.push_back(std::move(p));
  }
  for (size_t i = 0; i < w.longtail_split.size(); ++i)
    pool.push_back(eval_prompt(w, w.fact(w.longtail_split[i]),
                               mix_seed(cfg.seed, 33, i), false));
  for (const PromptSpec& p : pool) {
    std::vector<int> got =
        model.generate_greedy(p, static_cast<int>(p.answer_tokens.size()) + 1);
    labels.push_back(got.size() >= p.answer_tokens.size() &&
                     std::equal(p.answer_tokens.begin(), p.answer_tokens.end(),
                                got.begin()));
  }

  std::vector<PromptSpec> val_p, held_p;
  std::vector<int> val_l, held_l;
  for (size_t i = 0; i < pool.size(); ++i) {
    (i % 2 == 0 ? val_p : held_p).push_back(pool[i]);
    (i % 2 == 0 ? val_l : held_l).push_back(labels[i]);
  }
  DetectorModel det = fit_detector(model, val_p, val_l);
  std::vector<double> det_scores, conf_scores;
  for (const PromptSpec& p : held_p) {
    det_scores.push_back(det.score(constraint_to_last_profile(model, p)));
    conf_scores.push_back(confidence_baseline(model, p));
  }
  const double det_auc = auroc(det_scores, held_l);
  const double conf_auc = auroc(conf_scores, held_l);
  return {det_auc > 0.5, "held-out AUROC " + fmt(det_auc) + " (layers " +
                             std::to_string(det.layer_a) + "," +
                             std::to_string(det.layer_b) + "), confidence baseline " +
                             fmt(conf_auc) + ", exact oracle match on 20 instances"};
}

// 8: the closed-form update satisfies its optimality condition, matches a
// dense solver, and touches nothing but the target matrix.
Outcome criterion_edit_exactness(const World& w, const MultiModalLM& model) {
  Rng rng(82);
  double worst_station = 0.0, worst_dense = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = 2 + static_cast<int>(rng.below(5));
    const int dm = 2 + static_cast<int>(rng.below(5));
    const double lambda = 0.05 + rng.uniform();
    Tensor wmat = Tensor::randn({d, dm}, 1.0, rng);
    Tensor k = Tensor::randn({dm}, 1.0, rng);
    Tensor z = Tensor::randn({d}, 1.0, rng);
    Tensor ws = closed_form_update(wmat, k, z, lambda);

    std::vector<double> wk(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < dm; ++j) wk[static_cast<size_t>(i)] += ws.at(i, j) * k.at(j);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < dm; ++j)
        worst_station = std::max(
            worst_station, std::fabs(2.0 * (wk[static_cast<size_t>(i)] - z.at(i)) * k.at(j) +
                                     2.0 * lambda * (ws.at(i, j) - wmat.at(i, j))));

    std::vector<double> a(static_cast<size_t>(dm) * dm, 0.0);
    for (int i = 0; i < dm; ++i)
      for (int j = 0; j < dm; ++j)
        a[static_cast<size_t>(i) * dm + j] = (i == j ? lambda : 0.0) + k.at(i) * k.at(j);
    std::vector<double> bt(static_cast<size_t>(dm) * d, 0.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < dm; ++j)
        bt[static_cast<size_t>(j) * d + i] = lambda * wmat.at(i, j) + z.at(i) * k.at(j);
    const auto xt = gauss_solve(a, bt, dm, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < dm; ++j)
        worst_dense = std::max(
            worst_dense, std::fabs(ws.at(i, j) - xt[static_cast<size_t>(j) * d + i]));
  }

  // Locality on a real model edit.
  EditRequest req;
  const Fact& f = w.fact(w.train_split[0]);
  req.prompt = eval_prompt(w, f, mix_seed(7, 64), false);
  const auto& pool = w.relations.at(f.relation).value_tokens;
  size_t idx = 0;
  while (idx < pool.size() && pool[idx] != f.value_token) ++idx;
  req.target_answer = {pool[(idx + 1) % pool.size()]};
  req.layer = 2;
  req.paraphrases = w.paraphrases(req.prompt);
  for (int fid : w.eval_split) {
    if (req.unrelated.size() >= 4) break;
    if (w.fact(fid).entity != f.entity)
      req.unrelated.push_back(eval_prompt(w, w.fact(fid), mix_seed(7, 65, fid), false));
  }
  auto [edited, res] = apply_edit(model, req);
  bool local = true;
  const auto& names = model.parameter_names();
  for (size_t i = 0; i < names.size(); ++i) {
    if (names[i] == "layers.2.w_proj") continue;
    const auto x = model.parameters()[i].data();
    const auto y = edited.parameters()[i].data();
    for (size_t t = 0; t < x.size(); ++t)
      if (x[t] != y[t]) {
        local = false;
        break;
      }
    if (!local) break;
  }
  const bool pass = worst_station <= 1e-8 && worst_dense <= 1e-9 && local;
  return {pass, "50 random instances: stationarity max " + fmt(worst_station) +
                    ", dense-solver max " + fmt(worst_dense) +
                    "; locality outside W_proj bitwise: " + (local ? "yes" : "NO") +
                    " (|dW| = " + fmt(res.weight_change_norm) + ")"};
}

// 9: edits take at scale — fixes and longtail insertions succeed, generalize,
// and leave unrelated facts intact, with early layers editable.
Outcome criterion_edit_efficacy(const RunConfig& cfg, const World& w,
                                const MultiModalLM& model) {
  auto build = [&](const Fact& f, size_t salt, bool insertion) {
    EditRequest req;
    req.prompt = eval_prompt(w, f, mix_seed(cfg.seed, 41, salt), false);
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
      if (w.fact(fid).entity == f.entity) continue;
      req.unrelated.push_back(eval_prompt(w, w.fact(fid), mix_seed(cfg.seed, 42, fid), false));
    }
    return req;
  };

  const int n_fix = std::min<int>(50, static_cast<int>(w.train_split.size()));
  const int n_ins = std::min<int>(20, static_cast<int>(w.longtail_split.size()));
  std::vector<EditRequest> fix_reqs;
  double eff = 0.0, gen = 0.0, spec_drop = 0.0;
  int n = 0;
  for (int i = 0; i < n_fix; ++i) {
    EditRequest req = build(w.fact(w.train_split[i]), i, false);
    auto [edited, res] = apply_edit(model, req);
    eff += res.efficacy;
    gen += res.generalization;
    spec_drop += res.specificity_pre - res.specificity;
    ++n;
    if (static_cast<int>(fix_reqs.size()) < 5) fix_reqs.push_back(std::move(req));
  }
  for (int i = 0; i < n_ins; ++i) {
    EditRequest req = build(w.fact(w.longtail_split[i]), 100 + i, true);
    auto [edited, res] = apply_edit(model, req);
    eff += res.efficacy;
    gen += res.generalization;
    spec_drop += res.specificity_pre - res.specificity;
    ++n;
  }
  eff /= n;
  gen /= n;
  spec_drop /= n;

  std::vector<int> layers(model.config().n_layers);
  for (size_t i = 0; i < layers.size(); ++i) layers[i] = static_cast<int>(i);
  std::vector<double> sweep = layer_sweep(model, fix_reqs, layers);
  const double early = third_mean(sweep, true);
  const double late = third_mean(sweep, false);

  const bool pass = n >= 70 && eff >= 0.8 && std::fabs(gen - eff) <= 0.15 &&
                    spec_drop <= 0.05 && early >= late;
  return {pass, std::to_string(n_fix) + " fixes + " + std::to_string(n_ins) +
                    " insertions: mean efficacy " + fmt(eff) + ", generalization " +
                    fmt(gen) + ", specificity drop " + fmt(spec_drop) +
                    "; sweep early/late thirds " + fmt(early) + " / " + fmt(late)};
}

// 10: the CLI pipeline is byte-for-byte reproducible under a fixed seed.
Outcome criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "mmtl_accept_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cfg_path = (root / "run.json").string();
  atomic_write_file(cfg_path, R"({
  "seed": 5,
  "world": {"n_entities": 8, "n_relations": 1, "sigma_img": 0.02},
  "train": {"epochs": 4, "batch_size": 8, "lr": 0.004, "warmup_steps": 8,
            "n_layers": 2, "n_heads": 2, "d_model": 32, "d_mlp": 64,
            "patch_grid": 2, "patch_dim": 4, "d_vis": 8, "model_seed": 3},
  "trace": {"window": 2, "n_facts": 2},
  "edit": {"layer": 1, "n_fix": 2, "n_longtail": 1, "n_unrelated": 2}
})");

  for (const char* out : {"a", "b"}) {
    for (const char* cmd : {"gen", "train", "trace", "edit"}) {
      const std::string shell = std::string("MMTL_THREADS=1 \"") + MMTL_CLI_BIN + "\" " +
                                cmd + " --config " + cfg_path + " --out " +
                                (root / out).string() + " >/dev/null 2>&1";
      const int rc = run_shell(shell);
      if (rc != 0) {
        fs::remove_all(root);
        return {false, std::string(cmd) + " exited with code " + std::to_string(rc)};
      }
    }
  }

  // config.resolved.json is excluded: it records out_dir, which differs
  // between the two runs by construction.
  std::string differing;
  for (const char* name : {"world.json", "model.ckpt", "train_curve.csv",
                           "train_report.json", "trace_0.csv", "trace_0.json",
                           "trace_summary.csv", "trace_report.json", "edit_report.json"}) {
    if (read_file((root / "a" / name).string()) != read_file((root / "b" / name).string()))
      differing += std::string(differing.empty() ? "" : ", ") + name;
  }
  fs::remove_all(root);
  if (!differing.empty()) return {false, "artifacts differ between runs: " + differing};
  return {true, "gen/train/trace/edit twice: 9 artifacts byte-identical"};
}

}  // namespace

int main() {
  RunConfig cfg;  // defaults: 50 entities, 4 relations, L=8, d=128, seed 7
  World world = default_world(cfg);
  TinyLab tiny;
  MultiModalLM untrained(cfg.model_config(world));

  std::vector<Outcome> results(10);
  auto run = [&](int idx, const char* label, std::function<Outcome()> body) {
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    results[idx - 1] = o;
    std::printf("[%2d] %s — %s: %s\n", idx, o.pass ? "PASS" : "FAIL", label,
                o.detail.c_str());
    std::fflush(stdout);
  };

  run(1, "gradient checks", [&] { return criterion_gradients(tiny); });
  run(2, "contribution decomposition",
      [&] { return criterion_decomposition(world, untrained); });
  run(3, "tracing exactness",
      [&] { return criterion_trace_exactness(world, untrained); });

  double accuracy = 0.0;
  std::optional<MultiModalLM> trained;
  try {
    trained = obtain_trained(cfg, world, &accuracy);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "[setup] training failed: %s\n", e.what());
  }

  if (trained && accuracy >= cfg.train.target_accuracy) {
    TraceStudy study = run_trace_study(cfg, world, *trained);
    run(4, "tracing locates the constraint", [&] {
      Outcome o = criterion_tracing_finding(study);
      o.detail += " (checkpoint fact accuracy " + fmt(accuracy) + ")";
      return o;
    });
    run(5, "gaussian corruption is weaker",
        [&] { return criterion_gaussian_weaker(cfg, world, *trained, study); });
    run(6, "signature-patch mass",
        [&] { return criterion_signature_mass(world, *trained, study); });
    run(7, "correctness detector",
        [&] { return criterion_detector(cfg, world, *trained); });
    run(8, "closed-form edit exactness",
        [&] { return criterion_edit_exactness(world, untrained); });
    run(9, "edit efficacy at scale",
        [&] { return criterion_edit_efficacy(cfg, world, *trained); });
  } else {
    const std::string why = trained
                                ? "checkpoint below target accuracy (" + fmt(accuracy) + ")"
                                : "no trained checkpoint";
    for (int i : {4, 5, 6, 7})
      run(i, "requires the trained checkpoint", [&] { return Outcome{false, why}; });
    run(8, "closed-form edit exactness",
        [&] { return criterion_edit_exactness(world, untrained); });
    run(9, "requires the trained checkpoint", [&] { return Outcome{false, why}; });
  }

  run(10, "pipeline determinism", [&] { return criterion_determinism(); });

  int failed = 0;
  for (const Outcome& o : results) failed += o.pass ? 0 : 1;
  if (failed) std::printf("%d of 10 criteria failed\n", failed);
  else std::printf("all 10 criteria passed\n");
  return failed;
}
