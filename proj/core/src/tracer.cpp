#include "mmtl/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mmtl/rng.hpp"

namespace mmtl {

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Probability of `answer` read off logits of a teacher-forced pass whose rows
// cover question+answer; `first` is the row predicting answer[0].
double prob_from_logits(const Tensor& logits, int first, const std::vector<int>& answer) {
  const int len = static_cast<int>(answer.size());
  Tensor rows = slice_rows(logits, first, first + len);
  Tensor lsm = log_softmax_rows(rows);
  double lp = 0.0;
  for (int t = 0; t < len; ++t) lp += lsm.at(t, answer[t]);
  return std::exp(lp);
}

Tensor row_vec(const Tensor& m, int r) {
  const int c = m.cols();
  Tensor out = Tensor::zeros({c});
  auto dst = out.mutable_data();
  const auto src = m.data();
  for (int i = 0; i < c; ++i) dst[i] = src[static_cast<size_t>(r) * c + i];
  return out;
}

const Tensor& site_tensor(const ActivationCache& cache, Site site, int layer) {
  switch (site) {
    case Site::hidden: return cache.hidden.at(layer);
    case Site::mlp_out: return cache.mlp_out.at(layer);
    case Site::attn_out: return cache.attn_out.at(layer);
    default: throw std::invalid_argument("run_trace: embedding is not a traceable site");
  }
}

TokenSpan span_for_target(const PromptSpec& prompt, CorruptionSpec::Target target) {
  if (target == CorruptionSpec::Target::visual_constraint) {
    if (prompt.visual_constraint_span.empty())
      throw std::invalid_argument("corruption: prompt has no visual constraint span");
    return prompt.visual_constraint_span;
  }
  if (!prompt.text_constraint_span || prompt.text_constraint_span->empty())
    throw std::invalid_argument("corruption: prompt has no text constraint span");
  return *prompt.text_constraint_span;
}

}  // namespace

CorruptionSpec make_token_replace(const World& world, const PromptSpec& prompt,
                                  CorruptionSpec::Target target, uint64_t seed) {
  CorruptionSpec spec;
  spec.strategy = CorruptionSpec::Strategy::token_replace;
  spec.target = target;
  const PromptMeta& meta = prompt.metadata;
  const TokenSpan span = span_for_target(prompt, target);

  const bool year_swap =
      target == CorruptionSpec::Target::text_constraint && meta.relation < 0;
  if (year_swap) {
    // Award prompts: flip the year to the entity's other trained year.
    const MultiFact& mf = world.multi_fact_of(meta.entity, meta.year_token);
    const int other = world.other_year(mf);
    spec.replacement = {other};
    spec.corrupted_true_answer = {world.multi_fact_of(meta.entity, other).value_token};
  } else if (meta.relation >= 0) {
    // Entity-slot replacement: "this entity" / "the entX" -> "the entD" where
    // entD's answer for this relation differs from the original.
    const Fact& f = world.fact_of(meta.entity, meta.relation);
    const int d = world.pick_distractor(f, seed);
    spec.distractor_entity = d;
    spec.replacement = {world.token("the"), world.entities.at(d).name_token};
    spec.corrupted_true_answer = {world.fact_of(d, meta.relation).value_token};
  } else {
    // Visual target on an award prompt: swap in another entity; its answer for
    // the original year is usually undefined, so no corrupted_true_answer.
    Rng rng(mix_seed(seed, 301));
    int d = static_cast<int>(rng.below(world.entities.size() - 1));
    if (d >= meta.entity) ++d;
    spec.distractor_entity = d;
    spec.replacement = {world.token("the"), world.entities.at(d).name_token};
  }
  if (static_cast<int>(spec.replacement.size()) != span.size())
    throw std::logic_error("corruption: replacement length does not match span");
  return spec;
}

CorruptionSpec make_gaussian(const MultiModalLM& model, uint64_t seed) {
  CorruptionSpec spec;
  spec.strategy = CorruptionSpec::Strategy::gaussian_embed;
  spec.target = CorruptionSpec::Target::visual_constraint;
  spec.noise_seed = seed;
  const Tensor& emb = model.param("tok_embed");
  const auto& v = emb.data();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  spec.noise_sigma = 3.0 * std::sqrt(var);
  return spec;
}

CorruptionResult build_corrupted(const PromptSpec& prompt, const CorruptionSpec& spec,
                                 const World& world) {
  CorruptionResult out;
  out.prompt = prompt;
  out.strategy = spec.strategy;
  out.target = spec.target;
  out.target_span = span_for_target(prompt, spec.target);

  if (spec.strategy == CorruptionSpec::Strategy::token_replace) {
    if (static_cast<int>(spec.replacement.size()) != out.target_span.size())
      throw std::invalid_argument("build_corrupted: replacement/span length mismatch");
    for (int i = 0; i < out.target_span.size(); ++i)
      out.prompt.question_tokens.at(out.target_span.begin + i) = spec.replacement[i];
    out.prompt.metadata.corrupted_true_answer = spec.corrupted_true_answer;
    return out;
  }

  // gaussian_embed: the question is untouched; noise lands on every visual
  // token embedding plus the text tokens of the visual constraint.
  if (prompt.image.empty())
    throw std::invalid_argument("build_corrupted: gaussian corruption needs an image");
  if (spec.noise_sigma <= 0.0)
    throw std::invalid_argument("build_corrupted: gaussian corruption needs sigma > 0");
  const int n_visual = world.image.n_patches();
  std::vector<int> positions;
  for (int i = 0; i < n_visual; ++i) positions.push_back(i);
  for (int i = out.target_span.begin; i < out.target_span.end; ++i)
    positions.push_back(n_visual + i);
  out.interventions.push_back(
      Intervention::noise_at(Site::embedding, std::move(positions), spec.noise_sigma,
                             spec.noise_seed));
  return out;
}

double TraceGrid::max_iee(int* arg_pos, int* arg_layer) const {
  double best = -std::numeric_limits<double>::infinity();
  int bp = -1, bl = -1;
  for (int k = 0; k < n_positions(); ++k)
    for (int l = 0; l < n_layers; ++l)
      if (iee[k][l] > best) {
        best = iee[k][l];
        bp = k;
        bl = l;
      }
  if (arg_pos) *arg_pos = bp;
  if (arg_layer) *arg_layer = bl;
  return best;
}

TraceGrid run_trace(const MultiModalLM& model, const PromptSpec& prompt,
                    const CorruptionResult& corrupted, Site site, int window) {
  if (site == Site::embedding)
    throw std::invalid_argument("run_trace: site must be one of mlp/attn/hidden");
  const int L = model.config().n_layers;
  if (window < 1 || window > L)
    throw std::invalid_argument("run_trace: window must be in [1, n_layers]");
  prompt.validate();
  if (prompt.answer_tokens.empty())
    throw std::invalid_argument("run_trace: prompt has no answer tokens");
  if (corrupted.prompt.question_tokens.size() != prompt.question_tokens.size())
    throw std::invalid_argument("run_trace: corruption changed the question length");

  NoGradGuard ng;
  const int n_visual = model.config().n_visual();
  const int s_q = n_visual + prompt.question_len();
  const std::vector<int>& answer = prompt.answer_tokens;

  std::vector<int> full = prompt.question_tokens;
  full.insert(full.end(), answer.begin(), answer.end());
  ForwardResult clean = model.forward(prompt, {}, /*want_cache=*/true, &full);
  const ActivationCache& cache = *clean.cache;

  TraceGrid grid;
  grid.site = site;
  grid.window = window;
  grid.n_layers = L;
  grid.n_visual = n_visual;
  grid.constraint_pos = n_visual + corrupted.target_span.end - 1;
  grid.last_visual_pos = n_visual > 0 ? n_visual - 1 : -1;
  grid.last_pos = s_q - 1;
  grid.meta = prompt.metadata;
  grid.meta.corrupted_true_answer = corrupted.prompt.metadata.corrupted_true_answer;
  grid.question_tokens = prompt.question_tokens;
  grid.corrupted_tokens = corrupted.prompt.question_tokens;
  grid.p_clean = prob_from_logits(cache.logits, s_q - 1, answer);
  grid.p_corr = model.answer_prob(corrupted.prompt, answer, corrupted.interventions);

  grid.iee.assign(s_q, std::vector<double>(L, 0.0));
  std::vector<Intervention> ivs;
  for (int k = 0; k < s_q; ++k) {
    for (int l = 0; l < L; ++l) {
      ivs = corrupted.interventions;
      const int l_end = std::min(l + window, L);
      for (int l2 = l; l2 < l_end; ++l2)
        ivs.push_back(Intervention::replace_at(site, l2, k,
                                               row_vec(site_tensor(cache, site, l2), k)));
      const double p_r = model.answer_prob(corrupted.prompt, answer, ivs);
      grid.iee[k][l] = p_r - grid.p_corr;
    }
  }
  return grid;
}

std::optional<int> min_causal_window(const MultiModalLM& model, const PromptSpec& prompt,
                                     const CorruptionResult& corrupted, Site site,
                                     double theta, double margin) {
  const int L = model.config().n_layers;
  // Cheap margin check before the sweep.
  {
    NoGradGuard ng;
    const double pc = model.answer_prob(prompt, prompt.answer_tokens);
    const double px =
        model.answer_prob(corrupted.prompt, prompt.answer_tokens, corrupted.interventions);
    if (pc - px <= margin)
      throw std::invalid_argument("min_causal_window: corruption margin not met");
  }
  for (int w = 1; w <= L; ++w) {
    TraceGrid g = run_trace(model, prompt, corrupted, site, w);
    if (g.max_iee() >= theta * (g.p_clean - g.p_corr)) return w;
  }
  return std::nullopt;
}

bool full_substitution_matches(const MultiModalLM& model, const PromptSpec& prompt,
                               const CorruptionResult& corrupted) {
  NoGradGuard ng;
  std::vector<int> full = prompt.question_tokens;
  full.insert(full.end(), prompt.answer_tokens.begin(), prompt.answer_tokens.end());
  ForwardResult clean = model.forward(prompt, {}, /*want_cache=*/true, &full);
  const int s_full = clean.cache->seq_len;
  const int L = model.config().n_layers;

  std::vector<Intervention> ivs = corrupted.interventions;
  for (int l = 0; l < L; ++l)
    for (int k = 0; k < s_full; ++k)
      ivs.push_back(
          Intervention::replace_at(Site::hidden, l, k, row_vec(clean.cache->hidden[l], k)));

  std::vector<int> full_corr = corrupted.prompt.question_tokens;
  full_corr.insert(full_corr.end(), prompt.answer_tokens.begin(), prompt.answer_tokens.end());
  ForwardResult restored = model.forward(corrupted.prompt, ivs, false, &full_corr);

  const auto& a = clean.logits.data();
  const auto& b = restored.logits.data();
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

TraceGrid trace_multiconstraint(const MultiModalLM& model, const World& world,
                                const PromptSpec& prompt, int window, Site site,
                                uint64_t seed) {
  if (!prompt.text_constraint_span || prompt.text_constraint_span->empty())
    throw std::invalid_argument("trace_multiconstraint: prompt has no text constraint");
  CorruptionSpec spec =
      make_token_replace(world, prompt, CorruptionSpec::Target::text_constraint, seed);
  CorruptionResult corr = build_corrupted(prompt, spec, world);
  return run_trace(model, prompt, corr, site, window);
}

TraceSummary summarize(std::span<const TraceGrid> grids) {
  if (grids.empty()) throw std::invalid_argument("summarize: no grids");
  TraceSummary s;
  s.site = grids[0].site;
  s.window = grids[0].window;
  s.n_grids = static_cast<int>(grids.size());
  const int L = grids[0].n_layers;
  bool have_visual = true;
  for (const TraceGrid& g : grids) {
    if (g.site != s.site || g.window != s.window || g.n_layers != L)
      throw std::invalid_argument("summarize: grids mix sites, windows, or depths");
    if (g.last_visual_pos < 0) have_visual = false;
  }
  s.mean_iee_constraint.assign(L, 0.0);
  s.mean_iee_last.assign(L, 0.0);
  if (have_visual) s.mean_iee_last_visual.assign(L, 0.0);
  for (const TraceGrid& g : grids) {
    for (int l = 0; l < L; ++l) {
      s.mean_iee_constraint[l] += g.iee.at(g.constraint_pos)[l];
      s.mean_iee_last[l] += g.iee.at(g.last_pos)[l];
      if (have_visual) s.mean_iee_last_visual[l] += g.iee.at(g.last_visual_pos)[l];
    }
  }
  const double inv = 1.0 / s.n_grids;
  auto finish = [&](std::vector<double>& v, int& argmax) {
    if (v.empty()) return;
    for (double& x : v) x *= inv;
    argmax = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  };
  finish(s.mean_iee_constraint, s.argmax_layer_constraint);
  finish(s.mean_iee_last, s.argmax_layer_last);
  finish(s.mean_iee_last_visual, s.argmax_layer_last_visual);
  return s;
}

std::string grid_header_json(const TraceGrid& grid) {
  nlohmann::ordered_json j;
  j["kind"] = "mmtl-trace";
  j["site"] = site_name(grid.site);
  j["window"] = grid.window;
  j["n_layers"] = grid.n_layers;
  j["n_visual"] = grid.n_visual;
  j["n_positions"] = grid.n_positions();
  j["constraint_pos"] = grid.constraint_pos;
  j["last_visual_pos"] = grid.last_visual_pos;
  j["last_pos"] = grid.last_pos;
  j["p_clean"] = grid.p_clean;
  j["p_corr"] = grid.p_corr;
  j["entity"] = grid.meta.entity;
  j["relation"] = grid.meta.relation;
  j["year_token"] = grid.meta.year_token;
  j["template_id"] = grid.meta.template_id;
  j["sample_seed"] = grid.meta.sample_seed;
  j["name_form"] = grid.meta.name_form;
  j["question_tokens"] = grid.question_tokens;
  j["corrupted_tokens"] = grid.corrupted_tokens;
  j["corrupted_true_answer"] = grid.meta.corrupted_true_answer;
  return j.dump(2) + "\n";
}

std::string grid_csv(const TraceGrid& grid) {
  std::string out = "position";
  for (int l = 0; l < grid.n_layers; ++l) out += ",L" + std::to_string(l);
  out += "\n";
  for (int k = 0; k < grid.n_positions(); ++k) {
    out += std::to_string(k);
    for (int l = 0; l < grid.n_layers; ++l) out += "," + fmt_g17(grid.iee[k][l]);
    out += "\n";
  }
  return out;
}

std::string summary_csv(const TraceSummary& s) {
  const bool vis = !s.mean_iee_last_visual.empty();
  std::string out = "layer,mean_iee_constraint,mean_iee_last";
  if (vis) out += ",mean_iee_last_visual";
  out += "\n";
  for (size_t l = 0; l < s.mean_iee_constraint.size(); ++l) {
    out += std::to_string(l);
    out += "," + fmt_g17(s.mean_iee_constraint[l]);
    out += "," + fmt_g17(s.mean_iee_last[l]);
    if (vis) out += "," + fmt_g17(s.mean_iee_last_visual[l]);
    out += "\n";
  }
  return out;
}

}  // namespace mmtl
