#include "mmtl/editor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "mmtl/optim.hpp"
#include "mmtl/rng.hpp"
#include "mmtl/trainer.hpp"

namespace mmtl {

namespace {

Tensor row_vec(const Tensor& m, int r) {
  const int c = m.cols();
  Tensor out = Tensor::zeros({c});
  auto dst = out.mutable_data();
  const auto src = m.data();
  for (int i = 0; i < c; ++i) dst[i] = src[static_cast<size_t>(r) * c + i];
  return out;
}

double frobenius_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  const auto& x = a.data();
  const auto& y = b.data();
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

void EditRequest::validate(const ModelConfig& cfg) const {
  prompt.validate();
  if (target_answer.empty())
    throw std::invalid_argument("EditRequest: empty target answer");
  if (layer < 0 || layer >= cfg.n_layers)
    throw std::invalid_argument("EditRequest: layer out of range");
  if (lambda <= 0.0) throw std::invalid_argument("EditRequest: lambda must be > 0");
  if (value_opt.lr <= 0.0 || value_opt.max_steps < 0 || value_opt.stop_loss < 0.0)
    throw std::invalid_argument("EditRequest: bad value-opt config");
  resolved_constraint_pos(cfg);  // throws when unresolvable/out of range
}

int EditRequest::resolved_constraint_pos(const ModelConfig& cfg) const {
  const int seq = cfg.n_visual() + prompt.question_len();
  if (constraint_pos >= 0) {
    if (constraint_pos >= seq)
      throw std::invalid_argument("EditRequest: constraint position out of range");
    return constraint_pos;
  }
  if (prompt.visual_constraint_span.empty())
    throw std::invalid_argument(
        "EditRequest: no constraint position and no visual constraint span");
  return cfg.n_visual() + prompt.visual_constraint_span.end - 1;
}

Tensor extract_key(const MultiModalLM& model, const PromptSpec& prompt, int layer, int c) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.n_layers)
    throw std::invalid_argument("extract_key: layer out of range");
  NoGradGuard ng;
  ForwardResult res = model.forward(prompt, {}, /*want_cache=*/true);
  if (c < 0 || c >= res.cache->seq_len)
    throw std::invalid_argument("extract_key: position out of range");
  return row_vec(res.cache->mlp_proj_in.at(layer), c);
}

Tensor extract_key_averaged(const MultiModalLM& model, const World& world,
                            const PromptSpec& prompt, int layer, int c, int n_samples) {
  if (n_samples < 1) throw std::invalid_argument("extract_key_averaged: n_samples < 1");
  const int entity = prompt.metadata.image_entity >= 0 ? prompt.metadata.image_entity
                                                       : prompt.metadata.entity;
  Tensor acc;
  for (int s = 0; s < n_samples; ++s) {
    PromptSpec p = prompt;
    p.image = world.render_image(entity, mix_seed(prompt.metadata.sample_seed, 500, s));
    Tensor k = extract_key(model, p, layer, c);
    if (s == 0) {
      acc = k;
    } else {
      auto a = acc.mutable_data();
      const auto b = k.data();
      for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    }
  }
  auto a = acc.mutable_data();
  for (size_t i = 0; i < a.size(); ++i) a[i] /= n_samples;
  return acc;
}

ValueOptResult optimize_value(const MultiModalLM& model, const PromptSpec& prompt,
                              int layer, int c, const std::vector<int>& target,
                              const ValueOptConfig& cfg) {
  if (target.empty()) throw std::invalid_argument("optimize_value: empty target");
  const ModelConfig& mc = model.config();
  if (layer < 0 || layer >= mc.n_layers)
    throw std::invalid_argument("optimize_value: layer out of range");

  Tensor z;
  {
    NoGradGuard ng;
    ForwardResult res = model.forward(prompt, {}, /*want_cache=*/true);
    if (c < 0 || c >= res.cache->seq_len)
      throw std::invalid_argument("optimize_value: position out of range");
    z = row_vec(res.cache->mlp_out.at(layer), c);
  }
  z.set_requires_grad(true);

  std::vector<Tensor> params = {z};
  AdamState st = AdamState::init(params, cfg.lr);
  ValueOptResult out;
  out.final_loss = std::numeric_limits<double>::infinity();
  for (int step = 0; step < cfg.max_steps; ++step) {
    std::vector<Intervention> ivs = {Intervention::replace_at(Site::mlp_out, layer, c, z)};
    Tensor loss = model.answer_nll(prompt, target, ivs);
    out.final_loss = loss.item();
    if (!std::isfinite(out.final_loss))
      throw NumericError("optimize_value: non-finite loss");
    if (out.final_loss < cfg.stop_loss) break;
    z.zero_grad();
    backward(loss);
    adam_step(params, st);
    ++out.steps;
  }
  if (out.steps > 0 && out.final_loss >= cfg.stop_loss) {
    // Report the loss of the final iterate, not the pre-step one.
    NoGradGuard ng;
    std::vector<Intervention> ivs = {Intervention::replace_at(Site::mlp_out, layer, c, z)};
    out.final_loss = model.answer_nll(prompt, target, ivs).item();
  }
  out.z = z.detach();
  return out;
}

Tensor closed_form_update(const Tensor& w_proj, const Tensor& k, const Tensor& z,
                          double lambda) {
  if (w_proj.ndim() != 2)
    throw std::invalid_argument("closed_form_update: W' must be a matrix");
  const int d = w_proj.rows();
  const int dm = w_proj.cols();
  if (k.ndim() != 1 || k.numel() != static_cast<size_t>(dm))
    throw std::invalid_argument("closed_form_update: k must have length d_mlp");
  if (z.ndim() != 1 || z.numel() != static_cast<size_t>(d))
    throw std::invalid_argument("closed_form_update: z must have length d");
  if (lambda <= 0.0) throw std::invalid_argument("closed_form_update: lambda must be > 0");

  NoGradGuard ng;
  Tensor a = Tensor::zeros({d, dm});  // lambda W' + z k^T
  {
    auto dst = a.mutable_data();
    const auto w = w_proj.data();
    const auto kv = k.data();
    const auto zv = z.data();
    for (int r = 0; r < d; ++r)
      for (int cc = 0; cc < dm; ++cc)
        dst[static_cast<size_t>(r) * dm + cc] =
            lambda * w[static_cast<size_t>(r) * dm + cc] + zv[r] * kv[cc];
  }
  Tensor inv = solve_regularized_rank1(lambda, k);
  return matmul(a, inv);
}

EditResult evaluate_edit(const MultiModalLM& model, const EditRequest& request) {
  request.validate(model.config());
  if (request.paraphrases.empty())
    throw std::invalid_argument("evaluate_edit: empty paraphrase set");
  if (request.unrelated.empty())
    throw std::invalid_argument("evaluate_edit: empty unrelated set");

  NoGradGuard ng;
  EditResult r;
  r.efficacy = model.answer_prob(request.prompt, request.target_answer);
  double g = 0.0;
  for (const PromptSpec& p : request.paraphrases)
    g += model.answer_prob(p, request.target_answer);
  r.generalization = g / static_cast<double>(request.paraphrases.size());
  r.specificity = eval_vqa_accuracy(model, request.unrelated);
  return r;
}

std::pair<MultiModalLM, EditResult> apply_edit(const MultiModalLM& model,
                                               const EditRequest& request) {
  const ModelConfig& cfg = model.config();
  request.validate(cfg);
  const int c = request.resolved_constraint_pos(cfg);

  double pre_prob, spec_pre;
  {
    NoGradGuard ng;
    pre_prob = model.answer_prob(request.prompt, request.target_answer);
    spec_pre = request.unrelated.empty() ? 0.0 : eval_vqa_accuracy(model, request.unrelated);
  }

  Tensor k = extract_key(model, request.prompt, request.layer, c);
  ValueOptResult vo =
      optimize_value(model, request.prompt, request.layer, c, request.target_answer,
                     request.value_opt);

  const LayerWeights& lw = model.layer(request.layer);
  NoGradGuard ng;
  // The closed form solves W k = z for the residual write W_proj contributes
  // on top of its bias, in the column convention (d x d_mlp).
  Tensor z_minus_b = Tensor::zeros({cfg.d_model});
  {
    auto dst = z_minus_b.mutable_data();
    const auto zv = vo.z.data();
    const auto bv = lw.b_proj.data();
    for (int i = 0; i < cfg.d_model; ++i) dst[i] = zv[i] - bv[i];
  }
  Tensor w_col = transpose(lw.w_proj);  // d x d_mlp
  Tensor w_star = closed_form_update(w_col, k, z_minus_b, request.lambda);
  Tensor w_new = transpose(w_star);     // back to the stored d_mlp x d layout

  MultiModalLM edited = model.clone();
  {
    Tensor& dst = edited.param("layers." + std::to_string(request.layer) + ".w_proj");
    auto d = dst.mutable_data();
    const auto s = w_new.data();
    std::copy(s.begin(), s.end(), d.begin());
  }

  EditResult res = evaluate_edit(edited, request);
  res.pre_edit_prob = pre_prob;
  res.specificity_pre = spec_pre;
  res.weight_change_norm = frobenius_diff(w_star, w_col);
  res.value_opt_steps = vo.steps;
  res.value_opt_loss = vo.final_loss;
  return {std::move(edited), res};
}

MultiModalLM baseline_finetune(const MultiModalLM& model, const EditRequest& request,
                               bool constrained, const FinetuneConfig& cfg) {
  request.validate(model.config());
  if (cfg.lr <= 0.0 || cfg.max_steps < 0 || cfg.delta < 0.0)
    throw std::invalid_argument("baseline_finetune: bad config");

  MultiModalLM ft = model.clone();
  std::vector<Tensor>& params = ft.parameters();
  std::vector<std::vector<double>> pre;
  if (constrained) {
    pre.reserve(params.size());
    for (const Tensor& p : params) pre.emplace_back(p.data().begin(), p.data().end());
  }
  ft.set_params_requires_grad(true);
  AdamState st = AdamState::init(params, cfg.lr);
  const double stop_nll = -std::log(cfg.stop_prob);

  for (int step = 0; step < cfg.max_steps; ++step) {
    Tensor loss = ft.answer_nll(request.prompt, request.target_answer);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("baseline_finetune: diverged");
    if (lv < stop_nll) break;
    for (Tensor& p : params) p.zero_grad();
    backward(loss);
    adam_step(params, st);
    if (constrained) {
      for (size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_data();
        const std::vector<double>& p0 = pre[i];
        for (size_t j = 0; j < w.size(); ++j)
          w[j] = std::clamp(w[j], p0[j] - cfg.delta, p0[j] + cfg.delta);
      }
    }
  }
  ft.set_params_requires_grad(false);
  return ft;
}

std::vector<double> layer_sweep(const MultiModalLM& model,
                                std::span<const EditRequest> requests,
                                std::span<const int> layers) {
  if (requests.empty()) throw std::invalid_argument("layer_sweep: no requests");
  const int L = model.config().n_layers;
  for (int l : layers)
    if (l < 0 || l >= L) throw std::invalid_argument("layer_sweep: layer out of range");

  std::vector<double> out;
  out.reserve(layers.size());
  for (int l : layers) {
    double acc = 0.0;
    for (const EditRequest& r : requests) {
      EditRequest rq = r;
      rq.layer = l;
      acc += apply_edit(model, rq).second.efficacy;
    }
    out.push_back(acc / static_cast<double>(requests.size()));
  }
  return out;
}

}  // namespace mmtl
