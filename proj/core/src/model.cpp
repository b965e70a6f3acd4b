#include "mmtl/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mmtl/rng.hpp"

namespace mmtl {

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  if (d_mlp < 1) throw std::invalid_argument("ModelConfig: d_mlp must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (patch_grid < 0) throw std::invalid_argument("ModelConfig: patch_grid must be >= 0");
  if (patch_grid > 0 && (patch_dim < 1 || d_vis < 1))
    throw std::invalid_argument("ModelConfig: patch_dim/d_vis must be >= 1");
  if (max_text_len < 2) throw std::invalid_argument("ModelConfig: max_text_len must be >= 2");
  if (eos_token < 0 || eos_token >= vocab_size)
    throw std::invalid_argument("ModelConfig: eos_token out of vocabulary");
}

void PromptSpec::validate() const {
  auto check_span = [&](const TokenSpan& s, const char* what) {
    if (s.begin < 0 || s.end > question_len() || s.begin > s.end)
      throw std::invalid_argument(std::string("PromptSpec: ") + what + " out of bounds");
  };
  check_span(visual_constraint_span, "visual_constraint_span");
  if (text_constraint_span) {
    check_span(*text_constraint_span, "text_constraint_span");
    if (!visual_constraint_span.empty() && !text_constraint_span->empty() &&
        visual_constraint_span.overlaps(*text_constraint_span))
      throw std::invalid_argument("PromptSpec: constraint spans overlap");
  }
}

const char* site_name(Site s) {
  switch (s) {
    case Site::hidden: return "hidden";
    case Site::mlp_out: return "mlp";
    case Site::attn_out: return "attn";
    case Site::embedding: return "embedding";
  }
  return "?";
}

Site site_from_name(const std::string& name) {
  if (name == "hidden") return Site::hidden;
  if (name == "mlp" || name == "mlp_out") return Site::mlp_out;
  if (name == "attn" || name == "attn_out") return Site::attn_out;
  if (name == "embedding") return Site::embedding;
  throw std::invalid_argument("unknown site: " + name);
}

Intervention Intervention::replace_at(Site site, int layer, int position, Tensor value) {
  Intervention iv;
  iv.site = site;
  iv.layers = {layer};
  iv.positions = {position};
  iv.action = Action::replace;
  iv.value = std::move(value);
  return iv;
}

Intervention Intervention::noise_at(Site site, std::vector<int> positions, double sigma,
                                    uint64_t seed) {
  Intervention iv;
  iv.site = site;
  iv.positions = std::move(positions);
  iv.action = Action::add_noise;
  iv.noise_sigma = sigma;
  iv.noise_seed = seed;
  return iv;
}

MultiModalLM::MultiModalLM(ModelConfig config) : cfg_(config) {
  cfg_.validate();
  build_params();
}

void MultiModalLM::build_params() {
  Rng rng(cfg_.seed);
  const int d = cfg_.d_model;
  const double base_std = 0.02;
  // Residual-branch output matrices shrunk by depth, GPT-2 style.
  const double out_std = base_std / std::sqrt(2.0 * cfg_.n_layers);

  auto push = [&](const std::string& name, Tensor t) {
    by_name_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(t);
    return t;
  };

  tok_embed_ = push("tok_embed", Tensor::randn({cfg_.vocab_size, d}, base_std, rng));
  pos_embed_ = push("pos_embed", Tensor::randn({cfg_.seq_capacity(), d}, base_std, rng));
  // Vision path is linear and bias-free; fan-in scale on the encoder keeps the
  // entity signature visible against the positional rows from step one.
  vis_encode_ = push("vis_encode",
                     Tensor::randn({std::max(cfg_.patch_dim, 1), std::max(cfg_.d_vis, 1)},
                                   1.0 / std::sqrt(std::max(cfg_.patch_dim, 1)), rng));
  vis_project_ = push("vis_project",
                      Tensor::randn({std::max(cfg_.d_vis, 1), d}, base_std, rng));

  layers_.resize(cfg_.n_layers);
  for (int i = 0; i < cfg_.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights& lw = layers_[i];
    lw.ln1_gain = push(p + "ln1_gain", Tensor::full({d}, 1.0));
    lw.ln1_bias = push(p + "ln1_bias", Tensor::zeros({d}));
    lw.wq = push(p + "wq", Tensor::randn({d, d}, base_std, rng));
    lw.wk = push(p + "wk", Tensor::randn({d, d}, base_std, rng));
    lw.wv = push(p + "wv", Tensor::randn({d, d}, base_std, rng));
    lw.wo = push(p + "wo", Tensor::randn({d, d}, out_std, rng));
    lw.bo = push(p + "bo", Tensor::zeros({d}));
    lw.ln2_gain = push(p + "ln2_gain", Tensor::full({d}, 1.0));
    lw.ln2_bias = push(p + "ln2_bias", Tensor::zeros({d}));
    lw.w_fc = push(p + "w_fc", Tensor::randn({d, cfg_.d_mlp}, base_std, rng));
    lw.b_fc = push(p + "b_fc", Tensor::zeros({cfg_.d_mlp}));
    lw.w_proj = push(p + "w_proj", Tensor::randn({cfg_.d_mlp, d}, out_std, rng));
    lw.b_proj = push(p + "b_proj", Tensor::zeros({d}));
  }
  lnf_gain_ = push("lnf_gain", Tensor::full({d}, 1.0));
  lnf_bias_ = push("lnf_bias", Tensor::zeros({d}));
  lm_head_ = push("lm_head", Tensor::randn({d, cfg_.vocab_size}, base_std, rng));
}

Tensor& MultiModalLM::param(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("no parameter named " + name);
  return params_[it->second];
}

const Tensor& MultiModalLM::param(const std::string& name) const {
  return const_cast<MultiModalLM*>(this)->param(name);
}

void MultiModalLM::set_params_requires_grad(bool v) {
  for (Tensor& p : params_) p.set_requires_grad(v);
}

MultiModalLM MultiModalLM::clone() const {
  MultiModalLM copy(cfg_);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].data();
    auto dst = copy.params_[i].mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
    copy.params_[i].set_requires_grad(params_[i].requires_grad());
  }
  return copy;
}

Tensor MultiModalLM::encode_and_project(std::span<const double> image) const {
  const int n = cfg_.n_visual();
  if (n == 0) throw std::invalid_argument("encode_and_project: model has no visual slots");
  if (static_cast<int>(image.size()) != n * cfg_.patch_dim)
    throw std::invalid_argument("encode_and_project: expected " +
                                std::to_string(n * cfg_.patch_dim) + " image values, got " +
                                std::to_string(image.size()));
  Tensor patches = Tensor::mat(n, cfg_.patch_dim, {image.begin(), image.end()});
  Tensor v = matmul(matmul(patches, vis_encode_), vis_project_);
  return add(v, slice_rows(pos_embed_, 0, n));
}

namespace {

Tensor noise_row(const Intervention& iv, int position, int width) {
  Rng rng(mix_seed(iv.noise_seed, static_cast<uint64_t>(position)));
  std::vector<double> row(width);
  for (double& x : row) x = iv.noise_sigma * rng.normal();
  return Tensor::vec(std::move(row));
}

bool has_layer(const Intervention& iv, int layer) {
  return std::find(iv.layers.begin(), iv.layers.end(), layer) != iv.layers.end();
}

/// Rewrites rows of `t` for every intervention matching (site, layer),
/// preserving declaration order. layer = -1 means the embedding site.
Tensor apply_interventions(Tensor t, Site site, int layer,
                           std::span<const Intervention> ivs, int width) {
  for (const Intervention& iv : ivs) {
    if (iv.site != site) continue;
    if (site != Site::embedding && !has_layer(iv, layer)) continue;
    for (int p : iv.positions) {
      if (iv.action == Intervention::Action::replace)
        t = row_overwrite(t, p, iv.value);
      else
        t = row_add(t, p, noise_row(iv, p, width));
    }
  }
  return t;
}

int argmax_row(const Tensor& m, int row) {
  int best = 0;
  double best_v = m.at(row, 0);
  for (int j = 1; j < m.cols(); ++j) {
    if (m.at(row, j) > best_v) {
      best_v = m.at(row, j);
      best = j;
    }
  }
  return best;
}

}  // namespace

Tensor MultiModalLM::embed_sequence(const PromptSpec& prompt, const std::vector<int>& tokens,
                                    std::span<const Intervention> interventions) const {
  const int n = cfg_.n_visual();
  const int m = static_cast<int>(tokens.size());
  Tensor txt = add(embedding_rows(tok_embed_, tokens), slice_rows(pos_embed_, n, n + m));
  Tensor x = n > 0 ? vstack({encode_and_project(prompt.image), txt}) : txt;
  return apply_interventions(x, Site::embedding, -1, interventions, cfg_.d_model);
}

ForwardResult MultiModalLM::forward(const PromptSpec& prompt,
                                    std::span<const Intervention> interventions,
                                    bool want_cache,
                                    const std::vector<int>* text_tokens) const {
  const std::vector<int>& tokens = text_tokens ? *text_tokens : prompt.question_tokens;
  const int n = cfg_.n_visual();
  const int m = static_cast<int>(tokens.size());
  const int s = n + m;
  if (m < 1) throw std::invalid_argument("forward: empty token sequence");
  if (m > cfg_.max_text_len)
    throw std::invalid_argument("forward: text length " + std::to_string(m) +
                                " exceeds max_text_len " + std::to_string(cfg_.max_text_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg_.vocab_size)
      throw std::invalid_argument("forward: token id out of vocabulary");
  if (n == 0 && !prompt.image.empty())
    throw std::invalid_argument("forward: image given to a text-only model");
  for (const Intervention& iv : interventions) {
    for (int p : iv.positions)
      if (p < 0 || p >= s)
        throw std::invalid_argument("intervention position out of range");
    if (iv.site != Site::embedding)
      for (int l : iv.layers)
        if (l < 0 || l >= cfg_.n_layers)
          throw std::invalid_argument("intervention layer out of range");
    if (iv.action == Intervention::Action::replace) {
      if (!iv.value.defined() || iv.value.ndim() != 1 ||
          iv.value.numel() != static_cast<size_t>(cfg_.d_model))
        throw std::invalid_argument("intervention value must be a length-d_model vector");
    }
  }

  auto cache = want_cache ? std::make_shared<ActivationCache>() : nullptr;
  if (cache) {
    cache->seq_len = s;
    cache->n_visual = n;
    cache->hidden.resize(cfg_.n_layers);
    cache->attn_out.resize(cfg_.n_layers);
    cache->mlp_out.resize(cfg_.n_layers);
    cache->mlp_proj_in.resize(cfg_.n_layers);
    cache->attn.assign(cfg_.n_layers, {});
  }

  Tensor x = embed_sequence(prompt, tokens, interventions);
  if (cache) cache->embed = x.detach();

  const int dh = cfg_.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const LayerWeights& lw = layers_[l];
    Tensor ln1 = layernorm_rows(x, lw.ln1_gain, lw.ln1_bias);
    Tensor q = matmul(ln1, lw.wq);
    Tensor k = matmul(ln1, lw.wk);
    Tensor v = matmul(ln1, lw.wv);
    std::vector<Tensor> ctx_parts;
    ctx_parts.reserve(cfg_.n_heads);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      Tensor att = softmax_rows(scores, /*causal=*/true);
      if (cache) cache->attn[l].push_back(att.detach());
      ctx_parts.push_back(matmul(att, vh));
    }
    Tensor attn_out = add_rowvec(matmul(hstack(ctx_parts), lw.wo), lw.bo);
    attn_out = apply_interventions(attn_out, Site::attn_out, l, interventions, cfg_.d_model);
    if (cache) cache->attn_out[l] = attn_out.detach();
    x = add(x, attn_out);

    Tensor ln2 = layernorm_rows(x, lw.ln2_gain, lw.ln2_bias);
    Tensor proj_in = gelu(add_rowvec(matmul(ln2, lw.w_fc), lw.b_fc));
    if (cache) cache->mlp_proj_in[l] = proj_in.detach();
    Tensor mlp_out = add_rowvec(matmul(proj_in, lw.w_proj), lw.b_proj);
    mlp_out = apply_interventions(mlp_out, Site::mlp_out, l, interventions, cfg_.d_model);
    if (cache) cache->mlp_out[l] = mlp_out.detach();
    x = add(x, mlp_out);

    x = apply_interventions(x, Site::hidden, l, interventions, cfg_.d_model);
    if (cache) cache->hidden[l] = x.detach();
  }

  Tensor logits = matmul(layernorm_rows(x, lnf_gain_, lnf_bias_), lm_head_);
  if (cache) cache->logits = logits.detach();
  return {logits, cache};
}

Tensor MultiModalLM::answer_nll(const PromptSpec& prompt, const std::vector<int>& answer,
                                std::span<const Intervention> interventions) const {
  if (answer.empty()) throw std::invalid_argument("answer_nll: empty answer");
  std::vector<int> full = prompt.question_tokens;
  full.insert(full.end(), answer.begin(), answer.end());
  ForwardResult res = forward(prompt, interventions, /*want_cache=*/false, &full);
  // Token answer[t] is predicted from the row just before it.
  const int first = cfg_.n_visual() + prompt.question_len() - 1;
  const int len = static_cast<int>(answer.size());
  Tensor lp = log_softmax_rows(slice_rows(res.logits, first, first + len));
  std::vector<std::pair<int, int>> picks;
  picks.reserve(answer.size());
  for (int t = 0; t < len; ++t) picks.emplace_back(t, answer[t]);
  return neg_pick_sum(lp, picks);
}

double MultiModalLM::answer_prob(const PromptSpec& prompt, const std::vector<int>& answer,
                                 std::span<const Intervention> interventions) const {
  NoGradGuard ng;
  return std::exp(-answer_nll(prompt, answer, interventions).item());
}

std::vector<int> MultiModalLM::generate_greedy(
    const PromptSpec& prompt, int max_new, std::span<const Intervention> interventions) const {
  if (max_new < 1) throw std::invalid_argument("generate_greedy: max_new must be >= 1");
  NoGradGuard ng;
  std::vector<int> tokens = prompt.question_tokens;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= cfg_.max_text_len) break;
    ForwardResult res = forward(prompt, interventions, /*want_cache=*/false, &tokens);
    int next = argmax_row(res.logits, res.logits.rows() - 1);
    if (next == cfg_.eos_token) break;
    out.push_back(next);
    tokens.push_back(next);
  }
  return out;
}

}  // namespace mmtl
