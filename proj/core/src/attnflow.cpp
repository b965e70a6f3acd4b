#include "mmtl/attnflow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mmtl {

namespace {

double vec_norm(const Tensor& t) {
  double s = 0.0;
  for (double x : t.data()) s += x * x;
  return std::sqrt(s);
}

int last_question_pos(const MultiModalLM& model, const PromptSpec& prompt) {
  return model.config().n_visual() + prompt.question_len() - 1;
}

int constraint_pos(const MultiModalLM& model, const PromptSpec& prompt) {
  if (prompt.visual_constraint_span.empty())
    throw std::invalid_argument("contribution profile: prompt has no visual constraint");
  return model.config().n_visual() + prompt.visual_constraint_span.end - 1;
}

}  // namespace

Tensor contribution(const MultiModalLM& model, const ActivationCache& cache, int layer,
                    int i, int j, bool* masked) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.n_layers)
    throw std::invalid_argument("contribution: layer out of range");
  if (i < 0 || i >= cache.seq_len || j < 0 || j >= cache.seq_len)
    throw std::invalid_argument("contribution: position out of range");
  if (static_cast<int>(cache.attn.size()) <= layer || cache.attn[layer].empty())
    throw std::invalid_argument("contribution: cache is missing attention matrices");
  if (masked) *masked = j > i;
  if (j > i) return Tensor::zeros({cfg.d_model});

  NoGradGuard ng;
  const LayerWeights& lw = model.layer(layer);
  const int dh = cfg.d_head();
  Tensor gj = layernorm_rows(slice_rows(cache.hidden_before(layer), j, j + 1), lw.ln1_gain,
                             lw.ln1_bias);
  Tensor out = Tensor::zeros({cfg.d_model});
  auto acc = out.mutable_data();
  for (int h = 0; h < cfg.n_heads; ++h) {
    const double a = cache.attn[layer][h].at(i, j);
    Tensor vh = matmul(gj, slice_cols(lw.wv, h * dh, (h + 1) * dh));   // 1 x dh
    Tensor oh = matmul(vh, slice_rows(lw.wo, h * dh, (h + 1) * dh));   // 1 x d
    const auto& o = oh.data();
    for (int c = 0; c < cfg.d_model; ++c) acc[c] += a * o[c];
  }
  return out;
}

Tensor contribution_row_sum(const MultiModalLM& model, const ActivationCache& cache,
                            int layer, int i) {
  const int d = model.config().d_model;
  Tensor sum = Tensor::zeros({d});
  auto acc = sum.mutable_data();
  for (int j = 0; j <= i; ++j) {
    Tensor a = contribution(model, cache, layer, i, j);
    const auto& v = a.data();
    for (int c = 0; c < d; ++c) acc[c] += v[c];
  }
  return sum;
}

ContributionProfile contribution_profile(const MultiModalLM& model,
                                         const ActivationCache& cache, int layer,
                                         int target, std::span<const int> sources) {
  ContributionProfile p;
  p.layer = layer;
  p.target = target;
  for (int j : sources) {
    Tensor a = contribution(model, cache, layer, target, j);
    p.sources.push_back(j);
    p.norms.push_back(vec_norm(a));
    p.vectors.push_back(std::move(a));
  }
  return p;
}

std::vector<std::vector<double>> visual_to_constraint_profile(const MultiModalLM& model,
                                                              const PromptSpec& prompt) {
  const ModelConfig& cfg = model.config();
  const int n = cfg.n_visual();
  if (n == 0)
    throw std::invalid_argument("visual_to_constraint_profile: model has no visual tokens");
  const int c = constraint_pos(model, prompt);

  NoGradGuard ng;
  ForwardResult res = model.forward(prompt, {}, /*want_cache=*/true);
  std::vector<std::vector<double>> out(n, std::vector<double>(cfg.n_layers, 0.0));
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int j = 0; j < n; ++j)
      out[j][l] = vec_norm(contribution(model, *res.cache, l, c, j));
  return out;
}

std::vector<double> constraint_to_last_profile(const MultiModalLM& model,
                                               const PromptSpec& prompt) {
  const ModelConfig& cfg = model.config();
  const int c = constraint_pos(model, prompt);
  const int last = last_question_pos(model, prompt);

  NoGradGuard ng;
  ForwardResult res = model.forward(prompt, {}, /*want_cache=*/true);
  std::vector<double> out(cfg.n_layers, 0.0);
  for (int l = 0; l < cfg.n_layers; ++l)
    out[l] = vec_norm(contribution(model, *res.cache, l, last, c));
  return out;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auroc: scores/labels size mismatch");
  const size_t n = scores.size();
  size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auroc: labels must be 0/1");
    n_pos += static_cast<size_t>(l);
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auroc: both classes must be present");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks across ties, then the Mann-Whitney U statistic.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                      static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

DetectorModel fit_detector(const MultiModalLM& model, std::span<const PromptSpec> prompts,
                           std::span<const int> labels) {
  if (prompts.size() != labels.size())
    throw std::invalid_argument("fit_detector: prompts/labels size mismatch");
  if (prompts.empty()) throw std::invalid_argument("fit_detector: empty validation set");
  bool has0 = false, has1 = false;
  for (int l : labels) (l == 1 ? has1 : has0) = true;
  if (!has0 || !has1)
    throw std::invalid_argument("fit_detector: labels contain a single class");

  const int L = model.config().n_layers;
  std::vector<std::vector<double>> profiles;
  profiles.reserve(prompts.size());
  for (const PromptSpec& p : prompts)
    profiles.push_back(constraint_to_last_profile(model, p));

  DetectorModel best;
  best.validation_auroc = -1.0;
  std::vector<double> scores(prompts.size());
  for (int a = 0; a < L; ++a) {
    for (int b = a + 1; b < L; ++b) {
      for (size_t k = 0; k < profiles.size(); ++k)
        scores[k] = 0.5 * (profiles[k][a] + profiles[k][b]);
      const double auc = auroc(scores, labels);
      if (auc > best.validation_auroc) {
        best.layer_a = a;
        best.layer_b = b;
        best.validation_auroc = auc;
      }
    }
  }

  // Threshold maximizing validation accuracy (predict "correct" when
  // score >= threshold); ties resolve toward the lowest threshold.
  for (size_t k = 0; k < profiles.size(); ++k)
    scores[k] = best.score(profiles[k]);
  std::vector<double> cand = {std::numeric_limits<double>::lowest()};
  cand.insert(cand.end(), scores.begin(), scores.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  size_t best_hits = 0;
  double best_thr = cand.front();
  for (double thr : cand) {
    size_t hits = 0;
    for (size_t k = 0; k < scores.size(); ++k)
      if ((scores[k] >= thr ? 1 : 0) == labels[k]) ++hits;
    if (hits > best_hits) {
      best_hits = hits;
      best_thr = thr;
    }
  }
  best.threshold = best_thr;
  return best;
}

double confidence_baseline(const MultiModalLM& model, const PromptSpec& prompt) {
  NoGradGuard ng;
  ForwardResult res = model.forward(prompt);
  const int last = res.logits.rows() - 1;
  Tensor sm = softmax_rows(slice_rows(res.logits, last, last + 1));
  double best = 0.0;
  for (double p : sm.data()) best = std::max(best, p);
  return best;
}

}  // namespace mmtl
