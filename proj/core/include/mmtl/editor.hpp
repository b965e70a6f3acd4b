#pragma once

#include <span>
#include <utility>
#include <vector>

#include "mmtl/model.hpp"
#include "mmtl/world.hpp"

namespace mmtl {

struct ValueOptConfig {
  double lr = 0.1;
  int max_steps = 100;
  double stop_loss = 0.05;
};

struct FinetuneConfig {
  double lr = 1e-3;
  int max_steps = 100;
  double stop_prob = 0.9;   // stop once P(O*) exceeds this
  double delta = 1e-3;      // L-inf ball radius in constrained mode
};

/// One rewrite: make `prompt` answer `target_answer`, editing W_proj of
/// `layer` at the constraint position. Paraphrases share the target answer;
/// unrelated prompts keep their own gold answers and measure collateral
/// damage.
struct EditRequest {
  PromptSpec prompt;
  std::vector<int> target_answer;  // O*
  int layer = 0;
  int constraint_pos = -1;  // sequence position of the key; -1 = last token of visual span
  double lambda = 0.01;
  ValueOptConfig value_opt;
  std::vector<PromptSpec> paraphrases;
  std::vector<PromptSpec> unrelated;

  void validate(const ModelConfig& cfg) const;
  int resolved_constraint_pos(const ModelConfig& cfg) const;
};

struct EditResult {
  double efficacy = 0.0;         // P(O*) on the request prompt
  double generalization = 0.0;   // mean P(O*) over paraphrases
  double specificity = 0.0;      // VQA accuracy on the unrelated set
  double specificity_pre = 0.0;  // same, measured on the unedited model
  double pre_edit_prob = 0.0;    // P(O*) before editing
  double weight_change_norm = 0.0;  // ||W* - W'||_F
  int value_opt_steps = 0;
  double value_opt_loss = 0.0;
};

/// The key vector: the post-GELU W_proj input at (constraint position, layer).
Tensor extract_key(const MultiModalLM& model, const PromptSpec& prompt, int layer, int c);

/// Optional noise-robust variant: mean key over `n_samples` re-rendered
/// images of the prompt's entity.
Tensor extract_key_averaged(const MultiModalLM& model, const World& world,
                            const PromptSpec& prompt, int layer, int c, int n_samples);

struct ValueOptResult {
  Tensor z;  // optimized mlp_out row at (c, layer)
  int steps = 0;
  double final_loss = 0.0;
};

/// Gradient-descends a replacement MLP output z at (c, layer) until the
/// patched model assigns the target answer a summed NLL below stop_loss.
ValueOptResult optimize_value(const MultiModalLM& model, const PromptSpec& prompt,
                              int layer, int c, const std::vector<int>& target,
                              const ValueOptConfig& cfg = {});

/// W* = (lambda W' + z k^T)(lambda I + k k^T)^-1 for W' of shape d x d_mlp,
/// k of length d_mlp, z of length d.
Tensor closed_form_update(const Tensor& w_proj, const Tensor& k, const Tensor& z,
                          double lambda);

/// Metrics of `model` against an edit request (works for edited and unedited
/// models alike). Fills efficacy, generalization, and specificity.
EditResult evaluate_edit(const MultiModalLM& model, const EditRequest& request);

/// Full MultEdit pipeline: key extraction, value optimization, closed-form
/// W_proj rewrite on a clone, and metric evaluation. The input model is
/// untouched.
std::pair<MultiModalLM, EditResult> apply_edit(const MultiModalLM& model,
                                               const EditRequest& request);

/// Fine-tuning baseline: Adam on all weights of a clone until P(O*) passes
/// stop_prob. Constrained mode projects every weight back into an L-inf ball
/// around its pre-edit value after each step.
MultiModalLM baseline_finetune(const MultiModalLM& model, const EditRequest& request,
                               bool constrained, const FinetuneConfig& cfg = {});

/// Mean efficacy of apply_edit per candidate layer.
std::vector<double> layer_sweep(const MultiModalLM& model,
                                std::span<const EditRequest> requests,
                                std::span<const int> layers);

}  // namespace mmtl
