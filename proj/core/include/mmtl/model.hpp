#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmtl/tensor.hpp"

namespace mmtl {

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 4;
  int d_model = 128;
  int d_mlp = 512;
  int vocab_size = 0;
  int patch_grid = 4;   // P; the image is P×P patches, N = P² visual tokens
  int patch_dim = 16;   // input width of one patch vector
  int d_vis = 32;       // vision encoder output width
  int max_text_len = 16;
  int eos_token = -1;
  uint64_t seed = 17;

  int n_visual() const { return patch_grid * patch_grid; }
  int d_head() const { return d_model / n_heads; }
  int seq_capacity() const { return n_visual() + max_text_len; }
  void validate() const;
};

/// Half-open token span [begin, end) into a question's token list.
struct TokenSpan {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool overlaps(const TokenSpan& o) const { return begin < o.end && o.begin < end; }
};

struct PromptMeta {
  int entity = -1;
  int relation = -1;   // -1 for the year-keyed award family
  int year_token = -1; // set for multi-constraint prompts
  int template_id = -1;
  int image_entity = -1;  // whose image is attached; -1 = none
  uint64_t sample_seed = 0;
  bool name_form = false;
  // When the prompt is a corrupted twin, the answer the corrupted question
  // actually asks for.
  std::vector<int> corrupted_true_answer;
};

/// One analyzable unit: an image, a tokenized question with annotated
/// constraint spans, and the gold answer.
struct PromptSpec {
  std::vector<double> image;  // n_visual * patch_dim, row-major; empty = no image
  std::vector<int> question_tokens;
  TokenSpan visual_constraint_span;
  std::optional<TokenSpan> text_constraint_span;
  std::vector<int> answer_tokens;
  PromptMeta metadata;

  int question_len() const { return static_cast<int>(question_tokens.size()); }
  void validate() const;
};

enum class Site { hidden, mlp_out, attn_out, embedding };

const char* site_name(Site s);
Site site_from_name(const std::string& name);

/// Overwrites (or perturbs) a site's output rows before the residual add,
/// at every (layer, position) in the cross product. For Site::embedding the
/// layer set is ignored.
struct Intervention {
  enum class Action { replace, add_noise };

  Site site = Site::hidden;
  std::vector<int> layers;
  std::vector<int> positions;
  Action action = Action::replace;
  Tensor value;              // replace: length d_model row
  double noise_sigma = 0.0;  // add_noise
  uint64_t noise_seed = 0;

  static Intervention replace_at(Site site, int layer, int position, Tensor value);
  static Intervention noise_at(Site site, std::vector<int> positions, double sigma,
                               uint64_t seed);
};

/// Per-layer, per-position records of one forward pass. All tensors are
/// detached copies of what the downstream computation actually consumed
/// (post-intervention when interventions ran).
struct ActivationCache {
  int seq_len = 0;
  int n_visual = 0;
  Tensor embed;                            // S×d, after positional add
  std::vector<Tensor> hidden;              // L entries, S×d residual stream after block
  std::vector<Tensor> attn_out;            // L entries, S×d block output before residual add
  std::vector<Tensor> mlp_out;             // L entries, S×d
  std::vector<Tensor> mlp_proj_in;         // L entries, S×d_mlp, post-GELU input of W_proj
  std::vector<std::vector<Tensor>> attn;   // L × H attention matrices, S×S
  Tensor logits;                           // S×V

  const Tensor& hidden_before(int layer) const {  // residual stream entering `layer`
    return layer == 0 ? embed : hidden[layer - 1];
  }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // d×d, row-vector convention x·W
  Tensor bo;              // d
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc;    // d×d_mlp
  Tensor b_fc;    // d_mlp
  Tensor w_proj;  // d_mlp×d
  Tensor b_proj;  // d
};

struct ForwardResult {
  Tensor logits;  // S×V (kept on the tape when grads are enabled)
  std::shared_ptr<ActivationCache> cache;
};

/// Decoder-only pre-norm transformer over a sequence of N projected visual
/// tokens followed by text tokens, with a single causal mask across both.
class MultiModalLM {
 public:
  explicit MultiModalLM(ModelConfig config);

  const ModelConfig& config() const { return cfg_; }

  /// Visual token embeddings for an image: per-patch encoder, projection to
  /// d_model, plus the learned positional rows for the visual slots.
  Tensor encode_and_project(std::span<const double> image) const;

  /// Full forward over the prompt's image plus `text_tokens` (defaults to
  /// the prompt's question). Interventions are applied in declaration
  /// order at the site outputs before each residual add.
  ForwardResult forward(const PromptSpec& prompt,
                        std::span<const Intervention> interventions = {},
                        bool want_cache = false,
                        const std::vector<int>* text_tokens = nullptr) const;

  /// -log P(answer | image, question) summed over teacher-forced answer
  /// positions; stays on the tape when grads are enabled.
  Tensor answer_nll(const PromptSpec& prompt, const std::vector<int>& answer,
                    std::span<const Intervention> interventions = {}) const;

  /// Product of teacher-forced next-token probabilities of `answer`.
  double answer_prob(const PromptSpec& prompt, const std::vector<int>& answer,
                     std::span<const Intervention> interventions = {}) const;

  /// Argmax decoding; stops after emitting config().eos_token.
  std::vector<int> generate_greedy(const PromptSpec& prompt, int max_new,
                                   std::span<const Intervention> interventions = {}) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  LayerWeights& layer(int i) { return layers_.at(i); }
  const LayerWeights& layer(int i) const { return layers_.at(i); }

  void set_params_requires_grad(bool v);

  /// Deep copy; the clone's weights are independent storage.
  MultiModalLM clone() const;

 private:
  void build_params();
  Tensor embed_sequence(const PromptSpec& prompt, const std::vector<int>& tokens,
                        std::span<const Intervention> interventions) const;

  ModelConfig cfg_;
  Tensor tok_embed_;   // V×d
  Tensor pos_embed_;   // (N+max_text_len)×d
  Tensor vis_encode_;  // patch_dim×d_vis
  Tensor vis_project_; // d_vis×d
  std::vector<LayerWeights> layers_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor lm_head_;     // d×V

  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::map<std::string, size_t> by_name_;
};

}  // namespace mmtl
