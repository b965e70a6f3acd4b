#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmtl/model.hpp"
#include "mmtl/world.hpp"

namespace mmtl {

struct CorruptionSpec {
  enum class Strategy { token_replace, gaussian_embed };
  enum class Target { visual_constraint, text_constraint };

  Strategy strategy = Strategy::token_replace;
  Target target = Target::visual_constraint;
  std::vector<int> replacement;  // token_replace: same length as the target span
  std::vector<int> corrupted_true_answer;  // what the corrupted question really asks
  int distractor_entity = -1;
  double noise_sigma = 0.0;  // gaussian_embed
  uint64_t noise_seed = 0;
};

/// token_replace corruption for `target`: entity spans are replaced by
/// "the <distractor>" (a distractor whose answer differs), year spans by the
/// entity's other year.
CorruptionSpec make_token_replace(const World& world, const PromptSpec& prompt,
                                  CorruptionSpec::Target target, uint64_t seed);

/// Embedding-noise corruption at sigma = 3x the std of the model's token
/// embedding table (the conventional choice; the visual constraint stays in
/// the question and noise drowns the image instead).
CorruptionSpec make_gaussian(const MultiModalLM& model, uint64_t seed);

struct CorruptionResult {
  PromptSpec prompt;  // corrupted question (token_replace) or clean copy (gaussian)
  std::vector<Intervention> interventions;  // embedding noise, gaussian only
  TokenSpan target_span;  // question-relative span the corruption hit
  CorruptionSpec::Strategy strategy = CorruptionSpec::Strategy::token_replace;
  CorruptionSpec::Target target = CorruptionSpec::Target::visual_constraint;
};

CorruptionResult build_corrupted(const PromptSpec& prompt, const CorruptionSpec& spec,
                                 const World& world);

struct TraceGrid {
  Site site = Site::mlp_out;
  int window = 1;
  int n_layers = 0;
  int n_visual = 0;
  int constraint_pos = -1;    // last token of the corrupted span (sequence position)
  int last_visual_pos = -1;   // N-1, or -1 for text-only models
  int last_pos = -1;          // final question token position
  double p_clean = 0.0;
  double p_corr = 0.0;
  std::vector<std::vector<double>> iee;  // [position][layer], positions cover the question
  PromptMeta meta;
  std::vector<int> question_tokens;
  std::vector<int> corrupted_tokens;

  int n_positions() const { return static_cast<int>(iee.size()); }
  double max_iee(int* arg_pos = nullptr, int* arg_layer = nullptr) const;
};

/// The windowed restoration sweep: for every question position k and layer l,
/// rerun the corrupted prompt with the clean activations of `site` copied
/// back at position k, layers [l, min(l+W, L)), and record
/// P_restored(O) - P_corr(O).
TraceGrid run_trace(const MultiModalLM& model, const PromptSpec& prompt,
                    const CorruptionResult& corrupted, Site site, int window);

/// Smallest window whose max IEE reaches theta * (P_clean - P_corr), or
/// nullopt. Throws if the corruption margin P_clean - P_corr is below
/// `margin` (the sweep would be meaningless).
std::optional<int> min_causal_window(const MultiModalLM& model, const PromptSpec& prompt,
                                     const CorruptionResult& corrupted, Site site,
                                     double theta = 0.5, double margin = 0.1);

/// Diagnostic: restoring the hidden site at every position and layer must
/// reproduce the clean run's logits bitwise.
bool full_substitution_matches(const MultiModalLM& model, const PromptSpec& prompt,
                               const CorruptionResult& corrupted);

/// Year-swap trace for multi-constraint prompts (text_constraint target).
TraceGrid trace_multiconstraint(const MultiModalLM& model, const World& world,
                                const PromptSpec& prompt, int window,
                                Site site = Site::mlp_out, uint64_t seed = 0);

struct TraceSummary {
  Site site = Site::mlp_out;
  int window = 1;
  int n_grids = 0;
  std::vector<double> mean_iee_constraint;   // per layer
  std::vector<double> mean_iee_last;         // per layer
  std::vector<double> mean_iee_last_visual;  // per layer (empty for text-only)
  int argmax_layer_constraint = -1;
  int argmax_layer_last = -1;
  int argmax_layer_last_visual = -1;
};

TraceSummary summarize(std::span<const TraceGrid> grids);

std::string grid_header_json(const TraceGrid& grid);
std::string grid_csv(const TraceGrid& grid);
std::string summary_csv(const TraceSummary& s);

}  // namespace mmtl
