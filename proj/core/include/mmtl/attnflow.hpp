#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmtl/model.hpp"

namespace mmtl {

/// Per-head-summed attention contribution vector a_ij at `layer`: how much of
/// the block's output at position i came from position j,
///   a_ij = sum_h A_ij^h * (LN1(resid_{j}) W_v^h) W_o^h.
/// j in the masked future yields a zero vector (and *masked = true).
Tensor contribution(const MultiModalLM& model, const ActivationCache& cache, int layer,
                    int i, int j, bool* masked = nullptr);

/// Sum of a_ij over j <= i; equals the cached attention block output at
/// (i, layer) minus the output bias.
Tensor contribution_row_sum(const MultiModalLM& model, const ActivationCache& cache,
                            int layer, int i);

struct ContributionProfile {
  int layer = -1;
  int target = -1;             // position i
  std::vector<int> sources;    // positions j
  std::vector<Tensor> vectors; // a_ij per source
  std::vector<double> norms;   // ||a_ij|| per source
};

ContributionProfile contribution_profile(const MultiModalLM& model,
                                         const ActivationCache& cache, int layer,
                                         int target, std::span<const int> sources);

/// Norms ||a_{c,j}|| from every visual token j to the last token c of the
/// visual constraint span, for every layer. Shape [N][L].
std::vector<std::vector<double>> visual_to_constraint_profile(const MultiModalLM& model,
                                                              const PromptSpec& prompt);

/// Norms ||a_{last,c}|| from the constraint token to the final question token,
/// one entry per layer.
std::vector<double> constraint_to_last_profile(const MultiModalLM& model,
                                               const PromptSpec& prompt);

/// Rank-based AUROC with ties counted 1/2; labels are 0/1 and both classes
/// must be present.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct DetectorModel {
  int layer_a = -1;
  int layer_b = -1;
  double threshold = 0.0;
  double validation_auroc = 0.0;

  double score(std::span<const double> profile) const {
    return 0.5 * (profile[layer_a] + profile[layer_b]);
  }
  bool predict(std::span<const double> profile) const { return score(profile) >= threshold; }
};

/// Correctness detector over constraint->last contribution strength: picks the
/// layer pair whose mean norm best separates correct from incorrect prompts on
/// the given validation set (ties resolved toward the lowest indices), then a
/// threshold maximizing validation accuracy.
DetectorModel fit_detector(const MultiModalLM& model, std::span<const PromptSpec> prompts,
                           std::span<const int> labels);

/// Probability the model assigns to its own greedy first answer token.
double confidence_baseline(const MultiModalLM& model, const PromptSpec& prompt);

}  // namespace mmtl
