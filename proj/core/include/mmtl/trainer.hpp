#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmtl/model.hpp"
#include "mmtl/world.hpp"

namespace mmtl {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 8;
  double lr = 2e-3;
  double lr_min_frac = 0.1;  // cosine decays to lr * lr_min_frac
  int warmup_steps = 100;
  double weight_decay = 0.0;
  uint64_t seed = 1234;
  double target_accuracy = 0.95;  // early stop once eval/train accuracy reaches this
  int eval_every = 2;             // epochs between eval passes
  std::string curve_csv;          // when set, per-epoch loss/accuracy rows land here

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_loss;      // mean answer-token NLL per epoch
  std::vector<double> epoch_eval_acc;  // -1 for epochs without an eval pass
  double final_train_accuracy = 0.0;   // greedy exact-match over the full train split
  double final_multi_accuracy = 0.0;   // same for the award family
  int epochs_run = 0;
  int steps = 0;
};

/// Model config matched to a world's vocabulary and patch geometry.
ModelConfig default_model_config(const World& world, bool text_only, uint64_t model_seed);

/// Teacher-forced training on answer positions only. Each epoch visits every
/// train fact in its visual form ("this entity" + own image) and its named
/// form ("the entX" + a random entity's image), plus the award facts in
/// alternating forms, rotating paraphrase templates and image-noise seeds.
/// The mismatched images in named samples teach the model that an explicit
/// name overrides the image — exactly the situation token-replacement
/// corruption creates at trace time.
TrainReport train(MultiModalLM& model, const World& world, const TrainConfig& config);

/// Same facts and schedule, but named forms only and no visual positions.
MultiModalLM train_text_twin(const World& world, const TrainConfig& config,
                             uint64_t model_seed = 18);

/// Greedy exact-match accuracy against each prompt's gold answer.
double eval_vqa_accuracy(const MultiModalLM& model, const std::vector<PromptSpec>& prompts);

/// Accuracy over single-constraint facts, with sample seeds disjoint from
/// training's (held-out image noise). Uses named prompts for text-only models.
double fact_accuracy(const MultiModalLM& model, const World& world,
                     const std::vector<int>& fact_ids, uint64_t salt);
double multi_fact_accuracy(const MultiModalLM& model, const World& world, uint64_t salt);

/// The evaluation prompt for one fact (same rotation fact_accuracy uses).
PromptSpec eval_prompt(const World& world, const Fact& fact, uint64_t salt, bool named);

}  // namespace mmtl
