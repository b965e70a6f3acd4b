#include <doctest.h>

#include <filesystem>

#include "mmtl/fsio.hpp"
#include "mmtl/trainer.hpp"

using namespace mmtl;

namespace {

// A deliberately small task so real training finishes in seconds.
World tiny_world() {
  World w = World::generate(6, 1, 21);
  w.image.patch_grid = 2;
  w.image.patch_dim = 4;
  return w;
}

ModelConfig tiny_model_config(const World& w) {
  ModelConfig cfg = default_model_config(w, /*text_only=*/false, /*model_seed=*/3);
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 32;
  cfg.d_mlp = 64;
  cfg.d_vis = 8;
  return cfg;
}

TrainConfig tiny_train_config() {
  TrainConfig tc;
  tc.epochs = 140;  // early-stops around epoch 72 at 100% train accuracy
  tc.batch_size = 8;
  tc.lr = 4e-3;
  tc.warmup_steps = 10;
  tc.seed = 77;
  tc.target_accuracy = 1.0;
  tc.eval_every = 4;
  return tc;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  tc.epochs = -1;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.lr = 0.0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.target_accuracy = 1.5;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.eval_every = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}

TEST_CASE("default_model_config mirrors the world") {
  World w = tiny_world();
  ModelConfig cfg = default_model_config(w, false, 3);
  CHECK(cfg.vocab_size == w.vocab_size());
  CHECK(cfg.eos_token == w.eos_token());
  CHECK(cfg.patch_grid == w.image.patch_grid);
  CHECK(cfg.patch_dim == w.image.patch_dim);
  CHECK(cfg.seed == 3);
  ModelConfig text = default_model_config(w, true, 3);
  CHECK(text.patch_grid == 0);
  CHECK(text.n_visual() == 0);
}

TEST_CASE("training fits the tiny task end to end") {
  World w = tiny_world();
  MultiModalLM model(tiny_model_config(w));
  TrainConfig tc = tiny_train_config();
  auto dir = std::filesystem::temp_directory_path() / "mmtl_trainer_test";
  std::filesystem::create_directories(dir);
  tc.curve_csv = (dir / "curve.csv").string();

  TrainReport rep = train(model, w, tc);

  REQUIRE(rep.epochs_run >= 1);
  REQUIRE(static_cast<int>(rep.epoch_loss.size()) == rep.epochs_run);
  REQUIRE(rep.epoch_eval_acc.size() == rep.epoch_loss.size());
  CHECK(rep.steps >= rep.epochs_run);  // at least one step per epoch
  // the fit must be real: loss shrinks and the facts are learned
  CHECK(rep.epoch_loss.back() < 0.5 * rep.epoch_loss.front());
  CHECK(rep.final_train_accuracy >= 0.8);

  // curve file: header plus one row per epoch
  std::string csv = read_file(tc.curve_csv);
  CHECK(csv.rfind("epoch,mean_answer_nll,eval_accuracy\n", 0) == 0);
  size_t lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == static_cast<size_t>(rep.epochs_run) + 1);

  SUBCASE("an already-fit model early-stops at the first eval") {
    TrainConfig again = tiny_train_config();
    again.epochs = 10;
    again.target_accuracy = std::max(0.01, rep.final_train_accuracy - 0.2);
    again.eval_every = 1;
    again.curve_csv.clear();
    TrainReport rep2 = train(model, w, again);
    CHECK(rep2.epochs_run == 1);
  }

  SUBCASE("evaluation helpers agree with the trained model") {
    // deterministic for a fixed salt
    CHECK(fact_accuracy(model, w, w.train_split, 5) ==
          fact_accuracy(model, w, w.train_split, 5));
    // eval_prompt feeds eval_vqa_accuracy the same prompts fact_accuracy uses
    std::vector<PromptSpec> prompts;
    for (int fid : w.train_split) prompts.push_back(eval_prompt(w, w.fact(fid), 5, false));
    CHECK(eval_vqa_accuracy(model, prompts) ==
          doctest::Approx(fact_accuracy(model, w, w.train_split, 5)));
    CHECK(multi_fact_accuracy(model, w, 5) >= 0.0);
    CHECK_THROWS_AS((void)eval_vqa_accuracy(model, {}), std::invalid_argument);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("zero-epoch training only evaluates") {
  World w = tiny_world();
  MultiModalLM model(tiny_model_config(w));
  TrainConfig tc = tiny_train_config();
  tc.epochs = 0;
  TrainReport rep = train(model, w, tc);
  CHECK(rep.epochs_run == 0);
  CHECK(rep.steps == 0);
  CHECK(rep.epoch_loss.empty());
  CHECK(rep.final_train_accuracy >= 0.0);
}

TEST_CASE("eval prompts pick the declared form") {
  World w = tiny_world();
  const Fact& f = w.fact(w.train_split[0]);
  PromptSpec visual = eval_prompt(w, f, 3, false);
  CHECK_FALSE(visual.metadata.name_form);
  CHECK(visual.metadata.image_entity == f.entity);
  CHECK(!visual.image.empty());
  PromptSpec named = eval_prompt(w, f, 3, true);
  CHECK(named.metadata.name_form);
  CHECK(named.image.empty());
  CHECK(visual.answer_tokens == named.answer_tokens);
}

TEST_CASE("the text twin trains without visual slots") {
  World w = tiny_world();
  TrainConfig tc = tiny_train_config();
  tc.epochs = 1;
  MultiModalLM twin = train_text_twin(w, tc, /*model_seed=*/18);
  CHECK(twin.config().n_visual() == 0);
  CHECK(twin.config().vocab_size == w.vocab_size());
  PromptSpec p = eval_prompt(w, w.fact(w.train_split[0]), 1, true);
  CHECK_NOTHROW((void)twin.forward(p));
}
