#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmtl/attnflow.hpp"
#include "mmtl/trainer.hpp"
#include "mmtl/world.hpp"
#include "support/oracles.hpp"

using namespace mmtl;
using namespace mmtl::testing;

namespace {

struct Fixture {
  World w;
  MultiModalLM model;

  Fixture() : w(make_world()), model(make_config(w)) {}

  static World make_world() {
    World w = World::generate(6, 1, 61);
    w.image.patch_grid = 2;
    w.image.patch_dim = 4;
    return w;
  }
  static ModelConfig make_config(const World& w) {
    ModelConfig cfg = default_model_config(w, false, 12);
    cfg.n_layers = 3;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_mlp = 32;
    cfg.d_vis = 8;
    return cfg;
  }
  PromptSpec prompt(int entity = 1, uint64_t seed = 3) const {
    return w.make_prompt(w.fact_of(entity, 0),
                         w.question_template(w.group_templates(0)[0]), seed);
  }
};

// Hand-rolled a_ij: layernorm, per-head value/output projections and the
// attention weight, all with plain loops over the raw buffers.
std::vector<double> contribution_oracle(const MultiModalLM& model,
                                        const ActivationCache& cache, int layer, int i,
                                        int j) {
  const ModelConfig& cfg = model.config();
  const LayerWeights& lw = model.layer(layer);
  const int d = cfg.d_model;
  const int dh = cfg.d_head();

  const Tensor& before = cache.hidden_before(layer);
  std::vector<double> row(d), g(d);
  for (int c = 0; c < d; ++c) row[static_cast<size_t>(c)] = before.at(j, c);
  double mean = 0.0;
  for (double x : row) mean += x;
  mean /= d;
  double var = 0.0;
  for (double x : row) var += (x - mean) * (x - mean);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  for (int c = 0; c < d; ++c)
    g[static_cast<size_t>(c)] =
        (row[static_cast<size_t>(c)] - mean) * inv * lw.ln1_gain.at(c) + lw.ln1_bias.at(c);

  std::vector<double> out(d, 0.0);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const double a = cache.attn[layer][h].at(i, j);
    std::vector<double> vh(dh, 0.0);
    for (int t = 0; t < dh; ++t)
      for (int c = 0; c < d; ++c) vh[static_cast<size_t>(t)] += g[c] * lw.wv.at(c, h * dh + t);
    for (int c = 0; c < d; ++c) {
      double o = 0.0;
      for (int t = 0; t < dh; ++t) o += vh[static_cast<size_t>(t)] * lw.wo.at(h * dh + t, c);
      out[static_cast<size_t>(c)] += a * o;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("contributions match a plain-loop oracle at every pair") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  const ActivationCache& cache = *res.cache;

  for (int layer : {0, 2}) {
    for (int i : {0, 3, cache.seq_len - 1}) {
      for (int j = 0; j <= i; ++j) {
        Tensor a = contribution(fx.model, cache, layer, i, j);
        const auto oracle = contribution_oracle(fx.model, cache, layer, i, j);
        REQUIRE(a.numel() == oracle.size());
        for (size_t c = 0; c < oracle.size(); ++c)
          CHECK(a.data()[c] == doctest::Approx(oracle[c]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("row sums reproduce the attention block output minus its bias") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  const ActivationCache& cache = *res.cache;
  const int d = fx.model.config().d_model;

  for (int layer = 0; layer < fx.model.config().n_layers; ++layer) {
    const Tensor& bo = fx.model.layer(layer).bo;
    for (int i = 0; i < cache.seq_len; ++i) {
      Tensor sum = contribution_row_sum(fx.model, cache, layer, i);
      for (int c = 0; c < d; ++c) {
        const double expect = cache.attn_out[layer].at(i, c) - bo.at(c);
        CHECK(std::fabs(sum.at(c) - expect) <= 1e-8);
      }
    }
  }
}

TEST_CASE("future positions contribute exactly nothing") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  bool masked = false;
  Tensor a = contribution(fx.model, *res.cache, 0, 2, 5, &masked);
  CHECK(masked);
  for (double v : a.data()) CHECK(v == 0.0);
  (void)contribution(fx.model, *res.cache, 0, 5, 2, &masked);
  CHECK_FALSE(masked);
}

TEST_CASE("contribution validates its coordinates and cache") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  CHECK_THROWS_AS((void)contribution(fx.model, *res.cache, 7, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)contribution(fx.model, *res.cache, 0, 99, 0), std::invalid_argument);
  CHECK_THROWS_AS((void)contribution(fx.model, *res.cache, 0, 0, -1), std::invalid_argument);
  ActivationCache empty;
  empty.seq_len = res.cache->seq_len;
  CHECK_THROWS_AS((void)contribution(fx.model, empty, 0, 0, 0), std::invalid_argument);
}

TEST_CASE("zeroing the value projection kills a layer's contributions") {
  Fixture fx;
  auto wv = fx.model.param("layers.0.wv").mutable_data();
  std::fill(wv.begin(), wv.end(), 0.0);
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  const ActivationCache& cache = *res.cache;
  const Tensor& bo = fx.model.layer(0).bo;

  for (int i : {0, 4, cache.seq_len - 1}) {
    for (int j = 0; j <= i; ++j) {
      Tensor a = contribution(fx.model, cache, 0, i, j);
      for (double v : a.data()) CHECK(v == 0.0);
    }
    // the block output collapses to its bias
    for (int c = 0; c < fx.model.config().d_model; ++c)
      CHECK(cache.attn_out[0].at(i, c) == doctest::Approx(bo.at(c)).epsilon(1e-12));
  }
}

TEST_CASE("contribution_profile collects norms in source order") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  ForwardResult res = fx.model.forward(p, {}, true);
  std::vector<int> sources = {0, 2, 1};
  ContributionProfile prof =
      contribution_profile(fx.model, *res.cache, 1, 5, sources);
  CHECK(prof.layer == 1);
  CHECK(prof.target == 5);
  CHECK(prof.sources == sources);
  REQUIRE(prof.vectors.size() == 3);
  REQUIRE(prof.norms.size() == 3);
  for (size_t k = 0; k < 3; ++k) {
    double s = 0.0;
    for (double v : prof.vectors[k].data()) s += v * v;
    CHECK(prof.norms[k] == doctest::Approx(std::sqrt(s)).epsilon(1e-12));
  }
}

TEST_CASE("profiles have the documented shapes and need a visual constraint") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  auto vis = visual_to_constraint_profile(fx.model, p);
  const int n = fx.model.config().n_visual();
  const int L = fx.model.config().n_layers;
  REQUIRE(static_cast<int>(vis.size()) == n);
  for (const auto& row : vis) {
    REQUIRE(static_cast<int>(row.size()) == L);
    for (double v : row) CHECK(v >= 0.0);
  }

  auto c2l = constraint_to_last_profile(fx.model, p);
  REQUIRE(static_cast<int>(c2l.size()) == L);
  for (double v : c2l) CHECK(v >= 0.0);

  PromptSpec named = fx.w.make_prompt(
      fx.w.fact_of(1, 0), fx.w.question_template(fx.w.group_templates(0)[0]), 3,
      PromptForm::named);
  CHECK_THROWS_AS((void)visual_to_constraint_profile(fx.model, named),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)constraint_to_last_profile(fx.model, named),
                  std::invalid_argument);
}

TEST_CASE("auroc basics") {
  std::vector<int> labels = {0, 0, 1, 1};
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, labels) == 1.0);
  CHECK(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, labels) == 0.0);
  CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, labels) == 0.5);
  // one straddling tie: 0.5 credit for the tied pair
  CHECK(auroc(std::vector<double>{0.1, 0.5, 0.5, 0.9}, labels) ==
        doctest::Approx(0.875));

  CHECK_THROWS_AS((void)auroc(std::vector<double>{1.0, 2.0}, std::vector<int>{1, 1}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)auroc(std::vector<double>{1.0}, std::vector<int>{1, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)auroc(std::vector<double>{1.0, 2.0}, std::vector<int>{0, 2}),
                  std::invalid_argument);
}

TEST_CASE("rank-based auroc equals the pairwise oracle on random tied data") {
  Rng rng(404);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + static_cast<int>(rng.below(20));
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      scores[static_cast<size_t>(i)] =
          static_cast<double>(rng.below(6)) * 0.25;  // coarse grid forces ties
      labels[static_cast<size_t>(i)] = static_cast<int>(rng.below(2));
    }
    labels[0] = 0;
    labels[1] = 1;  // both classes present
    CHECK(auroc(scores, labels) == pairwise_auroc(scores, labels));  // exact
  }
}

TEST_CASE("auroc is invariant under monotone score transforms") {
  Rng rng(405);
  std::vector<double> scores(15);
  std::vector<int> labels(15);
  for (size_t i = 0; i < scores.size(); ++i) {
    scores[i] = static_cast<double>(rng.below(5));
    labels[i] = static_cast<int>(rng.below(2));
  }
  labels[0] = 0;
  labels[1] = 1;
  std::vector<double> warped(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) warped[i] = std::exp(0.5 * scores[i]) + 7.0;
  CHECK(auroc(scores, labels) == auroc(warped, labels));
}

TEST_CASE("fit_detector picks the oracle-best layer pair and threshold") {
  Fixture fx;
  std::vector<PromptSpec> prompts;
  std::vector<int> labels;
  for (int e = 0; e < 6; ++e) {
    prompts.push_back(fx.prompt(e, 20 + static_cast<uint64_t>(e)));
    labels.push_back(e % 2);
  }

  DetectorModel det = fit_detector(fx.model, prompts, labels);
  const int L = fx.model.config().n_layers;
  REQUIRE(det.layer_a >= 0);
  REQUIRE(det.layer_b > det.layer_a);
  REQUIRE(det.layer_b < L);
  CHECK(det.validation_auroc >= 0.0);
  CHECK(det.validation_auroc <= 1.0);

  // independent re-derivation from the same profiles
  std::vector<std::vector<double>> profiles;
  for (const auto& p : prompts) profiles.push_back(constraint_to_last_profile(fx.model, p));
  int best_a = -1, best_b = -1;
  double best_auc = -1.0;
  std::vector<double> scores(prompts.size());
  for (int a = 0; a < L; ++a)
    for (int b = a + 1; b < L; ++b) {
      for (size_t k = 0; k < profiles.size(); ++k)
        scores[k] = 0.5 * (profiles[k][static_cast<size_t>(a)] +
                           profiles[k][static_cast<size_t>(b)]);
      const double auc = pairwise_auroc(scores, labels);
      if (auc > best_auc) {
        best_auc = auc;
        best_a = a;
        best_b = b;
      }
    }
  CHECK(det.layer_a == best_a);
  CHECK(det.layer_b == best_b);
  CHECK(det.validation_auroc == best_auc);

  // the returned threshold attains the best reachable validation accuracy
  for (size_t k = 0; k < profiles.size(); ++k) scores[k] = det.score(profiles[k]);
  auto accuracy_at = [&](double thr) {
    size_t hits = 0;
    for (size_t k = 0; k < scores.size(); ++k)
      if ((scores[k] >= thr ? 1 : 0) == labels[k]) ++hits;
    return hits;
  };
  size_t best_hits = 0;
  for (double thr : scores) best_hits = std::max(best_hits, accuracy_at(thr));
  best_hits = std::max(best_hits, accuracy_at(-1e300));
  CHECK(accuracy_at(det.threshold) == best_hits);
  // lowest threshold among the equally accurate candidates
  for (double thr : scores)
    if (thr < det.threshold) CHECK(accuracy_at(thr) < best_hits);

  // prediction API is a plain threshold rule
  for (size_t k = 0; k < profiles.size(); ++k)
    CHECK(det.predict(profiles[k]) == (det.score(profiles[k]) >= det.threshold));

  // determinism
  DetectorModel det2 = fit_detector(fx.model, prompts, labels);
  CHECK(det2.layer_a == det.layer_a);
  CHECK(det2.layer_b == det.layer_b);
  CHECK(det2.threshold == det.threshold);

  // degenerate label sets are rejected
  std::vector<int> ones(labels.size(), 1);
  CHECK_THROWS_AS((void)fit_detector(fx.model, prompts, ones), std::invalid_argument);
  CHECK_THROWS_AS((void)fit_detector(fx.model, {}, {}), std::invalid_argument);
}

TEST_CASE("confidence baseline is the greedy token's probability") {
  Fixture fx;
  PromptSpec p = fx.prompt();
  const double conf = confidence_baseline(fx.model, p);
  CHECK(conf > 0.0);
  CHECK(conf <= 1.0);
  double best = 0.0;
  for (int t = 0; t < fx.model.config().vocab_size; ++t)
    best = std::max(best, fx.model.answer_prob(p, {t}));
  CHECK(conf == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("confidence collapses to 1/V when the head is silenced") {
  Fixture fx;
  auto head = fx.model.param("lm_head").mutable_data();
  std::fill(head.begin(), head.end(), 0.0);
  PromptSpec p = fx.prompt();
  CHECK(confidence_baseline(fx.model, p) ==
        doctest::Approx(1.0 / fx.model.config().vocab_size).epsilon(1e-12));
}
