// Finite-difference coverage of the full differentiable op surface. Shared by
// the tensor unit tests (few instances) and the acceptance suite (100).
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "support/oracles.hpp"

namespace mmtl::testing {

struct GradCase {
  std::string name;
  FdReport report;
};

/// Runs `instances` random finite-difference checks per op; each instance
/// draws fresh shapes/values from `seed`. Losses are random projections
/// (sum of elementwise product with a fixed random tensor) so every output
/// element participates.
inline std::vector<GradCase> run_gradient_suite(int instances, uint64_t seed) {
  std::vector<GradCase> out;

  auto record = [&](const std::string& name, const FdReport& rep) {
    for (GradCase& c : out)
      if (c.name == name) {
        c.report.max_rel_err = std::max(c.report.max_rel_err, rep.max_rel_err);
        c.report.max_abs_err = std::max(c.report.max_abs_err, rep.max_abs_err);
        c.report.checked += rep.checked;
        return;
      }
    out.push_back({name, rep});
  };

  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(mix_seed(seed, 900, inst));
    const int m = 2 + static_cast<int>(rng.below(4));
    const int k = 2 + static_cast<int>(rng.below(4));
    const int n = 2 + static_cast<int>(rng.below(4));

    auto fresh = [&](std::vector<int> shape, double sd = 1.0) {
      Tensor t = Tensor::randn(std::move(shape), sd, rng);
      t.set_requires_grad(true);
      return t;
    };
    auto proj_loss = [&](Tensor value, Tensor proj) {
      return sum(mul(std::move(value), std::move(proj)));
    };

    {
      Tensor a = fresh({m, k}), b = fresh({k, n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("matmul/a", fd_check(a, [&] { return proj_loss(matmul(a, b), p); }));
      record("matmul/b", fd_check(b, [&] { return proj_loss(matmul(a, b), p); }));
    }
    {
      Tensor a = fresh({m, n});
      Tensor p = Tensor::randn({n, m}, 1.0, rng);
      record("transpose", fd_check(a, [&] { return proj_loss(transpose(a), p); }));
    }
    {
      Tensor a = fresh({m, n}), b = fresh({m, n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("add", fd_check(a, [&] { return proj_loss(add(a, b), p); }));
      record("sub", fd_check(b, [&] { return proj_loss(sub(a, b), p); }));
      record("mul", fd_check(a, [&] { return proj_loss(mul(a, b), p); }));
      record("scale", fd_check(a, [&] { return proj_loss(scale(a, 1.7), p); }));
    }
    {
      Tensor a = fresh({m, n});
      Tensor v = fresh({n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("add_rowvec/m", fd_check(a, [&] { return proj_loss(add_rowvec(a, v), p); }));
      record("add_rowvec/v", fd_check(v, [&] { return proj_loss(add_rowvec(a, v), p); }));
    }
    {
      Tensor a = fresh({m, n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("gelu", fd_check(a, [&] { return proj_loss(gelu(a), p); }));
      record("softmax_rows",
             fd_check(a, [&] { return proj_loss(softmax_rows(a), p); }));
      record("log_softmax_rows",
             fd_check(a, [&] { return proj_loss(log_softmax_rows(a), p); }));
    }
    {
      const int s = m + 1;  // square, for the causal mask
      Tensor a = fresh({s, s});
      Tensor p = Tensor::randn({s, s}, 1.0, rng);
      record("softmax_rows/causal",
             fd_check(a, [&] { return proj_loss(softmax_rows(a, true), p); }));
    }
    {
      Tensor a = fresh({m, n});
      Tensor gain = fresh({n}, 0.5);
      Tensor bias = fresh({n}, 0.5);
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("layernorm/a",
             fd_check(a, [&] { return proj_loss(layernorm_rows(a, gain, bias), p); }));
      record("layernorm/gain",
             fd_check(gain, [&] { return proj_loss(layernorm_rows(a, gain, bias), p); }));
      record("layernorm/bias",
             fd_check(bias, [&] { return proj_loss(layernorm_rows(a, gain, bias), p); }));
    }
    {
      Tensor table = fresh({m + 3, n});
      std::vector<int> ids;
      for (int i = 0; i < m; ++i) ids.push_back(static_cast<int>(rng.below(m + 3)));
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("embedding_rows",
             fd_check(table, [&] { return proj_loss(embedding_rows(table, ids), p); }));
    }
    {
      Tensor a = fresh({m, n}), b = fresh({k, n});
      Tensor p = Tensor::randn({m + k, n}, 1.0, rng);
      record("vstack", fd_check(a, [&] { return proj_loss(vstack({a, b}), p); }));
      Tensor c = fresh({m, n}), d = fresh({m, k});
      Tensor p2 = Tensor::randn({m, n + k}, 1.0, rng);
      record("hstack", fd_check(d, [&] { return proj_loss(hstack({c, d}), p2); }));
    }
    {
      Tensor a = fresh({m + 2, n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      record("slice_rows",
             fd_check(a, [&] { return proj_loss(slice_rows(a, 1, 1 + m), p); }));
      Tensor b = fresh({m, n + 2});
      Tensor p2 = Tensor::randn({m, n}, 1.0, rng);
      record("slice_cols",
             fd_check(b, [&] { return proj_loss(slice_cols(b, 1, 1 + n), p2); }));
    }
    {
      Tensor a = fresh({m, n});
      Tensor v = fresh({n});
      Tensor p = Tensor::randn({m, n}, 1.0, rng);
      const int r = static_cast<int>(rng.below(m));
      record("row_overwrite/m",
             fd_check(a, [&] { return proj_loss(row_overwrite(a, r, v), p); }));
      record("row_overwrite/v",
             fd_check(v, [&] { return proj_loss(row_overwrite(a, r, v), p); }));
      record("row_add/m",
             fd_check(a, [&] { return proj_loss(row_add(a, r, v), p); }));
      record("row_add/v",
             fd_check(v, [&] { return proj_loss(row_add(a, r, v), p); }));
    }
    {
      Tensor a = fresh({m, n});
      std::vector<std::pair<int, int>> idx;
      for (int i = 0; i < m; ++i)
        idx.emplace_back(i, static_cast<int>(rng.below(n)));
      record("neg_pick_sum", fd_check(a, [&] { return neg_pick_sum(a, idx); }));
      record("sum", fd_check(a, [&] { return sum(a); }));
    }
  }
  return out;
}

}  // namespace mmtl::testing
