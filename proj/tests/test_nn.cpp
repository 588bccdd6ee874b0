#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "longsim/nn.hpp"
#include "longsim/rng.hpp"

using namespace longsim;
using namespace longsim::nn;

namespace {

Tensor<double> random_tensor(Rng& rng, int r, int c, double scale = 1.0) {
  Tensor<double> t(r, c);
  for (auto& x : t.data) x = scale * rng.normal();
  return t;
}

void fill(ParamSet<double>& ps, Rng& rng, double scale = 0.5) {
  for (int i = 0; i < ps.size(); ++i) {
    for (auto& x : ps.value(i).data) x = scale * rng.normal();
  }
}

using LossFn = std::function<Var(Graph<double>&)>;

double eval(const ParamSet<double>& ps, const LossFn& f) {
  Graph<double> g(ps);
  return g.scalar(f(g));
}

// Central differences on every parameter scalar; returns the worst relative error.
double worst_relative_error(ParamSet<double>& ps, const LossFn& f) {
  Graph<double> g(ps);
  Var loss = f(g);
  g.backward(loss);
  auto grads = ps.zeros_like();
  g.accumulate_param_grads(grads);
  double worst = 0.0;
  const double h = 1e-6;
  for (int id = 0; id < ps.size(); ++id) {
    for (std::size_t i = 0; i < ps.value(id).size(); ++i) {
      double& x = ps.value(id).data[i];
      const double x0 = x;
      x = x0 + h;
      const double up = eval(ps, f);
      x = x0 - h;
      const double down = eval(ps, f);
      x = x0;
      const double fd = (up - down) / (2 * h);
      const double an = grads[static_cast<std::size_t>(id)].data[i];
      const double err = std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Projects a tensor to a scalar with fixed random weights so every output matters.
Var project(Graph<double>& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  const auto& v = g.value(x);
  Tensor<double> w(v.cols, 1);
  for (auto& e : w.data) e = rng.normal();
  Var y = g.matmul(x, g.constant(w));
  Tensor<double> ones(1, v.rows, 1.0);
  return g.matmul(g.constant(ones), y);
}

}  // namespace

TEST(Nn, IdentityMlpIsIdentity) {
  ParamSet<double> ps;
  const int w = ps.add("w", 3, 3);
  const int b = ps.add("b", 1, 3);
  for (int i = 0; i < 3; ++i) ps.value(w)(i, i) = 1.0;
  Graph<double> g(ps);
  Rng rng(1);
  auto x = random_tensor(rng, 4, 3);
  Var y = g.linear(g.constant(x), g.param(w), g.param(b));
  EXPECT_EQ(g.value(y).data, x.data);
}

TEST(Nn, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 5e-4), 5e-4);
  EXPECT_NEAR(cosine_lr(50, 100, 5e-4), 2.5e-4, 1e-15);
  EXPECT_NEAR(cosine_lr(100, 100, 5e-4), 0.0, 1e-18);
}

TEST(Nn, AttentionSingletonReturnsValuePlusRel) {
  ParamSet<double> ps;
  Graph<double> g(ps);
  Rng rng(2);
  auto q = random_tensor(rng, 1, 8);
  auto k = random_tensor(rng, 3, 8);
  auto v = random_tensor(rng, 3, 8);
  auto rel = random_tensor(rng, 1, 8);
  AttentionPairs pairs;
  pairs.begin_query();
  pairs.add(2, 0);
  Var out = g.attention(g.constant(q), g.constant(k), g.constant(v), g.constant(rel), pairs, 2);
  for (int j = 0; j < 8; ++j) EXPECT_NEAR(g.value(out)(0, j), v(2, j) + rel(0, j), 1e-12);
}

TEST(Nn, AttentionWithoutContextIsZero) {
  ParamSet<double> ps;
  Graph<double> g(ps);
  Rng rng(3);
  AttentionPairs pairs;
  pairs.begin_query();
  pairs.begin_query();
  pairs.add(0, -1);
  Var out = g.attention(g.constant(random_tensor(rng, 2, 4)), g.constant(random_tensor(rng, 1, 4)),
                        g.constant(random_tensor(rng, 1, 4)), Var{}, pairs, 1);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(g.value(out)(0, j), 0.0);
}

TEST(Nn, AttentionMatchesDenseOracle) {
  // 3 queries x 4 contexts with a random admission mask and per-pair encodings.
  Rng rng(4);
  const int heads = 2, D = 8, hd = 4;
  auto q = random_tensor(rng, 3, D);
  auto k = random_tensor(rng, 4, D);
  auto v = random_tensor(rng, 4, D);
  auto rel = random_tensor(rng, 12, D);
  const bool admit[3][4] = {{true, false, true, true}, {true, true, true, true}, {false, false, true, false}};
  AttentionPairs pairs;
  for (int i = 0; i < 3; ++i) {
    pairs.begin_query();
    for (int c = 0; c < 4; ++c) {
      if (admit[i][c]) pairs.add(c, i * 4 + c);
    }
  }
  ParamSet<double> ps;
  Graph<double> g(ps);
  Var out = g.attention(g.constant(q), g.constant(k), g.constant(v), g.constant(rel), pairs, heads);
  for (int i = 0; i < 3; ++i) {
    for (int h = 0; h < heads; ++h) {
      double logits[4];
      double mx = -1e300;
      for (int c = 0; c < 4; ++c) {
        double s = 0;
        for (int j = 0; j < hd; ++j) s += q(i, h * hd + j) * (k(c, h * hd + j) + rel(i * 4 + c, h * hd + j));
        logits[c] = s / 2.0;
        if (admit[i][c]) mx = std::max(mx, logits[c]);
      }
      double z = 0;
      for (int c = 0; c < 4; ++c) z += admit[i][c] ? std::exp(logits[c] - mx) : 0.0;
      for (int j = 0; j < hd; ++j) {
        double o = 0;
        for (int c = 0; c < 4; ++c) {
          if (admit[i][c]) o += std::exp(logits[c] - mx) / z * (v(c, h * hd + j) + rel(i * 4 + c, h * hd + j));
        }
        EXPECT_NEAR(g.value(out)(i, h * hd + j), o, 1e-12);
      }
    }
  }
}

TEST(Nn, AttentionIsPermutationEquivariantOverContext) {
  Rng rng(5);
  auto q = random_tensor(rng, 2, 4);
  auto k = random_tensor(rng, 3, 4);
  auto v = random_tensor(rng, 3, 4);
  auto rel = random_tensor(rng, 6, 4);
  AttentionPairs a, b;
  const int perm[3] = {2, 0, 1};
  for (int i = 0; i < 2; ++i) {
    a.begin_query();
    b.begin_query();
    for (int c = 0; c < 3; ++c) a.add(c, i * 3 + c);
    for (int c = 0; c < 3; ++c) b.add(perm[c], i * 3 + perm[c]);
  }
  ParamSet<double> ps;
  Graph<double> g(ps);
  Var oa = g.attention(g.constant(q), g.constant(k), g.constant(v), g.constant(rel), a, 2);
  Var ob = g.attention(g.constant(q), g.constant(k), g.constant(v), g.constant(rel), b, 2);
  for (std::size_t i = 0; i < g.value(oa).size(); ++i) EXPECT_NEAR(g.value(oa).data[i], g.value(ob).data[i], 1e-12);
}

TEST(Nn, GradientCheckPerOp) {
  Rng rng(6);
  ParamSet<double> ps;
  const int x = ps.add("x", 5, 8);
  const int w = ps.add("w", 8, 8);
  const int b = ps.add("b", 1, 8);
  const int gain = ps.add("gain", 1, 8);
  const int table = ps.add("table", 6, 8);
  const int freqs = ps.add("freqs", 4, 3);
  const int desc = ps.add("desc", 5, 4);
  const int ctx = ps.add("ctx", 4, 8);
  const int rel = ps.add("rel", 7, 8);
  fill(ps, rng);

  const std::vector<std::pair<const char*, LossFn>> cases = {
      {"linear", [&](Graph<double>& g) { return project(g, g.linear(g.param(x), g.param(w), g.param(b)), 1); }},
      {"gelu", [&](Graph<double>& g) { return project(g, g.gelu(g.param(x)), 2); }},
      {"softplus", [&](Graph<double>& g) { return project(g, g.softplus(g.param(x)), 3); }},
      {"layer_norm",
       [&](Graph<double>& g) { return project(g, g.layer_norm(g.param(x), g.param(gain), g.param(b)), 4); }},
      {"gather", [&](Graph<double>& g) { return project(g, g.gather_rows(g.param(table), {0, 3, 3, 5}), 5); }},
      {"concat",
       [&](Graph<double>& g) {
         Var c = g.concat_cols({g.param(x), g.select_cols(g.param(x), 2, 5)});
         return project(g, g.concat_rows({c, c}), 6);
       }},
      {"fourier", [&](Graph<double>& g) { return project(g, g.fourier(g.param(desc), g.param(freqs)), 7); }},
      {"attention",
       [&](Graph<double>& g) {
         AttentionPairs p;
         for (int i = 0; i < 5; ++i) {
           p.begin_query();
           for (int c = 0; c < 4; ++c) {
             if ((i + c) % 3 != 0) p.add(c, (i + c) % 7);
           }
         }
         Var k = g.linear(g.param(ctx), g.param(w));
         return project(g, g.attention(g.param(x), k, g.param(ctx), g.param(rel), p, 2), 8);
       }},
      {"cross_entropy",
       [&](Graph<double>& g) {
         return g.weighted_cross_entropy(g.param(x), {1, 7, 0, 3, 2}, {0.1, 0.9, 0.0, 1.0, 0.5});
       }},
      {"l1",
       [&](Graph<double>& g) {
         Tensor<double> t(5, 8, 0.123);
         return g.weighted_l1(g.param(x), t, {1.0, 0.0, 2.0, 1.0, 1.0});
       }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(worst_relative_error(ps, f), 1e-4) << name;
}

TEST(Nn, FourierGradientWrtDescriptor) {
  Rng rng(7);
  ParamSet<double> ps;
  const int freqs = ps.add("freqs", 4, 6);
  const int w = ps.add("w", 48, 4);
  fill(ps, rng);
  Tensor<double> d(1, 4);
  d.data = {3.5, 0.4, -1.2, 2.0};
  auto loss_at = [&](const Tensor<double>& dd, Graph<double>& g, Var* in) {
    *in = g.input(dd);
    return project(g, g.linear(g.fourier(*in, g.param(freqs)), g.param(w)), 9);
  };
  Graph<double> g(ps);
  Var in;
  Var loss = loss_at(d, g, &in);
  g.backward(loss);
  const double an = g.grad(in)(0, 0);
  const double h = 1e-6;
  auto dp = d, dm = d;
  dp(0, 0) += h;
  dm(0, 0) -= h;
  Graph<double> gp(ps), gm(ps);
  Var ip, im;
  const double fd = (gp.scalar(loss_at(dp, gp, &ip)) - gm.scalar(loss_at(dm, gm, &im))) / (2 * h);
  EXPECT_LT(std::abs(fd - an) / std::max(1e-8, std::abs(fd)), 1e-4);
}

TEST(Nn, CrossEntropyClosedForms) {
  ParamSet<double> ps;
  Graph<double> g(ps);
  Tensor<double> uniform(1, 2048);
  Var l = g.weighted_cross_entropy(g.constant(uniform), {17}, {1.0});
  EXPECT_NEAR(g.scalar(l), std::log(2048.0), 1e-12);
  Var empty = g.weighted_cross_entropy(g.constant(uniform), {17}, {0.0});
  EXPECT_EQ(g.scalar(empty), 0.0);
}

TEST(Nn, NonFiniteForwardNamesOperation) {
  ParamSet<double> ps;
  Graph<double> g(ps);
  Tensor<double> big(1, 1, 1e200);
  Var a = g.constant(big);
  try {
    g.matmul(a, a);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
}

TEST(Nn, AdamWMovesAgainstGradient) {
  ParamSet<float> ps;
  const int p = ps.add("p", 1, 2);
  ps.value(p).data = {1.0f, -1.0f};
  AdamW<float> opt(ps, {});
  auto grads = ps.zeros_like();
  grads[0].data = {0.5f, -0.5f};
  opt.step(ps, grads, 1e-2);
  EXPECT_LT(ps.value(p).data[0], 1.0f);
  EXPECT_GT(ps.value(p).data[1], -1.0f);
}

TEST(Nn, CheckpointRoundTrip) {
  ParamSet<float> ps;
  const int a = ps.add("a", 2, 3);
  ps.add("b", 1, 1);
  for (std::size_t i = 0; i < 6; ++i) ps.value(a).data[i] = static_cast<float>(i) * 0.5f;
  const auto path = std::filesystem::temp_directory_path() / "longsim_ckpt_test.bin";
  save_checkpoint(path, ps, {11, 22, "d_model=4"});
  ParamSet<float> other;
  other.add("a", 2, 3);
  other.add("b", 1, 1);
  const auto h = load_checkpoint(path, other);
  EXPECT_EQ(h.config_hash, 11u);
  EXPECT_EQ(h.vocab_hash, 22u);
  EXPECT_EQ(h.config_text, "d_model=4");
  EXPECT_EQ(other.value(0).data, ps.value(0).data);
  ParamSet<float> wrong;
  wrong.add("a", 3, 2);
  wrong.add("b", 1, 1);
  EXPECT_THROW(load_checkpoint(path, wrong), std::runtime_error);
  std::filesystem::remove(path);
}
