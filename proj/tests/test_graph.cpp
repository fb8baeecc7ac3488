#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "synthqa/nn/graph.hpp"

using namespace synthqa;
using namespace synthqa::nn;
using synthqa::testing::grad_check;

namespace {

std::size_t add_random(ParameterStore<double>& s, const std::string& name, int r, int c, Rng& rng) {
  auto i = s.add(name, r, c, Init::normal, rng);
  s[i].value *= 50.0;  // unit-scale values exercise the nonlinearities
  return i;
}

}  // namespace

TEST(Graph, MatmulBiasGeluLayerNormGradients) {
  Rng rng(1);
  ParameterStore<double> s;
  auto x = add_random(s, "x", 5, 4, rng);
  auto w = add_random(s, "w", 4, 6, rng);
  auto b = add_random(s, "b", 1, 6, rng);
  auto gn = add_random(s, "g", 1, 6, rng);
  auto bn = add_random(s, "bn", 1, 6, rng);
  std::vector<int> targets = {0, 3, -1, 5, 2};
  auto res = grad_check(s, [&](Graph<double>& g) {
    auto h = g.gelu(g.linear(g.param(s[x]), g.param(s[w]), g.param(s[b])));
    h = g.layer_norm(h, g.param(s[gn]), g.param(s[bn]));
    return g.cross_entropy(h, targets);
  }, 40, 7);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Graph, AttentionGradientsCausalAndPadded) {
  Rng rng(2);
  ParameterStore<double> s;
  auto qkv = add_random(s, "qkv", 2 * 4, 3 * 6, rng);
  auto proj = add_random(s, "proj", 6, 3, rng);
  for (bool causal : {false, true}) {
    AttentionLayout layout{2, 4, 2, causal, {1, 1, 1, 0, 1, 1, 1, 1}};
    std::vector<int> targets = {0, 1, 2, -1, 2, 1, 0, 1};
    auto res = grad_check(s, [&](Graph<double>& g) {
      auto a = g.attention(g.param(s[qkv]), layout);
      return g.cross_entropy(g.matmul(a, g.param(s[proj])), targets);
    }, 40, 9);
    EXPECT_LT(res.max_rel_error, 1e-5) << "causal=" << causal;
  }
}

TEST(Graph, SpanOpsGradients) {
  Rng rng(3);
  ParameterStore<double> s;
  auto a = add_random(s, "a", 6, 8, rng);
  auto b = add_random(s, "b", 6, 8, rng);
  auto b1 = add_random(s, "b1", 1, 8, rng);
  auto w2 = add_random(s, "w2", 8, 1, rng);
  auto se = add_random(s, "se", 6, 2, rng);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < 6; ++i)
    for (int j = i; j < std::min(6, i + 3); ++j) pairs.push_back({i, j});
  auto res = grad_check(s, [&](Graph<double>& g) {
    auto sc = g.pair_scores(g.param(s[a]), g.param(s[b]), g.param(s[b1]), g.param(s[w2]), pairs);
    auto l1 = g.group_nll(sc, {{0, 6, 2}, {6, pairs.size(), 9}});
    auto sel = g.select(g.param(s[se]), {{0, 0}, {1, 0}, {2, 0}, {0, 1}, {1, 1}, {2, 1}});
    auto l2 = g.group_nll(sel, {{0, 3, 1}, {3, 6, 5}});
    return g.add(l1, g.scale(l2, 0.5));
  }, 50, 11);
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(Graph, EmbeddingScatterAccumulatesRepeatedRows) {
  Rng rng(4);
  ParameterStore<double> s;
  auto t = add_random(s, "t", 5, 3, rng);
  std::vector<int> ids = {1, 1, 4, 0};
  auto res = grad_check(s, [&](Graph<double>& g) {
    return g.cross_entropy(g.embedding(g.param(s[t]), ids), {0, 2, 1, 1});
  }, 15, 5);
  EXPECT_LT(res.max_rel_error, 1e-6);
}

TEST(Graph, DropoutIsIdentityOutsideTraining) {
  Rng rng(5);
  ParameterStore<double> s;
  auto x = add_random(s, "x", 3, 3, rng);
  Graph<double> g(false);
  auto v = g.param(s[x]);
  auto d = g.dropout(v, 0.5);
  EXPECT_EQ(d.id, v.id);
}

TEST(Graph, GroupNllRejectsTargetOutsideGroup) {
  Graph<double> g(false);
  auto v = g.input(Matrix<double>::Zero(1, 4));
  EXPECT_THROW(g.group_nll(v, {{0, 2, 3}}), ParameterError);
}
