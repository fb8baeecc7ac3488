#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "synthqa/nn/train.hpp"
#include "synthqa/nn/transformer.hpp"

using namespace synthqa;
using namespace synthqa::nn;

namespace {

using Seq = SequenceInput;

// Eight short sequences a tiny decoder should memorize. Vocab ids 1..8 open them.
std::vector<Seq> memorize_set() {
  std::vector<Seq> out;
  Rng rng(3);
  for (int i = 0; i < 8; ++i) {
    Seq s;
    s.ids.push_back(1 + i);
    for (int j = 0; j < 6; ++j) s.ids.push_back(5 + static_cast<int>(rng.below(20)));
    s.segments.assign(s.ids.size(), 0);
    out.push_back(s);
  }
  return out;
}

template <class T>
typename Graph<T>::Var lm_batch_loss(Graph<T>& g, DecoderModel<T>& m, std::span<const Seq* const> batch) {
  auto tb = make_batch(batch);
  std::vector<int> targets(tb.batch * tb.length, -1);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i + 1 < batch[b]->ids.size(); ++i) targets[tb.row(b, i)] = batch[b]->ids[i + 1];
  return g.cross_entropy(m.forward(g, tb), targets);
}

ModelConfig tiny() { return ModelConfig{16, 2, 2, 16, 25, 3, 0.0}; }

TrainReport fit(DecoderModel<float>& m, const std::vector<Seq>& data, TrainConfig tc) {
  return train<float>(m.store.pointers(), data, tc, [&](Graph<float>& g, std::span<const Seq* const> b) {
    return lm_batch_loss(g, m, b);
  });
}

}  // namespace

TEST(Schedule, WarmupThenLinearDecay) {
  TrainConfig c;
  c.lr = 1.0;
  c.warmup_iters = 4;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0, 14), 0.25);
  EXPECT_DOUBLE_EQ(learning_rate(c, 3, 14), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(c, 4, 14), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(c, 9, 14), 0.5);
  c.lr_schedule = LrSchedule::cosine;
  EXPECT_NEAR(learning_rate(c, 9, 14), 0.5, 1e-12);
  EXPECT_NEAR(learning_rate(c, 6, 14), 0.5 * (1 + std::cos(3.14159265358979323846 * 0.2)), 1e-12);
}

TEST(Schedule, StepsRespectCap) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 3;
  EXPECT_EQ(total_steps(c, 10), 9u);
  c.max_steps = 5;
  EXPECT_EQ(total_steps(c, 10), 5u);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.grad_clip_norm = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(TrainConfig::from_json(TrainConfig{}.to_json()), TrainConfig{});
  EXPECT_THROW(lr_schedule_from_string("step"), ConfigError);
}

TEST(Train, OverfitsEightSequences) {
  auto m = DecoderModel<float>::create(tiny(), 1);
  auto data = memorize_set();
  TrainConfig tc{8, 1e-2, LrSchedule::linear_decay, 300, 10, 0.0, 1.0, 4, 0};
  auto rep = fit(m, data, tc);
  ASSERT_EQ(rep.steps, 300u);
  EXPECT_LT(rep.loss.back(), 0.1);
  EXPECT_LT(rep.loss.back(), rep.loss.front() / 10);
  // Greedy continuation reproduces every training sequence.
  int exact = 0;
  for (const auto& s : data) {
    auto logits = decoder_forward(m, s.ids, s.segments);
    bool ok = true;
    for (std::size_t i = 0; i + 1 < s.ids.size(); ++i) {
      Eigen::Index arg = 0;
      logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      ok = ok && arg == s.ids[i + 1];
    }
    exact += ok;
  }
  EXPECT_EQ(exact, 8);
}

TEST(Train, ClippedNormNeverExceedsThreshold) {
  auto m = DecoderModel<float>::create(tiny(), 2);
  TrainConfig tc{4, 5e-2, LrSchedule::linear_decay, 10, 0, 0.0, 0.05, 1, 0};
  auto rep = fit(m, memorize_set(), tc);
  ASSERT_FALSE(rep.grad_norm.empty());
  bool clipped_any = false;
  for (std::size_t i = 0; i < rep.grad_norm.size(); ++i) {
    EXPECT_LE(rep.grad_norm[i], 0.05 * (1 + 1e-6));
    clipped_any = clipped_any || rep.raw_grad_norm[i] > 0.05;
  }
  EXPECT_TRUE(clipped_any);
}

TEST(Train, DeterministicGivenSeed) {
  TrainConfig tc{3, 1e-2, LrSchedule::cosine, 3, 2, 0.01, 1.0, 9, 0};
  auto a = DecoderModel<float>::create(ModelConfig{16, 2, 2, 16, 25, 3, 0.1}, 5);
  auto b = a;
  auto ra = fit(a, memorize_set(), tc);
  auto rb = fit(b, memorize_set(), tc);
  EXPECT_EQ(ra.loss, rb.loss);
  for (std::size_t i = 0; i < a.store.size(); ++i) EXPECT_TRUE(a.store[i].value == b.store[i].value) << a.store[i].name;
  auto c = DecoderModel<float>::create(ModelConfig{16, 2, 2, 16, 25, 3, 0.1}, 5);
  tc.seed = 10;
  EXPECT_NE(fit(c, memorize_set(), tc).loss, ra.loss);
}

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  auto m = DecoderModel<float>::create(tiny(), 2);
  const auto before = m.store[0].value;
  TrainConfig tc{4, 1e-2, LrSchedule::linear_decay, 0, 0, 0.0, 1.0, 1, 0};
  EXPECT_EQ(fit(m, memorize_set(), tc).steps, 0u);
  EXPECT_TRUE(m.store[0].value == before);
}

TEST(Train, RejectsEmptyAndDiverged) {
  auto m = DecoderModel<float>::create(tiny(), 2);
  TrainConfig tc{4, 1e-2, LrSchedule::linear_decay, 1, 0, 0.0, 1.0, 1, 0};
  EXPECT_THROW(fit(m, {}, tc), ParameterError);
  auto nan_loss = [&](Graph<float>& g, std::span<const Seq* const>) {
    Matrix<float> x(1, 1);
    x(0, 0) = std::numeric_limits<float>::quiet_NaN();
    return g.input(x);
  };
  try {
    train<float>(m.store.pointers(), memorize_set(), tc, nan_loss);
    FAIL() << "expected DivergedError";
  } catch (const DivergedError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(AdamW, DecayShrinksDecayedWeightsOnly) {
  ParameterStore<double> store;
  Rng rng(1);
  store.add("w", 2, 2, Init::ones, rng);
  store.add("b", 1, 2, Init::ones, rng);
  store[0].decay = true;
  store[1].decay = false;
  AdamW<double> opt(store.pointers(), 0.5);
  opt.step(0.1);
  EXPECT_NEAR(store[0].value(0, 0), 0.95, 1e-12);
  EXPECT_DOUBLE_EQ(store[1].value(0, 0), 1.0);
}
