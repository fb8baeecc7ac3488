#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "synthqa/nn/transformer.hpp"

using namespace synthqa;
using namespace synthqa::nn;

namespace {

ModelConfig small_config(std::size_t segments = 3) {
  ModelConfig c;
  c.hidden = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_seq_len = 24;
  c.vocab_size = 20;
  c.n_segment_types = segments;
  c.dropout = 0.0;
  return c;
}

std::vector<int> iota_ids(std::size_t n, int mod = 20) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>((i * 7 + 3) % static_cast<std::size_t>(mod));
  return v;
}

}  // namespace

TEST(Transformer, DecoderGradientCheckTwoLayerH16) {
  auto model = DecoderModel<double>::create(small_config(), 3);
  SequenceInput a{iota_ids(9), {0, 0, 0, 0, 1, 1, 2, 2, 2}};
  SequenceInput b{iota_ids(6), {0, 0, 1, 2, 2, 2}};
  std::vector<const SequenceInput*> seqs = {&a, &b};
  auto tb = make_batch(seqs);
  std::vector<int> targets(tb.ids.size(), -1);
  for (std::size_t bi = 0; bi < tb.batch; ++bi)
    for (std::size_t i = 0; i + 1 < seqs[bi]->ids.size(); ++i) targets[tb.row(bi, i)] = seqs[bi]->ids[i + 1];
  auto res = synthqa::testing::grad_check(model.store, [&](Graph<double>& g) {
    return g.cross_entropy(model.forward(g, tb), targets);
  }, 50, 21);
  EXPECT_EQ(res.probed, 50u);
  EXPECT_LT(res.max_rel_error, 1e-3);
}

TEST(Transformer, EncoderShapeAndEvalDeterminism) {
  auto model = EncoderModel<float>::create(small_config(2), 5);
  auto ids = iota_ids(11);
  std::vector<int> seg(11, 0);
  std::vector<unsigned char> mask(11, 1);
  auto h1 = encoder_forward(model, ids, seg, mask);
  auto h2 = encoder_forward(model, ids, seg, mask);
  EXPECT_EQ(h1.rows(), 11);
  EXPECT_EQ(h1.cols(), 16);
  EXPECT_TRUE((h1.array() == h2.array()).all());
}

TEST(Transformer, EncoderIgnoresPaddedTail) {
  auto model = EncoderModel<float>::create(small_config(2), 6);
  std::vector<int> ids = {5, 6, 7, 8, 0, 0, 0};
  std::vector<int> seg(7, 0);
  std::vector<unsigned char> mask = {1, 1, 1, 1, 0, 0, 0};
  auto base = encoder_forward(model, ids, seg, mask);
  std::vector<int> ids2 = {5, 6, 7, 8, 13, 2, 9};
  std::vector<int> seg2 = {0, 0, 0, 0, 1, 0, 1};
  auto other = encoder_forward(model, ids2, seg2, mask);
  EXPECT_LT((base.topRows(4) - other.topRows(4)).cwiseAbs().maxCoeff(), 1e-6f);
  std::vector<int> shortened = {5, 6, 7, 8};
  auto trimmed = encoder_forward(model, shortened, std::vector<int>(4, 0), std::vector<unsigned char>(4, 1));
  EXPECT_LT((base.topRows(4) - trimmed).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Transformer, EncoderRejectsOverlengthAndBadSegments) {
  auto model = EncoderModel<float>::create(small_config(2), 6);
  auto ids = iota_ids(25);
  EXPECT_THROW(encoder_forward(model, ids, std::vector<int>(25, 0), std::vector<unsigned char>(25, 1)), LengthError);
  EXPECT_THROW(encoder_forward(model, iota_ids(3), {0, 2, 0}, {1, 1, 1}), ParameterError);
}

TEST(Transformer, DecoderCausality) {
  auto model = DecoderModel<float>::create(small_config(), 7);
  auto ids = iota_ids(12);
  std::vector<int> seg(12, 0);
  auto base = decoder_forward(model, ids, seg);
  EXPECT_EQ(base.rows(), 12);
  EXPECT_EQ(base.cols(), 20);
  for (std::size_t j : {3u, 7u, 11u}) {
    auto changed = ids;
    changed[j] = (changed[j] + 5) % 20;
    auto out = decoder_forward(model, changed, seg);
    const auto rows = static_cast<Eigen::Index>(j);
    EXPECT_TRUE((out.topRows(rows).array() == base.topRows(rows).array()).all()) << "position " << j;
    EXPECT_GT((out.row(rows) - base.row(rows)).cwiseAbs().maxCoeff(), 0.0f);
  }
  auto again = decoder_forward(model, ids, seg);
  EXPECT_TRUE((again.array() == base.array()).all());
}

TEST(Transformer, IncrementalDecodingMatchesFullForward) {
  auto model = DecoderModel<float>::create(small_config(), 8);
  auto ids = iota_ids(10);
  std::vector<int> seg = {0, 0, 0, 0, 1, 1, 2, 2, 2, 2};
  auto full = decoder_forward(model, ids, seg);
  DecoderCache<float> cache;
  auto logits = decoder_append(model, cache, std::span<const int>(ids.data(), 6), std::span<const int>(seg.data(), 6));
  EXPECT_LT((logits - full.row(5)).cwiseAbs().maxCoeff(), 1e-4f);
  for (std::size_t i = 6; i < ids.size(); ++i) {
    logits = decoder_append(model, cache, std::span<const int>(&ids[i], 1), std::span<const int>(&seg[i], 1));
    EXPECT_LT((logits - full.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-4f);
  }
  EXPECT_EQ(cache.length, 10u);
}

TEST(Transformer, ConfigValidation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}
