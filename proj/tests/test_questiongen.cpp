#include <gtest/gtest.h>

#include "synthqa/questiongen.hpp"

using namespace synthqa;

namespace {

nn::ModelConfig small_decoder(std::size_t vocab) { return {32, 2, 2, 64, vocab, 3, 0.0}; }

Corpus single_paragraph(const std::string& text, const std::string& question, const std::string& answer) {
  Corpus c;
  Paragraph p;
  p.text = text;
  p.sentences = split_sentences(text);
  p.qas.push_back({"q0", question, {{answer, text.find(answer)}}});
  c.documents.push_back({"d0", {p}});
  return c;
}

nn::SamplingConfig greedy(std::size_t budget = 48) {
  nn::SamplingConfig sc;
  sc.top_k = 1;
  sc.max_new_tokens = budget;
  return sc;
}

QGenTrainResult overfit(const Corpus& c, const Vocab& v, std::size_t epochs, bool stopwords = true) {
  auto dec = nn::DecoderModel<float>::create(small_decoder(v.size()), 3);
  nn::TrainConfig tc{8, 3e-3, nn::LrSchedule::linear_decay, epochs, 10, 0.0, 1.0, 5, 0};
  return train_question_generator(c, v, dec, {stopwords, 30}, tc);
}

}  // namespace

TEST(QGenInput, LayoutMatchesPacking) {
  const std::vector<int> ctx = {11, 12, 13};
  const std::vector<int> q = {21};
  auto in = build_qgen_input(ctx, {1, 2, {}}, q, 64);
  EXPECT_EQ(in.ids, (std::vector<int>{11, 12, 13, kEos, 12, 13, kEos, kQStart, 21, kQEnd, kEos}));
  EXPECT_EQ(in.segments, (std::vector<int>{0, 1, 1, 0, 1, 1, 1, 2, 2, 2, 2}));
  EXPECT_EQ(in.prompt_length, 7u);

  auto prompt = build_qgen_input(ctx, {1, 2, {}}, std::nullopt, 64);
  EXPECT_EQ(prompt.ids, (std::vector<int>{11, 12, 13, kEos, 12, 13, kEos}));

  auto bare = build_qgen_input(ctx, {0, 0, {}}, q, 64, false);
  EXPECT_EQ(bare.ids, (std::vector<int>{11, 12, 13, kEos, 11, kEos, 21, kEos}));
  EXPECT_EQ(bare.segments, (std::vector<int>{1, 0, 0, 0, 1, 1, 2, 2}));
}

TEST(QGenInput, LengthAndSpanErrors) {
  const std::vector<int> ctx = {11, 12, 13};
  const std::vector<int> q = {21};
  EXPECT_NO_THROW(build_qgen_input(ctx, {1, 2, {}}, q, 11));
  EXPECT_THROW(build_qgen_input(ctx, {1, 2, {}}, q, 10), LengthError);
  EXPECT_THROW(build_qgen_input(ctx, {2, 1, {}}, q, 64), ParameterError);
  EXPECT_THROW(build_qgen_input(ctx, {1, 3, {}}, q, 64), ParameterError);
}

TEST(QGenInput, PadIsNeverATarget) {
  auto t = lm_targets({kEos, 9, kPad, kPad});
  EXPECT_EQ(t, (std::vector<int>{9, -1, -1, -1}));
}

TEST(QuestionGenerator, RejectsWrongSegmentCount) {
  auto c = single_paragraph("Alice won the race.", "who won", "Alice");
  auto v = build_vocab(c);
  auto mc = small_decoder(v.size());
  mc.n_segment_types = 2;
  auto dec = nn::DecoderModel<float>::create(mc, 1);
  EXPECT_THROW(train_question_generator(c, v, dec, {}, nn::TrainConfig{}), ConfigError);
}

TEST(QuestionGenerator, GreedyReproducesEightGoldQuestions) {
  auto c = generate_toy_corpus(8, 11, default_toy_spec());
  for (auto& d : c.documents) d.paragraphs[0].qas.resize(1);
  auto v = build_vocab(c);
  TrainingAudit audit;
  auto dec = nn::DecoderModel<float>::create(small_decoder(v.size()), 3);
  nn::TrainConfig tc{8, 3e-3, nn::LrSchedule::linear_decay, 250, 10, 0.0, 1.0, 5, 0};
  auto r = train_question_generator(c, v, dec, {}, tc, &audit);
  EXPECT_EQ(r.alignment.aligned, 8u);
  EXPECT_EQ(audit.total(), 8u);
  int verbatim = 0;
  for (const auto& d : c.documents) {
    const auto& p = d.paragraphs[0];
    const auto& a = p.qas[0].answers[0];
    auto ctx = encode(p.text, v);
    std::size_t s = 0, e = 0;
    ASSERT_TRUE(covering_tokens(ctx, {a.char_start, a.char_start + a.text.size()}, s, e));
    auto q = generate_question(r.model, ctx.ids, {s, e, {}}, greedy(), v);
    verbatim += q.accepted && q.ids == encode(p.qas[0].question, v).ids;
  }
  EXPECT_GE(verbatim, 6);
}

TEST(QuestionGenerator, AcceptanceNeedsBothMarkers) {
  auto c = single_paragraph("Alice won the race.", "who won", "Alice");
  auto v = build_vocab(c);
  auto r = overfit(c, v, 150);
  auto ctx = encode(c.documents[0].paragraphs[0].text, v);
  const AnswerSpan ans{0, 0, "Alice"};
  auto q = generate_question(r.model, ctx.ids, ans, greedy(), v);
  EXPECT_TRUE(q.accepted);
  EXPECT_EQ(q.text, "who won");
  EXPECT_EQ(q.ids.size(), 2u);
  // QSTART and "who" fit the budget, QEND does not.
  auto cut = generate_question(r.model, ctx.ids, ans, greedy(2), v);
  EXPECT_FALSE(cut.accepted);
  EXPECT_EQ(cut.text, "who");
}

TEST(QuestionGenerator, WithoutStopwordsAnyNonEmptySample) {
  auto c = single_paragraph("Alice won the race.", "who won", "Alice");
  auto v = build_vocab(c);
  auto r = overfit(c, v, 150, false);
  auto ctx = encode(c.documents[0].paragraphs[0].text, v);
  auto q = generate_question(r.model, ctx.ids, {0, 0, "Alice"}, greedy(), v);
  EXPECT_TRUE(q.accepted);
  EXPECT_EQ(q.text, "who won");
}

TEST(Overgeneration, TwoAcceptedAttempts) {
  auto c = single_paragraph("Alice won the race.", "who won", "Alice");
  auto v = build_vocab(c);
  auto r = overfit(c, v, 150);
  auto ctx = encode(c.documents[0].paragraphs[0].text, v);
  OvergenerationConfig oc;
  auto qs = overgenerate(r.model, ctx.ids, {0, 0, "Alice"}, oc, 17, 0, v);
  ASSERT_EQ(qs.size(), 2u);
  EXPECT_EQ(qs[0].sampling_mode, SamplingMode::topk);
  EXPECT_EQ(qs[1].sampling_mode, SamplingMode::nucleus);
  EXPECT_EQ(qs[0].attempt, 0u);
  EXPECT_EQ(qs[1].attempt, 1u);
  // Attempts are reproducible from (seed, item, attempt).
  auto again = sample_attempts(r.model, ctx.ids, {0, 0, "Alice"}, oc, 17, 0, 2, v);
  EXPECT_EQ(again[0].ids, qs[0].ids);
  EXPECT_EQ(again[1].ids, qs[1].ids);
  auto one = sample_attempts(r.model, ctx.ids, {0, 0, "Alice"}, oc, 17, 0, 1, v);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].ids, qs[0].ids);
}

TEST(Overgeneration, AttemptSamplingModes) {
  OvergenerationConfig oc;
  auto a = attempt_sampling(oc, 0, 1, 2);
  auto b = attempt_sampling(oc, 1, 1, 2);
  EXPECT_EQ(a.top_k, std::optional<std::size_t>(40));
  EXPECT_FALSE(a.top_p);
  EXPECT_EQ(b.top_p, std::optional<double>(0.9));
  EXPECT_FALSE(b.top_k);
  EXPECT_NE(a.seed, b.seed);
  EXPECT_NE(a.seed, attempt_sampling(oc, 0, 1, 3).seed);
  EXPECT_THROW(sampling_mode_from_string("beam"), FormatError);
}

TEST(DecoderPretrain, PerplexityDropsAndIsDeterministic) {
  auto c = generate_toy_corpus(100, 8, default_toy_spec());
  auto held = generate_toy_corpus(20, 99, default_toy_spec());
  auto v = build_vocab(c);
  nn::TrainConfig zero{16, 2e-3, nn::LrSchedule::linear_decay, 0, 10, 0.0, 1.0, 1, 0};
  nn::TrainConfig tc = zero;
  tc.epochs = 4;
  auto init = pretrain_decoder(c, v, small_decoder(0), zero, nullptr, &held);
  TrainingAudit audit;
  auto a = pretrain_decoder(c, v, small_decoder(0), tc, &audit, &held);
  auto b = pretrain_decoder(c, v, small_decoder(0), tc, nullptr, &held);
  ASSERT_TRUE(a.heldout_perplexity && init.heldout_perplexity);
  EXPECT_LT(*a.heldout_perplexity, *init.heldout_perplexity / 2);
  EXPECT_EQ(a.report.loss, b.report.loss);
  EXPECT_DOUBLE_EQ(*a.heldout_perplexity, *b.heldout_perplexity);
  EXPECT_EQ(audit.total(), 100u);
  EXPECT_EQ(init.report.steps, 0u);
}
