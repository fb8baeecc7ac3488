#include <gtest/gtest.h>

#include <sstream>

#include "synthqa/pipeline.hpp"

using namespace synthqa;

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in(
      "# tiny run\n"
      "seeds = 3, 4\n"
      "filter.mode = roundtrip   # no second attempt\n"
      "encoder.hidden = 64\n"
      "qa.train.lr = 5e-4\n"
      "agen.head = independent\n"
      "\n");
  auto c = parse_config(in);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  EXPECT_EQ(c.filter_mode, FilterMode::roundtrip);
  EXPECT_EQ(c.encoder.hidden, 64u);
  EXPECT_DOUBLE_EQ(c.qa_train.lr, 5e-4);
  EXPECT_EQ(c.agen.head, HeadMode::independent);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeyNamesTheLine) {
  std::istringstream in("seeds = 1\nfilter.modee = none\n");
  try {
    parse_config(in, "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
  }
  std::istringstream no_eq("seeds 1\n");
  EXPECT_THROW(parse_config(no_eq), ConfigError);
}

TEST(Config, BadValuesAreErrors) {
  PipelineConfig c;
  EXPECT_THROW(c.set("filter.mode", "sometimes"), ConfigError);
  EXPECT_THROW(c.set("encoder.layers", "two"), ConfigError);
  EXPECT_THROW(c.set("qgen.stopwords", "maybe"), ConfigError);
  c.set("qa.label_fraction", "0");
  EXPECT_THROW(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.set("corpus.source", "squad");
  EXPECT_THROW(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.set("filter.train_on", "everything");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, MapRoundTripAndHash) {
  PipelineConfig a;
  a.set("agen.top_k", "7");
  a.set("decoder.layers", "2");
  PipelineConfig b;
  for (const auto& [k, v] : a.to_map()) b.set(k, v);
  EXPECT_EQ(a.to_map(), b.to_map());
  EXPECT_EQ(a.hash(), b.hash());
  b.set("qgen.top_p", "0.8");
  EXPECT_NE(a.hash(), b.hash());
  std::istringstream text(a.to_text());
  EXPECT_EQ(parse_config(text).hash(), a.hash());
}

TEST(Config, AnswerTopKDefaultsByScope) {
  PipelineConfig c;
  EXPECT_EQ(c.effective_answer_top_k(), 5u);
  c.set("agen.scope", "paragraph");
  EXPECT_EQ(c.effective_answer_top_k(), 24u);
  c.set("agen.top_k", "3");
  EXPECT_EQ(c.effective_answer_top_k(), 3u);
}

TEST(Config, FilterModes) {
  EXPECT_EQ(attempts_for(FilterMode::overgenerate_rt), 2u);
  EXPECT_EQ(attempts_for(FilterMode::roundtrip), 1u);
  EXPECT_EQ(attempts_for(FilterMode::none), 1u);
  for (auto m : {FilterMode::none, FilterMode::roundtrip, FilterMode::overgenerate_rt})
    EXPECT_EQ(filter_mode_from_string(to_string(m)), m);
}

TEST(Sweep, AxesAndKeys) {
  EXPECT_THROW(sweep_axis_from_string("learning_rate"), ConfigError);
  for (auto a : {SweepAxis::answer_top_k, SweepAxis::filter_mode, SweepAxis::qgen_layers, SweepAxis::label_volume}) {
    EXPECT_EQ(sweep_axis_from_string(to_string(a)), a);
    PipelineConfig c;
    EXPECT_NO_THROW(c.set(sweep_key(a), a == SweepAxis::filter_mode ? "none" : "1"));
  }
  EXPECT_THROW(sweep(PipelineConfig{}, SweepAxis::answer_top_k, {}), ConfigError);
}
