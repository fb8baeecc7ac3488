#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "synthqa/corpus.hpp"
#include "synthqa/tokenizer.hpp"

using namespace synthqa;

namespace {

Corpus text_corpus(const std::string& text) {
  Corpus c;
  Paragraph p;
  p.text = text;
  p.sentences = split_sentences(text);
  c.documents.push_back({"d", {p}});
  return c;
}

}  // namespace

TEST(Vocab, SpecialsAreFixed) {
  Vocab v;
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.token(kPad), "<pad>");
  EXPECT_EQ(v.token(kEos), "<eos>");
  EXPECT_EQ(v.token(kUnk), "<unk>");
  EXPECT_EQ(v.token(kQStart), "question:");
  EXPECT_EQ(v.token(kQEnd), ":question");
}

TEST(Vocab, MinCountRule) {
  auto v = build_vocab(text_corpus("a a b"), 2);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
  EXPECT_EQ(build_vocab(text_corpus("a a b"), 1).size(), 7u);
  EXPECT_THROW(build_vocab(text_corpus("a"), 0), ParameterError);
}

TEST(Vocab, JsonRoundTripAndHash) {
  auto v = build_vocab(generate_toy_corpus(20, 0, default_toy_spec()));
  auto path = std::filesystem::temp_directory_path() / "synthqa_vocab_test.json";
  v.save(path.string());
  auto back = Vocab::load(path.string());
  EXPECT_EQ(v, back);
  EXPECT_EQ(v.hash(), back.hash());
  EXPECT_NE(v.hash(), Vocab().hash());
}

TEST(Vocab, ToyVocabularyIsTemplateWordsPlusEntities) {
  const auto spec = default_toy_spec();
  auto c = generate_toy_corpus(2000, 0, spec);
  // Independent count: every word of every template, question and slot value.
  std::set<std::string> words;
  auto add = [&](const std::string& s) {
    std::string cleaned;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '<') {
        i = s.find('>', i);
        cleaned += ' ';
        continue;
      }
      cleaned += s[i];
    }
    for (auto& w : word_tokens(cleaned)) words.insert(w);
  };
  for (const auto& t : spec.templates) {
    add(t.text);
    for (const auto& q : t.questions) add(q.second);
  }
  std::set<std::string> used_values;
  for (const auto& [slot, vals] : spec.slots)
    for (const auto& v : vals)
      for (const auto& d : c.documents)
        if (d.paragraphs[0].text.find(v) != std::string::npos) {
          used_values.insert(v);
          break;
        }
  for (const auto& v : used_values) add(v);
  auto vocab = build_vocab(c);
  EXPECT_EQ(vocab.size(), kNumSpecials + words.size());
}

TEST(Encode, EmptyText) {
  Vocab v;
  auto s = encode("", v);
  EXPECT_TRUE(s.empty());
  EXPECT_TRUE(s.offsets.empty());
}

TEST(Encode, OffsetsRecoverSource) {
  auto c = text_corpus("Marie Curie, born 1867.");
  auto v = build_vocab(c);
  const std::string text = "Marie  Curie, born 1867.";
  auto s = encode(text, v);
  ASSERT_EQ(s.size(), 6u);
  ASSERT_EQ(s.offsets.size(), s.ids.size());
  std::vector<std::string> slices;
  for (auto o : s.offsets) slices.push_back(text.substr(o.start, o.size()));
  EXPECT_EQ(slices, (std::vector<std::string>{"Marie", "Curie", ",", "born", "1867", "."}));
  EXPECT_EQ(decode(s.ids, v), "marie curie , born 1867 .");
}

TEST(Encode, TokensPartitionNonWhitespace) {
  auto c = generate_toy_corpus(3, 2, default_toy_spec());
  auto v = build_vocab(c);
  for (const auto& d : c.documents) {
    const auto& text = d.paragraphs[0].text;
    auto s = encode(text, v);
    std::size_t covered = 0, prev_end = 0;
    for (auto o : s.offsets) {
      EXPECT_GE(o.start, prev_end);
      prev_end = o.end;
      covered += o.size();
    }
    std::size_t non_ws = 0;
    for (char ch : text) non_ws += !std::isspace(static_cast<unsigned char>(ch));
    EXPECT_EQ(covered, non_ws);
  }
}

TEST(Encode, UnseenWordBecomesOneUnk) {
  auto v = build_vocab(text_corpus("the cat sat"));
  auto s = encode("the zebra sat", v);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.ids[1], kUnk);
  EXPECT_NE(s.ids[0], kUnk);
  EXPECT_NE(s.ids[2], kUnk);
}

TEST(Decode, InverseOnNormalizedText) {
  auto v = build_vocab(text_corpus("Where was Ada Lovelace born ?"));
  const std::string t = "where was ada lovelace born ?";
  EXPECT_EQ(decode(encode(t, v).ids, v), t);
  EXPECT_EQ(decode(encode("Where   was ADA lovelace born ?", v).ids, v), t);
}

TEST(Decode, SpecialsPadAndRange) {
  auto v = build_vocab(text_corpus("who"));
  EXPECT_EQ(decode({kQStart, v.id("who"), kQEnd}, v), "question: who :question");
  EXPECT_EQ(decode({}, v), "");
  EXPECT_EQ(decode({kPad, v.id("who"), kPad}, v), "who");
  EXPECT_THROW(decode({static_cast<TokenId>(v.size())}, v), RangeError);
  EXPECT_THROW(decode({-1}, v), RangeError);
}

TEST(Spans, TokensWithinAndCovering) {
  auto v = build_vocab(text_corpus("Ada was born in New York in 1815."));
  const std::string t = "Ada was born in New York in 1815.";
  auto s = encode(t, v);
  auto r = tokens_within(s, {16, 24});
  EXPECT_EQ(r.first, 4u);
  EXPECT_EQ(r.last, 6u);
  std::size_t a = 0, b = 0;
  ASSERT_TRUE(covering_tokens(s, {17, 22}, a, b));
  EXPECT_EQ(a, 4u);
  EXPECT_EQ(b, 5u);
  EXPECT_FALSE(covering_tokens(s, {3, 4}, a, b));
}
