#pragma once

#include <cctype>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "synthqa/common.hpp"
#include "synthqa/corpus.hpp"

namespace synthqa {

using TokenId = int;

// Fixed special ids.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kQStart = 3;
inline constexpr TokenId kQEnd = 4;
inline constexpr TokenId kNumSpecials = 5;

inline constexpr std::size_t kNoOffset = std::numeric_limits<std::size_t>::max();

class Vocab {
 public:
  Vocab() : id_to_token_{"<pad>", "<eos>", "<unk>", "question:", ":question"} {
    for (TokenId i = 0; i < kNumSpecials; ++i) token_to_id_[id_to_token_[static_cast<std::size_t>(i)]] = i;
  }

  // Adds a non-special token; returns its id (existing id if already present).
  TokenId add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    const auto id = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.push_back(token);
    token_to_id_.emplace(token, id);
    return id;
  }

  std::size_t size() const { return id_to_token_.size(); }

  TokenId id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(id_to_token_.size()));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }

  std::uint64_t hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& t : id_to_token_) {
      h = fnv1a(t, h);
      h = fnv1a(std::string_view("\x1f", 1), h);
    }
    return h;
  }

  nlohmann::json to_json() const {
    nlohmann::json specials = nlohmann::json::object();
    const char* names[] = {"PAD", "EOS", "UNK", "QSTART", "QEND"};
    for (TokenId i = 0; i < kNumSpecials; ++i) specials[names[i]] = {{"token", id_to_token_[static_cast<std::size_t>(i)]}, {"id", i}};
    nlohmann::json tokens = nlohmann::json::object();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) tokens[id_to_token_[i]] = i;
    return {{"specials", specials}, {"vocab", tokens}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    try {
      const auto& tokens = j.at("vocab");
      std::vector<std::string> by_id(tokens.size());
      for (auto it = tokens.begin(); it != tokens.end(); ++it) {
        auto id = it.value().get<std::size_t>();
        if (id >= by_id.size() || !by_id[id].empty()) throw FormatError("vocab ids are not a dense bijection");
        by_id[id] = it.key();
      }
      Vocab v;
      for (TokenId i = 0; i < kNumSpecials; ++i)
        if (by_id.size() <= static_cast<std::size_t>(i) || by_id[static_cast<std::size_t>(i)] != v.id_to_token_[static_cast<std::size_t>(i)])
          throw FormatError("vocab specials do not match the fixed layout");
      for (std::size_t i = kNumSpecials; i < by_id.size(); ++i) v.add(by_id[i]);
      return v;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed vocab json: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write vocab to '" + path + "'");
    out << to_json().dump(1) << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open vocab '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("'" + path + "': " + e.what());
    }
    return from_json(j);
  }

  bool operator==(const Vocab& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<CharSpan> offsets;  // {kNoOffset, kNoOffset} for specials

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

// Word-level pre-tokenization: runs of alphanumerics (non-ASCII bytes count as
// word characters) and single punctuation characters. Whitespace separates.
inline std::vector<CharSpan> pretokenize(std::string_view text) {
  std::vector<CharSpan> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto word_char = [](unsigned char c) { return std::isalnum(c) || c >= 0x80; };
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (word_char(c)) {
      std::size_t j = i;
      while (j < n && word_char(static_cast<unsigned char>(text[j]))) ++j;
      out.push_back({i, j});
      i = j;
    } else {
      out.push_back({i, i + 1});
      ++i;
    }
  }
  return out;
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& span : pretokenize(text)) out.push_back(lowercase(text.substr(span.start, span.size())));
  return out;
}

// Vocabulary over paragraph text and gold questions. Non-special ids are
// assigned in lexicographic token order.
inline Vocab build_vocab(const Corpus& corpus, std::size_t min_count = 1) {
  if (min_count < 1) throw ParameterError("min_count must be at least 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& d : corpus.documents)
    for (const auto& p : d.paragraphs) {
      for (auto& t : word_tokens(p.text)) ++counts[t];
      for (const auto& qa : p.qas)
        for (auto& t : word_tokens(qa.question)) ++counts[t];
    }
  Vocab v;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) v.add(tok);
  return v;
}

inline TokenSequence encode(std::string_view text, const Vocab& vocab) {
  TokenSequence seq;
  for (const auto& span : pretokenize(text)) {
    seq.ids.push_back(vocab.id(lowercase(text.substr(span.start, span.size()))));
    seq.offsets.push_back(span);
  }
  return seq;
}

inline std::string decode(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    const auto& tok = vocab.token(id);
    if (id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

// Token range [first, last) whose offsets lie inside the byte range.
struct TokenRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first; }
  bool empty() const { return last <= first; }
};

inline TokenRange tokens_within(const TokenSequence& seq, CharSpan span) {
  TokenRange r{seq.size(), seq.size()};
  bool found = false;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& o = seq.offsets[i];
    if (o.start == kNoOffset) continue;
    if (o.start >= span.start && o.end <= span.end) {
      if (!found) r.first = i;
      found = true;
      r.last = i + 1;
    }
  }
  if (!found) r = {0, 0};
  return r;
}

// Smallest token span covering the byte range (snapping outward). Returns
// false if no token overlaps it.
inline bool covering_tokens(const TokenSequence& seq, CharSpan span, std::size_t& s, std::size_t& e) {
  bool found = false;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& o = seq.offsets[i];
    if (o.start == kNoOffset) continue;
    if (o.end > span.start && o.start < span.end) {
      if (!found) s = i;
      e = i;
      found = true;
    }
  }
  return found;
}

}  // namespace synthqa
