#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/audit.hpp"
#include "synthqa/corpus.hpp"
#include "synthqa/nn/sampling.hpp"
#include "synthqa/nn/train.hpp"
#include "synthqa/nn/transformer.hpp"
#include "synthqa/tokenizer.hpp"

namespace synthqa {

enum class HeadMode { joint, independent };
enum class UnitScope { sentence, paragraph };

inline const char* to_string(HeadMode m) { return m == HeadMode::joint ? "joint" : "independent"; }
inline const char* to_string(UnitScope s) { return s == UnitScope::sentence ? "sentence" : "paragraph"; }

inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "joint") return HeadMode::joint;
  if (s == "independent") return HeadMode::independent;
  throw ConfigError("unknown head mode '" + s + "'");
}

inline UnitScope unit_scope_from_string(const std::string& s) {
  if (s == "sentence") return UnitScope::sentence;
  if (s == "paragraph") return UnitScope::paragraph;
  throw ConfigError("unknown answer scope '" + s + "'");
}

inline constexpr std::size_t kDefaultMaxAnswerLen = 30;

// Inclusive token span within a context.
struct AnswerSpan {
  std::size_t s = 0;
  std::size_t e = 0;
  std::string text;
  bool operator==(const AnswerSpan&) const = default;
};

struct AnswerCandidate {
  AnswerSpan span;
  double prob = 0.0;
  UnitScope scope = UnitScope::sentence;
};

struct ScoredSpan {
  std::size_t s = 0;
  std::size_t e = 0;
  double prob = 0.0;
};

// All (s, e) with first <= s <= e < last and e - s + 1 <= max_len, ordered by
// s then e.
inline std::vector<std::pair<std::size_t, std::size_t>> unit_pairs(TokenRange unit, std::size_t max_len) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = unit.first; s < unit.last; ++s)
    for (std::size_t e = s; e < unit.last && e - s + 1 <= max_len; ++e) out.emplace_back(s, e);
  return out;
}

inline std::size_t unit_pair_count(std::size_t n, std::size_t max_len) {
  std::size_t c = 0;
  for (std::size_t s = 0; s < n; ++s) c += std::min(max_len, n - s);
  return c;
}

// ---------------------------------------------------------------------------
// Span head

// Joint: score(s, e) = w2 . relu(h_s W_a + h_e W_b + b1), a one-hidden-layer
// MLP of width 2H over concat(h_s, h_e) with the first layer split in two.
// Independent: start and end logits from an H x 2 projection, score(s, e) =
// start(s) + end(e).
struct SpanHead {
  HeadMode mode = HeadMode::joint;
  std::size_t w_a = 0, w_b = 0, b1 = 0, w2 = 0;
  std::size_t w_se = 0, b_se = 0;
};

template <class T>
SpanHead add_span_head(nn::ParameterStore<T>& store, std::size_t hidden, HeadMode mode, Rng& rng) {
  SpanHead h;
  h.mode = mode;
  const auto H = static_cast<Eigen::Index>(hidden);
  if (mode == HeadMode::joint) {
    h.w_a = store.add("span.start_proj", H, 2 * H, nn::Init::normal, rng);
    h.w_b = store.add("span.end_proj", H, 2 * H, nn::Init::normal, rng);
    h.b1 = store.add("span.hidden_bias", 1, 2 * H, nn::Init::zeros, rng);
    h.w2 = store.add("span.out", 2 * H, 1, nn::Init::normal, rng);
  } else {
    h.w_se = store.add("span.start_end", H, 2, nn::Init::normal, rng);
    h.b_se = store.add("span.start_end_bias", 1, 2, nn::Init::zeros, rng);
  }
  return h;
}

// Scores for absolute row pairs of `states`, as a 1 x P vector.
template <class T>
typename nn::Graph<T>::Var span_pair_scores(nn::Graph<T>& g, nn::ParameterStore<T>& store, const SpanHead& head,
                                            typename nn::Graph<T>::Var states,
                                            const std::vector<std::pair<int, int>>& pairs) {
  if (head.mode == HeadMode::joint) {
    auto a = g.matmul(states, g.param(store[head.w_a]));
    auto b = g.matmul(states, g.param(store[head.w_b]));
    return g.pair_scores(a, b, g.param(store[head.b1]), g.param(store[head.w2]), pairs);
  }
  auto se = g.linear(states, g.param(store[head.w_se]), g.param(store[head.b_se]));
  std::vector<std::pair<int, int>> starts, ends;
  starts.reserve(pairs.size());
  ends.reserve(pairs.size());
  for (auto [s, e] : pairs) {
    starts.emplace_back(s, 0);
    ends.emplace_back(e, 1);
  }
  return g.add(g.select(se, std::move(starts)), g.select(se, std::move(ends)));
}

// A gold span to learn: the unit it is normalized over and its endpoints,
// all as token indices within the sequence.
struct SpanTarget {
  TokenRange unit;
  std::size_t s = 0;
  std::size_t e = 0;
};

struct SpanExample {
  nn::SequenceInput input;
  std::vector<SpanTarget> targets;
  std::vector<std::string> record_ids;
};

// Mean over targets of -log p(gold | unit). Joint mode normalizes over the
// unit's valid pairs; independent mode adds separate start and end NLLs.
template <class T>
typename nn::Graph<T>::Var span_loss(nn::Graph<T>& g, nn::EncoderModel<T>& encoder, const SpanHead& head,
                                     std::size_t max_len, std::span<const SpanExample* const> batch) {
  std::vector<const nn::SequenceInput*> inputs;
  for (const auto* ex : batch) inputs.push_back(&ex->input);
  const auto tb = nn::make_batch(std::span<const nn::SequenceInput* const>(inputs.data(), inputs.size()));
  auto states = encoder.forward(g, tb);
  if (head.mode == HeadMode::joint) {
    std::vector<std::pair<int, int>> pairs;
    std::vector<nn::ScoreGroup> groups;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::map<std::pair<std::size_t, std::size_t>, std::size_t> unit_begin;
      for (const auto& t : batch[b]->targets) {
        const auto key = std::make_pair(t.unit.first, t.unit.last);
        auto it = unit_begin.find(key);
        if (it == unit_begin.end()) {
          it = unit_begin.emplace(key, pairs.size()).first;
          for (auto [s, e] : unit_pairs(t.unit, max_len))
            pairs.emplace_back(static_cast<int>(tb.row(b, s)), static_cast<int>(tb.row(b, e)));
        }
        const std::size_t begin = it->second;
        const std::size_t n = unit_pair_count(t.unit.size(), max_len);
        const std::size_t local = [&] {
          std::size_t idx = 0;
          for (std::size_t s = t.unit.first; s < t.s; ++s) idx += std::min(max_len, t.unit.last - s);
          return idx + (t.e - t.s);
        }();
        groups.push_back({begin, begin + n, begin + local});
      }
    }
    auto scores = span_pair_scores(g, encoder.store, head, states, pairs);
    return g.group_nll(scores, std::move(groups));
  }
  auto se = g.linear(states, g.param(encoder.store[head.w_se]), g.param(encoder.store[head.b_se]));
  std::vector<std::pair<int, int>> start_cells, end_cells;
  std::vector<nn::ScoreGroup> start_groups, end_groups;
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (const auto& t : batch[b]->targets) {
      const std::size_t begin = start_cells.size();
      for (std::size_t r = t.unit.first; r < t.unit.last; ++r) {
        start_cells.emplace_back(static_cast<int>(tb.row(b, r)), 0);
        end_cells.emplace_back(static_cast<int>(tb.row(b, r)), 1);
      }
      start_groups.push_back({begin, start_cells.size(), begin + (t.s - t.unit.first)});
      end_groups.push_back({begin, end_cells.size(), begin + (t.e - t.unit.first)});
    }
  auto ls = g.group_nll(g.select(se, std::move(start_cells)), std::move(start_groups));
  auto le = g.group_nll(g.select(se, std::move(end_cells)), std::move(end_groups));
  return g.add(ls, le);
}

// Normalized span distributions for several units of one or more sequences,
// evaluated in batches. `units[i]` belongs to sequence `owner[i]`.
template <class T>
std::vector<std::vector<ScoredSpan>> score_units(nn::EncoderModel<T>& encoder, const SpanHead& head,
                                                 std::size_t max_len,
                                                 const std::vector<nn::SequenceInput>& sequences,
                                                 const std::vector<std::size_t>& owner,
                                                 const std::vector<TokenRange>& units, std::size_t batch_size = 16) {
  if (owner.size() != units.size()) throw ParameterError("score_units needs one owner per unit");
  for (const auto& u : units)
    if (u.empty()) throw ParameterError("cannot score spans over an empty unit");
  std::vector<std::vector<ScoredSpan>> out(units.size());
  for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
    const std::size_t stop = std::min(sequences.size(), start + batch_size);
    std::vector<const nn::SequenceInput*> inputs;
    for (std::size_t i = start; i < stop; ++i) inputs.push_back(&sequences[i]);
    const auto tb = nn::make_batch(std::span<const nn::SequenceInput* const>(inputs.data(), inputs.size()));
    nn::Graph<T> g(false);
    auto states = encoder.forward(g, tb);
    std::vector<std::pair<int, int>> pairs;
    std::vector<std::size_t> which, begin;
    for (std::size_t u = 0; u < units.size(); ++u) {
      if (owner[u] < start || owner[u] >= stop) continue;
      if (units[u].last > sequences[owner[u]].ids.size()) throw ParameterError("unit extends past its context");
      which.push_back(u);
      begin.push_back(pairs.size());
      for (auto [s, e] : unit_pairs(units[u], max_len))
        pairs.emplace_back(static_cast<int>(tb.row(owner[u] - start, s)), static_cast<int>(tb.row(owner[u] - start, e)));
    }
    if (pairs.empty()) continue;
    const auto& sv = g.value(span_pair_scores(g, encoder.store, head, states, pairs));
    for (std::size_t w = 0; w < which.size(); ++w) {
      const auto& unit = units[which[w]];
      const auto uv = unit_pairs(unit, max_len);
      std::vector<double> logits(uv.size());
      for (std::size_t i = 0; i < uv.size(); ++i) logits[i] = static_cast<double>(sv(0, static_cast<Eigen::Index>(begin[w] + i)));
      const auto probs = nn::softmax(logits);
      auto& dst = out[which[w]];
      dst.reserve(uv.size());
      for (std::size_t i = 0; i < uv.size(); ++i) dst.push_back({uv[i].first, uv[i].second, probs[i]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Answer alignment

struct AlignmentStats {
  std::size_t aligned = 0;
  std::size_t unalignable = 0;   // no token overlaps the answer
  std::size_t crosses_unit = 0;  // spans a sentence boundary in sentence scope
  std::size_t too_long = 0;      // longer than max_answer_len tokens
  std::size_t overlength = 0;    // packed input exceeds max_seq_len

  std::size_t skipped() const { return unalignable + crosses_unit + too_long + overlength; }

  nlohmann::json to_json() const {
    return {{"aligned", aligned},
            {"unalignable", unalignable},
            {"crosses_unit", crosses_unit},
            {"too_long", too_long},
            {"overlength", overlength}};
  }
};

// Snaps a byte range outward to whole tokens.
inline std::optional<std::pair<std::size_t, std::size_t>> align_answer(const TokenSequence& ctx, CharSpan span,
                                                                       std::size_t max_len, AlignmentStats& stats) {
  std::size_t s = 0, e = 0;
  if (!covering_tokens(ctx, span, s, e)) {
    ++stats.unalignable;
    return std::nullopt;
  }
  if (e - s + 1 > max_len) {
    ++stats.too_long;
    return std::nullopt;
  }
  return std::make_pair(s, e);
}

inline std::string span_text(const std::string& text, const TokenSequence& ctx, std::size_t s, std::size_t e) {
  const auto a = ctx.offsets[s].start;
  const auto b = ctx.offsets[e].end;
  return text.substr(a, b - a);
}

// Token ranges of the scoring units of a paragraph.
inline std::vector<TokenRange> paragraph_units(const Paragraph& p, const TokenSequence& ctx, UnitScope scope) {
  std::vector<TokenRange> out;
  if (scope == UnitScope::paragraph) {
    if (!ctx.empty()) out.push_back({0, ctx.size()});
    return out;
  }
  for (const auto& sent : p.sentences) {
    auto r = tokens_within(ctx, sent);
    if (!r.empty()) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoder pretraining (masked-token prediction)

struct MaskedLmConfig {
  double mask_prob = 0.15;
};

struct TextExample {
  nn::SequenceInput input;
  std::string record_id;
};

// Paragraph texts as encoder inputs: the first sentence in segment 0, the
// rest in segment 1. Long paragraphs are cut into max_len windows.
inline std::vector<TextExample> encoder_text_examples(const Corpus& corpus, const Vocab& vocab, std::size_t max_len) {
  std::vector<TextExample> out;
  for (const auto& d : corpus.documents)
    for (std::size_t pi = 0; pi < d.paragraphs.size(); ++pi) {
      const auto& p = d.paragraphs[pi];
      const auto seq = encode(p.text, vocab);
      if (seq.empty()) continue;
      std::size_t first_end = p.sentences.empty() ? p.text.size() : p.sentences.front().end;
      std::vector<int> segs(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) segs[i] = seq.offsets[i].start < first_end ? 0 : 1;
      for (std::size_t w = 0; w < seq.size(); w += max_len) {
        const std::size_t end = std::min(seq.size(), w + max_len);
        TextExample ex;
        ex.input.ids.assign(seq.ids.begin() + static_cast<std::ptrdiff_t>(w), seq.ids.begin() + static_cast<std::ptrdiff_t>(end));
        ex.input.segments.assign(segs.begin() + static_cast<std::ptrdiff_t>(w), segs.begin() + static_cast<std::ptrdiff_t>(end));
        ex.record_id = text_record_id(d.id, pi);
        out.push_back(std::move(ex));
      }
    }
  return out;
}

namespace detail {

// Chooses masked positions (at least one per sequence) and the corrupted ids.
// 80% of chosen positions become UNK (the mask token), 10% a random word, 10%
// stay unchanged.
inline std::vector<std::size_t> choose_masks(const std::vector<int>& ids, double prob, std::size_t vocab_size, Rng& rng,
                                             std::vector<int>& corrupted, bool always_mask_token) {
  corrupted = ids;
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= kNumSpecials && rng.uniform() < prob) pos.push_back(i);
  if (pos.empty()) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] >= kNumSpecials) eligible.push_back(i);
    if (eligible.empty()) return pos;
    pos.push_back(eligible[rng.below(eligible.size())]);
  }
  for (auto i : pos) {
    const double u = always_mask_token ? 0.0 : rng.uniform();
    if (u < 0.8)
      corrupted[i] = kUnk;
    else if (u < 0.9 && vocab_size > static_cast<std::size_t>(kNumSpecials))
      corrupted[i] = kNumSpecials + static_cast<int>(rng.below(vocab_size - kNumSpecials));
  }
  return pos;
}

}  // namespace detail

struct EncoderPretrainResult {
  nn::EncoderModel<float> encoder;
  nn::TrainReport report;
  std::optional<double> heldout_accuracy;  // masked-token accuracy
};

// Masked-token accuracy with every chosen position replaced by the mask token.
template <class T>
double masked_token_accuracy(nn::EncoderModel<T>& model_with_head, std::size_t head_w, std::size_t head_b,
                             const std::vector<TextExample>& examples, double mask_prob, std::uint64_t seed) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Rng rng(mix_seed({seed, i, 0xACCULL}));
    std::vector<int> corrupted;
    const auto pos = detail::choose_masks(examples[i].input.ids, mask_prob, model_with_head.config.vocab_size, rng,
                                          corrupted, true);
    if (pos.empty()) continue;
    nn::SequenceInput in{corrupted, examples[i].input.segments};
    nn::Graph<T> g(false);
    auto states = model_with_head.forward(g, nn::make_batch(in));
    const auto& h = g.value(states);
    const auto& w = model_with_head.store[head_w].value;
    const auto& b = model_with_head.store[head_b].value;
    for (auto p : pos) {
      nn::RowVector<T> logits = h.row(static_cast<Eigen::Index>(p)) * w + b.row(0);
      Eigen::Index arg = 0;
      logits.maxCoeff(&arg);
      hit += static_cast<int>(arg) == examples[i].input.ids[p];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

// Masked-token pretraining over paragraph text. With a zero step budget the
// encoder is returned at its random initialization.
inline EncoderPretrainResult pretrain_encoder(const Corpus& corpus, const Vocab& vocab, nn::ModelConfig mc,
                                              const nn::TrainConfig& tc, const MaskedLmConfig& mlm = {},
                                              TrainingAudit* audit = nullptr, const Corpus* heldout = nullptr) {
  if (corpus.documents.empty()) throw ParameterError("pretraining needs a non-empty corpus");
  mc.vocab_size = vocab.size();
  auto model = nn::EncoderModel<float>::create(mc, tc.seed);
  Rng head_rng(mix_seed({tc.seed, 0x4D4C4DULL}));
  const auto H = static_cast<Eigen::Index>(mc.hidden);
  const auto w = model.store.add("mlm.weight", H, static_cast<Eigen::Index>(mc.vocab_size), nn::Init::normal, head_rng);
  const auto b = model.store.add("mlm.bias", 1, static_cast<Eigen::Index>(mc.vocab_size), nn::Init::zeros, head_rng);
  const auto examples = encoder_text_examples(corpus, vocab, mc.max_seq_len);
  EncoderPretrainResult result;
  const bool zero_budget = tc.epochs == 0 || examples.empty();
  if (!zero_budget) {
    std::size_t call = 0;
    auto loss_fn = [&](nn::Graph<float>& g, std::span<const TextExample* const> batch) {
      Rng rng(mix_seed({tc.seed, call++, 0x4D41534BULL}));
      std::vector<nn::SequenceInput> corrupted(batch.size());
      std::vector<int> rows, targets;
      std::size_t length = 0;
      for (const auto* ex : batch) length = std::max(length, ex->input.ids.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto pos = detail::choose_masks(batch[i]->input.ids, mlm.mask_prob, mc.vocab_size, rng,
                                              corrupted[i].ids, false);
        corrupted[i].segments = batch[i]->input.segments;
        for (auto p : pos) {
          rows.push_back(static_cast<int>(i * length + p));
          targets.push_back(batch[i]->input.ids[p]);
        }
      }
      std::vector<const nn::SequenceInput*> ptrs;
      for (const auto& c : corrupted) ptrs.push_back(&c);
      auto states = model.forward(g, nn::make_batch(std::span<const nn::SequenceInput* const>(ptrs.data(), ptrs.size())));
      auto picked = g.gather_rows(states, rows);
      auto logits = g.linear(picked, g.param(model.store[w]), g.param(model.store[b]));
      return g.cross_entropy(logits, std::move(targets));
    };
    std::function<void(std::span<const TextExample* const>)> on_batch;
    if (audit)
      on_batch = [&](std::span<const TextExample* const> batch) {
        for (const auto* ex : batch) audit->record("encoder_pretrain", ex->record_id);
      };
    result.report = nn::train<float>(model.store.pointers(), examples, tc, loss_fn, on_batch);
  }
  if (heldout) {
    const auto held = encoder_text_examples(*heldout, vocab, mc.max_seq_len);
    result.heldout_accuracy = masked_token_accuracy(model, w, b, held, mlm.mask_prob, tc.seed);
  }
  result.encoder = model.stripped();
  return result;
}

// ---------------------------------------------------------------------------
// Answer extractor

struct AnswerGenConfig {
  HeadMode head = HeadMode::joint;
  UnitScope scope = UnitScope::sentence;
  std::size_t max_answer_len = kDefaultMaxAnswerLen;
};

template <class T>
struct AnswerExtractorModel {
  nn::EncoderModel<T> encoder;  // store also holds the head parameters
  SpanHead head;
  std::size_t max_answer_len = kDefaultMaxAnswerLen;
  UnitScope scope = UnitScope::sentence;
};

// Unlabelled context input: all tokens in segment 0.
inline nn::SequenceInput context_input(const TokenSequence& ctx) {
  return {ctx.ids, std::vector<int>(ctx.size(), 0)};
}

inline std::vector<SpanExample> answer_extractor_examples(const Corpus& corpus, const Vocab& vocab,
                                                          const AnswerGenConfig& cfg, std::size_t max_seq_len,
                                                          AlignmentStats& stats) {
  std::vector<SpanExample> out;
  for (const auto& d : corpus.documents)
    for (const auto& p : d.paragraphs) {
      if (p.qas.empty()) continue;
      const auto ctx = encode(p.text, vocab);
      if (ctx.size() > max_seq_len) {
        stats.overlength += p.qas.size();
        continue;
      }
      SpanExample ex;
      ex.input = context_input(ctx);
      for (const auto& qa : p.qas) {
        const auto& ans = qa.answers.front();
        const CharSpan cs{ans.char_start, ans.char_start + ans.text.size()};
        TokenRange unit{0, ctx.size()};
        if (cfg.scope == UnitScope::sentence) {
          const int si = sentence_containing(p, cs.start, cs.end);
          if (si < 0) {
            ++stats.crosses_unit;
            continue;
          }
          unit = tokens_within(ctx, p.sentences[static_cast<std::size_t>(si)]);
        }
        auto span = align_answer(ctx, cs, cfg.max_answer_len, stats);
        if (!span) continue;
        if (span->first < unit.first || span->second >= unit.last) {
          ++stats.crosses_unit;
          continue;
        }
        ++stats.aligned;
        ex.targets.push_back({unit, span->first, span->second});
        ex.record_ids.push_back(gold_record_id(d.id, qa.id));
      }
      if (!ex.targets.empty()) out.push_back(std::move(ex));
    }
  return out;
}

struct AnswerExtractorResult {
  AnswerExtractorModel<float> model;
  nn::TrainReport report;
  AlignmentStats alignment;
};

// Fine-tunes a copy of `encoder` with a fresh span head on the gold answers
// of `corpus_half`, minimizing -log p(a | c).
inline AnswerExtractorResult train_answer_extractor(const Corpus& corpus_half, const Vocab& vocab,
                                                    const nn::EncoderModel<float>& encoder, const AnswerGenConfig& cfg,
                                                    const nn::TrainConfig& tc, TrainingAudit* audit = nullptr) {
  if (cfg.max_answer_len == 0) throw ConfigError("max_answer_len must be positive");
  AnswerExtractorResult r;
  r.model.encoder = encoder.stripped();
  r.model.max_answer_len = cfg.max_answer_len;
  r.model.scope = cfg.scope;
  Rng rng(mix_seed({tc.seed, 0xA6E4ULL}));
  r.model.head = add_span_head(r.model.encoder.store, encoder.config.hidden, cfg.head, rng);
  const auto examples = answer_extractor_examples(corpus_half, vocab, cfg, encoder.config.max_seq_len, r.alignment);
  if (examples.empty()) throw ParameterError("no alignable gold answers to train the answer extractor");
  auto& m = r.model;
  auto loss_fn = [&](nn::Graph<float>& g, std::span<const SpanExample* const> batch) {
    return span_loss(g, m.encoder, m.head, m.max_answer_len, batch);
  };
  std::function<void(std::span<const SpanExample* const>)> on_batch;
  if (audit)
    on_batch = [&](std::span<const SpanExample* const> batch) {
      for (const auto* ex : batch)
        for (const auto& id : ex->record_ids) audit->record("answer_extractor", id);
    };
  r.report = nn::train<float>(m.encoder.store.pointers(), examples, tc, loss_fn, on_batch);
  return r;
}

// p(a | c) over the valid pairs of `unit`, summing to one.
template <class T>
std::vector<ScoredSpan> score_spans(AnswerExtractorModel<T>& model, const TokenSequence& context, TokenRange unit) {
  if (unit.empty()) throw ParameterError("cannot score spans over an empty unit");
  if (unit.last > context.size()) throw ParameterError("unit extends past its context");
  if (context.size() > model.encoder.config.max_seq_len)
    throw LengthError("context of " + std::to_string(context.size()) + " tokens exceeds max_seq_len");
  std::vector<nn::SequenceInput> seqs{context_input(context)};
  return score_units(model.encoder, model.head, model.max_answer_len, seqs, {0}, {unit}).front();
}

// Nucleus support of a unit's distribution, truncated to the k most probable.
inline std::vector<ScoredSpan> truncate_candidates(const std::vector<ScoredSpan>& dist, std::size_t k, double p) {
  if (k < 1) throw ParameterError("k must be at least 1");
  std::vector<double> probs(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) probs[i] = dist[i].prob;
  auto support = nn::nucleus_filter(probs, p);
  if (support.size() > k) support.resize(k);
  std::vector<ScoredSpan> out;
  for (auto i : support) out.push_back(dist[i]);
  return out;
}

// Candidate answers for many paragraphs. Each unit contributes at most
// min(k, nucleus size) spans; duplicates across units keep the higher
// probability. Output per paragraph is ordered by (s, e).
template <class T>
std::vector<std::vector<AnswerCandidate>> sample_answer_candidates(AnswerExtractorModel<T>& model,
                                                                   const std::vector<const Paragraph*>& paragraphs,
                                                                   const Vocab& vocab, std::size_t k, double p) {
  if (k < 1) throw ParameterError("k must be at least 1");
  if (!(p > 0.0) || p > 1.0) throw ParameterError("p must lie in (0, 1]");
  std::vector<TokenSequence> contexts;
  std::vector<nn::SequenceInput> seqs;
  std::vector<std::size_t> owner, seq_of_para(paragraphs.size(), static_cast<std::size_t>(-1));
  std::vector<TokenRange> units;
  for (std::size_t i = 0; i < paragraphs.size(); ++i) {
    auto ctx = encode(paragraphs[i]->text, vocab);
    if (ctx.empty() || ctx.size() > model.encoder.config.max_seq_len) continue;
    seq_of_para[i] = seqs.size();
    for (const auto& u : paragraph_units(*paragraphs[i], ctx, model.scope)) {
      owner.push_back(seqs.size());
      units.push_back(u);
    }
    seqs.push_back(context_input(ctx));
    contexts.push_back(std::move(ctx));
  }
  const auto dists = score_units(model.encoder, model.head, model.max_answer_len, seqs, owner, units);
  std::vector<std::map<std::pair<std::size_t, std::size_t>, double>> best(seqs.size());
  for (std::size_t u = 0; u < units.size(); ++u)
    for (const auto& sc : truncate_candidates(dists[u], k, p)) {
      auto& slot = best[owner[u]][{sc.s, sc.e}];
      slot = std::max(slot, sc.prob);
    }
  std::vector<std::vector<AnswerCandidate>> out(paragraphs.size());
  for (std::size_t i = 0; i < paragraphs.size(); ++i) {
    const auto si = seq_of_para[i];
    if (si == static_cast<std::size_t>(-1)) continue;
    for (const auto& [se, prob] : best[si]) {
      AnswerCandidate c;
      c.span = {se.first, se.second, span_text(paragraphs[i]->text, contexts[si], se.first, se.second)};
      c.prob = prob;
      c.scope = model.scope;
      out[i].push_back(std::move(c));
    }
  }
  return out;
}

template <class T>
std::vector<AnswerCandidate> sample_answer_candidates(AnswerExtractorModel<T>& model, const Paragraph& paragraph,
                                                      const Vocab& vocab, std::size_t k, double p) {
  return sample_answer_candidates(model, std::vector<const Paragraph*>{&paragraph}, vocab, k, p).front();
}

inline nlohmann::json candidate_to_json(const std::string& doc_id, std::size_t para_idx, const AnswerCandidate& c) {
  return {{"doc_id", doc_id}, {"para_idx", para_idx}, {"s", c.span.s},           {"e", c.span.e},
          {"text", c.span.text}, {"prob", c.prob},     {"scope", to_string(c.scope)}};
}

}  // namespace synthqa
