#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/answergen.hpp"
#include "synthqa/audit.hpp"
#include "synthqa/corpus.hpp"
#include "synthqa/nn/sampling.hpp"
#include "synthqa/nn/train.hpp"
#include "synthqa/nn/transformer.hpp"
#include "synthqa/tokenizer.hpp"

namespace synthqa {

enum Segment : int { kSegCtx = 0, kSegAns = 1, kSegQues = 2 };

enum class SamplingMode { topk, nucleus };

inline const char* to_string(SamplingMode m) { return m == SamplingMode::topk ? "topk" : "nucleus"; }

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "topk") return SamplingMode::topk;
  if (s == "nucleus") return SamplingMode::nucleus;
  throw FormatError("unknown sampling mode '" + s + "'");
}

struct QGenInput {
  std::vector<int> ids;
  std::vector<int> segments;
  std::size_t prompt_length = 0;  // tokens up to and including the EOS after the answer
};

// Packs [context, EOS, answer, EOS, QSTART, question, QEND, EOS]. The answer's
// context positions carry the answer segment. Without `question` the packing
// stops at the EOS after the answer, so a sample has to produce QSTART itself.
// With `stopwords` false the markers are omitted: [context, EOS, answer, EOS,
// question, EOS].
inline QGenInput build_qgen_input(std::span<const int> context, const AnswerSpan& answer,
                                  const std::optional<std::vector<int>>& question, std::size_t max_seq_len,
                                  bool stopwords = true) {
  if (answer.s > answer.e || answer.e >= context.size()) throw ParameterError("answer span outside the context");
  const std::size_t ans_len = answer.e - answer.s + 1;
  const std::size_t marker = stopwords ? 1 : 0;
  std::size_t total = context.size() + 1 + ans_len + 1;
  if (question) total += marker + question->size() + marker + 1;
  if (total > max_seq_len)
    throw LengthError("packed question-generation input of " + std::to_string(total) + " tokens exceeds max_seq_len " +
                      std::to_string(max_seq_len));
  QGenInput in;
  in.ids.reserve(total);
  in.segments.reserve(total);
  for (std::size_t i = 0; i < context.size(); ++i) {
    in.ids.push_back(context[i]);
    in.segments.push_back(i >= answer.s && i <= answer.e ? kSegAns : kSegCtx);
  }
  in.ids.push_back(kEos);
  in.segments.push_back(kSegCtx);
  for (std::size_t i = answer.s; i <= answer.e; ++i) {
    in.ids.push_back(context[i]);
    in.segments.push_back(kSegAns);
  }
  in.ids.push_back(kEos);
  in.segments.push_back(kSegAns);
  in.prompt_length = in.ids.size();
  if (question) {
    if (stopwords) {
      in.ids.push_back(kQStart);
      in.segments.push_back(kSegQues);
    }
    for (int q : *question) {
      in.ids.push_back(q);
      in.segments.push_back(kSegQues);
    }
    if (stopwords) {
      in.ids.push_back(kQEnd);
      in.segments.push_back(kSegQues);
    }
    in.ids.push_back(kEos);
    in.segments.push_back(kSegQues);
  }
  return in;
}

// Next-token targets for a packed sequence; PAD never counts as a target.
inline std::vector<int> lm_targets(const std::vector<int>& ids) {
  std::vector<int> t(ids.size(), -1);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) t[i] = ids[i + 1] == kPad ? -1 : ids[i + 1];
  return t;
}

struct LmExample {
  nn::SequenceInput input;
  std::vector<std::string> record_ids;
};

template <class T>
typename nn::Graph<T>::Var lm_loss(nn::Graph<T>& g, nn::DecoderModel<T>& model, std::span<const LmExample* const> batch) {
  std::vector<const nn::SequenceInput*> inputs;
  for (const auto* ex : batch) inputs.push_back(&ex->input);
  const auto tb = nn::make_batch(std::span<const nn::SequenceInput* const>(inputs.data(), inputs.size()));
  std::vector<int> targets(tb.batch * tb.length, -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto t = lm_targets(batch[b]->input.ids);
    for (std::size_t i = 0; i < t.size(); ++i) targets[tb.row(b, i)] = t[i];
  }
  return g.cross_entropy(model.forward(g, tb), std::move(targets));
}

// ---------------------------------------------------------------------------
// Decoder pretraining (next-token language modelling on raw text)

// [EOS, paragraph tokens..., EOS] windows in the context segment.
inline std::vector<LmExample> decoder_text_examples(const Corpus& corpus, const Vocab& vocab, std::size_t max_len) {
  std::vector<LmExample> out;
  for (const auto& d : corpus.documents)
    for (std::size_t pi = 0; pi < d.paragraphs.size(); ++pi) {
      std::vector<int> ids{kEos};
      for (int id : encode(d.paragraphs[pi].text, vocab).ids) ids.push_back(id);
      ids.push_back(kEos);
      for (std::size_t w = 0; w < ids.size(); w += max_len) {
        const std::size_t end = std::min(ids.size(), w + max_len);
        if (end - w < 2) break;
        LmExample ex;
        ex.input.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(w), ids.begin() + static_cast<std::ptrdiff_t>(end));
        ex.input.segments.assign(ex.input.ids.size(), kSegCtx);
        ex.record_ids.push_back(text_record_id(d.id, pi));
        out.push_back(std::move(ex));
      }
    }
  return out;
}

// exp(mean next-token NLL) over the examples.
template <class T>
double perplexity(nn::DecoderModel<T>& model, const std::vector<LmExample>& examples) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    nn::Graph<T> g(false);
    const auto tb = nn::make_batch(ex.input);
    const auto t = lm_targets(ex.input.ids);
    std::size_t n = 0;
    for (int v : t) n += v >= 0;
    if (n == 0) continue;
    auto loss = g.cross_entropy(model.forward(g, tb), t);
    nll += static_cast<double>(g.scalar(loss)) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw ParameterError("perplexity needs at least one predicted token");
  return std::exp(nll / static_cast<double>(count));
}

struct DecoderPretrainResult {
  nn::DecoderModel<float> decoder;
  nn::TrainReport report;
  std::optional<double> heldout_perplexity;
};

// The model config should carry three segment types so the decoder can be
// fine-tuned as a question generator. Zero epochs leave it at random init.
inline DecoderPretrainResult pretrain_decoder(const Corpus& corpus, const Vocab& vocab, nn::ModelConfig mc,
                                              const nn::TrainConfig& tc, TrainingAudit* audit = nullptr,
                                              const Corpus* heldout = nullptr) {
  if (corpus.documents.empty()) throw ParameterError("pretraining needs a non-empty corpus");
  mc.vocab_size = vocab.size();
  DecoderPretrainResult r;
  r.decoder = nn::DecoderModel<float>::create(mc, tc.seed);
  const auto examples = decoder_text_examples(corpus, vocab, mc.max_seq_len);
  if (tc.epochs > 0 && !examples.empty()) {
    auto loss_fn = [&](nn::Graph<float>& g, std::span<const LmExample* const> batch) {
      return lm_loss(g, r.decoder, batch);
    };
    std::function<void(std::span<const LmExample* const>)> on_batch;
    if (audit)
      on_batch = [&](std::span<const LmExample* const> batch) {
        for (const auto* ex : batch)
          for (const auto& id : ex->record_ids) audit->record("decoder_pretrain", id);
      };
    r.report = nn::train<float>(r.decoder.store.pointers(), examples, tc, loss_fn, on_batch);
  }
  if (heldout) r.heldout_perplexity = perplexity(r.decoder, decoder_text_examples(*heldout, vocab, mc.max_seq_len));
  return r;
}

// ---------------------------------------------------------------------------
// Question generator

struct QGenConfig {
  bool stopwords = true;
  std::size_t max_answer_len = kDefaultMaxAnswerLen;
};

template <class T>
struct QuestionGeneratorModel {
  nn::DecoderModel<T> decoder;
  bool stopwords = true;
};

struct QGenTrainResult {
  QuestionGeneratorModel<float> model;
  nn::TrainReport report;
  AlignmentStats alignment;
};

inline std::vector<LmExample> question_generator_examples(const Corpus& corpus, const Vocab& vocab,
                                                          const QGenConfig& cfg, std::size_t max_seq_len,
                                                          AlignmentStats& stats) {
  std::vector<LmExample> out;
  for (const auto& d : corpus.documents)
    for (const auto& p : d.paragraphs) {
      if (p.qas.empty()) continue;
      const auto ctx = encode(p.text, vocab);
      for (const auto& qa : p.qas) {
        const auto& ans = qa.answers.front();
        auto span = align_answer(ctx, {ans.char_start, ans.char_start + ans.text.size()}, cfg.max_answer_len, stats);
        if (!span) continue;
        const auto q = encode(qa.question, vocab).ids;
        try {
          auto packed = build_qgen_input(ctx.ids, {span->first, span->second, {}}, q, max_seq_len, cfg.stopwords);
          LmExample ex;
          ex.input = {std::move(packed.ids), std::move(packed.segments)};
          ex.record_ids.push_back(gold_record_id(d.id, qa.id));
          out.push_back(std::move(ex));
          ++stats.aligned;
        } catch (const LengthError&) {
          ++stats.overlength;
        }
      }
    }
  return out;
}

// LM loss over every position of the packed sequence, starting from `decoder`.
inline QGenTrainResult train_question_generator(const Corpus& corpus_half, const Vocab& vocab,
                                                const nn::DecoderModel<float>& decoder, const QGenConfig& cfg,
                                                const nn::TrainConfig& tc, TrainingAudit* audit = nullptr) {
  if (decoder.config.n_segment_types != 3)
    throw ConfigError("the question generator needs exactly three segment types");
  QGenTrainResult r;
  r.model.decoder = decoder;
  r.model.stopwords = cfg.stopwords;
  const auto examples = question_generator_examples(corpus_half, vocab, cfg, decoder.config.max_seq_len, r.alignment);
  if (examples.empty()) throw ParameterError("no gold questions to train the question generator");
  auto& m = r.model.decoder;
  auto loss_fn = [&](nn::Graph<float>& g, std::span<const LmExample* const> batch) { return lm_loss(g, m, batch); };
  std::function<void(std::span<const LmExample* const>)> on_batch;
  if (audit)
    on_batch = [&](std::span<const LmExample* const> batch) {
      for (const auto* ex : batch)
        for (const auto& id : ex->record_ids) audit->record("question_generator", id);
    };
  r.report = nn::train<float>(m.store.pointers(), examples, tc, loss_fn, on_batch);
  return r;
}

struct GeneratedQuestion {
  std::string text;
  std::vector<int> ids;  // question tokens without markers
  bool accepted = false;
  SamplingMode sampling_mode = SamplingMode::topk;
  std::size_t attempt = 0;
};

namespace detail {

// Continues a primed cache until QEND, EOS, or the budget. With stopwords the
// raw sample must open with QSTART and reach QEND within max_new_tokens to be
// accepted; markers never appear in the returned text.
template <class T>
GeneratedQuestion continue_question(const QuestionGeneratorModel<T>& model, nn::DecoderCache<T> cache,
                                    nn::RowVector<T> logits, const nn::SamplingConfig& sc, Rng& rng,
                                    const Vocab& vocab) {
  std::vector<int> banned{kPad, kUnk};
  if (!model.stopwords) {
    banned.push_back(kQStart);
    banned.push_back(kQEnd);
  }
  GeneratedQuestion out;
  bool opened = false, closed = false;
  std::vector<double> z(static_cast<std::size_t>(logits.size()));
  for (std::size_t step = 0; step < sc.max_new_tokens; ++step) {
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<double>(logits(static_cast<Eigen::Index>(i)));
    const int tok = static_cast<int>(nn::sample_next(z, sc, rng, banned));
    if (tok == kEos) break;
    if (tok == kQEnd) {
      closed = true;
      break;
    }
    if (tok == kQStart) {
      if (step == 0) opened = true;
    } else {
      out.ids.push_back(tok);
    }
    if (cache.length + 1 > model.decoder.config.max_seq_len) break;
    const int seg = kSegQues;
    logits = nn::decoder_append(model.decoder, cache, std::span<const int>(&tok, 1), std::span<const int>(&seg, 1));
  }
  out.accepted = model.stopwords ? (opened && closed) : !out.ids.empty();
  out.text = decode(out.ids, vocab);
  return out;
}

}  // namespace detail

// One autoregressive sample. Accepted iff QSTART opens it and QEND closes it
// within max_new_tokens (without stopwords: any non-empty sample).
template <class T>
GeneratedQuestion generate_question(const QuestionGeneratorModel<T>& model, std::span<const int> context,
                                    const AnswerSpan& answer, const nn::SamplingConfig& sc, const Vocab& vocab) {
  sc.validate();
  const auto in = build_qgen_input(context, answer, std::nullopt, model.decoder.config.max_seq_len, model.stopwords);
  nn::DecoderCache<T> cache;
  auto logits = nn::decoder_append(model.decoder, cache, in.ids, in.segments);
  Rng rng(sc.seed);
  auto q = detail::continue_question(model, std::move(cache), std::move(logits), sc, rng, vocab);
  q.sampling_mode = sc.top_k ? SamplingMode::topk : SamplingMode::nucleus;
  return q;
}

struct OvergenerationConfig {
  std::size_t top_k = 40;
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
};

// The two sampling configurations of overgeneration: attempt 0 is top-k,
// attempt 1 nucleus. Seeds derive from (seed, item, attempt).
inline nn::SamplingConfig attempt_sampling(const OvergenerationConfig& oc, std::size_t attempt, std::uint64_t seed,
                                           std::uint64_t item) {
  nn::SamplingConfig sc;
  if (attempt == 0)
    sc.top_k = oc.top_k;
  else
    sc.top_p = oc.top_p;
  sc.temperature = oc.temperature;
  sc.max_new_tokens = oc.max_new_tokens;
  sc.seed = mix_seed({seed, item, attempt, 0x0E7AULL});
  return sc;
}

// Samples attempts [0, n_attempts) from a shared prompt. Every attempt is
// returned, accepted or not, in attempt order.
template <class T>
std::vector<GeneratedQuestion> sample_attempts(const QuestionGeneratorModel<T>& model, std::span<const int> context,
                                               const AnswerSpan& answer, const OvergenerationConfig& oc,
                                               std::uint64_t seed, std::uint64_t item, std::size_t n_attempts,
                                               const Vocab& vocab) {
  const auto in = build_qgen_input(context, answer, std::nullopt, model.decoder.config.max_seq_len, model.stopwords);
  nn::DecoderCache<T> cache;
  const auto logits = nn::decoder_append(model.decoder, cache, in.ids, in.segments);
  std::vector<GeneratedQuestion> out;
  for (std::size_t a = 0; a < n_attempts; ++a) {
    const auto sc = attempt_sampling(oc, a, seed, item);
    sc.validate();
    Rng rng(sc.seed);
    auto q = detail::continue_question(model, cache, logits, sc, rng, vocab);
    q.sampling_mode = a == 0 ? SamplingMode::topk : SamplingMode::nucleus;
    q.attempt = a;
    out.push_back(std::move(q));
  }
  return out;
}

// Two independently seeded attempts (top-k, then nucleus); rejected samples
// are dropped, duplicates kept.
template <class T>
std::vector<GeneratedQuestion> overgenerate(const QuestionGeneratorModel<T>& model, std::span<const int> context,
                                            const AnswerSpan& answer, const OvergenerationConfig& oc,
                                            std::uint64_t seed, std::uint64_t item, const Vocab& vocab) {
  std::vector<GeneratedQuestion> out;
  for (auto& q : sample_attempts(model, context, answer, oc, seed, item, 2, vocab))
    if (q.accepted) out.push_back(std::move(q));
  return out;
}

}  // namespace synthqa
