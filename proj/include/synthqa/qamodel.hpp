#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/answergen.hpp"
#include "synthqa/audit.hpp"
#include "synthqa/corpus.hpp"
#include "synthqa/nn/train.hpp"
#include "synthqa/nn/transformer.hpp"
#include "synthqa/tokenizer.hpp"

namespace synthqa {

// A (context, question, answer) record. answer_s/answer_e are inclusive token
// indices into encode(context).
struct QATriple {
  std::string doc_id;
  std::size_t para_idx = 0;
  std::string context;
  std::string question;
  std::string answer_text;
  std::size_t answer_s = 0;
  std::size_t answer_e = 0;
  std::string sampling_mode = "gold";  // gold, topk, nucleus
  std::size_t attempt = 0;
  bool accepted = true;
  std::string record_id;

  bool operator==(const QATriple&) const = default;
};

inline nlohmann::json triple_to_json(const QATriple& t) {
  return {{"doc_id", t.doc_id},         {"para_idx", t.para_idx},   {"context", t.context},
          {"question", t.question},     {"answer_text", t.answer_text}, {"answer_s", t.answer_s},
          {"answer_e", t.answer_e},     {"sampling_mode", t.sampling_mode}, {"attempt", t.attempt},
          {"accepted", t.accepted},     {"record_id", t.record_id}};
}

inline QATriple triple_from_json(const nlohmann::json& j) {
  QATriple t;
  t.doc_id = j.at("doc_id").get<std::string>();
  t.para_idx = j.at("para_idx").get<std::size_t>();
  t.context = j.at("context").get<std::string>();
  t.question = j.at("question").get<std::string>();
  t.answer_text = j.at("answer_text").get<std::string>();
  t.answer_s = j.at("answer_s").get<std::size_t>();
  t.answer_e = j.at("answer_e").get<std::size_t>();
  t.sampling_mode = j.at("sampling_mode").get<std::string>();
  t.attempt = j.value("attempt", std::size_t{0});
  t.accepted = j.at("accepted").get<bool>();
  t.record_id = j.value("record_id", std::string{});
  return t;
}

inline void write_triples_jsonl(const std::vector<QATriple>& triples, std::ostream& out) {
  for (const auto& t : triples) out << triple_to_json(t).dump() << '\n';
}

inline std::vector<QATriple> read_triples_jsonl(std::istream& in, const std::string& name = "<stream>") {
  std::vector<QATriple> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(triple_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("'" + name + "' line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// Gold QA records as triples, answers snapped to whole tokens. Unalignable
// answers are counted and skipped.
inline std::vector<QATriple> gold_triples(const Corpus& corpus, const Vocab& vocab, AlignmentStats& stats,
                                          std::size_t max_answer_len = kDefaultMaxAnswerLen) {
  std::vector<QATriple> out;
  for (const auto& d : corpus.documents)
    for (std::size_t pi = 0; pi < d.paragraphs.size(); ++pi) {
      const auto& p = d.paragraphs[pi];
      if (p.qas.empty()) continue;
      const auto ctx = encode(p.text, vocab);
      for (const auto& qa : p.qas) {
        const auto& a = qa.answers.front();
        auto span = align_answer(ctx, {a.char_start, a.char_start + a.text.size()}, max_answer_len, stats);
        if (!span) continue;
        ++stats.aligned;
        QATriple t;
        t.doc_id = d.id;
        t.para_idx = pi;
        t.context = p.text;
        t.question = qa.question;
        t.answer_s = span->first;
        t.answer_e = span->second;
        t.answer_text = span_text(p.text, ctx, span->first, span->second);
        t.record_id = gold_record_id(d.id, qa.id);
        out.push_back(std::move(t));
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct QAModel {
  nn::EncoderModel<T> encoder;  // store also holds the span head
  SpanHead head;
  std::size_t max_answer_len = kDefaultMaxAnswerLen;
};

// [question, EOS, context]: question and its EOS in segment 0, context in 1.
struct QAInput {
  nn::SequenceInput input;
  std::size_t ctx_offset = 0;
  std::size_t ctx_len = 0;

  TokenRange context_range() const { return {ctx_offset, ctx_offset + ctx_len}; }
};

inline QAInput pack_qa(std::span<const int> question, std::span<const int> context, std::size_t max_seq_len) {
  const std::size_t total = question.size() + 1 + context.size();
  if (total > max_seq_len)
    throw LengthError("packed QA input of " + std::to_string(total) + " tokens exceeds max_seq_len " +
                      std::to_string(max_seq_len));
  if (context.empty()) throw ParameterError("QA context is empty");
  QAInput q;
  q.input.ids.assign(question.begin(), question.end());
  q.input.ids.push_back(kEos);
  q.input.segments.assign(q.input.ids.size(), 0);
  q.ctx_offset = q.input.ids.size();
  q.ctx_len = context.size();
  for (int id : context) {
    q.input.ids.push_back(id);
    q.input.segments.push_back(1);
  }
  return q;
}

struct QAConfig {
  std::size_t max_answer_len = kDefaultMaxAnswerLen;
};

struct QATrainResult {
  QAModel<float> model;
  nn::TrainReport report;
  AlignmentStats alignment;
};

inline std::vector<SpanExample> qa_examples(const std::vector<QATriple>& data, const Vocab& vocab, std::size_t max_len,
                                            std::size_t max_seq_len, AlignmentStats& stats) {
  std::vector<SpanExample> out;
  std::map<std::string, TokenSequence> ctx_cache;
  for (const auto& t : data) {
    auto it = ctx_cache.find(t.context);
    if (it == ctx_cache.end()) it = ctx_cache.emplace(t.context, encode(t.context, vocab)).first;
    const auto& ctx = it->second;
    if (t.answer_s > t.answer_e || t.answer_e >= ctx.size()) {
      ++stats.unalignable;
      continue;
    }
    if (t.answer_e - t.answer_s + 1 > max_len) {
      ++stats.too_long;
      continue;
    }
    const auto q = encode(t.question, vocab).ids;
    QAInput packed;
    try {
      packed = pack_qa(q, ctx.ids, max_seq_len);
    } catch (const LengthError&) {
      ++stats.overlength;
      continue;
    }
    ++stats.aligned;
    SpanExample ex;
    ex.input = std::move(packed.input);
    ex.targets.push_back({packed.context_range(), packed.ctx_offset + t.answer_s, packed.ctx_offset + t.answer_e});
    ex.record_ids.push_back(t.record_id);
    out.push_back(std::move(ex));
  }
  return out;
}

// Continues training `model` on `data` (used both from a fresh head and for
// fine-tuning on real data).
inline nn::TrainReport continue_qa_training(QAModel<float>& model, const std::vector<QATriple>& data,
                                            const Vocab& vocab, const nn::TrainConfig& tc, AlignmentStats& stats,
                                            TrainingAudit* audit = nullptr, const std::string& stage = "qa") {
  const auto examples = qa_examples(data, vocab, model.max_answer_len, model.encoder.config.max_seq_len, stats);
  if (examples.empty()) throw ParameterError("no usable triples to train the QA model");
  auto loss_fn = [&](nn::Graph<float>& g, std::span<const SpanExample* const> batch) {
    return span_loss(g, model.encoder, model.head, model.max_answer_len, batch);
  };
  std::function<void(std::span<const SpanExample* const>)> on_batch;
  if (audit)
    on_batch = [&](std::span<const SpanExample* const> batch) {
      for (const auto* ex : batch)
        for (const auto& id : ex->record_ids) audit->record(stage, id);
    };
  return nn::train<float>(model.encoder.store.pointers(), examples, tc, loss_fn, on_batch);
}

// A fresh joint span head on a copy of `encoder`, trained on `data`.
inline QATrainResult train_qa(const std::vector<QATriple>& data, const Vocab& vocab,
                              const nn::EncoderModel<float>& encoder, const QAConfig& cfg, const nn::TrainConfig& tc,
                              TrainingAudit* audit = nullptr, const std::string& stage = "qa") {
  if (data.empty()) throw ParameterError("train_qa needs a non-empty dataset");
  if (encoder.config.n_segment_types < 2) throw ConfigError("the QA encoder needs at least two segment types");
  QATrainResult r;
  r.model.encoder = encoder.stripped();
  r.model.max_answer_len = cfg.max_answer_len;
  Rng rng(mix_seed({tc.seed, 0x0A0AULL}));
  r.model.head = add_span_head(r.model.encoder.store, encoder.config.hidden, HeadMode::joint, rng);
  r.report = continue_qa_training(r.model, data, vocab, tc, r.alignment, audit, stage);
  return r;
}

// Argmax spans (context-relative) for packed inputs. Ties go to the smaller
// start, then the smaller end.
template <class T>
std::vector<std::pair<std::size_t, std::size_t>> predict_spans(QAModel<T>& model, const std::vector<QAInput>& inputs) {
  std::vector<nn::SequenceInput> seqs;
  std::vector<std::size_t> owner;
  std::vector<TokenRange> units;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    seqs.push_back(inputs[i].input);
    owner.push_back(i);
    units.push_back(inputs[i].context_range());
  }
  const auto dists = score_units(model.encoder, model.head, model.max_answer_len, seqs, owner, units);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& d = dists[i];
    std::size_t best = 0;
    for (std::size_t j = 1; j < d.size(); ++j)
      if (d[j].prob > d[best].prob) best = j;
    out.emplace_back(d[best].s - inputs[i].ctx_offset, d[best].e - inputs[i].ctx_offset);
  }
  return out;
}

template <class T>
AnswerSpan predict_answer(QAModel<T>& model, const std::string& context_text, const TokenSequence& context,
                          std::span<const int> question) {
  const auto packed = pack_qa(question, context.ids, model.encoder.config.max_seq_len);
  const auto [s, e] = predict_spans(model, {packed}).front();
  return {s, e, span_text(context_text, context, s, e)};
}

template <class T>
AnswerSpan predict_answer(QAModel<T>& model, const Vocab& vocab, const std::string& context_text,
                          const std::string& question) {
  const auto ctx = encode(context_text, vocab);
  const auto q = encode(question, vocab).ids;
  return predict_answer(model, context_text, ctx, q);
}

// ---------------------------------------------------------------------------
// Metrics

// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
// whitespace.
inline std::string squad_normalize(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (c < 0x80 && std::ispunct(c)) continue;
    cleaned += static_cast<char>(std::tolower(c));
  }
  std::istringstream words(cleaned);
  std::string w, out;
  while (words >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline int compute_em(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = squad_normalize(pred);
  for (const auto& g : golds)
    if (p == squad_normalize(g)) return 1;
  return 0;
}

inline double compute_f1(std::string_view pred, const std::vector<std::string>& golds) {
  auto tokens = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
  };
  const auto pt = tokens(squad_normalize(pred));
  double best = 0.0;
  for (const auto& g : golds) {
    const auto gt = tokens(squad_normalize(g));
    double f1 = 0.0;
    if (pt.empty() || gt.empty()) {
      f1 = pt.empty() && gt.empty() ? 1.0 : 0.0;
    } else {
      std::map<std::string, int> counts;
      for (const auto& t : gt) ++counts[t];
      int common = 0;
      for (const auto& t : pt)
        if (counts[t]-- > 0) ++common;
      if (common > 0) {
        const double precision = static_cast<double>(common) / static_cast<double>(pt.size());
        const double recall = static_cast<double>(common) / static_cast<double>(gt.size());
        f1 = 2.0 * precision * recall / (precision + recall);
      }
    }
    best = std::max(best, f1);
  }
  return best;
}

struct EvalResult {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  std::size_t n = 0;

  nlohmann::json to_json() const { return {{"em", em}, {"f1", f1}, {"n", n}}; }
};

struct Prediction {
  std::string qa_id;
  std::string text;
  std::vector<std::string> golds;
};

// Mean EM/F1 over predictions, as percentages.
inline EvalResult score_predictions(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw ParameterError("cannot evaluate an empty set");
  double em = 0.0, f1 = 0.0;
  for (const auto& p : preds) {
    em += compute_em(p.text, p.golds);
    f1 += compute_f1(p.text, p.golds);
  }
  const auto n = static_cast<double>(preds.size());
  return {100.0 * em / n, 100.0 * f1 / n, preds.size()};
}

// Predicts every GoldQA of `dev`. Inputs that do not fit the model count as
// empty predictions.
template <class T>
std::vector<Prediction> predict_corpus(QAModel<T>& model, const Corpus& dev, const Vocab& vocab) {
  std::vector<Prediction> preds;
  std::vector<QAInput> inputs;
  std::vector<std::size_t> which;
  std::vector<std::pair<const std::string*, TokenSequence>> ctxs;
  std::vector<std::size_t> ctx_of;
  for (const auto& d : dev.documents)
    for (const auto& p : d.paragraphs) {
      if (p.qas.empty()) continue;
      ctxs.emplace_back(&p.text, encode(p.text, vocab));
      for (const auto& qa : p.qas) {
        Prediction pr;
        pr.qa_id = qa.id;
        for (const auto& a : qa.answers) pr.golds.push_back(a.text);
        try {
          inputs.push_back(pack_qa(encode(qa.question, vocab).ids, ctxs.back().second.ids, model.encoder.config.max_seq_len));
          which.push_back(preds.size());
          ctx_of.push_back(ctxs.size() - 1);
        } catch (const Error&) {
        }
        preds.push_back(std::move(pr));
      }
    }
  const auto spans = predict_spans(model, inputs);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& [text, seq] = ctxs[ctx_of[i]];
    preds[which[i]].text = span_text(*text, seq, spans[i].first, spans[i].second);
  }
  return preds;
}

template <class T>
EvalResult evaluate(QAModel<T>& model, const Corpus& dev, const Vocab& vocab) {
  if (dev.num_qas() == 0) throw ParameterError("evaluation needs at least one gold question");
  return score_predictions(predict_corpus(model, dev, vocab));
}

// ---------------------------------------------------------------------------
// Roundtrip filtration

enum class MatchRule { exact_normalized };

inline const char* to_string(MatchRule) { return "exact_normalized"; }

struct FilterDecision {
  std::size_t triple = 0;  // index into the filtered list
  AnswerSpan predicted;
  bool keep = false;
  MatchRule match_rule = MatchRule::exact_normalized;
};

// Keeps a triple iff the QA model's answer to its question matches the
// candidate answer after normalization. Each triple is judged on its own;
// inputs that do not fit the model are discarded.
template <class T>
std::vector<FilterDecision> roundtrip_filter(const std::vector<QATriple>& triples, QAModel<T>& model,
                                             const Vocab& vocab) {
  std::vector<FilterDecision> out(triples.size());
  std::map<std::string, TokenSequence> ctx_cache;
  std::vector<QAInput> inputs;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    out[i].triple = i;
    auto it = ctx_cache.find(triples[i].context);
    if (it == ctx_cache.end()) it = ctx_cache.emplace(triples[i].context, encode(triples[i].context, vocab)).first;
    try {
      inputs.push_back(pack_qa(encode(triples[i].question, vocab).ids, it->second.ids, model.encoder.config.max_seq_len));
      which.push_back(i);
    } catch (const Error&) {
    }
  }
  const auto spans = predict_spans(model, inputs);
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto i = which[k];
    const auto& ctx = ctx_cache.at(triples[i].context);
    auto& d = out[i];
    d.predicted = {spans[k].first, spans[k].second, span_text(triples[i].context, ctx, spans[k].first, spans[k].second)};
    d.keep = compute_em(d.predicted.text, {triples[i].answer_text}) == 1;
  }
  return out;
}

inline nlohmann::json decision_to_json(const QATriple& t, const FilterDecision& d) {
  auto j = triple_to_json(t);
  j["predicted_text"] = d.predicted.text;
  j["predicted_s"] = d.predicted.s;
  j["predicted_e"] = d.predicted.e;
  j["keep"] = d.keep;
  j["match_rule"] = to_string(d.match_rule);
  return j;
}

}  // namespace synthqa
