#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/answergen.hpp"
#include "synthqa/audit.hpp"
#include "synthqa/config.hpp"
#include "synthqa/corpus.hpp"
#include "synthqa/qamodel.hpp"
#include "synthqa/questiongen.hpp"
#include "synthqa/tokenizer.hpp"

namespace synthqa {

// ---------------------------------------------------------------------------
// Fully synthetic text

namespace detail {

inline bool attaches_left(const std::string& tok) {
  return tok == "." || tok == "," || tok == "?" || tok == "!" || tok == ";" || tok == ":" || tok == ")" || tok == "'";
}

// Joins word tokens into prose: punctuation hugs the previous word and each
// sentence starts with a capital so the sentence splitter can find it.
inline std::string render_tokens(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  bool capitalize = true;
  for (int id : ids) {
    std::string tok = vocab.token(id);
    if (!out.empty() && !attaches_left(tok)) out += ' ';
    if (capitalize && !tok.empty() && std::isalpha(static_cast<unsigned char>(tok[0]))) {
      tok[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(tok[0])));
      capitalize = false;
    }
    out += tok;
    if (tok == "." || tok == "?" || tok == "!") capitalize = true;
  }
  return out;
}

}  // namespace detail

// Unconditional samples from the decoder, each primed with EOS and cut into
// paragraphs at EOS. PAD, UNK and the question markers are never sampled.
// A document stops after `paragraphs_per_doc` paragraphs or max_seq_len tokens.
template <class T>
Corpus corpus_synthesis(const nn::DecoderModel<T>& decoder, const Vocab& vocab, std::size_t n_docs,
                        const nn::SamplingConfig& sc, std::size_t paragraphs_per_doc = 1) {
  if (n_docs < 1) throw ParameterError("corpus synthesis needs n_docs >= 1");
  if (paragraphs_per_doc < 1) throw ParameterError("corpus synthesis needs at least one paragraph per document");
  sc.validate();
  const std::vector<int> banned{kPad, kUnk, kQStart, kQEnd};
  Corpus corpus;
  corpus.provenance = Provenance::model_generated;
  for (std::size_t d = 0; d < n_docs; ++d) {
    Document doc;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "syn-%05zu", d);
    doc.id = idbuf;
    for (std::uint64_t retry = 0; retry < 8 && doc.paragraphs.empty(); ++retry) {
      Rng rng(mix_seed({sc.seed, d, retry, 0x5E7ULL}));
      nn::DecoderCache<T> cache;
      const int seg = kSegCtx;
      int tok = kEos;
      auto logits = nn::decoder_append(decoder, cache, std::span<const int>(&tok, 1), std::span<const int>(&seg, 1));
      std::vector<int> current;
      auto close = [&] {
        if (current.empty()) return;
        Paragraph p;
        p.text = detail::render_tokens(current, vocab);
        p.sentences = split_sentences(p.text);
        doc.paragraphs.push_back(std::move(p));
        current.clear();
      };
      std::vector<double> z(static_cast<std::size_t>(logits.size()));
      while (doc.paragraphs.size() < paragraphs_per_doc) {
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<double>(logits(static_cast<Eigen::Index>(i)));
        tok = static_cast<int>(nn::sample_next(z, sc, rng, banned));
        if (tok == kEos)
          close();
        else
          current.push_back(tok);
        if (cache.length + 1 > decoder.config.max_seq_len) {
          close();
          break;
        }
        logits = nn::decoder_append(decoder, cache, std::span<const int>(&tok, 1), std::span<const int>(&seg, 1));
      }
    }
    if (doc.paragraphs.empty()) throw Error("corpus synthesis produced only empty samples for document " + doc.id);
    corpus.documents.push_back(std::move(doc));
  }
  validate_corpus(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// Stage cache

// Opt-in, in-memory memo of stage outputs keyed by everything that determines
// them (seed included), so variants of one experiment can share stages.
class StageCache {
 public:
  template <class V, class F>
  std::shared_ptr<V> get_or(const std::string& key, F&& make) {
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      ++hits_;
      return std::static_pointer_cast<V>(it->second);
    }
    ++misses_;
    auto v = std::make_shared<V>(make());
    entries_[key] = v;
    return v;
  }

  template <class V>
  std::shared_ptr<V> find(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    ++hits_;
    return std::static_pointer_cast<V>(it->second);
  }

  template <class V>
  void put(const std::string& key, std::shared_ptr<V> v) {
    entries_[key] = std::move(v);
  }

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  void clear() { entries_.clear(); }

 private:
  std::map<std::string, std::shared_ptr<void>> entries_;
  std::size_t hits_ = 0, misses_ = 0;
};

// ---------------------------------------------------------------------------
// Reports

struct StageCounts {
  std::size_t gen_documents = 0;
  std::size_t candidates = 0;
  std::size_t generated = 0;  // sampled questions
  std::size_t accepted = 0;   // passed stopword filtration
  std::size_t kept = 0;       // passed roundtrip filtration (all accepted when filtering is off)
  std::size_t qa_examples = 0;

  nlohmann::json to_json() const {
    return {{"gen_documents", gen_documents}, {"candidates", candidates}, {"generated", generated},
            {"accepted", accepted},           {"kept", kept},             {"qa_examples", qa_examples}};
  }
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvalResult eval;
  std::optional<EvalResult> finetuned;
  StageCounts counts;
  std::vector<std::string> leaks;
  std::size_t audited_records = 0;
  nlohmann::json stages = nlohmann::json::object();  // alignment stats and final losses
  std::map<std::string, double> wall_seconds;

  nlohmann::json to_json(bool timing = true) const {
    nlohmann::json j = {{"seed", seed},     {"ok", ok},           {"error", error},
                        {"eval", eval.to_json()}, {"counts", counts.to_json()}, {"leaks", leaks},
                        {"audited_records", audited_records}, {"stages", stages}};
    j["finetuned"] = finetuned ? finetuned->to_json() : nlohmann::json(nullptr);
    if (timing) j["wall_seconds"] = wall_seconds;
    return j;
  }
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  nlohmann::json to_json() const { return {{"mean", mean}, {"std", std}}; }
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

struct RunReport {
  std::uint64_t config_hash = 0;
  std::vector<SeedResult> seeds;
  MeanStd em, f1;
  std::optional<MeanStd> finetuned_em, finetuned_f1;
  std::size_t failed = 0;
  nlohmann::json pretraining = nlohmann::json::object();
  double wall_seconds = 0.0;

  void aggregate() {
    std::vector<double> ems, f1s, fems, ff1s;
    failed = 0;
    for (const auto& s : seeds) {
      if (!s.ok) {
        ++failed;
        continue;
      }
      ems.push_back(s.eval.em);
      f1s.push_back(s.eval.f1);
      if (s.finetuned) {
        fems.push_back(s.finetuned->em);
        ff1s.push_back(s.finetuned->f1);
      }
    }
    em = mean_std(ems);
    f1 = mean_std(f1s);
    if (!fems.empty()) {
      finetuned_em = mean_std(fems);
      finetuned_f1 = mean_std(ff1s);
    } else {
      finetuned_em.reset();
      finetuned_f1.reset();
    }
  }

  std::size_t total_leaks() const {
    std::size_t n = 0;
    for (const auto& s : seeds) n += s.leaks.size();
    return n;
  }

  nlohmann::json to_json(bool timing = true) const {
    nlohmann::json j = {{"config_hash", hex64(config_hash)},
                        {"em", em.to_json()},
                        {"f1", f1.to_json()},
                        {"failed_seeds", failed},
                        {"pretraining", pretraining}};
    j["finetuned_em"] = finetuned_em ? finetuned_em->to_json() : nlohmann::json(nullptr);
    j["finetuned_f1"] = finetuned_f1 ? finetuned_f1->to_json() : nlohmann::json(nullptr);
    j["seeds"] = nlohmann::json::array();
    for (const auto& s : seeds) j["seeds"].push_back(s.to_json(timing));
    if (timing) j["wall_seconds"] = wall_seconds;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  Corpus pool;  // documents available for partitioning
  Corpus dev;
  Vocab vocab;
  std::uint64_t fingerprint = 0;
};

inline std::uint64_t corpus_fingerprint(const Corpus& c) {
  std::uint64_t h = kFnvOffset;
  for (const auto& d : c.documents) h = fnv1a(document_to_json(d, c.provenance).dump(), h);
  return h;
}

// Dev documents: a fixed share of the corpus chosen with dev_seed, held out of
// both halves of every partition.
inline std::pair<Corpus, Corpus> split_dev(const Corpus& corpus, double fraction, std::uint64_t dev_seed) {
  auto ids = corpus.document_ids();
  Rng rng(mix_seed({dev_seed, 0xDE5ULL}));
  rng.shuffle(ids);
  auto n_dev = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  n_dev = std::clamp<std::size_t>(n_dev, 1, ids.size() > 2 ? ids.size() - 2 : 0);
  if (n_dev == 0) throw ConfigError("corpus is too small to hold out a dev set");
  std::vector<std::string> dev(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_dev));
  std::vector<std::string> rest(ids.begin() + static_cast<std::ptrdiff_t>(n_dev), ids.end());
  return {corpus.subset(rest), corpus.subset(dev)};
}

inline Corpus load_source(const std::string& source, const std::string& path, const PipelineConfig& cfg) {
  if (source == "squad") {
    std::set<std::string> excluded(cfg.exclude_titles.begin(), cfg.exclude_titles.end());
    return ingest_squad_json(path, excluded);
  }
  return read_corpus_jsonl(path);
}

inline PreparedData prepare_data(const PipelineConfig& cfg) {
  Corpus all;
  if (cfg.corpus_source == "toy")
    all = generate_toy_corpus(cfg.toy_docs, cfg.toy_seed, default_toy_spec());
  else
    all = load_source(cfg.corpus_source, cfg.corpus_path, cfg);
  PreparedData data;
  if (!cfg.dev_path.empty()) {
    data.pool = std::move(all);
    data.dev = load_source(cfg.corpus_source == "toy" ? "jsonl" : cfg.corpus_source, cfg.dev_path, cfg);
  } else {
    auto [pool, dev] = split_dev(all, cfg.dev_fraction, cfg.dev_seed);
    data.pool = std::move(pool);
    data.dev = std::move(dev);
  }
  if (data.pool.documents.size() < 2) throw ConfigError("need at least two non-dev documents to partition");
  Corpus both = data.pool;
  both.documents.insert(both.documents.end(), data.dev.documents.begin(), data.dev.documents.end());
  data.vocab = build_vocab(both, cfg.vocab_min_count);
  data.fingerprint = fnv1a(hex64(corpus_fingerprint(data.pool)) + hex64(corpus_fingerprint(data.dev)));
  return data;
}

inline Corpus without_labels(Corpus c) {
  for (auto& d : c.documents)
    for (auto& p : d.paragraphs) p.qas.clear();
  return c;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace detail {

inline std::string key_of(std::initializer_list<std::string> parts) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : parts) h = fnv1a(p + "\x1e", h);
  return hex64(h);
}

inline nn::TrainConfig stage_train(nn::TrainConfig tc, std::uint64_t seed, std::uint64_t tag) {
  tc.seed = mix_seed({seed, tc.seed, tag});
  return tc;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  for (const auto& r : rows) out << r.dump() << '\n';
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

template <class M>
struct Audited {
  M model;
  TrainingAudit audit;
  nlohmann::json info;
};

struct Pretrained {
  std::string encoder_key, decoder_key;
  std::shared_ptr<EncoderPretrainResult> encoder;
  std::shared_ptr<DecoderPretrainResult> decoder;
};

// Generated questions for every candidate, attempt by attempt.
struct Generation {
  std::size_t n_attempts = 0;
  std::vector<QATriple> attempts;  // accepted or not, canonical order
};

}  // namespace detail

// Runs the whole protocol. Pretrained encoder/decoder are built once per run
// from pool text; every stage model is trained per seed on half A.
// Answer candidates for every paragraph of `targets`.
struct CandidateSet {
  std::vector<std::vector<AnswerCandidate>> per_paragraph;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (doc, paragraph)

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& p : per_paragraph) n += p.size();
    return n;
  }
};

inline CandidateSet answer_candidates(AnswerExtractorModel<float>& model, const Corpus& targets, const Vocab& vocab,
                                      std::size_t k, double p) {
  CandidateSet c;
  std::vector<const Paragraph*> paras;
  for (std::size_t di = 0; di < targets.documents.size(); ++di)
    for (std::size_t pi = 0; pi < targets.documents[di].paragraphs.size(); ++pi) {
      paras.push_back(&targets.documents[di].paragraphs[pi]);
      c.where.emplace_back(di, pi);
    }
  c.per_paragraph = sample_answer_candidates(model, paras, vocab, k, p);
  return c;
}

inline std::vector<nlohmann::json> candidates_to_json(const Corpus& targets, const CandidateSet& cands) {
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < cands.where.size(); ++i) {
    const auto [di, pi] = cands.where[i];
    for (const auto& c : cands.per_paragraph[i]) rows.push_back(candidate_to_json(targets.documents[di].id, pi, c));
  }
  return rows;
}

// Every sampled attempt, accepted or not, in (doc, paragraph, s, e, attempt)
// order. Attempt i of an item depends only on (seed, item, i), so the first
// attempts of a longer run equal a shorter run. Items whose prompt does not
// fit are skipped.
inline std::vector<QATriple> question_attempts(const QuestionGeneratorModel<float>& qgen, const Corpus& targets,
                                               const CandidateSet& cands, const OvergenerationConfig& oc,
                                               std::uint64_t seed, std::size_t n_attempts, const Vocab& vocab) {
  std::vector<QATriple> out;
  for (std::size_t i = 0; i < cands.where.size(); ++i) {
    const auto [di, pi] = cands.where[i];
    const auto& doc = targets.documents[di];
    const auto& para = doc.paragraphs[pi];
    const auto ctx = encode(para.text, vocab);
    for (const auto& c : cands.per_paragraph[i]) {
      const std::string item_name =
          doc.id + "|" + std::to_string(pi) + "|" + std::to_string(c.span.s) + "|" + std::to_string(c.span.e);
      std::vector<GeneratedQuestion> qs;
      try {
        qs = sample_attempts(qgen, ctx.ids, c.span, oc, seed, fnv1a(item_name), n_attempts, vocab);
      } catch (const LengthError&) {
        continue;
      }
      for (const auto& q : qs) {
        QATriple tr;
        tr.doc_id = doc.id;
        tr.para_idx = pi;
        tr.context = para.text;
        tr.question = q.text;
        tr.answer_text = c.span.text;
        tr.answer_s = c.span.s;
        tr.answer_e = c.span.e;
        tr.sampling_mode = to_string(q.sampling_mode);
        tr.attempt = q.attempt;
        tr.accepted = q.accepted;
        tr.record_id = synthetic_record_id(doc.id, pi, c.span.s, c.span.e, q.attempt);
        out.push_back(std::move(tr));
      }
    }
  }
  return out;
}

// Targets for synthetic labelling: the first ceil(fraction * |B|) half-B
// documents in partition order, gold removed.
inline Corpus labelling_targets(const Corpus& pool, const PartitionSplit& split, double fraction) {
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(split.half_b.size()) - 1e-9));
  std::vector<std::string> ids(split.half_b.begin(), split.half_b.begin() + static_cast<std::ptrdiff_t>(n));
  return without_labels(pool.subset(ids));
}

class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, StageCache* cache = nullptr) : cfg_(std::move(cfg)), cache_(cache) {
    cfg_.validate();
    if (!cache_ && cfg_.cache_enabled) {
      own_cache_ = std::make_unique<StageCache>();
      cache_ = own_cache_.get();
    }
  }

  const PipelineConfig& config() const { return cfg_; }

  RunReport run() {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    report.config_hash = cfg_.hash();
    const auto data = cached<PreparedData>("data", detail::key_of({"data", data_key()}), [&] { return prepare_data(cfg_); });
    auto pre = pretrained(*data);
    report.pretraining = {{"encoder_heldout_masked_accuracy", pre.encoder->heldout_accuracy.value_or(-1.0)},
                          {"encoder_steps", pre.encoder->report.steps},
                          {"decoder_heldout_perplexity", pre.decoder->heldout_perplexity.value_or(-1.0)},
                          {"decoder_steps", pre.decoder->report.steps},
                          {"vocab_size", data->vocab.size()},
                          {"pool_documents", data->pool.documents.size()},
                          {"dev_documents", data->dev.documents.size()}};
    std::shared_ptr<Corpus> synthetic;
    if (cfg_.synthesis_enabled) {
      synthetic = synthetic_corpus(*data, pre);
      report.pretraining["synthetic_documents"] = synthetic->documents.size();
    }
    namespace fs = std::filesystem;
    if (cfg_.write_artifacts) fs::create_directories(cfg_.out_dir);
    std::vector<std::string> artifacts;
    if (cfg_.write_artifacts && synthetic) {
      write_corpus_jsonl(*synthetic, (fs::path(cfg_.out_dir) / "synthetic_corpus.jsonl").string());
      artifacts.push_back("synthetic_corpus.jsonl");
    }
    for (auto seed : cfg_.seeds) {
      SeedResult r;
      r.seed = seed;
      try {
        run_seed(*data, pre, synthetic.get(), seed, r, artifacts);
        r.ok = true;
      } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
      }
      report.seeds.push_back(std::move(r));
    }
    report.aggregate();
    report.wall_seconds = detail::seconds_since(t0);
    if (cfg_.write_artifacts) {
      const fs::path out(cfg_.out_dir);
      detail::write_json(out / "report.json", report.to_json());
      {
        std::ofstream c(out / "config.txt");
        c << cfg_.to_text();
      }
      artifacts.push_back("report.json");
      artifacts.push_back("config.txt");
      detail::write_json(out / "manifest.json",
                         {{"config_hash", hex64(cfg_.hash())}, {"artifacts", artifacts}, {"vocab_hash", hex64(data->vocab.hash())}});
    }
    return report;
  }

 private:
  template <class V, class F>
  std::shared_ptr<V> cached(const std::string& stage, const std::string& key, F&& make) {
    if (cache_) return cache_->get_or<V>(stage + ":" + key, std::forward<F>(make));
    return std::make_shared<V>(make());
  }

  std::string data_key() const {
    const auto m = cfg_.to_map();
    std::string s;
    for (const auto& k : {"corpus.source", "corpus.path", "corpus.dev_path", "corpus.exclude_titles", "corpus.toy_docs",
                          "corpus.toy_seed", "corpus.dev_fraction", "corpus.dev_seed", "vocab.min_count"})
      s += m.at(k) + "|";
    return s;
  }

  detail::Pretrained pretrained(const PreparedData& data) {
    detail::Pretrained p;
    const auto pool_text = without_labels(data.pool);
    const auto dev_text = without_labels(data.dev);
    p.encoder_key = detail::key_of({"enc", hex64(data.fingerprint), cfg_.encoder.to_json().dump(),
                                    cfg_.pretrain_encoder_train.to_json().dump(), detail::fmt_double(cfg_.mask_prob)});
    p.encoder = cached<EncoderPretrainResult>("pretrain_encoder", p.encoder_key, [&] {
      return pretrain_encoder(pool_text, data.vocab, cfg_.encoder, cfg_.pretrain_encoder_train, {cfg_.mask_prob},
                              nullptr, &dev_text);
    });
    p.decoder_key = detail::key_of({"dec", hex64(data.fingerprint), cfg_.decoder.to_json().dump(),
                                    cfg_.pretrain_decoder_train.to_json().dump()});
    p.decoder = cached<DecoderPretrainResult>("pretrain_decoder", p.decoder_key, [&] {
      return pretrain_decoder(pool_text, data.vocab, cfg_.decoder, cfg_.pretrain_decoder_train, nullptr, &dev_text);
    });
    return p;
  }

  std::shared_ptr<Corpus> synthetic_corpus(const PreparedData& data, const detail::Pretrained& pre) {
    const auto key = detail::key_of({"syn", pre.decoder_key, std::to_string(cfg_.synthesis_docs),
                                     detail::fmt_double(cfg_.synthesis_top_p), std::to_string(cfg_.synthesis_seed),
                                     std::to_string(cfg_.synthesis_paragraphs)});
    return cached<Corpus>("synthesis", key, [&] {
      nn::SamplingConfig sc;
      sc.top_p = cfg_.synthesis_top_p;
      sc.seed = cfg_.synthesis_seed;
      return corpus_synthesis(pre.decoder->decoder, data.vocab, cfg_.synthesis_docs, sc, cfg_.synthesis_paragraphs);
    });
  }

  void run_seed(const PreparedData& data, const detail::Pretrained& pre, const Corpus* synthetic, std::uint64_t seed,
                SeedResult& r, std::vector<std::string>& artifacts) {
    using clock = std::chrono::steady_clock;
    namespace fs = std::filesystem;
    const auto split = partition_documents(data.pool, seed);
    const Corpus half_a = data.pool.subset(split.half_a);
    TrainingAudit audit;
    const std::string seed_s = std::to_string(seed);

    // Stage models on half A.
    auto t = clock::now();
    const auto agen_tc = detail::stage_train(cfg_.agen_train, seed, 0xA6);
    const auto agen_key = detail::key_of({"agen", seed_s, pre.encoder_key, to_string(cfg_.agen.head),
                                          to_string(cfg_.agen.scope), std::to_string(cfg_.agen.max_answer_len),
                                          agen_tc.to_json().dump()});
    auto agen = cached<detail::Audited<AnswerExtractorModel<float>>>("agen", agen_key, [&] {
      detail::Audited<AnswerExtractorModel<float>> a;
      auto res = train_answer_extractor(half_a, data.vocab, pre.encoder->encoder, cfg_.agen, agen_tc, &a.audit);
      a.model = std::move(res.model);
      a.info = {{"alignment", res.alignment.to_json()}, {"steps", res.report.steps},
                {"final_loss", res.report.loss.empty() ? 0.0 : res.report.loss.back()}};
      return a;
    });
    r.wall_seconds["train_answer_extractor"] = detail::seconds_since(t);
    audit.merge(agen->audit);
    r.stages["answer_extractor"] = agen->info;

    t = clock::now();
    const auto qgen_tc = detail::stage_train(cfg_.qgen_train, seed, 0x96);
    const auto qgen_key = detail::key_of({"qgen", seed_s, cfg_.qgen_pretrained ? pre.decoder_key : "scratch",
                                          cfg_.decoder.to_json().dump(), cfg_.qgen_stopwords ? "sw" : "nosw",
                                          std::to_string(cfg_.agen.max_answer_len), qgen_tc.to_json().dump()});
    auto qgen = cached<detail::Audited<QuestionGeneratorModel<float>>>("qgen", qgen_key, [&] {
      detail::Audited<QuestionGeneratorModel<float>> a;
      nn::DecoderModel<float> start;
      if (cfg_.qgen_pretrained) {
        start = pre.decoder->decoder;
      } else {
        auto mc = cfg_.decoder;
        mc.vocab_size = data.vocab.size();
        start = nn::DecoderModel<float>::create(mc, mix_seed({seed, 0x5C7A7CULL}));
      }
      QGenConfig qc{cfg_.qgen_stopwords, cfg_.agen.max_answer_len};
      auto res = train_question_generator(half_a, data.vocab, start, qc, qgen_tc, &a.audit);
      a.model = std::move(res.model);
      a.info = {{"alignment", res.alignment.to_json()}, {"steps", res.report.steps},
                {"final_loss", res.report.loss.empty() ? 0.0 : res.report.loss.back()}};
      return a;
    });
    r.wall_seconds["train_question_generator"] = detail::seconds_since(t);
    audit.merge(qgen->audit);
    r.stages["question_generator"] = qgen->info;

    std::shared_ptr<detail::Audited<QAModel<float>>> filter;
    if (cfg_.filter_mode != FilterMode::none) {
      t = clock::now();
      const auto filter_tc = detail::stage_train(cfg_.filter_train, seed, 0xF1);
      const auto filter_key = detail::key_of({"filter", seed_s, pre.encoder_key, cfg_.filter_train_on,
                                              std::to_string(cfg_.agen.max_answer_len), filter_tc.to_json().dump()});
      filter = cached<detail::Audited<QAModel<float>>>("filter", filter_key, [&] {
        detail::Audited<QAModel<float>> a;
        AlignmentStats stats;
        const Corpus labeled = cfg_.filter_train_on == "half_a" ? half_a : data.pool;
        auto gold = gold_triples(labeled, data.vocab, stats, cfg_.agen.max_answer_len);
        auto res = train_qa(gold, data.vocab, pre.encoder->encoder, {cfg_.agen.max_answer_len}, filter_tc, &a.audit,
                            "filter_qa");
        a.model = std::move(res.model);
        a.info = {{"alignment", res.alignment.to_json()}, {"steps", res.report.steps},
                  {"final_loss", res.report.loss.empty() ? 0.0 : res.report.loss.back()}};
        return a;
      });
      r.wall_seconds["train_filter"] = detail::seconds_since(t);
      audit.merge(filter->audit);
      r.stages["filter_qa"] = filter->info;
    }

    // Synthetic labelling of half B (or of the synthetic corpus), gold unused.
    const Corpus targets = synthetic ? *synthetic : labelling_targets(data.pool, split, cfg_.label_fraction);
    r.counts.gen_documents = targets.documents.size();
    const auto targets_key = hex64(corpus_fingerprint(targets));

    t = clock::now();
    const std::size_t top_k = cfg_.effective_answer_top_k();
    const auto cand_key = detail::key_of({"cand", agen_key, targets_key, std::to_string(top_k),
                                          detail::fmt_double(cfg_.answer_top_p)});
    auto cands = cached<CandidateSet>("candidates", cand_key, [&] {
      return answer_candidates(agen->model, targets, data.vocab, top_k, cfg_.answer_top_p);
    });
    r.wall_seconds["answer_candidates"] = detail::seconds_since(t);

    // Questions. Attempt i depends only on its own seed, so a cached run with
    // more attempts serves a variant that needs fewer.
    t = clock::now();
    const std::size_t n_attempts = attempts_for(cfg_.filter_mode);
    const auto gen_key = detail::key_of({"gen", cand_key, qgen_key, seed_s, std::to_string(cfg_.sampling.top_k),
                                         detail::fmt_double(cfg_.sampling.top_p),
                                         detail::fmt_double(cfg_.sampling.temperature),
                                         std::to_string(cfg_.sampling.max_new_tokens)});
    std::shared_ptr<detail::Generation> gen;
    if (cache_) {
      gen = cache_->find<detail::Generation>("generation:" + gen_key);
      if (gen && gen->n_attempts < n_attempts) gen.reset();
    }
    if (!gen) {
      gen = std::make_shared<detail::Generation>();
      gen->n_attempts = n_attempts;
      gen->attempts = question_attempts(qgen->model, targets, *cands, cfg_.sampling, seed, n_attempts, data.vocab);
    }
    if (cache_) cache_->put("generation:" + gen_key, gen);
    r.wall_seconds["question_generation"] = detail::seconds_since(t);

    std::vector<QATriple> generated;
    for (const auto& tr : gen->attempts)
      if (tr.attempt < n_attempts) generated.push_back(tr);
    std::vector<QATriple> accepted;
    for (const auto& tr : generated)
      if (tr.accepted) accepted.push_back(tr);
    r.counts.candidates = cands->size();
    r.counts.generated = generated.size();
    r.counts.accepted = accepted.size();

    t = clock::now();
    std::vector<QATriple> kept;
    std::vector<FilterDecision> decisions;
    if (filter) {
      decisions = roundtrip_filter(accepted, filter->model, data.vocab);
      for (const auto& d : decisions)
        if (d.keep) kept.push_back(accepted[d.triple]);
    } else {
      kept = accepted;
    }
    r.counts.kept = kept.size();
    r.wall_seconds["filtration"] = detail::seconds_since(t);

    // Downstream QA on kept synthetic triples.
    t = clock::now();
    const auto qa_tc = detail::stage_train(cfg_.qa_train, seed, 0x0A);
    auto qa = train_qa(kept, data.vocab, pre.encoder->encoder, {cfg_.agen.max_answer_len}, qa_tc, &audit, "final_qa");
    r.counts.qa_examples = qa.alignment.aligned;
    r.stages["final_qa"] = {{"alignment", qa.alignment.to_json()}, {"steps", qa.report.steps},
                            {"final_loss", qa.report.loss.empty() ? 0.0 : qa.report.loss.back()}};
    r.wall_seconds["train_final_qa"] = detail::seconds_since(t);
    t = clock::now();
    r.eval = evaluate(qa.model, data.dev, data.vocab);
    r.wall_seconds["evaluate"] = detail::seconds_since(t);

    if (cfg_.finetune_enabled) {
      t = clock::now();
      AlignmentStats stats;
      const auto gold = gold_triples(half_a, data.vocab, stats, cfg_.agen.max_answer_len);
      auto tuned = finetune_on_real(qa.model, gold, data.vocab, detail::stage_train(cfg_.finetune_train, seed, 0xF7), &audit);
      r.finetuned = evaluate(tuned, data.dev, data.vocab);
      r.wall_seconds["finetune_on_real"] = detail::seconds_since(t);
    }

    std::set<std::string> forbidden(split.half_b.begin(), split.half_b.end());
    for (const auto& d : data.dev.documents) forbidden.insert(d.id);
    r.leaks = audit.gold_leaks(forbidden);
    r.audited_records = audit.total();

    if (cfg_.write_artifacts) {
      const fs::path dir = fs::path(cfg_.out_dir) / ("seed-" + seed_s);
      fs::create_directories(dir);
      auto rows = candidates_to_json(targets, *cands);
      detail::write_jsonl(dir / "candidates.jsonl", rows);
      rows.clear();
      for (const auto& tr : generated) rows.push_back(triple_to_json(tr));
      detail::write_jsonl(dir / "triples.jsonl", rows);
      rows.clear();
      for (const auto& d : decisions) rows.push_back(decision_to_json(accepted[d.triple], d));
      detail::write_jsonl(dir / "filter.jsonl", rows);
      nlohmann::json ev = r.eval.to_json();
      if (r.finetuned) ev["finetuned"] = r.finetuned->to_json();
      detail::write_json(dir / "eval.json", ev);
      for (const char* f : {"candidates.jsonl", "triples.jsonl", "filter.jsonl", "eval.json"})
        artifacts.push_back("seed-" + seed_s + "/" + f);
    }
  }

 public:
  // Continues training a copy of a synthetic-data QA model on gold triples.
  static QAModel<float> finetune_on_real(const QAModel<float>& model, const std::vector<QATriple>& gold,
                                         const Vocab& vocab, const nn::TrainConfig& tc, TrainingAudit* audit = nullptr) {
    QAModel<float> tuned = model;
    if (tc.epochs == 0 || gold.empty()) return tuned;
    AlignmentStats stats;
    continue_qa_training(tuned, gold, vocab, tc, stats, audit, "finetune_real");
    return tuned;
  }

 private:
  PipelineConfig cfg_;
  StageCache* cache_ = nullptr;
  std::unique_ptr<StageCache> own_cache_;
};

inline RunReport run_pipeline(const PipelineConfig& cfg, StageCache* cache = nullptr) { return Pipeline(cfg, cache).run(); }

inline QAModel<float> finetune_on_real(const QAModel<float>& model, const std::vector<QATriple>& gold, const Vocab& vocab,
                                       const nn::TrainConfig& tc, TrainingAudit* audit = nullptr) {
  return Pipeline::finetune_on_real(model, gold, vocab, tc, audit);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { answer_top_k, filter_mode, qgen_layers, label_volume };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "answer_top_k") return SweepAxis::answer_top_k;
  if (s == "filter_mode") return SweepAxis::filter_mode;
  if (s == "qgen_layers") return SweepAxis::qgen_layers;
  if (s == "label_volume") return SweepAxis::label_volume;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

inline const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::answer_top_k: return "answer_top_k";
    case SweepAxis::filter_mode: return "filter_mode";
    case SweepAxis::qgen_layers: return "qgen_layers";
    case SweepAxis::label_volume: return "label_volume";
  }
  return "?";
}

inline const char* sweep_key(SweepAxis a) {
  switch (a) {
    case SweepAxis::answer_top_k: return "agen.top_k";
    case SweepAxis::filter_mode: return "filter.mode";
    case SweepAxis::qgen_layers: return "decoder.layers";
    case SweepAxis::label_volume: return "qa.label_fraction";
  }
  return "";
}

struct SweepResult {
  SweepAxis axis = SweepAxis::answer_top_k;
  std::vector<std::string> values;
  std::vector<RunReport> reports;

  std::string csv() const {
    std::string out = "axis,value,mean_em,std_em,mean_f1,std_f1,ok_seeds,failed_seeds,mean_kept\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto& r = reports[i];
      double kept = 0.0;
      std::size_t ok = 0;
      for (const auto& s : r.seeds)
        if (s.ok) {
          kept += static_cast<double>(s.counts.kept);
          ++ok;
        }
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.4f,%.4f,%.4f,%zu,%zu,%.1f\n", to_string(axis), values[i].c_str(),
                    r.em.mean, r.em.std, r.f1.mean, r.f1.std, ok, r.failed, ok ? kept / static_cast<double>(ok) : 0.0);
      out += buf;
    }
    return out;
  }
};

// Line plot of mean EM (with one-std bars) against the swept values, which
// are placed at equal spacing.
inline std::string sweep_svg(const SweepResult& s) {
  const double w = 480, h = 320, left = 60, right = 20, top = 30, bottom = 50;
  double lo = 100.0, hi = 0.0;
  for (const auto& r : s.reports) {
    lo = std::min(lo, r.em.mean - r.em.std);
    hi = std::max(hi, r.em.mean + r.em.std);
  }
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.1 * (hi - lo);
  lo = std::max(0.0, lo - pad);
  hi = std::min(100.0, hi + pad);
  if (!(hi > lo)) hi = lo + 1.0;
  const std::size_t n = s.values.size();
  auto x = [&](std::size_t i) { return left + (n > 1 ? (w - left - right) * static_cast<double>(i) / static_cast<double>(n - 1) : (w - left - right) / 2); };
  auto y = [&](double v) { return top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo)); };
  char buf[512];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                "font-size=\"12\">\n<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                w, h);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"18\" text-anchor=\"middle\">mean EM vs %s</text>\n", w / 2,
                to_string(s.axis));
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                left, top, left, h - bottom, left, h - bottom, w - right, h - bottom);
  out += buf;
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = lo + (hi - lo) * tick / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.1f</text>\n", left - 6, y(v) + 4, v);
    out += buf;
  }
  std::string path;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = s.reports[i];
    std::snprintf(buf, sizeof buf, "%s%.1f,%.1f", i ? " L" : "M", x(i), y(r.em.mean));
    path += buf;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"gray\"/>\n"
                  "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"steelblue\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n",
                  x(i), y(r.em.mean - r.em.std), x(i), y(r.em.mean + r.em.std), x(i), y(r.em.mean), x(i), h - bottom + 18,
                  s.values[i].c_str());
    out += buf;
  }
  out += "<path d=\"" + path + "\" fill=\"none\" stroke=\"steelblue\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n", w / 2, h - 10,
                to_string(s.axis));
  out += buf;
  out += "</svg>\n";
  return out;
}

// One pipeline run per value. Each run writes under out_dir/sweep-<axis>/<value>;
// the CSV and plot land in out_dir/sweep-<axis>.
inline SweepResult sweep(const PipelineConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                         StageCache* cache = nullptr) {
  if (values.empty()) throw ConfigError("a sweep needs at least one value");
  SweepResult s;
  s.axis = axis;
  const auto dir = std::filesystem::path(base.out_dir) / (std::string("sweep-") + to_string(axis));
  std::vector<PipelineConfig> configs;
  for (const auto& v : values) {
    PipelineConfig c = base;
    c.set(sweep_key(axis), v);
    c.out_dir = (dir / v).string();
    c.validate();
    configs.push_back(std::move(c));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    s.values.push_back(values[i]);
    s.reports.push_back(run_pipeline(configs[i], cache));
  }
  if (base.write_artifacts) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "sweep.csv") << s.csv();
    std::ofstream(dir / "sweep.svg") << sweep_svg(s);
  }
  return s;
}

inline SweepResult sweep(const PipelineConfig& base, const std::string& axis, const std::vector<std::string>& values,
                         StageCache* cache = nullptr) {
  return sweep(base, sweep_axis_from_string(axis), values, cache);
}

}  // namespace synthqa
