#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "synthqa/nn/checkpoint.hpp"
#include "synthqa/pipeline.hpp"

using namespace synthqa;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
};

PipelineConfig load(const Globals& g) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  cfg.validate();
  return cfg;
}

std::uint64_t partition_seed(const Globals& g, const PipelineConfig& cfg) { return g.seed ? *g.seed : cfg.seeds.front(); }

// Adds `files` to out_dir/manifest.json, keeping earlier entries.
void record(const PipelineConfig& cfg, const std::vector<std::string>& files) {
  const fs::path path = fs::path(cfg.out_dir) / "manifest.json";
  nlohmann::json m = nlohmann::json::object();
  if (std::ifstream in(path); in) {
    try {
      in >> m;
    } catch (const nlohmann::json::exception&) {
      m = nlohmann::json::object();
    }
  }
  std::set<std::string> all;
  if (m.contains("artifacts"))
    for (const auto& a : m["artifacts"]) all.insert(a.get<std::string>());
  all.insert(files.begin(), files.end());
  m["artifacts"] = all;
  m["config_hash"] = hex64(cfg.hash());
  detail::write_json(path, m);
}

fs::path out_path(const PipelineConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return fs::path(cfg.out_dir) / name;
}

// Checkpoints are <name>.bin plus <name>.json, read from `dir`.
template <class T>
void save_checkpoint(const PipelineConfig& cfg, const std::string& name, const nn::ParameterStore<T>& store,
                     nn::CheckpointManifest m) {
  nn::save_parameters(store, out_path(cfg, name + ".bin").string());
  m.save(out_path(cfg, name + ".json").string());
  record(cfg, {name + ".bin", name + ".json"});
}

nn::CheckpointManifest read_manifest(const std::string& dir, const std::string& name, const std::string& kind,
                                     const Vocab& vocab) {
  auto m = nn::CheckpointManifest::load((fs::path(dir) / (name + ".json")).string());
  if (m.kind != kind) throw FormatError("checkpoint '" + name + "' is a " + m.kind + ", expected " + kind);
  m.verify_vocab(vocab.hash());
  return m;
}

nn::EncoderModel<float> load_encoder(const std::string& dir, const Vocab& vocab) {
  const auto m = read_manifest(dir, "encoder", "encoder", vocab);
  auto enc = nn::EncoderModel<float>::create(nn::ModelConfig::from_json(m.model_config), 0);
  nn::load_parameters(enc.store, (fs::path(dir) / "encoder.bin").string());
  return enc;
}

nn::DecoderModel<float> load_decoder(const std::string& dir, const std::string& name, const std::string& kind,
                                     const Vocab& vocab, bool* stopwords = nullptr) {
  const auto m = read_manifest(dir, name, kind, vocab);
  auto dec = nn::DecoderModel<float>::create(nn::ModelConfig::from_json(m.model_config), 0);
  nn::load_parameters(dec.store, (fs::path(dir) / (name + ".bin")).string());
  if (stopwords) *stopwords = m.extra.value("stopwords", true);
  return dec;
}

AnswerExtractorModel<float> load_agen(const std::string& dir, const Vocab& vocab) {
  const auto m = read_manifest(dir, "agen", "answer_extractor", vocab);
  AnswerExtractorModel<float> a;
  a.encoder = nn::EncoderModel<float>::create(nn::ModelConfig::from_json(m.model_config), 0);
  Rng rng(0);
  a.head = add_span_head(a.encoder.store, a.encoder.config.hidden, head_mode_from_string(m.extra.at("head")), rng);
  a.scope = unit_scope_from_string(m.extra.at("scope"));
  a.max_answer_len = m.extra.at("max_answer_len").get<std::size_t>();
  nn::load_parameters(a.encoder.store, (fs::path(dir) / "agen.bin").string());
  return a;
}

QAModel<float> load_qa(const std::string& dir, const std::string& name, const Vocab& vocab) {
  const auto m = read_manifest(dir, name, "qa", vocab);
  QAModel<float> q;
  q.encoder = nn::EncoderModel<float>::create(nn::ModelConfig::from_json(m.model_config), 0);
  Rng rng(0);
  q.head = add_span_head(q.encoder.store, q.encoder.config.hidden, HeadMode::joint, rng);
  q.max_answer_len = m.extra.at("max_answer_len").get<std::size_t>();
  nn::load_parameters(q.encoder.store, (fs::path(dir) / (name + ".bin")).string());
  return q;
}

nn::CheckpointManifest manifest_for(const std::string& kind, const nn::ModelConfig& mc, const nn::TrainConfig& tc,
                                    const Vocab& vocab, const nn::TrainReport& rep) {
  nn::CheckpointManifest m;
  m.kind = kind;
  m.model_config = mc.to_json();
  m.train_config = tc.to_json();
  m.vocab_hash = vocab.hash();
  m.step = rep.steps;
  if (!rep.loss.empty()) m.extra["final_loss"] = rep.loss.back();
  return m;
}

std::vector<QATriple> read_triples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open triples '" + path + "'");
  return read_triples_jsonl(in, path);
}

void write_triples(const fs::path& path, const std::vector<QATriple>& ts) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  write_triples_jsonl(ts, out);
}

// Data, vocabulary, and partition shared by the stage commands. The
// vocabulary is saved on first use and must match afterwards.
struct Workspace {
  PipelineConfig cfg;
  PreparedData data;
  PartitionSplit split;
  std::string from;  // checkpoint directory

  Workspace(const Globals& g, std::string from_dir) : cfg(load(g)), data(prepare_data(cfg)) {
    split = partition_documents(data.pool, partition_seed(g, cfg));
    from = from_dir.empty() ? cfg.out_dir : from_dir;
    const auto vpath = out_path(cfg, "vocab.json");
    if (fs::exists(vpath)) {
      if (Vocab::load(vpath.string()).hash() != data.vocab.hash())
        throw IntegrityError("'" + vpath.string() + "' does not match the configured corpus");
    } else {
      data.vocab.save(vpath.string());
      record(cfg, {"vocab.json"});
    }
  }

  Corpus half_a() const { return data.pool.subset(split.half_a); }
  std::uint64_t seed() const { return split.seed; }
};

int run_ingest(const Globals& g, const std::string& input, const std::vector<std::string>& exclude) {
  auto cfg = load(g);
  auto c = ingest_squad_json(input, {exclude.begin(), exclude.end()});
  write_corpus_jsonl(c, out_path(cfg, "corpus.jsonl").string());
  record(cfg, {"corpus.jsonl"});
  std::cout << "ingested " << c.documents.size() << " documents, " << c.num_qas() << " questions\n";
  return 0;
}

int run_toygen(const Globals& g, std::optional<std::size_t> n_docs) {
  auto cfg = load(g);
  auto c = generate_toy_corpus(n_docs.value_or(cfg.toy_docs), g.seed.value_or(cfg.toy_seed), default_toy_spec());
  write_corpus_jsonl(c, out_path(cfg, "corpus.jsonl").string());
  record(cfg, {"corpus.jsonl"});
  std::cout << "wrote " << c.documents.size() << " toy documents, " << c.num_qas() << " questions\n";
  return 0;
}

int run_pretrain(const Globals& g, const std::string& which) {
  Workspace w(g, "");
  const auto& cfg = w.cfg;
  const auto pool = without_labels(w.data.pool);
  const auto dev = without_labels(w.data.dev);
  nlohmann::json metrics;
  if (which != "decoder") {
    auto r = pretrain_encoder(pool, w.data.vocab, cfg.encoder, cfg.pretrain_encoder_train, {cfg.mask_prob}, nullptr, &dev);
    auto m = manifest_for("encoder", r.encoder.config, cfg.pretrain_encoder_train, w.data.vocab, r.report);
    m.extra["heldout_masked_accuracy"] = r.heldout_accuracy.value_or(-1.0);
    save_checkpoint(cfg, "encoder", r.encoder.store, m);
    metrics["encoder"] = m.extra;
  }
  if (which != "encoder") {
    auto r = pretrain_decoder(pool, w.data.vocab, cfg.decoder, cfg.pretrain_decoder_train, nullptr, &dev);
    auto m = manifest_for("decoder", r.decoder.config, cfg.pretrain_decoder_train, w.data.vocab, r.report);
    m.extra["heldout_perplexity"] = r.heldout_perplexity.value_or(-1.0);
    save_checkpoint(cfg, "decoder", r.decoder.store, m);
    metrics["decoder"] = m.extra;
  }
  std::cout << metrics.dump(2) << '\n';
  return 0;
}

int run_train_agen(const Globals& g, const std::string& from) {
  Workspace w(g, from);
  const auto tc = detail::stage_train(w.cfg.agen_train, w.seed(), 0xA6);
  auto r = train_answer_extractor(w.half_a(), w.data.vocab, load_encoder(w.from, w.data.vocab), w.cfg.agen, tc);
  auto m = manifest_for("answer_extractor", r.model.encoder.config, tc, w.data.vocab, r.report);
  m.extra["head"] = to_string(w.cfg.agen.head);
  m.extra["scope"] = to_string(w.cfg.agen.scope);
  m.extra["max_answer_len"] = w.cfg.agen.max_answer_len;
  m.extra["alignment"] = r.alignment.to_json();
  m.extra["partition_seed"] = w.seed();
  save_checkpoint(w.cfg, "agen", r.model.encoder.store, m);
  std::cout << m.to_json().dump(2) << '\n';
  return 0;
}

int run_train_qgen(const Globals& g, const std::string& from) {
  Workspace w(g, from);
  const auto tc = detail::stage_train(w.cfg.qgen_train, w.seed(), 0x96);
  nn::DecoderModel<float> start;
  if (w.cfg.qgen_pretrained) {
    start = load_decoder(w.from, "decoder", "decoder", w.data.vocab);
  } else {
    auto mc = w.cfg.decoder;
    mc.vocab_size = w.data.vocab.size();
    start = nn::DecoderModel<float>::create(mc, mix_seed({w.seed(), 0x5C7A7CULL}));
  }
  auto r = train_question_generator(w.half_a(), w.data.vocab, start, {w.cfg.qgen_stopwords, w.cfg.agen.max_answer_len}, tc);
  auto m = manifest_for("question_generator", r.model.decoder.config, tc, w.data.vocab, r.report);
  m.extra["stopwords"] = w.cfg.qgen_stopwords;
  m.extra["pretrained"] = w.cfg.qgen_pretrained;
  m.extra["alignment"] = r.alignment.to_json();
  m.extra["partition_seed"] = w.seed();
  save_checkpoint(w.cfg, "qgen", r.model.decoder.store, m);
  std::cout << m.to_json().dump(2) << '\n';
  return 0;
}

// Without --triples: gold of half A (or of the whole pool with
// filter.train_on = all_labeled), the filtration model.
int run_train_qa(const Globals& g, const std::string& from, const std::string& triples, std::string name) {
  Workspace w(g, from);
  std::vector<QATriple> data;
  nn::TrainConfig tc;
  if (triples.empty()) {
    AlignmentStats st;
    const Corpus labeled = w.cfg.filter_train_on == "half_a" ? w.half_a() : w.data.pool;
    data = gold_triples(labeled, w.data.vocab, st, w.cfg.agen.max_answer_len);
    tc = detail::stage_train(w.cfg.filter_train, w.seed(), 0xF1);
    if (name.empty()) name = "filter";
  } else {
    data = read_triples(triples);
    tc = detail::stage_train(w.cfg.qa_train, w.seed(), 0x0A);
    if (name.empty()) name = "qa";
  }
  auto r = train_qa(data, w.data.vocab, load_encoder(w.from, w.data.vocab), {w.cfg.agen.max_answer_len}, tc);
  auto m = manifest_for("qa", r.model.encoder.config, tc, w.data.vocab, r.report);
  m.extra["max_answer_len"] = w.cfg.agen.max_answer_len;
  m.extra["alignment"] = r.alignment.to_json();
  m.extra["trained_on"] = triples.empty() ? "gold:" + w.cfg.filter_train_on : triples;
  save_checkpoint(w.cfg, name, r.model.encoder.store, m);
  std::cout << m.to_json().dump(2) << '\n';
  return 0;
}

int run_generate(const Globals& g, const std::string& from, const std::string& corpus) {
  Workspace w(g, from);
  const Corpus targets = corpus.empty() ? labelling_targets(w.data.pool, w.split, w.cfg.label_fraction)
                                        : without_labels(read_corpus_jsonl(corpus));
  auto agen = load_agen(w.from, w.data.vocab);
  QuestionGeneratorModel<float> qgen;
  qgen.decoder = load_decoder(w.from, "qgen", "question_generator", w.data.vocab, &qgen.stopwords);
  const auto cands = answer_candidates(agen, targets, w.data.vocab, w.cfg.effective_answer_top_k(), w.cfg.answer_top_p);
  const auto triples = question_attempts(qgen, targets, cands, w.cfg.sampling, w.seed(),
                                         attempts_for(w.cfg.filter_mode), w.data.vocab);
  detail::write_jsonl(out_path(w.cfg, "candidates.jsonl"), candidates_to_json(targets, cands));
  write_triples(out_path(w.cfg, "triples.jsonl"), triples);
  record(w.cfg, {"candidates.jsonl", "triples.jsonl"});
  std::size_t accepted = 0;
  for (const auto& t : triples) accepted += t.accepted;
  std::cout << "documents " << targets.documents.size() << ", candidates " << cands.size() << ", generated "
            << triples.size() << ", accepted " << accepted << '\n';
  return 0;
}

int run_filter(const Globals& g, const std::string& from, std::string triples, const std::string& model) {
  Workspace w(g, from);
  if (triples.empty()) triples = (fs::path(w.cfg.out_dir) / "triples.jsonl").string();
  std::vector<QATriple> accepted;
  for (auto& t : read_triples(triples))
    if (t.accepted) accepted.push_back(std::move(t));
  auto qa = load_qa(w.from, model, w.data.vocab);
  const auto decisions = roundtrip_filter(accepted, qa, w.data.vocab);
  std::vector<nlohmann::json> rows;
  std::vector<QATriple> kept;
  for (const auto& d : decisions) {
    rows.push_back(decision_to_json(accepted[d.triple], d));
    if (d.keep) kept.push_back(accepted[d.triple]);
  }
  detail::write_jsonl(out_path(w.cfg, "filter.jsonl"), rows);
  write_triples(out_path(w.cfg, "kept.jsonl"), kept);
  record(w.cfg, {"filter.jsonl", "kept.jsonl"});
  std::cout << "accepted " << accepted.size() << ", kept " << kept.size() << '\n';
  return 0;
}

int run_evaluate(const Globals& g, const std::string& from, const std::string& model) {
  Workspace w(g, from);
  auto qa = load_qa(w.from, model, w.data.vocab);
  const auto r = evaluate(qa, w.data.dev, w.data.vocab);
  detail::write_json(out_path(w.cfg, "eval.json"), r.to_json());
  record(w.cfg, {"eval.json"});
  std::cout << r.to_json().dump() << '\n';
  return 0;
}

int run_pipeline_cmd(const Globals& g) {
  auto cfg = load(g);
  if (g.seed) cfg.seeds = {*g.seed};
  const auto r = run_pipeline(cfg);
  std::cout << r.to_json().dump(2) << '\n';
  return r.failed == r.seeds.size() ? 1 : 0;
}

int run_sweep(const Globals& g, const std::string& axis, const std::vector<std::string>& values) {
  auto cfg = load(g);
  if (g.seed) cfg.seeds = {*g.seed};
  const auto s = sweep(cfg, sweep_axis_from_string(axis), values);
  std::cout << s.csv();
  return 0;
}

int run_synthesize(const Globals& g, const std::string& from, std::optional<std::size_t> n_docs) {
  Workspace w(g, from);
  const auto dec = load_decoder(w.from, "decoder", "decoder", w.data.vocab);
  nn::SamplingConfig sc;
  sc.top_p = w.cfg.synthesis_top_p;
  sc.seed = g.seed.value_or(w.cfg.synthesis_seed);
  const auto c = corpus_synthesis(dec, w.data.vocab, n_docs.value_or(w.cfg.synthesis_docs), sc, w.cfg.synthesis_paragraphs);
  write_corpus_jsonl(c, out_path(w.cfg, "synthetic_corpus.jsonl").string());
  record(w.cfg, {"synthetic_corpus.jsonl"});
  std::cout << "wrote " << c.documents.size() << " synthetic documents\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Synthetic question-answer data generation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Partition seed (toy corpus seed for toygen)");
  app.add_option("--out-dir", g.out_dir, "Output directory (overrides output.dir)");
  app.add_option("--set", g.overrides, "Config override key=value, repeatable");

  std::string input, from, triples, corpus, axis, which = "both", name;
  std::string filter_model = "filter", eval_model = "qa";
  std::vector<std::string> exclude, values;
  std::optional<std::size_t> n_docs;
  auto from_opt = [&](CLI::App* sub) { sub->add_option("--from", from, "Checkpoint directory (default: out-dir)"); };

  auto* ingest = app.add_subcommand("ingest", "Convert a SQuAD 1.1 JSON file to corpus.jsonl");
  ingest->add_option("--input", input)->required()->check(CLI::ExistingFile);
  ingest->add_option("--exclude-title", exclude, "Article title to drop, repeatable");
  auto* toygen = app.add_subcommand("toygen", "Write a templated toy corpus");
  toygen->add_option("--n-docs", n_docs);
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain encoder and/or decoder on corpus text");
  pretrain->add_option("--only", which)->check(CLI::IsMember({"encoder", "decoder", "both"}));
  auto* agen = app.add_subcommand("train-agen", "Train the answer extractor on half A");
  from_opt(agen);
  auto* qgen = app.add_subcommand("train-qgen", "Train the question generator on half A");
  from_opt(qgen);
  auto* tqa = app.add_subcommand("train-qa", "Train a QA model on triples, or the filtration model on gold");
  from_opt(tqa);
  tqa->add_option("--triples", triples, "Training triples JSONL; omit to train on gold");
  tqa->add_option("--name", name, "Checkpoint name (default qa, or filter on gold)");
  auto* gen = app.add_subcommand("generate", "Sample answers and questions for half B or a given corpus");
  from_opt(gen);
  gen->add_option("--corpus", corpus, "Corpus JSONL to label instead of half B");
  auto* filt = app.add_subcommand("filter", "Roundtrip-filter accepted triples");
  from_opt(filt);
  filt->add_option("--triples", triples);
  filt->add_option("--model", filter_model, "Filtration checkpoint name");
  auto* ev = app.add_subcommand("evaluate", "Evaluate a QA checkpoint on the dev set");
  from_opt(ev);
  ev->add_option("--model", eval_model, "QA checkpoint name");
  app.add_subcommand("pipeline", "Run the full pipeline over the configured seeds");
  auto* sw = app.add_subcommand("sweep", "Run the pipeline once per value of an axis");
  sw->add_option("--axis", axis, "answer_top_k, filter_mode, qgen_layers or label_volume")->required();
  sw->add_option("--values", values, "Comma-separated values for the axis")->required()->delimiter(',');
  auto* syn = app.add_subcommand("synthesize-corpus", "Sample a corpus from the pretrained decoder");
  from_opt(syn);
  syn->add_option("--n-docs", n_docs);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*ingest) return run_ingest(g, input, exclude);
    if (*toygen) return run_toygen(g, n_docs);
    if (*pretrain) return run_pretrain(g, which);
    if (*agen) return run_train_agen(g, from);
    if (*qgen) return run_train_qgen(g, from);
    if (*tqa) return run_train_qa(g, from, triples, name);
    if (*gen) return run_generate(g, from, corpus);
    if (*filt) return run_filter(g, from, triples, filter_model);
    if (*ev) return run_evaluate(g, from, eval_model);
    if (app.got_subcommand("pipeline")) return run_pipeline_cmd(g);
    if (*sw) return run_sweep(g, axis, values);
    if (*syn) return run_synthesize(g, from, n_docs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
