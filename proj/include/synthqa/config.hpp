#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "synthqa/answergen.hpp"
#include "synthqa/nn/train.hpp"
#include "synthqa/nn/transformer.hpp"
#include "synthqa/questiongen.hpp"

namespace synthqa {

enum class FilterMode { none, roundtrip, overgenerate_rt };

inline const char* to_string(FilterMode m) {
  switch (m) {
    case FilterMode::none: return "none";
    case FilterMode::roundtrip: return "roundtrip";
    case FilterMode::overgenerate_rt: return "overgenerate_rt";
  }
  return "?";
}

inline FilterMode filter_mode_from_string(const std::string& s) {
  if (s == "none") return FilterMode::none;
  if (s == "roundtrip") return FilterMode::roundtrip;
  if (s == "overgenerate_rt") return FilterMode::overgenerate_rt;
  throw ConfigError("unknown filter mode '" + s + "'");
}

// Attempts sampled per candidate answer.
inline std::size_t attempts_for(FilterMode m) { return m == FilterMode::overgenerate_rt ? 2 : 1; }

struct PipelineConfig {
  // corpus
  std::string corpus_source = "toy";  // toy, squad, jsonl
  std::string corpus_path;
  std::string dev_path;  // optional separate dev file (squad or jsonl, same as source)
  std::vector<std::string> exclude_titles;
  std::size_t toy_docs = 2000;
  std::uint64_t toy_seed = 0;
  double dev_fraction = 0.1;
  std::uint64_t dev_seed = 1234;
  std::size_t vocab_min_count = 1;

  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  nn::ModelConfig encoder{128, 4, 4, 256, 0, 2, 0.0};
  nn::ModelConfig decoder{128, 4, 4, 256, 0, 3, 0.0};

  nn::TrainConfig pretrain_encoder_train{32, 2e-3, nn::LrSchedule::linear_decay, 20, 100, 0.01, 1.0, 11, 0};
  nn::TrainConfig pretrain_decoder_train{32, 2e-3, nn::LrSchedule::linear_decay, 20, 100, 0.01, 1.0, 13, 0};
  double mask_prob = 0.15;

  // answer generation
  AnswerGenConfig agen;
  std::size_t answer_top_k = 0;  // 0: 5 per sentence, 24 per paragraph
  double answer_top_p = 0.9;
  nn::TrainConfig agen_train{32, 1e-3, nn::LrSchedule::linear_decay, 3, 30, 0.01, 1.0, 0, 0};

  // question generation
  bool qgen_stopwords = true;
  bool qgen_pretrained = true;
  OvergenerationConfig sampling;
  nn::TrainConfig qgen_train{32, 1e-3, nn::LrSchedule::linear_decay, 2, 30, 0.01, 1.0, 0, 0};

  // filtration
  FilterMode filter_mode = FilterMode::overgenerate_rt;
  std::string filter_train_on = "half_a";  // half_a, all_labeled
  nn::TrainConfig filter_train{32, 1e-3, nn::LrSchedule::linear_decay, 2, 30, 0.01, 1.0, 0, 0};

  // downstream QA
  double label_fraction = 1.0;  // share of half B documents labelled synthetically
  nn::TrainConfig qa_train{32, 1e-3, nn::LrSchedule::linear_decay, 2, 30, 0.01, 1.0, 0, 250};
  bool finetune_enabled = true;
  nn::TrainConfig finetune_train{32, 1e-4, nn::LrSchedule::linear_decay, 1, 10, 0.01, 1.0, 0, 0};

  // fully synthetic text
  bool synthesis_enabled = false;
  std::size_t synthesis_docs = 900;
  double synthesis_top_p = 0.96;
  std::uint64_t synthesis_seed = 7;
  std::size_t synthesis_paragraphs = 1;

  bool cache_enabled = false;
  bool write_artifacts = true;
  std::string out_dir = "out";

  std::size_t effective_answer_top_k() const {
    if (answer_top_k > 0) return answer_top_k;
    return agen.scope == UnitScope::sentence ? 5 : 24;
  }

  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  std::uint64_t hash() const;
  std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct Field {
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

inline std::map<std::string, Field>& field_table() {
  static std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto str = [&](const std::string& k, std::string PipelineConfig::*m) {
      t[k] = {[m](PipelineConfig& c, const std::string& v) { c.*m = v; },
              [m](const PipelineConfig& c) { return c.*m; }};
    };
    auto u64 = [&](const std::string& k, auto getter) {
      t[k] = {[k, getter](PipelineConfig& c, const std::string& v) {
                getter(c) = static_cast<std::remove_reference_t<decltype(getter(c))>>(parse_u64(k, v));
              },
              [getter](const PipelineConfig& c) { return std::to_string(getter(const_cast<PipelineConfig&>(c))); }};
    };
    auto dbl = [&](const std::string& k, auto getter) {
      t[k] = {[k, getter](PipelineConfig& c, const std::string& v) { getter(c) = parse_double(k, v); },
              [getter](const PipelineConfig& c) { return fmt_double(getter(const_cast<PipelineConfig&>(c))); }};
    };
    auto boolean = [&](const std::string& k, bool PipelineConfig::*m) {
      t[k] = {[k, m](PipelineConfig& c, const std::string& v) { c.*m = parse_bool(k, v); },
              [m](const PipelineConfig& c) { return std::string(c.*m ? "true" : "false"); }};
    };
    auto model = [&](const std::string& p, nn::ModelConfig PipelineConfig::*m) {
      u64(p + ".hidden", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).hidden; });
      u64(p + ".layers", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).layers; });
      u64(p + ".heads", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).heads; });
      u64(p + ".max_seq_len", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).max_seq_len; });
      dbl(p + ".dropout", [m](PipelineConfig& c) -> double& { return (c.*m).dropout; });
    };
    auto train = [&](const std::string& p, nn::TrainConfig PipelineConfig::*m) {
      u64(p + ".batch_size", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).batch_size; });
      dbl(p + ".lr", [m](PipelineConfig& c) -> double& { return (c.*m).lr; });
      t[p + ".lr_schedule"] = {
          [m](PipelineConfig& c, const std::string& v) { (c.*m).lr_schedule = nn::lr_schedule_from_string(v); },
          [m](const PipelineConfig& c) { return std::string(nn::to_string((c.*m).lr_schedule)); }};
      u64(p + ".epochs", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).epochs; });
      u64(p + ".warmup_iters", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).warmup_iters; });
      dbl(p + ".weight_decay", [m](PipelineConfig& c) -> double& { return (c.*m).weight_decay; });
      dbl(p + ".grad_clip_norm", [m](PipelineConfig& c) -> double& { return (c.*m).grad_clip_norm; });
      u64(p + ".seed", [m](PipelineConfig& c) -> std::uint64_t& { return (c.*m).seed; });
      u64(p + ".max_steps", [m](PipelineConfig& c) -> std::size_t& { return (c.*m).max_steps; });
    };

    str("corpus.source", &PipelineConfig::corpus_source);
    str("corpus.path", &PipelineConfig::corpus_path);
    str("corpus.dev_path", &PipelineConfig::dev_path);
    t["corpus.exclude_titles"] = {
        [](PipelineConfig& c, const std::string& v) { c.exclude_titles = split_list(v); },
        [](const PipelineConfig& c) {
          std::string s;
          for (const auto& x : c.exclude_titles) s += (s.empty() ? "" : ",") + x;
          return s;
        }};
    u64("corpus.toy_docs", [](PipelineConfig& c) -> std::size_t& { return c.toy_docs; });
    u64("corpus.toy_seed", [](PipelineConfig& c) -> std::uint64_t& { return c.toy_seed; });
    dbl("corpus.dev_fraction", [](PipelineConfig& c) -> double& { return c.dev_fraction; });
    u64("corpus.dev_seed", [](PipelineConfig& c) -> std::uint64_t& { return c.dev_seed; });
    u64("vocab.min_count", [](PipelineConfig& c) -> std::size_t& { return c.vocab_min_count; });
    t["seeds"] = {[](PipelineConfig& c, const std::string& v) {
                    c.seeds.clear();
                    for (const auto& s : split_list(v)) c.seeds.push_back(parse_u64("seeds", s));
                  },
                  [](const PipelineConfig& c) {
                    std::string s;
                    for (auto x : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(x);
                    return s;
                  }};
    model("encoder", &PipelineConfig::encoder);
    model("decoder", &PipelineConfig::decoder);
    train("pretrain_encoder", &PipelineConfig::pretrain_encoder_train);
    train("pretrain_decoder", &PipelineConfig::pretrain_decoder_train);
    dbl("pretrain_encoder.mask_prob", [](PipelineConfig& c) -> double& { return c.mask_prob; });

    t["agen.head"] = {[](PipelineConfig& c, const std::string& v) { c.agen.head = head_mode_from_string(v); },
                      [](const PipelineConfig& c) { return std::string(to_string(c.agen.head)); }};
    t["agen.scope"] = {[](PipelineConfig& c, const std::string& v) { c.agen.scope = unit_scope_from_string(v); },
                       [](const PipelineConfig& c) { return std::string(to_string(c.agen.scope)); }};
    u64("agen.max_answer_len", [](PipelineConfig& c) -> std::size_t& { return c.agen.max_answer_len; });
    u64("agen.top_k", [](PipelineConfig& c) -> std::size_t& { return c.answer_top_k; });
    dbl("agen.top_p", [](PipelineConfig& c) -> double& { return c.answer_top_p; });
    train("agen.train", &PipelineConfig::agen_train);

    boolean("qgen.stopwords", &PipelineConfig::qgen_stopwords);
    boolean("qgen.pretrained", &PipelineConfig::qgen_pretrained);
    u64("qgen.top_k", [](PipelineConfig& c) -> std::size_t& { return c.sampling.top_k; });
    dbl("qgen.top_p", [](PipelineConfig& c) -> double& { return c.sampling.top_p; });
    dbl("qgen.temperature", [](PipelineConfig& c) -> double& { return c.sampling.temperature; });
    u64("qgen.max_new_tokens", [](PipelineConfig& c) -> std::size_t& { return c.sampling.max_new_tokens; });
    train("qgen.train", &PipelineConfig::qgen_train);

    t["filter.mode"] = {[](PipelineConfig& c, const std::string& v) { c.filter_mode = filter_mode_from_string(v); },
                        [](const PipelineConfig& c) { return std::string(to_string(c.filter_mode)); }};
    str("filter.train_on", &PipelineConfig::filter_train_on);
    train("filter.train", &PipelineConfig::filter_train);

    dbl("qa.label_fraction", [](PipelineConfig& c) -> double& { return c.label_fraction; });
    train("qa.train", &PipelineConfig::qa_train);
    boolean("finetune.enabled", &PipelineConfig::finetune_enabled);
    train("finetune.train", &PipelineConfig::finetune_train);

    boolean("synthesis.enabled", &PipelineConfig::synthesis_enabled);
    u64("synthesis.n_docs", [](PipelineConfig& c) -> std::size_t& { return c.synthesis_docs; });
    dbl("synthesis.top_p", [](PipelineConfig& c) -> double& { return c.synthesis_top_p; });
    u64("synthesis.seed", [](PipelineConfig& c) -> std::uint64_t& { return c.synthesis_seed; });
    u64("synthesis.paragraphs", [](PipelineConfig& c) -> std::size_t& { return c.synthesis_paragraphs; });

    boolean("cache.enabled", &PipelineConfig::cache_enabled);
    boolean("output.write_artifacts", &PipelineConfig::write_artifacts);
    str("output.dir", &PipelineConfig::out_dir);
    return t;
  }();
  return table;
}

}  // namespace detail

inline void PipelineConfig::set(const std::string& key, const std::string& value) {
  auto& t = detail::field_table();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, value);
}

inline std::map<std::string, std::string> PipelineConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, f] : detail::field_table()) out[k] = f.get(*this);
  return out;
}

// Output location does not change results, so it is left out of the hash.
inline std::uint64_t PipelineConfig::hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& [k, v] : to_map()) {
    if (k == "output.dir" || k == "output.write_artifacts" || k == "cache.enabled") continue;
    h = fnv1a(k + "=" + v + "\n", h);
  }
  return h;
}

inline std::string PipelineConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
  return out;
}

inline void PipelineConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one partition seed is required");
  if (corpus_source != "toy" && corpus_source != "squad" && corpus_source != "jsonl")
    throw ConfigError("corpus.source must be toy, squad, or jsonl");
  if (corpus_source != "toy") {
    if (corpus_path.empty()) throw ConfigError("corpus.path is required for source '" + corpus_source + "'");
    if (!std::ifstream(corpus_path)) throw ConfigError("corpus.path '" + corpus_path + "' is not readable");
  }
  if (!dev_path.empty() && !std::ifstream(dev_path)) throw ConfigError("corpus.dev_path '" + dev_path + "' is not readable");
  if (dev_path.empty() && (!(dev_fraction > 0.0) || dev_fraction >= 1.0))
    throw ConfigError("corpus.dev_fraction must lie in (0, 1)");
  if (!(label_fraction > 0.0) || label_fraction > 1.0) throw ConfigError("qa.label_fraction must lie in (0, 1]");
  if (!(answer_top_p > 0.0) || answer_top_p > 1.0) throw ConfigError("agen.top_p must lie in (0, 1]");
  if (sampling.top_k < 1) throw ConfigError("qgen.top_k must be at least 1");
  if (!(sampling.top_p > 0.0) || sampling.top_p > 1.0) throw ConfigError("qgen.top_p must lie in (0, 1]");
  if (!(sampling.temperature > 0.0)) throw ConfigError("qgen.temperature must be positive");
  if (!(synthesis_top_p > 0.0) || synthesis_top_p > 1.0) throw ConfigError("synthesis.top_p must lie in (0, 1]");
  if (filter_train_on != "half_a" && filter_train_on != "all_labeled")
    throw ConfigError("filter.train_on must be half_a or all_labeled");
  if (decoder.n_segment_types != 3) throw ConfigError("the decoder needs three segment types");
  if (agen.max_answer_len == 0) throw ConfigError("agen.max_answer_len must be positive");
  auto with_vocab = [](nn::ModelConfig m) {
    m.vocab_size = 1;
    return m;
  };
  with_vocab(encoder).validate();
  with_vocab(decoder).validate();
  for (const auto* tc : {&pretrain_encoder_train, &pretrain_decoder_train, &agen_train, &qgen_train, &filter_train,
                         &qa_train, &finetune_train})
    tc->validate();
}

// Flat "key = value" lines; '#' starts a comment. Unknown keys are errors.
inline PipelineConfig parse_config(std::istream& in, const std::string& name = "<config>",
                                   PipelineConfig base = PipelineConfig{}) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(name + ":" + std::to_string(n) + ": expected key = value");
    try {
      base.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(name + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return base;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in, path);
}

}  // namespace synthqa
