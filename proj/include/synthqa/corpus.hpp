#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "synthqa/common.hpp"

namespace synthqa {

// Half-open byte range [start, end) into a paragraph's text.
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - start; }
  bool operator==(const CharSpan&) const = default;
};

struct GoldAnswer {
  std::string text;
  std::size_t char_start = 0;  // byte offset into Paragraph::text
  bool operator==(const GoldAnswer&) const = default;
};

struct GoldQA {
  std::string id;
  std::string question;
  std::vector<GoldAnswer> answers;
  bool operator==(const GoldQA&) const = default;
};

struct Paragraph {
  std::string text;
  std::vector<CharSpan> sentences;
  std::vector<GoldQA> qas;
  bool operator==(const Paragraph&) const = default;
};

struct Document {
  std::string id;
  std::vector<Paragraph> paragraphs;
  bool operator==(const Document&) const = default;
};

enum class Provenance { ingested, toy_generated, model_generated };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::ingested: return "ingested";
    case Provenance::toy_generated: return "toy_generated";
    case Provenance::model_generated: return "model_generated";
  }
  return "ingested";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "ingested") return Provenance::ingested;
  if (s == "toy_generated") return Provenance::toy_generated;
  if (s == "model_generated") return Provenance::model_generated;
  throw FormatError("unknown corpus provenance '" + s + "'");
}

struct Corpus {
  std::vector<Document> documents;
  Provenance provenance = Provenance::ingested;

  bool operator==(const Corpus&) const = default;

  std::size_t num_qas() const {
    std::size_t n = 0;
    for (const auto& d : documents)
      for (const auto& p : d.paragraphs) n += p.qas.size();
    return n;
  }

  std::size_t num_paragraphs() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.paragraphs.size();
    return n;
  }

  std::vector<std::string> document_ids() const {
    std::vector<std::string> ids;
    ids.reserve(documents.size());
    for (const auto& d : documents) ids.push_back(d.id);
    return ids;
  }

  // Documents whose ids are in `ids`, in corpus order.
  Corpus subset(const std::vector<std::string>& ids) const {
    std::set<std::string> wanted(ids.begin(), ids.end());
    Corpus out;
    out.provenance = provenance;
    for (const auto& d : documents)
      if (wanted.count(d.id)) out.documents.push_back(d);
    return out;
  }
};

struct PartitionSplit {
  std::uint64_t seed = 0;
  std::vector<std::string> half_a;
  std::vector<std::string> half_b;
  bool operator==(const PartitionSplit&) const = default;
};

// ---------------------------------------------------------------------------
// Sentence splitting

// A sentence ends at '.', '?' or '!' when followed by a space and then an
// uppercase letter, or by end of text. Leading/trailing spaces are excluded.
inline std::vector<CharSpan> split_sentences(const std::string& text) {
  std::vector<CharSpan> out;
  const std::size_t n = text.size();
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t start = 0;
  while (start < n && is_space(text[start])) ++start;
  std::size_t i = start;
  while (i < n) {
    const char c = text[i];
    if (c == '.' || c == '?' || c == '!') {
      bool boundary = false;
      if (i + 1 == n) {
        boundary = true;
      } else if (text[i + 1] == ' ') {
        std::size_t j = i + 1;
        while (j < n && text[j] == ' ') ++j;
        boundary = (j == n) || std::isupper(static_cast<unsigned char>(text[j]));
      }
      if (boundary) {
        out.push_back({start, i + 1});
        start = i + 1;
        while (start < n && is_space(text[start])) ++start;
        i = start;
        continue;
      }
    }
    ++i;
  }
  if (start < n) {
    std::size_t end = n;
    while (end > start && is_space(text[end - 1])) --end;
    if (end > start) out.push_back({start, end});
  }
  return out;
}

// Index of the sentence fully containing [start, end), or -1.
inline int sentence_containing(const Paragraph& p, std::size_t start, std::size_t end) {
  for (std::size_t i = 0; i < p.sentences.size(); ++i)
    if (p.sentences[i].start <= start && end <= p.sentences[i].end) return static_cast<int>(i);
  return -1;
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_paragraph(const Paragraph& p, const std::string& doc_id) {
  std::size_t prev_end = 0;
  for (const auto& s : p.sentences) {
    if (s.start >= s.end || s.end > p.text.size() || s.start < prev_end)
      throw IntegrityError("document '" + doc_id + "': malformed sentence offsets");
    prev_end = s.end;
  }
  for (const auto& qa : p.qas) {
    if (qa.answers.empty())
      throw IntegrityError("document '" + doc_id + "': question '" + qa.id + "' has no answers");
    for (const auto& a : qa.answers) {
      if (a.char_start + a.text.size() > p.text.size() ||
          p.text.compare(a.char_start, a.text.size(), a.text) != 0)
        throw IntegrityError("document '" + doc_id + "': answer '" + a.text +
                             "' does not occur at offset " + std::to_string(a.char_start));
    }
  }
}

inline void validate_corpus(const Corpus& c) {
  if (c.documents.empty()) throw IntegrityError("corpus has no documents");
  std::set<std::string> seen;
  for (const auto& d : c.documents) {
    if (!seen.insert(d.id).second) throw IntegrityError("duplicate document id '" + d.id + "'");
    if (d.paragraphs.empty()) throw IntegrityError("document '" + d.id + "' has no paragraphs");
    for (const auto& p : d.paragraphs) validate_paragraph(p, d.id);
  }
}

// ---------------------------------------------------------------------------
// SQuAD v1.1 ingestion

namespace detail {

// SQuAD answer_start counts Unicode code points; our offsets are bytes.
inline std::size_t codepoint_to_byte(const std::string& s, std::size_t cp) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if ((c & 0xC0) == 0x80) continue;
    if (count == cp) return i;
    ++count;
  }
  if (count == cp) return s.size();
  return std::string::npos;
}

inline std::size_t byte_to_codepoint(const std::string& s, std::size_t byte) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < byte && i < s.size(); ++i)
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) ++count;
  return count;
}

}  // namespace detail

// Parses a SQuAD v1.1 file. Documents whose title appears in `excluded_titles`
// are dropped. Titles become document ids; duplicates get a "#n" suffix.
inline Corpus ingest_squad_json(const std::string& path,
                                const std::set<std::string>& excluded_titles = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open SQuAD file '" + path + "'");
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' is not valid JSON: " + e.what());
  }
  if (!root.is_object() || !root.contains("data") || !root["data"].is_array())
    throw FormatError("'" + path + "' lacks a top-level \"data\" array");

  Corpus corpus;
  corpus.provenance = Provenance::ingested;
  std::map<std::string, int> title_counts;
  try {
    for (const auto& article : root["data"]) {
      std::string title = article.at("title").get<std::string>();
      if (excluded_titles.count(title)) continue;
      Document doc;
      int dup = title_counts[title]++;
      doc.id = dup == 0 ? title : title + "#" + std::to_string(dup);
      for (const auto& pj : article.at("paragraphs")) {
        Paragraph para;
        para.text = pj.at("context").get<std::string>();
        para.sentences = split_sentences(para.text);
        for (const auto& qj : pj.at("qas")) {
          if (qj.contains("is_impossible"))
            throw FormatError("'" + path + "': SQuAD2.0 field is_impossible is not supported");
          GoldQA qa;
          qa.id = qj.at("id").get<std::string>();
          qa.question = qj.at("question").get<std::string>();
          for (const auto& aj : qj.at("answers")) {
            GoldAnswer a;
            a.text = aj.at("text").get<std::string>();
            const auto cp = aj.at("answer_start").get<std::size_t>();
            const auto byte = detail::codepoint_to_byte(para.text, cp);
            if (byte == std::string::npos || byte + a.text.size() > para.text.size() ||
                para.text.compare(byte, a.text.size(), a.text) != 0)
              throw IntegrityError("document '" + doc.id + "': answer '" + a.text +
                                   "' not found at answer_start " + std::to_string(cp));
            a.char_start = byte;
            qa.answers.push_back(std::move(a));
          }
          if (qa.answers.empty())
            throw IntegrityError("document '" + doc.id + "': question '" + qa.id + "' has no answers");
          para.qas.push_back(std::move(qa));
        }
        doc.paragraphs.push_back(std::move(para));
      }
      if (!doc.paragraphs.empty()) corpus.documents.push_back(std::move(doc));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "' does not follow the SQuAD v1.1 schema: " + e.what());
  }
  if (corpus.documents.empty()) throw FormatError("'" + path + "' contains no documents");
  validate_corpus(corpus);
  return corpus;
}

// Writes a corpus in SQuAD v1.1 layout (answer_start in code points).
inline nlohmann::json to_squad_json(const Corpus& c) {
  nlohmann::json data = nlohmann::json::array();
  for (const auto& d : c.documents) {
    nlohmann::json art;
    art["title"] = d.id;
    art["paragraphs"] = nlohmann::json::array();
    for (const auto& p : d.paragraphs) {
      nlohmann::json pj;
      pj["context"] = p.text;
      pj["qas"] = nlohmann::json::array();
      for (const auto& qa : p.qas) {
        nlohmann::json qj;
        qj["id"] = qa.id;
        qj["question"] = qa.question;
        qj["answers"] = nlohmann::json::array();
        for (const auto& a : qa.answers)
          qj["answers"].push_back(
              {{"text", a.text}, {"answer_start", detail::byte_to_codepoint(p.text, a.char_start)}});
        pj["qas"].push_back(std::move(qj));
      }
      art["paragraphs"].push_back(std::move(pj));
    }
    data.push_back(std::move(art));
  }
  return {{"version", "1.1"}, {"data", std::move(data)}};
}

// ---------------------------------------------------------------------------
// JSONL snapshot: one document per line. Offsets are byte offsets.

inline nlohmann::json document_to_json(const Document& d, Provenance prov) {
  nlohmann::json j;
  j["id"] = d.id;
  j["provenance"] = to_string(prov);
  j["paragraphs"] = nlohmann::json::array();
  for (const auto& p : d.paragraphs) {
    nlohmann::json pj;
    pj["text"] = p.text;
    pj["sentences"] = nlohmann::json::array();
    for (const auto& s : p.sentences) pj["sentences"].push_back({s.start, s.end});
    pj["qas"] = nlohmann::json::array();
    for (const auto& qa : p.qas) {
      nlohmann::json qj;
      qj["id"] = qa.id;
      qj["question"] = qa.question;
      qj["answers"] = nlohmann::json::array();
      for (const auto& a : qa.answers) qj["answers"].push_back({{"text", a.text}, {"char_start", a.char_start}});
      pj["qas"].push_back(std::move(qj));
    }
    j["paragraphs"].push_back(std::move(pj));
  }
  return j;
}

inline void write_corpus_jsonl(const Corpus& c, std::ostream& out) {
  for (const auto& d : c.documents) out << document_to_json(d, c.provenance).dump() << '\n';
}

inline void write_corpus_jsonl(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write corpus to '" + path + "'");
  write_corpus_jsonl(c, out);
}

inline Corpus read_corpus_jsonl(std::istream& in, const std::string& name = "<stream>") {
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Document d;
      d.id = j.at("id").get<std::string>();
      if (j.contains("provenance")) {
        auto prov = provenance_from_string(j["provenance"].get<std::string>());
        if (first) c.provenance = prov;
      }
      for (const auto& pj : j.at("paragraphs")) {
        Paragraph p;
        p.text = pj.at("text").get<std::string>();
        for (const auto& s : pj.at("sentences")) p.sentences.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
        for (const auto& qj : pj.at("qas")) {
          GoldQA qa;
          qa.id = qj.at("id").get<std::string>();
          qa.question = qj.at("question").get<std::string>();
          for (const auto& aj : qj.at("answers"))
            qa.answers.push_back({aj.at("text").get<std::string>(), aj.at("char_start").get<std::size_t>()});
          p.qas.push_back(std::move(qa));
        }
        d.paragraphs.push_back(std::move(p));
      }
      c.documents.push_back(std::move(d));
      first = false;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_corpus(c);
  return c;
}

inline Corpus read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus '" + path + "'");
  return read_corpus_jsonl(in, path);
}

// ---------------------------------------------------------------------------
// Procedural toy corpus

// A fact template such as "<PERSON> was born in <CITY> in <YEAR>." with one
// question template per answerable slot.
struct FactTemplate {
  std::string text;
  std::vector<std::pair<std::string, std::string>> questions;  // slot -> question template
};

struct ToySpec {
  std::vector<std::pair<std::string, std::vector<std::string>>> slots;  // slot -> values
  std::vector<FactTemplate> templates;
  std::size_t sentences_per_paragraph = 3;
  std::size_t paragraphs_per_document = 1;
};

inline ToySpec default_toy_spec() {
  ToySpec spec;
  std::vector<std::string> first = {"Marie", "Albert", "Ada",    "Isaac",  "Niels",   "Rosalind", "Alan",
                                    "Grace", "Emmy",   "Carl",   "Lise",   "Werner",  "Dorothy",  "Enrico",
                                    "Maria", "Paul",   "Chien",  "Srinivasa", "Barbara", "Max"};
  std::vector<std::string> last = {"Curie",  "Hopper",   "Lovelace", "Newton", "Bohr",    "Franklin", "Turing",
                                   "Noether", "Gauss",   "Meitner",  "Hodgkin", "Fermi",  "Dirac",    "Wu",
                                   "Ramanujan", "McClintock", "Planck", "Pauli", "Kepler", "Faraday"};
  std::vector<std::string> persons;
  for (const auto& f : first)
    for (const auto& l : last) persons.push_back(f + " " + l);
  std::vector<std::string> cities = {
      "Paris",   "London",  "Vienna",   "Berlin",   "Rome",      "Madrid",   "Lisbon",   "Prague",
      "Warsaw",  "Dublin",  "Oslo",     "Stockholm", "Helsinki", "Athens",   "Cairo",    "Tokyo",
      "Kyoto",   "Seoul",   "Beijing",  "Shanghai", "Mumbai",    "Delhi",    "Sydney",   "Toronto",
      "Chicago", "Boston",  "New York", "San Francisco", "Buenos Aires", "Rio de Janeiro", "Mexico City",
      "Cape Town", "Zurich", "Geneva",  "Munich",   "Milan",     "Naples",   "Budapest"};
  std::vector<std::string> years;
  for (int y = 1800; y < 2000; ++y) years.push_back(std::to_string(y));
  std::vector<std::string> fields = {"physics", "chemistry", "mathematics", "biology", "astronomy",
                                     "medicine", "geology", "economics", "philosophy", "computer science",
                                     "organic chemistry", "nuclear physics", "number theory", "genetics",
                                     "botany", "linguistics"};
  std::vector<std::string> orgs = {"the Royal Society", "the Academy of Sciences", "a physics institute",
                                   "the Institute for Advanced Study", "a chemistry laboratory",
                                   "the National Museum", "a mathematics school", "the Botanical Garden",
                                   "an observatory", "the Medical College", "a research hospital",
                                   "the Geological Survey", "the Linguistic Society", "a computing center"};
  spec.slots = {{"PERSON", persons}, {"CITY", cities}, {"YEAR", years}, {"FIELD", fields}, {"ORG", orgs}};
  spec.templates = {
      {"<PERSON> was born in <CITY> in <YEAR>.",
       {{"PERSON", "Who was born in <CITY> in <YEAR>?"},
        {"CITY", "Where was <PERSON> born?"},
        {"YEAR", "When was <PERSON> born?"}}},
      {"<PERSON> moved to <CITY> to study <FIELD>.",
       {{"PERSON", "Who moved to <CITY> to study <FIELD>?"},
        {"CITY", "Where did <PERSON> move to study <FIELD>?"},
        {"FIELD", "What did <PERSON> study in <CITY>?"}}},
      {"In <YEAR>, <PERSON> founded <ORG> in <CITY>.",
       {{"YEAR", "When did <PERSON> found <ORG>?"},
        {"PERSON", "Who founded <ORG> in <CITY>?"},
        {"ORG", "What did <PERSON> found in <YEAR>?"},
        {"CITY", "Where did <PERSON> found <ORG>?"}}},
  };
  return spec;
}

namespace detail {

struct FilledSlot {
  std::string slot;
  std::size_t offset;  // byte offset within the filled sentence
  std::string value;
};

// Replaces every <SLOT> with its value, recording where each value landed.
inline std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& values,
                                 std::vector<FilledSlot>* filled) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '<') {
      auto close = tmpl.find('>', i);
      if (close == std::string::npos) throw ConfigError("unterminated slot in template '" + tmpl + "'");
      std::string slot = tmpl.substr(i + 1, close - i - 1);
      auto it = values.find(slot);
      if (it == values.end()) throw ConfigError("template references unknown slot '" + slot + "'");
      if (filled) filled->push_back({slot, out.size(), it->second});
      out += it->second;
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

}  // namespace detail

// Deterministic in (n_docs, seed, spec). Slot values are distinct within a
// paragraph so every generated question has a unique answer.
inline Corpus generate_toy_corpus(std::size_t n_docs, std::uint64_t seed, const ToySpec& spec) {
  if (n_docs < 1) throw ConfigError("toy corpus needs at least one document");
  if (spec.templates.empty()) throw ConfigError("toy spec has no templates");
  if (spec.sentences_per_paragraph < 1 || spec.paragraphs_per_document < 1)
    throw ConfigError("toy spec needs at least one sentence and paragraph");
  for (const auto& [slot, values] : spec.slots)
    if (values.empty()) throw ConfigError("toy spec entity list for slot '" + slot + "' is empty");
  std::map<std::string, const std::vector<std::string>*> pools;
  for (const auto& [slot, values] : spec.slots) pools[slot] = &values;
  for (const auto& t : spec.templates)
    for (const auto& [slot, q] : t.questions)
      if (!pools.count(slot)) throw ConfigError("question for unknown slot '" + slot + "'");

  Corpus corpus;
  corpus.provenance = Provenance::toy_generated;
  for (std::size_t d = 0; d < n_docs; ++d) {
    Rng rng(mix_seed({seed, d, 0x70795ULL}));
    Document doc;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "toy-%05zu", d);
    doc.id = idbuf;
    for (std::size_t pi = 0; pi < spec.paragraphs_per_document; ++pi) {
      Paragraph para;
      std::map<std::string, std::set<std::string>> used;
      for (std::size_t si = 0; si < spec.sentences_per_paragraph; ++si) {
        const auto& tmpl = spec.templates[rng.below(spec.templates.size())];
        std::map<std::string, std::string> values;
        for (const auto& [slot, pool] : pools) {
          const auto& vals = *pool;
          std::string v = vals[rng.below(vals.size())];
          for (int attempt = 0; attempt < 64 && used[slot].count(v); ++attempt) v = vals[rng.below(vals.size())];
          values[slot] = v;
        }
        std::vector<detail::FilledSlot> filled;
        std::string sentence = detail::fill_template(tmpl.text, values, &filled);
        for (const auto& f : filled) used[f.slot].insert(f.value);
        if (!sentence.empty()) sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
        if (!para.text.empty()) para.text += ' ';
        const std::size_t base = para.text.size();
        para.text += sentence;
        para.sentences.push_back({base, base + sentence.size()});
        if (tmpl.questions.empty()) continue;
        const auto& [qslot, qtmpl] = tmpl.questions[rng.below(tmpl.questions.size())];
        auto hit = std::find_if(filled.begin(), filled.end(), [&](const auto& f) { return f.slot == qslot; });
        if (hit == filled.end()) throw ConfigError("question slot '" + qslot + "' absent from its template");
        GoldQA qa;
        qa.id = doc.id + "-p" + std::to_string(pi) + "-q" + std::to_string(si);
        qa.question = detail::fill_template(qtmpl, values, nullptr);
        const std::size_t start = base + hit->offset;
        qa.answers.push_back({para.text.substr(start, hit->value.size()), start});
        para.qas.push_back(std::move(qa));
      }
      doc.paragraphs.push_back(std::move(para));
    }
    corpus.documents.push_back(std::move(doc));
  }
  validate_corpus(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// Partitioning

// Shuffles the id list with `seed` and gives the first ceil(n/2) ids to half_a.
inline PartitionSplit partition_documents(const std::vector<std::string>& ids, std::uint64_t seed) {
  if (ids.size() < 2) throw ConfigError("partitioning needs at least two documents");
  std::vector<std::string> order = ids;
  Rng rng(mix_seed({seed, 0x9A27ULL}));
  rng.shuffle(order);
  const std::size_t cut = (order.size() + 1) / 2;
  PartitionSplit split;
  split.seed = seed;
  split.half_a.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
  split.half_b.assign(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  return split;
}

inline PartitionSplit partition_documents(const Corpus& corpus, std::uint64_t seed) {
  return partition_documents(corpus.document_ids(), seed);
}

}  // namespace synthqa
