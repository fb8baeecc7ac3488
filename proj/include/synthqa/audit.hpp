#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace synthqa {

// Record ids tag every training example with its provenance:
//   gold|<doc>|<qa id>            a human-labelled question/answer
//   text|<doc>|<paragraph index>  raw paragraph text (pretraining)
//   syn|<doc>|<paragraph>|<s>|<e>|<attempt>   a synthetic triple
inline std::string gold_record_id(const std::string& doc, const std::string& qa) { return "gold|" + doc + "|" + qa; }

inline std::string text_record_id(const std::string& doc, std::size_t para) {
  return "text|" + doc + "|" + std::to_string(para);
}

inline std::string synthetic_record_id(const std::string& doc, std::size_t para, std::size_t s, std::size_t e,
                                       std::size_t attempt) {
  return "syn|" + doc + "|" + std::to_string(para) + "|" + std::to_string(s) + "|" + std::to_string(e) + "|" +
         std::to_string(attempt);
}

// Every record id seen in any training batch, grouped by stage.
class TrainingAudit {
 public:
  void record(const std::string& stage, const std::string& record_id) { seen_[stage].insert(record_id); }

  const std::map<std::string, std::set<std::string>>& stages() const { return seen_; }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [stage, ids] : seen_) n += ids.size();
    return n;
  }

  // Gold records from any of `forbidden_docs` that reached a training batch,
  // formatted "stage: record".
  std::vector<std::string> gold_leaks(const std::set<std::string>& forbidden_docs) const {
    std::vector<std::string> out;
    for (const auto& [stage, ids] : seen_)
      for (const auto& id : ids) {
        if (id.rfind("gold|", 0) != 0) continue;
        const auto bar = id.find('|', 5);
        if (forbidden_docs.count(id.substr(5, bar - 5))) out.push_back(stage + ": " + id);
      }
    return out;
  }

  void merge(const TrainingAudit& other) {
    for (const auto& [stage, ids] : other.seen_) seen_[stage].insert(ids.begin(), ids.end());
  }

 private:
  std::map<std::string, std::set<std::string>> seen_;
};

}  // namespace synthqa
