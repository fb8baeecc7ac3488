#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include "json.hpp"
#include "synthqa/nn/tensor.hpp"

namespace synthqa::nn {

// Parameter blob layout (little-endian host order):
//   "SQAP" u32 count, then per parameter:
//   u32 name_len, name bytes, u64 rows, u64 cols, rows*cols float32 values.
template <class T>
void save_parameters(const ParameterStore<T>& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write parameters to '" + path + "'");
  out.write("SQAP", 4);
  const auto count = static_cast<std::uint32_t>(store.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    const auto len = static_cast<std::uint32_t>(p.name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(p.name.data(), len);
    const auto rows = static_cast<std::uint64_t>(p.value.rows());
    const auto cols = static_cast<std::uint64_t>(p.value.cols());
    out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const auto v = static_cast<float>(p.value.data()[k]);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  if (!out) throw FormatError("failed writing parameters to '" + path + "'");
}

// Overwrites every parameter of `store` from the blob. Names and shapes must
// match exactly.
template <class T>
void load_parameters(ParameterStore<T>& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open parameters '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SQAP", 4) != 0) throw FormatError("'" + path + "' is not a parameter blob");
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  if (count != store.size())
    throw FormatError("'" + path + "' holds " + std::to_string(count) + " parameters, model expects " +
                      std::to_string(store.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string name(len, '\0');
    in.read(name.data(), len);
    std::uint64_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&cols), sizeof cols);
    if (!in) throw FormatError("'" + path + "' is truncated");
    auto& p = store[store.index_of(name)];
    if (static_cast<std::uint64_t>(p.value.rows()) != rows || static_cast<std::uint64_t>(p.value.cols()) != cols)
      throw FormatError("shape mismatch for '" + name + "' in '" + path + "'");
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      float v = 0;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      p.value.data()[k] = static_cast<T>(v);
    }
    if (!in) throw FormatError("'" + path + "' is truncated");
  }
}

// JSON manifest written next to each parameter blob.
struct CheckpointManifest {
  std::string kind;  // encoder, decoder, answer_extractor, question_generator, qa
  nlohmann::json model_config;
  nlohmann::json train_config;
  nlohmann::json extra = nlohmann::json::object();
  std::uint64_t vocab_hash = 0;
  std::size_t step = 0;

  nlohmann::json to_json() const {
    return {{"kind", kind},           {"model_config", model_config}, {"train_config", train_config},
            {"vocab_hash", hex64(vocab_hash)}, {"step", step},          {"extra", extra}};
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write manifest '" + path + "'");
    out << to_json().dump(2) << '\n';
  }

  static CheckpointManifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
      CheckpointManifest m;
      m.kind = j.at("kind").get<std::string>();
      m.model_config = j.at("model_config");
      m.train_config = j.at("train_config");
      m.extra = j.value("extra", nlohmann::json::object());
      m.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
      m.step = j.at("step").get<std::size_t>();
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("'" + path + "': " + e.what());
    }
  }

  void verify_vocab(std::uint64_t expected) const {
    if (vocab_hash != expected)
      throw IntegrityError("checkpoint vocab hash " + hex64(vocab_hash) + " does not match vocabulary " + hex64(expected));
  }
};

}  // namespace synthqa::nn
