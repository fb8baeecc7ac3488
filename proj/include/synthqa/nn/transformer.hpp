#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/nn/graph.hpp"

namespace synthqa::nn {

struct ModelConfig {
  std::size_t hidden = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t max_seq_len = 256;
  std::size_t vocab_size = 0;
  std::size_t n_segment_types = 2;
  double dropout = 0.1;

  void validate() const {
    if (hidden == 0 || layers == 0 || heads == 0 || max_seq_len == 0 || vocab_size == 0 || n_segment_types == 0)
      throw ConfigError("model dimensions must be positive");
    if (hidden % heads != 0) throw ConfigError("hidden size must be divisible by the number of heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"hidden", hidden}, {"layers", layers}, {"heads", heads}, {"max_seq_len", max_seq_len},
            {"vocab_size", vocab_size}, {"n_segment_types", n_segment_types}, {"dropout", dropout}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_segment_types = j.at("n_segment_types").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Padded batch of token sequences, sequence-major rows.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> positions;
  std::vector<unsigned char> valid;

  std::size_t row(std::size_t b, std::size_t i) const { return b * length + i; }
};

struct SequenceInput {
  std::vector<int> ids;
  std::vector<int> segments;
};

inline TokenBatch make_batch(std::span<const SequenceInput* const> seqs, int pad_id = 0) {
  TokenBatch tb;
  tb.batch = seqs.size();
  for (const auto* s : seqs) tb.length = std::max(tb.length, s->ids.size());
  const std::size_t n = tb.batch * tb.length;
  tb.ids.assign(n, pad_id);
  tb.segments.assign(n, 0);
  tb.positions.resize(n);
  tb.valid.assign(n, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const auto& s = *seqs[b];
    if (s.segments.size() != s.ids.size()) throw ParameterError("segment ids must parallel token ids");
    for (std::size_t i = 0; i < tb.length; ++i) {
      const auto r = tb.row(b, i);
      tb.positions[r] = static_cast<int>(i);
      if (i < s.ids.size()) {
        tb.ids[r] = s.ids[i];
        tb.segments[r] = s.segments[i];
        tb.valid[r] = 1;
      }
    }
  }
  return tb;
}

inline TokenBatch make_batch(const SequenceInput& seq) {
  const SequenceInput* p = &seq;
  return make_batch(std::span<const SequenceInput* const>(&p, 1));
}

struct LayerWeights {
  std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
};

struct TransformerWeights {
  std::size_t tok = 0, pos = 0, seg = 0;
  std::vector<LayerWeights> layers;
  std::size_t lnf_g = 0, lnf_b = 0;
};

template <class T>
TransformerWeights add_transformer(ParameterStore<T>& store, const ModelConfig& c, Rng& rng) {
  c.validate();
  const auto h = static_cast<Eigen::Index>(c.hidden);
  TransformerWeights w;
  w.tok = store.add("embed.token", static_cast<Eigen::Index>(c.vocab_size), h, Init::normal, rng);
  w.pos = store.add("embed.position", static_cast<Eigen::Index>(c.max_seq_len), h, Init::normal, rng);
  w.seg = store.add("embed.segment", static_cast<Eigen::Index>(c.n_segment_types), h, Init::normal, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights lw{};
    lw.ln1_g = store.add(p + "ln1.gain", 1, h, Init::ones, rng);
    lw.ln1_b = store.add(p + "ln1.bias", 1, h, Init::zeros, rng);
    lw.w_qkv = store.add(p + "attn.qkv.weight", h, 3 * h, Init::normal, rng);
    lw.b_qkv = store.add(p + "attn.qkv.bias", 1, 3 * h, Init::zeros, rng);
    lw.w_o = store.add(p + "attn.out.weight", h, h, Init::normal, rng);
    lw.b_o = store.add(p + "attn.out.bias", 1, h, Init::zeros, rng);
    lw.ln2_g = store.add(p + "ln2.gain", 1, h, Init::ones, rng);
    lw.ln2_b = store.add(p + "ln2.bias", 1, h, Init::zeros, rng);
    lw.w_1 = store.add(p + "mlp.fc.weight", h, 4 * h, Init::normal, rng);
    lw.b_1 = store.add(p + "mlp.fc.bias", 1, 4 * h, Init::zeros, rng);
    lw.w_2 = store.add(p + "mlp.proj.weight", 4 * h, h, Init::normal, rng);
    lw.b_2 = store.add(p + "mlp.proj.bias", 1, h, Init::zeros, rng);
    w.layers.push_back(lw);
  }
  w.lnf_g = store.add("final_ln.gain", 1, h, Init::ones, rng);
  w.lnf_b = store.add("final_ln.bias", 1, h, Init::zeros, rng);
  return w;
}

inline void check_batch(const TokenBatch& tb, const ModelConfig& c) {
  if (tb.length > c.max_seq_len)
    throw LengthError("sequence of length " + std::to_string(tb.length) + " exceeds max_seq_len " +
                      std::to_string(c.max_seq_len));
  for (auto s : tb.segments)
    if (s < 0 || static_cast<std::size_t>(s) >= c.n_segment_types)
      throw ParameterError("segment id " + std::to_string(s) + " outside [0, " + std::to_string(c.n_segment_types) + ")");
  for (auto id : tb.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
}

// Pre-norm transformer stack. Returns final-layer-normed states, one row per
// batch position.
template <class T>
typename Graph<T>::Var transformer_forward(Graph<T>& g, ParameterStore<T>& store, const TransformerWeights& w,
                                           const ModelConfig& c, const TokenBatch& tb, bool causal) {
  check_batch(tb, c);
  using Var = typename Graph<T>::Var;
  Var x = g.add(g.embedding(g.param(store[w.tok]), tb.ids), g.embedding(g.param(store[w.pos]), tb.positions));
  x = g.add(x, g.embedding(g.param(store[w.seg]), tb.segments));
  x = g.dropout(x, c.dropout);
  AttentionLayout layout{tb.batch, tb.length, c.heads, causal, tb.valid};
  for (const auto& lw : w.layers) {
    Var h = g.layer_norm(x, g.param(store[lw.ln1_g]), g.param(store[lw.ln1_b]));
    Var qkv = g.linear(h, g.param(store[lw.w_qkv]), g.param(store[lw.b_qkv]));
    Var a = g.attention(qkv, layout);
    a = g.linear(a, g.param(store[lw.w_o]), g.param(store[lw.b_o]));
    x = g.add(x, g.dropout(a, c.dropout));
    h = g.layer_norm(x, g.param(store[lw.ln2_g]), g.param(store[lw.ln2_b]));
    Var m = g.gelu(g.linear(h, g.param(store[lw.w_1]), g.param(store[lw.b_1])));
    m = g.linear(m, g.param(store[lw.w_2]), g.param(store[lw.b_2]));
    x = g.add(x, g.dropout(m, c.dropout));
  }
  return g.layer_norm(x, g.param(store[w.lnf_g]), g.param(store[w.lnf_b]));
}

// Bidirectional encoder. Extra heads built on top of it append their own
// parameters to `store` after the transformer entries.
template <class T>
struct EncoderModel {
  ModelConfig config;
  ParameterStore<T> store;
  TransformerWeights weights;
  std::size_t num_encoder_params = 0;

  static EncoderModel create(const ModelConfig& c, std::uint64_t seed) {
    EncoderModel m;
    m.config = c;
    Rng rng(mix_seed({seed, 0xE4C0DEULL}));
    m.weights = add_transformer(m.store, c, rng);
    m.num_encoder_params = m.store.size();
    return m;
  }

  typename Graph<T>::Var forward(Graph<T>& g, const TokenBatch& tb) {
    return transformer_forward(g, store, weights, config, tb, false);
  }

  // The encoder without any head parameters.
  EncoderModel stripped() const {
    EncoderModel m = *this;
    m.store.truncate(num_encoder_params);
    return m;
  }
};

// Per-token hidden states (length x H) in eval mode. Positions where
// pad_mask is 0 are treated as padding.
template <class T>
Matrix<T> encoder_forward(EncoderModel<T>& model, const std::vector<int>& ids, const std::vector<int>& segments,
                          const std::vector<unsigned char>& pad_mask) {
  if (ids.size() != segments.size() || ids.size() != pad_mask.size())
    throw ParameterError("ids, segments and mask must have equal length");
  SequenceInput s{ids, segments};
  TokenBatch tb = make_batch(s);
  tb.valid = pad_mask;
  Graph<T> g(false);
  auto out = model.forward(g, tb);
  return g.value(out);
}

// Causal decoder with a language-model head.
template <class T>
struct DecoderModel {
  ModelConfig config;
  ParameterStore<T> store;
  TransformerWeights weights;
  std::size_t lm_w = 0, lm_b = 0;

  static DecoderModel create(const ModelConfig& c, std::uint64_t seed) {
    DecoderModel m;
    m.config = c;
    Rng rng(mix_seed({seed, 0xDEC0DEULL}));
    m.weights = add_transformer(m.store, c, rng);
    m.lm_w = m.store.add("lm_head.weight", static_cast<Eigen::Index>(c.hidden), static_cast<Eigen::Index>(c.vocab_size),
                         Init::normal, rng);
    m.lm_b = m.store.add("lm_head.bias", 1, static_cast<Eigen::Index>(c.vocab_size), Init::zeros, rng);
    return m;
  }

  // Next-token logits for every batch row.
  typename Graph<T>::Var forward(Graph<T>& g, const TokenBatch& tb) {
    auto h = transformer_forward(g, store, weights, config, tb, true);
    return g.linear(h, g.param(store[lm_w]), g.param(store[lm_b]));
  }
};

// Next-token logits per position (length x vocab) in eval mode.
template <class T>
Matrix<T> decoder_forward(DecoderModel<T>& model, const std::vector<int>& ids, const std::vector<int>& segments) {
  SequenceInput s{ids, segments};
  Graph<T> g(false);
  auto out = model.forward(g, make_batch(s));
  return g.value(out);
}

// Key/value cache for incremental decoding.
template <class T>
struct DecoderCache {
  std::vector<Matrix<T>> keys;    // per layer, max_seq_len x H
  std::vector<Matrix<T>> values;  // per layer, max_seq_len x H
  std::size_t length = 0;
};

// Appends tokens to the cache and returns the logits after the last one.
// Equivalent to decoder_forward on the full prefix, row for row.
template <class T>
RowVector<T> decoder_append(const DecoderModel<T>& model, DecoderCache<T>& cache, std::span<const int> ids,
                            std::span<const int> segments) {
  const auto& c = model.config;
  const auto& st = model.store;
  const auto& w = model.weights;
  const auto m = static_cast<Eigen::Index>(ids.size());
  if (m == 0) throw ParameterError("decoder_append needs at least one token");
  if (cache.length + ids.size() > c.max_seq_len)
    throw LengthError("incremental decode would exceed max_seq_len " + std::to_string(c.max_seq_len));
  const auto hidden = static_cast<Eigen::Index>(c.hidden);
  if (cache.keys.empty()) {
    cache.keys.assign(c.layers, Matrix<T>::Zero(static_cast<Eigen::Index>(c.max_seq_len), hidden));
    cache.values.assign(c.layers, Matrix<T>::Zero(static_cast<Eigen::Index>(c.max_seq_len), hidden));
  }
  const auto start = static_cast<Eigen::Index>(cache.length);
  Matrix<T> x(m, hidden);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    const int sg = segments[static_cast<std::size_t>(i)];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) throw RangeError("token id outside vocabulary");
    if (sg < 0 || static_cast<std::size_t>(sg) >= c.n_segment_types) throw ParameterError("segment id outside range");
    x.row(i) = st[w.tok].value.row(id) + st[w.pos].value.row(start + i) + st[w.seg].value.row(sg);
  }
  const auto heads = static_cast<Eigen::Index>(c.heads);
  const Eigen::Index d = hidden / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const Eigen::Index total = start + m;
  Matrix<T> h, a(m, hidden);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    layer_norm_rows<T>(x, st[lw.ln1_g].value, st[lw.ln1_b].value, h);
    Matrix<T> qkv = (h * st[lw.w_qkv].value).rowwise() + st[lw.b_qkv].value.row(0);
    cache.keys[l].block(start, 0, m, hidden) = qkv.block(0, hidden, m, hidden);
    cache.values[l].block(start, 0, m, hidden) = qkv.block(0, 2 * hidden, m, hidden);
    for (Eigen::Index hd = 0; hd < heads; ++hd) {
      auto q = qkv.block(0, hd * d, m, d);
      auto k = cache.keys[l].block(0, hd * d, total, d);
      auto v = cache.values[l].block(0, hd * d, total, d);
      Matrix<T> s = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index visible = start + i + 1;
        const T mx = s.row(i).head(visible).maxCoeff();
        T sum = 0;
        for (Eigen::Index j = 0; j < total; ++j) {
          const T e = j < visible ? std::exp(s(i, j) - mx) : T(0);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      a.block(0, hd * d, m, d).noalias() = s * v;
    }
    x += (a * st[lw.w_o].value).rowwise() + st[lw.b_o].value.row(0);
    layer_norm_rows<T>(x, st[lw.ln2_g].value, st[lw.ln2_b].value, h);
    Matrix<T> f = (h * st[lw.w_1].value).rowwise() + st[lw.b_1].value.row(0);
    gelu_inplace(f);
    x += (f * st[lw.w_2].value).rowwise() + st[lw.b_2].value.row(0);
  }
  cache.length += ids.size();
  Matrix<T> last = x.row(m - 1);
  layer_norm_rows<T>(last, st[w.lnf_g].value, st[w.lnf_b].value, h);
  return h.row(0) * st[model.lm_w].value + st[model.lm_b].value.row(0);
}

}  // namespace synthqa::nn
