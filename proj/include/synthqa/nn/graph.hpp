#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "synthqa/nn/tensor.hpp"

namespace synthqa::nn {

// Row-wise layer normalization shared by the tape and the incremental decoder.
template <class T>
inline constexpr T kLayerNormEps = static_cast<T>(1e-5);

template <class T>
void layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& y,
                     Matrix<T>* xhat_out = nullptr, RowVector<T>* rstd_out = nullptr) {
  const Eigen::Index n = x.rows(), h = x.cols();
  y.resize(n, h);
  if (xhat_out) xhat_out->resize(n, h);
  if (rstd_out) rstd_out->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + kLayerNormEps<T>);
    auto xhat = ((x.row(i).array() - mean) * rstd).matrix();
    y.row(i) = (xhat.array() * gain.row(0).array() + bias.row(0).array()).matrix();
    if (xhat_out) xhat_out->row(i) = xhat;
    if (rstd_out) (*rstd_out)(i) = rstd;
  }
}

template <class T>
inline T gelu(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  const T inner = k * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * static_cast<T>(0.044715) * x * x);
}

template <class T>
void gelu_inplace(Matrix<T>& x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  constexpr T c = static_cast<T>(0.044715);
  x.array() = T(0.5) * x.array() * (T(1) + (k * (x.array() + c * x.array().cube())).tanh());
}

// Masking shape for the fused attention op. Rows are laid out sequence-major:
// row b*length + i is position i of sequence b.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t length = 0;
  std::size_t heads = 1;
  bool causal = false;
  std::vector<unsigned char> valid;  // batch*length; 0 marks padding keys
};

// A scored group for group_nll: softmax over scores[begin, end), target is an
// absolute index into the score vector.
struct ScoreGroup {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t target = 0;
};

// Reverse-mode tape. Nodes are created by ops in topological order; backward()
// replays them in reverse. Parameter gradients accumulate into the store.
template <class T>
class Graph {
 public:
  struct Var {
    int id = -1;
  };

  explicit Graph(bool training = false, Rng* rng = nullptr) : training_(training), rng_(rng) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }

  Var input(Matrix<T> m) {
    auto& n = push();
    n.value = std::move(m);
    return last();
  }

  Var param(Parameter<T>& p) {
    auto& n = push();
    n.param = &p;
    n.requires_grad = true;
    return last();
  }

  const Matrix<T>& value(Var v) const {
    const auto& n = *nodes_[static_cast<std::size_t>(v.id)];
    return n.param ? n.param->value : n.value;
  }

  T scalar(Var v) const { return value(v)(0, 0); }

  void backward(Var loss) {
    auto& root = *nodes_[static_cast<std::size_t>(loss.id)];
    if (!root.requires_grad) return;
    grad(loss.id) = Matrix<T>::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = *nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.requires_grad && n.grad.size() > 0) n.backward();
    }
  }

  // --- elementwise / linear ---------------------------------------------

  Var matmul(Var a, Var b) {
    Matrix<T> out = value(a) * value(b);
    return make(std::move(out), {a, b}, [this, a, b, self = next_id()]() {
      const auto& g = grad(self);
      if (needs(a)) grad(a).noalias() += g * value(b).transpose();
      if (needs(b)) grad(b).noalias() += value(a).transpose() * g;
    });
  }

  Var add(Var a, Var b) {
    Matrix<T> out = value(a) + value(b);
    return make(std::move(out), {a, b}, [this, a, b, self = next_id()]() {
      const auto& g = grad(self);
      if (needs(a)) grad(a) += g;
      if (needs(b)) grad(b) += g;
    });
  }

  // a (n x m) + bias (1 x m) broadcast over rows.
  Var add_bias(Var a, Var bias) {
    Matrix<T> out = value(a).rowwise() + value(bias).row(0);
    return make(std::move(out), {a, bias}, [this, a, bias, self = next_id()]() {
      const auto& g = grad(self);
      if (needs(a)) grad(a) += g;
      if (needs(bias)) grad(bias) += g.colwise().sum();
    });
  }

  Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

  Var scale(Var a, T c) {
    Matrix<T> out = value(a) * c;
    return make(std::move(out), {a}, [this, a, c, self = next_id()]() {
      if (needs(a)) grad(a) += grad(self) * c;
    });
  }

  Var gelu(Var a) {
    const auto& x = value(a);
    constexpr T k = static_cast<T>(0.7978845608028654);
    constexpr T c = static_cast<T>(0.044715);
    Matrix<T> t = (k * (x.array() + c * x.array().cube())).tanh().matrix();
    Matrix<T> out = (T(0.5) * x.array() * (T(1) + t.array())).matrix();
    return make(std::move(out), {a}, [this, a, t = std::move(t), self = next_id()]() {
      if (!needs(a)) return;
      constexpr T k = static_cast<T>(0.7978845608028654);
      constexpr T c = static_cast<T>(0.044715);
      const auto x = value(a).array();
      const auto tt = t.array();
      grad(a).array() += grad(self).array() *
                         (T(0.5) * (T(1) + tt) + T(0.5) * x * (T(1) - tt.square()) * k * (T(1) + T(3) * c * x.square()));
    });
  }

  Var relu(Var a) {
    Matrix<T> out = value(a).cwiseMax(T(0));
    return make(std::move(out), {a}, [this, a, self = next_id()]() {
      if (!needs(a)) return;
      grad(a).array() += grad(self).array() * (value(a).array() > T(0)).template cast<T>();
    });
  }

  Var dropout(Var a, double rate) {
    if (!training_ || rate <= 0.0) return a;
    if (!rng_) throw ParameterError("dropout in training mode needs an rng");
    const auto& x = value(a);
    Matrix<T> mask(x.rows(), x.cols());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng_->uniform() < rate ? T(0) : keep_scale;
    Matrix<T> out = x.cwiseProduct(mask);
    return make(std::move(out), {a}, [this, a, mask = std::move(mask), self = next_id()]() {
      if (needs(a)) grad(a) += grad(self).cwiseProduct(mask);
    });
  }

  Var layer_norm(Var x, Var gain, Var bias) {
    Matrix<T> y, xhat;
    RowVector<T> rstd;
    layer_norm_rows<T>(value(x), value(gain), value(bias), y, &xhat, &rstd);
    return make(std::move(y), {x, gain, bias},
                [this, x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), self = next_id()]() {
                  const auto& g = grad(self);
                  if (needs(gain)) grad(gain) += g.cwiseProduct(xhat).colwise().sum();
                  if (needs(bias)) grad(bias) += g.colwise().sum();
                  if (!needs(x)) return;
                  const auto& gv = value(gain);
                  auto& gx = grad(x);
                  const T inv_h = T(1) / static_cast<T>(xhat.cols());
                  for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                    RowVector<T> dxhat = g.row(i).cwiseProduct(gv.row(0));
                    const T m1 = dxhat.sum() * inv_h;
                    const T m2 = dxhat.dot(xhat.row(i)) * inv_h;
                    gx.row(i).array() += rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
                  }
                });
  }

  // --- gathers ------------------------------------------------------------

  // Rows of an embedding table.
  Var embedding(Var table, std::span<const int> ids) {
    const auto& tv = value(table);
    Matrix<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tv.rows()) throw RangeError("embedding index " + std::to_string(ids[i]) + " out of range");
      out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make(std::move(out), {table}, [this, table, idx = std::move(idx), self = next_id()]() {
      if (!needs(table)) return;
      const auto& g = grad(self);
      auto& gt = grad(table);
      for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  Var gather_rows(Var x, std::span<const int> rows) { return embedding(x, rows); }

  // Picks x(row, col) for each pair into a 1 x P vector.
  Var select(Var x, std::vector<std::pair<int, int>> cells) {
    const auto& xv = value(x);
    Matrix<T> out(1, static_cast<Eigen::Index>(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) out(0, static_cast<Eigen::Index>(i)) = xv(cells[i].first, cells[i].second);
    return make(std::move(out), {x}, [this, x, cells = std::move(cells), self = next_id()]() {
      if (!needs(x)) return;
      const auto& g = grad(self);
      auto& gx = grad(x);
      for (std::size_t i = 0; i < cells.size(); ++i) gx(cells[i].first, cells[i].second) += g(0, static_cast<Eigen::Index>(i));
    });
  }

  // --- attention ----------------------------------------------------------

  // Multi-head scaled dot-product attention over a fused [Q | K | V] matrix
  // of shape (batch*length) x 3H. Returns (batch*length) x H.
  Var attention(Var qkv, const AttentionLayout& layout) {
    const auto& x = value(qkv);
    const Eigen::Index hidden = x.cols() / 3;
    const auto heads = static_cast<Eigen::Index>(layout.heads);
    const Eigen::Index d = hidden / heads;
    const auto len = static_cast<Eigen::Index>(layout.length);
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    Matrix<T> out(x.rows(), hidden);
    std::vector<Matrix<T>> probs(layout.batch * layout.heads);
    for (std::size_t b = 0; b < layout.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
      for (Eigen::Index h = 0; h < heads; ++h) {
        auto q = x.block(r0, h * d, len, d);
        auto k = x.block(r0, hidden + h * d, len, d);
        auto v = x.block(r0, 2 * hidden + h * d, len, d);
        Matrix<T> s = (q * k.transpose()) * scale;
        for (Eigen::Index i = 0; i < len; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j < len; ++j) {
            const bool masked = !layout.valid[static_cast<std::size_t>(r0 + j)] || (layout.causal && j > i);
            if (masked) s(i, j) = -std::numeric_limits<T>::infinity();
            else mx = std::max(mx, s(i, j));
          }
          T sum = 0;
          for (Eigen::Index j = 0; j < len; ++j) {
            const T e = std::isinf(s(i, j)) ? T(0) : std::exp(s(i, j) - mx);
            s(i, j) = e;
            sum += e;
          }
          if (sum > T(0)) s.row(i) /= sum;
        }
        out.block(r0, h * d, len, d).noalias() = s * v;
        probs[b * layout.heads + static_cast<std::size_t>(h)] = std::move(s);
      }
    }
    return make(std::move(out), {qkv}, [this, qkv, probs = std::move(probs), layout, self = next_id()]() {
      if (!needs(qkv)) return;
      const auto& x = value(qkv);
      const auto& g = grad(self);
      auto& gx = grad(qkv);
      const Eigen::Index hidden = x.cols() / 3;
      const auto heads = static_cast<Eigen::Index>(layout.heads);
      const Eigen::Index d = hidden / heads;
      const auto len = static_cast<Eigen::Index>(layout.length);
      const T scale = T(1) / std::sqrt(static_cast<T>(d));
      for (std::size_t b = 0; b < layout.batch; ++b) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
        for (Eigen::Index h = 0; h < heads; ++h) {
          const auto& p = probs[b * layout.heads + static_cast<std::size_t>(h)];
          auto q = x.block(r0, h * d, len, d);
          auto k = x.block(r0, hidden + h * d, len, d);
          auto v = x.block(r0, 2 * hidden + h * d, len, d);
          auto go = g.block(r0, h * d, len, d);
          Matrix<T> dp = go * v.transpose();
          gx.block(r0, 2 * hidden + h * d, len, d).noalias() += p.transpose() * go;
          Matrix<T> ds = p.cwiseProduct(dp);
          for (Eigen::Index i = 0; i < len; ++i) {
            const T row_dot = ds.row(i).sum();
            ds.row(i) -= p.row(i) * row_dot;
          }
          gx.block(r0, h * d, len, d).noalias() += (ds * k) * scale;
          gx.block(r0, hidden + h * d, len, d).noalias() += (ds.transpose() * q) * scale;
        }
      }
    });
  }

  // --- losses ---------------------------------------------------------------

  // Mean token cross-entropy; rows whose target is negative are ignored.
  Var cross_entropy(Var logits, std::vector<int> targets) {
    const auto& z = value(logits);
    if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw ParameterError("cross_entropy target count mismatch");
    Matrix<T> probs(z.rows(), z.cols());
    T total = 0;
    std::size_t count = 0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int t = targets[static_cast<std::size_t>(i)];
      if (t < 0) {
        probs.row(i).setZero();
        continue;
      }
      const T mx = z.row(i).maxCoeff();
      probs.row(i) = (z.row(i).array() - mx).exp().matrix();
      const T sum = probs.row(i).sum();
      probs.row(i) /= sum;
      total += -(z(i, t) - mx - std::log(sum));
      ++count;
    }
    Matrix<T> out(1, 1);
    out(0, 0) = count ? total / static_cast<T>(count) : T(0);
    return make(std::move(out), {logits},
                [this, logits, targets = std::move(targets), probs = std::move(probs), count, self = next_id()]() {
                  if (!needs(logits) || count == 0) return;
                  const T g = grad(self)(0, 0) / static_cast<T>(count);
                  auto& gz = grad(logits);
                  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
                    const int t = targets[static_cast<std::size_t>(i)];
                    if (t < 0) continue;
                    gz.row(i) += probs.row(i) * g;
                    gz(i, t) -= g;
                  }
                });
  }

  // Joint span scores: for each (s, e) row pair, w2 . relu(A[s] + B[e] + b1).
  // A and B are the start/end projections of the encoder states.
  Var pair_scores(Var a, Var b, Var b1, Var w2, std::vector<std::pair<int, int>> pairs) {
    const auto& av = value(a);
    const auto& bv = value(b);
    const auto& b1v = value(b1);
    const auto& w2v = value(w2);
    Matrix<T> out(1, static_cast<Eigen::Index>(pairs.size()));
    RowVector<T> z(av.cols());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      z = av.row(pairs[i].first) + bv.row(pairs[i].second) + b1v.row(0);
      out(0, static_cast<Eigen::Index>(i)) = z.cwiseMax(T(0)).dot(w2v.col(0).transpose());
    }
    return make(std::move(out), {a, b, b1, w2}, [this, a, b, b1, w2, pairs = std::move(pairs), self = next_id()]() {
      const auto& g = grad(self);
      const auto& av = value(a);
      const auto& bv = value(b);
      const auto& b1v = value(b1);
      const auto& w2v = value(w2);
      RowVector<T> z(av.cols()), gz(av.cols());
      RowVector<T> gb1 = RowVector<T>::Zero(av.cols());
      RowVector<T> gw2 = RowVector<T>::Zero(av.cols());
      Matrix<T>* ga = needs(a) ? &grad(a) : nullptr;
      Matrix<T>* gb = needs(b) ? &grad(b) : nullptr;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const T gi = g(0, static_cast<Eigen::Index>(i));
        if (gi == T(0)) continue;
        z = av.row(pairs[i].first) + bv.row(pairs[i].second) + b1v.row(0);
        gw2 += z.cwiseMax(T(0)) * gi;
        gz = ((z.array() > T(0)).template cast<T>() * w2v.col(0).transpose().array() * gi).matrix();
        if (ga) ga->row(pairs[i].first) += gz;
        if (gb) gb->row(pairs[i].second) += gz;
        gb1 += gz;
      }
      if (needs(b1)) grad(b1).row(0) += gb1;
      if (needs(w2)) grad(w2).col(0) += gw2.transpose();
    });
  }

  // Mean over groups of -log softmax(scores[begin, end))[target].
  Var group_nll(Var scores, std::vector<ScoreGroup> groups) {
    const auto& sv = value(scores);
    Matrix<T> probs = Matrix<T>::Zero(1, sv.cols());
    T total = 0;
    for (const auto& gr : groups) {
      if (gr.end <= gr.begin || gr.target < gr.begin || gr.target >= gr.end)
        throw ParameterError("group_nll target outside its group");
      const auto b = static_cast<Eigen::Index>(gr.begin);
      const auto n = static_cast<Eigen::Index>(gr.end - gr.begin);
      const T mx = sv.row(0).segment(b, n).maxCoeff();
      auto e = (sv.row(0).segment(b, n).array() - mx).exp();
      const T sum = e.sum();
      probs.row(0).segment(b, n) = (e / sum).matrix();
      total += -(sv(0, static_cast<Eigen::Index>(gr.target)) - mx - std::log(sum));
    }
    Matrix<T> out(1, 1);
    out(0, 0) = groups.empty() ? T(0) : total / static_cast<T>(groups.size());
    return make(std::move(out), {scores},
                [this, scores, groups = std::move(groups), probs = std::move(probs), self = next_id()]() {
                  if (!needs(scores) || groups.empty()) return;
                  const T g = grad(self)(0, 0) / static_cast<T>(groups.size());
                  auto& gs = grad(scores);
                  for (const auto& gr : groups) {
                    const auto b = static_cast<Eigen::Index>(gr.begin);
                    const auto n = static_cast<Eigen::Index>(gr.end - gr.begin);
                    gs.row(0).segment(b, n) += probs.row(0).segment(b, n) * g;
                    gs(0, static_cast<Eigen::Index>(gr.target)) -= g;
                  }
                });
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Node& push() {
    nodes_.push_back(std::make_unique<Node>());
    return *nodes_.back();
  }

  Var last() const { return Var{static_cast<int>(nodes_.size()) - 1}; }
  int next_id() const { return static_cast<int>(nodes_.size()); }

  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]->requires_grad; }

  Matrix<T>& grad(Var v) { return grad(v.id); }

  Matrix<T>& grad(int id) {
    auto& n = *nodes_[static_cast<std::size_t>(id)];
    if (n.param) return n.param->grad;
    if (n.grad.size() == 0) n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var make(Matrix<T> value, std::initializer_list<Var> inputs, std::function<void()> back) {
    bool req = false;
    for (auto v : inputs) req = req || needs(v);
    auto& n = push();
    n.value = std::move(value);
    n.requires_grad = req;
    if (req) n.backward = std::move(back);
    return last();
  }

  std::vector<std::unique_ptr<Node>> nodes_;
  bool training_;
  Rng* rng_;
};

}  // namespace synthqa::nn
