#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthqa/nn/graph.hpp"

namespace synthqa::nn {

enum class LrSchedule { linear_decay, cosine };

inline const char* to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "linear_decay"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "linear_decay") return LrSchedule::linear_decay;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + s + "'");
}

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr = 3e-4;
  LrSchedule lr_schedule = LrSchedule::linear_decay;
  std::size_t epochs = 1;
  std::size_t warmup_iters = 100;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs

  void validate() const {
    if (batch_size == 0 || !(lr > 0.0) || !(grad_clip_norm > 0.0) || weight_decay < 0.0)
      throw ConfigError("train config needs positive batch size, lr, and grad_clip_norm");
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},       {"lr", lr},
            {"lr_schedule", to_string(lr_schedule)}, {"epochs", epochs},
            {"warmup_iters", warmup_iters},   {"weight_decay", weight_decay},
            {"grad_clip_norm", grad_clip_norm}, {"seed", seed},
            {"max_steps", max_steps}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.lr_schedule = lr_schedule_from_string(j.at("lr_schedule").get<std::string>());
    c.epochs = j.at("epochs").get<std::size_t>();
    c.warmup_iters = j.at("warmup_iters").get<std::size_t>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.max_steps = j.value("max_steps", std::size_t{0});
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline std::size_t total_steps(const TrainConfig& cfg, std::size_t n_examples) {
  const std::size_t per_epoch = (n_examples + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t steps = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) steps = std::min(steps, cfg.max_steps);
  return steps;
}

// Linear warmup to the peak rate, then linear or cosine decay to zero.
inline double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  const std::size_t warm = std::min(cfg.warmup_iters, total);
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const std::size_t rest = total - warm;
  if (rest == 0) return cfg.lr;
  const double frac = static_cast<double>(step - warm) / static_cast<double>(rest);
  if (cfg.lr_schedule == LrSchedule::cosine) return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
  return cfg.lr * (1.0 - frac);
}

// Adam with decoupled weight decay.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseAbs2();
      if (p.decay && wd_ > 0.0) p.value *= static_cast<T>(1.0 - lr * wd_);
      const T step_size = static_cast<T>(lr / c1);
      const T eps = static_cast<T>(eps_);
      const T inv_c2 = static_cast<T>(1.0 / c2);
      p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Matrix<T>> m_, v_;
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

template <class T>
double global_grad_norm(std::span<Parameter<T>* const> params) {
  double sq = 0.0;
  for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  return std::sqrt(sq);
}

// Rescales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
template <class T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  const double norm = global_grad_norm<T>(params);
  if (norm > max_norm && norm > 0.0) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto* p : params) p->grad *= f;
  }
  return norm;
}

struct TrainReport {
  std::vector<double> loss;            // per step
  std::vector<double> grad_norm;       // per step, after clipping
  std::vector<double> raw_grad_norm;   // per step, before clipping
  std::size_t steps = 0;
};

// Mini-batch training. Each epoch shuffles example order with a stream
// derived from (seed, epoch). `loss_fn(graph, batch)` builds the batch loss;
// `on_batch` sees every batch before it is used.
template <class T, class Example, class LossFn>
TrainReport train(std::vector<Parameter<T>*> params, const std::vector<Example>& examples, const TrainConfig& cfg,
                  LossFn&& loss_fn,
                  const std::function<void(std::span<const Example* const>)>& on_batch = {}) {
  cfg.validate();
  TrainReport report;
  if (examples.empty()) throw ParameterError("train needs at least one example");
  const std::size_t total = total_steps(cfg, examples.size());
  if (total == 0) return report;
  AdamW<T> opt(params, cfg.weight_decay);
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed({cfg.seed, epoch, 0x5AFFULL}));
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && step < total; start += cfg.batch_size, ++step) {
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) batch.push_back(&examples[order[i]]);
      if (on_batch) on_batch(std::span<const Example* const>(batch.data(), batch.size()));
      for (auto* p : params) p->grad.setZero();
      Rng dropout_rng(mix_seed({cfg.seed, step, 0xD50FULL}));
      Graph<T> g(true, &dropout_rng);
      auto loss = loss_fn(g, std::span<const Example* const>(batch.data(), batch.size()));
      const double lv = static_cast<double>(g.scalar(loss));
      if (!std::isfinite(lv)) throw DivergedError(step, "non-finite loss");
      g.backward(loss);
      const double raw = clip_grad_norm<T>(params, cfg.grad_clip_norm);
      if (!std::isfinite(raw)) throw DivergedError(step, "non-finite gradient norm");
      report.loss.push_back(lv);
      report.raw_grad_norm.push_back(raw);
      report.grad_norm.push_back(global_grad_norm<T>(params));
      opt.step(learning_rate(cfg, step, total));
    }
  }
  report.steps = step;
  return report;
}

}  // namespace synthqa::nn
