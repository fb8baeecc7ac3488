#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "synthqa/common.hpp"

namespace synthqa::nn {

struct SamplingConfig {
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
  std::uint64_t seed = 0;

  void validate() const {
    if (top_k && *top_k < 1) throw ParameterError("top_k must be at least 1");
    if (top_p && (*top_p <= 0.0 || *top_p > 1.0)) throw ParameterError("top_p must lie in (0, 1]");
    if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
    if (!top_k && !top_p) throw ParameterError("open-ended sampling needs top_k or top_p");
  }
};

inline constexpr double kSimplexTolerance = 1e-6;

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw ParameterError("softmax needs at least one finite logit");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::isinf(logits[i]) ? 0.0 : std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

inline void check_simplex(std::span<const double> probs) {
  if (probs.empty()) throw ParameterError("empty probability vector");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ParameterError("probabilities must be finite and non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance) throw ParameterError("probabilities do not sum to 1");
}

// Indices sorted by descending value, ties broken by lower index.
inline std::vector<std::size_t> descending_order(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

// Keeps the k largest logits; the rest become -inf.
inline std::vector<double> top_k_filter(std::span<const double> logits, std::size_t k) {
  if (k < 1) throw ParameterError("top_k_filter needs k >= 1");
  std::vector<double> out(logits.begin(), logits.end());
  if (k >= logits.size()) return out;
  const auto order = descending_order(logits);
  for (std::size_t r = k; r < order.size(); ++r) out[order[r]] = -std::numeric_limits<double>::infinity();
  return out;
}

// Smallest descending-probability prefix whose mass reaches p.
inline std::vector<std::size_t> nucleus_filter(std::span<const double> probs, double p) {
  check_simplex(probs);
  if (!(p > 0.0) || p > 1.0) throw ParameterError("nucleus mass must lie in (0, 1]");
  const auto order = descending_order(probs);
  if (p >= 1.0) return order;
  std::vector<std::size_t> support;
  double mass = 0.0;
  for (auto i : order) {
    support.push_back(i);
    mass += probs[i];
    if (mass >= p) break;
  }
  return support;
}

inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  check_simplex(probs);
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

// Temperature, then top-k, then softmax, then nucleus truncation and
// renormalization, then a categorical draw. `banned` ids never get sampled.
inline std::size_t sample_next(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng,
                               std::span<const int> banned = {}) {
  std::vector<double> z(logits.begin(), logits.end());
  for (int b : banned)
    if (b >= 0 && static_cast<std::size_t>(b) < z.size()) z[static_cast<std::size_t>(b)] = -std::numeric_limits<double>::infinity();
  for (auto& v : z) v /= cfg.temperature;
  if (cfg.top_k) z = top_k_filter(z, *cfg.top_k);
  std::vector<double> probs = softmax(z);
  if (cfg.top_p && *cfg.top_p < 1.0) {
    const auto support = nucleus_filter(probs, *cfg.top_p);
    std::vector<double> kept(probs.size(), 0.0);
    double mass = 0.0;
    for (auto i : support) mass += probs[i];
    for (auto i : support) kept[i] = probs[i] / mass;
    probs = std::move(kept);
  }
  return sample_categorical(probs, rng);
}

}  // namespace synthqa::nn
