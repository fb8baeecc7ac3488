#pragma once

#include <Eigen/Dense>
#include <string>
#include <unordered_map>
#include <vector>

#include "synthqa/common.hpp"

namespace synthqa::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class Init { normal, zeros, ones };

inline constexpr double kInitStddev = 0.02;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = true;  // subject to weight decay
};

// Ordered, name-addressable set of parameters. Models refer to entries by
// index so a copied store stays self-consistent.
template <class T>
class ParameterStore {
 public:
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng) {
    if (index_.count(name)) throw ParameterError("duplicate parameter '" + name + "'");
    Parameter<T> p;
    p.name = name;
    p.value.resize(rows, cols);
    switch (init) {
      case Init::normal:
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(rng.normal(0.0, kInitStddev));
        break;
      case Init::zeros: p.value.setZero(); break;
      case Init::ones: p.value.setOnes(); break;
    }
    p.grad = Matrix<T>::Zero(rows, cols);
    p.decay = init == Init::normal && rows > 1;
    params_.push_back(std::move(p));
    index_[name] = params_.size() - 1;
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  std::size_t size() const { return params_.size(); }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParameterError("no parameter named '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  // Drops every parameter added after the first `n`.
  void truncate(std::size_t n) {
    while (params_.size() > n) {
      index_.erase(params_.back().name);
      params_.pop_back();
    }
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  std::vector<Parameter<T>*> pointers() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  // Copies values (not gradients) from a store of another scalar type, by name.
  template <class U>
  void assign_from(const ParameterStore<U>& other) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      const auto& src = other[i];
      auto& dst = params_.at(index_of(src.name));
      if (dst.value.rows() != src.value.rows() || dst.value.cols() != src.value.cols())
        throw ParameterError("shape mismatch for parameter '" + src.name + "'");
      dst.value = src.value.template cast<T>();
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace synthqa::nn
