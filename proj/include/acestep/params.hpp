#pragma once

#include "acestep/autodiff.hpp"
#include "acestep/core.hpp"

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace acestep {

// Deterministic random source. Every stochastic operation takes one of these
// explicitly; there is no hidden global state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  template <typename T>
  Matrix<T> normal_matrix(Index rows, Index cols, double stddev = 1.0) {
    Matrix<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * normal());
    return m;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed for an independent stream identified by (seed, stream, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

// Named parameter tensors with stable addresses. Entries keep insertion order,
// which is also the serialization order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix<T> value;
    bool trainable = true;
  };

  Matrix<T>& add(const std::string& name, Index rows, Index cols, bool trainable = true) {
    require(!index_.contains(name), ErrorKind::kInvalidArgument, "duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{name, Matrix<T>::Zero(rows, cols), trainable});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Matrix<T>& at(const std::string& name) { return entries_[lookup(name)].value; }
  const Matrix<T>& at(const std::string& name) const { return entries_[lookup(name)].value; }

  Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
  const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Total number of scalars, optionally restricted to trainable entries.
  std::size_t scalar_count(bool trainable_only = false) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (!trainable_only || e.trainable) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  bool operator==(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
      if (!(a.value.array() == b.value.array()).all()) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::kInvalidArgument, "unknown parameter '" + name + "'");
    return it->second;
  }

  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
void init_normal(Matrix<T>& m, Rng& rng, double stddev) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
}

// Linear layer weight [out x in] with fan-in scaling.
template <typename T>
void init_linear(Matrix<T>& w, Rng& rng, double gain = 1.0) {
  init_normal(w, rng, gain / std::sqrt(static_cast<double>(w.cols())));
}

// Parameter gradients gathered from a tape, aligned with a store's entries.
template <typename T>
std::vector<Matrix<T>> collect_grads(const Tape<T>& tape, const ParamStore<T>& store) {
  std::vector<Matrix<T>> grads;
  grads.reserve(store.size());
  for (const auto& e : store) {
    const Matrix<T>* g = tape.grad(e.value);
    grads.push_back(g ? *g : Matrix<T>::Zero(e.value.rows(), e.value.cols()));
  }
  return grads;
}

// y = x W^T + b for x [N x in], W [out x in], b [1 x out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row(matmul_nt(x, weight), bias);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight) {
  return matmul_nt(x, weight);
}

}  // namespace acestep
