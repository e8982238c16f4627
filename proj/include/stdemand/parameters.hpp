#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stdemand/common.hpp"

namespace stdemand {

/// A named learnable tensor. Vectors (rank 1) are stored as 1 x n matrices.
template <typename Scalar>
struct Tensor {
  std::string name;
  Mat<Scalar> value;
  std::uint8_t rank = 2;
};

/// Ordered collection of named tensors. Iteration order is insertion order and defines the checkpoint layout.
template <typename Scalar>
class Parameters {
 public:
  Mat<Scalar>& add(std::string name, Eigen::Index rows, Eigen::Index cols, std::uint8_t rank = 2) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), Mat<Scalar>::Zero(rows, cols), rank});
    return tensors_.back().value;
  }

  Mat<Scalar>& operator[](std::string_view name) { return tensors_[lookup(name)].value; }
  const Mat<Scalar>& operator[](std::string_view name) const { return tensors_[lookup(name)].value; }
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t size() const { return tensors_.size(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  Tensor<Scalar>& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor<Scalar>& tensor(std::size_t i) const { return tensors_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
  }

  Parameters zeros_like() const {
    Parameters out;
    for (const auto& t : tensors_) out.add(t.name, t.value.rows(), t.value.cols(), t.rank);
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) t.value.setZero();
  }

  template <typename Other>
  Parameters<Other> cast() const {
    Parameters<Other> out;
    for (const auto& t : tensors_) out.add(t.name, t.value.rows(), t.value.cols(), t.rank) = t.value.template cast<Other>();
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      if (!t.value.allFinite()) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("unknown parameter " + std::string(name));
    return it->second;
  }

  std::vector<Tensor<Scalar>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace stdemand
