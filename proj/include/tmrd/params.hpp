#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tmrd/tensor.hpp"

namespace tmrd {

// Ordered, name-addressed collection of weight tensors for one model.
// Teacher and student sets stay shape-aligned for the whole run.
class ParameterSet {
 public:
  void add(std::string name, Tensor t);
  bool has(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  ParameterSet clone() const;  // deep copy of data, gradients dropped

  void set_requires_grad(bool flag);
  void zero_grads();
  // theta <- theta - lr * grad, materialized as fresh tensors
  void sgd_step(double lr);

  std::uint64_t content_hash() const;  // FNV-1a over names, shapes, raw bytes

  static void check_aligned(const ParameterSet& a, const ParameterSet& b, const char* context);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Per-layer scaling coefficients, one per leading-axis index of the aligned
// parameter tensor (or a single coefficient per tensor in scalar mode).
// Coefficients are clamped to [kOmegaFloor, 1].
class ScalingSet {
 public:
  static constexpr double kOmegaFloor = 1e-4;

  static ScalingSet ones_like(const ParameterSet& params, bool per_tensor = false);

  bool per_tensor() const { return per_tensor_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, std::vector<double>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, std::vector<double>>>& entries() { return entries_; }
  std::vector<double>& at(const std::string& name);
  const std::vector<double>& at(const std::string& name) const;

  void clamp();
  void fill(double value);

  static void check_aligned(const ScalingSet& omega, const ParameterSet& params, const char* context);

 private:
  bool per_tensor_ = false;
  std::vector<std::pair<std::string, std::vector<double>>> entries_;
};

}  // namespace tmrd
