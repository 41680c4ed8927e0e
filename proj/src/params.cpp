#include "tmrd/params.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace tmrd {

void ParameterSet::add(std::string name, Tensor t) {
  if (has(name)) throw std::invalid_argument("ParameterSet: duplicate layer name '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(t));
}

bool ParameterSet::has(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

Tensor& ParameterSet::at(const std::string& name) {
  for (auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("ParameterSet: no layer named '" + name + "'");
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("ParameterSet: no layer named '" + name + "'");
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [name, t] : entries_) {
    out.add(name, Tensor::from_data(t.shape(), t.data()));
  }
  return out;
}

void ParameterSet::set_requires_grad(bool flag) {
  for (auto& [name, t] : entries_) t.set_requires_grad(flag);
}

void ParameterSet::zero_grads() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void ParameterSet::sgd_step(double lr) {
  for (auto& [name, t] : entries_) {
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    std::vector<double> next = t.data();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] -= lr * g[i];
    Tensor fresh = Tensor::from_data(t.shape(), std::move(next));
    fresh.set_requires_grad(t.requires_grad());
    t = fresh;
  }
}

std::uint64_t ParameterSet::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& [name, t] : entries_) {
    mix(name.data(), name.size());
    for (int e : t.shape()) mix(&e, sizeof(e));
    mix(t.data().data(), t.data().size() * sizeof(double));
  }
  return h;
}

void ParameterSet::check_aligned(const ParameterSet& a, const ParameterSet& b, const char* context) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(context) + ": parameter sets have " +
                                std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                                " layers");
  }
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& [an, at] = a.entries_[i];
    const auto& [bn, bt] = b.entries_[i];
    if (an != bn) {
      throw std::invalid_argument(std::string(context) + ": layer name mismatch '" + an +
                                  "' vs '" + bn + "'");
    }
    if (at.shape() != bt.shape()) {
      throw std::invalid_argument(std::string(context) + ": layer '" + an + "' shape " +
                                  shape_str(at.shape()) + " vs " + shape_str(bt.shape()));
    }
  }
}

ScalingSet ScalingSet::ones_like(const ParameterSet& params, bool per_tensor) {
  ScalingSet s;
  s.per_tensor_ = per_tensor;
  for (const auto& [name, t] : params.entries()) {
    const std::size_t n = per_tensor ? 1 : static_cast<std::size_t>(t.shape().front());
    s.entries_.emplace_back(name, std::vector<double>(n, 1.0));
  }
  return s;
}

std::vector<double>& ScalingSet::at(const std::string& name) {
  for (auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("ScalingSet: no layer named '" + name + "'");
}

const std::vector<double>& ScalingSet::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw std::out_of_range("ScalingSet: no layer named '" + name + "'");
}

void ScalingSet::clamp() {
  for (auto& [name, v] : entries_)
    for (double& x : v) x = std::min(1.0, std::max(kOmegaFloor, x));
}

void ScalingSet::fill(double value) {
  for (auto& [name, v] : entries_)
    for (double& x : v) x = value;
}

void ScalingSet::check_aligned(const ScalingSet& omega, const ParameterSet& params, const char* context) {
  if (omega.size() != params.size()) {
    throw std::invalid_argument(std::string(context) + ": scaling set has " +
                                std::to_string(omega.size()) + " entries for " +
                                std::to_string(params.size()) + " layers");
  }
  for (std::size_t i = 0; i < omega.entries_.size(); ++i) {
    const auto& [on, ov] = omega.entries_[i];
    const auto& [pn, pt] = params.entries()[i];
    if (on != pn) {
      throw std::invalid_argument(std::string(context) + ": scaling name mismatch '" + on +
                                  "' vs '" + pn + "'");
    }
    const std::size_t expect = omega.per_tensor_ ? 1 : static_cast<std::size_t>(pt.shape().front());
    if (ov.size() != expect) {
      throw std::invalid_argument(std::string(context) + ": scaling '" + on + "' has " +
                                  std::to_string(ov.size()) + " coefficients, expected " +
                                  std::to_string(expect));
    }
  }
}

}  // namespace tmrd
