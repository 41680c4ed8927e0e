#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tmrd {

// Dense row-major array of 64-bit reals with an optional gradient buffer.
// Tensors are cheap shared handles; the data of a tensor that participates
// in a recorded graph must not be mutated until the tape is cleared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  std::int64_t numel() const;
  int dim(int axis) const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();
  double value() const;  // scalar tensors only
  double at(std::int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();
  void accumulate_grad(const std::vector<double>& g);

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  friend class Tape;
  friend std::vector<double>* grad_buffer(Tensor& t);
  friend std::vector<double>& ensure_grad(Tensor& t);
};

std::string shape_str(const std::vector<int>& shape);

// Linear record of primitive ops. Constructing a Tape makes it the active
// tape for the current thread; destruction restores the previous one.
// Backward replays the recorded ops exactly once, in reverse order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(Tensor root);
  void clear();
  std::size_t size() const { return ops_.size(); }

  static Tape* current();
  void record(std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> ops_;
  Tape* previous_ = nullptr;
};

// ---- primitives --------------------------------------------------------
// Every op validates shapes, rejects non-finite results, and records its
// backward rule on the active tape when any input requires a gradient.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);
// 0.5*x^2 for |x|<1 else |x|-0.5, elementwise
Tensor smooth_l1_elem(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

// x: [Cin,H,W], w: [Cout,Cin,k,k] (odd k, zero padding k/2, stride 1),
// bias: [Cout] or undefined
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias);

// Multiplies slice c along axis 0 by omega[c]; omega of length 1 scales the
// whole tensor. This is the only broadcasting op in the library.
Tensor channel_scale(const Tensor& w, const Tensor& omega);

Tensor maxpool2(const Tensor& x);  // [C,H,W] -> [C,H/2,W/2]

Tensor softmax(const Tensor& x, int axis);

Tensor hflip(const Tensor& x);  // [C,H,W], mirrors the W axis

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

Tensor reshape(const Tensor& x, std::vector<int> shape);

// ---- gradient oracle ---------------------------------------------------

// Compares the tape gradient of loss_fn against central finite differences
// for every coordinate of every leaf. Returns the max relative error
// |analytic - fd| / max(|analytic|, |fd|, 1e-12). loss_fn must be
// deterministic and is re-evaluated with perturbed leaf data.
double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& leaves, double h);

}  // namespace tmrd
