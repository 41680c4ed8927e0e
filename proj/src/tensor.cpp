#include "tmrd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tmrd {

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    n *= e;
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(op) + ": produced a non-finite value");
    }
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

thread_local Tape* g_current_tape = nullptr;

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor -------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  const std::int64_t n = shape_numel(shape);
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(static_cast<std::size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  check_finite(t.impl_->data, "full");
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
  const std::int64_t n = shape_numel(shape);
  if (n != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(shape));
  }
  check_finite(data, "from_data");
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const std::vector<int>& Tensor::shape() const {
  if (!impl_) throw std::runtime_error("tensor is undefined");
  return impl_->shape;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data().size()); }

int Tensor::dim(int axis) const { return shape().at(static_cast<std::size_t>(axis)); }

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw std::runtime_error("tensor is undefined");
  return impl_->data;
}

std::vector<double>& Tensor::mutable_data() {
  if (!impl_) throw std::runtime_error("tensor is undefined");
  return impl_->data;
}

double Tensor::value() const {
  if (numel() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
  return data()[0];
}

double Tensor::at(std::int64_t flat_index) const { return data().at(static_cast<std::size_t>(flat_index)); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw std::runtime_error("tensor is undefined");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient buffer");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
  if (!impl_) throw std::runtime_error("tensor is undefined");
  if (g.size() != impl_->data.size()) throw std::invalid_argument("accumulate_grad: size mismatch");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
}

std::vector<double>* grad_buffer(Tensor& t) {
  if (!t.impl_ || t.impl_->grad.empty()) return nullptr;
  return &t.impl_->grad;
}

std::vector<double>& ensure_grad(Tensor& t) {
  if (!t.impl_) throw std::runtime_error("tensor is undefined");
  if (t.impl_->grad.empty()) t.impl_->grad.assign(t.impl_->data.size(), 0.0);
  return t.impl_->grad;
}

// ---- Tape ---------------------------------------------------------------

Tape::Tape() {
  previous_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

void Tape::clear() { ops_.clear(); }

void Tape::backward(Tensor root) {
  if (root.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, shape " + shape_str(root.shape()));
  }
  ensure_grad(root)[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// ---- op helpers ---------------------------------------------------------

namespace {

bool wants_grad(const Tensor& a) { return Tape::current() != nullptr && a.requires_grad(); }

Tensor make_result(std::vector<int> shape, std::vector<double> data, const char* op, bool track) {
  check_finite(data, op);
  Tensor out = Tensor::from_data(std::move(shape), std::move(data));
  out.set_requires_grad(track);
  return out;
}

// Pulls the output gradient if any was accumulated; branches that never
// reach the backward root simply see no gradient and do nothing.
const std::vector<double>* out_grad(Tensor& out) { return grad_buffer(out); }

}  // namespace

// ---- elementwise binary -------------------------------------------------

#define TMRD_BINARY_PROLOGUE(name)                       \
  check_same_shape(a, b, name);                          \
  const auto& av = a.data();                             \
  const auto& bv = b.data();                             \
  std::vector<double> out_data(av.size());               \
  const bool track = wants_grad(a) || wants_grad(b);

Tensor add(const Tensor& a, const Tensor& b) {
  TMRD_BINARY_PROLOGUE("add")
  for (std::size_t i = 0; i < av.size(); ++i) out_data[i] = av[i] + bv[i];
  Tensor out = make_result(a.shape(), std::move(out_data), "add", track);
  if (track) {
    Tape::current()->record([a, b, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto& gb = ensure_grad(b);
        for (std::size_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  TMRD_BINARY_PROLOGUE("sub")
  for (std::size_t i = 0; i < av.size(); ++i) out_data[i] = av[i] - bv[i];
  Tensor out = make_result(a.shape(), std::move(out_data), "sub", track);
  if (track) {
    Tape::current()->record([a, b, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
      }
      if (b.requires_grad()) {
        auto& gb = ensure_grad(b);
        for (std::size_t i = 0; i < g->size(); ++i) gb[i] -= (*g)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  TMRD_BINARY_PROLOGUE("mul")
  for (std::size_t i = 0; i < av.size(); ++i) out_data[i] = av[i] * bv[i];
  Tensor out = make_result(a.shape(), std::move(out_data), "mul", track);
  if (track) {
    Tape::current()->record([a, b, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = ensure_grad(a);
        const auto& bv2 = b.data();
        for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto& gb = ensure_grad(b);
        const auto& av2 = a.data();
        for (std::size_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i] * av2[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  TMRD_BINARY_PROLOGUE("div")
  for (std::size_t i = 0; i < av.size(); ++i) out_data[i] = av[i] / bv[i];
  Tensor out = make_result(a.shape(), std::move(out_data), "div", track);
  if (track) {
    Tape::current()->record([a, b, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      const auto& av2 = a.data();
      const auto& bv2 = b.data();
      if (a.requires_grad()) {
        auto& ga = ensure_grad(a);
        for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i] / bv2[i];
      }
      if (b.requires_grad()) {
        auto& gb = ensure_grad(b);
        for (std::size_t i = 0; i < g->size(); ++i) gb[i] -= (*g)[i] * av2[i] / (bv2[i] * bv2[i]);
      }
    });
  }
  return out;
}

#undef TMRD_BINARY_PROLOGUE

// ---- elementwise unary --------------------------------------------------

namespace {

// fwd(x) -> y, dydx(x, y) -> local derivative
template <typename Fwd, typename Dydx>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Dydx dydx) {
  const auto& av = a.data();
  std::vector<double> out_data(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out_data[i] = fwd(av[i]);
  const bool track = wants_grad(a);
  Tensor out = make_result(a.shape(), std::move(out_data), name, track);
  if (track) {
    Tape::current()->record([a, out, dydx]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& ga = ensure_grad(a);
      const auto& av2 = a.data();
      const auto& ov = out.data();
      for (std::size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i] * dydx(av2[i], ov[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return unary_op(
      a, "pow_scalar", [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor smooth_l1_elem(const Tensor& a) {
  return unary_op(
      a, "smooth_l1_elem",
      [](double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; },
      [](double x, double) { return std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0); });
}

// ---- matmul -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
  if (k != k2) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out_data(static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) {
      const double av_ip = av[static_cast<std::size_t>(i) * k + p];
      for (int j = 0; j < m; ++j)
        out_data[static_cast<std::size_t>(i) * m + j] += av_ip * bv[static_cast<std::size_t>(p) * m + j];
    }
  const bool track = wants_grad(a) || wants_grad(b);
  Tensor out = make_result({n, m}, std::move(out_data), "matmul", track);
  if (track) {
    Tape::current()->record([a, b, out, n, k, m]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      if (a.requires_grad()) {
        auto& ga = ensure_grad(a);
        const auto& bv2 = b.data();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            const double gij = (*g)[static_cast<std::size_t>(i) * m + j];
            for (int p = 0; p < k; ++p)
              ga[static_cast<std::size_t>(i) * k + p] += gij * bv2[static_cast<std::size_t>(p) * m + j];
          }
      }
      if (b.requires_grad()) {
        auto& gb = ensure_grad(b);
        const auto& av2 = a.data();
        for (int i = 0; i < n; ++i)
          for (int p = 0; p < k; ++p) {
            const double aip = av2[static_cast<std::size_t>(i) * k + p];
            for (int j = 0; j < m; ++j)
              gb[static_cast<std::size_t>(p) * m + j] += aip * (*g)[static_cast<std::size_t>(i) * m + j];
          }
      }
    });
  }
  return out;
}

// ---- conv2d -------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 3) throw std::invalid_argument("conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
  if (w.shape().size() != 4) throw std::invalid_argument("conv2d: weight must be [Co,Ci,k,k], got " + shape_str(w.shape()));
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), wci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (wci != ci) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci) +
                                " != weight channels " + std::to_string(wci));
  }
  if (kh != kw || kh % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd");
  if (bias.defined() && (bias.shape().size() != 1 || bias.dim(0) != co)) {
    throw std::invalid_argument("conv2d: bias must be [Cout]");
  }
  const int pad = kh / 2;
  const auto& xv = x.data();
  const auto& wv = w.data();
  std::vector<double> out_data(static_cast<std::size_t>(co) * h * wd, 0.0);
  if (bias.defined()) {
    const auto& bv = bias.data();
    for (int c = 0; c < co; ++c)
      std::fill_n(out_data.begin() + static_cast<std::size_t>(c) * h * wd, h * wd, bv[c]);
  }
  for (int c = 0; c < co; ++c) {
    double* out_c = out_data.data() + static_cast<std::size_t>(c) * h * wd;
    for (int ic = 0; ic < ci; ++ic) {
      const double* in_c = xv.data() + static_cast<std::size_t>(ic) * h * wd;
      const double* w_cc = wv.data() + ((static_cast<std::size_t>(c) * ci + ic) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const double wk = w_cc[ky * kw + kx];
          if (wk == 0.0) continue;
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = out_c + static_cast<std::size_t>(y) * wd;
            const double* irow = in_c + static_cast<std::size_t>(y + dy) * wd + dx;
            for (int xx = x0; xx < x1; ++xx) orow[xx] += wk * irow[xx];
          }
        }
    }
  }
  const bool track = wants_grad(x) || wants_grad(w) || (bias.defined() && wants_grad(bias));
  Tensor out = make_result({co, h, wd}, std::move(out_data), "conv2d", track);
  if (track) {
    Tape::current()->record([x, w, bias, out, ci, co, h, wd, kh, kw, pad]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      const auto& xv2 = x.data();
      const auto& wv2 = w.data();
      if (x.requires_grad()) {
        auto& gx = ensure_grad(x);
        for (int c = 0; c < co; ++c) {
          const double* g_c = g->data() + static_cast<std::size_t>(c) * h * wd;
          for (int ic = 0; ic < ci; ++ic) {
            double* gx_c = gx.data() + static_cast<std::size_t>(ic) * h * wd;
            const double* w_cc = wv2.data() + ((static_cast<std::size_t>(c) * ci + ic) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const double wk = w_cc[ky * kw + kx];
                if (wk == 0.0) continue;
                const int dy = ky - pad, dx = kx - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                for (int y = y0; y < y1; ++y) {
                  const double* grow = g_c + static_cast<std::size_t>(y) * wd;
                  double* gxrow = gx_c + static_cast<std::size_t>(y + dy) * wd + dx;
                  for (int xx = x0; xx < x1; ++xx) gxrow[xx] += wk * grow[xx];
                }
              }
          }
        }
      }
      if (w.requires_grad()) {
        auto& gw = ensure_grad(w);
        for (int c = 0; c < co; ++c) {
          const double* g_c = g->data() + static_cast<std::size_t>(c) * h * wd;
          for (int ic = 0; ic < ci; ++ic) {
            const double* in_c = xv2.data() + static_cast<std::size_t>(ic) * h * wd;
            double* gw_cc = gw.data() + ((static_cast<std::size_t>(c) * ci + ic) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int dy = ky - pad, dx = kx - pad;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                double acc = 0.0;
                for (int y = y0; y < y1; ++y) {
                  const double* grow = g_c + static_cast<std::size_t>(y) * wd;
                  const double* irow = in_c + static_cast<std::size_t>(y + dy) * wd + dx;
                  for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                }
                gw_cc[ky * kw + kx] += acc;
              }
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) {
        auto& gb = ensure_grad(bias);
        for (int c = 0; c < co; ++c) {
          const double* g_c = g->data() + static_cast<std::size_t>(c) * h * wd;
          double acc = 0.0;
          for (int i = 0; i < h * wd; ++i) acc += g_c[i];
          gb[c] += acc;
        }
      }
    });
  }
  return out;
}

// ---- channel_scale ------------------------------------------------------

Tensor channel_scale(const Tensor& w, const Tensor& omega) {
  if (omega.shape().size() != 1) {
    throw std::invalid_argument("channel_scale: omega must be rank-1, got " + shape_str(omega.shape()));
  }
  const int channels = w.dim(0);
  const int olen = omega.dim(0);
  if (olen != channels && olen != 1) {
    throw std::invalid_argument("channel_scale: omega length " + std::to_string(olen) +
                                " does not match leading extent " + std::to_string(channels));
  }
  const auto& wv = w.data();
  const auto& ov = omega.data();
  const std::size_t stride = static_cast<std::size_t>(w.numel()) / channels;
  std::vector<double> out_data(wv.size());
  for (int c = 0; c < channels; ++c) {
    const double oc = ov[olen == 1 ? 0 : c];
    const std::size_t base = c * stride;
    for (std::size_t i = 0; i < stride; ++i) out_data[base + i] = wv[base + i] * oc;
  }
  const bool track = wants_grad(w) || wants_grad(omega);
  Tensor out = make_result(w.shape(), std::move(out_data), "channel_scale", track);
  if (track) {
    Tape::current()->record([w, omega, out, channels, olen, stride]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      const auto& wv2 = w.data();
      const auto& ov2 = omega.data();
      if (w.requires_grad()) {
        auto& gw = ensure_grad(w);
        for (int c = 0; c < channels; ++c) {
          const double oc = ov2[olen == 1 ? 0 : c];
          const std::size_t base = c * stride;
          for (std::size_t i = 0; i < stride; ++i) gw[base + i] += (*g)[base + i] * oc;
        }
      }
      if (omega.requires_grad()) {
        auto& go = ensure_grad(omega);
        for (int c = 0; c < channels; ++c) {
          const std::size_t base = c * stride;
          double acc = 0.0;
          for (std::size_t i = 0; i < stride; ++i) acc += (*g)[base + i] * wv2[base + i];
          go[olen == 1 ? 0 : c] += acc;
        }
      }
    });
  }
  return out;
}

// ---- maxpool2 -----------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
  if (x.shape().size() != 3) throw std::invalid_argument("maxpool2: input must be [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("maxpool2: H and W must be even");
  const int oh = h / 2, ow = w / 2;
  const auto& xv = x.data();
  std::vector<double> out_data(static_cast<std::size_t>(c) * oh * ow);
  std::vector<std::int32_t> argmax(out_data.size());
  for (int ch = 0; ch < c; ++ch) {
    const double* in_c = xv.data() + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const int base = (2 * y) * w + 2 * xx;
        int best = base;
        double bv = in_c[base];
        const int cands[3] = {base + 1, base + w, base + w + 1};
        for (int cand : cands)
          if (in_c[cand] > bv) {
            bv = in_c[cand];
            best = cand;
          }
        const std::size_t oi = static_cast<std::size_t>(ch) * oh * ow + static_cast<std::size_t>(y) * ow + xx;
        out_data[oi] = bv;
        argmax[oi] = best;
      }
  }
  const bool track = wants_grad(x);
  Tensor out = make_result({c, oh, ow}, std::move(out_data), "maxpool2", track);
  if (track) {
    Tape::current()->record([x, out, argmax = std::move(argmax), c, h, w, oh, ow]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      for (int ch = 0; ch < c; ++ch) {
        double* gx_c = gx.data() + static_cast<std::size_t>(ch) * h * w;
        const std::size_t obase = static_cast<std::size_t>(ch) * oh * ow;
        for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i)
          gx_c[argmax[obase + i]] += (*g)[obase + i];
      }
    });
  }
  return out;
}

// ---- softmax ------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const auto& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("softmax: axis out of range for " + shape_str(shape));
  const int n = shape[static_cast<std::size_t>(axis)];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[static_cast<std::size_t>(i)];
  const auto& xv = x.data();
  std::vector<double> out_data(xv.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::size_t base = static_cast<std::size_t>(o) * n * inner + in;
      double mx = xv[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, xv[base + static_cast<std::size_t>(i) * inner]);
      double denom = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(xv[base + static_cast<std::size_t>(i) * inner] - mx);
        out_data[base + static_cast<std::size_t>(i) * inner] = e;
        denom += e;
      }
      for (int i = 0; i < n; ++i) out_data[base + static_cast<std::size_t>(i) * inner] /= denom;
    }
  const bool track = wants_grad(x);
  Tensor out = make_result(shape, std::move(out_data), "softmax", track);
  if (track) {
    Tape::current()->record([x, out, n, outer, inner]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      const auto& s = out.data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::size_t base = static_cast<std::size_t>(o) * n * inner + in;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) {
            const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
            dot += (*g)[idx] * s[idx];
          }
          for (int i = 0; i < n; ++i) {
            const std::size_t idx = base + static_cast<std::size_t>(i) * inner;
            gx[idx] += s[idx] * ((*g)[idx] - dot);
          }
        }
    });
  }
  return out;
}

// ---- hflip --------------------------------------------------------------

Tensor hflip(const Tensor& x) {
  if (x.shape().size() != 3) throw std::invalid_argument("hflip: input must be [C,H,W]");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto& xv = x.data();
  std::vector<double> out_data(xv.size());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y) {
      const std::size_t row = (static_cast<std::size_t>(ch) * h + y) * w;
      for (int xx = 0; xx < w; ++xx) out_data[row + xx] = xv[row + (w - 1 - xx)];
    }
  const bool track = wants_grad(x);
  Tensor out = make_result(x.shape(), std::move(out_data), "hflip", track);
  if (track) {
    Tape::current()->record([x, out, c, h, w]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y) {
          const std::size_t row = (static_cast<std::size_t>(ch) * h + y) * w;
          for (int xx = 0; xx < w; ++xx) gx[row + (w - 1 - xx)] += (*g)[row + xx];
        }
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto& xv = x.data();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const bool track = wants_grad(x);
  Tensor out = make_result({1}, {acc}, "sum", track);
  if (track) {
    Tape::current()->record([x, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      const double gv = (*g)[0];
      for (double& v : gx) v += gv;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const auto& xv = x.data();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const double n = static_cast<double>(xv.size());
  const bool track = wants_grad(x);
  Tensor out = make_result({1}, {acc / n}, "mean", track);
  if (track) {
    Tape::current()->record([x, out, n]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      const double gv = (*g)[0] / n;
      for (double& v : gx) v += gv;
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  const std::int64_t n = shape_numel(shape);
  if (n != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = wants_grad(x);
  Tensor out = make_result(std::move(shape), x.data(), "reshape", track);
  if (track) {
    Tape::current()->record([x, out]() mutable {
      const auto* g = out_grad(out);
      if (!g) return;
      auto& gx = ensure_grad(x);
      for (std::size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

// ---- finite differences --------------------------------------------------

namespace {
// Suppresses recording while finite differences re-evaluate the loss, even
// when the caller holds an active tape.
struct NoTapeGuard {
  Tape* saved;
  NoTapeGuard() : saved(g_current_tape) { g_current_tape = nullptr; }
  ~NoTapeGuard() { g_current_tape = saved; }
};
}  // namespace

double finite_diff_check(const std::function<Tensor()>& loss_fn,
                         const std::vector<Tensor>& leaves, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: loss must be scalar");
    if (!std::isfinite(loss.value())) throw std::runtime_error("finite_diff_check: loss is not finite");
    tape.backward(loss);
    for (const Tensor& leaf : leaves) {
      analytic.push_back(leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.data().size(), 0.0));
    }
  }
  for (Tensor leaf : leaves) leaf.zero_grad();

  NoTapeGuard no_tape;
  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    auto& values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double lp = loss_fn().value();
      values[i] = saved - h;
      const double lm = loss_fn().value();
      values[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw std::runtime_error("finite_diff_check: perturbed loss is not finite");
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[li][i];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace tmrd
