#include "tmrd/refine.hpp"

#include <cmath>
#include <stdexcept>

namespace tmrd {

ParameterSet ema_step(const ParameterSet& theta_t, const ParameterSet& theta_s, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("ema_step: alpha must lie in (0,1), got " + std::to_string(alpha));
  }
  ParameterSet::check_aligned(theta_t, theta_s, "ema_step");
  ParameterSet out;
  for (std::size_t i = 0; i < theta_t.size(); ++i) {
    const auto& [name, t] = theta_t.entries()[i];
    const auto& s = theta_s.entries()[i].second;
    std::vector<double> v(t.data().size());
    const auto& tv = t.data();
    const auto& sv = s.data();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = alpha * tv[j] + (1.0 - alpha) * sv[j];
    out.add(name, Tensor::from_data(t.shape(), std::move(v)));
  }
  return out;
}

ParameterSet ema_unrolled(const ParameterSet& theta_t0,
                          const std::vector<ParameterSet>& student_history, double alpha, int n) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("ema_unrolled: alpha must lie in (0,1)");
  }
  if (n < 1 || static_cast<std::size_t>(n) > student_history.size()) {
    throw std::invalid_argument("ema_unrolled: need history of length >= n, have " +
                                std::to_string(student_history.size()) + " for n=" + std::to_string(n));
  }
  for (const auto& h : student_history) ParameterSet::check_aligned(theta_t0, h, "ema_unrolled");
  ParameterSet out;
  const double alpha_n = std::pow(alpha, n);
  for (std::size_t i = 0; i < theta_t0.size(); ++i) {
    const auto& [name, t0] = theta_t0.entries()[i];
    std::vector<double> v(t0.data().size());
    const auto& t0v = t0.data();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = alpha_n * t0v[j];
    for (int k = 0; k < n; ++k) {
      const double w = (1.0 - alpha) * std::pow(alpha, n - 1 - k);
      const auto& sv = student_history[static_cast<std::size_t>(k)].entries()[i].second.data();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] += w * sv[j];
    }
    out.add(name, Tensor::from_data(t0.shape(), std::move(v)));
  }
  return out;
}

TmrLoss tmr_loss(const DetectorConfig& cfg, const ParameterSet& theta_t, OmegaTensors& omega_t,
                 const ParameterSet& theta_s, OmegaTensors& omega_s,
                 const std::vector<LabeledSample>& batch, double lambda_t, double lambda_s) {
  if (batch.empty()) throw std::invalid_argument("tmr_loss: batch is empty");
  ParameterSet::check_aligned(theta_t, theta_s, "tmr_loss");
  TmrLoss out;
  LossTerms teacher = supervised_loss(cfg, theta_t, batch, &omega_t);
  LossTerms student = supervised_loss(cfg, theta_s, batch, &omega_s);
  out.teacher_term = teacher.total.value();
  out.student_term = student.total.value();
  out.total = add(mul_scalar(teacher.total, lambda_t), mul_scalar(student.total, lambda_s));
  return out;
}

void omega_apply_step(OmegaTensors& leaves, ScalingSet& target, double gamma) {
  for (auto& [name, t] : leaves.entries) {
    if (t.has_grad()) {
      const auto& g = t.grad();
      auto& v = t.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= gamma * g[i];
    }
  }
  omega_store(leaves, target);
  target.clamp();
}

std::vector<double> tmr_optimize(const DetectorConfig& cfg, const ParameterSet& theta_t,
                                 const ParameterSet& theta_s, ScalingSet& omega_t,
                                 ScalingSet& omega_s,
                                 const std::function<std::vector<LabeledSample>()>& next_batch,
                                 double gamma, int n_prime, double lambda_t, double lambda_s) {
  if (n_prime < 1) throw std::invalid_argument("tmr_optimize: n_prime must be >= 1");
  if (!(gamma >= 0.0)) throw std::invalid_argument("tmr_optimize: gamma must be non-negative");
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(n_prime));
  for (int step = 0; step < n_prime; ++step) {
    OmegaTensors ot = omega_leaves(omega_t, true);
    OmegaTensors os = omega_leaves(omega_s, true);
    Tape tape;
    TmrLoss loss = tmr_loss(cfg, theta_t, ot, theta_s, os, next_batch(), lambda_t, lambda_s);
    const double value = loss.total.value();
    if (!std::isfinite(value)) {
      throw std::runtime_error("tmr_optimize: non-finite loss at step " + std::to_string(step));
    }
    trace.push_back(value);
    tape.backward(loss.total);
    omega_apply_step(ot, omega_t, gamma);
    omega_apply_step(os, omega_s, gamma);
  }
  return trace;
}

RefineResult refine_weights(const ParameterSet& theta_t, const ParameterSet& theta_s,
                            const ScalingSet& omega_t, const ScalingSet& omega_s) {
  ParameterSet::check_aligned(theta_t, theta_s, "refine_weights");
  ScalingSet::check_aligned(omega_t, theta_t, "refine_weights");
  ScalingSet::check_aligned(omega_s, theta_s, "refine_weights");
  RefineResult out;
  for (std::size_t i = 0; i < theta_t.size(); ++i) {
    const auto& [name, t] = theta_t.entries()[i];
    const auto& s = theta_s.entries()[i].second;
    const auto& ot = omega_t.entries()[i].second;
    const auto& os = omega_s.entries()[i].second;
    const auto& tv = t.data();
    const auto& sv = s.data();
    std::vector<double> nt(tv.size()), ns(sv.size());
    const int channels = t.shape().front();
    const std::size_t stride = tv.size() / static_cast<std::size_t>(channels);
    for (int c = 0; c < channels; ++c) {
      const std::size_t oc = ot.size() == 1 ? 0 : static_cast<std::size_t>(c);
      const double m = ot[oc] / (ot[oc] + os[oc]);
      const std::size_t base = static_cast<std::size_t>(c) * stride;
      for (std::size_t j = 0; j < stride; ++j) {
        nt[base + j] = m * tv[base + j] + (1.0 - m) * sv[base + j];
        ns[base + j] = (1.0 - m) * tv[base + j] + m * sv[base + j];
      }
    }
    out.teacher.add(name, Tensor::from_data(t.shape(), std::move(nt)));
    out.student.add(name, Tensor::from_data(s.shape(), std::move(ns)));
  }
  return out;
}

}  // namespace tmrd
